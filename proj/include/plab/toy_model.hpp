#pragma once

// Seeded toy models for tests and the hermetic pipeline.

#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>

#include "plab/model.hpp"

namespace plab {

struct ToyModelOptions {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 2;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 256;
  double rope_theta = 500000.0;
  bool tied_embeddings = false;
  /// Layers whose attention output projection is zeroed, so attention adds
  /// nothing to the residual stream there.
  std::set<std::size_t> attention_disabled_layers;
  /// Stored verbatim in the model metadata (e.g. the word tokenizer).
  nlohmann::json metadata = nlohmann::json::object();
};

/// Uniform [-1, 1) draws from the raw mt19937_64 stream, which is specified
/// bit-for-bit by the standard (unlike the std distributions).
class ToyRng {
 public:
  explicit ToyRng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53 * 2.0 - 1.0; }

 private:
  std::mt19937_64 engine_;
};

inline ModelConfig toy_config(const ToyModelOptions& o) {
  ModelConfig c;
  c.n_layers = o.n_layers;
  c.d_model = o.d_model;
  c.n_heads = o.n_heads;
  c.n_kv_heads = o.n_kv_heads;
  c.head_dim = o.n_heads ? o.d_model / o.n_heads : 0;
  c.d_ff = o.d_ff;
  c.vocab_size = o.vocab_size;
  c.rope.theta_base = o.rope_theta;
  c.rope.head_dim = c.head_dim;
  c.tied_embeddings = o.tied_embeddings;
  c.validate();
  return c;
}

inline Model make_toy_model(std::uint64_t seed, const ToyModelOptions& o = {}) {
  const ModelConfig c = toy_config(o);
  ToyRng rng(seed);
  std::map<std::string, Tensor2D> w;
  const auto fill = [&](std::size_t rows, std::size_t cols, double scale) {
    Tensor2D t(rows, cols);
    for (float& x : t.data()) x = static_cast<float>(rng.uniform() * scale);
    return t;
  };
  const auto gain = [&](std::size_t n) {
    Tensor2D t(1, n);
    for (float& x : t.data()) x = static_cast<float>(1.0 + 0.1 * rng.uniform());
    return t;
  };
  // Uniform on [-a, a] has variance a^2 / 3; these give unit-variance
  // embeddings and roughly variance-preserving projections.
  const auto proj = [](std::size_t fan_in, double g) { return g * std::sqrt(3.0 / fan_in); };

  w["tok_embeddings"] = fill(c.vocab_size, c.d_model, std::sqrt(3.0));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    w[p + "attn_norm"] = gain(c.d_model);
    w[p + "wq"] = fill(c.d_model, c.attn_width(), proj(c.d_model, 2.0));
    w[p + "wk"] = fill(c.d_model, c.kv_width(), proj(c.d_model, 2.0));
    w[p + "wv"] = fill(c.d_model, c.kv_width(), proj(c.d_model, 1.0));
    w[p + "wo"] = fill(c.attn_width(), c.d_model, proj(c.attn_width(), 1.0));
    if (o.attention_disabled_layers.contains(l)) w[p + "wo"] = Tensor2D(c.attn_width(), c.d_model);
    w[p + "ffn_norm"] = gain(c.d_model);
    w[p + "w_gate"] = fill(c.d_model, c.d_ff, proj(c.d_model, 1.0));
    w[p + "w_up"] = fill(c.d_model, c.d_ff, proj(c.d_model, 1.0));
    w[p + "w_down"] = fill(c.d_ff, c.d_model, proj(c.d_ff, 1.0));
  }
  w["norm"] = gain(c.d_model);
  if (!c.tied_embeddings) w["output"] = fill(c.d_model, c.vocab_size, proj(c.d_model, 2.0));

  nlohmann::json meta = o.metadata;
  meta["generator"] = {{"kind", "toy"}, {"seed", seed}};
  return Model(c, std::move(w), std::move(meta));
}

}  // namespace plab
