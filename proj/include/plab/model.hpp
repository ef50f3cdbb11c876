#pragma once

// Decoder-only transformer runtime with addressable activation sites.
//
// Block layout: x += attn(rms_norm(x)); x += mlp(rms_norm(x)), followed by a
// final rms_norm and the unembedding. Attention is grouped-query with rotary
// position embeddings on queries and keys; the MLP is SiLU-gated.
//
// Weights use the x · W convention (W is [in, out]):
//   tok_embeddings       [vocab, d_model]
//   layers.L.attn_norm   [1, d_model]
//   layers.L.wq          [d_model, n_heads * head_dim]
//   layers.L.wk, .wv     [d_model, n_kv_heads * head_dim]
//   layers.L.wo          [n_heads * head_dim, d_model]
//   layers.L.ffn_norm    [1, d_model]
//   layers.L.w_gate, .w_up [d_model, d_ff]
//   layers.L.w_down      [d_ff, d_model]
//   norm                 [1, d_model]
//   output               [d_model, vocab]   (absent when embeddings are tied)

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "plab/container.hpp"
#include "plab/error.hpp"
#include "plab/hooks.hpp"
#include "plab/tensor.hpp"

namespace plab {

using TokenIds = std::vector<std::uint32_t>;

struct ModelConfig {
  std::size_t n_layers = 1;
  std::size_t d_model = 1;
  std::size_t n_heads = 1;
  std::size_t n_kv_heads = 1;
  std::size_t head_dim = 1;
  std::size_t d_ff = 1;
  std::size_t vocab_size = 1;
  RopeParams rope{};
  float norm_eps = 1e-5f;
  bool tied_embeddings = false;

  void validate() const {
    for (auto [name, v] : {std::pair{"n_layers", n_layers}, {"d_model", d_model},
                           {"n_heads", n_heads}, {"n_kv_heads", n_kv_heads},
                           {"head_dim", head_dim}, {"d_ff", d_ff},
                           {"vocab_size", vocab_size}}) {
      if (v < 1) fail(ErrorKind::config, std::string(name) + " must be >= 1");
    }
    if (n_heads * head_dim != d_model) {
      fail(ErrorKind::config, "n_heads * head_dim must equal d_model");
    }
    if (n_heads % n_kv_heads != 0) {
      fail(ErrorKind::config, "n_heads must be divisible by n_kv_heads");
    }
    if (rope.head_dim != head_dim) fail(ErrorKind::config, "rope.head_dim must equal head_dim");
    rope.validate();
    if (!(norm_eps > 0.0f)) fail(ErrorKind::config, "norm_eps must be > 0");
  }

  std::size_t attn_width() const { return n_heads * head_dim; }
  std::size_t kv_width() const { return n_kv_heads * head_dim; }
  std::size_t group_size() const { return n_heads / n_kv_heads; }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"n_layers", n_layers},     {"d_model", d_model},
                        {"n_heads", n_heads},       {"n_kv_heads", n_kv_heads},
                        {"head_dim", head_dim},     {"d_ff", d_ff},
                        {"vocab_size", vocab_size}, {"rope_theta", rope.theta_base},
                        {"norm_eps", norm_eps},     {"tied_embeddings", tied_embeddings}};
    if (rope.scaled) {
      j["rope_scaling"] = {{"factor", rope.scaling.factor},
                           {"low_freq_factor", rope.scaling.low_freq_factor},
                           {"high_freq_factor", rope.scaling.high_freq_factor},
                           {"original_max_position", rope.scaling.original_max_position}};
    }
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
      c.n_layers = j.at("n_layers").get<std::size_t>();
      c.d_model = j.at("d_model").get<std::size_t>();
      c.n_heads = j.at("n_heads").get<std::size_t>();
      c.n_kv_heads = j.at("n_kv_heads").get<std::size_t>();
      c.head_dim = j.at("head_dim").get<std::size_t>();
      c.d_ff = j.at("d_ff").get<std::size_t>();
      c.vocab_size = j.at("vocab_size").get<std::size_t>();
      c.rope.theta_base = j.value("rope_theta", 500000.0);
      c.rope.head_dim = c.head_dim;
      c.norm_eps = j.value("norm_eps", 1e-5f);
      c.tied_embeddings = j.value("tied_embeddings", false);
      if (j.contains("rope_scaling")) {
        const auto& s = j["rope_scaling"];
        c.rope.scaled = true;
        c.rope.scaling.factor = s.at("factor").get<double>();
        c.rope.scaling.low_freq_factor = s.at("low_freq_factor").get<double>();
        c.rope.scaling.high_freq_factor = s.at("high_freq_factor").get<double>();
        c.rope.scaling.original_max_position = s.at("original_max_position").get<double>();
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::load, std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

/// Every tensor name and shape a config implies.
inline std::map<std::string, std::pair<std::size_t, std::size_t>> expected_weight_shapes(
    const ModelConfig& c) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> s;
  s["tok_embeddings"] = {c.vocab_size, c.d_model};
  s["norm"] = {1, c.d_model};
  if (!c.tied_embeddings) s["output"] = {c.d_model, c.vocab_size};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    s[p + "attn_norm"] = {1, c.d_model};
    s[p + "wq"] = {c.d_model, c.attn_width()};
    s[p + "wk"] = {c.d_model, c.kv_width()};
    s[p + "wv"] = {c.d_model, c.kv_width()};
    s[p + "wo"] = {c.attn_width(), c.d_model};
    s[p + "ffn_norm"] = {1, c.d_model};
    s[p + "w_gate"] = {c.d_model, c.d_ff};
    s[p + "w_up"] = {c.d_model, c.d_ff};
    s[p + "w_down"] = {c.d_ff, c.d_model};
  }
  return s;
}

/// Substituted component outputs, keyed like the activation cache. Only
/// mlp_out, attn_out and head_out sites are honoured.
using Substitutions = std::map<CacheKey, std::vector<float>>;

using SiteObserver =
    std::function<void(const HookSite&, std::size_t position, std::span<const float>)>;

struct ForwardOptions {
  std::set<HookSite> capture;
  const Substitutions* substitutions = nullptr;
  /// Called for every site at every position, after any substitution.
  SiteObserver observer;
  /// Compute logits for every position instead of only the last.
  bool all_logits = true;
};

struct ForwardResult {
  /// [positions, vocab]; a single row holding the last position when
  /// ForwardOptions::all_logits is false.
  Tensor2D logits;
  ActivationCache cache;

  std::span<const float> last_logits() const { return logits.row(logits.rows() - 1); }
};

class Model {
 public:
  Model() = default;

  /// Validates that `weights` holds exactly the tensors the config implies.
  Model(ModelConfig config, std::map<std::string, Tensor2D> weights,
        nlohmann::json metadata = nlohmann::json::object())
      : config_(config) {
    config_.validate();
    const auto expected = expected_weight_shapes(config_);
    for (const auto& [name, shape] : expected) {
      auto it = weights.find(name);
      if (it == weights.end()) fail(ErrorKind::load, "missing tensor " + name);
      if (it->second.rows() != shape.first || it->second.cols() != shape.second) {
        fail(ErrorKind::load, "tensor " + name + " has shape [" +
                                  std::to_string(it->second.rows()) + "," +
                                  std::to_string(it->second.cols()) + "], expected [" +
                                  std::to_string(shape.first) + "," +
                                  std::to_string(shape.second) + "]");
      }
    }
    for (const auto& [name, t] : weights) {
      if (!expected.contains(name)) fail(ErrorKind::load, "unexpected tensor " + name);
    }
    auto store = std::make_shared<Storage>();
    store->container.config = config_.to_json();
    store->container.metadata = std::move(metadata);
    store->container.tensors = std::move(weights);
    const auto& w = store->container.tensors;
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      store->layers.push_back({&w.at(p + "attn_norm"), &w.at(p + "wq"), &w.at(p + "wk"),
                               &w.at(p + "wv"), &w.at(p + "wo"), &w.at(p + "ffn_norm"),
                               &w.at(p + "w_gate"), &w.at(p + "w_up"), &w.at(p + "w_down")});
    }
    store->embeddings = &w.at("tok_embeddings");
    store->final_norm = &w.at("norm");
    store->output = config_.tied_embeddings ? nullptr : &w.at("output");
    store->fingerprint = container_fingerprint(store->container);
    storage_ = std::move(store);
  }

  const ModelConfig& config() const { return config_; }
  const std::map<std::string, Tensor2D>& weights() const { return storage_->container.tensors; }
  const Tensor2D& weight(const std::string& name) const {
    auto it = weights().find(name);
    if (it == weights().end()) fail(ErrorKind::config, "no tensor " + name);
    return it->second;
  }
  const nlohmann::json& metadata() const { return storage_->container.metadata; }
  const Container& container() const { return storage_->container; }

  /// Hash of the manifest and all weights.
  std::uint64_t fingerprint() const { return storage_->fingerprint; }

  ForwardResult forward(const TokenIds& tokens, const ForwardOptions& opts = {}) const;

  /// The additive residual contribution of one head: head_out times the
  /// head's slice of the output projection.
  std::vector<float> head_contribution(std::size_t layer, std::size_t head,
                                       std::span<const float> head_out) const;

  /// Final norm and unembedding of one residual-stream vector.
  std::vector<float> unembed(std::span<const float> resid) const;

 private:
  struct LayerWeights {
    const Tensor2D* attn_norm;
    const Tensor2D* wq;
    const Tensor2D* wk;
    const Tensor2D* wv;
    const Tensor2D* wo;
    const Tensor2D* ffn_norm;
    const Tensor2D* w_gate;
    const Tensor2D* w_up;
    const Tensor2D* w_down;
  };
  struct Storage {
    Container container;
    std::vector<LayerWeights> layers;
    const Tensor2D* embeddings = nullptr;
    const Tensor2D* final_norm = nullptr;
    const Tensor2D* output = nullptr;
    std::uint64_t fingerprint = 0;
  };

  ModelConfig config_{};
  std::shared_ptr<const Storage> storage_;
};

inline std::vector<float> Model::head_contribution(std::size_t layer, std::size_t head,
                                                   std::span<const float> head_out) const {
  if (layer >= config_.n_layers || head >= config_.n_heads) {
    fail(ErrorKind::config, "head_contribution: H" + std::to_string(layer) + "^" +
                                std::to_string(head) + " out of range");
  }
  if (head_out.size() != config_.head_dim) {
    fail(ErrorKind::shape, "head_contribution: vector of " + std::to_string(head_out.size()) +
                               " for head_dim " + std::to_string(config_.head_dim));
  }
  const Tensor2D& wo = *storage_->layers[layer].wo;
  std::vector<float> out(config_.d_model, 0.0f);
  for (std::size_t d = 0; d < config_.head_dim; ++d) {
    const float x = head_out[d];
    const auto row = wo.row(head * config_.head_dim + d);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += x * row[j];
  }
  return out;
}

inline std::vector<float> Model::unembed(std::span<const float> resid) const {
  std::vector<float> normed(config_.d_model);
  rms_norm_into(resid, storage_->final_norm->row(0), config_.norm_eps, normed);
  std::vector<float> logits(config_.vocab_size);
  if (storage_->output) {
    vec_mat_into(normed, *storage_->output, logits);
  } else {
    const Tensor2D& e = *storage_->embeddings;
    for (std::size_t v = 0; v < config_.vocab_size; ++v) {
      const auto row = e.row(v);
      float s = 0.0f;
      for (std::size_t k = 0; k < normed.size(); ++k) s += normed[k] * row[k];
      logits[v] = s;
    }
  }
  require_finite(logits, "unembed");
  return logits;
}

inline ForwardResult Model::forward(const TokenIds& tokens, const ForwardOptions& opts) const {
  if (!storage_) fail(ErrorKind::model, "forward on an empty model");
  if (tokens.empty()) fail(ErrorKind::input, "forward on an empty token sequence");
  const ModelConfig& c = config_;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= c.vocab_size) {
      fail(ErrorKind::input, "token id " + std::to_string(tokens[i]) + " at position " +
                                 std::to_string(i) + " exceeds vocab size " +
                                 std::to_string(c.vocab_size));
    }
  }
  for (const auto& site : opts.capture) site.validate(c.n_layers, c.n_heads);

  const std::size_t n = tokens.size();
  ForwardResult result;
  result.cache.token_len = n;
  result.cache.model_fingerprint = fingerprint();

  const auto emit = [&](const HookSite& site, std::size_t pos, std::span<const float> v) {
    if (opts.capture.contains(site)) {
      result.cache.entries[CacheKey{site, pos}] = std::vector<float>(v.begin(), v.end());
    }
    if (opts.observer) opts.observer(site, pos, v);
  };
  const auto substitute = [&](const HookSite& site, std::size_t pos, std::span<float> v) {
    if (!opts.substitutions) return;
    auto it = opts.substitutions->find(CacheKey{site, pos});
    if (it == opts.substitutions->end()) return;
    if (it->second.size() != v.size()) {
      fail(ErrorKind::shape, "substitution for " + site.name() + " has length " +
                                 std::to_string(it->second.size()));
    }
    std::copy(it->second.begin(), it->second.end(), v.begin());
  };

  Tensor2D resid(n, c.d_model);
  for (std::size_t t = 0; t < n; ++t) {
    const auto e = storage_->embeddings->row(tokens[t]);
    std::copy(e.begin(), e.end(), resid.row(t).begin());
  }

  const float scale = 1.0f / std::sqrt(static_cast<float>(c.head_dim));
  Tensor2D normed(n, c.d_model);
  Tensor2D q(n, c.attn_width());
  Tensor2D k(n, c.kv_width());
  Tensor2D v(n, c.kv_width());
  Tensor2D heads(n, c.attn_width());
  std::vector<float> component(c.d_model);
  std::vector<float> scores(n);
  std::vector<float> gate(c.d_ff);
  std::vector<float> up(c.d_ff);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const LayerWeights& lw = storage_->layers[l];

    for (std::size_t t = 0; t < n; ++t) {
      rms_norm_into(resid.row(t), lw.attn_norm->row(0), c.norm_eps, normed.row(t));
      vec_mat_into(normed.row(t), *lw.wq, q.row(t));
      vec_mat_into(normed.row(t), *lw.wk, k.row(t));
      vec_mat_into(normed.row(t), *lw.wv, v.row(t));
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        rope_apply_inplace(q.row(t).subspan(h * c.head_dim, c.head_dim), t, c.rope);
      }
      for (std::size_t h = 0; h < c.n_kv_heads; ++h) {
        rope_apply_inplace(k.row(t).subspan(h * c.head_dim, c.head_dim), t, c.rope);
      }
    }

    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const std::size_t kvh = h / c.group_size();
      const HookSite pattern_site = HookSite::attn_pattern(l, h);
      const HookSite value_site = HookSite::value_vectors(l, h);
      const HookSite head_site = HookSite::head_out(l, h);
      for (std::size_t s = 0; s < n; ++s) {
        emit(value_site, s, v.row(s).subspan(kvh * c.head_dim, c.head_dim));
      }
      for (std::size_t t = 0; t < n; ++t) {
        const auto qt = q.row(t).subspan(h * c.head_dim, c.head_dim);
        for (std::size_t s = 0; s <= t; ++s) {
          const auto ks = k.row(s).subspan(kvh * c.head_dim, c.head_dim);
          float dot = 0.0f;
          for (std::size_t d = 0; d < c.head_dim; ++d) dot += qt[d] * ks[d];
          scores[s] = dot * scale;
        }
        softmax_inplace(std::span<float>(scores.data(), t + 1));
        for (std::size_t s = t + 1; s < n; ++s) scores[s] = 0.0f;
        emit(pattern_site, t, scores);

        auto out = heads.row(t).subspan(h * c.head_dim, c.head_dim);
        for (float& o : out) o = 0.0f;
        for (std::size_t s = 0; s <= t; ++s) {
          const float a = scores[s];
          const auto vs = v.row(s).subspan(kvh * c.head_dim, c.head_dim);
          for (std::size_t d = 0; d < c.head_dim; ++d) out[d] += a * vs[d];
        }
        substitute(head_site, t, out);
        emit(head_site, t, out);
      }
    }

    const HookSite attn_site = HookSite::attn_out(l);
    for (std::size_t t = 0; t < n; ++t) {
      vec_mat_into(heads.row(t), *lw.wo, component);
      substitute(attn_site, t, component);
      emit(attn_site, t, component);
      auto r = resid.row(t);
      for (std::size_t j = 0; j < c.d_model; ++j) r[j] += component[j];
    }

    const HookSite mlp_site = HookSite::mlp_out(l);
    for (std::size_t t = 0; t < n; ++t) {
      rms_norm_into(resid.row(t), lw.ffn_norm->row(0), c.norm_eps, normed.row(t));
      vec_mat_into(normed.row(t), *lw.w_gate, gate);
      vec_mat_into(normed.row(t), *lw.w_up, up);
      for (std::size_t i = 0; i < c.d_ff; ++i) {
        const float g = gate[i];
        gate[i] = g / (1.0f + std::exp(-g)) * up[i];
      }
      vec_mat_into(gate, *lw.w_down, component);
      substitute(mlp_site, t, component);
      emit(mlp_site, t, component);
      auto r = resid.row(t);
      for (std::size_t j = 0; j < c.d_model; ++j) r[j] += component[j];
    }
  }

  const HookSite final_site = HookSite::resid_final();
  for (std::size_t t = 0; t < n; ++t) emit(final_site, t, resid.row(t));

  const std::size_t first = opts.all_logits ? 0 : n - 1;
  result.logits = Tensor2D(n - first, c.vocab_size);
  for (std::size_t t = first; t < n; ++t) {
    const auto row = unembed(resid.row(t));
    std::copy(row.begin(), row.end(), result.logits.row(t - first).begin());
  }
  const auto last = result.logits.row(result.logits.rows() - 1);
  result.cache.logits.assign(last.begin(), last.end());
  return result;
}

inline void save_model(const Model& model, const std::string& path) {
  write_container(path, model.container(), kModelMagic);
}

/// Loads and validates a PLABMDL1 container. The fingerprint is recomputed
/// from the canonical serialization, so save(load(f)) reproduces f's hash.
inline Model load_model(const std::string& path) {
  Container c = read_container(path, kModelMagic);
  const ModelConfig config = ModelConfig::from_json(c.config);
  return Model(config, std::move(c.tensors), std::move(c.metadata));
}

}  // namespace plab
