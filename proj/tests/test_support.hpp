#pragma once

// Shared fixtures and independent oracles for the test suites.

#include <cmath>
#include <complex>
#include <cstring>
#include <functional>
#include <limits>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "plab/plab.hpp"

#ifndef PLAB_DATA_DIR
#define PLAB_DATA_DIR "data"
#endif

namespace plab::testing {

inline std::filesystem::path data_dir() { return std::filesystem::path(PLAB_DATA_DIR) / "toy"; }

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("plab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

struct Rng {
  std::mt19937_64 gen;
  explicit Rng(std::uint64_t seed) : gen(seed) {}
  double uniform(double lo = -1.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen);
  }
  float f(double lo = -1.0, double hi = 1.0) { return static_cast<float>(uniform(lo, hi)); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(gen); }
  std::vector<float> vec(std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<float> v(n);
    for (auto& x : v) x = f(lo, hi);
    return v;
  }
  Tensor2D tensor(std::size_t r, std::size_t c, double scale = 1.0) {
    Tensor2D t(r, c);
    for (std::size_t i = 0; i < r; ++i)
      for (auto& x : t.row(i)) x = f(-scale, scale);
    return t;
  }
};

/// The bundled toy setup exactly as `make-toy-model` builds it: word
/// tokenizer over the toy corpus, seed-7 model sized to that vocabulary.
inline Workspace toy_workspace(std::uint64_t seed = 7, ToyModelOptions opts = {}, std::size_t threads = 1) {
  Workspace ws;
  ws.questions = load_questions(data_dir() / "corpus");
  ws.identities = IdentityRegistry::from_json(nlohmann::json::parse(read_text_file(data_dir() / "identities.json")));
  ws.pairs = pairs_from_json(nlohmann::json::parse(read_text_file(data_dir() / "pairs.json")));
  ws.tmpl = PromptTemplate(read_text_file(data_dir() / "template.txt"));
  auto tok = std::make_shared<WordTokenizer>(build_word_tokenizer(ws.questions, ws.identities, ws.tmpl));
  opts.vocab_size = tok->vocab_size();
  opts.metadata["tokenizer"] = tok->to_json();
  ws.model = make_toy_model(seed, opts);
  ws.tokenizer = tok;
  ws.threads = threads;
  return ws;
}

/// Shared default toy workspace (built once per process).
inline const Workspace& toy() {
  static const Workspace ws = toy_workspace();
  return ws;
}

/// Rebuilds a model with edited weights.
inline Model with_weights(const Model& m, const std::function<void(std::map<std::string, Tensor2D>&)>& edit) {
  auto w = m.weights();
  edit(w);
  return Model(m.config(), std::move(w), m.metadata());
}

// ---------------------------------------------------------------------------
// Naive double-precision reference transformer: standard multi-head attention
// written from the architecture description, sharing no code with Model.

template <typename T>
using RVec = std::vector<T>;
using DVec = RVec<double>;

template <typename T>
RVec<T> ref_rms(const RVec<T>& x, std::span<const float> g, double eps) {
  T ss = 0;
  for (T v : x) ss += v * v;
  const T inv = T(1) / std::sqrt(ss / static_cast<T>(x.size()) + static_cast<T>(eps));
  RVec<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = g[i] * (x[i] * inv);
  return y;
}

template <typename T>
RVec<T> ref_matvec(const RVec<T>& x, const Tensor2D& w) {
  RVec<T> y(w.cols(), T(0));
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) y[j] += x[i] * static_cast<T>(w(i, j));
  return y;
}

/// Rotates a head slice as complex numbers z_i = x_i + i*x_{i+d/2}.
template <typename T>
void ref_rope(RVec<T>& x, std::size_t offset, std::size_t hd, std::size_t pos, double theta) {
  for (std::size_t i = 0; i < hd / 2; ++i) {
    const double ang = static_cast<double>(pos) * std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
    const std::complex<T> z(x[offset + i], x[offset + i + hd / 2]);
    const auto r = z * std::complex<T>(static_cast<T>(std::cos(ang)), static_cast<T>(std::sin(ang)));
    x[offset + i] = r.real();
    x[offset + i + hd / 2] = r.imag();
  }
}

template <typename T>
struct RefRun {
  std::vector<RVec<T>> logits;               // per position
  std::vector<std::vector<RVec<T>>> attn;    // [layer*n_heads + h][dest] -> row
  std::vector<std::vector<RVec<T>>> values;  // [layer*n_heads + h][src]
};

/// Naive reference transformer in scalar type T: standard multi-head
/// attention written from the architecture description, sharing no code with
/// Model.
template <typename T = double>
RefRun<T> reference_forward(const Model& m, const TokenIds& tokens) {
  using V = RVec<T>;
  const auto& c = m.config();
  const std::size_t n = tokens.size(), hd = c.head_dim;
  RefRun<T> run;
  run.attn.resize(c.n_layers * c.n_heads);
  run.values.resize(c.n_layers * c.n_heads);
  std::vector<V> x(n);
  const auto& emb = m.weight("tok_embeddings");
  for (std::size_t t = 0; t < n; ++t) {
    const auto r = emb.row(tokens[t]);
    x[t] = V(r.begin(), r.end());
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    std::vector<V> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const V h = ref_rms(x[t], m.weight(p + "attn_norm").row(0), c.norm_eps);
      q[t] = ref_matvec(h, m.weight(p + "wq"));
      k[t] = ref_matvec(h, m.weight(p + "wk"));
      v[t] = ref_matvec(h, m.weight(p + "wv"));
      for (std::size_t hh = 0; hh < c.n_heads; ++hh) ref_rope(q[t], hh * hd, hd, t, c.rope.theta_base);
      for (std::size_t hh = 0; hh < c.n_kv_heads; ++hh) ref_rope(k[t], hh * hd, hd, t, c.rope.theta_base);
    }
    std::vector<V> concat(n, V(c.d_model, T(0)));
    for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
      const std::size_t kv = hh * c.n_kv_heads / c.n_heads;
      auto& pat = run.attn[l * c.n_heads + hh];
      auto& vals = run.values[l * c.n_heads + hh];
      for (std::size_t s = 0; s < n; ++s) vals.emplace_back(v[s].begin() + kv * hd, v[s].begin() + (kv + 1) * hd);
      for (std::size_t t = 0; t < n; ++t) {
        V a(n, T(0));
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          T d = 0;
          for (std::size_t i = 0; i < hd; ++i) d += q[t][hh * hd + i] * k[s][kv * hd + i];
          a[s] = d * (T(1) / std::sqrt(static_cast<T>(hd)));
          mx = std::max(mx, a[s]);
        }
        T z = 0;
        for (std::size_t s = 0; s <= t; ++s) z += (a[s] = std::exp(a[s] - mx));
        for (std::size_t s = 0; s <= t; ++s) a[s] /= z;
        for (std::size_t s = 0; s <= t; ++s)
          for (std::size_t i = 0; i < hd; ++i) concat[t][hh * hd + i] += a[s] * vals[s][i];
        pat.push_back(a);
      }
    }
    for (std::size_t t = 0; t < n; ++t) {
      const V o = ref_matvec(concat[t], m.weight(p + "wo"));
      for (std::size_t j = 0; j < c.d_model; ++j) x[t][j] += o[j];
      const V h = ref_rms(x[t], m.weight(p + "ffn_norm").row(0), c.norm_eps);
      V g = ref_matvec(h, m.weight(p + "w_gate"));
      const V u = ref_matvec(h, m.weight(p + "w_up"));
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = g[i] / (T(1) + std::exp(-g[i])) * u[i];
      const V d = ref_matvec(g, m.weight(p + "w_down"));
      for (std::size_t j = 0; j < c.d_model; ++j) x[t][j] += d[j];
    }
  }
  for (std::size_t t = 0; t < n; ++t) {
    const V h = ref_rms(x[t], m.weight("norm").row(0), c.norm_eps);
    if (c.tied_embeddings) {
      V lg(c.vocab_size, T(0));
      for (std::size_t vv = 0; vv < c.vocab_size; ++vv)
        for (std::size_t j = 0; j < c.d_model; ++j) lg[vv] += h[j] * static_cast<T>(emb(vv, j));
      run.logits.push_back(lg);
    } else {
      run.logits.push_back(ref_matvec(h, m.weight("output")));
    }
  }
  return run;
}

inline float max_abs_diff(std::span<const float> a, std::span<const float> b) {
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bit_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

// ---------------------------------------------------------------------------
// Small constructed models.

inline ModelConfig tiny_config(std::size_t n_heads, std::size_t n_kv_heads, std::size_t head_dim = 4,
                        std::size_t n_layers = 1, std::size_t vocab = 11) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.n_kv_heads = n_kv_heads;
  c.head_dim = head_dim;
  c.d_model = n_heads * head_dim;
  c.d_ff = 12;
  c.vocab_size = vocab;
  c.rope = RopeParams{10000.0, head_dim};
  return c;
}

inline Model random_model(const ModelConfig& c, std::uint64_t seed, double scale = 0.8) {
  Rng rng(seed);
  std::map<std::string, Tensor2D> w;
  for (const auto& [name, shape] : expected_weight_shapes(c)) {
    w[name] = rng.tensor(shape.first, shape.second, scale);
    if (name.find("norm") != std::string::npos) {
      for (auto& x : w[name].row(0)) x = 1.0f + 0.1f * x;
    }
  }
  return Model(c, std::move(w));
}

// The hand-weighted single-layer model: d_model 4, one head, d_ff 2.
inline Model hand_model(bool zero_components) {
  ModelConfig c = tiny_config(1, 1, 4, 1, 3);
  c.d_ff = 2;
  std::map<std::string, Tensor2D> w;
  w["tok_embeddings"] = Tensor2D(3, 4, {1, 2, 3, 4, 0.5f, -1, 0, 2, -1, 1, -1, 1});
  w["norm"] = Tensor2D(1, 4, {1, 1, 1, 1});
  w["output"] = Tensor2D(4, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 1, 1});
  const std::string p = "layers.0.";
  w[p + "attn_norm"] = Tensor2D(1, 4, {1, 1, 1, 1});
  w[p + "ffn_norm"] = Tensor2D(1, 4, {1, 1, 1, 1});
  w[p + "wq"] = Tensor2D::identity(4);
  w[p + "wk"] = Tensor2D::identity(4);
  w[p + "wv"] = Tensor2D::identity(4);
  Tensor2D wo = Tensor2D::identity(4);
  for (auto& x : wo.data()) x *= 0.5f;
  w[p + "wo"] = wo;
  w[p + "w_gate"] = Tensor2D(4, 2, {1, 0, 0, 1, 0, 0, 1, -1});
  w[p + "w_up"] = Tensor2D(4, 2, {0.5f, 0, 0, 0.5f, 1, 0, 0, 1});
  w[p + "w_down"] = Tensor2D(2, 4, {1, 0, 0, 0, 0, 0, 1, 0});
  if (zero_components) {
    w[p + "wo"] = Tensor2D(4, 4);
    w[p + "w_down"] = Tensor2D(2, 4);
  }
  return Model(c, std::move(w));
}

inline TokenIds some_tokens(const Model& m, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  TokenIds t(n);
  for (auto& x : t) x = static_cast<std::uint32_t>(rng.index(m.config().vocab_size));
  return t;
}

// Textbook multi-head attention (every head owns its key and value slice),
// composed from the tensor-core kernels, which have their own oracles.
inline Tensor2D standard_mha_logits(const Model& m, const TokenIds& tokens) {
  const auto& c = m.config();
  const std::size_t n = tokens.size(), hd = c.head_dim;
  Tensor2D x(n, c.d_model);
  for (std::size_t t = 0; t < n; ++t) {
    const auto e = m.weight("tok_embeddings").row(tokens[t]);
    std::copy(e.begin(), e.end(), x.row(t).begin());
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    std::vector<std::vector<float>> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const auto h = rms_norm(x.row(t), m.weight(p + "attn_norm").row(0), c.norm_eps);
      q[t] = vec_mat(h, m.weight(p + "wq"));
      k[t] = vec_mat(h, m.weight(p + "wk"));
      v[t] = vec_mat(h, m.weight(p + "wv"));
    }
    Tensor2D concat(n, c.d_model);
    for (std::size_t head = 0; head < c.n_heads; ++head) {
      const auto slice = [&](const std::vector<float>& row, std::size_t t) {
        return rope_apply(std::span<const float>(row).subspan(head * hd, hd), t, c.rope);
      };
      for (std::size_t t = 0; t < n; ++t) {
        const auto qt = slice(q[t], t);
        std::vector<float> scores(t + 1);
        for (std::size_t s = 0; s <= t; ++s) {
          const auto ks = slice(k[s], s);
          float dot = 0.0f;
          for (std::size_t d = 0; d < hd; ++d) dot += qt[d] * ks[d];
          scores[s] = dot * (1.0f / std::sqrt(static_cast<float>(hd)));
        }
        const auto a = softmax(scores);
        for (std::size_t s = 0; s <= t; ++s)
          for (std::size_t d = 0; d < hd; ++d) concat(t, head * hd + d) += a[s] * v[s][head * hd + d];
      }
    }
    for (std::size_t t = 0; t < n; ++t) {
      const auto o = vec_mat(concat.row(t), m.weight(p + "wo"));
      for (std::size_t j = 0; j < c.d_model; ++j) x(t, j) += o[j];
      const auto h = rms_norm(x.row(t), m.weight(p + "ffn_norm").row(0), c.norm_eps);
      auto g = vec_mat(h, m.weight(p + "w_gate"));
      const auto u = vec_mat(h, m.weight(p + "w_up"));
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = g[i] / (1.0f + std::exp(-g[i])) * u[i];
      const auto d = vec_mat(g, m.weight(p + "w_down"));
      for (std::size_t j = 0; j < c.d_model; ++j) x(t, j) += d[j];
    }
  }
  Tensor2D logits(n, c.vocab_size);
  for (std::size_t t = 0; t < n; ++t) {
    const auto h = rms_norm(x.row(t), m.weight("norm").row(0), c.norm_eps);
    const auto lg = vec_mat(h, m.weight("output"));
    std::copy(lg.begin(), lg.end(), logits.row(t).begin());
  }
  return logits;
}

// Layer 0's first KV group reads only a dedicated embedding dimension that is
// nonzero on racial identity tokens, so its value vectors vanish elsewhere.
inline Model plant_racial_head(const Workspace& ws) {
  const std::size_t dim = ws.model.config().d_model - 1;
  const std::size_t hd = ws.model.config().head_dim;
  return with_weights(ws.model, [&](std::map<std::string, Tensor2D>& w) {
    auto& emb = w.at("tok_embeddings");
    for (std::size_t t = 0; t < emb.rows(); ++t) emb(t, dim) = 0.0f;
    for (const auto& id : ws.identities.personas()) {
      if (id.category == IdentityCategory::racial) emb(*ws.tokenizer->single_token(" " + id.surface), dim) = 8.0f;
    }
    auto& wv = w.at("layers.0.wv");
    for (std::size_t r = 0; r < wv.rows(); ++r)
      for (std::size_t c = 0; c < hd; ++c) wv(r, c) = r == dim ? 10.0f : 0.0f;
  });
}


}  // namespace plab::testing
