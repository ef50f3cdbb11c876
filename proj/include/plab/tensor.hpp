#pragma once

// Dense f32 kernels. Every reduction runs in a fixed, sequential order so that
// identical inputs produce bit-identical outputs on a given build.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "plab/error.hpp"

namespace plab {

class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      fail(ErrorKind::shape, "buffer of " + std::to_string(data_.size()) +
                                 " elements cannot back a " +
                                 std::to_string(rows_) + "x" +
                                 std::to_string(cols_) + " tensor");
    }
  }

  static Tensor2D identity(std::size_t n) {
    Tensor2D t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
    return t;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<float> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const float> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& buffer() const noexcept { return data_; }

  bool operator==(const Tensor2D&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

inline bool all_finite(std::span<const float> v) {
  for (float x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

inline void require_finite(std::span<const float> v, const char* kernel) {
  if (!all_finite(v)) {
    fail(ErrorKind::input, std::string(kernel) + " produced a non-finite value");
  }
}

/// out = x · w for a single row vector x. Accumulates over k in ascending
/// order; used by both matmul and the model forward so the two agree bitwise.
inline void vec_mat_into(std::span<const float> x, const Tensor2D& w,
                         std::span<float> out) {
  if (x.size() != w.rows() || out.size() != w.cols()) {
    fail(ErrorKind::shape, "vec_mat: vector of " + std::to_string(x.size()) +
                               " against " + std::to_string(w.rows()) + "x" +
                               std::to_string(w.cols()));
  }
  for (float& o : out) o = 0.0f;
  const std::size_t n = w.cols();
  for (std::size_t k = 0; k < x.size(); ++k) {
    const float xk = x[k];
    const float* wr = w.data().data() + k * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += xk * wr[j];
  }
}

inline std::vector<float> vec_mat(std::span<const float> x, const Tensor2D& w) {
  std::vector<float> out(w.cols());
  vec_mat_into(x, w, out);
  return out;
}

inline Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.rows()) {
    fail(ErrorKind::shape, "matmul: " + std::to_string(a.rows()) + "x" +
                               std::to_string(a.cols()) + " times " +
                               std::to_string(b.rows()) + "x" +
                               std::to_string(b.cols()));
  }
  Tensor2D out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) vec_mat_into(a.row(i), b, out.row(i));
  require_finite(out.data(), "matmul");
  return out;
}

/// Compensated (Kahan) summation in f32. Still sequential and deterministic,
/// but keeps long reductions (softmax over a full vocabulary) accurate.
inline float stable_sum(std::span<const float> v) {
  float sum = 0.0f;
  float carry = 0.0f;
  for (float x : v) {
    const float y = x - carry;
    const float t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
  return sum;
}

inline void softmax_inplace(std::span<float> v) {
  if (v.empty()) fail(ErrorKind::shape, "softmax of an empty vector");
  float max_v = v[0];
  for (float x : v) max_v = x > max_v ? x : max_v;
  for (float& x : v) x = std::exp(x - max_v);
  const float total = stable_sum(v);
  for (float& x : v) x /= total;
  require_finite(v, "softmax");
}

inline std::vector<float> softmax(std::span<const float> v) {
  std::vector<float> out(v.begin(), v.end());
  softmax_inplace(out);
  return out;
}

inline void rms_norm_into(std::span<const float> x, std::span<const float> gamma,
                          float eps, std::span<float> out) {
  if (x.size() != gamma.size() || x.size() != out.size()) {
    fail(ErrorKind::shape, "rms_norm: length " + std::to_string(x.size()) +
                               " against gamma of " +
                               std::to_string(gamma.size()));
  }
  if (x.empty()) fail(ErrorKind::shape, "rms_norm of an empty vector");
  float sum_sq = 0.0f;
  for (float v : x) sum_sq += v * v;
  const float inv = 1.0f / std::sqrt(sum_sq / static_cast<float>(x.size()) + eps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gamma[i] * (x[i] * inv);
  require_finite(out, "rms_norm");
}

inline std::vector<float> rms_norm(std::span<const float> x,
                                   std::span<const float> gamma,
                                   float eps = 1e-5f) {
  std::vector<float> out(x.size());
  rms_norm_into(x, gamma, eps, out);
  return out;
}

/// Optional frequency rescaling used by the llama3 checkpoint family.
struct RopeScaling {
  double factor = 1.0;
  double low_freq_factor = 1.0;
  double high_freq_factor = 4.0;
  double original_max_position = 8192.0;
};

struct RopeParams {
  double theta_base = 500000.0;
  std::size_t head_dim = 0;
  bool scaled = false;
  RopeScaling scaling{};

  void validate() const {
    if (head_dim == 0 || head_dim % 2 != 0) {
      fail(ErrorKind::config,
           "rope head_dim must be even, got " + std::to_string(head_dim));
    }
    if (!(theta_base > 0.0)) fail(ErrorKind::config, "rope theta_base must be > 0");
  }

  /// Angular frequency of rotation pair i (0 <= i < head_dim / 2).
  double frequency(std::size_t i) const {
    const double freq = std::pow(theta_base, -2.0 * static_cast<double>(i) /
                                                 static_cast<double>(head_dim));
    if (!scaled) return freq;
    const double wavelen = 2.0 * std::numbers::pi / freq;
    const double low_wavelen = scaling.original_max_position / scaling.low_freq_factor;
    const double high_wavelen = scaling.original_max_position / scaling.high_freq_factor;
    if (wavelen < high_wavelen) return freq;
    if (wavelen > low_wavelen) return freq / scaling.factor;
    const double smooth =
        (scaling.original_max_position / wavelen - scaling.low_freq_factor) /
        (scaling.high_freq_factor - scaling.low_freq_factor);
    return (1.0 - smooth) * freq / scaling.factor + smooth * freq;
  }
};

/// Rotates pairs (i, i + head_dim/2) by position * frequency(i), the
/// rotate-half layout used by the public checkpoints.
inline void rope_apply_inplace(std::span<float> x, std::size_t position,
                               const RopeParams& p) {
  p.validate();
  if (x.size() != p.head_dim) {
    fail(ErrorKind::shape, "rope_apply: vector of " + std::to_string(x.size()) +
                               " for head_dim " + std::to_string(p.head_dim));
  }
  const std::size_t half = p.head_dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double angle = static_cast<double>(position) * p.frequency(i);
    const float c = static_cast<float>(std::cos(angle));
    const float s = static_cast<float>(std::sin(angle));
    const float a = x[i];
    const float b = x[i + half];
    x[i] = a * c - b * s;
    x[i + half] = a * s + b * c;
  }
}

inline std::vector<float> rope_apply(std::span<const float> x, std::size_t position,
                                     const RopeParams& p) {
  std::vector<float> out(x.begin(), x.end());
  rope_apply_inplace(out, position, p);
  return out;
}

inline float l2_norm(std::span<const float> v) {
  float s = 0.0f;
  for (float x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace plab
