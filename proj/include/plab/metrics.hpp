#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "plab/error.hpp"

namespace plab {

/// The four answer-option logits (A, B, C, D) read from one run.
struct OptionLogits {
  std::array<double, 4> values{};
  std::size_t correct = 0;

  static OptionLogits from_logits(std::span<const float> logits,
                                  const std::array<std::uint32_t, 4>& option_ids,
                                  std::size_t correct) {
    if (correct >= 4) fail(ErrorKind::input, "correct option index out of range");
    OptionLogits o;
    o.correct = correct;
    for (std::size_t k = 0; k < 4; ++k) {
      if (option_ids[k] >= logits.size()) fail(ErrorKind::input, "option token id outside vocabulary");
      o.values[k] = logits[option_ids[k]];
    }
    return o;
  }

  double mean() const { return (values[0] + values[1] + values[2] + values[3]) / 4.0; }
  double correct_logit() const { return values[correct]; }

  bool operator==(const OptionLogits&) const = default;
};

/// Δ_r: change in the correct option's logit minus the change in the mean
/// option logit, between a patched run and the corrupt run.
inline double relative_logit_diff(const OptionLogits& patched, const OptionLogits& corrupt) {
  if (patched.correct != corrupt.correct) {
    fail(ErrorKind::input, "relative_logit_diff: runs disagree on the correct option");
  }
  return (patched.correct_logit() - corrupt.correct_logit()) - (patched.mean() - corrupt.mean());
}

/// True iff the correct option's logit is strictly greater than every other.
inline bool is_max(const OptionLogits& o) {
  for (std::size_t k = 0; k < 4; ++k) {
    if (k != o.correct && !(o.values[o.correct] > o.values[k])) return false;
  }
  return true;
}

/// Probability of the correct option's token under the full-vocabulary
/// softmax, evaluated in double precision. With `renormalize`, the softmax
/// runs over the four option logits only.
inline double correct_answer_prob(std::span<const float> logits,
                                  const std::array<std::uint32_t, 4>& option_ids,
                                  std::size_t correct, bool renormalize = false) {
  if (correct >= 4) fail(ErrorKind::input, "correct option index out of range");
  for (std::size_t a = 0; a < 4; ++a) {
    if (option_ids[a] >= logits.size()) fail(ErrorKind::input, "option token id outside vocabulary");
    for (std::size_t b = a + 1; b < 4; ++b) {
      if (option_ids[a] == option_ids[b]) fail(ErrorKind::input, "duplicate option token ids");
    }
  }
  const double target = logits[option_ids[correct]];
  double max_v = -std::numeric_limits<double>::infinity();
  double total = 0.0;
  if (renormalize) {
    for (auto id : option_ids) max_v = std::max(max_v, static_cast<double>(logits[id]));
    for (auto id : option_ids) total += std::exp(static_cast<double>(logits[id]) - max_v);
  } else {
    for (float v : logits) max_v = std::max(max_v, static_cast<double>(v));
    for (float v : logits) total += std::exp(static_cast<double>(v) - max_v);
  }
  return std::exp(target - max_v) / total;
}

namespace detail {

/// Continued fraction for the regularized incomplete beta (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta function I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Two-sided p-value of a Student t statistic.
inline double student_t_two_sided_p(double t, double df) {
  if (!std::isfinite(t)) return 0.0;
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
};

/// Paired t-test on d = x - y with n - 1 degrees of freedom. All-zero
/// differences give (T = 0, p = 1); any other constant difference has no
/// defined statistic and is rejected.
inline TTestResult paired_t_test(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) fail(ErrorKind::input, "paired_t_test: samples differ in length");
  const std::size_t n = x.size();
  if (n < 2) fail(ErrorKind::input, "paired_t_test: need at least two pairs");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = x[i] - y[i];
  const double df = static_cast<double>(n - 1);
  if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) return {0.0, 1.0, df};
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double var = ss / df;
  if (!(var > 0.0)) fail(ErrorKind::degenerate, "paired_t_test: differences have zero variance");
  const double t = mean / std::sqrt(var / static_cast<double>(n));
  return {t, student_t_two_sided_p(t, df), df};
}

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.
inline TTestResult welch_t_test(std::span<const double> x, std::span<const double> y) {
  if (x.size() < 2 || y.size() < 2) fail(ErrorKind::input, "welch_t_test: need at least two samples each");
  const auto moments = [](std::span<const double> v) {
    double m = 0.0;
    for (double a : v) m += a;
    m /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double a : v) ss += (a - m) * (a - m);
    return std::pair{m, ss / static_cast<double>(v.size() - 1)};
  };
  const auto [mx, vx] = moments(x);
  const auto [my, vy] = moments(y);
  const double sx = vx / static_cast<double>(x.size());
  const double sy = vy / static_cast<double>(y.size());
  if (!(sx + sy > 0.0)) {
    if (mx == my) return {0.0, 1.0, static_cast<double>(x.size() + y.size() - 2)};
    fail(ErrorKind::degenerate, "welch_t_test: both samples have zero variance");
  }
  const double t = (mx - my) / std::sqrt(sx + sy);
  const double df = (sx + sy) * (sx + sy) /
                    (sx * sx / static_cast<double>(x.size() - 1) +
                     sy * sy / static_cast<double>(y.size() - 1));
  return {t, student_t_two_sided_p(t, df), df};
}

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double a : v) s += a;
  return s / static_cast<double>(v.size());
}

}  // namespace plab
