#pragma once

// Exact vector-space primitives: cosine similarity, angular deviation,
// projection onto a base direction and weighted moments.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prunescope/errors.hpp"
#include "prunescope/numeric.hpp"

namespace prunescope {

/// A nonempty vector of finite doubles.
class RealVector {
 public:
  RealVector(std::initializer_list<double> values)
      : RealVector(std::vector<double>(values)) {}

  explicit RealVector(std::vector<double> values) : values_(std::move(values)) {
    if (values_.empty()) throw ValidationError("RealVector: dim must be >= 1");
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i]))
        throw ValidationError("RealVector: entry " + std::to_string(i) +
                              " is not finite");
    }
  }

  RealVector(std::span<const double> values)
      : RealVector(std::vector<double>(values.begin(), values.end())) {}

  static RealVector zeros(std::size_t dim) {
    return RealVector(std::vector<double>(dim, 0.0));
  }

  std::size_t dim() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<const double> values() const { return values_; }
  operator std::span<const double>() const { return values_; }
  const std::vector<double>& vec() const { return values_; }

  double norm_sq() const { return prunescope::norm_sq(values_); }
  double norm() const { return std::sqrt(norm_sq()); }

  friend bool operator==(const RealVector&, const RealVector&) = default;

 private:
  std::vector<double> values_;
};

inline RealVector operator+(const RealVector& a, const RealVector& b) {
  if (a.dim() != b.dim()) throw ShapeError("vector add: dim mismatch");
  std::vector<double> out(a.dim());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return RealVector(std::move(out));
}

inline RealVector operator-(const RealVector& a, const RealVector& b) {
  if (a.dim() != b.dim()) throw ShapeError("vector sub: dim mismatch");
  std::vector<double> out(a.dim());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return RealVector(std::move(out));
}

inline RealVector operator*(double s, const RealVector& a) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) x *= s;
  return RealVector(std::move(out));
}

/// delta = parallel + orthogonal with parallel along base.
struct OrthogonalSplit {
  RealVector parallel;
  RealVector orthogonal;
  double base_norm_sq = 0.0;
};

struct WeightedMoments {
  double mean = 0.0;
  double second_moment = 0.0;
  double variance = 0.0;
};

namespace detail {

inline void require_same_dim(std::span<const double> a, std::span<const double> b,
                             const char* op) {
  if (a.size() != b.size())
    throw ShapeError(std::string(op) + ": dim mismatch (" + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()) + ")");
}

inline double require_positive_norm(std::span<const double> v, const char* op,
                                    const char* arg) {
  const double n = std::sqrt(norm_sq(v));
  if (!(n > 0.0))
    throw DomainError(std::string(op) + ": argument '" + arg + "' has zero norm");
  return n;
}

}  // namespace detail

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  detail::require_same_dim(a, b, "cosine_similarity");
  const double na = detail::require_positive_norm(a, "cosine_similarity", "a");
  const double nb = detail::require_positive_norm(b, "cosine_similarity", "b");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

/// 1 - cos(a, b), evaluated as |a/|a| - b/|b||^2 / 2 so that small angles keep
/// their relative precision instead of cancelling against 1.
inline double angular_deviation(std::span<const double> a, std::span<const double> b) {
  detail::require_same_dim(a, b, "angular_deviation");
  const double na = detail::require_positive_norm(a, "angular_deviation", "a");
  const double nb = detail::require_positive_norm(b, "angular_deviation", "b");
  const double chord_sq = sum_of(a.size(), [&](std::size_t i) {
    const double d = a[i] / na - b[i] / nb;
    return d * d;
  });
  return std::clamp(0.5 * chord_sq, 0.0, 2.0);
}

inline OrthogonalSplit decompose_orthogonal(std::span<const double> base,
                                            std::span<const double> delta) {
  detail::require_same_dim(base, delta, "decompose_orthogonal");
  const double base_sq = norm_sq(base);
  if (!(base_sq > 0.0)) throw DomainError("decompose_orthogonal: argument 'base' has zero norm");
  const double coef = dot(base, delta) / base_sq;
  std::vector<double> par(base.size()), orth(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    par[i] = coef * base[i];
    orth[i] = delta[i] - par[i];
  }
  return {RealVector(std::move(par)), RealVector(std::move(orth)), base_sq};
}

/// |delta_perp|^2 / |base|^2.
inline double relative_orthogonal_magnitude(std::span<const double> base,
                                            std::span<const double> delta) {
  const OrthogonalSplit split = decompose_orthogonal(base, delta);
  return split.orthogonal.norm_sq() / split.base_norm_sq;
}

inline double clamp_variance(double raw) {
  return (raw < 0.0 && raw >= -kVarianceClamp) ? 0.0 : raw;
}

/// Mean, second moment and variance of `values` under `weights`.
///
/// The variance is taken about the computed mean (corrected two-pass), which
/// equals second_moment - mean^2 algebraically but does not cancel when the
/// mean dominates the spread.
inline WeightedMoments weighted_moments(std::span<const double> values,
                                        std::span<const double> weights,
                                        double sum_tolerance = kProbSumTolerance) {
  detail::require_same_dim(values, weights, "weighted_moments");
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(weights[i] >= 0.0))
      throw ValidationError("weighted_moments: weight " + std::to_string(i) + " is negative");
  }
  const double total = sum(weights);
  if (std::abs(total - 1.0) > sum_tolerance)
    throw ValidationError("weighted_moments: weights sum to " + std::to_string(total) +
                          ", expected 1");
  const std::size_t n = values.size();
  WeightedMoments m;
  m.mean = sum_of(n, [&](std::size_t i) { return weights[i] * values[i]; });
  m.second_moment = sum_of(n, [&](std::size_t i) { return weights[i] * values[i] * values[i]; });
  const double centered_sq = sum_of(n, [&](std::size_t i) {
    const double d = values[i] - m.mean;
    return weights[i] * d * d;
  });
  const double centered = sum_of(n, [&](std::size_t i) { return weights[i] * (values[i] - m.mean); });
  m.variance = clamp_variance(centered_sq - centered * centered);
  if (m.variance < 0.0)
    throw InvariantError("weighted_moments: negative variance " + std::to_string(m.variance));
  return m;
}

}  // namespace prunescope
