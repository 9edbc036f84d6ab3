#pragma once

// Second-order estimators of pruning-induced deviation, each paired with the
// exact quantity it approximates, and an empirical convergence-order probe.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prunescope/distributions.hpp"
#include "prunescope/errors.hpp"
#include "prunescope/numeric.hpp"
#include "prunescope/vecmath.hpp"

namespace prunescope {

enum class Space { embedding, logit, probability };
enum class Metric { angular_deviation, kl };

inline std::string_view to_string(Space s) {
  switch (s) {
    case Space::embedding: return "embedding";
    case Space::logit: return "logit";
    case Space::probability: return "probability";
  }
  return "?";
}

inline std::string_view to_string(Metric m) {
  return m == Metric::kl ? "kl" : "angular_deviation";
}

struct DeviationEstimate {
  double estimated = 0.0;
  double exact = 0.0;
  double abs_error = 0.0;  // estimated - exact, signed
  Space space = Space::embedding;
  Metric metric = Metric::angular_deviation;
};

namespace detail {

inline DeviationEstimate make_estimate(double estimated, double exact, Space space,
                                       Metric metric) {
  return {estimated, exact, estimated - exact, space, metric};
}

}  // namespace detail

/// 1 - cos(h, h + dh) ~= |dh_perp|^2 / (2 |h|^2). Applies equally to logits.
inline DeviationEstimate est_angular_deviation_linear(std::span<const double> base,
                                                      std::span<const double> delta,
                                                      Space space = Space::embedding) {
  const double estimated = 0.5 * relative_orthogonal_magnitude(base, delta);
  std::vector<double> moved(base.size());
  for (std::size_t i = 0; i < moved.size(); ++i) moved[i] = base[i] + delta[i];
  const double exact = angular_deviation(base, moved);
  return detail::make_estimate(estimated, exact, space, Metric::angular_deviation);
}

/// 1 - cos(p, q) ~= Var_r(dz) / (2 T^2) with r_i = p_i^2 / |p|^2.
inline DeviationEstimate est_angular_deviation_prob(const ProbDist& p,
                                                    std::span<const double> delta_z,
                                                    double temperature) {
  const ProbDist q = closed_form_perturbed(p, delta_z, temperature);
  const ProbDist r = squared_weight_dist(p);
  const double var_r = weighted_moments(delta_z, r.values()).variance;
  const double estimated = var_r / (2.0 * temperature * temperature);
  const double exact = angular_deviation(p.values(), q.values());
  return detail::make_estimate(estimated, exact, Space::probability,
                               Metric::angular_deviation);
}

/// The same second-order term written without r:
///   1/(2T^2 |p|^2) [ sum p_i^2 (dz_i - mu)^2 - (sum p_i^2 dz_i - |p|^2 mu)^2 / |p|^2 ]
/// with mu = E_p[dz].
inline double est_angular_deviation_prob_explicit(const ProbDist& p,
                                                  std::span<const double> delta_z,
                                                  double temperature) {
  detail::require_same_dim(p.values(), delta_z, "est_angular_deviation_prob_explicit");
  detail::require_positive_temperature(temperature, "est_angular_deviation_prob_explicit");
  // The bracket cancels when r is concentrated, so the sums are carried in
  // extended precision.
  using Wide = long double;
  const std::size_t n = p.dim();
  Wide p_sq = 0, mu = 0;
  for (std::size_t i = 0; i < n; ++i) {
    p_sq += static_cast<Wide>(p[i]) * p[i];
    mu += static_cast<Wide>(p[i]) * delta_z[i];
  }
  Wide spread = 0, weighted = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Wide pi2 = static_cast<Wide>(p[i]) * p[i];
    const Wide d = delta_z[i] - mu;
    spread += pi2 * d * d;
    weighted += pi2 * delta_z[i];
  }
  const Wide tilt = weighted - p_sq * mu;
  const Wide bracket = spread - tilt * tilt / p_sq;
  return clamp_variance(static_cast<double>(bracket / p_sq)) / (2.0 * temperature * temperature);
}

/// KL(p || q) ~= Var_p(dz) / (2 T^2).
inline DeviationEstimate est_kl(const ProbDist& p, std::span<const double> delta_z,
                                double temperature) {
  const double var_p = weighted_moments(delta_z, p.values()).variance;
  detail::require_positive_temperature(temperature, "est_kl");
  const double estimated = var_p / (2.0 * temperature * temperature);
  const double exact = exact_kl_closed_form(p, delta_z, temperature);
  return detail::make_estimate(estimated, exact, Space::probability, Metric::kl);
}

/// First-order softmax response: dp_i ~= p_i (dz_i - E_p[dz]) / T, i.e.
/// (diag(p) - p p^T) dz / T without forming the matrix.
inline RealVector first_order_delta_p(const ProbDist& p, std::span<const double> delta_z,
                                      double temperature) {
  detail::require_same_dim(p.values(), delta_z, "first_order_delta_p");
  detail::require_positive_temperature(temperature, "first_order_delta_p");
  const std::size_t n = p.dim();
  const double mu = sum_of(n, [&](std::size_t i) { return p[i] * delta_z[i]; });
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = p[i] * (delta_z[i] - mu) / temperature;
  return RealVector(std::move(out));
}

// ---------------------------------------------------------------------------
// Convergence probe

enum class ProbeSpace { linear, probability, kl };
enum class ProbeDirection { random, colinear };

inline std::string_view to_string(ProbeSpace s) {
  switch (s) {
    case ProbeSpace::linear: return "linear";
    case ProbeSpace::probability: return "probability";
    case ProbeSpace::kl: return "kl";
  }
  return "?";
}

struct ProbeOptions {
  std::size_t vocab = 64;
  double temperature = 1.0;
  double logit_stddev = 2.0;
  ProbeDirection direction = ProbeDirection::random;
  unsigned threads = 1;
};

struct ProbePoint {
  double epsilon = 0.0;
  double mean_abs_error = 0.0;
  double mean_exact = 0.0;
  double mean_estimated = 0.0;
};

struct ProbeResult {
  ProbeSpace space = ProbeSpace::linear;
  std::vector<ProbePoint> points;
  /// Least-squares slope of log(error) against log(epsilon); empty when every
  /// error is at rounding level (the estimator is exact on the draws).
  std::optional<double> order;
};

/// Mean errors at or below this are treated as rounding noise.
inline constexpr double kProbeExactFloor = 1e-20;

namespace detail {

inline std::vector<double> draw_nonzero_gaussian(Rng& rng, std::size_t n, double stddev) {
  constexpr int kMaxRetries = 64;
  for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal(0.0, stddev);
    if (norm_sq(v) > 0.0) return v;
  }
  throw InvariantError("convergence_probe: could not draw a nonzero vector");
}

inline std::optional<double> fit_log_log_slope(const std::vector<ProbePoint>& pts) {
  std::vector<double> xs, ys;
  for (const auto& pt : pts) {
    if (pt.epsilon > 0.0 && pt.mean_abs_error > kProbeExactFloor) {
      xs.push_back(std::log(pt.epsilon));
      ys.push_back(std::log(pt.mean_abs_error));
    }
  }
  if (xs.size() < 2) return std::nullopt;
  const double n = static_cast<double>(xs.size());
  const double mx = sum(xs) / n;
  const double my = sum(ys) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  if (sxx == 0.0) return std::nullopt;
  return sxy / sxx;
}

}  // namespace detail

/// Measures how |estimated - exact| shrinks with the relative perturbation
/// size. Trial k uses the stream derive_seed(seed, k) for every epsilon, so the
/// same (base, direction) pair is rescaled along the grid.
inline ProbeResult convergence_probe(std::uint64_t seed, ProbeSpace space,
                                     std::span<const double> epsilons, std::size_t trials,
                                     const ProbeOptions& options = {}) {
  if (epsilons.size() < 2) throw ValidationError("convergence_probe: need at least 2 epsilons");
  for (double e : epsilons) {
    if (!(e >= 0.0) || !std::isfinite(e))
      throw ValidationError("convergence_probe: epsilons must be finite and nonnegative");
  }
  if (trials == 0) throw ValidationError("convergence_probe: trials must be >= 1");
  if (options.vocab < 2) throw ValidationError("convergence_probe: vocab must be >= 2");
  detail::require_positive_temperature(options.temperature, "convergence_probe");

  const std::size_t ne = epsilons.size();
  // [trial][eps] -> (|err|, exact, estimated)
  std::vector<std::vector<DeviationEstimate>> results(trials,
                                                      std::vector<DeviationEstimate>(ne));
  parallel_for(trials, options.threads, [&](std::size_t trial) {
    Rng rng(derive_seed(seed, trial));
    const std::vector<double> base =
        detail::draw_nonzero_gaussian(rng, options.vocab, options.logit_stddev);
    const double base_norm = std::sqrt(norm_sq(base));
    std::vector<double> dir = options.direction == ProbeDirection::colinear
                                  ? base
                                  : detail::draw_nonzero_gaussian(rng, options.vocab, 1.0);
    const double dir_norm = std::sqrt(norm_sq(dir));
    for (double& x : dir) x /= dir_norm;

    std::optional<ProbDist> p;
    if (space != ProbeSpace::linear) p = softmax_t(Logits(RealVector(base), options.temperature));

    for (std::size_t k = 0; k < ne; ++k) {
      std::vector<double> delta(dir);
      for (double& x : delta) x *= epsilons[k] * base_norm;
      switch (space) {
        case ProbeSpace::linear:
          results[trial][k] = est_angular_deviation_linear(base, delta, Space::logit);
          break;
        case ProbeSpace::probability:
          results[trial][k] = est_angular_deviation_prob(*p, delta, options.temperature);
          break;
        case ProbeSpace::kl:
          results[trial][k] = est_kl(*p, delta, options.temperature);
          break;
      }
    }
  });

  ProbeResult out;
  out.space = space;
  const double inv_trials = 1.0 / static_cast<double>(trials);
  for (std::size_t k = 0; k < ne; ++k) {
    ProbePoint pt;
    pt.epsilon = epsilons[k];
    for (std::size_t t = 0; t < trials; ++t) {
      pt.mean_abs_error += std::abs(results[t][k].abs_error);
      pt.mean_exact += results[t][k].exact;
      pt.mean_estimated += results[t][k].estimated;
    }
    pt.mean_abs_error *= inv_trials;
    pt.mean_exact *= inv_trials;
    pt.mean_estimated *= inv_trials;
    out.points.push_back(pt);
  }
  out.order = detail::fit_log_log_slope(out.points);
  return out;
}

}  // namespace prunescope
