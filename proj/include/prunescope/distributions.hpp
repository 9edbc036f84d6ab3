#pragma once

// Temperature softmax, exact KL and the reweighted closed form of a
// logit-perturbed distribution.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prunescope/errors.hpp"
#include "prunescope/numeric.hpp"
#include "prunescope/vecmath.hpp"

namespace prunescope {

/// Pre-softmax scores over the vocabulary with a positive temperature.
class Logits {
 public:
  Logits(RealVector scores, double temperature = 1.0)
      : scores_(std::move(scores)), temperature_(temperature) {
    if (!(temperature_ > 0.0) || !std::isfinite(temperature_))
      throw ValidationError("Logits: temperature must be a finite positive number");
  }

  const RealVector& scores() const { return scores_; }
  double temperature() const { return temperature_; }
  std::size_t vocab_size() const { return scores_.dim(); }

 private:
  RealVector scores_;
  double temperature_;
};

/// A probability vector: nonnegative entries summing to 1 within 1e-9.
class ProbDist {
 public:
  explicit ProbDist(RealVector probs) : probs_(std::move(probs)) {
    for (std::size_t i = 0; i < probs_.dim(); ++i) {
      if (probs_[i] < 0.0)
        throw ValidationError("ProbDist: entry " + std::to_string(i) + " is negative");
    }
    const double total = sum(probs_.values());
    if (std::abs(total - 1.0) > kProbSumTolerance)
      throw ValidationError("ProbDist: entries sum to " + std::to_string(total));
  }
  ProbDist(std::initializer_list<double> probs) : ProbDist(RealVector(probs)) {}

  const RealVector& probs() const { return probs_; }
  std::size_t dim() const { return probs_.dim(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> values() const { return probs_.values(); }

 private:
  RealVector probs_;
};

/// Strictly increasing token indices.
class CandidateSet {
 public:
  explicit CandidateSet(std::vector<std::size_t> indices) : indices_(std::move(indices)) {
    if (indices_.empty()) throw ValidationError("CandidateSet: must be nonempty");
    for (std::size_t i = 1; i < indices_.size(); ++i) {
      if (indices_[i] <= indices_[i - 1])
        throw ValidationError("CandidateSet: indices must be strictly increasing");
    }
  }
  CandidateSet(std::initializer_list<std::size_t> indices)
      : CandidateSet(std::vector<std::size_t>(indices)) {}

  const std::vector<std::size_t>& indices() const { return indices_; }
  std::size_t size() const { return indices_.size(); }

 private:
  std::vector<std::size_t> indices_;
};

namespace detail {

/// Normalizes exp(a_i - max a); returns the probabilities.
inline std::vector<double> normalized_exp(std::span<const double> a) {
  const double top = *std::max_element(a.begin(), a.end());
  std::vector<double> e(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) e[i] = std::exp(a[i] - top);
  const double total = sum(e);
  for (double& x : e) x /= total;
  return e;
}

inline double log_sum_exp(std::span<const double> a) {
  const double top = *std::max_element(a.begin(), a.end());
  if (top == -std::numeric_limits<double>::infinity()) return top;
  const double s = sum_of(a.size(), [&](std::size_t i) { return std::exp(a[i] - top); });
  return top + std::log(s);
}

inline void require_positive_temperature(double t, const char* op) {
  if (!(t > 0.0) || !std::isfinite(t))
    throw ValidationError(std::string(op) + ": temperature must be a finite positive number");
}

}  // namespace detail

/// softmax(z / T) with max subtraction.
inline ProbDist softmax_t(const Logits& logits) {
  const auto z = logits.scores().values();
  std::vector<double> scaled(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) scaled[i] = z[i] / logits.temperature();
  return ProbDist(RealVector(detail::normalized_exp(scaled)));
}

inline std::vector<double> log_softmax_t(const Logits& logits) {
  const auto z = logits.scores().values();
  std::vector<double> scaled(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) scaled[i] = z[i] / logits.temperature();
  const double lse = detail::log_sum_exp(scaled);
  for (double& x : scaled) x -= lse;
  return scaled;
}

/// KL(p || q) in nats. Terms with p_i = 0 contribute nothing.
inline double exact_kl(const ProbDist& p, const ProbDist& q) {
  detail::require_same_dim(p.values(), q.values(), "exact_kl");
  const std::size_t n = p.dim();
  for (std::size_t i = 0; i < n; ++i) {
    if (p[i] > 0.0 && q[i] == 0.0)
      throw SupportError("exact_kl: p has mass at index " + std::to_string(i) +
                         " where q is zero (infinite divergence)");
  }
  const double kl = sum_of(n, [&](std::size_t i) {
    return p[i] > 0.0 ? p[i] * std::log(p[i] / q[i]) : 0.0;
  });
  return std::max(kl, 0.0);
}

/// q_i = p_i e^{dz_i/T} / E_p[e^{dz/T}], i.e. softmax((z + dz)/T) for any z
/// with softmax(z/T) = p.
inline ProbDist closed_form_perturbed(const ProbDist& p, std::span<const double> delta_z,
                                      double temperature) {
  detail::require_same_dim(p.values(), delta_z, "closed_form_perturbed");
  detail::require_positive_temperature(temperature, "closed_form_perturbed");
  // constant shift: q is p exactly
  if (std::adjacent_find(delta_z.begin(), delta_z.end(), std::not_equal_to<>()) == delta_z.end() &&
      std::isfinite(delta_z[0]))
    return p;
  const std::size_t n = p.dim();
  std::vector<double> log_w(n);
  for (std::size_t i = 0; i < n; ++i) {
    log_w[i] = p[i] > 0.0 ? std::log(p[i]) + delta_z[i] / temperature
                          : -std::numeric_limits<double>::infinity();
  }
  return ProbDist(RealVector(detail::normalized_exp(log_w)));
}

/// -E_p[dz]/T + log E_p[e^{dz/T}], the exact KL(p || q) for the perturbed q.
inline double exact_kl_closed_form(const ProbDist& p, std::span<const double> delta_z,
                                   double temperature) {
  detail::require_same_dim(p.values(), delta_z, "exact_kl_closed_form");
  detail::require_positive_temperature(temperature, "exact_kl_closed_form");
  const std::size_t n = p.dim();
  const double mean = sum_of(n, [&](std::size_t i) { return p[i] * delta_z[i]; });
  std::vector<double> log_w(n);
  for (std::size_t i = 0; i < n; ++i) {
    log_w[i] = p[i] > 0.0 ? std::log(p[i]) + delta_z[i] / temperature
                          : -std::numeric_limits<double>::infinity();
  }
  // Subtracting the mean before the log-sum-exp keeps both terms O(|dz|^2).
  const double shift = mean / temperature;
  for (double& x : log_w) x -= shift;
  return std::max(detail::log_sum_exp(log_w), 0.0);
}

/// r_i = p_i^2 / |p|^2.
inline ProbDist squared_weight_dist(const ProbDist& p) {
  const double nsq = norm_sq(p.values());
  std::vector<double> r(p.dim());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = p[i] * p[i] / nsq;
  return ProbDist(RealVector(std::move(r)));
}

struct CandidateScores {
  std::vector<double> log_probs;  // aligned with CandidateSet::indices()
  std::size_t argmax = 0;         // a token index, not a position in the set
};

/// Log-probabilities restricted to the candidates and the restricted argmax.
/// Ties go to the lowest token index.
inline CandidateScores candidate_scores(const Logits& logits, const CandidateSet& c) {
  const std::size_t v = logits.vocab_size();
  for (std::size_t idx : c.indices()) {
    if (idx >= v)
      throw IndexError("candidate_scores: candidate " + std::to_string(idx) +
                       " outside vocabulary of size " + std::to_string(v));
  }
  const std::vector<double> lp = log_softmax_t(logits);
  CandidateScores out;
  out.log_probs.reserve(c.size());
  const auto z = logits.scores().values();
  out.argmax = c.indices().front();
  for (std::size_t idx : c.indices()) {
    out.log_probs.push_back(lp[idx]);
    // Compare raw scores: the order is the same and immune to rounding in lp.
    if (z[idx] > z[out.argmax]) out.argmax = idx;
  }
  return out;
}

}  // namespace prunescope
