#pragma once

// Summation, seeded random streams and a small deterministic parallel loop.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <thread>
#include <vector>

namespace prunescope {

/// Centralized comparison tolerances. Call sites may pass their own.
struct Tolerance {
  double abs = 1e-10;
  double rel = 1e-12;
};

inline constexpr Tolerance kDefaultTolerance{};

/// Raw variances in [-kVarianceClamp, 0) are cancellation noise and become 0.
inline constexpr double kVarianceClamp = 1e-12;

/// Probability vectors must sum to one within this.
inline constexpr double kProbSumTolerance = 1e-9;

/// Sequences at least this long are summed pairwise.
inline constexpr std::size_t kPairwiseThreshold = 1024;

namespace detail {

inline double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= 128) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  const std::size_t half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

}  // namespace detail

inline double sum(std::span<const double> xs) {
  if (xs.size() >= kPairwiseThreshold) return detail::pairwise_sum(xs);
  double s = 0.0;
  for (double x : xs) s += x;
  return s;
}

/// Sum of f(i) for i in [0, n), with the same accumulation policy as sum().
template <typename F>
double sum_of(std::size_t n, F&& f) {
  if (n < kPairwiseThreshold) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += f(i);
    return s;
  }
  std::vector<double> terms(n);
  for (std::size_t i = 0; i < n; ++i) terms[i] = f(i);
  return detail::pairwise_sum(terms);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  return sum_of(a.size(), [&](std::size_t i) { return a[i] * b[i]; });
}

inline double norm_sq(std::span<const double> a) { return dot(a, a); }

/// SplitMix64 finalizer. Used to derive independent child seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
  return mix64(mix64(root) ^ (index * 0xD1B54A32D192ED03ULL + 1));
}

/// Seeded stream with portable uniform/normal draws.
///
/// std::mt19937_64 output is fixed by the standard, but the std distributions
/// are not, so the transforms live here to keep seeded runs identical across
/// standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; caches the second variate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(bound));
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// processed exactly once; callers write results into slot i, so the outcome
/// does not depend on scheduling. The first exception is rethrown.
inline void parallel_for(std::size_t n, unsigned threads,
                         const std::function<void(std::size_t)>& fn) {
  const unsigned workers =
      static_cast<unsigned>(std::min<std::size_t>(std::max(threads, 1U), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += workers) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace prunescope
