#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "prunescope/estimators.hpp"

using namespace prunescope;

namespace {

std::vector<double> gaussian(Rng& rng, std::size_t n, double sd) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, sd);
  return v;
}

ProbDist softmax_of(const std::vector<double>& z, double t = 1.0) {
  return softmax_t(Logits(RealVector(z), t));
}

const std::vector<double> kDz{0.2, 0.0};
const ProbDist kHalf{0.5, 0.5};

}  // namespace

TEST(EstLinear, Examples) {
  auto e = est_angular_deviation_linear(RealVector{1, 2}, RealVector{0.5, 1.0});
  EXPECT_EQ(e.estimated, 0.0);
  EXPECT_NEAR(e.exact, 0.0, 1e-16);

  e = est_angular_deviation_linear(RealVector{1, 0}, RealVector{0, 0.2});
  EXPECT_NEAR(e.estimated, 0.02, 1e-16);
  EXPECT_NEAR(e.exact, oracle::one_minus_cos({1, 0}, {1, 0.2}), 1e-15);
  EXPECT_NEAR(e.exact, 0.019419, 5e-7);
  EXPECT_DOUBLE_EQ(e.abs_error, e.estimated - e.exact);

  e = est_angular_deviation_linear(RealVector{3, -1}, RealVector{0, 0});
  EXPECT_EQ(e.estimated, 0.0);
  EXPECT_EQ(e.exact, 0.0);
  EXPECT_THROW(est_angular_deviation_linear(RealVector{0, 0}, RealVector{1, 0}), DomainError);
}

TEST(EstProb, Examples) {
  const auto e = est_angular_deviation_prob(kHalf, kDz, 1.0);
  EXPECT_NEAR(e.estimated, 0.005, 1e-16);
  const double ref = oracle::one_minus_cos({0.5, 0.5}, oracle::softmax({0.2, 0.0}, 1.0));
  EXPECT_NEAR(e.exact, ref, 1e-15);
  EXPECT_NEAR(e.exact, 0.004930, 5e-7);
  EXPECT_EQ(e.space, Space::probability);

  const auto shifted = est_angular_deviation_prob(kHalf, std::vector<double>{1.7, 1.7}, 1.0);
  EXPECT_LE(shifted.estimated, 1e-12);
  EXPECT_LE(shifted.exact, 1e-12);

  EXPECT_NEAR(est_angular_deviation_prob(kHalf, kDz, 2.0).estimated, 0.005 / 4.0, 1e-17);
}

TEST(EstKl, Examples) {
  const auto e = est_kl(kHalf, kDz, 1.0);
  EXPECT_NEAR(e.estimated, 0.005, 1e-16);
  EXPECT_NEAR(e.exact, 0.004992, 5e-7);
  EXPECT_EQ(e.metric, Metric::kl);
  const auto c = est_kl(kHalf, std::vector<double>{-4.0, -4.0}, 1.0);
  EXPECT_LE(c.estimated, 1e-12);
  EXPECT_LE(c.exact, 1e-12);
  EXPECT_NEAR(est_kl(kHalf, kDz, 2.0).estimated, 0.005 / 4.0, 1e-17);
}

TEST(EstProbExplicit, Examples) {
  EXPECT_NEAR(est_angular_deviation_prob_explicit(kHalf, std::vector<double>{2, 2}, 1.0), 0.0, 1e-15);
  EXPECT_NEAR(est_angular_deviation_prob_explicit(kHalf, kDz, 1.0), 0.005, 1e-16);
  EXPECT_EQ(est_angular_deviation_prob_explicit(ProbDist{0, 0, 1}, std::vector<double>{5, -1, 2}, 1.0), 0.0);
}

TEST(EstProbExplicit, AgreesWithCompactForm) {
  Rng rng(64);
  for (int trial = 0; trial < 1000; ++trial) {
    const double t = std::array{0.5, 1.0, 2.0}[trial % 3];
    const auto p = softmax_of(gaussian(rng, 64, 2.0), t);
    const auto dz = gaussian(rng, 64, 1.0);
    const double compact = est_angular_deviation_prob(p, dz, t).estimated;
    const double expl = est_angular_deviation_prob_explicit(p, dz, t);
    EXPECT_NEAR(expl, compact, 1e-12 * compact);
    // Both against the definition Var_r evaluated in extended precision.
    const auto r = squared_weight_dist(p);
    EXPECT_NEAR(compact, oracle::variance(dz, r.probs().vec()) / (2 * t * t), 1e-12 * compact);
  }
}

TEST(Estimators, TemperatureScalesAsInverseSquare) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto z = gaussian(rng, 32, 2.0);
    const auto dz = gaussian(rng, 32, 0.3);
    const auto p = softmax_of(z, 1.0);
    EXPECT_NEAR(est_angular_deviation_prob(p, dz, 1.0).estimated / est_angular_deviation_prob(p, dz, 2.0).estimated,
                4.0, 1e-9);
    EXPECT_NEAR(est_kl(p, dz, 1.0).estimated / est_kl(p, dz, 2.0).estimated, 4.0, 1e-9);
    EXPECT_NEAR(est_angular_deviation_prob_explicit(p, dz, 1.0) / est_angular_deviation_prob_explicit(p, dz, 2.0),
                4.0, 1e-9);
  }
}

TEST(FirstOrderDeltaP, Examples) {
  const auto d = first_order_delta_p(kHalf, kDz, 1.0);
  EXPECT_NEAR(d[0], 0.05, 1e-16);
  EXPECT_NEAR(d[1], -0.05, 1e-16);
  const auto q = oracle::softmax({0.2, 0.0}, 1.0);
  EXPECT_NEAR(q[0] - 0.5, 0.049834, 5e-7);

  const auto zero = first_order_delta_p(kHalf, std::vector<double>{3, 3}, 1.0);
  EXPECT_EQ(zero, (RealVector{0, 0}));

  Rng rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    const auto p = softmax_of(gaussian(rng, 48, 2.0));
    EXPECT_NEAR(sum(first_order_delta_p(p, gaussian(rng, 48, 1.0), 0.7).values()), 0.0, 1e-12);
  }
}

TEST(FirstOrderDeltaP, ResidualIsSecondOrder) {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const auto z = gaussian(rng, 64, 2.0);
    auto dir = gaussian(rng, 64, 1.0);
    const double scale = 0.05 * std::sqrt(norm_sq(z) / norm_sq(dir));
    const auto p = softmax_of(z);
    auto residual = [&](double eps) {
      std::vector<double> dz(dir);
      for (double& x : dz) x *= eps * scale;
      const auto q = closed_form_perturbed(p, dz, 1.0);
      const auto lin = first_order_delta_p(p, dz, 1.0);
      double s = 0;
      for (std::size_t i = 0; i < 64; ++i) s += std::pow(q[i] - p[i] - lin[i], 2);
      return std::sqrt(s);
    };
    EXPECT_GE(residual(1.0) / residual(0.5), 3.5);
  }
}

TEST(ConvergenceProbe, FittedOrderIsThird) {
  const std::array eps{0.1, 0.05, 0.025};
  for (ProbeSpace s : {ProbeSpace::linear, ProbeSpace::probability, ProbeSpace::kl}) {
    const auto r = convergence_probe(2024, s, eps, 100);
    ASSERT_TRUE(r.order.has_value()) << to_string(s);
    EXPECT_GE(*r.order, 2.5) << to_string(s);
    ASSERT_EQ(r.points.size(), 3u);
    EXPECT_GT(r.points[0].mean_abs_error, r.points[2].mean_abs_error);
  }
}

TEST(ConvergenceProbe, ColinearLinearIsExact) {
  ProbeOptions o;
  o.direction = ProbeDirection::colinear;
  const std::array eps{0.1, 0.05, 0.025};
  const auto r = convergence_probe(5, ProbeSpace::linear, eps, 20, o);
  EXPECT_FALSE(r.order.has_value());
  for (const auto& pt : r.points) EXPECT_LE(pt.mean_abs_error, kProbeExactFloor);
}

TEST(ConvergenceProbe, IndependentOfThreadCount) {
  const std::array eps{0.1, 0.05};
  ProbeOptions one, many;
  many.threads = 4;
  const auto a = convergence_probe(9, ProbeSpace::kl, eps, 37, one);
  const auto b = convergence_probe(9, ProbeSpace::kl, eps, 37, many);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(a.points[k].mean_abs_error, b.points[k].mean_abs_error);
  EXPECT_EQ(a.order, b.order);
}

TEST(ConvergenceProbe, Validation) {
  const std::array one{0.1};
  const std::array two{0.1, 0.05};
  EXPECT_THROW(convergence_probe(1, ProbeSpace::kl, one, 10), ValidationError);
  EXPECT_THROW(convergence_probe(1, ProbeSpace::kl, two, 0), ValidationError);
  const std::array neg{0.1, -0.05};
  EXPECT_THROW(convergence_probe(1, ProbeSpace::kl, neg, 10), ValidationError);
}
