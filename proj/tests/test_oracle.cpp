#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "flowgrpo/oracle.hpp"
#include "flowgrpo/random.hpp"

using namespace flowgrpo;

TEST(OracleScore, ZeroAtScaledMean) {
  const GaussianDataOracle o{{0.5, -1.5}, 0.3};
  const auto vp = NoiseSchedule::vp_diffusion();
  const double t = 0.4;
  const Vector z{vp.alpha(t) * 0.5, vp.alpha(t) * -1.5};
  for (double s : oracle_score(o, vp, z, t)) EXPECT_EQ(s, 0.0);
}

TEST(OracleScore, PointMassLimitIsGaussianScore) {
  const Vector mean{0.7, -0.2};
  const GaussianDataOracle o{mean, 1e-12};
  Rng rng(2);
  for (auto sched : {NoiseSchedule::rectified_flow(), NoiseSchedule::vp_diffusion()}) {
    for (double t : {0.1, 0.5, 0.9}) {
      const Vector z = standard_normal(2, rng);
      const Vector a = oracle_score(o, sched, z, t);
      const Vector b = gaussian_score(sched, z, mean, t);
      for (int i = 0; i < 2; ++i) EXPECT_LE(relative_error(a[i], b[i]), 1e-4);
    }
  }
}

TEST(OracleScore, StandardNormalAtTimeOne) {
  const GaussianDataOracle o{{3.0, -4.0}, 2.0};
  const Vector z{0.25, -1.5};
  const Vector s = oracle_score(o, NoiseSchedule::rectified_flow(), z, 1.0);
  EXPECT_EQ(s, (Vector{-0.25, 1.5}));
}

TEST(OracleScore, Errors) {
  const auto rf = NoiseSchedule::rectified_flow();
  EXPECT_THROW(oracle_score({{0.0}, 1.0}, rf, Vector{0.0}, 0.0), InputError);
  EXPECT_THROW(oracle_score({{0.0}, 0.0}, rf, Vector{0.0}, 0.5), SingularityError);
}

TEST(OraclePredictor, EpsilonMatchesScoreIdentity) {
  const GaussianDataOracle o{{0.2, 0.4}, 0.5};
  const auto vp = NoiseSchedule::vp_diffusion();
  const OraclePredictor p(o, vp, PredictionKind::epsilon);
  const Vector z{0.3, -0.9};
  const double t = 0.6;
  const Vector eps = p.predict(z, t, 0);
  const Vector s = oracle_score(o, vp, z, t);
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(-eps[i] / vp.sigma(t), s[i], 1e-14);
}

TEST(OraclePredictor, VelocityScoreRoundTrip) {
  const GaussianDataOracle o{{1.0, -1.0}, 0.25};
  const auto rf = NoiseSchedule::rectified_flow();
  const OraclePredictor p(o, rf, PredictionKind::velocity);
  const Vector z{0.1, 0.8};
  for (double t : {0.2, 0.5, 0.8}) {
    const Vector u = p.predict(z, t, 0);
    const Vector a = score_from_prediction(rf, PredictionKind::velocity, u, z, t);
    const Vector b = oracle_score(o, rf, z, t);
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(FiniteDiff, Quadratic) {
  Vector theta{3.0};
  const Vector g = finite_diff_grad([&] { return 0.5 * theta[0] * theta[0]; }, theta, 1e-5);
  EXPECT_NEAR(g[0], 3.0, 1e-8);
  EXPECT_EQ(theta[0], 3.0);
}

TEST(FiniteDiff, Linear) {
  Vector theta{0.5, -2.0, 1.0};
  const Vector a{1.5, -0.25, 4.0};
  const Vector g = finite_diff_grad(
      [&] { return a[0] * theta[0] + a[1] * theta[1] + a[2] * theta[2]; }, theta, 1e-3);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(g[i], a[i], 1e-11);
}

TEST(FiniteDiff, Errors) {
  Vector theta{1.0};
  EXPECT_THROW(finite_diff_grad([] { return 0.0; }, theta, 0.0), InputError);
  EXPECT_THROW(finite_diff_grad([] { return std::numeric_limits<double>::infinity(); },
                                theta, 1e-3),
               NumericalError);
}

TEST(SampleMoments, ConstantSamplesHaveZeroCovariance) {
  const std::vector<Vector> s(5, Vector{1.5, -2.0});
  const Moments m = sample_moments(s);
  EXPECT_EQ(m.mean, (Vector{1.5, -2.0}));
  for (double c : m.cov.data) EXPECT_EQ(c, 0.0);
}

TEST(SampleMoments, TwoScalarSamples) {
  const std::vector<Vector> s{{0.0}, {2.0}};
  const Moments m = sample_moments(s);
  EXPECT_EQ(m.mean[0], 1.0);
  EXPECT_EQ(m.cov(0, 0), 2.0);
}

TEST(SampleMoments, StandardNormalMeanWithinClt) {
  Rng rng(77);
  std::vector<Vector> s(100000);
  for (auto& x : s) x = standard_normal(2, rng);
  const Moments m = sample_moments(s);
  for (int i = 0; i < 2; ++i) EXPECT_LT(std::abs(m.mean[i]), 4.0 / std::sqrt(1e5));
  EXPECT_NEAR(m.cov(0, 0), 1.0, 0.02);
  EXPECT_NEAR(m.cov(0, 1), 0.0, 0.02);
}

TEST(SampleMoments, NeedsTwoSamples) {
  const std::vector<Vector> s{{1.0}};
  EXPECT_THROW(sample_moments(s), InputError);
}

TEST(CheckReport, FailureCarriesDetails) {
  const auto bad = make_check("x", 2.0, 1.0, false);
  EXPECT_FALSE(bad.details.empty());
  EXPECT_EQ(bad.line().rfind("FAIL x", 0), 0u);
  EXPECT_EQ(make_check("y", 0.5, 1.0, true).line().rfind("PASS y", 0), 0u);
}
