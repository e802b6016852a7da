#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "flowgrpo/random.hpp"
#include "flowgrpo/rewards.hpp"

using namespace flowgrpo;

namespace {

Trajectory ending_at(Vector z0, CondId cond) {
  Trajectory tr;
  tr.states = {Vector(z0.size(), 0.0), std::move(z0)};
  tr.cond = cond;
  return tr;
}

SampleGroup group_of(std::vector<Vector> finals, CondId cond) {
  SampleGroup g;
  g.cond = cond;
  for (auto& z : finals) g.trajectories.push_back(ending_at(std::move(z), cond));
  return g;
}

const RewardSpec kModes =
    RewardSpec::mode_affinity({{1.0, 1.0}, {-1.0, 1.0}, {-1.0, -1.0}, {1.0, -1.0}}, 1.0);

}  // namespace

TEST(ModeAffinity, PeaksAtTargetMode) {
  EXPECT_EQ(eval_reward(kModes, Vector{-1.0, 1.0}, 1), 1.0);
}

TEST(ModeAffinity, UnitDistanceWithUnitBandwidth) {
  EXPECT_NEAR(eval_reward(kModes, Vector{2.0, 1.0}, 0), std::exp(-0.5), 1e-15);
  EXPECT_NEAR(eval_reward(kModes, Vector{2.0, 1.0}, 0), 0.6065, 1e-4);
}

TEST(ModeAffinity, ConditionsWrapAroundTargets) {
  const Vector z{0.3, -0.2};
  EXPECT_EQ(eval_reward(kModes, z, 5), eval_reward(kModes, z, 1));
}

TEST(ModeAffinity, NullConditionTakesBestTarget) {
  const Vector z{-0.9, -1.2};
  EXPECT_EQ(eval_reward(kModes, z, kNullCondition), eval_reward(kModes, z, 2));
}

TEST(ModeAffinity, InvariantUnderJointIsometry) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const Vector z = standard_normal(2, rng), mu = standard_normal(2, rng),
                 shift = standard_normal(2, rng);
    const double th = 2.0 * std::numbers::pi * trial / 100.0;
    auto iso = [&](const Vector& v) {
      return Vector{std::cos(th) * v[0] - std::sin(th) * v[1] + shift[0],
                    std::sin(th) * v[0] + std::cos(th) * v[1] + shift[1]};
    };
    const auto a = RewardSpec::mode_affinity({mu}, 0.7);
    const auto b = RewardSpec::mode_affinity({iso(mu)}, 0.7);
    EXPECT_NEAR(eval_reward(a, z, 0), eval_reward(b, iso(z), 0), 1e-12);
  }
}

TEST(Alignment, ParallelAndAntiparallel) {
  const auto spec = RewardSpec::alignment({{1.0, 2.0}});
  EXPECT_DOUBLE_EQ(eval_reward(spec, Vector{2.0, 4.0}, 0), 1.0);
  EXPECT_NEAR(eval_reward(spec, Vector{-0.5, -1.0}, 0), 0.0, 1e-15);
  EXPECT_NEAR(eval_reward(spec, Vector{2.0, -1.0}, 0), 0.5, 1e-15);
  EXPECT_EQ(eval_reward(spec, Vector{0.0, 0.0}, 0), 0.5);
}

TEST(HalfPlane, SigmoidOfSignedDistance) {
  const auto spec = RewardSpec::half_plane({0.0, 2.0}, 0.5, 0.25);
  EXPECT_DOUBLE_EQ(eval_reward(spec, Vector{3.0, 0.5}, 0), 0.5);
  EXPECT_NEAR(eval_reward(spec, Vector{0.0, 0.75}, 7), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(RewardSpec, ValidationRejectsBadParameters) {
  EXPECT_THROW(RewardSpec::mode_affinity({{0.0, 0.0}}, 0.0).validate(), InputError);
  EXPECT_THROW(RewardSpec::alignment({{0.0, 0.0}}).validate(), InputError);
  EXPECT_THROW(RewardSpec::mode_affinity({}, 1.0).validate(), InputError);
  EXPECT_NO_THROW(kModes.validate());
  EXPECT_EQ(parse_reward_kind(to_string(RewardKind::alignment_toy)), RewardKind::alignment_toy);
}

TEST(RewardRange, ContinuousInUnitIntervalBinaryInZeroOne) {
  Rng rng(44);
  const std::vector<Reward> specs{
      kModes, RewardSpec::alignment({{1.0, 0.0}}),
      RewardSpec::half_plane({1.0, 1.0}, 0.2, 0.3), BinaryThreshold{kModes, 0.4}};
  for (int trial = 0; trial < 2000; ++trial) {
    Vector z = standard_normal(2, rng);
    for (double& v : z) v *= 3.0;
    for (std::size_t k = 0; k < specs.size(); ++k) {
      const double r = eval_reward(specs[k], z, trial % 4);
      EXPECT_GE(r, 0.0);
      EXPECT_LE(r, 1.0);
      if (k == 3) EXPECT_TRUE(r == 0.0 || r == 1.0);
    }
  }
}

TEST(BinaryThreshold, ExceedsThreshold) {
  // choose z so the base reward is exactly 0.29 for b = 1
  const double d = std::sqrt(-2.0 * std::log(0.29));
  const auto spec = RewardSpec::mode_affinity({{0.0, 0.0}}, 1.0);
  const Vector z{d, 0.0};
  EXPECT_NEAR(eval_reward(spec, z, 0), 0.29, 1e-15);
  EXPECT_EQ(eval_binary({spec, 0.28}, z, 0), 1.0);
}

TEST(BinaryThreshold, EqualToThresholdIsZero) {
  const auto spec = RewardSpec::mode_affinity({{0.0, 0.0}}, 1.0);
  const Vector z{0.4, 0.1};
  const double base = eval_reward(spec, z, 0);
  EXPECT_EQ(eval_binary({spec, base}, z, 0), 0.0);
}

TEST(BinaryThreshold, ThresholdBelowMinimumAlwaysOne) {
  Rng rng(1);
  const BinaryThreshold bt{kModes, -std::numeric_limits<double>::infinity()};
  for (int i = 0; i < 100; ++i) EXPECT_EQ(eval_binary(bt, standard_normal(2, rng), 0), 1.0);
}

TEST(GroupRewards, SingleEntryMatchesEvalReward) {
  const std::vector<Reward> specs{kModes};
  const auto m = eval_group_rewards(specs, group_of({{0.5, 0.5}}, 0));
  ASSERT_EQ(m.rows, 1u);
  ASSERT_EQ(m.cols, 1u);
  EXPECT_EQ(m(0, 0), eval_reward(kModes, Vector{0.5, 0.5}, 0));
}

TEST(GroupRewards, DuplicatedTrajectoriesGiveIdenticalRows) {
  const std::vector<Reward> specs{kModes, RewardSpec::alignment({{0.0, 1.0}})};
  const auto m = eval_group_rewards(specs, group_of({{0.1, 0.9}, {0.1, 0.9}}, 3));
  EXPECT_EQ(m(0, 0), m(1, 0));
  EXPECT_EQ(m(0, 1), m(1, 1));
}

TEST(GroupRewards, MatchesElementwiseEvaluation) {
  const std::vector<Reward> specs{kModes, RewardSpec::alignment({{1.0, 0.0}, {0.0, 1.0}})};
  const std::vector<Vector> finals{{0.2, 1.1}, {-0.7, 0.3}, {1.5, -1.5}};
  const auto m = eval_group_rewards(specs, group_of(finals, 1));
  ASSERT_EQ(m.rows, 3u);
  ASSERT_EQ(m.cols, 2u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(m(i, 0), std::exp(-((finals[i][0] + 1) * (finals[i][0] + 1) +
                                  (finals[i][1] - 1) * (finals[i][1] - 1)) / 2.0));
    const double n = std::hypot(finals[i][0], finals[i][1]);
    EXPECT_NEAR(m(i, 1), 0.5 * (finals[i][1] / n + 1.0), 1e-15);
  }
}
