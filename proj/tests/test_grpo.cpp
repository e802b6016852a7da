#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <set>

#include "flowgrpo/grpo.hpp"
#include "flowgrpo/oracle.hpp"

using namespace flowgrpo;

namespace {

RewardMatrix column(const std::vector<double>& r) {
  RewardMatrix m(r.size(), 1);
  for (std::size_t i = 0; i < r.size(); ++i) m(i, 0) = r[i];
  return m;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / double(v.size());
}

double pop_std(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size()));
}

// Scalar reference for one surrogate term.
double brute_term(double r, double a, double eps) {
  const double clipped = std::min(std::max(r, 1.0 - eps), 1.0 + eps);
  return std::min(r * a, clipped * a);
}

NetConfig micro_config() {
  NetConfig c;
  c.input_dim = 2;
  c.hidden_dims = {16};
  c.time_embed_dim = 8;
  c.cond_embed_dim = 4;
  c.condition_count = 4;
  return c;
}

const RewardSpec kModes =
    RewardSpec::mode_affinity({{1.0, 1.0}, {-1.0, 1.0}, {-1.0, -1.0}, {1.0, -1.0}}, 1.0);

GrpoConfig small_trainer_config() {
  GrpoConfig cfg;
  cfg.group_size = 4;
  cfg.prompts_per_iter = 3;
  cfg.updates_per_iter = 2;
  cfg.learning_rate = 1e-3;
  return cfg;
}

}  // namespace

// --- advantages --------------------------------------------------------------

TEST(Advantages, HandExample) {
  const auto a = compute_advantages(column({1.0, 2.0, 3.0}));
  EXPECT_NEAR(a[0], -1.224744871391589, 1e-12);
  EXPECT_NEAR(a[1], 0.0, 1e-15);
  EXPECT_NEAR(a[2], 1.224744871391589, 1e-12);
}

TEST(Advantages, ConstantRewardsGiveZero) {
  for (double v : compute_advantages(column({0.7, 0.7, 0.7, 0.7}))) EXPECT_EQ(v, 0.0);
}

TEST(Advantages, ConstantSecondColumnContributesNothing) {
  RewardMatrix m(3, 2);
  for (int i = 0; i < 3; ++i) {
    m(i, 0) = i + 1.0;
    m(i, 1) = 5.0;
  }
  EXPECT_EQ(compute_advantages(m), compute_advantages(column({1.0, 2.0, 3.0})));
}

TEST(Advantages, NeedsTwoMembers) {
  EXPECT_THROW(compute_advantages(column({1.0})), InputError);
}

TEST(Advantages, RandomGroupsAreStandardized) {
  Rng rng(10);
  std::uniform_int_distribution<int> size(2, 16);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> r(size(rng));
    for (auto& x : r) x = u(rng);
    const auto a = compute_advantages(column(r));
    EXPECT_LT(std::abs(mean_of(a)), 1e-10);
    EXPECT_LT(std::abs(pop_std(a) - 1.0), 1e-8);
  }
}

TEST(Advantages, ShiftAndScaleInvariant) {
  // Dyadic rewards with power-of-two scale keep the arithmetic exact.
  Rng rng(11);
  std::uniform_int_distribution<int> q(-64, 64);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> r(2 + trial % 15);
    for (auto& x : r) x = q(rng) / 16.0;
    std::vector<double> shifted = r, scaled = r;
    for (auto& x : shifted) x += 4.0;
    for (auto& x : scaled) x *= 8.0;
    const auto a = compute_advantages(column(r));
    const auto b = compute_advantages(column(shifted));
    const auto c = compute_advantages(column(scaled));
    for (std::size_t i = 0; i < r.size(); ++i) {
      EXPECT_EQ(a[i], b[i]);
      EXPECT_EQ(a[i], c[i]);
    }
  }
}

// --- surrogate ----------------------------------------------------------------

TEST(GrpoLoss, UnitRatiosGiveNegativeMeanAdvantage) {
  const std::vector<double> adv{0.5, -1.5, 2.0};
  const LossResult r = grpo_loss(Matrix(4, 3, 1.0), adv, 1e-4);
  EXPECT_NEAR(r.loss, -mean_of(adv), 1e-15);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t i = 0; i < 3; ++i)
      EXPECT_DOUBLE_EQ(r.dloss_dratio(t, i), -adv[i] / 12.0);
  EXPECT_EQ(r.clip_fraction, 0.0);
}

TEST(GrpoLoss, SaturatedClipHasNoGradient) {
  const double eps = 0.1;
  const LossResult r = grpo_loss(Matrix(1, 1, 1.0 + 2.0 * eps), std::vector<double>{1.0}, eps);
  EXPECT_DOUBLE_EQ(r.loss, -(1.0 + eps));
  EXPECT_EQ(r.dloss_dratio(0, 0), 0.0);
  EXPECT_EQ(r.clip_fraction, 1.0);
}

TEST(GrpoLoss, TwoByTwoMatchesBruteForce) {
  Matrix ratios(2, 2);
  ratios(0, 0) = 1.05;
  ratios(0, 1) = 0.85;
  ratios(1, 0) = 1.25;
  ratios(1, 1) = 1.02;
  const std::vector<double> adv{1.0, -1.0};
  double expect = 0.0;
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < 2; ++i) expect += brute_term(ratios(t, i), adv[i], 0.1);
  expect = -expect / 4.0;
  const LossResult r = grpo_loss(ratios, adv, 0.1);
  EXPECT_NEAR(r.loss, expect, 1e-15);
  EXPECT_EQ(r.clip_fraction, 0.5);
}

TEST(GrpoLoss, EveryTermMatchesScalarOracle) {
  Rng rng(21);
  std::uniform_real_distribution<double> ratio(0.5, 1.5), adv(-2.0, 2.0), eps(0.01, 0.4);
  for (int trial = 0; trial < 5000; ++trial) {
    const double r = ratio(rng), a = adv(rng), e = eps(rng);
    const LossResult out = grpo_loss(Matrix(1, 1, r), std::vector<double>{a}, e);
    EXPECT_NEAR(-out.loss, brute_term(r, a, e), 1e-15);
    // derivative via finite differences away from the kinks
    const double h = 1e-7;
    if (std::abs(r - 1.0 - e) > 1e-5 && std::abs(r - 1.0 + e) > 1e-5) {
      const double fd = -(brute_term(r + h, a, e) - brute_term(r - h, a, e)) / (2 * h);
      EXPECT_NEAR(out.dloss_dratio(0, 0), fd, 1e-6);
    }
  }
}

TEST(GrpoLoss, RejectsNonPositiveRatios) {
  const std::vector<double> adv{1.0};
  EXPECT_THROW(grpo_loss(Matrix(1, 1, 0.0), adv, 0.1), NumericalError);
  EXPECT_THROW(grpo_loss(Matrix(1, 1, std::numeric_limits<double>::quiet_NaN()), adv, 0.1),
               NumericalError);
  EXPECT_THROW(grpo_loss(Matrix(1, 2, 1.0), adv, 0.1), InputError);
}

TEST(DdpoLoss, RewardsAtBaselineGiveZeroGradient) {
  const LossResult r = ddpo_baseline_loss(Matrix(3, 2, 1.3), std::vector<double>{0.4, 0.4}, 0.4);
  EXPECT_EQ(r.loss, 0.0);
  for (double d : r.dloss_dratio.data) EXPECT_EQ(d, 0.0);
}

TEST(DdpoLoss, MatchesGrpoOnSymmetricPair) {
  // rewards (0, 1) with baseline 0.5: centered rewards (-0.5, 0.5) are the
  // standardized advantages (-1, 1) scaled by 0.5.
  Matrix ratios(2, 2);
  ratios(0, 0) = 1.01;
  ratios(0, 1) = 0.98;
  ratios(1, 0) = 1.03;
  ratios(1, 1) = 0.995;
  const LossResult d = ddpo_baseline_loss(ratios, std::vector<double>{0.0, 1.0}, 0.5);
  const LossResult g = grpo_loss(ratios, compute_advantages(column({0.0, 1.0})), 10.0);
  EXPECT_NEAR(d.loss, 0.5 * g.loss, 1e-15);
  for (std::size_t j = 0; j < 4; ++j)
    EXPECT_NEAR(d.dloss_dratio.data[j], 0.5 * g.dloss_dratio.data[j], 1e-15);
}

TEST(KlPenalty, Examples) {
  const std::vector<double> old{-1.0, -2.0, 0.5};
  EXPECT_EQ(kl_penalty(old, old), 0.0);
  std::vector<double> cur = old;
  for (auto& v : cur) v -= 0.1;
  EXPECT_NEAR(kl_penalty(cur, old), 0.1, 1e-15);
  EXPECT_THROW(kl_penalty(cur, std::vector<double>{1.0}), InputError);
}

// --- timestep selection ----------------------------------------------------------

TEST(Subsample, FullFractionReturnsAll) {
  Rng rng(1);
  const auto idx = subsample_timesteps(25, 1.0, rng);
  ASSERT_EQ(idx.size(), 25u);
  for (std::size_t k = 0; k < 25; ++k) EXPECT_EQ(idx[k], k);
}

TEST(Subsample, SixtyPercentOfFifty) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto idx = subsample_timesteps(50, 0.6, rng);
    ASSERT_EQ(idx.size(), 30u);
    EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
    EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 30u);
    EXPECT_LE(idx.back(), 49u);
  }
}

TEST(Subsample, SameSeedSameSubset) {
  Rng a(9), b(9);
  EXPECT_EQ(subsample_timesteps(40, 0.3, a), subsample_timesteps(40, 0.3, b));
}

TEST(Subsample, SkipsDeterministicSteps) {
  Rng rng(4);
  bool mask[10] = {true, true, false, true, false, true, true, true, false, true};
  for (int trial = 0; trial < 50; ++trial)
    for (auto k : subsample_timesteps(10, 0.5, rng, mask)) EXPECT_TRUE(mask[k]);
  EXPECT_EQ(subsample_timesteps(10, 1.0, rng, mask).size(), 7u);
}

TEST(Subsample, CoversIndicesUniformly) {
  Rng rng(6);
  std::vector<int> hits(10, 0);
  const int n = 20000;
  for (int i = 0; i < n; ++i)
    for (auto k : subsample_timesteps(10, 0.3, rng)) ++hits[k];
  // each index is kept with probability 0.3
  for (int h : hits) EXPECT_NEAR(h / double(n), 0.3, 0.015);
}

TEST(Strategy, FirstLastAndRandom) {
  Rng rng(3);
  EXPECT_EQ(subsample_strategy(10, TimestepMode::first_fraction, 0.3, rng),
            (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(subsample_strategy(10, TimestepMode::last_fraction, 0.4, rng),
            (std::vector<std::size_t>{6, 7, 8, 9}));
  const auto r = subsample_strategy(10, TimestepMode::random_fraction, 0.3, rng);
  EXPECT_EQ(std::set<std::size_t>(r.begin(), r.end()).size(), 3u);
  EXPECT_THROW(subsample_strategy(10, TimestepMode::first_fraction, 0.0, rng), InputError);
}

TEST(GrpoConfig, Validation) {
  GrpoConfig c;
  EXPECT_NO_THROW(c.validate());
  c.clip_eps = 0.0;
  EXPECT_THROW(c.validate(), InputError);
  c = GrpoConfig{};
  c.tau = 1.2;
  EXPECT_THROW(c.validate(), InputError);
  c = GrpoConfig{};
  c.group_size = 1;
  EXPECT_THROW(c.validate(), InputError);
  c = GrpoConfig{};
  c.bestofn = CurationPlan{64, 8, 8};
  EXPECT_EQ(c.train_group_size(), 16u);
  EXPECT_EQ(c.rollouts_per_prompt(), 64u);
}

// --- gradients through the network --------------------------------------------

TEST(GroupLoss, GradientMatchesFiniteDifferences) {
  DenoiserNet net(micro_config());
  net.initialize(31, false);
  const auto rf = NoiseSchedule::rectified_flow();
  const StepPlan plan = StepPlan::uniform(3, 0.3);
  SampleGroup group;
  group.cond = 1;
  Rng noise(5);
  group.init_noise = standard_normal(2, noise);
  for (std::size_t i = 0; i < 2; ++i) {
    Rng rng = make_stream(5, {i});
    group.trajectories.push_back(rollout(rf, net, plan, 1, group.init_noise, rng));
  }
  group.advantages = {1.0, -1.0};
  // move away from theta_old so ratios differ from 1
  Rng jitter(8);
  for (double& v : net.params().values()) v += 0.05 * standard_normal(1, jitter)[0];

  GrpoConfig cfg;
  cfg.clip_eps = 0.2;
  const std::vector<std::size_t> idx{0, 1, 2};
  Vector analytic(net.params().size(), 0.0);
  const GroupLoss gl = group_loss(rf, net, group, idx, cfg, 0.0, 1.0, analytic);
  EXPECT_GT(gl.max_ratio_dev, 0.0);
  const Vector numeric = finite_diff_grad(
      [&] { return group_loss(rf, net, group, idx, cfg, 0.0, 1.0, {}).loss; },
      net.params().values(), 1e-5);
  std::size_t ok = 0;
  for (std::size_t j = 0; j < analytic.size(); ++j)
    if (relative_error(analytic[j], numeric[j]) <= 1e-3) ++ok;
  EXPECT_GE(double(ok), 0.99 * double(analytic.size()));
}

TEST(GroupLoss, KlTermGradient) {
  DenoiserNet net(micro_config());
  net.initialize(32, false);
  const auto rf = NoiseSchedule::rectified_flow();
  SampleGroup group;
  group.cond = 0;
  group.init_noise = {0.4, -0.3};
  for (std::size_t i = 0; i < 2; ++i) {
    Rng rng = make_stream(6, {i});
    group.trajectories.push_back(
        rollout(rf, net, StepPlan::uniform(4, 0.5), 0, group.init_noise, rng));
  }
  group.advantages = {0.3, -0.3};
  for (double& v : net.params().values()) v *= 1.02;
  GrpoConfig cfg;
  cfg.clip_eps = 0.5;
  cfg.kl_coeff = 0.7;
  const std::vector<std::size_t> idx{1, 3};
  Vector analytic(net.params().size(), 0.0);
  group_loss(rf, net, group, idx, cfg, 0.0, 1.0, analytic);
  const Vector numeric = finite_diff_grad(
      [&] { return group_loss(rf, net, group, idx, cfg, 0.0, 1.0, {}).loss; },
      net.params().values(), 1e-5);
  for (std::size_t j = 0; j < analytic.size(); ++j)
    EXPECT_LE(relative_error(analytic[j], numeric[j], 1e-7), 1e-3) << j;
}

// --- trainer -----------------------------------------------------------------

TEST(Trainer, ConstantRewardLeavesParametersUnchanged) {
  DenoiserNet net(micro_config());
  net.initialize(1, false);
  const Vector before(net.params().values().begin(), net.params().values().end());
  const BinaryThreshold always{kModes, -std::numeric_limits<double>::infinity()};
  GrpoTrainer trainer(net, NoiseSchedule::rectified_flow(), StepPlan::uniform(5, 0.3),
                      {always}, small_trainer_config(), 3);
  const auto report = trainer.train_iteration({0, 1, 0});
  EXPECT_EQ(report.grad_norm, 0.0);
  EXPECT_EQ(report.mean_rewards, (std::vector<double>{1.0}));
  const Vector after(net.params().values().begin(), net.params().values().end());
  EXPECT_EQ(before, after);
}

TEST(Trainer, GroupsShareInitNoiseAndFirstUpdateRatiosAreOne) {
  DenoiserNet net(micro_config());
  net.initialize(2, false);
  GrpoTrainer trainer(net, NoiseSchedule::rectified_flow(), StepPlan::uniform(6, 0.3),
                      {kModes}, small_trainer_config(), 4);
  trainer.train_iteration({0, 1, 1});
  ASSERT_EQ(trainer.last_groups().size(), 3u);
  for (const auto& g : trainer.last_groups()) {
    EXPECT_EQ(g.size(), 4u);
    EXPECT_TRUE(g.shares_init_noise());
  }
  EXPECT_NE(trainer.last_groups()[0].init_noise, trainer.last_groups()[1].init_noise);
  ASSERT_EQ(trainer.last_max_ratio_deviation().size(), 2u);
  EXPECT_EQ(trainer.last_max_ratio_deviation()[0], 0.0);
  EXPECT_GT(trainer.last_max_ratio_deviation()[1], 0.0);
  EXPECT_EQ(trainer.iteration(), 1u);
  EXPECT_EQ(trainer.optimizer().step_count, 2u);
}

TEST(Trainer, IdenticalSeedsGiveIdenticalReports) {
  auto run = [](const char* threads) {
    setenv("FLOWGRPO_THREADS", threads, 1);
    DenoiserNet net(micro_config());
    net.initialize(5, false);
    GrpoTrainer trainer(net, NoiseSchedule::rectified_flow(), StepPlan::uniform(6, 0.3),
                        {kModes, RewardSpec::alignment({{1.0, 0.0}})},
                        small_trainer_config(), 11);
    std::vector<IterationReport> reports;
    for (int it = 0; it < 3; ++it)
      reports.push_back(trainer.train_iteration(trainer.sample_conditions(4)));
    unsetenv("FLOWGRPO_THREADS");
    return std::make_pair(reports,
                          Vector(net.params().values().begin(), net.params().values().end()));
  };
  const auto a = run("1");
  const auto b = run("1");
  const auto c = run("4");
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.first, c.first);
  EXPECT_EQ(a.second, c.second);
}

TEST(Trainer, ZeroKlCoefficientMatchesDefaultBitForBit) {
  auto run = [](bool explicit_zero) {
    DenoiserNet net(micro_config());
    net.initialize(6, false);
    GrpoConfig cfg = small_trainer_config();
    if (explicit_zero) cfg.kl_coeff = 0.0;
    GrpoTrainer trainer(net, NoiseSchedule::rectified_flow(), StepPlan::uniform(5, 0.3),
                        {kModes}, cfg, 12);
    trainer.train_iteration({0, 1, 2});
    return Vector(net.params().values().begin(), net.params().values().end());
  };
  EXPECT_EQ(run(true), run(false));
}

TEST(Trainer, BestOfNCuratesFromLargerPool) {
  DenoiserNet net(micro_config());
  net.initialize(7, false);
  GrpoConfig cfg = small_trainer_config();
  cfg.bestofn = CurationPlan{12, 3, 3};
  GrpoTrainer trainer(net, NoiseSchedule::rectified_flow(), StepPlan::uniform(5, 0.3),
                      {kModes}, cfg, 13);
  trainer.train_iteration({0, 2});
  for (const auto& g : trainer.last_groups()) {
    ASSERT_EQ(g.size(), 6u);
    EXPECT_TRUE(g.shares_init_noise());
    for (std::size_t i = 0; i + 1 < 3; ++i) EXPECT_GE(g.rewards(i, 0), g.rewards(i + 1, 0));
    EXPECT_GE(g.rewards(2, 0), g.rewards(3, 0));
    EXPECT_LT(std::abs(mean_of(g.advantages)), 1e-12);
  }
}

TEST(Trainer, DdpoUsesIndependentNoise) {
  DenoiserNet net(micro_config());
  net.initialize(8, false);
  GrpoConfig cfg = small_trainer_config();
  cfg.objective = Objective::ddpo;
  GrpoTrainer trainer(net, NoiseSchedule::rectified_flow(), StepPlan::uniform(5, 0.3),
                      {kModes}, cfg, 14);
  trainer.train_iteration({0, 1});
  EXPECT_FALSE(trainer.last_groups()[0].shares_init_noise());
}

TEST(Metrics, CsvHeaderAndRow) {
  EXPECT_EQ(metrics_csv_header(2),
            "iter,mean_reward_k0,mean_reward_k1,loss,clip_fraction,grad_norm,wallclock_ms");
  IterationReport r;
  r.iter = 3;
  r.mean_rewards = {0.5, 0.25};
  r.loss = -0.125;
  r.clip_fraction = 0.0;
  r.grad_norm = 1.5;
  r.wallclock_ms = 12.6;
  EXPECT_EQ(metrics_csv_row(r), "3,0.5,0.25,-0.125,0,1.5,13");
}
