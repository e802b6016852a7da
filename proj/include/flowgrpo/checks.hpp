#pragma once

// Self-contained verification checks with fixed seeds. Each returns a
// CheckReport; the `verify` subcommand runs them all.

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "flowgrpo/advantage.hpp"
#include "flowgrpo/grpo.hpp"
#include "flowgrpo/oracle.hpp"
#include "flowgrpo/samplers.hpp"
#include "flowgrpo/schedules.hpp"

namespace flowgrpo {

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace detail

// Clipped-surrogate gradient on a 2-16-2 denoiser, G = 2, T = 3, against
// central differences with h = 1e-5. Measured value: fraction of
// parameters within relative error 1e-3.
inline CheckReport check_surrogate_gradient() {
  detail::Stopwatch sw;
  NetConfig nc;
  nc.input_dim = 2;
  nc.hidden_dims = {16};
  nc.time_embed_dim = 8;
  nc.cond_embed_dim = 4;
  nc.condition_count = 2;
  DenoiserNet net(nc);
  net.initialize(2024, false);
  const auto rf = NoiseSchedule::rectified_flow();
  const StepPlan plan = StepPlan::uniform(3, 0.3);
  SampleGroup group;
  group.cond = 0;
  Rng noise(1);
  group.init_noise = standard_normal(2, noise);
  for (std::uint64_t i = 0; i < 2; ++i) {
    Rng rng = make_stream(77, {i});
    group.trajectories.push_back(rollout(rf, net, plan, 0, group.init_noise, rng));
  }
  group.advantages = {1.0, -1.0};
  Rng jitter(3);
  for (double& v : net.params().values()) v += 0.02 * standard_normal(1, jitter)[0];
  GrpoConfig cfg;
  cfg.clip_eps = 0.2;
  const std::vector<std::size_t> idx{0, 1, 2};
  Vector analytic(net.params().size(), 0.0);
  group_loss(rf, net, group, idx, cfg, 0.0, 1.0, analytic);
  const Vector numeric = finite_diff_grad(
      [&] { return group_loss(rf, net, group, idx, cfg, 0.0, 1.0, {}).loss; },
      net.params().values(), 1e-5);
  std::size_t ok = 0;
  double worst = 0.0;
  for (std::size_t j = 0; j < analytic.size(); ++j) {
    const double e = relative_error(analytic[j], numeric[j]);
    worst = std::max(worst, e);
    if (e <= 1e-3) ++ok;
  }
  const double frac = double(ok) / double(analytic.size());
  const double secs = sw.seconds();
  return make_check("surrogate_gradient_fd", frac, 0.99, frac >= 0.99 && secs < 10.0,
                    "params=" + std::to_string(analytic.size()) +
                        " worst_rel_err=" + detail::fmt(worst) +
                        " seconds=" + detail::fmt(secs));
}

// Oracle-score reverse SDE on N(0, I) data: final moments of n samples.
inline CheckReport check_sde_marginals(ScheduleKind kind, std::size_t n = 100000,
                                       std::size_t steps = 100, double eps = 0.3) {
  detail::Stopwatch sw;
  const bool rf = kind == ScheduleKind::rectified_flow;
  const NoiseSchedule sched = rf ? NoiseSchedule::rectified_flow() : NoiseSchedule::vp_diffusion();
  const OraclePredictor oracle({{0.0, 0.0}, 1.0}, sched,
                               rf ? PredictionKind::velocity : PredictionKind::epsilon);
  const StepPlan plan = StepPlan::uniform(steps, eps, StepPlan::start_time(sched));
  std::vector<Vector> finals(n);
  parallel_for(n, [&](std::size_t i) {
    Rng rng = make_stream(rf ? 11 : 12, {i});
    const Vector init = standard_normal(2, rng);
    finals[i] = rollout(sched, oracle, plan, 0, init, rng).final_state();
  });
  const Moments m = sample_moments(finals);
  double worst_se = 0.0, worst_var = 0.0;
  for (std::size_t d = 0; d < 2; ++d) {
    worst_se = std::max(worst_se, std::abs(m.mean[d]) / std::sqrt(m.cov(d, d) / double(n)));
    worst_var = std::max(worst_var, std::abs(m.cov(d, d) - 1.0));
  }
  const double secs = sw.seconds();
  const bool pass = worst_se <= 4.0 && worst_var <= 0.05 && secs < 120.0;
  return make_check(std::string("sde_marginal_") + (rf ? "rectified_flow" : "vp_diffusion"),
                    worst_var, 0.05, pass,
                    "mean_in_se=" + detail::fmt(worst_se) + " (<=4) var=(" +
                        detail::fmt(m.cov(0, 0)) + "," + detail::fmt(m.cov(1, 1)) +
                        ") seconds=" + detail::fmt(secs));
}

// eps_level = 0 SDE steps against ODE steps over random states.
inline CheckReport check_noise_free_limit(std::size_t states = 1000) {
  detail::Stopwatch sw;
  double worst = 0.0;
  for (auto kind : {ScheduleKind::rectified_flow, ScheduleKind::vp_diffusion}) {
    const bool rf = kind == ScheduleKind::rectified_flow;
    const NoiseSchedule sched = rf ? NoiseSchedule::rectified_flow() : NoiseSchedule::vp_diffusion();
    NetConfig nc;
    nc.kind = rf ? PredictionKind::velocity : PredictionKind::epsilon;
    nc.hidden_dims = {16};
    DenoiserNet net(nc);
    net.initialize(rf ? 5 : 6, false);
    Rng rng(rf ? 21 : 22);
    std::uniform_real_distribution<double> ut(0.02, 0.99);
    for (std::size_t i = 0; i < states; ++i) {
      const Vector z = standard_normal(2, rng);
      double t = ut(rng), s = ut(rng);
      if (s > t) std::swap(t, s);
      if (s == t) continue;
      const CondId c = i % nc.condition_count;
      const SdeStepResult r = sde_step(sched, net, z, t, s, c, 0.0, rng);
      const Vector o = ode_step(sched, net, z, t, s, c);
      for (std::size_t d = 0; d < 2; ++d) worst = std::max(worst, std::abs(r.z_next[d] - o[d]));
    }
  }
  const double secs = sw.seconds();
  return make_check("noise_free_limit", worst, 1e-12, worst <= 1e-12 && secs < 1.0,
                    "seconds=" + detail::fmt(secs));
}

// Mean and variance ODEs implied by the SDE coefficients, plus the
// rectified-flow values at t = 1/2.
inline CheckReport check_coefficient_identities() {
  detail::Stopwatch sw;
  double worst = 0.0;
  const double h = 1e-6;
  for (auto sched : {NoiseSchedule::rectified_flow(), NoiseSchedule::vp_diffusion()}) {
    for (int i = 0; i < 100; ++i) {
      const double t = (i + 0.5) / 100.0;
      const SdeCoeffs c = interpolant_to_sde(sched, t, 0.3);
      auto var = [&](double u) { return sched.sigma(u) * sched.sigma(u); };
      const double dvar = (var(t + h) - var(t - h)) / (2 * h);
      const double dalpha = (sched.alpha(t + h) - sched.alpha(t - h)) / (2 * h);
      const double s = sched.sigma(t);
      worst = std::max(worst, relative_error(dvar, 2.0 * c.f * s * s + c.g2));
      worst = std::max(worst, relative_error(dalpha, c.f * sched.alpha(t)));
    }
  }
  const SdeCoeffs half = interpolant_to_sde(NoiseSchedule::rectified_flow(), 0.5, 0.3);
  const bool exact = half.f == -2.0 && half.g2 == 2.0;
  const double secs = sw.seconds();
  return make_check("coefficient_identities", worst, 1e-6,
                    worst <= 1e-6 && exact && secs < 1.0,
                    std::string("rf_half f=") + detail::fmt(half.f) + " g2=" +
                        detail::fmt(half.g2) + (exact ? " exact" : " NOT exact") +
                        " seconds=" + detail::fmt(secs));
}

// Standardization, constant groups and shift/scale invariance over random
// groups of size 2..16.
inline CheckReport check_advantage_properties(std::size_t groups = 1000) {
  detail::Stopwatch sw;
  Rng rng(31);
  std::uniform_int_distribution<std::size_t> size(2, 16);
  std::uniform_int_distribution<int> q(-512, 512);
  double worst_mean = 0.0, worst_std = 0.0;
  bool constant_ok = true, invariant_ok = true;
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t G = size(rng);
    // dyadic values keep shifts and power-of-two scalings exact
    RewardMatrix r(G, 1), shifted(G, 1), scaled(G, 1), flat(G, 1, 0.37);
    for (std::size_t i = 0; i < G; ++i) {
      r(i, 0) = q(rng) / 256.0;
      shifted(i, 0) = r(i, 0) + 3.0;
      scaled(i, 0) = r(i, 0) * 4.0;
    }
    const auto a = compute_advantages(r);
    double mean = 0.0, var = 0.0, rmean = 0.0, rvar = 0.0;
    for (std::size_t i = 0; i < G; ++i) rmean += r(i, 0) / double(G);
    for (std::size_t i = 0; i < G; ++i) rvar += (r(i, 0) - rmean) * (r(i, 0) - rmean) / double(G);
    for (double v : a) mean += v / double(G);
    for (double v : a) var += (v - mean) * (v - mean) / double(G);
    if (std::sqrt(rvar) >= kAdvantageStdFloor) {
      worst_mean = std::max(worst_mean, std::abs(mean));
      worst_std = std::max(worst_std, std::abs(std::sqrt(var) - 1.0));
    }
    for (double v : compute_advantages(flat)) constant_ok = constant_ok && v == 0.0;
    const auto b = compute_advantages(shifted);
    const auto c = compute_advantages(scaled);
    for (std::size_t i = 0; i < G; ++i) invariant_ok = invariant_ok && a[i] == b[i] && a[i] == c[i];
  }
  const double secs = sw.seconds();
  const bool pass = worst_mean < 1e-10 && worst_std < 1e-8 && constant_ok && invariant_ok &&
                    secs < 1.0;
  return make_check("advantage_properties", worst_std, 1e-8, pass,
                    "max_abs_mean=" + detail::fmt(worst_mean) +
                        " constant_groups=" + (constant_ok ? "zero" : "NONZERO") +
                        " shift_scale=" + (invariant_ok ? "exact" : "INEXACT") +
                        " seconds=" + detail::fmt(secs));
}

// oracle_score at a near-point-mass data distribution against gaussian_score.
inline CheckReport check_oracle_point_mass() {
  const Vector mean{0.4, -0.6};
  const GaussianDataOracle o{mean, 1e-12};
  Rng rng(41);
  double worst = 0.0;
  for (auto sched : {NoiseSchedule::rectified_flow(), NoiseSchedule::vp_diffusion()}) {
    for (double t : {0.05, 0.3, 0.6, 0.95}) {
      const Vector z = standard_normal(2, rng);
      const Vector a = oracle_score(o, sched, z, t);
      const Vector b = gaussian_score(sched, z, mean, t);
      for (std::size_t d = 0; d < 2; ++d) worst = std::max(worst, relative_error(a[d], b[d]));
    }
  }
  return make_check("oracle_point_mass_limit", worst, 1e-4, worst <= 1e-4);
}

inline std::vector<CheckReport> run_verification_suite() {
  return {check_surrogate_gradient(),
          check_sde_marginals(ScheduleKind::rectified_flow),
          check_sde_marginals(ScheduleKind::vp_diffusion),
          check_noise_free_limit(),
          check_coefficient_identities(),
          check_advantage_properties(),
          check_oracle_point_mass()};
}

}  // namespace flowgrpo
