#pragma once

// Deterministic (ODE) and stochastic (Euler-Maruyama reverse SDE) denoising
// steps, Gaussian transition log-densities, and trajectory rollout. Time runs
// from noise (t near 1) to data (t = 0); a step goes from t to s < t.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <span>
#include <vector>

#include "flowgrpo/errors.hpp"
#include "flowgrpo/nn.hpp"
#include "flowgrpo/random.hpp"
#include "flowgrpo/schedules.hpp"

namespace flowgrpo {

// Anything that maps (z_t, t, cond) to an epsilon or velocity prediction:
// the trainable DenoiserNet or an analytic oracle.
template <typename P>
concept Predictor = requires(const P& p, std::span<const double> z, double t,
                             CondId c) {
  { p.predict(z, t, c) } -> std::convertible_to<Vector>;
  { p.kind() } -> std::same_as<PredictionKind>;
};

struct StepPlan {
  std::vector<double> timesteps;  // strictly decreasing, ends at 0
  double eps_level = 0.3;
  // Optional per-step noise levels; empty means eps_level everywhere.
  std::vector<double> eps_levels;

  std::size_t steps() const {
    return timesteps.empty() ? 0 : timesteps.size() - 1;
  }

  double eps_at(std::size_t k) const {
    return eps_levels.empty() ? eps_level : eps_levels.at(k);
  }

  void validate() const {
    if (timesteps.size() < 2) throw InputError("step plan needs >= 2 times");
    for (std::size_t k = 0; k + 1 < timesteps.size(); ++k)
      if (!(timesteps[k] > timesteps[k + 1]))
        throw InputError("step plan times must be strictly decreasing");
    if (timesteps.front() > 1.0 || timesteps.back() < 0.0)
      throw InputError("step plan times must lie in [0, 1]");
    if (eps_level < 0.0) throw InputError("eps_level must be nonnegative");
    if (!eps_levels.empty()) {
      if (eps_levels.size() != steps())
        throw InputError("per-step eps_levels must have one entry per step");
      for (double e : eps_levels)
        if (e < 0.0) throw InputError("eps_levels must be nonnegative");
    }
  }

  // Uniform grid t_max = t_0 > ... > t_T = 0.
  static StepPlan uniform(std::size_t steps, double eps_level,
                          double t_max = 1.0) {
    if (steps == 0) throw InputError("step count must be positive");
    StepPlan plan;
    plan.eps_level = eps_level;
    plan.timesteps.resize(steps + 1);
    for (std::size_t k = 0; k <= steps; ++k)
      plan.timesteps[k] = t_max * double(steps - k) / double(steps);
    return plan;
  }

  // Starting time for a schedule: 1 for rectified flow, 1 - margin where
  // alpha vanishes at t = 1.
  static double start_time(const NoiseSchedule& sched) {
    return sched.kind() == ScheduleKind::rectified_flow ? 1.0
                                                        : 1.0 - kTimeMargin;
  }

  bool operator==(const StepPlan&) const = default;
};

inline void check_step_times(double t, double s) {
  if (!(s >= 0.0 && t <= 1.0)) throw InputError("step times must lie in [0, 1]");
  if (!(s < t)) throw InputError("step requires s < t");
}

// Mean of the step from t to s as an affine map of (z, prediction).
inline Affine ode_step_map(const NoiseSchedule& sched, PredictionKind kind,
                           double t, double s) {
  const PredictionMap m = prediction_map(sched, kind, t);
  if (sched.kind() == ScheduleKind::rectified_flow) {
    // z + u (s - t)
    return {1.0 + m.velocity.z * (s - t), m.velocity.pred * (s - t)};
  }
  // alpha_s x_hat + sigma_s eps_hat
  const double as = sched.alpha(s), ss = sched.sigma(s);
  return {as * m.x_hat.z + ss * m.eps_hat.z,
          as * m.x_hat.pred + ss * m.eps_hat.pred};
}

template <Predictor Net>
Vector ode_step(const NoiseSchedule& sched, const Net& net,
                std::span<const double> z, double t, double s, CondId cond) {
  check_step_times(t, s);
  const Vector pred = net.predict(z, t, cond);
  return ode_step_map(sched, net.kind(), t, s).apply(z, pred);
}

// Gaussian transition z_s ~ N(mean, std^2 I) with mean affine in the
// prediction. std == 0 marks a deterministic (ODE) step.
struct StepKernel {
  Affine mean_map;
  double std = 0.0;
};

inline StepKernel sde_step_kernel(const NoiseSchedule& sched,
                                  PredictionKind kind, double t, double s,
                                  double eps_level) {
  check_step_times(t, s);
  if (eps_level < 0.0) throw InputError("eps_level must be nonnegative");
  if (eps_level == 0.0) return {ode_step_map(sched, kind, t, s), 0.0};
  const double dt = s - t;
  const PredictionMap m = prediction_map(sched, kind, t);
  StepKernel k;
  if (sched.kind() == ScheduleKind::rectified_flow) {
    // dz = (u - eps^2/2 * score) dt + eps dw
    const double c = 0.5 * eps_level * eps_level;
    k.mean_map = {1.0 + (m.velocity.z - c * m.score.z) * dt,
                  (m.velocity.pred - c * m.score.pred) * dt};
    k.std = eps_level * std::sqrt(t - s);
  } else {
    // dz = (f z - (1 + eta^2)/2 * g^2 * score) dt + eta g dw
    const SdeCoeffs sc = interpolant_to_sde(sched, clamp_sde_time(t), eps_level);
    const double c = 0.5 * (1.0 + sc.eta * sc.eta) * sc.g2;
    k.mean_map = {1.0 + (sc.f - c * m.score.z) * dt, -c * m.score.pred * dt};
    k.std = sc.eta * std::sqrt(sc.g2) * std::sqrt(t - s);
  }
  return k;
}

// Sum over dimensions of log N(action_i; mean_i, std^2).
inline double transition_logprob(std::span<const double> mean, double std,
                                 std::span<const double> action) {
  if (!(std > 0.0)) throw InputError("transition std must be positive");
  if (mean.size() != action.size())
    throw InputError("mean and action dimensions differ");
  const double var = std * std;
  double lp = -0.5 * double(mean.size()) *
              std::log(2.0 * std::numbers::pi * var);
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double d = action[i] - mean[i];
    lp -= d * d / (2.0 * var);
  }
  return lp;
}

// d logprob / d mean.
inline Vector transition_logprob_grad_mean(std::span<const double> mean,
                                           double std,
                                           std::span<const double> action) {
  if (!(std > 0.0)) throw InputError("transition std must be positive");
  Vector g(mean.size());
  for (std::size_t i = 0; i < mean.size(); ++i)
    g[i] = (action[i] - mean[i]) / (std * std);
  return g;
}

struct SdeStepResult {
  Vector z_next;
  double logprob = 0.0;
  Vector mean;
  double std = 0.0;
};

// One reverse-SDE step. eps_level == 0 returns the ODE step with logprob 0.
template <Predictor Net>
SdeStepResult sde_step(const NoiseSchedule& sched, const Net& net,
                       std::span<const double> z, double t, double s,
                       CondId cond, double eps_level, Rng& rng) {
  const StepKernel kernel = sde_step_kernel(sched, net.kind(), t, s, eps_level);
  const Vector pred = net.predict(z, t, cond);
  SdeStepResult r;
  r.mean = kernel.mean_map.apply(z, pred);
  r.std = kernel.std;
  if (kernel.std == 0.0) {
    r.z_next = r.mean;
    r.logprob = 0.0;
    return r;
  }
  const Vector xi = standard_normal(z.size(), rng);
  r.z_next.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    r.z_next[i] = r.mean[i] + kernel.std * xi[i];
  r.logprob = transition_logprob(r.mean, r.std, r.z_next);
  return r;
}

// ---------------------------------------------------------------------------
// Trajectories

struct Trajectory {
  std::vector<Vector> states;   // T + 1 entries; states[0] is the init noise
  std::vector<Vector> actions;  // T entries; actions[k] == states[k + 1]
  std::vector<double> logprobs;  // T entries; 0 for deterministic steps
  StepPlan plan;
  CondId cond = kNullCondition;
  std::uint64_t init_noise_id = 0;

  std::size_t steps() const { return actions.size(); }
  const Vector& final_state() const { return states.back(); }
  bool step_is_stochastic(std::size_t k) const { return plan.eps_at(k) > 0.0; }
};

template <Predictor Net>
Trajectory rollout(const NoiseSchedule& sched, const Net& net,
                   const StepPlan& plan, CondId cond,
                   std::span<const double> init_noise, Rng& rng,
                   std::uint64_t init_noise_id = 0) {
  plan.validate();
  Trajectory traj;
  traj.plan = plan;
  traj.cond = cond;
  traj.init_noise_id = init_noise_id;
  const std::size_t T = plan.steps();
  traj.states.reserve(T + 1);
  traj.actions.reserve(T);
  traj.logprobs.reserve(T);
  traj.states.emplace_back(init_noise.begin(), init_noise.end());
  for (std::size_t k = 0; k < T; ++k) {
    SdeStepResult r = sde_step(sched, net, traj.states.back(),
                               plan.timesteps[k], plan.timesteps[k + 1], cond,
                               plan.eps_at(k), rng);
    if (!std::isfinite(r.logprob))
      throw NumericalError("non-finite transition log-probability in rollout");
    traj.actions.push_back(r.z_next);
    traj.logprobs.push_back(r.logprob);
    traj.states.push_back(std::move(r.z_next));
  }
  return traj;
}

// Current-policy evaluation of one stored transition, with what backward
// needs to push d logprob into the network parameters.
struct StepEval {
  std::size_t step = 0;
  double logprob = 0.0;
  Vector mean;
  double std = 0.0;
  double mean_pred_coef = 0.0;  // d mean_i / d pred_i
  NetTape tape;
};

// Re-evaluates log pi(a_k | s_k) under the network's current parameters for
// the given step indices (all steps when empty). Deterministic steps get
// logprob 0 and std 0 and carry no gradient.
inline std::vector<StepEval> recompute_logprobs(
    const NoiseSchedule& sched, const DenoiserNet& net, const Trajectory& traj,
    double eps_level, std::span<const std::size_t> indices = {}) {
  if (eps_level != traj.plan.eps_level)
    throw InputError("eps_level differs from the rollout's plan");
  const std::size_t T = traj.steps();
  if (traj.plan.steps() != T || traj.states.size() != T + 1)
    throw InputError("trajectory does not match its step plan");
  std::vector<std::size_t> all;
  if (indices.empty()) {
    all.resize(T);
    for (std::size_t k = 0; k < T; ++k) all[k] = k;
    indices = all;
  }
  std::vector<StepEval> out;
  out.reserve(indices.size());
  for (std::size_t k : indices) {
    if (k >= T) throw InputError("step index out of range");
    const double t = traj.plan.timesteps[k], s = traj.plan.timesteps[k + 1];
    const StepKernel kernel =
        sde_step_kernel(sched, net.kind(), t, s, traj.plan.eps_at(k));
    StepEval e;
    e.step = k;
    const Vector pred = net.forward(traj.states[k], t, traj.cond, e.tape);
    e.mean = kernel.mean_map.apply(traj.states[k], pred);
    e.std = kernel.std;
    e.mean_pred_coef = kernel.mean_map.pred;
    e.logprob = kernel.std > 0.0
                    ? transition_logprob(e.mean, e.std, traj.actions[k])
                    : 0.0;
    out.push_back(std::move(e));
  }
  return out;
}

// Accumulates dlogprob * d logprob/d params into grads.
inline void backprop_logprob(const DenoiserNet& net, const StepEval& e,
                             std::span<const double> action, double dlogprob,
                             std::span<double> grads) {
  if (e.std == 0.0 || dlogprob == 0.0) return;
  Vector upstream = transition_logprob_grad_mean(e.mean, e.std, action);
  for (double& u : upstream) u *= dlogprob * e.mean_pred_coef;
  net.backward(e.tape, upstream, grads);
}

// Debug dump: one line per step, "t s logprob state_csv action_csv".
inline void write_trajectory_dump(std::ostream& os, const Trajectory& traj) {
  auto csv = [&](const Vector& v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) os << ',';
      os << v[i];
    }
  };
  const auto old_precision = os.precision(17);
  for (std::size_t k = 0; k < traj.steps(); ++k) {
    os << traj.plan.timesteps[k] << ' ' << traj.plan.timesteps[k + 1] << ' '
       << traj.logprobs[k] << ' ';
    csv(traj.states[k]);
    os << ' ';
    csv(traj.actions[k]);
    os << '\n';
  }
  os.precision(old_precision);
}

}  // namespace flowgrpo
