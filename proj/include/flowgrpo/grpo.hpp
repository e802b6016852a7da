#pragma once

// Group-relative policy optimization over SDE denoising trajectories: the
// clipped surrogate, timestep subsampling, a DDPO-style baseline objective
// and the training loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "flowgrpo/advantage.hpp"
#include "flowgrpo/bestofn.hpp"
#include "flowgrpo/errors.hpp"
#include "flowgrpo/group.hpp"
#include "flowgrpo/nn.hpp"
#include "flowgrpo/parallel.hpp"
#include "flowgrpo/random.hpp"
#include "flowgrpo/rewards.hpp"
#include "flowgrpo/samplers.hpp"
#include "flowgrpo/schedules.hpp"

namespace flowgrpo {

enum class TimestepMode { random_fraction, first_fraction, last_fraction };

inline std::string to_string(TimestepMode m) {
  switch (m) {
    case TimestepMode::random_fraction: return "random_fraction";
    case TimestepMode::first_fraction: return "first_fraction";
    case TimestepMode::last_fraction: return "last_fraction";
  }
  return "";
}

inline TimestepMode parse_timestep_mode(std::string_view s) {
  if (s == "random_fraction") return TimestepMode::random_fraction;
  if (s == "first_fraction") return TimestepMode::first_fraction;
  if (s == "last_fraction") return TimestepMode::last_fraction;
  throw InputError("unknown timestep mode: " + std::string(s));
}

enum class Objective { grpo, ddpo };

inline std::string to_string(Objective o) {
  return o == Objective::grpo ? "grpo" : "ddpo";
}

inline Objective parse_objective(std::string_view s) {
  if (s == "grpo") return Objective::grpo;
  if (s == "ddpo") return Objective::ddpo;
  throw InputError("unknown objective: " + std::string(s));
}

struct GrpoConfig {
  double clip_eps = 1e-4;
  std::size_t group_size = 12;
  double tau = 0.6;
  double eps_level = 0.3;
  std::size_t updates_per_iter = 4;
  std::size_t prompts_per_iter = 32;
  double learning_rate = 1e-5;
  double grad_clip_norm = 1.0;
  double weight_decay = 0.0;
  double kl_coeff = 0.0;
  TimestepMode timestep_mode = TimestepMode::random_fraction;
  // Redraw the timestep subset for every gradient update (true) or once
  // per group per iteration (false).
  bool resample_per_update = true;
  Objective objective = Objective::grpo;
  std::optional<CurationPlan> bestofn;

  void validate() const {
    if (!(clip_eps > 0.0)) throw InputError("clip_eps must be > 0");
    if (!(tau > 0.0 && tau <= 1.0)) throw InputError("tau must lie in (0, 1]");
    if (group_size < 2) throw InputError("group_size must be >= 2");
    if (eps_level < 0.0) throw InputError("eps_level must be >= 0");
    if (updates_per_iter == 0) throw InputError("updates_per_iter must be >= 1");
    if (prompts_per_iter == 0) throw InputError("prompts_per_iter must be >= 1");
    if (!(learning_rate >= 0.0)) throw InputError("learning_rate must be >= 0");
    if (bestofn) {
      bestofn->validate();
      if (bestofn->kept() < 2) throw InputError("curated group must have >= 2");
    }
  }

  // Members per group that enter the loss.
  std::size_t train_group_size() const {
    return bestofn ? bestofn->kept() : group_size;
  }
  // Rollouts generated per prompt.
  std::size_t rollouts_per_prompt() const {
    return bestofn ? bestofn->n_candidates : group_size;
  }
};

// ---------------------------------------------------------------------------
// Objectives

struct LossResult {
  double loss = 0.0;
  Matrix dloss_dratio;  // same shape as the ratio matrix
  double clip_fraction = 0.0;
};

inline void check_ratios(const Matrix& ratios) {
  for (double r : ratios.data)
    if (!(r > 0.0) || !std::isfinite(r))
      throw NumericalError("probability ratios must be finite and positive");
}

// -(1/G) sum_i (1/T) sum_t min(r A_i, clip(r, 1-eps, 1+eps) A_i) for a
// T_sub x G ratio matrix. The gradient passes through r only where the
// unclipped term is the minimum.
inline LossResult grpo_loss(const Matrix& ratios,
                            std::span<const double> advantages,
                            double clip_eps) {
  if (ratios.cols != advantages.size())
    throw InputError("ratio columns must match the number of advantages");
  if (ratios.rows == 0 || ratios.cols == 0)
    throw InputError("empty ratio matrix");
  check_ratios(ratios);
  const double norm = 1.0 / (double(ratios.rows) * double(ratios.cols));
  LossResult out;
  out.dloss_dratio = Matrix(ratios.rows, ratios.cols);
  std::size_t clipped = 0;
  for (std::size_t t = 0; t < ratios.rows; ++t) {
    for (std::size_t i = 0; i < ratios.cols; ++i) {
      const double r = ratios(t, i), a = advantages[i];
      const double rc = std::clamp(r, 1.0 - clip_eps, 1.0 + clip_eps);
      const double unclipped = r * a, bounded = rc * a;
      if (rc != r) ++clipped;
      if (unclipped <= bounded) {
        out.loss -= norm * unclipped;
        out.dloss_dratio(t, i) = -norm * a;
      } else {
        out.loss -= norm * bounded;
      }
    }
  }
  out.clip_fraction = double(clipped) * norm;
  return out;
}

// Unclipped importance-weighted policy gradient with one scalar baseline:
// -(1/N) sum_i (1/T) sum_t r_{t,i} (reward_i - baseline).
inline LossResult ddpo_baseline_loss(const Matrix& ratios,
                                     std::span<const double> rewards,
                                     double baseline) {
  if (ratios.cols != rewards.size())
    throw InputError("ratio columns must match the number of rewards");
  if (ratios.rows == 0 || ratios.cols == 0)
    throw InputError("empty ratio matrix");
  const double norm = 1.0 / (double(ratios.rows) * double(ratios.cols));
  LossResult out;
  out.dloss_dratio = Matrix(ratios.rows, ratios.cols);
  for (std::size_t t = 0; t < ratios.rows; ++t) {
    for (std::size_t i = 0; i < ratios.cols; ++i) {
      const double adv = rewards[i] - baseline;
      out.loss -= norm * ratios(t, i) * adv;
      out.dloss_dratio(t, i) = -norm * adv;
    }
  }
  return out;
}

// Sample estimate of KL(old || current): mean(old - current).
inline double kl_penalty(std::span<const double> current,
                         std::span<const double> old) {
  if (current.size() != old.size())
    throw InputError("kl_penalty inputs differ in length");
  if (current.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < current.size(); ++i) s += old[i] - current[i];
  return s / double(current.size());
}

// ---------------------------------------------------------------------------
// Timestep selection

inline std::size_t fraction_count(std::size_t n, double frac) {
  // The small slack keeps e.g. 0.6 * 50 at 30 despite rounding.
  const auto c = static_cast<std::size_t>(std::ceil(frac * double(n) - 1e-9));
  return std::clamp<std::size_t>(c, n > 0 ? 1 : 0, n);
}

// ceil(tau * n) indices drawn uniformly without replacement, sorted. Steps
// flagged non-stochastic are never drawn (n counts only eligible steps).
inline std::vector<std::size_t> subsample_timesteps(
    std::size_t T, double tau, Rng& rng,
    std::span<const bool> stochastic = {}) {
  if (!(tau > 0.0 && tau <= 1.0)) throw InputError("tau must lie in (0, 1]");
  std::vector<std::size_t> eligible;
  for (std::size_t k = 0; k < T; ++k)
    if (stochastic.empty() || stochastic[k]) eligible.push_back(k);
  const std::size_t m = fraction_count(eligible.size(), tau);
  if (m == eligible.size()) return eligible;
  // partial Fisher-Yates
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }
  eligible.resize(m);
  std::sort(eligible.begin(), eligible.end());
  return eligible;
}

// Index 0 is the first step taken from noise.
inline std::vector<std::size_t> subsample_strategy(std::size_t T,
                                                   TimestepMode mode,
                                                   double frac, Rng& rng) {
  if (!(frac > 0.0 && frac <= 1.0)) throw InputError("frac must lie in (0, 1]");
  const std::size_t m = fraction_count(T, frac);
  std::vector<std::size_t> out(m);
  switch (mode) {
    case TimestepMode::first_fraction:
      std::iota(out.begin(), out.end(), 0);
      return out;
    case TimestepMode::last_fraction:
      std::iota(out.begin(), out.end(), T - m);
      return out;
    case TimestepMode::random_fraction:
      return subsample_timesteps(T, frac, rng);
  }
  return out;
}

struct GroupLoss {
  double loss = 0.0;
  double clip_fraction = 0.0;
  double max_ratio_dev = 0.0;
};

// Objective of one group on the timestep subset idx, scaled by `scale`,
// with its parameter gradient added to grads (skipped when grads is empty).
// Old-policy logprobs are the ones recorded at rollout.
inline GroupLoss group_loss(const NoiseSchedule& sched, const DenoiserNet& net,
                            const SampleGroup& group,
                            std::span<const std::size_t> idx,
                            const GrpoConfig& cfg, double ddpo_baseline,
                            double scale, std::span<double> grads) {
  GroupLoss out;
  if (idx.empty()) return out;
  const std::size_t G = group.size();
  if (group.advantages.size() != G)
    throw InputError("group advantages are not set");
  Matrix ratios(idx.size(), G);
  std::vector<std::vector<StepEval>> evals(G);
  double kl = 0.0;
  for (std::size_t i = 0; i < G; ++i) {
    const Trajectory& tr = group.trajectories[i];
    evals[i] = recompute_logprobs(sched, net, tr, tr.plan.eps_level, idx);
    for (std::size_t t = 0; t < idx.size(); ++t) {
      const double diff = evals[i][t].logprob - tr.logprobs[idx[t]];
      ratios(t, i) = std::exp(diff);
      kl -= diff;
      out.max_ratio_dev = std::max(out.max_ratio_dev, std::abs(ratios(t, i) - 1.0));
    }
  }
  const double terms = double(idx.size() * G);
  const LossResult lr =
      cfg.objective == Objective::grpo
          ? grpo_loss(ratios, group.advantages, cfg.clip_eps)
          : ddpo_baseline_loss(ratios, group.advantages, ddpo_baseline);
  out.loss = scale * (lr.loss + cfg.kl_coeff * kl / terms);
  out.clip_fraction = scale * lr.clip_fraction;
  if (grads.empty()) return out;
  for (std::size_t i = 0; i < G; ++i) {
    const Trajectory& tr = group.trajectories[i];
    for (std::size_t t = 0; t < idx.size(); ++t) {
      // d ratio / d logp = ratio; the kl term is mean(old - current)
      double dlogp = lr.dloss_dratio(t, i) * ratios(t, i);
      if (cfg.kl_coeff != 0.0) dlogp -= cfg.kl_coeff / terms;
      backprop_logprob(net, evals[i][t], tr.actions[idx[t]], scale * dlogp, grads);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct IterationReport {
  std::size_t iter = 0;
  std::vector<double> mean_rewards;  // one per reward model, over all rollouts
  double loss = 0.0;                 // mean over gradient updates
  double clip_fraction = 0.0;
  double grad_norm = 0.0;            // mean pre-clip norm over updates
  double wallclock_ms = 0.0;

  bool operator==(const IterationReport&) const = default;
};

inline std::string metrics_csv_header(std::size_t reward_count) {
  std::string h = "iter";
  for (std::size_t k = 0; k < reward_count; ++k)
    h += ",mean_reward_k" + std::to_string(k);
  h += ",loss,clip_fraction,grad_norm,wallclock_ms";
  return h;
}

inline std::string metrics_csv_row(const IterationReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << r.iter;
  for (double m : r.mean_rewards) os << ',' << m;
  os << ',' << r.loss << ',' << r.clip_fraction << ',' << r.grad_norm << ','
     << static_cast<long long>(std::llround(r.wallclock_ms));
  return os.str();
}

class GrpoTrainer {
 public:
  GrpoTrainer(DenoiserNet& net, NoiseSchedule sched, StepPlan plan,
              std::vector<Reward> rewards, GrpoConfig cfg, std::uint64_t seed)
      : net_(net),
        sched_(std::move(sched)),
        plan_(std::move(plan)),
        rewards_(std::move(rewards)),
        cfg_(std::move(cfg)),
        seed_(seed),
        opt_(OptimizerState::for_params(net.params(), cfg_.learning_rate,
                                        cfg_.weight_decay)) {
    cfg_.validate();
    plan_.eps_level = cfg_.eps_level;
    plan_.validate();
    if (rewards_.empty()) throw InputError("at least one reward model required");
    for (const auto& r : rewards_) r.spec.validate();
  }

  const GrpoConfig& config() const { return cfg_; }
  const StepPlan& plan() const { return plan_; }
  const OptimizerState& optimizer() const { return opt_; }
  std::size_t iteration() const { return iter_; }
  // Groups used for the most recent update phase.
  const std::vector<SampleGroup>& last_groups() const { return groups_; }
  // Reports per update of the most recent iteration: ratios of the first
  // update are all exactly 1.
  const std::vector<double>& last_max_ratio_deviation() const {
    return ratio_dev_;
  }
  bool record_wallclock = false;

  // Prompt batch for an iteration: conditions drawn uniformly.
  std::vector<CondId> sample_conditions(std::size_t condition_count) const {
    Rng rng = make_stream(seed_, {iter_, 0x70726F6DULL});
    std::uniform_int_distribution<CondId> pick(0, condition_count - 1);
    std::vector<CondId> out(cfg_.prompts_per_iter);
    for (auto& c : out) c = pick(rng);
    return out;
  }

  IterationReport train_iteration(const std::vector<CondId>& conds) {
    if (conds.empty()) throw InputError("train_iteration needs a condition");
    const auto start = std::chrono::steady_clock::now();
    IterationReport report;
    report.iter = iter_;
    generate_groups(conds, report);
    ratio_dev_.clear();
    std::vector<std::vector<std::size_t>> fixed_subsets;
    if (!cfg_.resample_per_update) fixed_subsets = draw_subsets(0);
    for (std::size_t u = 0; u < cfg_.updates_per_iter; ++u) {
      const auto subsets =
          cfg_.resample_per_update ? draw_subsets(u) : fixed_subsets;
      const GroupLoss st = accumulate_gradients(subsets);
      if (!std::isfinite(st.loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at iteration " << iter_ << ", update " << u
            << " (loss=" << st.loss << ")";
        throw NumericalError(msg.str());
      }
      const double gn = optimizer_step(opt_, net_.params(), cfg_.grad_clip_norm);
      report.loss += st.loss / double(cfg_.updates_per_iter);
      report.clip_fraction += st.clip_fraction / double(cfg_.updates_per_iter);
      report.grad_norm += gn / double(cfg_.updates_per_iter);
      ratio_dev_.push_back(st.max_ratio_dev);
    }
    const auto stop = std::chrono::steady_clock::now();
    if (record_wallclock)
      report.wallclock_ms =
          std::chrono::duration<double, std::milli>(stop - start).count();
    ++iter_;
    return report;
  }

 private:
  void generate_groups(const std::vector<CondId>& conds,
                       IterationReport& report) {
    const std::size_t P = conds.size();
    const std::size_t N = cfg_.rollouts_per_prompt();
    const bool shared = cfg_.objective == Objective::grpo;
    std::vector<SampleGroup> pools(P);
    for (std::size_t p = 0; p < P; ++p) {
      pools[p].cond = conds[p];
      Rng noise_rng = make_stream(seed_, {iter_, p, 0x6E6F6973ULL});
      pools[p].init_noise = standard_normal(net_.input_dim(), noise_rng);
      pools[p].trajectories.resize(N);
    }
    const DenoiserNet& policy = net_;
    parallel_for(P * N, [&](std::size_t job) {
      const std::size_t p = job / N, i = job % N;
      Rng rng = make_stream(seed_, {iter_, p, i, 0x726F6C6CULL});
      Vector init = pools[p].init_noise;
      std::uint64_t noise_id = stream_seed(seed_, {iter_, p});
      if (!shared) {
        init = standard_normal(net_.input_dim(), rng);
        noise_id = stream_seed(seed_, {iter_, p, i});
      }
      pools[p].trajectories[i] =
          rollout(sched_, policy, plan_, conds[p], init, rng, noise_id);
    });
    report.mean_rewards.assign(rewards_.size(), 0.0);
    for (auto& pool : pools) {
      pool.rewards = eval_group_rewards(rewards_, pool);
      for (std::size_t i = 0; i < pool.size(); ++i)
        for (std::size_t k = 0; k < rewards_.size(); ++k)
          report.mean_rewards[k] += pool.rewards(i, k) / double(P * N);
    }
    groups_.clear();
    for (auto& pool : pools) {
      SampleGroup g = cfg_.bestofn ? curate(pool, *cfg_.bestofn) : std::move(pool);
      if (cfg_.objective == Objective::grpo)
        g.advantages = compute_advantages(g.rewards);
      groups_.push_back(std::move(g));
    }
    if (cfg_.objective == Objective::ddpo) {
      // Single global baseline; rewards summed over models.
      double total = 0.0, count = 0.0;
      for (auto& g : groups_) {
        g.advantages.assign(g.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          for (std::size_t k = 0; k < g.rewards.cols; ++k)
            g.advantages[i] += g.rewards(i, k);
          total += g.advantages[i];
          count += 1.0;
        }
      }
      ddpo_baseline_ = total / count;
    }
  }

  std::vector<std::vector<std::size_t>> draw_subsets(std::size_t update) const {
    std::vector<std::vector<std::size_t>> out(groups_.size());
    const std::size_t T = plan_.steps();
    auto mask = std::make_unique<bool[]>(T);
    for (std::size_t k = 0; k < T; ++k) mask[k] = plan_.eps_at(k) > 0.0;
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      Rng rng = make_stream(seed_, {iter_, g, update, 0x74696D65ULL});
      if (cfg_.timestep_mode == TimestepMode::random_fraction) {
        out[g] = subsample_timesteps(T, cfg_.tau, rng,
                                     std::span<const bool>(mask.get(), T));
      } else {
        out[g] = subsample_strategy(T, cfg_.timestep_mode, cfg_.tau, rng);
        std::erase_if(out[g], [&](std::size_t k) { return !mask[k]; });
      }
    }
    return out;
  }

  // Each group accumulates into its own buffer; buffers are reduced in
  // group order so results do not depend on the worker count.
  GroupLoss accumulate_gradients(
      const std::vector<std::vector<std::size_t>>& subsets) {
    const std::size_t P = groups_.size();
    const std::size_t nparams = net_.params().size();
    std::vector<Vector> grads(P, Vector(nparams, 0.0));
    std::vector<GroupLoss> stats(P);
    const DenoiserNet& policy = net_;
    parallel_for(P, [&](std::size_t g) {
      stats[g] = group_loss(sched_, policy, groups_[g], subsets[g], cfg_,
                            ddpo_baseline_, 1.0 / double(P), grads[g]);
    });
    GroupLoss total;
    auto sink = net_.params().grads();
    for (std::size_t g = 0; g < P; ++g) {
      for (std::size_t j = 0; j < nparams; ++j) sink[j] += grads[g][j];
      total.loss += stats[g].loss;
      total.clip_fraction += stats[g].clip_fraction;
      total.max_ratio_dev = std::max(total.max_ratio_dev, stats[g].max_ratio_dev);
    }
    return total;
  }

  DenoiserNet& net_;
  NoiseSchedule sched_;
  StepPlan plan_;
  std::vector<Reward> rewards_;
  GrpoConfig cfg_;
  std::uint64_t seed_;
  OptimizerState opt_;
  std::size_t iter_ = 0;
  std::vector<SampleGroup> groups_;
  std::vector<double> ratio_dev_;
  double ddpo_baseline_ = 0.0;
};

}  // namespace flowgrpo
