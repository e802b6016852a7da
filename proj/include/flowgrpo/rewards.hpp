#pragma once

// Closed-form reward functions r(z0, c) in [0, 1] and their binary
// thresholded variants.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowgrpo/errors.hpp"
#include "flowgrpo/group.hpp"

namespace flowgrpo {

enum class RewardKind { mode_affinity, region_indicator_smooth, alignment_toy };

inline std::string to_string(RewardKind k) {
  switch (k) {
    case RewardKind::mode_affinity: return "mode_affinity";
    case RewardKind::region_indicator_smooth: return "region_indicator_smooth";
    case RewardKind::alignment_toy: return "alignment_toy";
  }
  return "";
}

inline RewardKind parse_reward_kind(std::string_view s) {
  if (s == "mode_affinity") return RewardKind::mode_affinity;
  if (s == "region_indicator_smooth") return RewardKind::region_indicator_smooth;
  if (s == "alignment_toy") return RewardKind::alignment_toy;
  throw InputError("unknown reward kind: " + std::string(s));
}

struct RewardSpec {
  RewardKind kind = RewardKind::mode_affinity;
  // mode_affinity: one target mean per condition. alignment_toy: one
  // direction per condition. region_indicator_smooth: targets[0] is the
  // half-plane normal.
  std::vector<Vector> targets;
  double bandwidth = 1.0;  // kernel width b, or sigmoid length scale
  double offset = 0.0;     // half-plane offset along the unit normal
  double weight = 1.0;     // unused: rewards are combined via advantages

  void validate() const {
    if (targets.empty()) throw InputError("reward needs at least one target");
    if (!(bandwidth > 0.0)) throw InputError("reward bandwidth must be > 0");
    if (kind != RewardKind::mode_affinity) {
      for (const auto& d : targets) {
        double n = 0.0;
        for (double x : d) n += x * x;
        if (n == 0.0) throw InputError("reward direction vectors must be nonzero");
      }
    }
  }

  static RewardSpec mode_affinity(std::vector<Vector> means, double bandwidth) {
    return {RewardKind::mode_affinity, std::move(means), bandwidth, 0.0, 1.0};
  }
  static RewardSpec alignment(std::vector<Vector> directions) {
    return {RewardKind::alignment_toy, std::move(directions), 1.0, 0.0, 1.0};
  }
  static RewardSpec half_plane(Vector normal, double offset, double scale) {
    return {RewardKind::region_indicator_smooth, {std::move(normal)}, scale,
            offset, 1.0};
  }
};

struct BinaryThreshold {
  RewardSpec base;
  double tr = 0.0;
};

// A configured reward model: continuous, or thresholded when tr is set.
struct Reward {
  RewardSpec spec;
  std::optional<double> threshold;

  Reward() = default;
  Reward(RewardSpec s) : spec(std::move(s)) {}  // NOLINT(implicit)
  Reward(BinaryThreshold b) : spec(std::move(b.base)), threshold(b.tr) {}  // NOLINT
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("reward target dimension mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("reward target dimension mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i];
  return d;
}

}  // namespace detail

// Conditions index targets modulo their count. The null condition scores
// against the best-matching target.
inline double eval_reward(const RewardSpec& spec, std::span<const double> z0,
                          CondId cond) {
  auto score_against = [&](const Vector& target) {
    switch (spec.kind) {
      case RewardKind::mode_affinity:
        return std::exp(-detail::sq_dist(z0, target) /
                        (2.0 * spec.bandwidth * spec.bandwidth));
      case RewardKind::alignment_toy: {
        const double nz = std::sqrt(detail::dot(z0, z0));
        const double nd = std::sqrt(detail::dot(target, target));
        if (nz == 0.0) return 0.5;
        const double cosine = std::clamp(detail::dot(z0, target) / (nz * nd), -1.0, 1.0);
        return 0.5 * (cosine + 1.0);
      }
      case RewardKind::region_indicator_smooth: {
        const double nd = std::sqrt(detail::dot(target, target));
        const double signed_dist = detail::dot(z0, target) / nd - spec.offset;
        return 1.0 / (1.0 + std::exp(-signed_dist / spec.bandwidth));
      }
    }
    return 0.0;
  };
  if (spec.kind == RewardKind::region_indicator_smooth)
    return score_against(spec.targets.front());
  if (cond == kNullCondition) {
    double best = 0.0;
    for (const auto& t : spec.targets) best = std::max(best, score_against(t));
    return best;
  }
  return score_against(spec.targets[cond % spec.targets.size()]);
}

// 1 if the base reward strictly exceeds tr, else 0.
inline double eval_binary(const BinaryThreshold& bt, std::span<const double> z0,
                          CondId cond) {
  return eval_reward(bt.base, z0, cond) > bt.tr ? 1.0 : 0.0;
}

inline double eval_reward(const Reward& r, std::span<const double> z0,
                          CondId cond) {
  const double v = eval_reward(r.spec, z0, cond);
  if (!r.threshold) return v;
  return v > *r.threshold ? 1.0 : 0.0;
}

// Row i, column k: reward k of trajectory i's final state.
inline RewardMatrix eval_group_rewards(std::span<const Reward> rewards,
                                       const SampleGroup& group) {
  RewardMatrix m(group.size(), rewards.size());
  for (std::size_t i = 0; i < group.size(); ++i)
    for (std::size_t k = 0; k < rewards.size(); ++k)
      m(i, k) = eval_reward(rewards[k], group.trajectories[i].final_state(),
                            group.trajectories[i].cond);
  return m;
}

}  // namespace flowgrpo
