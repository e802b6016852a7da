#pragma once

// Best-of-N curation: keep the top and bottom rollouts of a larger pool.

#include <algorithm>
#include <numeric>
#include <vector>

#include "flowgrpo/advantage.hpp"
#include "flowgrpo/errors.hpp"
#include "flowgrpo/group.hpp"

namespace flowgrpo {

struct CurationPlan {
  std::size_t n_candidates = 64;
  std::size_t keep_top = 8;
  std::size_t keep_bottom = 8;

  std::size_t kept() const { return keep_top + keep_bottom; }

  void validate() const {
    if (keep_top < 1 || keep_bottom < 1)
      throw InputError("curation must keep at least one top and one bottom");
    if (keep_top + keep_bottom > n_candidates)
      throw InputError("curation keeps more samples than candidates");
  }
};

struct CurationIndices {
  std::vector<std::size_t> top;     // best first
  std::vector<std::size_t> bottom;  // ascending rank, worst last
};

// Ranking statistic: the reward itself for K = 1, the summed standardized
// rewards for K > 1.
inline std::vector<double> curation_scores(const RewardMatrix& rewards) {
  if (rewards.cols == 1) {
    std::vector<double> s(rewards.rows);
    for (std::size_t i = 0; i < rewards.rows; ++i) s[i] = rewards(i, 0);
    return s;
  }
  return compute_advantages(rewards);
}

// Ranks by score descending with ties broken by ascending index; top takes
// the head of that order and bottom the tail.
inline CurationIndices curate_indices(const std::vector<double>& scores,
                                      const CurationPlan& plan) {
  plan.validate();
  if (scores.size() != plan.n_candidates)
    throw InputError("pool size does not match n_candidates");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  CurationIndices out;
  out.top.assign(order.begin(), order.begin() + plan.keep_top);
  out.bottom.assign(order.end() - plan.keep_bottom, order.end());
  return out;
}

// Builds the curated SampleGroup (top then bottom). Rewards are copied;
// advantages are left for the caller to recompute within the curated group.
inline SampleGroup curate(const SampleGroup& pool, const CurationPlan& plan) {
  if (pool.rewards.rows != pool.size())
    throw InputError("pool rewards must be computed before curation");
  const CurationIndices idx = curate_indices(curation_scores(pool.rewards), plan);
  SampleGroup out;
  out.cond = pool.cond;
  out.init_noise = pool.init_noise;
  out.rewards = RewardMatrix(plan.kept(), pool.rewards.cols);
  std::size_t row = 0;
  for (const auto* part : {&idx.top, &idx.bottom}) {
    for (std::size_t i : *part) {
      out.trajectories.push_back(pool.trajectories[i]);
      for (std::size_t k = 0; k < pool.rewards.cols; ++k)
        out.rewards(row, k) = pool.rewards(i, k);
      ++row;
    }
  }
  return out;
}

}  // namespace flowgrpo
