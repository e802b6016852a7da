#pragma once

#include <cmath>
#include <vector>

#include "flowgrpo/errors.hpp"
#include "flowgrpo/group.hpp"

namespace flowgrpo {

// Groups whose reward column has population std below this contribute zero
// advantage for that column.
inline constexpr double kAdvantageStdFloor = 1e-8;

// Group-relative advantages: each reward column is standardized with the
// group mean and population standard deviation, then columns are summed.
inline std::vector<double> compute_advantages(const RewardMatrix& rewards) {
  const std::size_t G = rewards.rows;
  if (G < 2) throw InputError("advantages need a group of at least 2");
  std::vector<double> adv(G, 0.0);
  std::vector<double> dev(G);
  for (std::size_t k = 0; k < rewards.cols; ++k) {
    // Deviations are taken from the first member before centering, so a
    // constant shift of the column cancels before any rounding.
    const double pivot = rewards(0, k);
    double shift = 0.0;
    for (std::size_t i = 0; i < G; ++i) shift += rewards(i, k) - pivot;
    shift /= double(G);
    double var = 0.0;
    for (std::size_t i = 0; i < G; ++i) {
      dev[i] = (rewards(i, k) - pivot) - shift;
      var += dev[i] * dev[i];
    }
    const double sd = std::sqrt(var / double(G));
    if (!(sd >= kAdvantageStdFloor)) continue;
    for (std::size_t i = 0; i < G; ++i) adv[i] += dev[i] / sd;
  }
  return adv;
}

}  // namespace flowgrpo
