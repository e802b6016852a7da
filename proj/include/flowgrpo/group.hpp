#pragma once

#include <vector>

#include "flowgrpo/samplers.hpp"

namespace flowgrpo {

// Dense row-major matrix of reals.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t k) { return data[i * cols + k]; }
  double operator()(std::size_t i, std::size_t k) const {
    return data[i * cols + k];
  }
};

// G x K: row i holds the K rewards of group member i.
using RewardMatrix = Matrix;

// G trajectories rolled out for one condition from one shared init noise.
struct SampleGroup {
  CondId cond = kNullCondition;
  Vector init_noise;
  std::vector<Trajectory> trajectories;
  RewardMatrix rewards;
  std::vector<double> advantages;

  std::size_t size() const { return trajectories.size(); }

  // True iff every member starts at init_noise and carries cond.
  bool shares_init_noise() const {
    for (const auto& tr : trajectories)
      if (tr.cond != cond || tr.states.empty() || tr.states.front() != init_noise)
        return false;
    return true;
  }
};

}  // namespace flowgrpo
