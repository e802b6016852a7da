#pragma once

// Analytic references for Gaussian data, finite-difference gradients and
// sample moments.

#include <cmath>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <utility>

#include "flowgrpo/errors.hpp"
#include "flowgrpo/group.hpp"
#include "flowgrpo/schedules.hpp"

namespace flowgrpo {

// Data distribution N(mean, cov_scale * I).
struct GaussianDataOracle {
  Vector mean;
  double cov_scale = 1.0;

  // Marginal variance of z_t per coordinate.
  double marginal_var(const NoiseSchedule& sched, double t) const {
    const double a = sched.alpha(t), s = sched.sigma(t);
    return a * a * cov_scale + s * s;
  }
};

// Exact score of p_t = N(alpha_t mean, (alpha_t^2 c + sigma_t^2) I).
inline Vector oracle_score(const GaussianDataOracle& oracle,
                           const NoiseSchedule& sched,
                           std::span<const double> z, double t) {
  if (!(t > 0.0 && t <= 1.0)) throw InputError("t must lie in (0, 1]");
  if (!(oracle.cov_scale > 0.0)) throw SingularityError("cov_scale must be > 0");
  if (z.size() != oracle.mean.size()) throw InputError("z has wrong dimension");
  const double v = oracle.marginal_var(sched, t);
  if (!(v > 0.0)) throw SingularityError("degenerate marginal variance");
  const double a = sched.alpha(t);
  Vector out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    out[i] = -(z[i] - a * oracle.mean[i]) / v;
  return out;
}

// Posterior-mean predictor for Gaussian data: E[eps | z_t] or
// E[d alpha x + d sigma eps | z_t]. Satisfies Predictor.
class OraclePredictor {
 public:
  OraclePredictor(GaussianDataOracle oracle, NoiseSchedule sched,
                  PredictionKind kind)
      : oracle_(std::move(oracle)), sched_(std::move(sched)), kind_(kind) {}

  PredictionKind kind() const { return kind_; }

  Vector predict(std::span<const double> z, double t, CondId) const {
    const double a = sched_.alpha(t), s = sched_.sigma(t);
    const double v = oracle_.marginal_var(sched_, t);
    Vector out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double centered = z[i] - a * oracle_.mean[i];
      const double eps = s * centered / v;
      if (kind_ == PredictionKind::epsilon) {
        out[i] = eps;
      } else {
        const double x = oracle_.mean[i] + a * oracle_.cov_scale * centered / v;
        out[i] = sched_.dalpha(t) * x + sched_.dsigma(t) * eps;
      }
    }
    return out;
  }

 private:
  GaussianDataOracle oracle_;
  NoiseSchedule sched_;
  PredictionKind kind_;
};

// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h; params are
// restored afterwards.
inline Vector finite_diff_grad(const std::function<double()>& loss_fn,
                               std::span<double> params, double h) {
  if (!(h > 0.0)) throw InputError("finite-difference step must be > 0");
  Vector grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    params[i] = orig + h;
    const double up = loss_fn();
    params[i] = orig - h;
    const double down = loss_fn();
    params[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericalError("non-finite loss during finite differencing");
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

struct Moments {
  Vector mean;
  Matrix cov;
};

// Sample mean and Bessel-corrected covariance.
inline Moments sample_moments(std::span<const Vector> samples) {
  if (samples.size() < 2) throw InputError("sample_moments needs >= 2 samples");
  const std::size_t d = samples.front().size();
  const double n = double(samples.size());
  Moments m;
  m.mean.assign(d, 0.0);
  for (const auto& x : samples) {
    if (x.size() != d) throw InputError("samples differ in dimension");
    for (std::size_t i = 0; i < d; ++i) m.mean[i] += x[i] / n;
  }
  m.cov = Matrix(d, d);
  for (const auto& x : samples)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        m.cov(i, j) += (x[i] - m.mean[i]) * (x[j] - m.mean[j]) / (n - 1.0);
  return m;
}

// Relative error with an absolute floor on the denominator.
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct CheckReport {
  std::string name;
  bool pass = false;
  double measured = 0.0;
  double tolerance = 0.0;
  std::string details;

  std::string line() const {
    std::ostringstream os;
    os.precision(6);
    os << (pass ? "PASS " : "FAIL ") << name << " measured=" << measured
       << " tolerance=" << tolerance;
    if (!details.empty()) os << " | " << details;
    return os.str();
  }
};

inline CheckReport make_check(std::string name, double measured,
                              double tolerance, bool pass,
                              std::string details = {}) {
  CheckReport r{std::move(name), pass, measured, tolerance, std::move(details)};
  if (!r.pass && r.details.empty()) r.details = "measured value outside tolerance";
  return r;
}

}  // namespace flowgrpo
