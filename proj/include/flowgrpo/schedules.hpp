#pragma once

// Interpolant schedules z_t = alpha(t) x + sigma(t) eps, time running from
// data (t = 0) to noise (t = 1), and the diffusion-SDE coefficients that
// reproduce their marginals.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <string_view>

#include "flowgrpo/errors.hpp"
#include "flowgrpo/nn.hpp"

namespace flowgrpo {

enum class ScheduleKind { rectified_flow, vp_diffusion, custom };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::rectified_flow: return "rectified_flow";
    case ScheduleKind::vp_diffusion: return "vp_diffusion";
    case ScheduleKind::custom: return "custom";
  }
  return "custom";
}

// Endpoint margin used whenever SDE coefficients are evaluated inside a
// sampler; both alpha -> 0 and sigma -> 0 are singular.
inline constexpr double kTimeMargin = 1e-3;

class NoiseSchedule {
 public:
  using Fn = std::function<double(double)>;

  static NoiseSchedule rectified_flow() {
    return NoiseSchedule(ScheduleKind::rectified_flow);
  }

  // alpha = sqrt(1 - t^2), sigma = t.
  static NoiseSchedule vp_diffusion() {
    return NoiseSchedule(ScheduleKind::vp_diffusion);
  }

  static NoiseSchedule custom(Fn alpha, Fn sigma, Fn dalpha, Fn dsigma) {
    NoiseSchedule s(ScheduleKind::custom);
    s.alpha_ = std::move(alpha);
    s.sigma_ = std::move(sigma);
    s.dalpha_ = std::move(dalpha);
    s.dsigma_ = std::move(dsigma);
    return s;
  }

  static NoiseSchedule by_name(std::string_view name) {
    if (name == "rectified_flow") return rectified_flow();
    if (name == "vp_diffusion") return vp_diffusion();
    throw InputError("unknown schedule: " + std::string(name));
  }

  ScheduleKind kind() const { return kind_; }

  double alpha(double t) const {
    switch (kind_) {
      case ScheduleKind::rectified_flow: return 1.0 - t;
      case ScheduleKind::vp_diffusion: return std::sqrt(std::max(0.0, 1.0 - t * t));
      case ScheduleKind::custom: return alpha_(t);
    }
    return 0.0;
  }

  double sigma(double t) const {
    return kind_ == ScheduleKind::custom ? sigma_(t) : t;
  }

  double dalpha(double t) const {
    switch (kind_) {
      case ScheduleKind::rectified_flow: return -1.0;
      case ScheduleKind::vp_diffusion: {
        const double a = std::sqrt(std::max(0.0, 1.0 - t * t));
        if (a == 0.0) throw SingularityError("d alpha/dt is infinite at t=1");
        return -t / a;
      }
      case ScheduleKind::custom: return dalpha_(t);
    }
    return 0.0;
  }

  double dsigma(double t) const {
    return kind_ == ScheduleKind::custom ? dsigma_(t) : 1.0;
  }

 private:
  explicit NoiseSchedule(ScheduleKind k) : kind_(k) {}

  ScheduleKind kind_;
  Fn alpha_, sigma_, dalpha_, dsigma_;
};

inline void check_unit_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw InputError("t must lie in [0, 1]");
}

// alpha_t x + sigma_t noise.
inline Vector forward_marginal(const NoiseSchedule& sched,
                               std::span<const double> x, double t,
                               std::span<const double> noise) {
  check_unit_time(t);
  if (x.size() != noise.size())
    throw InputError("data and noise dimensions differ");
  const double a = sched.alpha(t), s = sched.sigma(t);
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + s * noise[i];
  return out;
}

// Score of N(alpha_t x, sigma_t^2 I) at z.
inline Vector gaussian_score(const NoiseSchedule& sched,
                             std::span<const double> z,
                             std::span<const double> x, double t) {
  check_unit_time(t);
  if (z.size() != x.size()) throw InputError("z and x dimensions differ");
  const double s = sched.sigma(t);
  if (s == 0.0) throw SingularityError("gaussian score undefined at sigma=0");
  const double a = sched.alpha(t);
  Vector out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    out[i] = -(z[i] - a * x[i]) / (s * s);
  return out;
}

// c_z * z + c_pred * pred, elementwise.
struct Affine {
  double z = 0.0;
  double pred = 0.0;

  Vector apply(std::span<const double> zv, std::span<const double> pv) const {
    Vector out(zv.size());
    for (std::size_t i = 0; i < zv.size(); ++i)
      out[i] = z * zv[i] + pred * pv[i];
    return out;
  }
};

// Every quantity a sampler needs, written as an affine function of the
// current state and the raw network output. Keeping them affine gives exact
// gradients of step means with respect to the prediction.
struct PredictionMap {
  Affine x_hat;
  Affine eps_hat;
  Affine velocity;
  Affine score;
};

inline PredictionMap prediction_map(const NoiseSchedule& sched,
                                    PredictionKind kind, double t) {
  check_unit_time(t);
  const double a = sched.alpha(t), s = sched.sigma(t);
  const double da = sched.dalpha(t), ds = sched.dsigma(t);
  if (s == 0.0) throw SingularityError("score undefined at sigma=0");
  PredictionMap m;
  if (kind == PredictionKind::epsilon) {
    if (a == 0.0) throw SingularityError("x_hat undefined at alpha=0");
    m.eps_hat = {0.0, 1.0};
    m.x_hat = {1.0 / a, -s / a};
    m.score = {0.0, -1.0 / s};
  } else {
    // u = da x + ds eps; (z, u) -> (x, eps) has determinant ds*a - da*s.
    const double det = ds * a - da * s;
    if (det == 0.0) throw SingularityError("velocity parameterization degenerate");
    m.x_hat = {ds / det, -s / det};
    m.eps_hat = {-da / det, a / det};
    m.score = {da / (det * s), -a / (det * s)};
  }
  m.velocity = {da * m.x_hat.z + ds * m.eps_hat.z,
                da * m.x_hat.pred + ds * m.eps_hat.pred};
  if (kind == PredictionKind::velocity) m.velocity = {0.0, 1.0};
  return m;
}

// Score implied by a network output. Epsilon: -pred/sigma. Velocity:
// x_hat = z - t pred on the rectified flow (the general interpolant
// inversion otherwise), then the Gaussian score at x_hat.
inline Vector score_from_prediction(const NoiseSchedule& sched,
                                    PredictionKind kind,
                                    std::span<const double> pred,
                                    std::span<const double> z, double t) {
  if (pred.size() != z.size()) throw InputError("pred and z dimensions differ");
  if (!(t > 0.0 && t <= 1.0)) throw InputError("t must lie in (0, 1]");
  if (kind == PredictionKind::velocity) {
    const Vector x_hat = prediction_map(sched, kind, t).x_hat.apply(z, pred);
    return gaussian_score(sched, z, x_hat, t);
  }
  return prediction_map(sched, kind, t).score.apply(z, pred);
}

struct SdeCoeffs {
  double f = 0.0;    // drift, d log alpha / dt
  double g2 = 0.0;   // squared diffusion, 2 alpha sigma d(sigma/alpha)/dt
  double eta = 0.0;  // eps_level / g
};

inline SdeCoeffs interpolant_to_sde(const NoiseSchedule& sched, double t,
                                    double eps_level) {
  if (!(t > 0.0 && t < 1.0)) throw InputError("t must lie in (0, 1)");
  if (eps_level < 0.0) throw InputError("eps_level must be nonnegative");
  const double a = sched.alpha(t);
  if (a == 0.0) throw SingularityError("SDE coefficients undefined at alpha=0");
  const double s = sched.sigma(t), da = sched.dalpha(t), ds = sched.dsigma(t);
  SdeCoeffs c;
  c.f = da / a;
  // d(sigma/alpha)/dt = (a ds - da s) / a^2
  c.g2 = 2.0 * a * s * (a * ds - da * s) / (a * a);
  if (eps_level == 0.0) {
    c.eta = 0.0;
  } else {
    if (!(c.g2 > 0.0))
      throw SingularityError("eta undefined where g^2 = 0");
    c.eta = eps_level / std::sqrt(c.g2);
  }
  return c;
}

inline double clamp_sde_time(double t) {
  return std::clamp(t, kTimeMargin, 1.0 - kTimeMargin);
}

}  // namespace flowgrpo
