#pragma once

// Exponential control barrier functions for the planar vehicle. Three
// barrier families are supported: circular obstacles in position space
// (relative degree 2), a roll-angle corridor (relative degree 2) and a
// roll-rate cap (relative degree 1). Constraints come out affine in the
// input, a * u >= b, so they drop straight into a QP.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <stdexcept>

#include "skistunt/common.hpp"
#include "skistunt/vehicle_model.hpp"

namespace skistunt {

enum class BarrierKind { kObstacle, kRollAngle, kRollRate };

struct BarrierSpec {
  BarrierKind kind = BarrierKind::kObstacle;

  // kObstacle: disc center, physical radius and extra clearance.
  double cx = 0.0;
  double cy = 0.0;
  double radius = 1.0;
  double buffer = 0.0;

  // kRollAngle / kRollRate limits.
  double phi_max = deg2rad(10.0);
  double phi_dot_max = deg2rad(120.0);

  // Exponential gains: gamma[i] multiplies the i-th time derivative of h
  // in the constraint  h^(p) >= -sum_i gamma[i] h^(i).  Degree-1 barriers
  // only use gamma[0].  With the rate term weighted harder the condition
  // already binds several metres before a head-on threat, which is the
  // only window in which a lean-mediated vehicle can still build the
  // lateral offset a graze requires.
  std::array<double, 2> gamma{1.0, 1.5};

  static BarrierSpec obstacle(double cx, double cy, double radius,
                              double buffer) {
    BarrierSpec s;
    s.kind = BarrierKind::kObstacle;
    s.cx = cx;
    s.cy = cy;
    s.radius = radius;
    s.buffer = buffer;
    return s;
  }

  static BarrierSpec roll_angle(double phi_max) {
    BarrierSpec s;
    s.kind = BarrierKind::kRollAngle;
    s.phi_max = phi_max;
    return s;
  }

  static BarrierSpec roll_rate(double phi_dot_max) {
    BarrierSpec s;
    s.kind = BarrierKind::kRollRate;
    s.phi_dot_max = phi_dot_max;
    s.gamma = {1.5, 0.0};
    return s;
  }

  int relative_degree() const {
    return kind == BarrierKind::kRollRate ? 1 : 2;
  }

  void validate() const {
    if (kind == BarrierKind::kObstacle && (radius <= 0.0 || buffer < 0.0))
      throw ConfigError("obstacle barrier needs radius > 0 and buffer >= 0");
    if (kind == BarrierKind::kRollAngle && phi_max <= 0.0)
      throw ConfigError("roll-angle barrier needs phi_max > 0");
    if (kind == BarrierKind::kRollRate && phi_dot_max <= 0.0)
      throw ConfigError("roll-rate barrier needs phi_dot_max > 0");
    if (gamma[0] <= 0.0 || (relative_degree() == 2 && gamma[1] <= 0.0))
      throw ConfigError("barrier gains must be positive");
  }
};

// Barrier value robustified by the model-error variances `sigma`
// (planar x, planar y, roll acceleration). The variances are frozen for
// the duration of one control step; pass zeros when running the nominal
// model. The rate cap lives in velocity space where the acceleration
// variance has no additive counterpart, so it is left unshifted.
inline double barrier_value(const BarrierSpec& spec, const VehicleParams& p,
                            const VehicleState& s,
                            const Eigen::Vector3d& sigma) {
  switch (spec.kind) {
    case BarrierKind::kObstacle: {
      const double dx = s.x - spec.cx, dy = s.y - spec.cy;
      const double reff = spec.radius + spec.buffer;
      return dx * dx + dy * dy - reff * reff - sigma(0) - sigma(1);
    }
    case BarrierKind::kRollAngle: {
      const double span = spec.phi_max + p.phi_g;
      const double off = s.phi + p.phi_g;
      return span * span - off * off - sigma(2);
    }
    case BarrierKind::kRollRate:
      return spec.phi_dot_max * spec.phi_dot_max - s.phi_dot * s.phi_dot;
  }
  throw std::logic_error("unreachable barrier kind");
}

// First time derivative for the degree-2 barriers. It does not involve
// the input, which only shows up one derivative later.
inline double barrier_rate(const BarrierSpec& spec, const VehicleParams& p,
                           const VehicleState& s) {
  switch (spec.kind) {
    case BarrierKind::kObstacle:
      return 2.0 * ((s.x - spec.cx) * s.x_dot + (s.y - spec.cy) * s.y_dot);
    case BarrierKind::kRollAngle:
      return -2.0 * (s.phi + p.phi_g) * s.phi_dot;
    case BarrierKind::kRollRate:
      throw std::logic_error("rate barrier has no input-free derivative");
  }
  throw std::logic_error("unreachable barrier kind");
}

struct ConstraintRow {
  Eigen::RowVector2d a = Eigen::RowVector2d::Zero();  // a * u >= b
  double b = 0.0;
  double h = 0.0;      // robustified barrier value at assembly
  double h_dot = 0.0;  // input-free rate (degree-2 barriers only)
};

// Builds the exponential-barrier constraint at the current state.
// `f_mean` is the learned acceleration residual (planar x, planar y,
// roll), evaluated by the caller at features frozen with respect to the
// input so the row stays affine in u. Pass zeros for the nominal model.
inline ConstraintRow assemble_constraint(const BarrierSpec& spec,
                                         const VehicleParams& p,
                                         const VehicleState& s,
                                         const Eigen::Vector3d& f_mean,
                                         const Eigen::Vector3d& sigma) {
  ConstraintRow row;
  row.h = barrier_value(spec, p, s, sigma);
  switch (spec.kind) {
    case BarrierKind::kObstacle: {
      row.h_dot = barrier_rate(spec, p, s);
      const double dx = s.x - spec.cx, dy = s.y - spec.cy;
      const double c = std::cos(s.psi), sn = std::sin(s.psi);
      row.a = 2.0 * Eigen::RowVector2d(dx * c + dy * sn,
                                       s.v * (-dx * sn + dy * c));
      const double drift = 2.0 * (s.x_dot * s.x_dot + s.y_dot * s.y_dot) +
                           2.0 * (dx * f_mean(0) + dy * f_mean(1));
      row.b = -spec.gamma[0] * row.h - spec.gamma[1] * row.h_dot - drift;
      return row;
    }
    case BarrierKind::kRollAngle: {
      row.h_dot = barrier_rate(spec, p, s);
      const RollTerms rt = roll_terms(p, s.phi, s.v);
      const double off = s.phi + p.phi_g;
      row.a = Eigen::RowVector2d(0.0, -2.0 * off * rt.g_phi);
      const double drift = -2.0 * s.phi_dot * s.phi_dot -
                           2.0 * off * (rt.f_phi + f_mean(2));
      row.b = -spec.gamma[0] * row.h - spec.gamma[1] * row.h_dot - drift;
      return row;
    }
    case BarrierKind::kRollRate: {
      const RollTerms rt = roll_terms(p, s.phi, s.v);
      row.a = Eigen::RowVector2d(0.0, -2.0 * s.phi_dot * rt.g_phi);
      const double drift = -2.0 * s.phi_dot * (rt.f_phi + f_mean(2));
      row.b = -spec.gamma[0] * row.h - drift;
      return row;
    }
  }
  throw std::logic_error("unreachable barrier kind");
}

namespace detail {

// Integral of |C exp(A t) B| for the chain-of-integrators error system
// closed by the exponential gains, A = [[0,1],[-g0,-g1]], B = [0;1],
// C = [1,0]. Equals 1/g0 when the poles are real (nonnegative impulse
// response) and exceeds it in the oscillatory case.
inline double l1_impulse_gain_deg2(double g0, double g1) {
  const double disc = g1 * g1 - 4.0 * g0;
  if (disc >= 0.0) return 1.0 / g0;
  const double a = 0.5 * g1;
  const double w = 0.5 * std::sqrt(-disc);
  // closed form for int_0^inf e^{-a t} |sin(w t)| dt, scaled by 1/w
  return (1.0 / (a * a + w * w)) / std::tanh(a * kPi / (2.0 * w));
}

}  // namespace detail

// Worst-case barrier degradation when the residual stays inside the
// per-dimension confidence margins: the margins bound the disturbance on
// the highest derivative of h, and the bound is pushed through the
// closed exponential error dynamics. For degree-1 barriers this reduces
// to bound / gamma[0].
inline double h_delta_max_estimate(const BarrierSpec& spec,
                                   const VehicleParams& p,
                                   const VehicleState& s,
                                   const Eigen::Vector3d& margins) {
  double bound = 0.0;
  switch (spec.kind) {
    case BarrierKind::kObstacle:
      bound = 2.0 * (std::abs(s.x - spec.cx) * margins(0) +
                     std::abs(s.y - spec.cy) * margins(1));
      break;
    case BarrierKind::kRollAngle:
      bound = 2.0 * std::abs(s.phi + p.phi_g) * margins(2);
      break;
    case BarrierKind::kRollRate:
      return 2.0 * std::abs(s.phi_dot) * margins(2) / spec.gamma[0];
  }
  return bound * detail::l1_impulse_gain_deg2(spec.gamma[0], spec.gamma[1]);
}

}  // namespace skistunt
