#pragma once

// Planar + roll dynamics of an underactuated two-wheel-balancing vehicle.
//
// The vehicle drives on the wheels of one side only ("ski-stunt" maneuver):
// planar motion is a unicycle driven by speed/yaw-rate accelerations, and the
// roll motion is an inverted pendulum above the wheel contact line, actuated
// only through the yaw rate (centrifugal torque). A synthetic residual term
// stands in for unmodeled dynamics so that a ground-truth plant exists to
// train and evaluate the learned model against.

#include <cmath>
#include <string>

#include "skistunt/common.hpp"

namespace skistunt {

struct VehicleParams {
  double m = 11.4;     // vehicle mass [kg]
  double j_t = 1.35;   // roll inertia about the contact line [kg m^2]
  double l_1 = 0.48;   // wheelbase [m]
  double y_g = 0.25;   // CoM lateral offset in the contact-line frame [m]
  double z_g = 0.29;   // CoM height in the contact-line frame [m]
  double l_g = 0.0;    // CoM distance from contact line [m], derived
  double phi_g = deg2rad(40.0);  // contact-line-to-CoM angle [rad]
  double g = 9.81;     // gravity [m/s^2]

  VehicleParams() { l_g = std::sqrt(y_g * y_g + z_g * z_g); validate(); }

  VehicleParams(double m_, double j_t_, double l_1_, double y_g_, double z_g_,
                double phi_g_rad = deg2rad(40.0), double g_ = 9.81)
      : m(m_), j_t(j_t_), l_1(l_1_), y_g(y_g_), z_g(z_g_),
        l_g(std::sqrt(y_g_ * y_g_ + z_g_ * z_g_)), phi_g(phi_g_rad), g(g_) {
    validate();
  }

  void validate() const {
    if (!(m > 0.0 && j_t > 0.0 && l_1 > 0.0 && l_g > 0.0 && g > 0.0))
      throw ConfigError("VehicleParams: masses, inertias and lengths must be positive");
    if (!(phi_g > 0.0 && phi_g < kPi / 2.0))
      throw ConfigError("VehicleParams: phi_g must lie in (0, pi/2)");
  }

  // Angle implied by the CoM geometry; tabulated phi_g is kept separately
  // because the hardware calibration rounds it.
  double phi_g_from_geometry() const { return kPi / 2.0 - std::atan(std::abs(z_g / y_g)); }
};

// Pose + velocities. x_dot/y_dot are derived from (v, psi) and kept
// consistent with them (x_dot = v cos psi, y_dot = v sin psi).
struct VehicleState {
  double x = 0.0;
  double y = 0.0;
  double psi = 0.0;      // yaw [rad]
  double v = 0.0;        // forward speed [m/s]
  double phi = 0.0;      // roll [rad]; 0 is the balance-upright reference
  double phi_dot = 0.0;  // roll rate [rad/s]
  double x_dot = 0.0;
  double y_dot = 0.0;

  static VehicleState make(double x, double y, double psi, double v,
                           double phi, double phi_dot) {
    VehicleState s{x, y, psi, v, phi, phi_dot, 0.0, 0.0};
    s.reproject();
    return s;
  }

  // Re-derives the planar velocity from (v, psi).
  void reproject() {
    x_dot = v * std::cos(psi);
    y_dot = v * std::sin(psi);
  }

  bool kinematically_consistent(double tol = 1e-9) const {
    return std::abs(x_dot - v * std::cos(psi)) <= tol &&
           std::abs(y_dot - v * std::sin(psi)) <= tol;
  }
};

// Control input: u_v = dv/dt command, u_psi = dpsi/dt command.
struct ControlInput {
  double u_v = 0.0;
  double u_psi = 0.0;
};

struct PlanarAccel {
  double ax = 0.0;
  double ay = 0.0;
};

// [ax; ay] = g_r(v, psi) [u_v; u_psi] with
// g_r = [[cos psi, -v sin psi], [sin psi, v cos psi]], det(g_r) = v.
inline PlanarAccel planar_accel(double v, double psi, const ControlInput& u) {
  const double c = std::cos(psi), s = std::sin(psi);
  return {c * u.u_v - v * s * u.u_psi, s * u.u_v + v * c * u.u_psi};
}

// Inverse of the planar input map: [u_v; u_psi] = g_r^{-1} [ax; ay].
// Singular at v = 0.
inline ControlInput invert_planar_accel(double v, double psi, double ax, double ay,
                                        double v_tol = 1e-9) {
  if (std::abs(v) < v_tol)
    throw std::domain_error("invert_planar_accel: planar input map is singular at v = 0");
  const double c = std::cos(psi), s = std::sin(psi);
  return {c * ax + s * ay, (-s * ax + c * ay) / v};
}

// Yaw rate produced by a steering angle: psi_dot = v tan(steer) / (l_1 cos phi_r),
// phi_r = phi + phi_g is the roll angle of the steering plane.
inline double yaw_rate_from_steer(double v, double steer, double phi_r, double l_1) {
  const double c = std::cos(phi_r);
  if (std::abs(c) < 1e-6)
    throw std::domain_error("yaw_rate_from_steer: steering plane is degenerate (cos phi_r ~ 0)");
  return v * std::tan(steer) / (l_1 * c);
}

// Steering angle that realizes a commanded yaw rate at the current state.
inline double steer_from_yaw_rate(double u_psi, double v, double phi_r, double l_1,
                                  double v_tol = 1e-6) {
  if (std::abs(v) < v_tol) return 0.0;
  return std::atan(u_psi * l_1 * std::cos(phi_r) / v);
}

// Roll dynamics phi_ddot = f_phi + g_phi * u_psi (inverted pendulum with
// centrifugal actuation through the yaw rate).
struct RollTerms {
  double f_phi = 0.0;  // m g l_g sin(phi) / j_t
  double g_phi = 0.0;  // m v l_g cos(phi) / j_t
};

inline RollTerms roll_terms(const VehicleParams& p, double phi, double v) {
  const double k = p.m * p.l_g / p.j_t;
  return {k * p.g * std::sin(phi), k * v * std::cos(phi)};
}

// Acceleration-level derivative of the nominal model.
struct AccelVector {
  double ax = 0.0;       // x acceleration
  double ay = 0.0;       // y acceleration
  double phi_ddot = 0.0; // roll acceleration
};

inline AccelVector nominal_accel(const VehicleParams& p, const VehicleState& s,
                                 const ControlInput& u) {
  const PlanarAccel pa = planar_accel(s.v, s.psi, u);
  const RollTerms rt = roll_terms(p, s.phi, s.v);
  return {pa.ax, pa.ay, rt.f_phi + rt.g_phi * u.u_psi};
}

// Synthetic unmodeled dynamics: the ground-truth plant adds these
// accelerations on top of the nominal model.
inline AccelVector residual_accel(const VehicleState& s) {
  const double c = std::cos(s.psi), sn = std::sin(s.psi);
  return {0.5 * s.v * c * c * sn,
          0.5 * s.v * c * sn,
          0.25 * s.v * s.v * std::sin(s.phi) - 0.25 * s.phi_dot};
}

// Optional higher-fidelity steer-induced torque for robustness studies. The
// default plant uses the simplified torque baked into roll_terms; this adds
// the neglected centrifugal/rate terms (yaw acceleration taken as zero).
struct HifiTorqueParams {
  bool enabled = false;
  double x_g = 0.1;  // CoM longitudinal offset [m]
  double j_y = 0.7;  // pitch inertia [kg m^2]
  double j_z = 0.7;  // yaw inertia [kg m^2]
};

inline double hifi_torque_extra(const VehicleParams& p, const HifiTorqueParams& hp,
                                const VehicleState& s, double psi_dot) {
  if (!hp.enabled) return 0.0;
  const double cph = std::cos(s.phi), sph = std::sin(s.phi);
  const double extra =
      p.m * p.l_g * p.l_g * psi_dot * psi_dot * sph * cph +
      (cph * cph * hp.j_z + sph * sph * hp.j_y) * psi_dot * psi_dot -
      p.m * p.l_g * hp.x_g * s.phi_dot * sph * psi_dot;
  return extra / p.j_t;
}

// Time derivative of the integration coordinates (x, y, psi, v, phi, phi_dot).
struct StateDeriv {
  double x_dot = 0.0;
  double y_dot = 0.0;
  double psi_dot = 0.0;
  double v_dot = 0.0;
  double phi_dot = 0.0;
  double phi_ddot = 0.0;
};

enum class SpeedMode {
  kFree,      // v integrates u_v (plus any residual along-track acceleration)
  kConstant,  // v is held by an ideal drivetrain servo
};

// Ground-truth plant derivative. The planar residual acceleration is mapped
// into (v_dot, psi_dot) through g_r^{-1}, which keeps x_dot = v cos psi exact
// while reproducing accel = g_r u + f_u. In constant-speed mode the
// along-track channel is cancelled by the speed servo.
inline StateDeriv true_plant_deriv(const VehicleParams& p, const VehicleState& s,
                                   const ControlInput& u, SpeedMode mode,
                                   const HifiTorqueParams& hifi = {}) {
  const AccelVector f_u = residual_accel(s);
  double rv = 0.0, rpsi = 0.0;
  if (std::abs(s.v) > 1e-9) {
    const ControlInput r = invert_planar_accel(s.v, s.psi, f_u.ax, f_u.ay);
    rv = r.u_v;
    rpsi = r.u_psi;
  }
  const RollTerms rt = roll_terms(p, s.phi, s.v);
  StateDeriv d;
  d.x_dot = s.v * std::cos(s.psi);
  d.y_dot = s.v * std::sin(s.psi);
  d.psi_dot = u.u_psi + rpsi;
  d.v_dot = (mode == SpeedMode::kConstant) ? 0.0 : u.u_v + rv;
  d.phi_dot = s.phi_dot;
  d.phi_ddot = rt.f_phi + rt.g_phi * u.u_psi + f_u.phi_ddot +
               hifi_torque_extra(p, hifi, s, d.psi_dot);
  return d;
}

// Nominal-model derivative in the same coordinates (no residual terms).
inline StateDeriv nominal_plant_deriv(const VehicleParams& p, const VehicleState& s,
                                      const ControlInput& u, SpeedMode mode) {
  const RollTerms rt = roll_terms(p, s.phi, s.v);
  StateDeriv d;
  d.x_dot = s.v * std::cos(s.psi);
  d.y_dot = s.v * std::sin(s.psi);
  d.psi_dot = u.u_psi;
  d.v_dot = (mode == SpeedMode::kConstant) ? 0.0 : u.u_v;
  d.phi_dot = s.phi_dot;
  d.phi_ddot = rt.f_phi + rt.g_phi * u.u_psi;
  return d;
}

}  // namespace skistunt
