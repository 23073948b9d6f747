#pragma once

// Construction of the 9-D GP feature vector
//   xi = [x_dot, y_dot, x_ddot, y_ddot, phi, phi_dot, phi_ddot, steer, v].
//
// Acceleration and steering entries are always computed from the nominal
// model at the given (state, input) pair, so the same construction is usable
// at decision time (no ground-truth acceleration measurements needed) and the
// training/prediction feature distributions agree.

#include <Eigen/Dense>

#include "skistunt/gp.hpp"
#include "skistunt/vehicle_model.hpp"

namespace skistunt {

inline Feature make_features(const VehicleParams& p, const VehicleState& s,
                             const ControlInput& u) {
  const AccelVector a = nominal_accel(p, s, u);
  Feature xi;
  xi << s.x_dot, s.y_dot, a.ax, a.ay, s.phi, s.phi_dot, a.phi_ddot,
      steer_from_yaw_rate(u.u_psi, s.v, s.phi + p.phi_g, p.l_1), s.v;
  return xi;
}

// Feature vector at a balance-equilibrium candidate: the roll angle is
// replaced, and the roll rate/acceleration entries are zero by definition of
// an equilibrium.
inline Feature make_bem_features(const VehicleParams& p, const VehicleState& s,
                                 const ControlInput& u_s, double phi) {
  const PlanarAccel a = planar_accel(s.v, s.psi, u_s);
  Feature xi;
  xi << s.x_dot, s.y_dot, a.ax, a.ay, phi, 0.0, 0.0,
      steer_from_yaw_rate(u_s.u_psi, s.v, phi + p.phi_g, p.l_1), s.v;
  return xi;
}

// d xi / d phi for the balance-equilibrium features above. Only the roll
// entry and the steering entry (through the steering-plane angle) move.
inline Feature bem_feature_dphi(const VehicleParams& p, const VehicleState& s,
                                const ControlInput& u_s, double phi) {
  Feature d = Feature::Zero();
  d(4) = 1.0;
  if (std::abs(s.v) > 1e-6) {
    const double a = u_s.u_psi * p.l_1 / s.v;
    const double c = std::cos(phi + p.phi_g), sn = std::sin(phi + p.phi_g);
    d(7) = -a * sn / (1.0 + a * c * a * c);
  }
  return d;
}

// Validity region for training samples; excitation episodes reset when the
// state leaves it.
struct FeatureBox {
  double v_min = 0.5;
  double v_max = 5.0;
  double phi_abs_max = deg2rad(60.0);
  double phi_dot_abs_max = 6.0;

  bool contains(const VehicleState& s) const {
    return s.v >= v_min && s.v <= v_max && std::abs(s.phi) <= phi_abs_max &&
           std::abs(s.phi_dot) <= phi_dot_abs_max;
  }
};

}  // namespace skistunt
