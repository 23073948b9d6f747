#pragma once

// Fixed-step RK4 integration of the ground-truth (or nominal) plant over one
// control period, with zero-order-hold inputs. Supports the hard-floor
// contact used by four-wheel driving phases: the roll is clamped at
// phi = -phi_g and can only leave the floor upward.

#include <cmath>
#include <stdexcept>

#include "skistunt/vehicle_model.hpp"

namespace skistunt {

struct PlantOptions {
  bool use_residuals = true;            // ground-truth residuals on/off
  SpeedMode speed_mode = SpeedMode::kConstant;
  bool roll_floor = false;              // clamp roll at -phi_g (support wheels)
  HifiTorqueParams hifi = {};
};

namespace detail {

struct StateTuple {
  double x, y, psi, v, phi, phi_dot;
};

inline StateTuple to_tuple(const VehicleState& s) {
  return {s.x, s.y, s.psi, s.v, s.phi, s.phi_dot};
}

inline VehicleState from_tuple(const StateTuple& t) {
  return VehicleState::make(t.x, t.y, t.psi, t.v, t.phi, t.phi_dot);
}

inline StateTuple axpy(const StateTuple& a, double h, const StateDeriv& d) {
  return {a.x + h * d.x_dot,     a.y + h * d.y_dot, a.psi + h * d.psi_dot,
          a.v + h * d.v_dot,     a.phi + h * d.phi_dot,
          a.phi_dot + h * d.phi_ddot};
}

inline StateDeriv deriv_at(const VehicleParams& p, const StateTuple& t,
                           const ControlInput& u, const PlantOptions& opt) {
  const VehicleState s = VehicleState::make(t.x, t.y, t.psi, t.v, t.phi, t.phi_dot);
  return opt.use_residuals ? true_plant_deriv(p, s, u, opt.speed_mode, opt.hifi)
                           : nominal_plant_deriv(p, s, u, opt.speed_mode);
}

}  // namespace detail

// One RK4 step of size h.
inline VehicleState rk4_step(const VehicleParams& p, const VehicleState& s,
                             const ControlInput& u, double h,
                             const PlantOptions& opt) {
  using namespace detail;
  const StateTuple t0 = to_tuple(s);
  const StateDeriv k1 = deriv_at(p, t0, u, opt);
  const StateDeriv k2 = deriv_at(p, axpy(t0, 0.5 * h, k1), u, opt);
  const StateDeriv k3 = deriv_at(p, axpy(t0, 0.5 * h, k2), u, opt);
  const StateDeriv k4 = deriv_at(p, axpy(t0, h, k3), u, opt);
  StateTuple t = t0;
  const double w = h / 6.0;
  t.x += w * (k1.x_dot + 2 * k2.x_dot + 2 * k3.x_dot + k4.x_dot);
  t.y += w * (k1.y_dot + 2 * k2.y_dot + 2 * k3.y_dot + k4.y_dot);
  t.psi += w * (k1.psi_dot + 2 * k2.psi_dot + 2 * k3.psi_dot + k4.psi_dot);
  t.v += w * (k1.v_dot + 2 * k2.v_dot + 2 * k3.v_dot + k4.v_dot);
  t.phi += w * (k1.phi_dot + 2 * k2.phi_dot + 2 * k3.phi_dot + k4.phi_dot);
  t.phi_dot += w * (k1.phi_ddot + 2 * k2.phi_ddot + 2 * k3.phi_ddot + k4.phi_ddot);
  return from_tuple(t);
}

// Integrates one control period dt with `substeps` RK4 steps under a held
// input. Applies the roll floor after every substep. Throws on non-finite
// states so a caller can abort the run with a partial log.
inline VehicleState step_plant(const VehicleParams& p, VehicleState s,
                               const ControlInput& u, double dt, int substeps,
                               const PlantOptions& opt) {
  if (substeps < 1) throw ConfigError("step_plant: substeps must be >= 1");
  const double h = dt / substeps;
  for (int i = 0; i < substeps; ++i) {
    s = rk4_step(p, s, u, h, opt);
    if (opt.roll_floor && s.phi <= -p.phi_g) {
      s.phi = -p.phi_g;
      if (s.phi_dot < 0.0) s.phi_dot = 0.0;
    }
    if (!(std::isfinite(s.x) && std::isfinite(s.y) && std::isfinite(s.psi) &&
          std::isfinite(s.v) && std::isfinite(s.phi) && std::isfinite(s.phi_dot)))
      throw std::runtime_error("step_plant: state became non-finite");
  }
  return s;
}

// Mechanical roll energy of the unforced pendulum (used by integrator checks).
inline double roll_energy(const VehicleParams& p, const VehicleState& s) {
  return 0.5 * p.j_t * s.phi_dot * s.phi_dot + p.m * p.g * p.l_g * std::cos(s.phi);
}

}  // namespace skistunt
