#pragma once

// Control stack for the two-wheel stunt pipeline. A PD tracker produces
// the nominal planar input; a short-horizon SQP MPC minimally modifies
// it subject to exponential barrier constraints built on the learned
// dynamics; a gradient scheme tracks the roll equilibrium induced by the
// planar input; and a feedback-linearizing regulator holds the vehicle
// on that equilibrium during the two-wheel phase.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "skistunt/cbf.hpp"
#include "skistunt/common.hpp"
#include "skistunt/features.hpp"
#include "skistunt/gp.hpp"
#include "skistunt/qp.hpp"
#include "skistunt/vehicle_model.hpp"

namespace skistunt {

using Vec6 = Eigen::Matrix<double, 6, 1>;

// Reference sample: desired pose, speed and roll at one instant.
struct RefPoint {
  double x = 0.0, y = 0.0, psi = 0.0, v = 0.0, phi = 0.0, phi_dot = 0.0;
  Vec6 vec() const {
    Vec6 r;
    r << x, y, psi, v, phi, phi_dot;
    return r;
  }
};

using RefFn = std::function<RefPoint(double)>;

inline Vec6 pack_state(const VehicleState& s) {
  Vec6 z;
  z << s.x, s.y, s.psi, s.v, s.phi, s.phi_dot;
  return z;
}

inline VehicleState unpack_state(const Vec6& z) {
  return VehicleState::make(z(0), z(1), z(2), z(3), z(4), z(5));
}

enum class StuntPhase { kFourWheel, kBalance };

struct ControllerConfig {
  double dt = 0.02;      // control period
  int horizon = 5;       // MPC steps
  int mpc_substeps = 1;  // integrator substeps per MPC step

  Vec6 w1 = (Vec6() << 20.0, 20.0, 20.0, 10.0, 10.0, 10.0).finished();
  Eigen::Vector2d w2{5.0, 5.0};

  double u_v_max = 5.0;
  double u_psi_max = 3.0;
  double steer_max = deg2rad(35.0);

  double trust_frac = 0.5;  // per-iteration step cap, fraction of the range
  int sqp_max_iter = 30;
  double sqp_tol = 1e-6;
  double soft_weight = 1e4;
  // violation price for obstacle rows only. An obstacle row is already
  // unsatisfiable several metres before a head-on threat (no yaw can
  // raise the range acceleration there), and a near-lexicographic price
  // rails the plan against the input bounds for as long as the row stays
  // short. A moderate price lets the solve balance the shortfall against
  // tracking, which yields the sustained small-lean detour the maneuver
  // needs; roll rows keep the strict price since they are feasible.
  double obstacle_soft_weight = 1.0;
  // buffer incursion depth, in barrier units, over which the obstacle
  // price ramps from the gentle value up to the strict one
  double obstacle_ramp = 0.5;
  // price on the planned states' own clearance, h(x_k) >= 0; this is
  // what actually keeps an oblique pass out of the buffer
  double clearance_weight = 20.0;
  // how far past the horizon the last heading is ray-extrapolated when
  // pricing clearance, in control steps
  int terminal_clearance_steps = 25;
  // time constant of the yaw-command lag inside the prediction model,
  // seconds; roughly the time the roll loop needs to realize a new
  // commanded rate as an actual carve
  double plan_yaw_tau = 0.3;
  double gn_ridge = 1e-9;

  SpeedMode speed_mode = SpeedMode::kConstant;

  // nominal PD tracker
  double k_pos = 4.0;
  double k_vel = 4.0;

  // balance-equilibrium search
  double bem_alpha = 0.05;
  double bem_grad_tol = 0.005;
  int bem_max_iter = 100;

  // roll regulation
  double roll_kp = 35.0;
  double roll_kd = 20.0;
  double g_phi_min = 0.1;
  double deriv_filter_ratio = 3.0;  // equilibrium-rate low-pass, T = ratio * dt
  double bem_input_tau = 0.1;       // sustained-yaw smoothing for the
                                    // equilibrium estimate, seconds
  // slew cap on that smoothed input, 1/s^2. The equilibrium lean can only
  // be retargeted as fast as the roll loop can follow; an unslewed swing
  // of the planned yaw (release after a dodge, endgame heading flips)
  // steps the lean reference faster than the regulation can track and the
  // derivative terms whip the chassis over.
  double bem_input_rate = 4.0;
  // magnitude cap on the same input, rad/s. Bounds the lean the planner
  // may request through the equilibrium map (0.7 at 3 m/s is about 12
  // degrees), so a transient burst in the plan cannot drive the chassis
  // into a deep bank that takes seconds to unwind.
  double bem_input_cap = 0.55;
  // Arrival envelope. Within this distance of a terminal reference point
  // the cap above tapers down (to the floor fraction), which stops the
  // bang-bang lean reversals a clamped waypoint otherwise excites: a
  // constant-speed vehicle that overshoots its goal must circle it, and
  // without the taper each lap is flown at full lean. Zero disables.
  double arrival_taper = 5.0;
  double arrival_floor = 0.5;

  // two-wheel handoff; stunt_start < 0 keeps all four wheels down
  double stunt_start = -1.0;
  bool roll_cbf_enabled = true;
  bool reproject_roll_cbf = false;

  std::vector<BarrierSpec> obstacles;
  std::vector<BarrierSpec> roll_barriers;

  void validate() const {
    if (dt <= 0.0) throw ConfigError("controller dt must be positive");
    if (horizon < 1) throw ConfigError("horizon must be at least 1");
    if (mpc_substeps < 1) throw ConfigError("mpc_substeps must be at least 1");
    if (w1.minCoeff() < 0.0)
      throw ConfigError("state weights must be nonnegative");
    if (w2.minCoeff() <= 0.0) throw ConfigError("input weights must be positive");
    if (u_v_max <= 0.0 || u_psi_max <= 0.0 || steer_max <= 0.0)
      throw ConfigError("input limits must be positive");
    if (trust_frac <= 0.0) throw ConfigError("trust_frac must be positive");
    if (sqp_max_iter < 1 || bem_max_iter < 1)
      throw ConfigError("iteration limits must be at least 1");
    if (bem_alpha <= 0.0 || bem_grad_tol <= 0.0)
      throw ConfigError("balance search parameters must be positive");
    if (roll_kp <= 0.0 || roll_kd <= 0.0)
      throw ConfigError("roll regulation gains must be positive");
    if (g_phi_min < 0.0) throw ConfigError("g_phi_min must be nonnegative");
    for (const auto& b : obstacles) b.validate();
    for (const auto& b : roll_barriers) b.validate();
  }
};

// Largest yaw-rate magnitude the steering geometry can realize at this
// state, capped by the configured absolute limit.
inline double yaw_rate_bound(const VehicleParams& p, const VehicleState& s,
                             const ControllerConfig& cfg) {
  const double c = std::cos(s.phi + p.phi_g);
  double b = cfg.u_psi_max;
  if (std::abs(s.v) > 1e-6 && std::abs(c) > 1e-3)
    b = std::min(b, std::abs(s.v) * std::tan(cfg.steer_max) /
                        (p.l_1 * std::abs(c)));
  return b;
}

// PD tracking law mapped through the planar input matrix. Near standstill
// the map is singular; only the along-heading channel is commanded there.
inline ControlInput nominal_control(const VehicleState& s,
                                    const RefPoint& ref,
                                    const ControllerConfig& cfg) {
  const double rvx = ref.v * std::cos(ref.psi);
  const double rvy = ref.v * std::sin(ref.psi);
  const double ax = cfg.k_pos * (ref.x - s.x) + cfg.k_vel * (rvx - s.x_dot);
  const double ay = cfg.k_pos * (ref.y - s.y) + cfg.k_vel * (rvy - s.y_dot);
  if (std::abs(s.v) < 0.05) {
    const double uv =
        clamp(ax * std::cos(s.psi) + ay * std::sin(s.psi), -cfg.u_v_max,
              cfg.u_v_max);
    return {uv, 0.0};
  }
  ControlInput u = invert_planar_accel(s.v, s.psi, ax, ay);
  u.u_v = clamp(u.u_v, -cfg.u_v_max, cfg.u_v_max);
  u.u_psi = clamp(u.u_psi, -cfg.u_psi_max, cfg.u_psi_max);
  return u;
}

// Planar residual as the constant-speed plant experiences it: the speed
// servo absorbs the along-track channel, so only the turn-rate part of
// the learned acceleration reaches the position states.
inline Eigen::Vector3d effective_residual(const VehicleState& s,
                                          const Eigen::Vector3d& f_mean,
                                          SpeedMode mode) {
  if (mode == SpeedMode::kFree || std::abs(s.v) < 1e-9) return f_mean;
  const ControlInput r = invert_planar_accel(s.v, s.psi, f_mean(0), f_mean(1));
  const PlanarAccel pa = planar_accel(s.v, s.psi, {0.0, r.u_psi});
  return {pa.ax, pa.ay, f_mean(2)};
}

// Derivative under the learned mean model. Matches the true plant's
// coordinate mapping with the GP mean standing in for the residual.
inline StateDeriv mean_plant_deriv(const VehicleParams& p,
                                   const VehicleState& s, const ControlInput& u,
                                   const GpModel* gp, SpeedMode mode) {
  StateDeriv d = nominal_plant_deriv(p, s, u, mode);
  if (!gp) return d;
  const Eigen::Vector3d f = gp->predict_mean(make_features(p, s, u));
  if (std::abs(s.v) > 1e-9) {
    const ControlInput r = invert_planar_accel(s.v, s.psi, f(0), f(1));
    d.psi_dot += r.u_psi;
    if (mode == SpeedMode::kFree) d.v_dot += r.u_v;
  }
  d.phi_ddot += f(2);
  return d;
}

namespace detail {

inline Vec6 deriv6(const VehicleParams& p, const Vec6& z, const ControlInput& u,
                   const GpModel* gp, SpeedMode mode) {
  const VehicleState s = unpack_state(z);
  const StateDeriv d = mean_plant_deriv(p, s, u, gp, mode);
  Vec6 out;
  out << d.x_dot, d.y_dot, d.psi_dot, d.v_dot, d.phi_dot, d.phi_ddot;
  return out;
}

inline Vec6 mpc_step_state(const VehicleParams& p, Vec6 z,
                           const ControlInput& u, double dt, int substeps,
                           const GpModel* gp, SpeedMode mode) {
  const double h = dt / substeps;
  for (int i = 0; i < substeps; ++i) {
    const Vec6 k1 = deriv6(p, z, u, gp, mode);
    const Vec6 k2 = deriv6(p, z + 0.5 * h * k1, u, gp, mode);
    const Vec6 k3 = deriv6(p, z + 0.5 * h * k2, u, gp, mode);
    const Vec6 k4 = deriv6(p, z + h * k3, u, gp, mode);
    z += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return z;
}

using Vec7 = Eigen::Matrix<double, 7, 1>;

// Prediction state with the realized yaw rate appended. The plant only
// turns by leaning, so a yaw command takes effect through a swing that
// lasts a few tenths of a second; the planner carries that lag as a
// first-order filter on its own channel, and the kinematics integrate
// the filtered rate. Without this the plan banks the turn instantly,
// overstates its authority, and releases obstacle pressure while the
// chassis is still pointed at the threat.
inline Vec7 deriv7(const VehicleParams& p, const Vec7& z,
                   const ControlInput& u, double tau, const GpModel* gp,
                   SpeedMode mode) {
  const ControlInput ueff{u.u_v, z(6)};
  Vec7 out;
  out.head<6>() = deriv6(p, z.head<6>(), ueff, gp, mode);
  out(6) = (u.u_psi - z(6)) / tau;
  return out;
}

inline Vec7 mpc_step_lagged(const VehicleParams& p, Vec7 z,
                            const ControlInput& u, double dt, int substeps,
                            double tau, const GpModel* gp, SpeedMode mode) {
  const double h = dt / substeps;
  for (int i = 0; i < substeps; ++i) {
    const Vec7 k1 = deriv7(p, z, u, tau, gp, mode);
    const Vec7 k2 = deriv7(p, z + 0.5 * h * k1, u, tau, gp, mode);
    const Vec7 k3 = deriv7(p, z + 0.5 * h * k2, u, tau, gp, mode);
    const Vec7 k4 = deriv7(p, z + h * k3, u, tau, gp, mode);
    z += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return z;
}

}  // namespace detail

struct MpcDiag {
  int sqp_iters = 0;
  bool softened = false;
  bool feasible = true;
  double obs_peak = 0.0;  // tightest obstacle row rhs seen at the last iterate
};

struct SafeMpcProblem {
  VehicleState s;
  double t = 0.0;
  RefFn ref;
  ControlInput u_nom{};          // anchor for the invasiveness penalty
  Vec6 w1 = Vec6::Zero();        // per-phase state weights
  std::vector<BarrierSpec> barriers;
  Eigen::Vector3d sigma = Eigen::Vector3d::Zero();  // frozen variances
  ControlInput u_freeze{};       // input pinning the constraint features
  // Yaw rate the present lean already commits the chassis to carving;
  // seeds the prediction's lagged-rate channel so the plan starts from
  // the turn actually in progress rather than from zero.
  double u_f0 = 0.0;
  // Persistent avoidance side (+1 left, -1 right, 0 free), written back.
  // Near an obstacle the linearized row's sign follows sub-degree heading
  // wobble, so without memory the planner can alternate sides every cycle
  // and the slower roll loop averages the dodge away to nothing.
  int* dodge_side = nullptr;
};

// CBF-constrained tracking MPC, solved by Gauss-Newton SQP over the
// input sequence (single shooting). Constraint rows are assembled at the
// predicted states with features frozen at u_freeze, which keeps every
// row affine in the decision variables; the first-step rows are exact.
inline ControlInput safe_mpc(const VehicleParams& p, const GpModel* gp,
                             const SafeMpcProblem& mp,
                             const ControllerConfig& cfg,
                             Eigen::VectorXd* warm, MpcDiag* diag = nullptr) {
  const int H = cfg.horizon;
  const int nu = (cfg.speed_mode == SpeedMode::kFree) ? 2 : 1;
  const int n = nu * H;

  Eigen::VectorXd U;
  if (warm && warm->size() == n) {
    U = *warm;
  } else {
    U.resize(n);
    for (int k = 0; k < H; ++k) {
      if (nu == 2) {
        U(2 * k) = mp.u_nom.u_v;
        U(2 * k + 1) = mp.u_nom.u_psi;
      } else {
        U(k) = mp.u_nom.u_psi;
      }
    }
  }
  const auto to_input = [&](const Eigen::VectorXd& u, int k) -> ControlInput {
    if (nu == 2) return {u(2 * k), u(2 * k + 1)};
    return {0.0, u(k)};
  };

  const Vec6 sqw1 = mp.w1.cwiseSqrt();
  const Eigen::Vector2d sqw2 = cfg.w2.cwiseSqrt();
  const double eps = 1e-6;

  std::vector<RefPoint> refs(H);
  for (int k = 0; k < H; ++k) refs[k] = mp.ref(mp.t + (k + 1) * cfg.dt);

  const double tau = std::max(cfg.plan_yaw_tau, 1e-3);
  MpcDiag local;
  std::vector<detail::Vec7> xs(H + 1);
  for (int it = 0; it < cfg.sqp_max_iter; ++it) {
    local.sqp_iters = it + 1;
    xs[0] << pack_state(mp.s), mp.u_f0;
    for (int k = 0; k < H; ++k)
      xs[k + 1] = detail::mpc_step_lagged(p, xs[k], to_input(U, k), cfg.dt,
                                          cfg.mpc_substeps, tau, gp,
                                          cfg.speed_mode);

    // single-step Jacobians by forward differences
    std::vector<Eigen::Matrix<double, 7, 7>> A(H);
    std::vector<Eigen::Matrix<double, 7, Eigen::Dynamic>> B(H);
    for (int k = 0; k < H; ++k) {
      const ControlInput uk = to_input(U, k);
      const detail::Vec7 base = xs[k + 1];
      for (int j = 0; j < 7; ++j) {
        detail::Vec7 zp = xs[k];
        zp(j) += eps;
        A[k].col(j) = (detail::mpc_step_lagged(p, zp, uk, cfg.dt,
                                               cfg.mpc_substeps, tau, gp,
                                               cfg.speed_mode) -
                       base) /
                      eps;
      }
      B[k].resize(7, nu);
      for (int j = 0; j < nu; ++j) {
        Eigen::VectorXd up = U;
        up(nu * k + j) += eps;
        B[k].col(j) = (detail::mpc_step_lagged(p, xs[k], to_input(up, k),
                                               cfg.dt, cfg.mpc_substeps, tau,
                                               gp, cfg.speed_mode) -
                       base) /
                      eps;
      }
    }

    // trajectory sensitivities by chaining
    std::vector<Eigen::MatrixXd> S(H + 1);
    S[0] = Eigen::MatrixXd::Zero(7, n);
    for (int k = 0; k < H; ++k) {
      S[k + 1] = A[k] * S[k];
      S[k + 1].middleCols(nu * k, nu) += B[k];
    }

    // Gauss-Newton data: state tracking rows then input anchor rows
    const int mrows = 6 * H + nu * H;
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(mrows, n);
    Eigen::VectorXd r(mrows);
    for (int k = 0; k < H; ++k) {
      Vec6 err = xs[k + 1].head<6>() - refs[k].vec();
      err(2) = wrap_pi(err(2));
      J.middleRows(6 * k, 6) = sqw1.asDiagonal() * S[k + 1].topRows<6>();
      r.segment(6 * k, 6) = sqw1.cwiseProduct(err);
    }
    for (int k = 0; k < H; ++k) {
      for (int j = 0; j < nu; ++j) {
        const int row = 6 * H + nu * k + j;
        const int col = nu * k + j;
        const double w = (nu == 2) ? sqw2(j) : sqw2(1);
        const double anchor = (nu == 2)
                                  ? (j == 0 ? mp.u_nom.u_v : mp.u_nom.u_psi)
                                  : mp.u_nom.u_psi;
        J(row, col) = w;
        r(row) = w * (U(col) - anchor);
      }
    }

    QpProblem qp;
    qp.H = J.transpose() * J +
           cfg.gn_ridge * Eigen::MatrixXd::Identity(n, n);
    qp.g = J.transpose() * r;

    // constraint rows: barriers at predicted states, bounds, trust region
    std::vector<Eigen::RowVectorXd> arows;
    std::vector<double> brows;
    std::vector<double> soft_w;  // slack price per row; 0 keeps it hard
    double obs_peak = -std::numeric_limits<double>::infinity();
    double obs_peak_coeff = 0.0;  // yaw coefficient of the tightest row
    for (int k = 0; k < H; ++k) {
      const VehicleState sk = unpack_state(xs[k].head<6>());
      Eigen::Vector3d f_eff = Eigen::Vector3d::Zero();
      if (gp)
        f_eff = effective_residual(
            sk, gp->predict_mean(make_features(p, sk, mp.u_freeze)),
            cfg.speed_mode);
      const ControlInput uk = to_input(U, k);
      for (const BarrierSpec& bar : mp.barriers) {
        const ConstraintRow row =
            assemble_constraint(bar, p, sk, f_eff, mp.sigma);
        Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(n);
        double rhs = row.b;
        if (nu == 2) {
          a(2 * k) = row.a(0);
          a(2 * k + 1) = row.a(1);
          rhs -= row.a(0) * uk.u_v + row.a(1) * uk.u_psi;
        } else {
          a(k) = row.a(1);
          rhs -= row.a(1) * uk.u_psi;  // u_v channel is servo-owned
        }
        arows.push_back(a);
        brows.push_back(rhs);
        double wrow = cfg.soft_weight;
        if (bar.kind == BarrierKind::kObstacle) {
          // prevention is priced gently; actually standing inside the
          // buffer is not, and the price climbs with the depth of the
          // incursion so the tracking pull can never hold the plan there
          const double depth =
              clamp(-row.h / cfg.obstacle_ramp, 0.0, 1.0);
          wrow = cfg.obstacle_soft_weight +
                 depth * (cfg.soft_weight - cfg.obstacle_soft_weight);
        }
        soft_w.push_back(wrow);
        if (bar.kind == BarrierKind::kObstacle && rhs > obs_peak) {
          obs_peak = rhs;
          obs_peak_coeff = row.a(1);
        }
        // The exponential condition alone admits trajectories that sink
        // well into the buffer when the approach is oblique: its drift
        // term dominates the gains at cruise speed, so the rows go slack
        // while the planned path still cuts inside. Pricing the predicted
        // clearance itself closes that hole, and the lookahead explains
        // why longer horizons settle farther from the boundary.
        if (bar.kind == BarrierKind::kObstacle) {
          const VehicleState sk1 = unpack_state(xs[k + 1].head<6>());
          const double hk1 = barrier_value(bar, p, sk1, mp.sigma);
          Eigen::RowVectorXd ah =
              2.0 * ((sk1.x - bar.cx) * S[k + 1].row(0) +
                     (sk1.y - bar.cy) * S[k + 1].row(1));
          arows.push_back(ah);
          brows.push_back(-hk1);
          soft_w.push_back(cfg.clearance_weight);
        }
      }
      // Terminal clearance: the plan's last step is only H*dt ahead, far
      // less than the lean pipeline needs to bend the path, so continue
      // past it and price that clearance too. The continuation holds the
      // last command and lets the lagged rate keep converging to it, so
      // the tail is the arc the plant would actually fly and the last
      // input column keeps authority over it even at a one-step horizon.
      // The constrained optimum is then a course tangent to the buffer
      // rather than one that discovers it from inside.
      if (k == H - 1) {
        const VehicleState sH = unpack_state(xs[H].head<6>());
        const double u_l = U(n - 1);          // held yaw command
        const double uf_h = xs[H](6);         // realized rate at the horizon
        const int lcol = n - 1;
        const Eigen::RowVectorXd& dpsi_h = S[H].row(2);
        const Eigen::RowVectorXd& duf_h = S[H].row(6);
        double px = sH.x, py = sH.y;
        Eigen::RowVectorXd dpx = S[H].row(0);
        Eigen::RowVectorXd dpy = S[H].row(1);
        for (int m = 1; m <= cfg.terminal_clearance_steps; ++m) {
          const double sm = (m - 0.5) * cfg.dt;
          const double decay = tau * (1.0 - std::exp(-sm / tau));
          const double psi_m = sH.psi + u_l * (sm - decay) + uf_h * decay;
          Eigen::RowVectorXd dpsi_m = dpsi_h + decay * duf_h;
          dpsi_m(lcol) += sm - decay;
          const double step = sH.v * cfg.dt;
          const double cm = std::cos(psi_m), sn = std::sin(psi_m);
          px += step * cm;
          py += step * sn;
          dpx -= step * sn * dpsi_m;
          dpy += step * cm * dpsi_m;
          for (const BarrierSpec& bar : mp.barriers) {
            if (bar.kind != BarrierKind::kObstacle) continue;
            const double dx = px - bar.cx, dy = py - bar.cy;
            const double reff = bar.radius + bar.buffer;
            const double hm =
                dx * dx + dy * dy - reff * reff - mp.sigma(0) - mp.sigma(1);
            arows.push_back(2.0 * (dx * dpx + dy * dpy));
            brows.push_back(-hm);
            soft_w.push_back(cfg.clearance_weight);
          }
        }
      }
      // input bounds as rows on the step increment
      const double pb = yaw_rate_bound(p, sk, cfg);
      const int pcol = nu * k + (nu - 1);
      Eigen::RowVectorXd e = Eigen::RowVectorXd::Zero(n);
      e(pcol) = 1.0;
      arows.push_back(e);
      brows.push_back(-pb - U(pcol));
      arows.push_back(-e);
      brows.push_back(U(pcol) - pb);
      soft_w.push_back(0.0);
      soft_w.push_back(0.0);
      if (nu == 2) {
        Eigen::RowVectorXd ev = Eigen::RowVectorXd::Zero(n);
        ev(2 * k) = 1.0;
        arows.push_back(ev);
        brows.push_back(-cfg.u_v_max - U(2 * k));
        arows.push_back(-ev);
        brows.push_back(U(2 * k) - cfg.u_v_max);
        soft_w.push_back(0.0);
        soft_w.push_back(0.0);
      }
    }
    for (int i = 0; i < n; ++i) {
      const bool vcol = (nu == 2) && (i % 2 == 0);
      const double tr =
          cfg.trust_frac * (vcol ? cfg.u_v_max : cfg.u_psi_max);
      Eigen::RowVectorXd e = Eigen::RowVectorXd::Zero(n);
      e(i) = 1.0;
      arows.push_back(e);
      brows.push_back(-tr);
      arows.push_back(-e);
      brows.push_back(-tr);
      soft_w.push_back(0.0);
      soft_w.push_back(0.0);
    }
    // Side commitment. An obstacle row entering the engagement band locks
    // the avoidance side until every row has dropped well back out of the
    // band; soft sign constraints on each planned yaw step then keep
    // successive solves from flipping the dodge, or splitting it within
    // one plan, while the geometry is near-degenerate.
    local.obs_peak = obs_peak;
    int side = mp.dodge_side ? *mp.dodge_side : 0;
    if (it == 0 && mp.dodge_side) {
      if (obs_peak > 0.5) {
        if (side == 0)
          side = (std::abs(obs_peak_coeff) < 1e-6)
                     ? 1
                     : (obs_peak_coeff > 0.0 ? 1 : -1);
      } else if (obs_peak < -8.0) {
        side = 0;
      }
      *mp.dodge_side = side;
    }
    if (side != 0) {
      for (int k = 0; k < H; ++k) {
        const int col = nu * k + (nu - 1);
        Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(n);
        a(col) = static_cast<double>(side);
        arows.push_back(a);
        brows.push_back(-side * U(col));
        soft_w.push_back(cfg.soft_weight);
      }
    }
    // A barrier row can lose its input coefficients entirely when the
    // heading points straight at the threat: lateral motion changes the
    // distance only at second order there, so the linearization is
    // blind. Perturb the yaw sequence once, toward the committed side,
    // so the next rollout's rows see which way the miss distance grows.
    if (it == 0) {
      bool blind = false;
      for (size_t i = 0; i < arows.size(); ++i)
        if (soft_w[i] > 0.0 && arows[i].lpNorm<Eigen::Infinity>() < 1e-6 &&
            brows[i] > 1e-8)
          blind = true;
      if (blind) {
        const double dir = (side < 0) ? -1.0 : 1.0;
        for (int k = 0; k < H; ++k)
          U(nu * k + (nu - 1)) += dir * 0.1 * cfg.u_psi_max;
        continue;
      }
    }

    const int m = static_cast<int>(arows.size());
    qp.A.resize(m, n);
    qp.b.resize(m);
    for (int i = 0; i < m; ++i) {
      qp.A.row(i) = arows[i];
      qp.b(i) = brows[i];
    }

    QpResult qr = solve_qp(qp);
    if (!qr.optimal) {
      qr = solve_qp_soft(qp, soft_w);
      local.softened = true;
      if (!qr.optimal) {
        local.feasible = false;
        break;
      }
    }
    U += qr.x;
    if (qr.x.lpNorm<Eigen::Infinity>() < cfg.sqp_tol) break;
  }

  if (warm) *warm = U;
  if (diag) *diag = local;
  ControlInput u0 = to_input(U, 0);
  return u0;
}

// Balance-equilibrium search: minimizes the squared roll acceleration on
// the equilibrium manifold (phi_dot = phi_ddot = 0) over the roll angle,
// by damped gradient descent with halving on non-decrease. The nominal
// part alone has the closed-form solution tan(phi) = -v u_psi / g.
struct BemResult {
  double phi_e = 0.0;
  double gamma = 0.0;  // squared roll acceleration at the estimate
  int iters = 0;
  bool converged = false;
};

inline BemResult estimate_bem(const VehicleParams& p, const GpModel* gp,
                              const VehicleState& s, double u_s_psi,
                              const ControllerConfig& cfg,
                              const double* warm = nullptr) {
  const ControlInput us{0.0, u_s_psi};
  const double phi_cap = deg2rad(75.0);
  const auto value_grad = [&](double phi) {
    const RollTerms rt = roll_terms(p, phi, s.v);
    double r = rt.f_phi + rt.g_phi * u_s_psi;
    double dr = p.m * p.l_g *
                (p.g * std::cos(phi) - s.v * std::sin(phi) * u_s_psi) / p.j_t;
    if (gp) {
      const Feature xi = make_bem_features(p, s, us, phi);
      r += gp->predict_mean(xi)(2);
      dr += gp->predict_mean_grad(xi).row(2) * bem_feature_dphi(p, s, us, phi);
    }
    return std::make_pair(r, dr);
  };

  double phi = warm ? *warm : std::atan2(-s.v * u_s_psi, p.g);
  phi = clamp(phi, -phi_cap, phi_cap);
  auto [r, dr] = value_grad(phi);
  BemResult out;
  while (out.iters < cfg.bem_max_iter) {
    ++out.iters;
    const double grad = 2.0 * r * dr;
    if (std::abs(grad) < cfg.bem_grad_tol) {
      out.converged = true;
      break;
    }
    double t = cfg.bem_alpha;
    bool accepted = false;
    for (int bt = 0; bt < 40; ++bt) {
      const double cand = clamp(phi - t * grad, -phi_cap, phi_cap);
      const auto [rc, drc] = value_grad(cand);
      if (rc * rc < r * r) {
        phi = cand;
        r = rc;
        dr = drc;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;  // stationary within line-search resolution
  }
  out.phi_e = phi;
  out.gamma = r * r;
  return out;
}

// Feedback-linearizing roll regulator toward the equilibrium estimate.
// Holds the previous input when the roll input gain is too small to
// invert (slow or near-horizontal steering plane).
struct RollRegResult {
  double u_psi = 0.0;
  bool held = false;
};

inline RollRegResult roll_regulation(const VehicleParams& p, const GpModel* gp,
                                     const VehicleState& s, double phi_e,
                                     double phi_e_rate, double phi_e_acc,
                                     const ControlInput& u_freeze,
                                     double u_hold,
                                     const ControllerConfig& cfg) {
  const RollTerms rt = roll_terms(p, s.phi, s.v);
  if (std::abs(rt.g_phi) < cfg.g_phi_min) return {u_hold, true};
  double f_mu = 0.0;
  if (gp) f_mu = gp->predict_mean(make_features(p, s, u_freeze))(2);
  const double e = s.phi - phi_e;
  const double edot = s.phi_dot - phi_e_rate;
  const double u = (-rt.f_phi - f_mu + phi_e_acc - cfg.roll_kp * e -
                    cfg.roll_kd * edot) /
                   rt.g_phi;
  const double b = yaw_rate_bound(p, s, cfg);
  return {clamp(u, -b, b), false};
}

struct ControllerState {
  Eigen::VectorXd warm;      // MPC warm start, shifted between cycles
  ControlInput u_prev{};     // input applied in the previous cycle
  StuntPhase phase = StuntPhase::kFourWheel;
  double phi_e = 0.0;
  bool phi_e_valid = false;
  double phi_e_rate = 0.0;
  double phi_e_acc = 0.0;
  double u_held = 0.0;  // smoothed sustained-yaw command, BEM input
  double u_reg_hold = 0.0;
  int dodge_side = 0;  // +1 left, -1 right, 0 when no obstacle binds
};

struct ControlOutput {
  ControlInput u{};       // applied
  ControlInput u_nom{};   // anchor before the safety filter
  ControlInput u_safe{};  // MPC output
  StuntPhase phase = StuntPhase::kFourWheel;
  double phi_e = 0.0;
  double gamma_resid = 0.0;
  Eigen::Vector3d sigma = Eigen::Vector3d::Zero();
  Eigen::Vector3d margins = Eigen::Vector3d::Zero();
  std::vector<double> h;  // all configured barriers, obstacles first
  int sqp_iters = 0;
  int bem_iters = 0;
  bool qp_softened = false;
  bool qp_feasible = true;
  bool reg_held = false;
};

// One control cycle: freeze the model uncertainty, filter the nominal
// input through the barrier-constrained MPC and, once the two-wheel
// segment has begun, hand the yaw channel to the roll regulator.
inline ControlOutput control_step(const VehicleParams& p, const GpModel* gp,
                                  const ControllerConfig& cfg, const RefFn& ref,
                                  double t, const VehicleState& s,
                                  ControllerState& cs) {
  ControlOutput out;

  ControlInput u_freeze = cs.u_prev;
  if (cfg.speed_mode == SpeedMode::kConstant) u_freeze.u_v = 0.0;
  if (gp) {
    const GpPrediction pr = gp->predict(make_features(p, s, u_freeze));
    out.sigma = pr.var;
    out.margins = gp->error_margin(pr.var);
  }

  if (cfg.stunt_start >= 0.0 && cs.phase == StuntPhase::kFourWheel &&
      t >= cfg.stunt_start - 1e-12)
    cs.phase = StuntPhase::kBalance;

  const RefPoint r0 = ref(t);
  const ControlInput u_track = nominal_control(s, r0, cfg);
  Vec6 w1 = cfg.w1;
  if (cfg.speed_mode == SpeedMode::kConstant) w1(3) = 0.0;
  // Roll never belongs to the planner: on four wheels it is pinned by the
  // support wheels, and in the balance phase it is the regulation loop's
  // channel. Rolling the lean error into the plan inverts through the
  // equilibrium map (countersteer reads as a sustained-turn command) and
  // the two loops fight.
  w1(4) = 0.0;
  w1(5) = 0.0;

  SafeMpcProblem mp;
  mp.s = s;
  mp.t = t;
  mp.ref = ref;
  mp.u_nom = u_track;
  mp.w1 = w1;
  mp.sigma = out.sigma;
  mp.u_freeze = u_freeze;
  mp.barriers = cfg.obstacles;
  if (cs.phase != StuntPhase::kFourWheel && cfg.roll_cbf_enabled)
    mp.barriers.insert(mp.barriers.end(), cfg.roll_barriers.begin(),
                       cfg.roll_barriers.end());
  mp.dodge_side = &cs.dodge_side;
  if (std::abs(s.v) > 0.5)
    mp.u_f0 = clamp(-p.g * std::tan(s.phi) / s.v, -cfg.u_psi_max,
                    cfg.u_psi_max);

  MpcDiag diag;
  ControlInput u_safe = safe_mpc(p, gp, mp, cfg, &cs.warm, &diag);
  if (cfg.speed_mode == SpeedMode::kConstant) u_safe.u_v = 0.0;
#ifdef SKISTUNT_TRACE_CTRL
  {
    double pm = 0.0;
    const int nuw2 = (cfg.speed_mode == SpeedMode::kFree) ? 2 : 1;
    if (cs.warm.size() == nuw2 * cfg.horizon) {
      for (int k = 0; k < cfg.horizon; ++k)
        pm += cs.warm(nuw2 * k + (nuw2 - 1));
      pm /= cfg.horizon;
    }
    std::fprintf(stderr,
                 "t=%5.2f side=%+d uheld=%+6.3f usafe0=%+6.3f pmean=%+6.3f "
                 "iters=%d opk=%+8.2f\n",
                 t, cs.dodge_side, cs.u_held, u_safe.u_psi, pm,
                 diag.sqp_iters, diag.obs_peak);
  }
#endif

  BemResult bem;
  if (cfg.stunt_start >= 0.0) {
    // the equilibrium should reflect the yaw rate the maneuver will
    // hold: the plan's average, not the first step (which carries the
    // transient avoidance action), smoothed to the path timescale the
    // regulation loop can actually follow
    const int nuw = (cfg.speed_mode == SpeedMode::kFree) ? 2 : 1;
    double u_plan = u_safe.u_psi;
    if (cs.warm.size() == nuw * cfg.horizon) {
      u_plan = 0.0;
      for (int k = 0; k < cfg.horizon; ++k)
        u_plan += cs.warm(nuw * k + (nuw - 1));
      u_plan /= cfg.horizon;
    }
    const double tau = std::max(cfg.bem_input_tau, cfg.dt);
    const double du_cap = cfg.bem_input_rate * cfg.dt;
    double cap = cfg.bem_input_cap;
    if (cfg.arrival_taper > 0.0) {
      // a reference that has stopped advancing is a terminal point
      const RefPoint fin = ref(t + 1e6);
      const RefPoint fin2 = ref(t + 1e6 + 1.0);
      if (std::hypot(fin2.x - fin.x, fin2.y - fin.y) < 1e-9) {
        const double dg = std::hypot(fin.x - s.x, fin.y - s.y);
        cap *= clamp(dg / cfg.arrival_taper, cfg.arrival_floor, 1.0);
      }
    }
    cs.u_held += clamp((cfg.dt / tau) * (u_plan - cs.u_held), -du_cap, du_cap);
    cs.u_held = clamp(cs.u_held, -cap, cap);
    bem = estimate_bem(p, gp, s, cs.u_held, cfg,
                       cs.phi_e_valid ? &cs.phi_e : nullptr);
    const double alpha = 1.0 / (cfg.deriv_filter_ratio + 1.0);
    if (cs.phi_e_valid) {
      const double raw_rate = (bem.phi_e - cs.phi_e) / cfg.dt;
      const double prev_rate = cs.phi_e_rate;
      cs.phi_e_rate += alpha * (raw_rate - cs.phi_e_rate);
      const double raw_acc = (cs.phi_e_rate - prev_rate) / cfg.dt;
      cs.phi_e_acc += alpha * (raw_acc - cs.phi_e_acc);
    }
    cs.phi_e = bem.phi_e;
    cs.phi_e_valid = true;
  }

  ControlInput u_final = u_safe;
  if (cs.phase == StuntPhase::kBalance) {
    const RollRegResult reg =
        roll_regulation(p, gp, s, cs.phi_e, cs.phi_e_rate, cs.phi_e_acc,
                        u_freeze, cs.u_reg_hold, cfg);
    out.reg_held = reg.held;
    double u_psi = reg.u_psi;
    if (cfg.reproject_roll_cbf && cfg.roll_cbf_enabled &&
        !cfg.roll_barriers.empty()) {
      // re-filter the regulation input through the current-state rows
      Eigen::Vector3d f_eff = Eigen::Vector3d::Zero();
      if (gp)
        f_eff = effective_residual(
            s, gp->predict_mean(make_features(p, s, u_freeze)),
            cfg.speed_mode);
      QpProblem qp;
      qp.H = Eigen::MatrixXd::Constant(1, 1, 1.0);
      qp.g = Eigen::VectorXd::Constant(1, -u_psi);
      std::vector<double> as, bs;
      std::vector<char> mask;
      for (const BarrierSpec& bar : cfg.roll_barriers) {
        const ConstraintRow row =
            assemble_constraint(bar, p, s, f_eff, out.sigma);
        as.push_back(row.a(1));
        bs.push_back(row.b);
        mask.push_back(1);
      }
      const double b = yaw_rate_bound(p, s, cfg);
      as.push_back(1.0);
      bs.push_back(-b);
      mask.push_back(0);
      as.push_back(-1.0);
      bs.push_back(-b);
      mask.push_back(0);
      qp.A.resize(static_cast<int>(as.size()), 1);
      qp.b.resize(static_cast<int>(bs.size()));
      for (size_t i = 0; i < as.size(); ++i) {
        qp.A(static_cast<int>(i), 0) = as[i];
        qp.b(static_cast<int>(i)) = bs[i];
      }
      const QpResult qr = solve_qp_soft(qp, cfg.soft_weight, &mask);
      if (qr.optimal) u_psi = qr.x(0);
    }
    u_final.u_psi = u_psi;
    cs.u_reg_hold = u_psi;
  }

  // log every configured barrier so downstream columns stay stable
  for (const BarrierSpec& bar : cfg.obstacles)
    out.h.push_back(barrier_value(bar, p, s, out.sigma));
  for (const BarrierSpec& bar : cfg.roll_barriers)
    out.h.push_back(barrier_value(bar, p, s, out.sigma));

  // shift the warm start for the next cycle
  const int nu = (cfg.speed_mode == SpeedMode::kFree) ? 2 : 1;
  if (cs.warm.size() == nu * cfg.horizon && cfg.horizon > 1) {
    Eigen::VectorXd shifted = cs.warm;
    shifted.head(nu * (cfg.horizon - 1)) = cs.warm.tail(nu * (cfg.horizon - 1));
    cs.warm = shifted;
  }

  cs.u_prev = u_final;
  if (cfg.speed_mode == SpeedMode::kConstant) cs.u_prev.u_v = 0.0;

  out.u = u_final;
  out.u_nom = u_track;
  out.u_safe = u_safe;
  out.phase = cs.phase;
  out.phi_e = cs.phi_e;
  out.gamma_resid = bem.gamma;
  out.sqp_iters = diag.sqp_iters;
  out.bem_iters = bem.iters;
  out.qp_softened = diag.softened;
  out.qp_feasible = diag.feasible;
  return out;
}

}  // namespace skistunt
