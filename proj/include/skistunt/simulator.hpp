#pragma once

// Scenario runner. Integrates the ground-truth plant under the controller at
// a fixed control rate, records the full time series, and reduces it to the
// comparison metrics: peak roll, peak curvature, per-barrier minima, cycle
// times, and tracking error against the declared reference path.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "skistunt/controller.hpp"
#include "skistunt/plant.hpp"

namespace skistunt {

enum class ReferenceKind { kWaypoint, kLine };

struct ObstacleDisc {
  double x = 0.0;
  double y = 0.0;
  double radius = 1.0;
  double buffer = 0.0;
};

struct ScenarioConfig {
  std::string name = "scenario";

  double x0 = 0.0, y0 = 0.0, psi0 = 0.0, v0 = 1.0;
  double phi0 = 0.0, phi_dot0 = 0.0;

  bool plant_residuals = true;  // ground-truth unmodeled dynamics on/off
  HifiTorqueParams hifi{};

  ReferenceKind ref_kind = ReferenceKind::kWaypoint;
  double goal_x = 10.0, goal_y = 0.0;  // waypoint reference
  double ref_speed = -1.0;             // waypoint speed; <0 uses v0
  double line_ax = 0.0, line_ay = 0.0; // line reference x=ax*t, y=ay*t

  std::vector<ObstacleDisc> obstacles;
  std::array<double, 2> obstacle_gamma{1.0, 1.5};

  bool roll_limits_enabled = true;
  double phi_max_deg = 20.0;
  double phi_dot_max_deg = 120.0;
  std::array<double, 2> roll_angle_gamma{1.0, 1.5};
  std::array<double, 2> roll_rate_gamma{1.5, 0.0};

  double duration = 10.0;
  double goal_tol = 0.3;  // waypoint termination radius
  int substeps = 10;      // plant substeps per control period

  // the run itself is deterministic; the seed only feeds the optional
  // initial-state jitter used by randomized batches
  unsigned seed = 0;
  double init_jitter = 0.0;  // std dev on (x, y, psi) at t=0

  bool start_on_floor = false;  // support-wheel contact at phi = -phi_g

  ControllerConfig controller;

  void validate() const {
    if (duration <= 0.0) throw ConfigError("scenario duration must be positive");
    if (substeps < 1) throw ConfigError("scenario substeps must be >= 1");
    if (goal_tol <= 0.0) throw ConfigError("goal_tol must be positive");
    if (init_jitter < 0.0) throw ConfigError("init_jitter must be nonnegative");
    if (phi_max_deg <= 0.0 || phi_dot_max_deg <= 0.0)
      throw ConfigError("roll limits must be positive");
    if (ref_kind == ReferenceKind::kWaypoint) {
      const double vr = ref_speed > 0.0 ? ref_speed : v0;
      if (vr <= 0.0) throw ConfigError("waypoint reference needs a positive speed");
      if (std::hypot(goal_x - x0, goal_y - y0) <= goal_tol)
        throw ConfigError("waypoint goal must lie outside the goal tolerance");
    } else {
      if (line_ax == 0.0 && line_ay == 0.0)
        throw ConfigError("line reference needs a nonzero direction");
    }
    for (size_t i = 0; i < obstacles.size(); ++i) {
      const ObstacleDisc& a = obstacles[i];
      if (a.radius <= 0.0 || a.buffer < 0.0)
        throw ConfigError("obstacle radius must be positive, buffer nonnegative");
      if (std::hypot(a.x - x0, a.y - y0) <= a.radius + a.buffer)
        throw ConfigError("start position lies inside an obstacle's buffer");
      for (size_t j = i + 1; j < obstacles.size(); ++j) {
        const ObstacleDisc& b = obstacles[j];
        if (std::hypot(a.x - b.x, a.y - b.y) < a.radius + b.radius)
          throw ConfigError("obstacles overlap");
      }
    }
    controller.validate();
  }

  // controller config with the scenario's barriers injected
  ControllerConfig effective_controller() const {
    ControllerConfig eff = controller;
    eff.obstacles.clear();
    eff.roll_barriers.clear();
    for (const ObstacleDisc& d : obstacles) {
      BarrierSpec b = BarrierSpec::obstacle(d.x, d.y, d.radius, d.buffer);
      b.gamma = obstacle_gamma;
      eff.obstacles.push_back(b);
    }
    if (roll_limits_enabled) {
      BarrierSpec ang = BarrierSpec::roll_angle(deg2rad(phi_max_deg));
      ang.gamma = roll_angle_gamma;
      eff.roll_barriers.push_back(ang);
      BarrierSpec rate = BarrierSpec::roll_rate(deg2rad(phi_dot_max_deg));
      rate.gamma = roll_rate_gamma;
      eff.roll_barriers.push_back(rate);
    }
    return eff;
  }

  RefFn reference() const {
    if (ref_kind == ReferenceKind::kWaypoint) {
      const double dx = goal_x - x0, dy = goal_y - y0;
      const double len = std::hypot(dx, dy);
      const double vr = ref_speed > 0.0 ? ref_speed : v0;
      const double ex = dx / len, ey = dy / len;
      const double heading = std::atan2(dy, dx);
      const double sx = x0, sy = y0, arrive = len / vr;
      return [=](double t) {
        RefPoint r;
        const double tc = std::min(t, arrive);
        r.x = sx + ex * vr * tc;
        r.y = sy + ey * vr * tc;
        r.psi = heading;
        r.v = vr;
        return r;
      };
    }
    const double ax = line_ax, ay = line_ay;
    const double heading = std::atan2(ay, ax);
    const double vr = std::hypot(ax, ay);
    return [=](double t) {
      RefPoint r;
      r.x = ax * t;
      r.y = ay * t;
      r.psi = heading;
      r.v = vr;
      return r;
    };
  }

  // distance from a point to the reference path (not the timed point): the
  // start-goal segment for waypoint runs, the ray from the origin for lines
  double path_distance(double px, double py) const {
    double sx, sy, ex, ey;
    if (ref_kind == ReferenceKind::kWaypoint) {
      sx = x0;
      sy = y0;
      ex = goal_x - x0;
      ey = goal_y - y0;
    } else {
      sx = 0.0;
      sy = 0.0;
      ex = line_ax;
      ey = line_ay;
    }
    const double qx = px - sx, qy = py - sy;
    const double nn = ex * ex + ey * ey;
    double s = (qx * ex + qy * ey) / nn;
    if (ref_kind == ReferenceKind::kWaypoint) s = clamp(s, 0.0, 1.0);
    else s = std::max(s, 0.0);
    return std::hypot(qx - s * ex, qy - s * ey);
  }
};

struct RunLog {
  std::vector<double> t, x, y, psi, v, phi, phi_dot;
  std::vector<double> u_v, u_psi_nom, u_psi_safe, u_psi_final;
  std::vector<double> steer_deg, phi_e, gamma_resid;
  std::vector<std::vector<double>> h;  // one series per barrier
  std::vector<double> cycle_ms;

  // diagnostics, not part of the serialized column set
  std::vector<int> phase, sqp_iters, bem_iters;
  std::vector<char> qp_softened, qp_feasible, reg_held;

  bool aborted = false;
  std::string abort_reason;

  size_t rows() const { return t.size(); }
};

struct RunMetrics {
  std::string name;
  double max_abs_roll_deg = 0.0;
  double max_abs_curvature = 0.0;
  std::vector<double> min_h;  // per barrier, log column order
  double min_h_global = std::numeric_limits<double>::infinity();
  double mean_cycle_ms = 0.0;
  double max_cycle_ms = 0.0;
  double tracking_rmse = 0.0;
  bool collision = false;
  bool rollover = false;
  bool aborted = false;
};

// Reduces a finished log against its scenario. Collision uses the true disc
// geometry (no buffer); the h minima use the logged, tightened values.
inline RunMetrics compute_metrics(const ScenarioConfig& cfg, const RunLog& log,
                                  const VehicleParams& p) {
  RunMetrics m;
  m.name = cfg.name;
  m.aborted = log.aborted;
  const size_t n = log.rows();
  m.min_h.assign(log.h.size(), std::numeric_limits<double>::infinity());
  double sq_sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    m.max_abs_roll_deg = std::max(m.max_abs_roll_deg, rad2deg(std::abs(log.phi[i])));
    if (std::abs(log.phi[i] + p.phi_g) > 0.5 * kPi) m.rollover = true;
    for (const ObstacleDisc& d : cfg.obstacles)
      if (std::hypot(log.x[i] - d.x, log.y[i] - d.y) < d.radius)
        m.collision = true;
    for (size_t b = 0; b < log.h.size(); ++b)
      m.min_h[b] = std::min(m.min_h[b], log.h[b][i]);
    const double e = cfg.path_distance(log.x[i], log.y[i]);
    sq_sum += e * e;
    if (i + 1 < n) {
      const double dt = log.t[i + 1] - log.t[i];
      const double yaw_rate = wrap_pi(log.psi[i + 1] - log.psi[i]) / dt;
      if (std::abs(log.v[i]) > 1e-9)
        m.max_abs_curvature =
            std::max(m.max_abs_curvature, std::abs(yaw_rate / log.v[i]));
    }
    m.mean_cycle_ms += log.cycle_ms[i];
    m.max_cycle_ms = std::max(m.max_cycle_ms, log.cycle_ms[i]);
  }
  if (n > 0) {
    m.mean_cycle_ms /= static_cast<double>(n);
    m.tracking_rmse = std::sqrt(sq_sum / static_cast<double>(n));
  }
  for (double v : m.min_h) m.min_h_global = std::min(m.min_h_global, v);
  return m;
}

struct RunResult {
  RunLog log;
  RunMetrics metrics;
};

// Runs one scenario to completion: one control step per period, zero-order
// hold through the plant substeps, early exit at a waypoint goal. Plant
// divergence aborts with the partial log; controller degradations are
// recorded and the run continues. With zero_cycle_time the wall-clock column
// is forced to zero so logs are byte-stable.
inline RunResult run_scenario(const ScenarioConfig& cfg, const GpModel* gp,
                              bool zero_cycle_time = false) {
  cfg.validate();
  const VehicleParams p;
  const ControllerConfig eff = cfg.effective_controller();
  const RefFn ref = cfg.reference();

  double x0 = cfg.x0, y0 = cfg.y0, psi0 = cfg.psi0;
  if (cfg.init_jitter > 0.0) {
    std::mt19937 rng(cfg.seed);
    std::normal_distribution<double> jit(0.0, cfg.init_jitter);
    x0 += jit(rng);
    y0 += jit(rng);
    psi0 += jit(rng);
  }
  VehicleState s =
      VehicleState::make(x0, y0, psi0, cfg.v0, cfg.phi0, cfg.phi_dot0);
  if (cfg.start_on_floor && s.phi < -p.phi_g)
    s = VehicleState::make(x0, y0, psi0, cfg.v0, -p.phi_g,
                           std::max(cfg.phi_dot0, 0.0));

  PlantOptions popt;
  popt.use_residuals = cfg.plant_residuals;
  popt.speed_mode = eff.speed_mode;
  // the raised wheel pair touches down at phi = -phi_g no matter how the
  // run began, so the plant floor is always present
  popt.roll_floor = true;
  popt.hifi = cfg.hifi;

  ControllerState cs;
  RunResult res;
  RunLog& log = res.log;
  const size_t n_barriers = eff.obstacles.size() + eff.roll_barriers.size();
  log.h.assign(n_barriers, {});

  const int n_steps = static_cast<int>(std::llround(cfg.duration / eff.dt));
  for (int k = 0; k <= n_steps; ++k) {
    const double t = k * eff.dt;
    const auto tic = std::chrono::steady_clock::now();
    const ControlOutput out = control_step(p, gp, eff, ref, t, s, cs);
    const double ms =
        zero_cycle_time
            ? 0.0
            : std::chrono::duration<double, std::milli>(
                  std::chrono::steady_clock::now() - tic)
                  .count();

    log.t.push_back(t);
    log.x.push_back(s.x);
    log.y.push_back(s.y);
    log.psi.push_back(s.psi);
    log.v.push_back(s.v);
    log.phi.push_back(s.phi);
    log.phi_dot.push_back(s.phi_dot);
    log.u_v.push_back(out.u.u_v);
    log.u_psi_nom.push_back(out.u_nom.u_psi);
    log.u_psi_safe.push_back(out.u_safe.u_psi);
    log.u_psi_final.push_back(out.u.u_psi);
    log.steer_deg.push_back(rad2deg(
        steer_from_yaw_rate(out.u.u_psi, s.v, s.phi + p.phi_g, p.l_1)));
    log.phi_e.push_back(out.phi_e);
    log.gamma_resid.push_back(out.gamma_resid);
    for (size_t b = 0; b < n_barriers; ++b) log.h[b].push_back(out.h[b]);
    log.cycle_ms.push_back(ms);
    log.phase.push_back(static_cast<int>(out.phase));
    log.sqp_iters.push_back(out.sqp_iters);
    log.bem_iters.push_back(out.bem_iters);
    log.qp_softened.push_back(out.qp_softened ? 1 : 0);
    log.qp_feasible.push_back(out.qp_feasible ? 1 : 0);
    log.reg_held.push_back(out.reg_held ? 1 : 0);

    if (k == n_steps) break;
    if (cfg.ref_kind == ReferenceKind::kWaypoint &&
        std::hypot(s.x - cfg.goal_x, s.y - cfg.goal_y) <= cfg.goal_tol)
      break;

    try {
      s = step_plant(p, s, out.u, eff.dt, cfg.substeps, popt);
    } catch (const std::runtime_error& e) {
      log.aborted = true;
      log.abort_reason = e.what();
      break;
    }
  }

  res.metrics = compute_metrics(cfg, log, p);
  return res;
}

// Fixed-width comparison table, one row per run.
inline std::string metric_table(const std::vector<RunMetrics>& runs) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "run" << std::right << std::setw(12)
     << "|phi|max" << std::setw(12) << "|rho|max" << std::setw(12) << "h_min"
     << std::setw(12) << "cyc_mean" << std::setw(12) << "cyc_max"
     << std::setw(12) << "rmse" << std::setw(6) << "coll" << std::setw(6)
     << "roll" << '\n';
  os << std::string(100, '-') << '\n';
  os << std::fixed;
  for (const RunMetrics& m : runs) {
    const double hmin = std::isfinite(m.min_h_global) ? m.min_h_global : 0.0;
    os << std::left << std::setw(16) << m.name << std::right
       << std::setprecision(2) << std::setw(12) << m.max_abs_roll_deg
       << std::setw(12) << m.max_abs_curvature << std::setw(12) << hmin
       << std::setw(12) << m.mean_cycle_ms << std::setw(12) << m.max_cycle_ms
       << std::setw(12) << m.tracking_rmse << std::setw(6)
       << (m.collision ? "yes" : "no") << std::setw(6)
       << (m.rollover ? "yes" : "no") << '\n';
  }
  return os.str();
}

}  // namespace skistunt
