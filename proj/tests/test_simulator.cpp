#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "skistunt/gp.hpp"
#include "skistunt/simulator.hpp"
#include "skistunt/training.hpp"

using namespace skistunt;
using Catch::Approx;

namespace {

ScenarioConfig straight_line_scenario() {
  ScenarioConfig cfg;
  cfg.name = "straight";
  cfg.v0 = 2.0;
  cfg.plant_residuals = false;
  cfg.ref_kind = ReferenceKind::kLine;
  cfg.line_ax = 2.0;
  cfg.line_ay = 0.0;
  cfg.duration = 1.0;
  cfg.substeps = 4;
  cfg.controller.dt = 0.02;
  cfg.controller.horizon = 3;
  return cfg;
}

}  // namespace

TEST_CASE("scenario validation rejects inconsistent configs") {
  ScenarioConfig cfg = straight_line_scenario();
  REQUIRE_NOTHROW(cfg.validate());

  SECTION("nonpositive duration") {
    cfg.duration = 0.0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  }
  SECTION("substeps below one") {
    cfg.substeps = 0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  }
  SECTION("zero line direction") {
    cfg.line_ax = 0.0;
    cfg.line_ay = 0.0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  }
  SECTION("waypoint goal inside the tolerance ball") {
    cfg.ref_kind = ReferenceKind::kWaypoint;
    cfg.goal_x = cfg.x0 + 0.1;
    cfg.goal_y = cfg.y0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  }
  SECTION("start inside an obstacle buffer") {
    cfg.obstacles.push_back({0.5, 0.0, 1.0, 0.5});
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  }
  SECTION("overlapping obstacles") {
    cfg.obstacles.push_back({6.0, 0.0, 1.0, 0.0});
    cfg.obstacles.push_back({7.0, 0.0, 1.5, 0.0});
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_CASE("reference functions realize the declared paths") {
  SECTION("waypoint reference advances along the segment and parks at the goal") {
    ScenarioConfig cfg;
    cfg.ref_kind = ReferenceKind::kWaypoint;
    cfg.x0 = 1.0;
    cfg.y0 = 2.0;
    cfg.goal_x = 4.0;
    cfg.goal_y = 6.0;  // length 5
    cfg.v0 = 2.0;
    const RefFn ref = cfg.reference();

    const RefPoint r0 = ref(0.0);
    CHECK(r0.x == Approx(1.0));
    CHECK(r0.y == Approx(2.0));
    CHECK(r0.psi == Approx(std::atan2(4.0, 3.0)));
    CHECK(r0.v == Approx(2.0));

    const RefPoint r1 = ref(1.0);  // 2 m along a 3-4-5 direction
    CHECK(r1.x == Approx(1.0 + 2.0 * 3.0 / 5.0));
    CHECK(r1.y == Approx(2.0 + 2.0 * 4.0 / 5.0));

    const RefPoint far = ref(100.0);  // arrival at t = 2.5 s
    CHECK(far.x == Approx(4.0));
    CHECK(far.y == Approx(6.0));
  }

  SECTION("line reference is the timed ray") {
    ScenarioConfig cfg;
    cfg.ref_kind = ReferenceKind::kLine;
    cfg.line_ax = 1.6;
    cfg.line_ay = 1.6;
    const RefFn ref = cfg.reference();
    const RefPoint r = ref(2.0);
    CHECK(r.x == Approx(3.2));
    CHECK(r.y == Approx(3.2));
    CHECK(r.psi == Approx(kPi / 4.0));
    CHECK(r.v == Approx(1.6 * std::sqrt(2.0)));
  }
}

TEST_CASE("path distance matches closed forms") {
  SECTION("diagonal line") {
    ScenarioConfig cfg;
    cfg.ref_kind = ReferenceKind::kLine;
    cfg.line_ax = 1.0;
    cfg.line_ay = 1.0;
    CHECK(cfg.path_distance(1.0, -1.0) == Approx(std::sqrt(2.0)));
    CHECK(cfg.path_distance(2.0, 2.0) == Approx(0.0).margin(1e-12));
    CHECK(cfg.path_distance(1.0, 3.0) == Approx(std::sqrt(2.0)));
  }
  SECTION("waypoint segment clamps at both ends") {
    ScenarioConfig cfg;
    cfg.ref_kind = ReferenceKind::kWaypoint;
    cfg.goal_x = 2.0;
    cfg.goal_y = 0.0;
    CHECK(cfg.path_distance(1.0, 0.7) == Approx(0.7));
    CHECK(cfg.path_distance(3.0, 1.0) == Approx(std::sqrt(2.0)));
    CHECK(cfg.path_distance(-2.0, 0.0) == Approx(2.0));
  }
}

TEST_CASE("metrics reduce a crafted log exactly") {
  ScenarioConfig cfg;
  cfg.name = "crafted";
  cfg.ref_kind = ReferenceKind::kLine;
  cfg.line_ax = 1.0;
  cfg.line_ay = 0.0;
  cfg.obstacles.push_back({5.0, 0.0, 1.0, 0.5});
  cfg.x0 = -10.0;  // keep validate() happy if ever called; metrics do not

  RunLog log;
  const double dt = 1.0;
  const double omega = 0.1;
  log.t = {0.0, dt, 2.0 * dt};
  log.x = {0.0, 5.0, 9.0};
  log.y = {0.0, 0.5, 0.0};  // second sample sits inside the disc
  log.psi = {0.0, omega * dt, 2.0 * omega * dt};
  log.v = {2.0, 2.0, 2.0};
  log.phi = {0.0, deg2rad(60.0), deg2rad(-5.0)};  // 60 deg tips past the side
  log.phi_dot = {0.0, 0.0, 0.0};
  log.cycle_ms = {1.0, 2.0, 3.0};
  log.h = {{3.0, -0.2, 1.0}};

  const VehicleParams p;
  const RunMetrics m = compute_metrics(cfg, log, p);

  CHECK(m.max_abs_roll_deg == Approx(60.0));
  CHECK(m.rollover);  // |60 + 40| deg exceeds the quarter turn
  CHECK(m.collision);
  CHECK(m.max_abs_curvature == Approx(omega / 2.0));
  REQUIRE(m.min_h.size() == 1);
  CHECK(m.min_h[0] == Approx(-0.2));
  CHECK(m.min_h_global == Approx(-0.2));
  CHECK(m.mean_cycle_ms == Approx(2.0));
  CHECK(m.max_cycle_ms == Approx(3.0));
  CHECK(m.tracking_rmse == Approx(std::sqrt(0.25 / 3.0)));
  CHECK_FALSE(m.aborted);
}

TEST_CASE("straight unobstructed run keeps the uniform grid") {
  const ScenarioConfig cfg = straight_line_scenario();
  const RunResult res = run_scenario(cfg, nullptr, true);

  const size_t expect = static_cast<size_t>(cfg.duration / cfg.controller.dt) + 1;
  REQUIRE(res.log.rows() == expect);
  for (size_t k = 0; k < expect; ++k)
    REQUIRE(res.log.t[k] == static_cast<double>(k) * cfg.controller.dt);

  CHECK_FALSE(res.log.aborted);
  CHECK_FALSE(res.metrics.collision);
  CHECK_FALSE(res.metrics.rollover);
  CHECK(res.metrics.tracking_rmse < 1e-6);
  CHECK(res.metrics.max_abs_curvature < 1e-6);
  CHECK(res.log.x.back() > 1.9);  // advanced at the commanded speed
  for (double ms : res.log.cycle_ms) CHECK(ms == 0.0);

  // two barrier columns from the default roll limits, none from obstacles
  REQUIRE(res.log.h.size() == 2);
  REQUIRE(res.metrics.min_h.size() == 2);
}

TEST_CASE("waypoint run terminates inside the goal ball") {
  ScenarioConfig cfg;
  cfg.name = "goal";
  cfg.plant_residuals = false;
  cfg.ref_kind = ReferenceKind::kWaypoint;
  cfg.goal_x = 3.0;
  cfg.goal_y = 0.0;
  cfg.v0 = 1.5;
  cfg.duration = 10.0;
  cfg.substeps = 4;
  cfg.controller.horizon = 3;

  const RunResult res = run_scenario(cfg, nullptr, true);
  const size_t full = static_cast<size_t>(cfg.duration / cfg.controller.dt) + 1;
  REQUIRE(res.log.rows() < full);
  const double gx = res.log.x.back(), gy = res.log.y.back();
  CHECK(std::hypot(gx - cfg.goal_x, gy - cfg.goal_y) <= cfg.goal_tol);
  CHECK_FALSE(res.log.aborted);
}

TEST_CASE("zero-residual training leaves the closed loop unchanged") {
  const VehicleParams p;
  ExcitationConfig ex;
  ex.noise_std = 0.0;
  const TrainingData data = collect_training_data(p, 40, ex, false);
  REQUIRE(data.y.cwiseAbs().maxCoeff() < 1e-12);

  FitConfig fit;
  fit.restarts = 1;
  fit.max_iter = 30;
  const GpModel gp = GpModel::fit(data.x, data.y, fit, 0.95,
                                  Eigen::Vector3d::Constant(1.96));

  ScenarioConfig cfg = straight_line_scenario();
  cfg.obstacles.push_back({50.0, 50.0, 1.0, 0.5});  // far off the path

  const RunResult with_gp = run_scenario(cfg, &gp, true);
  const RunResult without = run_scenario(cfg, nullptr, true);

  REQUIRE(with_gp.log.rows() == without.log.rows());
  for (size_t k = 0; k < with_gp.log.rows(); ++k) {
    CHECK(std::abs(with_gp.log.x[k] - without.log.x[k]) < 1e-9);
    CHECK(std::abs(with_gp.log.y[k] - without.log.y[k]) < 1e-9);
    CHECK(std::abs(with_gp.log.psi[k] - without.log.psi[k]) < 1e-9);
    CHECK(std::abs(with_gp.log.phi[k] - without.log.phi[k]) < 1e-9);
    CHECK(std::abs(with_gp.log.u_psi_final[k] - without.log.u_psi_final[k]) <
          1e-9);
  }
}

TEST_CASE("stunt run detours around the obstacle and reaches the goal") {
  ScenarioConfig cfg;
  cfg.name = "detour";
  cfg.plant_residuals = false;
  cfg.ref_kind = ReferenceKind::kWaypoint;
  cfg.psi0 = deg2rad(45.0);
  cfg.goal_x = 10.0;
  cfg.goal_y = 10.0;
  cfg.v0 = 3.0;
  cfg.duration = 8.0;
  cfg.obstacles.push_back({5.0, 5.0, 2.5, 0.5});
  cfg.roll_limits_enabled = false;  // only the obstacle barrier, as driven
  cfg.controller.horizon = 5;
  cfg.controller.stunt_start = 0.0;

  const RunResult res = run_scenario(cfg, nullptr, true);

  CHECK_FALSE(res.log.aborted);
  CHECK_FALSE(res.metrics.collision);
  CHECK_FALSE(res.metrics.rollover);
  CHECK(res.metrics.min_h_global > -0.5);

  // goal termination fired before the duration ran out
  const size_t full = static_cast<size_t>(cfg.duration / cfg.controller.dt) + 1;
  CHECK(res.log.rows() < full);
  const double gx = res.log.x.back(), gy = res.log.y.back();
  CHECK(std::hypot(gx - cfg.goal_x, gy - cfg.goal_y) <= cfg.goal_tol);

  // the run spends its life balancing on two wheels
  int balance_rows = 0;
  for (int ph : res.log.phase)
    if (ph == static_cast<int>(StuntPhase::kBalance)) ++balance_rows;
  CHECK(balance_rows > static_cast<int>(res.log.rows()) / 2);
}

TEST_CASE("scenario runs are deterministic") {
  ScenarioConfig cfg;
  cfg.name = "det";
  cfg.ref_kind = ReferenceKind::kLine;
  cfg.line_ax = 2.0;
  cfg.line_ay = 0.0;
  cfg.v0 = 2.0;
  cfg.duration = 1.2;
  cfg.obstacles.push_back({2.0, 0.4, 0.8, 0.2});
  cfg.controller.horizon = 4;
  cfg.controller.stunt_start = 0.3;
  cfg.start_on_floor = true;
  cfg.phi0 = -deg2rad(40.0);

  const RunResult a = run_scenario(cfg, nullptr, true);
  const RunResult b = run_scenario(cfg, nullptr, true);

  REQUIRE(a.log.rows() == b.log.rows());
  REQUIRE(a.log.rows() > 0);
  CHECK(a.log.x == b.log.x);
  CHECK(a.log.y == b.log.y);
  CHECK(a.log.psi == b.log.psi);
  CHECK(a.log.phi == b.log.phi);
  CHECK(a.log.phi_dot == b.log.phi_dot);
  CHECK(a.log.u_psi_nom == b.log.u_psi_nom);
  CHECK(a.log.u_psi_safe == b.log.u_psi_safe);
  CHECK(a.log.u_psi_final == b.log.u_psi_final);
  CHECK(a.log.steer_deg == b.log.steer_deg);
  CHECK(a.log.phi_e == b.log.phi_e);
  CHECK(a.log.h == b.log.h);
  CHECK(a.log.cycle_ms == b.log.cycle_ms);
  CHECK(a.log.phase == b.log.phase);
}

TEST_CASE("metric table lists one row per run") {
  RunMetrics a;
  a.name = "alpha";
  a.max_abs_roll_deg = 7.1;
  a.max_abs_curvature = 0.21;
  a.min_h_global = -0.17;
  a.tracking_rmse = 0.42;
  RunMetrics b;
  b.name = "beta";
  b.collision = true;

  const std::string table = metric_table({a, b});
  CHECK(table.find("alpha") != std::string::npos);
  CHECK(table.find("beta") != std::string::npos);
  CHECK(table.find("7.10") != std::string::npos);
  CHECK(table.find("-0.17") != std::string::npos);
  CHECK(table.find("yes") != std::string::npos);

  int lines = 0;
  for (char c : table)
    if (c == '\n') ++lines;
  CHECK(lines == 4);  // header, rule, two rows
}
