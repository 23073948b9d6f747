#pragma once

// Residual-dynamics training data collection. The ground-truth plant is
// driven by a fixed excitation schedule (yaw-rate sinusoids plus a slow
// speed triangle wave) and sampled at a fixed rate. Targets are the measured
// minus nominal accelerations with injected observation noise. When the state
// leaves the validity box the episode resets to a randomized in-box state and
// the schedule continues, so falls of the unstabilized roll axis do not end
// collection.

#include <Eigen/Dense>

#include <array>
#include <random>

#include "skistunt/features.hpp"
#include "skistunt/plant.hpp"

namespace skistunt {

struct ExcitationConfig {
  std::array<double, 3> yaw_amp{0.3, 0.2, 0.1};      // [rad/s]
  std::array<double, 3> yaw_freq_hz{0.3, 0.7, 1.3};
  std::array<double, 3> yaw_phase{0.0, 1.0, 2.0};
  double v_min = 1.0;          // speed triangle wave [m/s]
  double v_max = 4.0;
  double v_period_s = 16.0;
  double v_gain = 2.0;         // speed-servo gain for tracking the triangle
  double sample_hz = 50.0;
  int substeps = 10;
  FeatureBox box;
  double noise_std = 0.01;     // target observation noise
  unsigned seed = 7;

  double yaw_rate(double t) const {
    double u = 0.0;
    for (int i = 0; i < 3; ++i)
      u += yaw_amp[i] * std::sin(2.0 * kPi * yaw_freq_hz[i] * t + yaw_phase[i]);
    return u;
  }

  double v_ref(double t) const {
    const double ph = std::fmod(t / v_period_s, 1.0);
    const double tri = ph < 0.5 ? 2.0 * ph : 2.0 * (1.0 - ph);
    return v_min + (v_max - v_min) * tri;
  }
};

struct TrainingData {
  Eigen::MatrixXd x;  // N x 9
  Eigen::MatrixXd y;  // N x 3
};

inline TrainingData collect_training_data(const VehicleParams& p, int n,
                                          const ExcitationConfig& cfg,
                                          bool plant_residuals = true) {
  if (n < 1) throw ConfigError("collect_training_data: n must be >= 1");
  TrainingData data;
  data.x.resize(n, kFeatureDim);
  data.y.resize(n, kOutputDim);

  std::mt19937 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, cfg.noise_std);
  std::uniform_real_distribution<double> rphi(deg2rad(-45.0), deg2rad(25.0));
  std::uniform_real_distribution<double> rrate(-1.0, 1.0);
  std::uniform_real_distribution<double> rpsi(-kPi, kPi);
  std::uniform_real_distribution<double> rv(cfg.v_min, cfg.v_max);

  auto reset = [&]() {
    return VehicleState::make(0.0, 0.0, rpsi(rng), rv(rng), rphi(rng), rrate(rng));
  };

  PlantOptions opt;
  opt.use_residuals = plant_residuals;
  opt.speed_mode = SpeedMode::kFree;

  const double dt = 1.0 / cfg.sample_hz;
  VehicleState s = reset();
  double t = 0.0;
  int collected = 0;
  long guard = 0;
  while (collected < n) {
    if (++guard > 400L * n + 10000L)
      throw GpFitError("collect_training_data: excitation never stays in the validity box");
    if (!cfg.box.contains(s)) {
      s = reset();
      t += dt;  // the schedule continues across resets
      continue;
    }
    const ControlInput u{
        clamp(cfg.v_gain * (cfg.v_ref(t) - s.v), -3.0, 3.0), cfg.yaw_rate(t)};

    data.x.row(collected) = make_features(p, s, u).transpose();
    const StateDeriv d = plant_residuals
                             ? true_plant_deriv(p, s, u, SpeedMode::kFree)
                             : nominal_plant_deriv(p, s, u, SpeedMode::kFree);
    const PlanarAccel measured = planar_accel(s.v, s.psi, {d.v_dot, d.psi_dot});
    const AccelVector nominal = nominal_accel(p, s, u);
    data.y(collected, 0) = measured.ax - nominal.ax + noise(rng);
    data.y(collected, 1) = measured.ay - nominal.ay + noise(rng);
    data.y(collected, 2) = d.phi_ddot - nominal.phi_ddot + noise(rng);
    ++collected;

    s = step_plant(p, s, u, dt, cfg.substeps, opt);
    t += dt;
  }
  return data;
}

}  // namespace skistunt
