#pragma once

// Exact Gaussian-process regression of the residual accelerations with a
// squared-exponential ARD kernel. One independent GP per output dimension
// (x/y/roll acceleration residuals) over a shared 9-D feature vector.
//
// Hyperparameters are fitted by maximizing the log marginal likelihood with
// multi-start adaptive gradient ascent (sign-based per-coordinate steps), and
// the fitted value never falls below the value at the initial point. The
// posterior keeps the Cholesky factor, the weight vector alpha = K^{-1} y and
// K^{-1} so that mean, variance and the analytic mean gradient are cheap.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "skistunt/common.hpp"

namespace skistunt {

inline constexpr int kFeatureDim = 9;
inline constexpr int kOutputDim = 3;

using Feature = Eigen::Matrix<double, kFeatureDim, 1>;

class GpFitError : public std::runtime_error {
 public:
  explicit GpFitError(const std::string& what) : std::runtime_error(what) {}
};

// Log-parameterized hyperparameters of one output dimension.
struct GpHyper {
  Eigen::Matrix<double, kFeatureDim, 1> log_w =
      Eigen::Matrix<double, kFeatureDim, 1>::Zero();  // feature weights (1/len^2)
  double log_sigma_f = 0.0;
  double log_sigma_0 = std::log(1e-2);

  Eigen::Matrix<double, kFeatureDim, 1> weights() const { return log_w.array().exp(); }
  double sigma_f2() const { return std::exp(2.0 * log_sigma_f); }
  double sigma_0_2() const { return std::exp(2.0 * log_sigma_0); }
};

// k(a, b) = sigma_f^2 exp(-1/2 (a-b)^T W (a-b)) + sigma_0^2 [a is b].
inline double kernel(const Feature& a, const Feature& b, const GpHyper& h,
                     bool same_point = false) {
  const Eigen::Matrix<double, kFeatureDim, 1> d = a - b;
  const double q = (h.weights().array() * d.array().square()).sum();
  double k = h.sigma_f2() * std::exp(-0.5 * q);
  if (same_point) k += h.sigma_0_2();
  return k;
}

struct FitConfig {
  int restarts = 5;
  int max_iter = 200;
  double grad_tol = 1e-6;
  int plateau_iters = 15;      // stop when the best value stalls this long
  double plateau_rtol = 1e-8;
  unsigned seed = 0;
};

struct FitDiagnostics {
  std::array<double, kOutputDim> init_lml{};   // at the unperturbed start
  std::array<double, kOutputDim> final_lml{};
  std::array<int, kOutputDim> iterations{};
  std::array<double, kOutputDim> jitter{};     // extra diagonal used, if any
  std::array<double, kOutputDim> sigma_bound{};  // 1/2 ln(1 + sigma_f^2/sigma_0^2)
};

struct GpPrediction {
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  Eigen::Vector3d var = Eigen::Vector3d::Zero();
};

class GpModel {
 public:
  GpModel() = default;

  // Builds the posterior for given data and hyperparameters.
  GpModel(Eigen::MatrixXd x, Eigen::MatrixXd y,
          std::array<GpHyper, kOutputDim> hyper, double eta,
          Eigen::Vector3d kappa)
      : x_(std::move(x)), y_(std::move(y)), hyper_(hyper), eta_(eta),
        kappa_(kappa) {
    if (x_.cols() != kFeatureDim || y_.cols() != kOutputDim ||
        x_.rows() != y_.rows() || x_.rows() < 1)
      throw ConfigError("GpModel: feature/target shape mismatch");
    for (int d = 0; d < kOutputDim; ++d) build_posterior(d);
  }

  // Fits hyperparameters by marginal-likelihood ascent, then builds the model.
  static GpModel fit(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                     const FitConfig& cfg, double eta, Eigen::Vector3d kappa,
                     FitDiagnostics* diag_out = nullptr) {
    if (x.rows() < 2) throw GpFitError("fit: need at least two samples");
    std::array<GpHyper, kOutputDim> hyper;
    FitDiagnostics diag;
    for (int d = 0; d < kOutputDim; ++d) {
      hyper[d] = fit_dim(x, y.col(d), cfg, d, &diag);
      diag.sigma_bound[d] =
          0.5 * std::log(1.0 + hyper[d].sigma_f2() / hyper[d].sigma_0_2());
    }
    GpModel model(x, y, hyper, eta, kappa);
    for (int d = 0; d < kOutputDim; ++d) diag.jitter[d] = model.jitter_[d];
    if (diag_out) *diag_out = diag;
    return model;
  }

  int size() const { return static_cast<int>(x_.rows()); }
  const Eigen::MatrixXd& features() const { return x_; }
  const Eigen::MatrixXd& targets() const { return y_; }
  const std::array<GpHyper, kOutputDim>& hyper() const { return hyper_; }
  double eta() const { return eta_; }
  const Eigen::Vector3d& kappa() const { return kappa_; }

  GpPrediction predict(const Feature& xi) const {
    GpPrediction out;
    for (int d = 0; d < kOutputDim; ++d) {
      const Eigen::VectorXd k = kernel_column(xi, d);
      out.mean(d) = k.dot(alpha_[d]);
      const double kstar = hyper_[d].sigma_f2() + hyper_[d].sigma_0_2();
      const double v = kstar - k.dot(kinv_[d] * k);
      out.var(d) = clamp(v, 0.0, kstar);
    }
    return out;
  }

  Eigen::Vector3d predict_mean(const Feature& xi) const {
    Eigen::Vector3d mu;
    for (int d = 0; d < kOutputDim; ++d)
      mu(d) = kernel_column(xi, d).dot(alpha_[d]);
    return mu;
  }

  // d mean / d xi, one row per output dimension. Uses
  // dk/dxi = -k(xi, xi_i) W (xi - xi_i) summed against alpha.
  Eigen::Matrix<double, kOutputDim, kFeatureDim> predict_mean_grad(
      const Feature& xi) const {
    Eigen::Matrix<double, kOutputDim, kFeatureDim> jac;
    for (int d = 0; d < kOutputDim; ++d) {
      const Eigen::VectorXd k = kernel_column(xi, d);
      const Eigen::VectorXd ak = alpha_[d].cwiseProduct(k);
      // sum_i ak_i (xi - x_i) = xi * sum(ak) - X^T ak
      Eigen::Matrix<double, kFeatureDim, 1> s =
          xi * ak.sum() - x_.transpose() * ak;
      jac.row(d) = (-(hyper_[d].weights().array() * s.array())).transpose();
    }
    return jac;
  }

  // Probabilistic error bound per output dimension: kappa_d sqrt(var_d).
  Eigen::Vector3d error_margin(const Eigen::Vector3d& var) const {
    return (kappa_.array() * var.array().max(0.0).sqrt()).matrix();
  }

  double jitter(int dim) const { return jitter_[dim]; }

 private:
  Eigen::VectorXd kernel_column(const Feature& xi, int d) const {
    const Eigen::Matrix<double, kFeatureDim, 1> w = hyper_[d].weights();
    const Eigen::VectorXd dist =
        ((x_.rowwise() - xi.transpose()).array().square().matrix() * w)
            .rowwise()
            .sum();
    return hyper_[d].sigma_f2() * (-0.5 * dist.array()).exp();
  }

  void build_posterior(int d) {
    const int n = size();
    Eigen::MatrixXd k_mat = gram(x_, hyper_[d]);
    k_mat.diagonal().array() += hyper_[d].sigma_0_2();
    double jitter = 0.0;
    Eigen::LLT<Eigen::MatrixXd> llt(k_mat);
    while (llt.info() != Eigen::Success) {
      jitter = (jitter == 0.0) ? 1e-10 * hyper_[d].sigma_f2() : jitter * 10.0;
      if (jitter > 1e-6 * hyper_[d].sigma_f2())
        throw GpFitError("GpModel: kernel matrix not positive definite");
      Eigen::MatrixXd k_j = k_mat;
      k_j.diagonal().array() += jitter;
      llt.compute(k_j);
    }
    jitter_[d] = jitter;
    alpha_[d] = llt.solve(y_.col(d));
    kinv_[d] = llt.solve(Eigen::MatrixXd::Identity(n, n));
  }

  // Kernel Gram matrix without the noise diagonal.
  static Eigen::MatrixXd gram(const Eigen::MatrixXd& x, const GpHyper& h) {
    const Eigen::MatrixXd xs =
        x * h.weights().array().sqrt().matrix().asDiagonal();
    const Eigen::VectorXd sq = xs.rowwise().squaredNorm();
    Eigen::MatrixXd q = sq.replicate(1, x.rows()) +
                        sq.transpose().replicate(x.rows(), 1) -
                        2.0 * xs * xs.transpose();
    return h.sigma_f2() * (-0.5 * q.array().max(0.0)).exp().matrix();
  }

  struct LmlGrad {
    double value = 0.0;
    Eigen::VectorXd grad;  // d lml / d [log_w(9), log_sigma_f, log_sigma_0]
    bool ok = false;
  };

  static LmlGrad lml_with_grad(const Eigen::MatrixXd& x,
                               const Eigen::VectorXd& y, const GpHyper& h) {
    LmlGrad out;
    const int n = static_cast<int>(x.rows());
    const Eigen::MatrixXd e = gram(x, h) / h.sigma_f2();  // correlation part
    Eigen::MatrixXd k = h.sigma_f2() * e;
    k.diagonal().array() += h.sigma_0_2() + 1e-12;
    Eigen::LLT<Eigen::MatrixXd> llt(k);
    if (llt.info() != Eigen::Success) return out;
    const Eigen::VectorXd alpha = llt.solve(y);
    double logdet = 0.0;
    for (int i = 0; i < n; ++i) logdet += std::log(llt.matrixLLT()(i, i));
    out.value = -0.5 * y.dot(alpha) - logdet - 0.5 * n * std::log(2.0 * kPi);

    const Eigen::MatrixXd kinv = llt.solve(Eigen::MatrixXd::Identity(n, n));
    const Eigen::MatrixXd m = alpha * alpha.transpose() - kinv;
    const Eigen::MatrixXd p = h.sigma_f2() * m.cwiseProduct(e);
    const Eigen::VectorXd q = p.rowwise().sum();
    const Eigen::MatrixXd r = p * x;  // for the per-dimension quadratic forms

    out.grad.resize(kFeatureDim + 2);
    const Eigen::Matrix<double, kFeatureDim, 1> w = h.weights();
    for (int d = 0; d < kFeatureDim; ++d) {
      const Eigen::VectorXd xd = x.col(d);
      const double s = xd.cwiseProduct(xd).dot(q) - xd.dot(r.col(d));
      out.grad(d) = -0.5 * w(d) * s;  // 1/2 tr(M dK/dlog w_d)
    }
    out.grad(kFeatureDim) = p.sum();                       // d/d log sigma_f
    out.grad(kFeatureDim + 1) = h.sigma_0_2() * m.trace();  // d/d log sigma_0
    out.ok = true;
    return out;
  }

  static GpHyper unpack(const Eigen::VectorXd& theta) {
    GpHyper h;
    h.log_w = theta.head(kFeatureDim);
    h.log_sigma_f = theta(kFeatureDim);
    h.log_sigma_0 = theta(kFeatureDim + 1);
    return h;
  }

  static Eigen::VectorXd clamp_theta(Eigen::VectorXd t) {
    for (int d = 0; d < kFeatureDim; ++d) t(d) = clamp(t(d), -20.0, 12.0);
    t(kFeatureDim) = clamp(t(kFeatureDim), -10.0, 8.0);
    t(kFeatureDim + 1) = clamp(t(kFeatureDim + 1), -12.0, 6.0);
    return t;
  }

  static GpHyper fit_dim(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                         const FitConfig& cfg, int dim, FitDiagnostics* diag) {
    // Data-scale heuristic start: unit weight per feature variance, signal
    // scale from the target spread.
    Eigen::VectorXd theta0(kFeatureDim + 2);
    for (int d = 0; d < kFeatureDim; ++d) {
      const double mu = x.col(d).mean();
      const double var = (x.col(d).array() - mu).square().mean();
      theta0(d) = -std::log(var + 1e-6);
    }
    const double y_std = std::max(
        1e-3, std::sqrt((y.array() - y.mean()).square().mean()));
    theta0(kFeatureDim) = std::log(y_std);
    theta0(kFeatureDim + 1) = std::log(std::max(1e-3, 0.1 * y_std));
    theta0 = clamp_theta(theta0);

    double best_value = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_theta = theta0;
    int total_iters = 0;

    std::mt19937 rng(cfg.seed + 0x9e3779b9u * static_cast<unsigned>(dim + 1));
    std::uniform_real_distribution<double> pert(-1.0, 1.0);

    for (int r = 0; r < std::max(1, cfg.restarts); ++r) {
      Eigen::VectorXd theta = theta0;
      if (r > 0) {
        for (int i = 0; i < kFeatureDim; ++i) theta(i) += 1.5 * pert(rng);
        theta(kFeatureDim) += 0.5 * pert(rng);
        theta(kFeatureDim + 1) += 0.5 * pert(rng);
        theta = clamp_theta(theta);
      }

      LmlGrad cur = lml_with_grad(x, y, unpack(theta));
      if (r == 0 && diag) diag->init_lml[dim] = cur.ok ? cur.value : -1e300;
      if (!cur.ok) continue;
      if (cur.value > best_value) { best_value = cur.value; best_theta = theta; }

      Eigen::VectorXd step = Eigen::VectorXd::Constant(kFeatureDim + 2, 0.1);
      Eigen::VectorXd prev_grad = Eigen::VectorXd::Zero(kFeatureDim + 2);
      double restart_best = cur.value;
      int stall = 0;

      for (int it = 0; it < cfg.max_iter; ++it) {
        ++total_iters;
        if (cur.grad.lpNorm<Eigen::Infinity>() < cfg.grad_tol) break;
        for (int i = 0; i < theta.size(); ++i) {
          const double s = cur.grad(i) * prev_grad(i);
          if (s > 0.0) step(i) = std::min(step(i) * 1.2, 0.5);
          else if (s < 0.0) step(i) = std::max(step(i) * 0.5, 1e-7);
          if (cur.grad(i) > 0.0) theta(i) += step(i);
          else if (cur.grad(i) < 0.0) theta(i) -= step(i);
        }
        theta = clamp_theta(theta);
        prev_grad = cur.grad;
        cur = lml_with_grad(x, y, unpack(theta));
        if (!cur.ok) break;
        if (cur.value > best_value) { best_value = cur.value; best_theta = theta; }
        if (cur.value > restart_best + cfg.plateau_rtol * (1.0 + std::abs(restart_best))) {
          restart_best = cur.value;
          stall = 0;
        } else if (++stall >= cfg.plateau_iters) {
          break;
        }
      }
    }
    if (!std::isfinite(best_value))
      throw GpFitError("fit: marginal likelihood not finite at any start");
    if (diag) {
      diag->final_lml[dim] = best_value;
      diag->iterations[dim] = total_iters;
    }
    return unpack(best_theta);
  }

  Eigen::MatrixXd x_;        // N x 9 features
  Eigen::MatrixXd y_;        // N x 3 targets
  std::array<GpHyper, kOutputDim> hyper_{};
  double eta_ = 0.95;
  Eigen::Vector3d kappa_ = Eigen::Vector3d::Constant(1.96);
  std::array<Eigen::VectorXd, kOutputDim> alpha_{};
  std::array<Eigen::MatrixXd, kOutputDim> kinv_{};
  std::array<double, kOutputDim> jitter_{};
};

}  // namespace skistunt
