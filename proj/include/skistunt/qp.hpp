#pragma once

// Small dense QP solver for the control stack:
//   minimize 1/2 x' H x + g' x   subject to  A x >= b
// with H symmetric positive definite. Dual active-set scheme in the
// style of Goldfarb and Idnani: start at the unconstrained minimum and
// add violated constraints one at a time, taking dual steps that keep
// the working-set multipliers nonnegative. Each iteration re-solves the
// working-set system from scratch; the problems here are tiny (a few
// inputs, a few tens of rows), so factorization updates are not worth
// their complexity.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace skistunt {

struct QpProblem {
  Eigen::MatrixXd H;  // n x n, SPD
  Eigen::VectorXd g;  // n
  Eigen::MatrixXd A;  // m x n, one constraint per row
  Eigen::VectorXd b;  // m
};

struct QpResult {
  Eigen::VectorXd x;
  Eigen::VectorXd lambda;  // per-row multipliers, zero when inactive
  bool feasible = false;
  bool optimal = false;
  bool softened = false;
  double slack = 0.0;
  int iterations = 0;
};

inline QpResult solve_qp(const QpProblem& qp, double tol = 1e-10,
                         int max_iter = 0) {
  const int n = static_cast<int>(qp.H.rows());
  const int m = static_cast<int>(qp.A.rows());
  if (qp.H.cols() != n || qp.g.size() != n ||
      (m > 0 && qp.A.cols() != n) || qp.b.size() != m)
    throw std::invalid_argument("solve_qp: inconsistent problem dimensions");
  if (max_iter <= 0) max_iter = 50 * (m + 2);

  Eigen::LLT<Eigen::MatrixXd> llt(qp.H);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("solve_qp: H is not positive definite");

  QpResult res;
  res.x = -llt.solve(qp.g);
  res.lambda = Eigen::VectorXd::Zero(m);
  if (m == 0) {
    res.feasible = res.optimal = true;
    return res;
  }

  std::vector<int> active;                 // working set, row indices
  Eigen::VectorXd u(0);                    // multipliers aligned with it
  const double inf = std::numeric_limits<double>::infinity();

  const auto most_violated = [&]() {
    int worst = -1;
    double s_min = -tol;
    for (int i = 0; i < m; ++i) {
      bool in_w = false;
      for (int j : active) in_w |= (j == i);
      if (in_w) continue;
      const double s = qp.A.row(i).dot(res.x) - qp.b(i);
      if (s < s_min) {
        s_min = s;
        worst = i;
      }
    }
    return worst;
  };

  int iter = 0;
  int p = most_violated();
  while (p >= 0 && iter < max_iter) {
    double up = 0.0;  // multiplier accumulated for the incoming row p
    while (iter++ < max_iter) {
      const Eigen::VectorXd np = qp.A.row(p).transpose();
      const int q = static_cast<int>(active.size());
      Eigen::VectorXd z, r;
      if (q == 0) {
        z = llt.solve(np);
        r.resize(0);
      } else {
        Eigen::MatrixXd N(n, q);
        for (int j = 0; j < q; ++j) N.col(j) = qp.A.row(active[j]).transpose();
        const Eigen::MatrixXd HiN = llt.solve(N);
        const Eigen::VectorXd Hinp = llt.solve(np);
        r = (N.transpose() * HiN)
                .ldlt()
                .solve(N.transpose() * Hinp);
        z = Hinp - HiN * r;
      }
      const double ztnp = z.dot(np);  // equals z' H z, nonnegative

      // dual blocking step over the current working set
      double t1 = inf;
      int blocker = -1;
      for (int j = 0; j < q; ++j) {
        if (r(j) > tol && u(j) / r(j) < t1) {
          t1 = u(j) / r(j);
          blocker = j;
        }
      }

      if (ztnp <= 1e-11 * (1.0 + np.squaredNorm())) {
        // incoming normal lies in the span of the active ones
        if (blocker < 0) {
          res.feasible = false;  // dual unbounded: primal infeasible
          res.optimal = false;
          res.iterations = iter;
          return res;
        }
        for (int j = 0; j < q; ++j) u(j) -= t1 * r(j);
        up += t1;
        active.erase(active.begin() + blocker);
        Eigen::VectorXd u2(q - 1);
        for (int j = 0, k = 0; j < q; ++j)
          if (j != blocker) u2(k++) = u(j);
        u = u2;
        continue;
      }

      const double sp = qp.A.row(p).dot(res.x) - qp.b(p);
      const double t2 = -sp / ztnp;
      const double t = std::min(t1, t2);
      res.x += t * z;
      for (int j = 0; j < q; ++j) u(j) -= t * r(j);
      up += t;

      if (t2 <= t1) {  // constraint p reached its boundary: take it active
        active.push_back(p);
        Eigen::VectorXd u2(q + 1);
        u2.head(q) = u;
        u2(q) = up;
        u = u2;
        break;
      }
      // partial step: the blocking row leaves the working set
      active.erase(active.begin() + blocker);
      Eigen::VectorXd u2(q - 1);
      for (int j = 0, k = 0; j < q; ++j)
        if (j != blocker) u2(k++) = u(j);
      u = u2;
      if (qp.A.row(p).dot(res.x) - qp.b(p) >= -tol) break;  // p satisfied
    }
    p = most_violated();
  }

  for (size_t j = 0; j < active.size(); ++j) res.lambda(active[j]) = u(j);
  res.iterations = iter;
  res.feasible = ((qp.A * res.x - qp.b).minCoeff() >= -std::sqrt(tol));
  res.optimal = res.feasible && (p < 0);
  return res;
}

// Relaxation used when the hard constraints admit no solution: each
// softenable row i gets its own nonnegative slack (a_i x + s_i >= b_i),
// penalized quadratically, so relaxing an unsatisfiable row does not
// loosen independent rows with it. Rows with weight zero stay hard
// (input bounds, trust regions). Large weights keep the relaxed
// solution on the hard feasible set whenever one exists nearby; small
// weights turn the row into a graded pressure that trades off against
// the objective.
inline QpResult solve_qp_soft(const QpProblem& qp,
                              const std::vector<double>& row_weight,
                              double tol = 1e-10, int max_iter = 0) {
  QpResult hard = solve_qp(qp, tol, max_iter);
  if (hard.optimal) return hard;

  const int n = static_cast<int>(qp.H.rows());
  const int m = static_cast<int>(qp.A.rows());
  if (static_cast<int>(row_weight.size()) != m)
    throw std::invalid_argument("solve_qp_soft: mask size mismatch");

  // one slack per weighted row, so an unsatisfiable row cannot loosen
  // the satisfiable ones alongside it
  std::vector<int> slot(m, -1);
  int ns = 0;
  for (int i = 0; i < m; ++i)
    if (row_weight[i] > 0.0) slot[i] = ns++;
  if (ns == 0) return hard;

  QpProblem soft;
  soft.H = Eigen::MatrixXd::Zero(n + ns, n + ns);
  soft.H.topLeftCorner(n, n) = qp.H;
  for (int i = 0; i < m; ++i)
    if (slot[i] >= 0) soft.H(n + slot[i], n + slot[i]) = 2.0 * row_weight[i];
  soft.g = Eigen::VectorXd::Zero(n + ns);
  soft.g.head(n) = qp.g;
  soft.A = Eigen::MatrixXd::Zero(m + ns, n + ns);
  soft.A.topLeftCorner(m, n) = qp.A;
  for (int i = 0; i < m; ++i)
    if (slot[i] >= 0) soft.A(i, n + slot[i]) = 1.0;
  for (int j = 0; j < ns; ++j) soft.A(m + j, n + j) = 1.0;  // s_j >= 0
  soft.b = Eigen::VectorXd::Zero(m + ns);
  soft.b.head(m) = qp.b;

  QpResult rs = solve_qp(soft, tol, max_iter);
  QpResult out;
  out.x = rs.x.head(n);
  out.lambda = rs.lambda.head(m);
  out.feasible = rs.feasible;
  out.optimal = rs.optimal;
  out.softened = true;
  out.slack = rs.optimal ? rs.x.tail(ns).maxCoeff() : 0.0;
  out.iterations = hard.iterations + rs.iterations;
  return out;
}

inline QpResult solve_qp_soft(const QpProblem& qp, double weight = 1e4,
                              const std::vector<char>* soften = nullptr,
                              double tol = 1e-10, int max_iter = 0) {
  const int m = static_cast<int>(qp.A.rows());
  if (soften && static_cast<int>(soften->size()) != m)
    throw std::invalid_argument("solve_qp_soft: mask size mismatch");
  std::vector<double> w(m, weight);
  if (soften)
    for (int i = 0; i < m; ++i)
      if (!(*soften)[i]) w[i] = 0.0;
  return solve_qp_soft(qp, w, tol, max_iter);
}

}  // namespace skistunt
