/**
 * @file openloop_oracle.hpp
 * @brief Reference solutions: open-loop stationary points by BB descent on the
 *        control-reduced cost, and the finite-horizon Riccati solution of LQ problems.
 */
#pragma once

#include <unsupported/Eigen/KroneckerProduct>

#include "hjbfl/learning.hpp"
#include "hjbfl/optimize.hpp"

namespace hjbfl {

struct OpenLoopSolution {
  Trajectory y;
  Trajectory u;
  Trajectory p;
  double J = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  /// L2 norm of beta u + g^T p at the returned control.
  double grad_norm = 0.0;
};

namespace detail {

inline Vector flatten(const Trajectory& u) { return u.values.reshaped<Eigen::RowMajor>(); }

inline Trajectory unflatten(const TimeGrid& grid, const Vector& v, Eigen::Index m) {
  Trajectory u(grid, m);
  u.values = v.reshaped<Eigen::RowMajor>(static_cast<Eigen::Index>(grid.size()), m);
  return u;
}

/// Trapezoid weights repeated per control component: the discrete L2 inner product on controls.
inline Vector control_metric(const TimeGrid& grid, Eigen::Index m) {
  const auto w = grid.trapezoid_weights();
  Vector out(static_cast<Eigen::Index>(w.size()) * m);
  for (std::size_t k = 0; k < w.size(); ++k) out.segment(static_cast<Eigen::Index>(k) * m, m).setConstant(w[k]);
  return out;
}

}  // namespace detail

/// Reduced cost J(y(u), u), its L2 gradient beta u + g(y)^T p, and the state/adjoint pair.
struct OpenLoopEvaluation {
  double J = 0.0;
  Trajectory gradient;
  Trajectory y;
  Trajectory p;
};

inline OpenLoopEvaluation evaluate_open_loop(const ProblemSpec& spec, const Vector& y0, const Trajectory& u,
                                             const SolverOptions& opt = {}) {
  OpenLoopEvaluation e;
  e.y = integrate_open_loop(spec, u, y0, opt);
  e.p = integrate_adjoint_open_loop(spec, e.y, u, opt);
  e.J = running_cost(spec, e.y, u);
  e.gradient = Trajectory(u.grid, spec.m);
  for (std::size_t k = 0; k < u.size(); ++k) {
    const double t = u.grid[k];
    e.gradient.set(k, spec.beta * u.at(k) + spec.g(t, e.y.at(k)).transpose() * e.p.at(k));
  }
  return e;
}

/// Stationary point of u -> J(y(u), u) by BB descent in the trapezoid-weighted L2 metric.
inline OpenLoopSolution solve_open_loop(const ProblemSpec& spec, const Vector& y0, const Trajectory& u_init,
                                        BBConfig bb, const SolverOptions& opt = {}) {
  if (u_init.dim() != spec.m) throw ContractError("solve_open_loop: initial control has wrong dimension");
  const TimeGrid grid = u_init.grid;
  bb.metric = detail::control_metric(grid, spec.m);
  const Objective f = [&](const Vector& x) {
    const OpenLoopEvaluation e = evaluate_open_loop(spec, y0, detail::unflatten(grid, x, spec.m), opt);
    return Evaluation{e.J, detail::flatten(e.gradient)};
  };
  const BBResult r = bb_minimize(f, detail::flatten(u_init), bb);
  OpenLoopSolution s;
  s.u = detail::unflatten(grid, r.x, spec.m);
  const OpenLoopEvaluation e = evaluate_open_loop(spec, y0, s.u, opt);
  s.y = e.y;
  s.p = e.p;
  s.J = e.J;
  s.iterations = r.iterations;
  s.converged = r.converged;
  s.grad_norm = r.grad_norm;
  return s;
}

inline OpenLoopSolution solve_open_loop(const ProblemSpec& spec, const Vector& y0, const TimeGrid& grid,
                                        const BBConfig& bb, const SolverOptions& opt = {}) {
  return solve_open_loop(spec, y0, Trajectory(grid, spec.m), bb, opt);
}

/// One oracle solve per ensemble member, in parallel; failures name the member.
inline std::vector<OpenLoopSolution> solve_open_loop_ensemble(const ProblemSpec& spec, const EnsembleSet& ens,
                                                              const TimeGrid& grid, const BBConfig& bb,
                                                              const SolverOptions& opt = {},
                                                              std::size_t threads = default_thread_count()) {
  std::vector<OpenLoopSolution> out(ens.size());
  parallel_for(
      ens.size(),
      [&](std::size_t i) {
        try {
          out[i] = solve_open_loop(spec, ens.points[i], grid, bb, opt);
        } catch (const Error& e) {
          throw MemberError(i, std::string("open-loop oracle: ") + e.what());
        }
      },
      threads);
  return out;
}

// ============================================================================
// Linear-quadratic oracle
// ============================================================================

/// y' = A y + B u with y_d = 0, y_dT = 0.
struct LQRSpec {
  Matrix A_lin;
  Matrix B;
  Matrix Q1;
  Matrix Q2;
  double alpha = 1.0;
  double beta = 1.0;
  double T = 1.0;

  void validate() const {
    const auto n = A_lin.rows();
    if (A_lin.cols() != n || B.rows() != n || B.cols() < 1 || Q1.cols() != n || Q2.cols() != n)
      throw ContractError("LQRSpec: inconsistent dimensions");
    if (!(beta > 0.0) || !(alpha >= 0.0) || !(T > 0.0)) throw ContractError("LQRSpec: invalid scalars");
  }

  /// The same problem in the general control-affine form.
  [[nodiscard]] ProblemSpec problem() const {
    validate();
    ProblemSpec s;
    s.n = static_cast<int>(A_lin.rows());
    s.m = static_cast<int>(B.cols());
    s.T = T;
    s.alpha = alpha;
    s.beta = beta;
    s.Q1 = Q1;
    s.Q2 = Q2;
    s.y_dT = Vector::Zero(s.n);
    const Matrix A = A_lin, Bm = B;
    const int n = s.n, m = s.m;
    s.y_d = [n](double) { return Vector(Vector::Zero(n)); };
    s.f = [A](double, const Vector& y) { return Vector(A * y); };
    s.jac_f = [A](double, const Vector&) { return A; };
    s.g = [Bm](double, const Vector&) { return Bm; };
    s.dg = [n, m](double, const Vector&) { return std::vector<Matrix>(n, Matrix::Zero(n, m)); };
    s.validate();
    return s;
  }
};

/**
 * Backward implicit Euler on -Pi' = A^T Pi + Pi A - (1/beta) Pi B B^T Pi + Q1^T Q1,
 * Pi(T) = alpha Q2^T Q2. Each step solves the implicit matrix equation by Newton's method.
 */
inline std::vector<Matrix> riccati_solve(const LQRSpec& lqr, const TimeGrid& grid, double blowup_bound = 1e8) {
  lqr.validate();
  const Eigen::Index n = lqr.A_lin.rows();
  const double h = grid.spacing();
  const Matrix S = lqr.B * lqr.B.transpose() / lqr.beta;
  const Matrix Q = lqr.Q1.transpose() * lqr.Q1;
  const Matrix I = Matrix::Identity(n, n);
  const Matrix At = lqr.A_lin.transpose();
  // Linear part of the implicit step in vectorized form: vec(X - h A^T X - h X A).
  const Matrix L = Matrix::Identity(n * n, n * n) - h * Eigen::kroneckerProduct(I, At).eval() -
                   h * Eigen::kroneckerProduct(At, I).eval();

  std::vector<Matrix> Pi(grid.size());
  Pi.back() = lqr.alpha * lqr.Q2.transpose() * lqr.Q2;
  for (std::size_t k = grid.size() - 1; k-- > 0;) {
    const Matrix rhs = Pi[k + 1] + h * Q;
    Matrix X = Pi[k + 1];
    for (int it = 0;; ++it) {
      const Matrix R = X - h * (At * X + X * lqr.A_lin) + h * X * S * X - rhs;
      if (R.norm() <= 1e-14 * (1.0 + rhs.norm())) break;
      if (it == 50) throw SolverError("riccati_solve: Newton iteration did not converge", k);
      const Matrix XS = X * S;
      const Matrix J = L + h * (Eigen::kroneckerProduct((S * X).transpose(), I).eval() +
                                Eigen::kroneckerProduct(I, XS).eval());
      const Vector dx = J.partialPivLu().solve(-R.reshaped());
      X += dx.reshaped(n, n);
    }
    X = 0.5 * (X + X.transpose()).eval();
    if (!X.allFinite() || X.norm() > blowup_bound) throw DivergenceError("riccati_solve: finite escape", k);
    Pi[k] = X;
  }
  return Pi;
}

/// Closed loop y' = (A - (1/beta) B B^T Pi(t)) y with Pi interpolated linearly between nodes.
inline Trajectory riccati_closed_loop(const LQRSpec& lqr, const std::vector<Matrix>& Pi, const TimeGrid& grid,
                                      const Vector& y0, const SolverOptions& opt = {}) {
  const double h = grid.spacing();
  const Matrix S = lqr.B * lqr.B.transpose() / lqr.beta;
  const auto gain = [&](double t) -> Matrix {
    const double s = std::clamp(t / h, 0.0, static_cast<double>(grid.n_steps()));
    const auto k = std::min(static_cast<std::size_t>(s), grid.n_steps() - 1);
    const double w = s - static_cast<double>(k);
    return lqr.A_lin - S * ((1.0 - w) * Pi[k] + w * Pi[k + 1]);
  };
  OdeSystem sys;
  sys.rhs = [&](double t, const Vector& y) -> Vector { return gain(t) * y; };
  sys.jac = [&](double t, const Vector&) -> Matrix { return gain(t); };
  return radau_integrate(sys, y0, grid, opt);
}

/// Riccati feedback -(1/beta) B^T Pi(t) y(t) along a trajectory.
inline Trajectory riccati_feedback(const LQRSpec& lqr, const std::vector<Matrix>& Pi, const Trajectory& y) {
  Trajectory u(y.grid, lqr.B.cols());
  for (std::size_t k = 0; k < y.size(); ++k) u.set(k, -(1.0 / lqr.beta) * lqr.B.transpose() * Pi[k] * y.at(k));
  return u;
}

}  // namespace hjbfl
