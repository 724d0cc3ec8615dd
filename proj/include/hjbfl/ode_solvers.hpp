/**
 * @file ode_solvers.hpp
 * @brief Time integration for the closed-loop state, the adjoint, the two
 *        costates and the linearized sensitivity system.
 *
 * Nonlinear state equations use the 3-stage Radau IIA collocation method with
 * a damped Newton iteration. Every linear equation is stepped with implicit
 * Euler on the shared grid, or optionally with Crank-Nicolson or the 3-stage
 * Lobatto IIIA method; the latter pairs consecutive intervals into one step
 * whose middle node is the interior stage.
 */
#pragma once

#include <array>
#include <functional>
#include <utility>

#include "hjbfl/value_model.hpp"

namespace hjbfl {

enum class LinearScheme { ImplicitEuler, CrankNicolson, Lobatto };

inline std::string to_string(LinearScheme s) {
  switch (s) {
    case LinearScheme::ImplicitEuler: return "implicit_euler";
    case LinearScheme::CrankNicolson: return "crank_nicolson";
    case LinearScheme::Lobatto: return "lobatto";
  }
  return "?";
}

inline LinearScheme parse_linear_scheme(const std::string& name) {
  if (name == "implicit_euler") return LinearScheme::ImplicitEuler;
  if (name == "crank_nicolson") return LinearScheme::CrankNicolson;
  if (name == "lobatto") return LinearScheme::Lobatto;
  throw ConfigError("unknown linear scheme '" + name + "'");
}

struct SolverOptions {
  double newton_tol = 1e-10;
  int newton_max_iter = 25;
  double blowup_bound = 1e6;
  LinearScheme linear = LinearScheme::ImplicitEuler;
};

// ============================================================================
// Radau IIA (3 stages, order 5)
// ============================================================================

namespace detail {

struct RadauTableau {
  std::array<double, 3> c;
  Eigen::Matrix3d A;
};

inline const RadauTableau& radau_tableau() {
  static const RadauTableau tab = [] {
    const double s6 = std::sqrt(6.0);
    RadauTableau t;
    t.c = {(4.0 - s6) / 10.0, (4.0 + s6) / 10.0, 1.0};
    t.A << (88.0 - 7.0 * s6) / 360.0, (296.0 - 169.0 * s6) / 1800.0, (-2.0 + 3.0 * s6) / 225.0,
        (296.0 + 169.0 * s6) / 1800.0, (88.0 + 7.0 * s6) / 360.0, (-2.0 - 3.0 * s6) / 225.0,
        (16.0 - s6) / 36.0, (16.0 + s6) / 36.0, 1.0 / 9.0;
    return t;
  }();
  return tab;
}

}  // namespace detail

/// Right-hand side and Jacobian of y' = phi(t, y).
struct OdeSystem {
  std::function<Vector(double, const Vector&)> rhs;
  std::function<Matrix(double, const Vector&)> jac;
};

/**
 * @brief Integrates y' = phi(t,y) on `grid` with 3-stage Radau IIA.
 *
 * Each step solves the 3n stage equations Z_i = h sum_j a_ij phi(t + c_j h, y + Z_j)
 * by Newton's method with backtracking on the residual max-norm.
 */
inline Trajectory radau_integrate(const OdeSystem& sys, const Vector& y0, const TimeGrid& grid,
                                  const SolverOptions& opt = {}) {
  if (!y0.allFinite()) throw ContractError("radau_integrate: non-finite initial state");
  const auto& tab = detail::radau_tableau();
  const Eigen::Index n = y0.size();
  const double h = grid.spacing();
  Trajectory traj(grid, n);
  traj.set(0, y0);
  Vector y = y0;
  Vector Z(3 * n), G(3 * n), Phi(3 * n);
  Matrix N(3 * n, 3 * n);

  const auto residual = [&](double t, const Vector& z, Vector& phi, Vector& g) {
    for (int j = 0; j < 3; ++j) phi.segment(j * n, n) = sys.rhs(t + tab.c[j] * h, y + z.segment(j * n, n));
    for (int i = 0; i < 3; ++i) {
      g.segment(i * n, n) = z.segment(i * n, n);
      for (int j = 0; j < 3; ++j) g.segment(i * n, n) -= h * tab.A(i, j) * phi.segment(j * n, n);
    }
    return phi.allFinite() ? g.cwiseAbs().maxCoeff() : std::numeric_limits<double>::infinity();
  };

  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const double t = grid[k];
    const Vector f0 = sys.rhs(t, y);
    for (int j = 0; j < 3; ++j) Z.segment(j * n, n) = tab.c[j] * h * f0;
    double res = 0.0;
    try {
      res = residual(t, Z, Phi, G);
    } catch (const NumericError&) {
      res = std::numeric_limits<double>::infinity();
    }
    int iter = 0;
    while (!(res <= opt.newton_tol)) {
      if (iter++ >= opt.newton_max_iter || !std::isfinite(res))
        throw SolverError("Radau Newton iteration did not converge, residual " + format_double(res), k);
      N.setIdentity();
      for (int j = 0; j < 3; ++j) {
        const Matrix J = sys.jac(t + tab.c[j] * h, y + Z.segment(j * n, n));
        for (int i = 0; i < 3; ++i) N.block(i * n, j * n, n, n) -= h * tab.A(i, j) * J;
      }
      const Vector dZ = N.partialPivLu().solve(-G);
      double lambda = 1.0;
      Vector Zt(3 * n), Gt(3 * n), Pt(3 * n);
      double rt = std::numeric_limits<double>::infinity();
      for (int damp = 0; damp < 12; ++damp, lambda *= 0.5) {
        Zt = Z + lambda * dZ;
        try {
          rt = residual(t, Zt, Pt, Gt);
        } catch (const NumericError&) {
          rt = std::numeric_limits<double>::infinity();
        }
        if (rt < res || rt <= opt.newton_tol) break;
      }
      if (!std::isfinite(rt)) throw SolverError("Radau Newton step produced non-finite residual", k);
      Z = Zt;
      G = Gt;
      Phi = Pt;
      res = rt;
    }
    y += Z.segment(2 * n, n);
    if (!y.allFinite()) throw NumericError("radau_integrate: non-finite state at step " + std::to_string(k));
    if (y.norm() > opt.blowup_bound) throw DivergenceError("state norm exceeded blowup bound", k + 1);
    traj.set(k + 1, y);
  }
  return traj;
}

// ============================================================================
// Linear equations
// ============================================================================

namespace detail {

/**
 * One Lobatto IIIA step of x' = M(t) x + s(t) over length H from x at stage 1, with the
 * coefficients at the three stages c = 0, 1/2, 1. Returns the stage values at c = 1/2 and 1.
 */
inline std::pair<Vector, Vector> lobatto_step(const Vector& x, const Matrix& M1, const Vector& s1, const Matrix& M2,
                                              const Vector& s2, const Matrix& M3, const Vector& s3, double H) {
  const Eigen::Index n = x.size();
  const Vector K1 = M1 * x + s1;
  Matrix lhs(2 * n, 2 * n);
  lhs.topLeftCorner(n, n) = Matrix::Identity(n, n) - (H / 3.0) * M2;
  lhs.topRightCorner(n, n) = (H / 24.0) * M3;
  lhs.bottomLeftCorner(n, n) = -(2.0 * H / 3.0) * M2;
  lhs.bottomRightCorner(n, n) = Matrix::Identity(n, n) - (H / 6.0) * M3;
  Vector rhs(2 * n);
  rhs.head(n) = x + H * (5.0 / 24.0 * K1 + s2 / 3.0 - s3 / 24.0);
  rhs.tail(n) = x + H * (K1 / 6.0 + 2.0 / 3.0 * s2 + s3 / 6.0);
  const Vector X = lhs.partialPivLu().solve(rhs);
  return {X.head(n), X.tail(n)};
}

inline void require_lobatto_grid(const TimeGrid& grid, const char* who) {
  if (grid.n_steps() % 2 != 0) throw ContractError(std::string(who) + ": the Lobatto scheme needs an even step count");
}

}  // namespace detail

/**
 * Backward linear equation -x' = A(t) x + s(t), x(T) = x_T, with A and s given at the nodes.
 * Implicit Euler: (I - h A_k) x_k = x_{k+1} + h s_k.
 */
inline Trajectory solve_linear_backward(const TimeGrid& grid, const std::vector<Matrix>& A, const Trajectory& s,
                                        const Vector& terminal, LinearScheme scheme = LinearScheme::ImplicitEuler) {
  const std::size_t K = grid.size();
  if (A.size() != K || s.size() != K) throw ContractError("solve_linear_backward: node count mismatch");
  const Eigen::Index n = terminal.size();
  const double h = grid.spacing();
  Trajectory x(grid, n);
  x.set(K - 1, terminal);
  Vector next = terminal;
  if (scheme == LinearScheme::Lobatto) {
    detail::require_lobatto_grid(grid, "solve_linear_backward");
    for (std::size_t k = K - 1; k >= 2; k -= 2) {
      auto [mid, first] =
          detail::lobatto_step(next, A[k], s.at(k), A[k - 1], s.at(k - 1), A[k - 2], s.at(k - 2), 2.0 * h);
      if (!first.allFinite() || !mid.allFinite())
        throw SolverError("singular step matrix in backward linear solve", k - 2);
      x.set(k - 1, mid);
      x.set(k - 2, first);
      next = std::move(first);
    }
    return x;
  }
  const Matrix I = Matrix::Identity(n, n);
  for (std::size_t k = K - 1; k-- > 0;) {
    Vector rhs;
    Matrix lhs;
    if (scheme == LinearScheme::ImplicitEuler) {
      lhs = I - h * A[k];
      rhs = next + h * s.at(k);
    } else {
      lhs = I - 0.5 * h * A[k];
      rhs = next + 0.5 * h * (A[k + 1] * next + s.at(k) + s.at(k + 1));
    }
    Eigen::PartialPivLU<Matrix> lu(lhs);
    next = lu.solve(rhs);
    if (!next.allFinite()) throw SolverError("singular step matrix in backward linear solve", k);
    x.set(k, next);
  }
  return x;
}

/**
 * Forward linear equation x' = B(t) x + s(t), x(0) = x_0.
 * Implicit Euler: (I - h B_{k+1}) x_{k+1} = x_k + h s_{k+1}.
 */
inline Trajectory solve_linear_forward(const TimeGrid& grid, const std::vector<Matrix>& B, const Trajectory& s,
                                       const Vector& initial, LinearScheme scheme = LinearScheme::ImplicitEuler) {
  const std::size_t K = grid.size();
  if (B.size() != K || s.size() != K) throw ContractError("solve_linear_forward: node count mismatch");
  const Eigen::Index n = initial.size();
  const double h = grid.spacing();
  Trajectory x(grid, n);
  x.set(0, initial);
  Vector prev = initial;
  if (scheme == LinearScheme::Lobatto) {
    detail::require_lobatto_grid(grid, "solve_linear_forward");
    for (std::size_t k = 0; k + 2 < K; k += 2) {
      auto [mid, last] =
          detail::lobatto_step(prev, B[k], s.at(k), B[k + 1], s.at(k + 1), B[k + 2], s.at(k + 2), 2.0 * h);
      if (!last.allFinite() || !mid.allFinite()) throw SolverError("singular step matrix in forward linear solve", k + 2);
      x.set(k + 1, mid);
      x.set(k + 2, last);
      prev = std::move(last);
    }
    return x;
  }
  const Matrix I = Matrix::Identity(n, n);
  for (std::size_t k = 0; k + 1 < K; ++k) {
    Vector rhs;
    Matrix lhs;
    if (scheme == LinearScheme::ImplicitEuler) {
      lhs = I - h * B[k + 1];
      rhs = prev + h * s.at(k + 1);
    } else {
      lhs = I - 0.5 * h * B[k + 1];
      rhs = prev + 0.5 * h * (B[k] * prev + s.at(k) + s.at(k + 1));
    }
    Eigen::PartialPivLU<Matrix> lu(lhs);
    prev = lu.solve(rhs);
    if (!prev.allFinite()) throw SolverError("singular step matrix in forward linear solve", k + 1);
    x.set(k + 1, prev);
  }
  return x;
}

/**
 * Doubles the resolution of a trajectory: node values are kept and each midpoint is the
 * cubic Hermite interpolant built from the node values and the right-hand side at the nodes.
 */
inline Trajectory refine_midpoints(const Trajectory& y, const std::function<Vector(double, const Vector&)>& rhs) {
  const TimeGrid& grid = y.grid;
  const TimeGrid fine(grid.horizon(), 2 * grid.n_steps());
  const double h = grid.spacing();
  Trajectory out(fine, y.dim());
  Vector d_prev = rhs(grid[0], y.at(0));
  out.set(0, y.at(0));
  for (std::size_t k = 0; k + 1 < y.size(); ++k) {
    const Vector a = y.at(k), b = y.at(k + 1);
    const Vector d_next = rhs(grid[k + 1], b);
    out.set(2 * k + 1, 0.5 * (a + b) + (h / 8.0) * (d_prev - d_next));
    out.set(2 * k + 2, b);
    d_prev = d_next;
  }
  return out;
}

// ============================================================================
// Closed-loop quantities at one node
// ============================================================================

/// Everything the adjoint, costate and gradient formulas need at (t_k, y_k).
struct ClosedLoopNode {
  ModelEval V;
  Matrix g;
  std::vector<Matrix> dg;
  Vector F;
  Matrix DyF;
  Matrix Df;
  /// A = Df^T + M(F)^T with M(u) = D_y[g u].
  Matrix A;
};

/// The closed-loop operator A(t, y, theta) = D_y f^T + [D_y g^T F_theta].
template <ValueModel M>
class ClosedLoopOperatorA {
 public:
  ClosedLoopOperatorA(const ProblemSpec& spec, const M& model, const ThetaVector& theta)
      : spec_(spec), model_(model), theta_(theta) {}

  [[nodiscard]] ClosedLoopNode node(double t, const Vector& y) const {
    ClosedLoopNode nd;
    nd.V = model_.evaluate(theta_, t, y, true);
    nd.g = spec_.g(t, y);
    nd.dg = spec_.dg(t, y);
    nd.F = feedback_from_grad(spec_, nd.g, nd.V.grad_y);
    nd.DyF = feedback_jac_y(spec_, nd.g, nd.dg, nd.V.grad_y, nd.V.hess_yy);
    nd.Df = spec_.jac_f(t, y);
    nd.A = nd.Df.transpose() + jac_gu(nd.dg, nd.F).transpose();
    return nd;
  }

  [[nodiscard]] Matrix operator()(double t, const Vector& y) const { return node(t, y).A; }

  /// Closed-loop right-hand side f + g F and its Jacobian Df + M(F) + g D_yF.
  [[nodiscard]] OdeSystem system() const {
    OdeSystem sys;
    sys.rhs = [this](double t, const Vector& y) -> Vector {
      const Matrix g = spec_.g(t, y);
      const Vector F = feedback_from_grad(spec_, g, model_.evaluate(theta_, t, y, false).grad_y);
      return spec_.f(t, y) + g * F;
    };
    sys.jac = [this](double t, const Vector& y) -> Matrix {
      const ClosedLoopNode nd = node(t, y);
      return nd.Df + jac_gu(nd.dg, nd.F) + nd.g * nd.DyF;
    };
    return sys;
  }

 private:
  const ProblemSpec& spec_;
  const M& model_;
  const ThetaVector& theta_;
};

template <ValueModel M>
std::vector<ClosedLoopNode> closed_loop_nodes(const ProblemSpec& spec, const M& model, const ThetaVector& theta,
                                              const Trajectory& y) {
  const ClosedLoopOperatorA<M> op(spec, model, theta);
  std::vector<ClosedLoopNode> nodes;
  nodes.reserve(y.size());
  for (std::size_t k = 0; k < y.size(); ++k) nodes.push_back(op.node(y.grid[k], y.at(k)));
  return nodes;
}

// ============================================================================
// State
// ============================================================================

template <ValueModel M>
Trajectory integrate_closed_loop(const ProblemSpec& spec, const M& model, const ThetaVector& theta,
                                 const Vector& y0, const TimeGrid& grid, const SolverOptions& opt = {}) {
  if (y0.size() != spec.n) throw ContractError("integrate_closed_loop: initial state has wrong dimension");
  if (theta.size() != model.n_params()) throw ContractError("integrate_closed_loop: theta has wrong length");
  const ClosedLoopOperatorA<M> op(spec, model, theta);
  return radau_integrate(op.system(), y0, grid, opt);
}

/// State under an open-loop control given at the nodes and interpolated linearly in between.
inline Trajectory integrate_open_loop(const ProblemSpec& spec, const Trajectory& u, const Vector& y0,
                                      const SolverOptions& opt = {}) {
  if (u.dim() != spec.m) throw ContractError("integrate_open_loop: control has wrong dimension");
  const TimeGrid& grid = u.grid;
  const double h = grid.spacing();
  const auto control = [&](double t) -> Vector {
    const double s = t / h;
    auto k = static_cast<std::size_t>(std::floor(s));
    if (k + 1 >= grid.size()) k = grid.size() - 2;
    const double w = std::clamp(s - static_cast<double>(k), 0.0, 1.0);
    return (1.0 - w) * u.at(k) + w * u.at(k + 1);
  };
  OdeSystem sys;
  sys.rhs = [&](double t, const Vector& y) -> Vector { return spec.f(t, y) + spec.g(t, y) * control(t); };
  sys.jac = [&](double t, const Vector& y) -> Matrix { return spec.jac_f(t, y) + jac_gu(spec.dg(t, y), control(t)); };
  return radau_integrate(sys, y0, grid, opt);
}

// ============================================================================
// Adjoint
// ============================================================================

/// Terminal adjoint alpha Q2^T Q2 (y(T) - y_dT).
inline Vector terminal_adjoint(const ProblemSpec& spec, const Trajectory& y) {
  return spec.alpha * (spec.Q2tQ2() * (y.at(y.size() - 1) - spec.y_dT));
}

/// Tracking source Q1^T Q1 (y - y_d) at every node.
inline Trajectory tracking_source(const ProblemSpec& spec, const Trajectory& y) {
  Trajectory s(y.grid, spec.n);
  const Matrix Q = spec.Q1tQ1();
  for (std::size_t k = 0; k < y.size(); ++k) s.set(k, Q * (y.at(k) - spec.y_d(y.grid[k])));
  return s;
}

inline Trajectory integrate_adjoint(const ProblemSpec& spec, const std::vector<ClosedLoopNode>& nodes,
                                    const Trajectory& y, const SolverOptions& opt = {}) {
  std::vector<Matrix> A;
  A.reserve(nodes.size());
  for (const auto& nd : nodes) A.push_back(nd.A);
  return solve_linear_backward(y.grid, A, tracking_source(spec, y), terminal_adjoint(spec, y), opt.linear);
}

/// -p' = A(y, theta) p + Q1^T Q1 (y - y_d),  p(T) = alpha Q2^T Q2 (y(T) - y_dT).
template <ValueModel M>
Trajectory integrate_adjoint(const ProblemSpec& spec, const M& model, const ThetaVector& theta, const Trajectory& y,
                             const SolverOptions& opt = {}) {
  return integrate_adjoint(spec, closed_loop_nodes(spec, model, theta, y), y, opt);
}

/// Adjoint of the open-loop problem, with A = Df^T + M(u)^T.
inline Trajectory integrate_adjoint_open_loop(const ProblemSpec& spec, const Trajectory& y, const Trajectory& u,
                                              const SolverOptions& opt = {}) {
  require_same_grid(y.grid, u.grid, "integrate_adjoint_open_loop");
  std::vector<Matrix> A;
  A.reserve(y.size());
  for (std::size_t k = 0; k < y.size(); ++k) {
    const double t = y.grid[k];
    const Vector yk = y.at(k);
    A.push_back(spec.jac_f(t, yk).transpose() + jac_gu(spec.dg(t, yk), u.at(k)).transpose());
  }
  return solve_linear_backward(y.grid, A, tracking_source(spec, y), terminal_adjoint(spec, y), opt.linear);
}

// ============================================================================
// Costates
// ============================================================================

/// kappa' = A^T kappa + p_hat,  kappa(0) = 0.
inline Trajectory integrate_costate_kappa(const std::vector<ClosedLoopNode>& nodes, const Trajectory& p_hat,
                                          const SolverOptions& opt = {}) {
  std::vector<Matrix> B;
  B.reserve(nodes.size());
  for (const auto& nd : nodes) B.push_back(nd.A.transpose());
  return solve_linear_forward(p_hat.grid, B, p_hat, Vector::Zero(p_hat.dim()), opt.linear);
}

template <ValueModel M>
Trajectory integrate_costate_kappa(const ProblemSpec& spec, const M& model, const ThetaVector& theta,
                                   const Trajectory& y, const Trajectory& p_hat, const SolverOptions& opt = {}) {
  require_same_grid(y.grid, p_hat.grid, "integrate_costate_kappa");
  return integrate_costate_kappa(closed_loop_nodes(spec, model, theta, y), p_hat, opt);
}

/// [D_y(A(y) p)]^T kappa = H_{p.f} kappa + H_{p.gF} kappa + D_yF^T [D_y(g^T p)] kappa.
inline Vector curvature_source(const ProblemSpec& spec, const ClosedLoopNode& nd, double t, const Vector& y,
                               const Vector& p, const Vector& kappa) {
  Vector out = nd.DyF.transpose() * (jac_gtw(nd.dg, p) * kappa);
  if (spec.hess_pf) out += spec.hess_pf(t, y, p) * kappa;
  if (spec.hess_pgu) out += spec.hess_pgu(t, y, p, nd.F) * kappa;
  return out;
}

/**
 * -zeta' = (A + D_yF^T g^T) zeta + [D_y A^T p] kappa + Q1^T Q1 kappa + y_hat,
 * zeta(T) = alpha Q2^T Q2 kappa(T) + y_hatT.
 * `p` may be empty when kappa vanishes identically.
 */
inline Trajectory integrate_costate_zeta(const ProblemSpec& spec, const std::vector<ClosedLoopNode>& nodes,
                                         const Trajectory& y, const Trajectory* p, const Trajectory* kappa,
                                         const Trajectory& y_hat, const Vector& y_hatT, const SolverOptions& opt = {}) {
  const std::size_t K = y.size();
  std::vector<Matrix> B;
  B.reserve(K);
  for (const auto& nd : nodes) B.push_back(nd.A + nd.DyF.transpose() * nd.g.transpose());
  Trajectory s = y_hat;
  Vector terminal = y_hatT;
  if (kappa) {
    if (!p) throw ContractError("integrate_costate_zeta: kappa given without adjoint");
    const Matrix Q1 = spec.Q1tQ1();
    for (std::size_t k = 0; k < K; ++k) {
      const Vector kk = kappa->at(k);
      s.set(k, s.at(k) + Q1 * kk + curvature_source(spec, nodes[k], y.grid[k], y.at(k), p->at(k), kk));
    }
    terminal += spec.alpha * (spec.Q2tQ2() * kappa->at(K - 1));
  }
  return solve_linear_backward(y.grid, B, s, terminal, opt.linear);
}

template <ValueModel M>
Trajectory integrate_costate_zeta(const ProblemSpec& spec, const M& model, const ThetaVector& theta,
                                  const Trajectory& y, const Trajectory& p, const Trajectory& kappa,
                                  const Trajectory& y_hat, const Vector& y_hatT, const SolverOptions& opt = {}) {
  require_same_grid(y.grid, kappa.grid, "integrate_costate_zeta");
  require_same_grid(y.grid, y_hat.grid, "integrate_costate_zeta");
  return integrate_costate_zeta(spec, closed_loop_nodes(spec, model, theta, y), y, &p, &kappa, y_hat, y_hatT, opt);
}

// ============================================================================
// Sensitivities
// ============================================================================

/**
 * Linearization of (state, adjoint) along dtheta:
 *   dY' = (Df + M(F) + g D_yF) dY + g D_thetaF dtheta,   dY(0) = 0,
 *  -dP' = A dP + ([D_y(A p)] + Q1^T Q1) dY + [D_y(g^T p)]^T D_thetaF dtheta,
 *   dP(T) = alpha Q2^T Q2 dY(T).
 */
template <ValueModel M>
std::pair<Trajectory, Trajectory> integrate_sensitivity(const ProblemSpec& spec, const M& model,
                                                        const ThetaVector& theta, const ThetaVector& dtheta,
                                                        const Trajectory& y, const Trajectory& p,
                                                        const SolverOptions& opt = {}) {
  if (dtheta.size() != theta.size()) throw ContractError("integrate_sensitivity: dtheta has wrong length");
  const auto nodes = closed_loop_nodes(spec, model, theta, y);
  const std::size_t K = y.size();
  const TimeGrid& grid = y.grid;
  std::vector<Matrix> C, A, Kmat;
  Trajectory sy(grid, spec.n), sp(grid, spec.n);
  std::vector<Vector> dF(K);
  const Matrix Q1 = spec.Q1tQ1();
  for (std::size_t k = 0; k < K; ++k) {
    const auto& nd = nodes[k];
    const double t = grid[k];
    const Vector yk = y.at(k), pk = p.at(k);
    C.push_back(nd.Df + jac_gu(nd.dg, nd.F) + nd.g * nd.DyF);
    A.push_back(nd.A);
    const Matrix Gp = jac_gtw(nd.dg, pk);
    Matrix Kk = Gp.transpose() * nd.DyF + Q1;
    if (spec.hess_pf) Kk += spec.hess_pf(t, yk, pk);
    if (spec.hess_pgu) Kk += spec.hess_pgu(t, yk, pk, nd.F);
    Kmat.push_back(std::move(Kk));
    dF[k] = feedback_jacobian_theta(spec, model, theta, t, yk) * dtheta;
    sy.set(k, nd.g * dF[k]);
  }
  const Trajectory dY = solve_linear_forward(grid, C, sy, Vector::Zero(spec.n), opt.linear);
  for (std::size_t k = 0; k < K; ++k)
    sp.set(k, Kmat[k] * dY.at(k) + jac_gtw(nodes[k].dg, p.at(k)).transpose() * dF[k]);
  const Vector dPT = spec.alpha * (spec.Q2tQ2() * dY.at(K - 1));
  Trajectory dP = solve_linear_backward(grid, A, sp, dPT, opt.linear);
  return {dY, dP};
}

}  // namespace hjbfl
