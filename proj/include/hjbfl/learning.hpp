/**
 * @file learning.hpp
 * @brief Augmented cost, finite-ensemble objective and its costate-based gradient.
 *
 * Per ensemble member the gradient pipeline is
 *   state -> node evaluations -> cost-to-go -> adjoint (gamma2 > 0 only) -> Phi
 *         -> hat sources -> kappa (gamma2 > 0 only) -> zeta -> one reverse sweep per node.
 */
#pragma once

#include <optional>

#include "hjbfl/ode_solvers.hpp"
#include "hjbfl/parallel.hpp"

namespace hjbfl {

/// Coefficient of the terminal hat source: Phi(0) (always zero) or Phi(T).
enum class PhiTerminalConvention { PaperZero, DerivedT };

inline std::string to_string(PhiTerminalConvention c) {
  return c == PhiTerminalConvention::PaperZero ? "paper_zero" : "derived_T";
}

inline PhiTerminalConvention parse_phi_convention(const std::string& name) {
  if (name == "paper_zero") return PhiTerminalConvention::PaperZero;
  if (name == "derived_T") return PhiTerminalConvention::DerivedT;
  throw ConfigError("unknown phi_terminal_convention '" + name + "'");
}

/// Simpson quadrature accompanies the Lobatto costate scheme; everything else uses the trapezoid rule.
inline Quadrature quadrature_for(const SolverOptions& opt) {
  return opt.linear == LinearScheme::Lobatto ? Quadrature::Simpson : Quadrature::Trapezoid;
}

struct LearningOptions {
  SolverOptions solver;
  PhiTerminalConvention phi_terminal = PhiTerminalConvention::DerivedT;
  std::size_t threads = default_thread_count();
};

/// Failure while evaluating one ensemble member.
class MemberError : public Error {
 public:
  MemberError(std::size_t member, const std::string& what)
      : Error("ensemble member " + std::to_string(member) + ": " + what), member_(member) {}
  [[nodiscard]] std::size_t member() const noexcept { return member_; }

 private:
  std::size_t member_;
};

// ============================================================================
// Cost functionals
// ============================================================================

/// Running integrand 1/2 (|Q1 (y - y_d)|^2 + beta |u|^2) at every node.
inline ScalarTrajectory running_integrand(const ProblemSpec& spec, const Trajectory& y, const Trajectory& u) {
  require_same_grid(y.grid, u.grid, "running_integrand");
  ScalarTrajectory l(y.size());
  for (std::size_t k = 0; k < y.size(); ++k) {
    const Vector e = spec.Q1 * (y.at(k) - spec.y_d(y.grid[k]));
    l[k] = 0.5 * (e.squaredNorm() + spec.beta * u.at(k).squaredNorm());
  }
  return l;
}

inline double terminal_cost(const ProblemSpec& spec, const Vector& yT) {
  return 0.5 * spec.alpha * (spec.Q2 * (yT - spec.y_dT)).squaredNorm();
}

/// J(y,u) by trapezoid or Simpson quadrature plus the terminal term.
inline double running_cost(const ProblemSpec& spec, const Trajectory& y, const Trajectory& u,
                           Quadrature q = Quadrature::Trapezoid) {
  return integrate(y.grid, running_integrand(spec, y, u), q) + terminal_cost(spec, y.at(y.size() - 1));
}

/**
 * int_0^{t_k} v at every node, starting at zero. The Simpson variant advances by full
 * panels on even nodes and by the third-order half-panel rule on odd nodes.
 */
inline ScalarTrajectory cumulative_integral(const TimeGrid& grid, const ScalarTrajectory& v,
                                            Quadrature q = Quadrature::Trapezoid) {
  const double h = grid.spacing();
  ScalarTrajectory out(v.size(), 0.0);
  if (q == Quadrature::Trapezoid) {
    for (std::size_t k = 1; k < v.size(); ++k) out[k] = out[k - 1] + 0.5 * h * (v[k - 1] + v[k]);
    return out;
  }
  if (grid.n_steps() % 2 != 0) throw ContractError("cumulative_integral: Simpson rule needs an even step count");
  for (std::size_t k = 0; k + 2 < v.size(); k += 2) {
    out[k + 1] = out[k] + h / 12.0 * (5.0 * v[k] + 8.0 * v[k + 1] - v[k + 2]);
    out[k + 2] = out[k] + h / 3.0 * (v[k] + 4.0 * v[k + 1] + v[k + 2]);
  }
  return out;
}

/// int_{t_k}^T v at every node.
inline ScalarTrajectory reverse_cumulative_integral(const TimeGrid& grid, const ScalarTrajectory& v,
                                                    Quadrature q = Quadrature::Trapezoid) {
  const double h = grid.spacing();
  const std::size_t K = v.size();
  ScalarTrajectory out(K, 0.0);
  if (q == Quadrature::Trapezoid) {
    for (std::size_t k = K - 1; k-- > 0;) out[k] = out[k + 1] + 0.5 * h * (v[k] + v[k + 1]);
    return out;
  }
  if (grid.n_steps() % 2 != 0)
    throw ContractError("reverse_cumulative_integral: Simpson rule needs an even step count");
  for (std::size_t k = K - 1; k >= 2; k -= 2) {
    out[k - 1] = out[k] + h / 12.0 * (-v[k - 2] + 8.0 * v[k - 1] + 5.0 * v[k]);
    out[k - 2] = out[k] + h / 3.0 * (v[k - 2] + 4.0 * v[k - 1] + v[k]);
  }
  return out;
}

/// J_{t_k}(y,u) at every node.
inline ScalarTrajectory cost_to_go(const ProblemSpec& spec, const Trajectory& y, const Trajectory& u,
                                   Quadrature q = Quadrature::Trapezoid) {
  ScalarTrajectory J = reverse_cumulative_integral(y.grid, running_integrand(spec, y, u), q);
  const double JT = terminal_cost(spec, y.at(y.size() - 1));
  for (double& x : J) x += JT;
  return J;
}

inline ScalarTrajectory cumulative_trapezoid(const TimeGrid& grid, const ScalarTrajectory& v) {
  return cumulative_integral(grid, v, Quadrature::Trapezoid);
}

// ============================================================================
// Per-member evaluation
// ============================================================================

/// Model and feedback quantities along one trajectory.
struct NodeValues {
  ScalarTrajectory V;
  Trajectory dV;
  Trajectory u;
};

template <ValueModel M>
NodeValues node_values(const ProblemSpec& spec, const M& model, const ThetaVector& theta, const Trajectory& y) {
  NodeValues nv{ScalarTrajectory(y.size()), Trajectory(y.grid, spec.n), Trajectory(y.grid, spec.m)};
  for (std::size_t k = 0; k < y.size(); ++k) {
    const double t = y.grid[k];
    const Vector yk = y.at(k);
    const ModelEval e = model.evaluate(theta, t, yk, false);
    nv.V[k] = e.value;
    nv.dV.set(k, e.grad_y);
    nv.u.set(k, feedback_from_grad(spec, spec.g(t, yk), e.grad_y));
  }
  return nv;
}

inline NodeValues node_values(const std::vector<ClosedLoopNode>& nodes, const Trajectory& y, int m) {
  NodeValues nv{ScalarTrajectory(y.size()), Trajectory(y.grid, y.dim()), Trajectory(y.grid, m)};
  for (std::size_t k = 0; k < y.size(); ++k) {
    nv.V[k] = nodes[k].V.value;
    nv.dV.set(k, nodes[k].V.grad_y);
    nv.u.set(k, nodes[k].F);
  }
  return nv;
}

/// Penalty values gamma1/2 int |V - J_t|^2 and gamma2/2 int |dV - p|^2.
struct PenaltyValues {
  double value_gap = 0.0;
  double gradient_gap = 0.0;
};

inline PenaltyValues penalty_values(const PenaltyConfig& pen, const NodeValues& nv, const ScalarTrajectory& J_t,
                                    const Trajectory* p, Quadrature q = Quadrature::Trapezoid) {
  const TimeGrid& grid = nv.dV.grid;
  PenaltyValues out;
  if (pen.gamma1 > 0.0) {
    ScalarTrajectory d(J_t.size());
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = (nv.V[k] - J_t[k]) * (nv.V[k] - J_t[k]);
    out.value_gap = 0.5 * pen.gamma1 * integrate(grid, d, q);
  }
  if (pen.gamma2 > 0.0) {
    if (!p) throw ContractError("penalty_values: gamma2 > 0 needs the adjoint");
    ScalarTrajectory d(J_t.size());
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = (nv.dV.at(k) - p->at(k)).squaredNorm();
    out.gradient_gap = 0.5 * pen.gamma2 * integrate(grid, d, q);
  }
  return out;
}

/// J(y, F(y)) + gamma1/2 int |V - J_t|^2 + gamma2/2 int |dV - p|^2.
template <ValueModel M>
double augmented_cost(const ProblemSpec& spec, const PenaltyConfig& pen, const M& model, const ThetaVector& theta,
                      const Trajectory& y, const Trajectory& p, Quadrature q = Quadrature::Trapezoid) {
  require_same_grid(y.grid, p.grid, "augmented_cost");
  const NodeValues nv = node_values(spec, model, theta, y);
  const ScalarTrajectory J_t = cost_to_go(spec, y, nv.u, q);
  const PenaltyValues pv = penalty_values(pen, nv, J_t, &p, q);
  return J_t.front() + pv.value_gap + pv.gradient_gap;
}

/// Phi(t) = int_0^t (V(s, y(s)) - J_s) ds.
template <ValueModel M>
ScalarTrajectory phi_accumulator(const M& model, const ThetaVector& theta, const Trajectory& y,
                                 const ScalarTrajectory& J_t, Quadrature q = Quadrature::Trapezoid) {
  ScalarTrajectory d(y.size());
  for (std::size_t k = 0; k < y.size(); ++k) d[k] = model.value(theta, y.grid[k], y.at(k)) - J_t[k];
  return cumulative_integral(y.grid, d, q);
}

struct HatTerms {
  Trajectory y_hat;
  Vector y_hatT;
  Trajectory p_hat;
  Vector theta_hat;
  ScalarTrajectory phi;
};

namespace detail {

/// Node-wise hat sources and the reverse-sweep seeds (c_k, v_k) of theta_hat.
struct HatAssembly {
  HatTerms hats;
  std::vector<double> c;
  std::vector<Vector> v;
};

inline HatAssembly assemble_hats(const ProblemSpec& spec, const PenaltyConfig& pen,
                                 const std::vector<ClosedLoopNode>& nodes, const Trajectory& y, const Trajectory* p,
                                 const ScalarTrajectory& J_t, const ScalarTrajectory& phi,
                                 PhiTerminalConvention conv) {
  const std::size_t K = y.size();
  const TimeGrid& grid = y.grid;
  const Matrix Q1 = spec.Q1tQ1();
  HatAssembly out;
  HatTerms& h = out.hats;
  h.y_hat = Trajectory(grid, spec.n);
  h.p_hat = Trajectory(grid, spec.n);
  h.phi = phi;
  out.c.resize(K);
  out.v.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    const auto& nd = nodes[k];
    const double t = grid[k];
    const Vector yk = y.at(k);
    const double w = 1.0 - pen.gamma1 * phi[k];
    const double gap = nd.V.value - J_t[k];
    Vector yh = w * (Q1 * (yk - spec.y_d(t))) + (w * spec.beta) * (nd.DyF.transpose() * nd.F);
    yh += (pen.gamma1 * gap) * nd.V.grad_y;
    out.c[k] = pen.gamma1 * gap;
    out.v[k] = -w * (nd.g * nd.F);
    if (pen.gamma2 > 0.0) {
      const Vector dgap = nd.V.grad_y - p->at(k);
      yh += pen.gamma2 * (nd.V.hess_yy * dgap);
      h.p_hat.set(k, -pen.gamma2 * dgap);
      out.v[k] += pen.gamma2 * dgap;
    }
    h.y_hat.set(k, yh);
  }
  const double phiT = conv == PhiTerminalConvention::DerivedT ? phi.back() : phi.front();
  h.y_hatT = spec.alpha * (1.0 - pen.gamma1 * phiT) * (spec.Q2tQ2() * (y.at(K - 1) - spec.y_dT));
  return out;
}

}  // namespace detail

/**
 * Hat sources of the gradient formula:
 *   y_hat  = (1 - g1 Phi) Q1^T Q1 (y - y_d) + beta (1 - g1 Phi) D_yF^T F + g1 (V - J) dV + g2 H (dV - p)
 *   y_hatT = alpha (1 - g1 Phi(T)) Q2^T Q2 (y(T) - y_dT)
 *   p_hat  = g2 (p - dV)
 *   theta_hat = int g1 D_thetaV^T (V - J) + beta (1 - g1 Phi) D_thetaF^T F + g2 D_ythetaV^T (dV - p) dt
 */
template <ValueModel M>
HatTerms hat_terms(const ProblemSpec& spec, const PenaltyConfig& pen, const M& model, const ThetaVector& theta,
                   const Trajectory& y, const Trajectory& p, const ScalarTrajectory& J_t, const ScalarTrajectory& phi,
                   PhiTerminalConvention conv = PhiTerminalConvention::DerivedT,
                   Quadrature q = Quadrature::Trapezoid) {
  const auto nodes = closed_loop_nodes(spec, model, theta, y);
  detail::HatAssembly a = detail::assemble_hats(spec, pen, nodes, y, &p, J_t, phi, conv);
  const auto w = quadrature_weights(y.grid, q);
  a.hats.theta_hat = Vector::Zero(model.n_params());
  for (std::size_t k = 0; k < y.size(); ++k)
    a.hats.theta_hat += w[k] * model.theta_vjp(theta, y.grid[k], y.at(k), a.c[k], a.v[k]);
  return std::move(a.hats);
}

/// Per-member results kept for reporting. Under the Lobatto scheme the trajectories live on the
/// grid refined by midpoints.
struct MemberEvaluation {
  Trajectory y;
  Trajectory u;
  std::optional<Trajectory> p;
  ScalarTrajectory V;
  ScalarTrajectory J_t;
  double J = 0.0;
  PenaltyValues penalties;
  [[nodiscard]] double augmented() const { return J + penalties.value_gap + penalties.gradient_gap; }
};

struct EvaluationBundle {
  std::vector<MemberEvaluation> members;
  double objective = 0.0;
  double tikhonov = 0.0;
};

template <ValueModel M>
MemberEvaluation evaluate_member(const ProblemSpec& spec, const PenaltyConfig& pen, const M& model,
                                 const ThetaVector& theta, const Vector& y0, const TimeGrid& grid,
                                 const SolverOptions& opt, std::vector<ClosedLoopNode>* keep_nodes = nullptr) {
  MemberEvaluation me;
  const Quadrature q = quadrature_for(opt);
  me.y = integrate_closed_loop(spec, model, theta, y0, grid, opt);
  if (q == Quadrature::Simpson) {
    const ClosedLoopOperatorA<M> op(spec, model, theta);
    me.y = refine_midpoints(me.y, op.system().rhs);
  }
  NodeValues nv;
  std::vector<ClosedLoopNode> nodes;
  if (pen.gamma2 > 0.0 || keep_nodes) {
    nodes = closed_loop_nodes(spec, model, theta, me.y);
    nv = node_values(nodes, me.y, spec.m);
    if (pen.gamma2 > 0.0) me.p = integrate_adjoint(spec, nodes, me.y, opt);
  } else {
    nv = node_values(spec, model, theta, me.y);
  }
  me.u = nv.u;
  me.V = nv.V;
  me.J_t = cost_to_go(spec, me.y, me.u, q);
  me.J = me.J_t.front();
  me.penalties = penalty_values(pen, nv, me.J_t, me.p ? &*me.p : nullptr, q);
  if (keep_nodes) *keep_nodes = std::move(nodes);
  return me;
}

/// sum_i w_i J_eps(y_i, p_i, theta) + gamma_eps/2 |theta|^2, with per-member results.
template <ValueModel M>
std::pair<double, EvaluationBundle> ensemble_objective(const ProblemSpec& spec, const PenaltyConfig& pen,
                                                       const M& model, const ThetaVector& theta,
                                                       const EnsembleSet& ens, const TimeGrid& grid,
                                                       const LearningOptions& opt = {}) {
  EvaluationBundle b;
  b.members.resize(ens.size());
  parallel_for(
      ens.size(),
      [&](std::size_t i) {
        try {
          b.members[i] = evaluate_member(spec, pen, model, theta, ens.points[i], grid, opt.solver);
        } catch (const Error& e) {
          throw MemberError(i, e.what());
        }
      },
      opt.threads);
  for (std::size_t i = 0; i < ens.size(); ++i) b.objective += ens.weights[i] * b.members[i].augmented();
  b.tikhonov = 0.5 * pen.gamma_eps * theta.squaredNorm();
  b.objective += b.tikhonov;
  return {b.objective, std::move(b)};
}

/// Gradient of one member's augmented cost with respect to theta.
template <ValueModel M>
Vector member_gradient(const ProblemSpec& spec, const PenaltyConfig& pen, const M& model, const ThetaVector& theta,
                       const Vector& y0, const TimeGrid& grid, const LearningOptions& opt,
                       double* value = nullptr) {
  std::vector<ClosedLoopNode> nodes;
  const MemberEvaluation me = evaluate_member(spec, pen, model, theta, y0, grid, opt.solver, &nodes);
  if (value) *value = me.augmented();
  const Trajectory* p = me.p ? &*me.p : nullptr;
  const Quadrature q = quadrature_for(opt.solver);
  const TimeGrid& fine = me.y.grid;

  ScalarTrajectory gap(me.y.size());
  for (std::size_t k = 0; k < gap.size(); ++k) gap[k] = me.V[k] - me.J_t[k];
  const ScalarTrajectory phi = cumulative_integral(fine, gap, q);
  detail::HatAssembly a = detail::assemble_hats(spec, pen, nodes, me.y, p, me.J_t, phi, opt.phi_terminal);

  std::optional<Trajectory> kappa;
  if (pen.gamma2 > 0.0) kappa = integrate_costate_kappa(nodes, a.hats.p_hat, opt.solver);
  const Trajectory zeta = integrate_costate_zeta(spec, nodes, me.y, p, kappa ? &*kappa : nullptr, a.hats.y_hat,
                                                 a.hats.y_hatT, opt.solver);

  const auto w = quadrature_weights(fine, q);
  Vector grad = Vector::Zero(model.n_params());
  const double ib = 1.0 / spec.beta;
  for (std::size_t k = 0; k < me.y.size(); ++k) {
    const auto& nd = nodes[k];
    Vector s = nd.g.transpose() * zeta.at(k);
    if (kappa) s += jac_gtw(nd.dg, p->at(k)) * kappa->at(k);
    const Vector v = a.v[k] - ib * (nd.g * s);
    grad += w[k] * model.theta_vjp(theta, fine[k], me.y.at(k), a.c[k], v);
  }
  return grad;
}

struct ValueAndGradient {
  double value = 0.0;
  Vector gradient;
};

/// Objective and gradient; members run in parallel, reductions in member order.
template <ValueModel M>
ValueAndGradient ensemble_value_and_gradient(const ProblemSpec& spec, const PenaltyConfig& pen, const M& model,
                                             const ThetaVector& theta, const EnsembleSet& ens, const TimeGrid& grid,
                                             const LearningOptions& opt = {}) {
  std::vector<Vector> grads(ens.size());
  std::vector<double> values(ens.size());
  parallel_for(
      ens.size(),
      [&](std::size_t i) {
        try {
          grads[i] = member_gradient(spec, pen, model, theta, ens.points[i], grid, opt, &values[i]);
        } catch (const Error& e) {
          throw MemberError(i, e.what());
        }
      },
      opt.threads);
  ValueAndGradient out;
  out.gradient = pen.gamma_eps * theta;
  for (std::size_t i = 0; i < ens.size(); ++i) {
    out.gradient += ens.weights[i] * grads[i];
    out.value += ens.weights[i] * values[i];
  }
  out.value += 0.5 * pen.gamma_eps * theta.squaredNorm();
  return out;
}

template <ValueModel M>
Vector ensemble_gradient(const ProblemSpec& spec, const PenaltyConfig& pen, const M& model, const ThetaVector& theta,
                         const EnsembleSet& ens, const TimeGrid& grid, const LearningOptions& opt = {}) {
  return ensemble_value_and_gradient(spec, pen, model, theta, ens, grid, opt).gradient;
}

}  // namespace hjbfl
