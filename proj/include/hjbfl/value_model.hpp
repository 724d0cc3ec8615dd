/**
 * @file value_model.hpp
 * @brief Behavioral contract shared by the parametrized value-function families
 *        and the feedback law they induce.
 */
#pragma once

#include <concepts>

#include "hjbfl/core_types.hpp"

namespace hjbfl {

/// Value, y-gradient and (optionally) y-Hessian at one point (t, y).
struct ModelEval {
  double value = 0.0;
  Vector grad_y;
  Matrix hess_yy;
};

/// Terminal cost alpha/2 |Q2 (y - y_dT)|^2; every model reproduces it at t = T.
struct TerminalHead {
  double T = 1.0;
  double alpha = 1.0;
  Matrix Q2;
  Vector y_dT;
  Matrix Q2tQ2;

  TerminalHead() = default;
  explicit TerminalHead(const ProblemSpec& spec)
      : T(spec.T), alpha(spec.alpha), Q2(spec.Q2), y_dT(spec.y_dT), Q2tQ2(spec.Q2tQ2()) {}

  [[nodiscard]] double value(const Vector& y) const {
    return 0.5 * alpha * (Q2 * (y - y_dT)).squaredNorm();
  }
  [[nodiscard]] Vector grad(const Vector& y) const { return alpha * (Q2tQ2 * (y - y_dT)); }
  [[nodiscard]] Matrix hess() const { return alpha * Q2tQ2; }
};

// clang-format off
template <class M>
concept ValueModel = requires(const M& model, const ThetaVector& theta, double t, const Vector& y,
                              double c, const Vector& v, bool with_hess) {
  { model.n_params() } -> std::convertible_to<Eigen::Index>;
  { model.state_dim() } -> std::convertible_to<int>;
  { model.head() } -> std::convertible_to<const TerminalHead&>;
  { model.evaluate(theta, t, y, with_hess) } -> std::same_as<ModelEval>;
  { model.grad_theta(theta, t, y) } -> std::same_as<Vector>;
  { model.grad_y_theta(theta, t, y) } -> std::same_as<Matrix>;
  // Gradient in theta of c * V(t,y) + v . grad_y V(t,y).
  { model.theta_vjp(theta, t, y, c, v) } -> std::same_as<Vector>;
};
// clang-format on

/// Adds the single-output accessors on top of `evaluate`.
template <class Derived>
class ValueModelBase {
 public:
  [[nodiscard]] double value(const ThetaVector& theta, double t, const Vector& y) const {
    return self().evaluate(theta, t, y, false).value;
  }
  [[nodiscard]] Vector grad_y(const ThetaVector& theta, double t, const Vector& y) const {
    return self().evaluate(theta, t, y, false).grad_y;
  }
  [[nodiscard]] Matrix hess_yy(const ThetaVector& theta, double t, const Vector& y) const {
    return self().evaluate(theta, t, y, true).hess_yy;
  }
  [[nodiscard]] Vector grad_theta(const ThetaVector& theta, double t, const Vector& y) const {
    return self().theta_vjp(theta, t, y, 1.0, Vector::Zero(self().state_dim()));
  }
  [[nodiscard]] Matrix grad_y_theta(const ThetaVector& theta, double t, const Vector& y) const {
    const int n = self().state_dim();
    Matrix out(n, self().n_params());
    for (int k = 0; k < n; ++k) out.row(k) = self().theta_vjp(theta, t, y, 0.0, Vector::Unit(n, k)).transpose();
    return out;
  }

 private:
  [[nodiscard]] const Derived& self() const { return static_cast<const Derived&>(*this); }
};

// ============================================================================
// Feedback law F = -(1/beta) g^T grad_y V
// ============================================================================

inline Vector feedback_from_grad(const ProblemSpec& spec, const Matrix& g, const Vector& grad_y) {
  return -(1.0 / spec.beta) * (g.transpose() * grad_y);
}

/// D_y F = -(1/beta) [ D_y(g^T w)|_{w = grad_y V} + g^T hess_yy V ].
inline Matrix feedback_jac_y(const ProblemSpec& spec, const Matrix& g, const std::vector<Matrix>& dg,
                             const Vector& grad_y, const Matrix& hess_yy) {
  return -(1.0 / spec.beta) * (jac_gtw(dg, grad_y) + g.transpose() * hess_yy);
}

template <ValueModel M>
Vector feedback(const ProblemSpec& spec, const M& model, const ThetaVector& theta, double t, const Vector& y) {
  return feedback_from_grad(spec, spec.g(t, y), model.evaluate(theta, t, y, false).grad_y);
}

template <ValueModel M>
Matrix feedback_jacobian_y(const ProblemSpec& spec, const M& model, const ThetaVector& theta, double t,
                           const Vector& y) {
  const ModelEval e = model.evaluate(theta, t, y, true);
  return feedback_jac_y(spec, spec.g(t, y), spec.dg(t, y), e.grad_y, e.hess_yy);
}

/// D_theta F, m x N_theta.
template <ValueModel M>
Matrix feedback_jacobian_theta(const ProblemSpec& spec, const M& model, const ThetaVector& theta, double t,
                               const Vector& y) {
  return -(1.0 / spec.beta) * (spec.g(t, y).transpose() * model.grad_y_theta(theta, t, y));
}

/// D_theta F^T w computed as one reverse sweep.
template <ValueModel M>
Vector feedback_theta_vjp(const ProblemSpec& spec, const M& model, const ThetaVector& theta, double t,
                          const Vector& y, const Vector& w) {
  const Vector v = -(1.0 / spec.beta) * (spec.g(t, y) * w);
  return model.theta_vjp(theta, t, y, 0.0, v);
}

}  // namespace hjbfl
