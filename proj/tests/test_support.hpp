#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "hjbfl/core_types.hpp"

namespace hjbfl::test {

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

inline Vector random_unit(std::mt19937_64& rng, Eigen::Index n) {
  Vector v = random_vector(rng, n);
  return v / v.norm();
}

inline double rel_err(double a, double b) {
  const double s = std::max(std::abs(a), std::abs(b));
  return s == 0.0 ? 0.0 : std::abs(a - b) / s;
}

inline double rel_err(const Matrix& a, const Matrix& b) {
  const double s = std::max(a.norm(), b.norm());
  return s == 0.0 ? 0.0 : (a - b).norm() / s;
}

/// Central difference of a vector-valued map along direction d.
inline Vector central_diff(const std::function<Vector(const Vector&)>& f, const Vector& x, const Vector& d,
                           double h) {
  return (f(x + h * d) - f(x - h * d)) / (2.0 * h);
}

/// Pendulum-like two-state system with one nonlinear control channel:
///   f = (y2, -sin y1 - 0.1 y2),  g = (0.3 sin y2, 1 + 0.5 y1^2)^T.
inline ProblemSpec toy_problem() {
  ProblemSpec s;
  s.n = 2;
  s.m = 1;
  s.T = 1.0;
  s.beta = 0.1;
  s.alpha = 1.0;
  s.Q1 = Matrix::Identity(2, 2);
  s.Q2 = Matrix::Identity(2, 2);
  s.y_d = [](double t) { return Vector{{0.5 * std::sin(t), 0.0}}; };
  s.y_dT = Vector{{0.5 * std::sin(1.0), 0.0}};
  s.f = [](double, const Vector& y) { return Vector{{y[1], -std::sin(y[0]) - 0.1 * y[1]}}; };
  s.jac_f = [](double, const Vector& y) { return Matrix{{0.0, 1.0}, {-std::cos(y[0]), -0.1}}; };
  s.g = [](double, const Vector& y) {
    Matrix g(2, 1);
    g << 0.3 * std::sin(y[1]), 1.0 + 0.5 * y[0] * y[0];
    return g;
  };
  s.dg = [](double, const Vector& y) {
    Matrix d0(2, 1), d1(2, 1);
    d0 << 0.0, y[0];
    d1 << 0.3 * std::cos(y[1]), 0.0;
    return std::vector<Matrix>{d0, d1};
  };
  s.hess_pf = [](double, const Vector& y, const Vector& p) {
    Matrix h = Matrix::Zero(2, 2);
    h(0, 0) = p[1] * std::sin(y[0]);
    return h;
  };
  s.hess_pgu = [](double, const Vector& y, const Vector& p, const Vector& u) {
    Matrix h = Matrix::Zero(2, 2);
    h(0, 0) = u[0] * p[1];
    h(1, 1) = -0.3 * u[0] * p[0] * std::sin(y[1]);
    return h;
  };
  return s;
}

}  // namespace hjbfl::test
