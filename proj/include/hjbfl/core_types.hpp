/**
 * @file core_types.hpp
 * @brief Problem description, time grids, trajectory containers and shared quadrature.
 */
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hjbfl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ThetaVector = Eigen::VectorXd;

// ============================================================================
// Errors
// ============================================================================

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or construction arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Mismatched inputs (grid sizes, layouts).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite intermediate value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Requested feature exceeds what the implementation supports.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

/// Time stepper failure. Carries the index of the failing step.
class SolverError : public Error {
 public:
  SolverError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  [[nodiscard]] std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// State norm exceeded the blowup monitor.
class DivergenceError : public SolverError {
 public:
  using SolverError::SolverError;
};

// ============================================================================
// Problem description
// ============================================================================

/**
 * @brief Control-affine finite-horizon tracking problem
 *
 *   min  1/2 int_0^T |Q1 (y - y_d(t))|^2 + beta |u|^2 dt + alpha/2 |Q2 (y(T) - y_dT)|^2
 *   s.t. y' = f(t, y) + g(t, y) u.
 *
 * Derivative callbacks use the following conventions:
 *  - jac_f(t,y)        : n x n, entry (i,k) = d f_i / d y_k
 *  - dg(t,y)           : n matrices of size n x m, dg[k] = d g / d y_k
 *  - hess_pf(t,y,p)    : n x n Hessian of y -> p . f(t,y)
 *  - hess_pgu(t,y,p,u) : n x n Hessian of y -> p . g(t,y) u
 * The second-derivative callbacks may be left empty when they vanish identically.
 */
struct ProblemSpec {
  int n = 0;
  int m = 0;
  double T = 1.0;
  double beta = 1.0;
  double alpha = 1.0;
  Matrix Q1;
  Matrix Q2;
  std::function<Vector(double)> y_d;
  Vector y_dT;

  std::function<Vector(double, const Vector&)> f;
  std::function<Matrix(double, const Vector&)> jac_f;
  std::function<Matrix(double, const Vector&)> g;
  std::function<std::vector<Matrix>(double, const Vector&)> dg;
  std::function<Matrix(double, const Vector&, const Vector&)> hess_pf;
  std::function<Matrix(double, const Vector&, const Vector&, const Vector&)> hess_pgu;

  [[nodiscard]] Matrix Q1tQ1() const { return Q1.transpose() * Q1; }
  [[nodiscard]] Matrix Q2tQ2() const { return Q2.transpose() * Q2; }

  /// Throws ConfigError when a structural invariant is violated.
  void validate() const {
    if (n < 1 || m < 1) throw ConfigError("ProblemSpec: dimensions must be positive");
    if (!(T > 0.0)) throw ConfigError("ProblemSpec: horizon T must be positive");
    if (!(beta > 0.0)) throw ConfigError("ProblemSpec: beta must be positive");
    if (!(alpha >= 0.0)) throw ConfigError("ProblemSpec: alpha must be nonnegative");
    if (!f || !jac_f || !g || !dg || !y_d) throw ConfigError("ProblemSpec: missing dynamics callback");
    if (y_dT.size() != n) throw ConfigError("ProblemSpec: y_dT has wrong size");
    check_weight(Q1, "Q1");
    check_weight(Q2, "Q2");
  }

 private:
  void check_weight(const Matrix& Q, const char* name) const {
    if (Q.rows() != n || Q.cols() != n) throw ConfigError(std::string("ProblemSpec: ") + name + " must be n x n");
    const double scale = 1.0 + Q.cwiseAbs().maxCoeff();
    if ((Q - Q.transpose()).cwiseAbs().maxCoeff() > 1e-14 * scale)
      throw ConfigError(std::string("ProblemSpec: ") + name + " is not symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> es(Q, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-12)
      throw ConfigError(std::string("ProblemSpec: ") + name + " is not positive semidefinite");
  }
};

/// Row k of M(u) = D_y [g(t,y) u]: (i,k) = sum_j d_k g_ij u_j.
inline Matrix jac_gu(const std::vector<Matrix>& dg, const Vector& u) {
  const auto n = static_cast<Eigen::Index>(dg.size());
  Matrix out(n, n);
  for (Eigen::Index k = 0; k < n; ++k) out.col(k) = dg[static_cast<std::size_t>(k)] * u;
  return out;
}

/// D_y [g(t,y)^T w]: m x n, entry (j,k) = sum_i d_k g_ij w_i.
inline Matrix jac_gtw(const std::vector<Matrix>& dg, const Vector& w) {
  const auto n = static_cast<Eigen::Index>(dg.size());
  const Eigen::Index m = n > 0 ? dg.front().cols() : 0;
  Matrix out(m, n);
  for (Eigen::Index k = 0; k < n; ++k) out.col(k) = dg[static_cast<std::size_t>(k)].transpose() * w;
  return out;
}

// ============================================================================
// Time grid
// ============================================================================

class TimeGrid {
 public:
  TimeGrid() = default;

  TimeGrid(double T, std::size_t n_steps) : T_(T), n_steps_(n_steps) {
    if (!(T > 0.0) || !std::isfinite(T)) throw ConfigError("TimeGrid: horizon must be positive and finite");
    if (n_steps < 1) throw ConfigError("TimeGrid: need at least one step");
    nodes_.resize(n_steps + 1);
    for (std::size_t k = 0; k <= n_steps; ++k)
      nodes_[k] = T * static_cast<double>(k) / static_cast<double>(n_steps);
    nodes_.back() = T;
  }

  [[nodiscard]] double horizon() const noexcept { return T_; }
  [[nodiscard]] std::size_t n_steps() const noexcept { return n_steps_; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
  [[nodiscard]] double spacing() const noexcept { return T_ / static_cast<double>(n_steps_); }
  [[nodiscard]] double operator[](std::size_t k) const { return nodes_[k]; }
  [[nodiscard]] const std::vector<double>& nodes() const noexcept { return nodes_; }

  /// Composite trapezoid weights.
  [[nodiscard]] std::vector<double> trapezoid_weights() const {
    std::vector<double> w(size(), spacing());
    w.front() *= 0.5;
    w.back() *= 0.5;
    return w;
  }

  friend bool operator==(const TimeGrid& a, const TimeGrid& b) {
    return a.T_ == b.T_ && a.n_steps_ == b.n_steps_;
  }

 private:
  double T_ = 0.0;
  std::size_t n_steps_ = 0;
  std::vector<double> nodes_;
};

inline TimeGrid make_uniform_grid(double T, std::size_t n_steps) { return TimeGrid(T, n_steps); }

// ============================================================================
// Trajectories
// ============================================================================

/// Node values of a time-dependent vector on a TimeGrid (one row per node).
struct Trajectory {
  TimeGrid grid;
  RowMatrix values;

  Trajectory() = default;
  Trajectory(TimeGrid g, Eigen::Index dim)
      : grid(std::move(g)), values(RowMatrix::Zero(static_cast<Eigen::Index>(grid.size()), dim)) {}

  [[nodiscard]] Eigen::Index dim() const noexcept { return values.cols(); }
  [[nodiscard]] std::size_t size() const noexcept { return static_cast<std::size_t>(values.rows()); }
  [[nodiscard]] Vector at(std::size_t k) const { return values.row(static_cast<Eigen::Index>(k)).transpose(); }
  void set(std::size_t k, const Vector& v) { values.row(static_cast<Eigen::Index>(k)) = v.transpose(); }
  [[nodiscard]] bool all_finite() const { return values.allFinite(); }
};

using StateTrajectory = Trajectory;
using AdjointTrajectory = Trajectory;
using ControlTrajectory = Trajectory;
using CostateTrajectory = Trajectory;

/// Scalar node function on the grid.
using ScalarTrajectory = std::vector<double>;

inline void require_same_grid(const TimeGrid& a, const TimeGrid& b, const char* what) {
  if (!(a == b)) throw ContractError(std::string(what) + ": trajectories live on different grids");
}

// ============================================================================
// Quadrature
// ============================================================================

/// Composite trapezoid rule for node values.
inline double trapezoid(const TimeGrid& grid, const ScalarTrajectory& v) {
  if (v.size() != grid.size()) throw ContractError("trapezoid: size mismatch");
  const double h = grid.spacing();
  double s = 0.5 * (v.front() + v.back());
  for (std::size_t k = 1; k + 1 < v.size(); ++k) s += v[k];
  return h * s;
}

/// L2(0,T) inner product of two trajectories by trapezoid rule.
inline double l2_inner(const Trajectory& a, const Trajectory& b) {
  require_same_grid(a.grid, b.grid, "l2_inner");
  ScalarTrajectory v(a.size());
  for (std::size_t k = 0; k < v.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    v[k] = a.values.row(i).dot(b.values.row(i));
  }
  return trapezoid(a.grid, v);
}

inline double l2_norm_sq(const Trajectory& a) { return l2_inner(a, a); }

enum class Quadrature { Trapezoid, Simpson };

/// Node weights of the composite trapezoid or Simpson rule; Simpson needs an even step count.
inline std::vector<double> quadrature_weights(const TimeGrid& grid, Quadrature q) {
  if (q == Quadrature::Trapezoid) return grid.trapezoid_weights();
  if (grid.n_steps() % 2 != 0) throw ContractError("Simpson rule needs an even step count");
  const double h = grid.spacing();
  std::vector<double> w(grid.size());
  for (std::size_t k = 0; k < w.size(); ++k) w[k] = (k % 2 == 1 ? 4.0 : 2.0) * h / 3.0;
  w.front() = w.back() = h / 3.0;
  return w;
}

inline double integrate(const TimeGrid& grid, const ScalarTrajectory& v, Quadrature q) {
  if (q == Quadrature::Trapezoid) return trapezoid(grid, v);
  if (v.size() != grid.size()) throw ContractError("integrate: size mismatch");
  const auto w = quadrature_weights(grid, q);
  double s = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) s += w[k] * v[k];
  return s;
}

// ============================================================================
// Ensembles and penalties
// ============================================================================

enum class SplitTag { Train, Validation };

inline const char* to_string(SplitTag tag) { return tag == SplitTag::Train ? "train" : "validation"; }

struct EnsembleSet {
  std::vector<Vector> points;
  std::vector<double> weights;
  std::vector<SplitTag> tags;
  std::uint64_t seed = 0;
  Vector center;
  double radius = 0.0;

  [[nodiscard]] std::size_t size() const noexcept { return points.size(); }

  /// Members with the requested tag, weights renormalized to sum to one.
  [[nodiscard]] EnsembleSet split(SplitTag tag) const {
    EnsembleSet out;
    out.seed = seed;
    out.center = center;
    out.radius = radius;
    double total = 0.0;
    for (std::size_t i = 0; i < size(); ++i)
      if (tags[i] == tag) {
        out.points.push_back(points[i]);
        out.weights.push_back(weights[i]);
        out.tags.push_back(tag);
        total += weights[i];
      }
    for (double& w : out.weights) w /= total;
    return out;
  }

  void validate() const {
    if (weights.size() != points.size() || tags.size() != points.size())
      throw ContractError("EnsembleSet: inconsistent member arrays");
    double train_sum = 0.0;
    bool any_train = false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (!(weights[i] > 0.0)) throw ConfigError("EnsembleSet: weights must be positive");
      if (tags[i] == SplitTag::Train) {
        train_sum += weights[i];
        any_train = true;
      }
    }
    if (any_train && std::abs(train_sum - 1.0) > 1e-12)
      throw ConfigError("EnsembleSet: training weights must sum to one");
  }
};

/// Builds a single-tag ensemble with uniform weights.
inline EnsembleSet uniform_ensemble(std::vector<Vector> points, SplitTag tag = SplitTag::Train) {
  EnsembleSet e;
  const double w = 1.0 / static_cast<double>(points.size());
  e.points = std::move(points);
  e.weights.assign(e.points.size(), w);
  e.tags.assign(e.points.size(), tag);
  return e;
}

struct PenaltyConfig {
  double gamma1 = 0.0;
  double gamma2 = 0.0;
  double gamma_eps = 0.0;

  void validate() const {
    if (!(gamma1 >= 0.0) || !(gamma2 >= 0.0) || !(gamma_eps >= 0.0))
      throw ConfigError("PenaltyConfig: penalty weights must be nonnegative");
  }
};

// ============================================================================
// Content hashing
// ============================================================================

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(const std::string& bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// ============================================================================
// CSV persistence
// ============================================================================

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

/// Header `t,<comp_0>,...`, one row per node, 17 significant digits.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj, const std::string& prefix = "x") {
  os << "t";
  for (Eigen::Index j = 0; j < traj.dim(); ++j) os << ',' << prefix << '_' << j;
  os << '\n';
  for (std::size_t k = 0; k < traj.size(); ++k) {
    os << format_double(traj.grid[k]);
    for (Eigen::Index j = 0; j < traj.dim(); ++j)
      os << ',' << format_double(traj.values(static_cast<Eigen::Index>(k), j));
    os << '\n';
  }
}

inline void write_trajectory_csv(const std::string& path, const Trajectory& traj, const std::string& prefix = "x") {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_trajectory_csv(os, traj, prefix);
}

/// Reads a trajectory written by write_trajectory_csv. The grid is rebuilt from
/// the first and last time stamps and the row count.
inline Trajectory read_trajectory_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ContractError("trajectory CSV: empty input");
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (!rows.empty() && row.size() != rows.front().size()) throw ContractError("trajectory CSV: ragged rows");
    rows.push_back(std::move(row));
  }
  if (rows.size() < 2) throw ContractError("trajectory CSV: need at least two nodes");
  const auto dim = static_cast<Eigen::Index>(rows.front().size() - 1);
  Trajectory traj(TimeGrid(rows.back().front(), rows.size() - 1), dim);
  for (std::size_t k = 0; k < rows.size(); ++k)
    for (Eigen::Index j = 0; j < dim; ++j)
      traj.values(static_cast<Eigen::Index>(k), j) = rows[k][static_cast<std::size_t>(j) + 1];
  return traj;
}

inline Trajectory read_trajectory_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path);
  return read_trajectory_csv(is);
}

}  // namespace hjbfl
