/**
 * @file bilinear_benchmark.hpp
 * @brief Spectral Galerkin truncation of the bilinear heat equation
 *
 *   d/dt Y - Lap Y + (u1 chi1 + u2 chi2 + u3 chi3) Y = 0  on (0, 2 pi), Dirichlet,
 *
 * in the Laplacian eigenbasis phi_j(x) = sin(j x / 2) / sqrt(pi), lambda_j = j^2 / 4:
 *
 *   Y' + A Y + sum_i u_i M_i Y = 0,   (M_i)_jk = int_{Omega_i} phi_j phi_k dx.
 */
#pragma once

#include <filesystem>
#include <json.hpp>
#include <numbers>
#include <random>

#include "hjbfl/core_types.hpp"
#include "hjbfl/ode_solvers.hpp"

namespace hjbfl {

struct BilinearSpec {
  int n_modes = 10;
  Vector lambda;
  std::vector<Matrix> M;
  std::vector<std::pair<double, double>> subdomains;
  Vector Yd;
  Vector Ybar0;
  double T = 2.0;
  double beta = 0.01;
  double alpha = 0.25;

  [[nodiscard]] Matrix A() const { return lambda.asDiagonal(); }
};

inline const std::vector<std::pair<double, double>>& default_subdomains() {
  static const std::vector<std::pair<double, double>> s{{0.5, 1.0}, {2.0, 2.5}, {4.0, 4.5}};
  return s;
}

/// phi_j(x) = sin(j x / 2) / sqrt(pi), j >= 1.
inline double eigenfunction(int j, double x) { return std::sin(0.5 * j * x) / std::sqrt(std::numbers::pi); }

inline double eigenvalue(int j) { return 0.25 * j * j; }

/// (1/pi) int_a^b sin(j x/2) sin(k x/2) dx via sin sin = (cos((j-k)x/2) - cos((j+k)x/2)) / 2.
inline double mode_overlap(int j, int k, double a, double b) {
  const auto prim = [](int m, double x) { return m == 0 ? x : 2.0 * std::sin(0.5 * m * x) / m; };
  const double diff = prim(j - k, b) - prim(j - k, a);
  const double sum = prim(j + k, b) - prim(j + k, a);
  return (diff - sum) / (2.0 * std::numbers::pi);
}

/// (1/10) int_0^{2 pi} x^2 phi_j(x) dx, from int x^2 sin(a x) = -x^2 cos/a + 2 x sin/a^2 + 2 cos/a^3.
inline double desired_coefficient(int j) {
  const double a = 0.5 * j;
  const double pi = std::numbers::pi;
  const double c = (j % 2 == 0) ? 1.0 : -1.0;
  const double integral = -4.0 * pi * pi * c / a + 2.0 * (c - 1.0) / (a * a * a);
  return integral / (10.0 * std::sqrt(pi));
}

/// Coefficients of x^2/10; the target does not depend on time.
inline Vector project_desired(int n_modes, double /*t*/ = 0.0) {
  Vector y(n_modes);
  for (int j = 1; j <= n_modes; ++j) y[j - 1] = desired_coefficient(j);
  return y;
}

/// Default reference initial state: the projection of sin(x/2), i.e. sqrt(pi) e_1.
inline Vector default_reference_state(int n_modes) {
  Vector y = Vector::Zero(n_modes);
  y[0] = std::sqrt(std::numbers::pi);
  return y;
}

inline BilinearSpec assemble(int n_modes) {
  if (n_modes < 1) throw ConfigError("assemble: n_modes must be at least 1");
  BilinearSpec s;
  s.n_modes = n_modes;
  s.subdomains = default_subdomains();
  s.lambda.resize(n_modes);
  for (int j = 1; j <= n_modes; ++j) s.lambda[j - 1] = eigenvalue(j);
  for (const auto& [a, b] : s.subdomains) {
    Matrix Mi(n_modes, n_modes);
    for (int j = 1; j <= n_modes; ++j)
      for (int k = j; k <= n_modes; ++k) Mi(j - 1, k - 1) = Mi(k - 1, j - 1) = mode_overlap(j, k, a, b);
    s.M.push_back(std::move(Mi));
  }
  s.Yd = project_desired(n_modes);
  s.Ybar0 = default_reference_state(n_modes);
  return s;
}

/// f = -A y, g(y) = [-M_1 y, -M_2 y, -M_3 y], Q1 = Q2 = I; all second derivatives of f and g vanish.
inline ProblemSpec dynamics_callbacks(const BilinearSpec& b) {
  ProblemSpec s;
  const int n = b.n_modes;
  const int m = static_cast<int>(b.M.size());
  s.n = n;
  s.m = m;
  s.T = b.T;
  s.beta = b.beta;
  s.alpha = b.alpha;
  s.Q1 = Matrix::Identity(n, n);
  s.Q2 = Matrix::Identity(n, n);
  s.y_dT = b.Yd;
  const Vector Yd = b.Yd;
  const Vector lambda = b.lambda;
  const std::vector<Matrix> M = b.M;
  s.y_d = [Yd](double) { return Yd; };
  s.f = [lambda](double, const Vector& y) { return Vector(-(lambda.array() * y.array()).matrix()); };
  s.jac_f = [lambda](double, const Vector&) { return Matrix(-lambda.asDiagonal().toDenseMatrix()); };
  s.g = [M, n, m](double, const Vector& y) {
    Matrix g(n, m);
    for (int i = 0; i < m; ++i) g.col(i) = -(M[static_cast<std::size_t>(i)] * y);
    return g;
  };
  std::vector<Matrix> dg(static_cast<std::size_t>(n), Matrix(n, m));
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < m; ++i) dg[static_cast<std::size_t>(k)].col(i) = -M[static_cast<std::size_t>(i)].col(k);
  s.dg = [dg](double, const Vector&) { return dg; };
  s.validate();
  return s;
}

/**
 * Uniform samples from the closed ball of the given radius about `center`; the first
 * `train_count` members form the training split. Weights are uniform within each split.
 */
inline EnsembleSet generate_ensemble(const Vector& center, std::size_t total, double radius, std::uint64_t seed,
                                     std::size_t train_count) {
  if (train_count > total) throw ConfigError("generate_ensemble: train_count exceeds total");
  if (!(radius >= 0.0)) throw ConfigError("generate_ensemble: radius must be nonnegative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const auto n = center.size();
  EnsembleSet e;
  e.seed = seed;
  e.center = center;
  e.radius = radius;
  for (std::size_t i = 0; i < total; ++i) {
    Vector d(n);
    for (Eigen::Index k = 0; k < n; ++k) d[k] = normal(rng);
    const double r = radius * std::pow(unif(rng), 1.0 / static_cast<double>(n));
    e.points.push_back(center + r * d / d.norm());
    const bool train = i < train_count;
    e.tags.push_back(train ? SplitTag::Train : SplitTag::Validation);
    e.weights.push_back(1.0 / static_cast<double>(train ? train_count : total - train_count));
  }
  return e;
}

// ============================================================================
// Specialized costate
// ============================================================================

/**
 * The zeta equation written with the bilinear structure,
 *   -Z' + (A + sum F_i M_i + D_yF^T B_Y) Z = -D_yF^T B_K P + K + Y_hat,   Z(T) = alpha K(T) + Y_hatT,
 * with B_Y rows Y^T M_i and B_K rows K^T M_i. Inputs are node values of F, D_yF, Y, P and K.
 */
inline Trajectory bilinear_costate_zeta(const BilinearSpec& b, const Trajectory& y, const Trajectory& F,
                                        const std::vector<Matrix>& DyF, const Trajectory* p, const Trajectory* kappa,
                                        const Trajectory& y_hat, const Vector& y_hatT,
                                        LinearScheme scheme = LinearScheme::ImplicitEuler) {
  const std::size_t K = y.size();
  const Eigen::Index m = static_cast<Eigen::Index>(b.M.size());
  std::vector<Matrix> Bk(K);
  Trajectory s = y_hat;
  for (std::size_t k = 0; k < K; ++k) {
    const Vector yk = y.at(k);
    Matrix closed = b.A();
    Matrix BY(m, b.n_modes);
    for (Eigen::Index i = 0; i < m; ++i) {
      closed += F.at(k)[i] * b.M[static_cast<std::size_t>(i)];
      BY.row(i) = yk.transpose() * b.M[static_cast<std::size_t>(i)];
    }
    Bk[k] = -(closed + DyF[k].transpose() * BY);
    if (kappa) {
      const Vector kk = kappa->at(k);
      Matrix BK(m, b.n_modes);
      for (Eigen::Index i = 0; i < m; ++i) BK.row(i) = kk.transpose() * b.M[static_cast<std::size_t>(i)];
      s.set(k, s.at(k) - DyF[k].transpose() * (BK * p->at(k)) + kk);
    }
  }
  Vector terminal = y_hatT;
  if (kappa) terminal += b.alpha * kappa->at(K - 1);
  return solve_linear_backward(y.grid, Bk, s, terminal, scheme);
}

// ============================================================================
// Cache
// ============================================================================

inline nlohmann::json bilinear_to_json(const BilinearSpec& b) {
  using nlohmann::json;
  const auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  json j;
  j["n_modes"] = b.n_modes;
  j["lambda"] = vec(b.lambda);
  json Ms = json::array();
  for (const Matrix& Mi : b.M) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < Mi.rows(); ++r) rows.push_back(vec(Mi.row(r).transpose()));
    Ms.push_back(rows);
  }
  j["M"] = Ms;
  json sub = json::array();
  for (const auto& [a, c] : b.subdomains) sub.push_back({a, c});
  j["subdomains"] = sub;
  j["Yd"] = vec(b.Yd);
  j["Ybar0"] = vec(b.Ybar0);
  j["T"] = b.T;
  j["beta"] = b.beta;
  j["alpha"] = b.alpha;
  j["hash"] = hex64(fnv1a64(j.dump()));
  return j;
}

inline BilinearSpec bilinear_from_json(nlohmann::json j) {
  if (!j.contains("hash")) throw ConfigError("bilinear cache: missing content hash");
  const std::string stored = j["hash"].get<std::string>();
  j.erase("hash");
  if (hex64(fnv1a64(j.dump())) != stored) throw ConfigError("bilinear cache: content hash mismatch");
  const auto vec = [](const nlohmann::json& a) {
    const auto v = a.get<std::vector<double>>();
    return Vector(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  BilinearSpec b;
  b.n_modes = j["n_modes"].get<int>();
  b.lambda = vec(j["lambda"]);
  for (const auto& rows : j["M"]) {
    Matrix Mi(b.n_modes, b.n_modes);
    for (int r = 0; r < b.n_modes; ++r) Mi.row(r) = vec(rows[static_cast<std::size_t>(r)]).transpose();
    b.M.push_back(std::move(Mi));
  }
  for (const auto& ab : j["subdomains"]) b.subdomains.emplace_back(ab[0].get<double>(), ab[1].get<double>());
  b.Yd = vec(j["Yd"]);
  b.Ybar0 = vec(j["Ybar0"]);
  b.T = j["T"].get<double>();
  b.beta = j["beta"].get<double>();
  b.alpha = j["alpha"].get<double>();
  return b;
}

inline void save_bilinear(const std::string& path, const BilinearSpec& b) {
  const std::filesystem::path parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << bilinear_to_json(b).dump(1) << '\n';
}

inline BilinearSpec load_bilinear(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  return bilinear_from_json(nlohmann::json::parse(in));
}

/// Loads the cached assembly when it matches `n_modes`, otherwise assembles and writes it.
inline BilinearSpec assemble_cached(int n_modes, const std::string& path, bool force = false) {
  if (!force && std::filesystem::exists(path)) {
    BilinearSpec b = load_bilinear(path);
    if (b.n_modes == n_modes) return b;
  }
  BilinearSpec b = assemble(n_modes);
  save_bilinear(path, b);
  return b;
}

}  // namespace hjbfl
