#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <numbers>

#include "hjbfl/bilinear_benchmark.hpp"
#include "hjbfl/learning.hpp"
#include "hjbfl/resnet_model.hpp"
#include "test_support.hpp"

using namespace hjbfl;
using namespace hjbfl::test;

namespace {

constexpr double kPi = std::numbers::pi;

template <class F>
double quad(F f, double a, double b) {
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 15, 1e-14);
}

}  // namespace

TEST(Bilinear, Eigenpairs) {
  EXPECT_DOUBLE_EQ(eigenvalue(1), 0.25);
  EXPECT_DOUBLE_EQ(eigenvalue(2), 1.0);
  const BilinearSpec b = assemble(10);
  for (int j = 1; j <= 10; ++j) {
    EXPECT_NEAR(eigenfunction(j, 0.0), 0.0, 1e-15);
    EXPECT_NEAR(eigenfunction(j, 2.0 * kPi), 0.0, 1e-14);
    // -phi'' = lambda phi, checked by a fourth-order stencil at a few interior points.
    for (double x : {0.3, 1.7, 4.2}) {
      const double h = 1e-3;
      const double d2 = (-eigenfunction(j, x + 2 * h) + 16 * eigenfunction(j, x + h) - 30 * eigenfunction(j, x) +
                         16 * eigenfunction(j, x - h) - eigenfunction(j, x - 2 * h)) /
                        (12 * h * h);
      EXPECT_NEAR(-d2, eigenvalue(j) * eigenfunction(j, x), 1e-6);
    }
    for (int k = 1; k <= 10; ++k) EXPECT_NEAR(mode_overlap(j, k, 0.0, 2.0 * kPi), j == k ? 1.0 : 0.0, 1e-14);
    if (j > 1) EXPECT_GT(b.lambda[j - 1], b.lambda[j - 2]);
  }
  EXPECT_GT(b.lambda.minCoeff(), 0.0);
}

TEST(Bilinear, ActuatorMatricesClosedFormVersusQuadrature) {
  const BilinearSpec b = assemble(10);
  ASSERT_EQ(b.M.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto [lo, hi] = b.subdomains[i];
    EXPECT_LE((b.M[i] - b.M[i].transpose()).cwiseAbs().maxCoeff(), 1e-12);
    for (int j = 1; j <= 10; ++j) {
      const double diag = (1.0 / kPi) * ((hi / 2 - std::sin(j * hi) / (2.0 * j)) - (lo / 2 - std::sin(j * lo) / (2.0 * j)));
      EXPECT_NEAR(b.M[i](j - 1, j - 1), diag, 1e-14);
      for (int k = 1; k <= 10; ++k) {
        const double q = quad([&](double x) { return eigenfunction(j, x) * eigenfunction(k, x); }, lo, hi);
        EXPECT_NEAR(b.M[i](j - 1, k - 1), q, 1e-12);
      }
    }
  }
}

TEST(Bilinear, DesiredStateProjection) {
  const Vector a = project_desired(10, 0.0), c = project_desired(10, 1.7);
  EXPECT_TRUE(a == c);
  for (int j = 1; j <= 10; ++j) {
    const double q = quad([&](double x) { return 0.1 * x * x * eigenfunction(j, x); }, 0.0, 2.0 * kPi);
    EXPECT_NEAR(a[j - 1], q, 1e-12 * (1.0 + std::abs(q)));
  }
  const auto l2_residual = [](int n) {
    const Vector yd = project_desired(n);
    return quad(
        [&](double x) {
          double s = 0.1 * x * x;
          for (int j = 1; j <= n; ++j) s -= yd[j - 1] * eigenfunction(j, x);
          return s * s;
        },
        0.0, 2.0 * kPi);
  };
  EXPECT_LT(l2_residual(10), l2_residual(5));
}

TEST(Bilinear, ReferenceStateIsProjectionOfFirstMode) {
  const Vector y = default_reference_state(6);
  for (int j = 1; j <= 6; ++j) {
    const double q = quad([&](double x) { return std::sin(0.5 * x) * eigenfunction(j, x); }, 0.0, 2.0 * kPi);
    EXPECT_NEAR(y[j - 1], q, 1e-12);
  }
}

TEST(Bilinear, FreeDecay) {
  const BilinearSpec b = assemble(6);
  const ProblemSpec spec = dynamics_callbacks(b);
  EXPECT_EQ(spec.T, 2.0);
  EXPECT_EQ(spec.beta, 0.01);
  EXPECT_EQ(spec.alpha, 0.25);
  const TimeGrid grid(spec.T, 200);
  const Vector y0 = Vector::LinSpaced(6, 1.0, -0.5);
  const Trajectory y = integrate_open_loop(spec, Trajectory(grid, 3), y0);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const Vector exact = (y0.array() * (-b.lambda.array() * grid[k]).exp()).matrix();
    EXPECT_LE((y.at(k) - exact).norm(), 1e-9);
    EXPECT_LE(y.at(k).norm(), prev);
    prev = y.at(k).norm();
  }
}

TEST(Bilinear, ControlOperatorTranspose) {
  const BilinearSpec b = assemble(5);
  const ProblemSpec spec = dynamics_callbacks(b);
  std::mt19937_64 rng(3);
  const Vector y = random_vector(rng, 5), p = random_vector(rng, 5);
  const Vector gtp = spec.g(0.0, y).transpose() * p;
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(gtp[i], -(b.M[i] * y).dot(p), 1e-14);
    const auto pairing = [&](const Vector& u) { return Vector{{(spec.g(0.0, y) * u).dot(p)}}; };
    const Vector e = Vector::Unit(3, i);
    EXPECT_NEAR(central_diff(pairing, Vector::Zero(3), e, 1e-4)[0], gtp[i], 1e-12);
  }
  // dg[k] is the derivative of g along y_k.
  const Vector d = random_unit(rng, 5);
  const auto gv = [&](const Vector& yy) { return Vector(spec.g(0.0, yy).reshaped()); };
  Matrix dir = Matrix::Zero(5, 3);
  const auto dg = spec.dg(0.0, y);
  for (int k = 0; k < 5; ++k) dir += d[k] * dg[static_cast<std::size_t>(k)];
  EXPECT_LE((central_diff(gv, y, d, 1e-5) - dir.reshaped()).norm(), 1e-10);
}

TEST(Bilinear, EnsembleSampling) {
  const Vector c = default_reference_state(10);
  const EnsembleSet e = generate_ensemble(c, 130, 1.0, 42, 30);
  ASSERT_EQ(e.size(), 130u);
  const EnsembleSet tr = e.split(SplitTag::Train), va = e.split(SplitTag::Validation);
  EXPECT_EQ(tr.size(), 30u);
  EXPECT_EQ(va.size(), 100u);
  for (double w : tr.weights) EXPECT_DOUBLE_EQ(w, 1.0 / 30.0);
  for (const Vector& p : e.points) EXPECT_LE((p - c).norm(), 1.0 + 1e-15);
  const EnsembleSet again = generate_ensemble(c, 130, 1.0, 42, 30);
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_TRUE(e.points[i] == again.points[i]);
  EXPECT_THROW((void)generate_ensemble(c, 10, 1.0, 1, 11), ConfigError);

  // Radius of a uniform sample in the n-ball: mean n/(n+1), variance n/(n+2) - (n/(n+1))^2.
  const double n = 10.0;
  const std::size_t N = 20000;
  const EnsembleSet big = generate_ensemble(c, N, 1.0, 7, N);
  double mean = 0.0;
  for (const Vector& p : big.points) mean += (p - c).norm();
  mean /= static_cast<double>(N);
  const double mu = n / (n + 1.0), sigma = std::sqrt(n / (n + 2.0) - mu * mu);
  EXPECT_LE(std::abs(mean - mu), 3.0 * sigma / std::sqrt(static_cast<double>(N)));
}

TEST(Bilinear, CacheRoundTripAndIntegrity) {
  const BilinearSpec b = assemble(7);
  const std::string path = ::testing::TempDir() + "/bilinear_cache.json";
  save_bilinear(path, b);
  const BilinearSpec c = load_bilinear(path);
  EXPECT_TRUE(b.lambda == c.lambda);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(b.M[i] == c.M[i]);
  EXPECT_TRUE(b.Yd == c.Yd);
  EXPECT_TRUE(b.Ybar0 == c.Ybar0);
  EXPECT_EQ(bilinear_to_json(b)["hash"], bilinear_to_json(c)["hash"]);

  nlohmann::json j = bilinear_to_json(b);
  j["lambda"][0] = 0.3;
  EXPECT_THROW((void)bilinear_from_json(j), ConfigError);

  const BilinearSpec d = assemble_cached(4, path);
  EXPECT_EQ(d.n_modes, 4);
  EXPECT_EQ(load_bilinear(path).n_modes, 4);
  std::remove(path.c_str());
}

TEST(Bilinear, SpecializedCostateMatchesGeneric) {
  const BilinearSpec b = assemble(4);
  const ProblemSpec spec = dynamics_callbacks(b);
  const ResidualNetModel model({5, 12, 1}, Activation::SinCos, TerminalHead(spec));
  const ThetaVector theta = model.init_theta(9);
  const TimeGrid grid(spec.T, 100);
  const Vector y0 = b.Ybar0 + Vector{{0.1, -0.2, 0.3, 0.05}};
  const Trajectory y = integrate_closed_loop(spec, model, theta, y0, grid);
  const auto nodes = closed_loop_nodes(spec, model, theta, y);
  const Trajectory p = integrate_adjoint(spec, nodes, y);
  std::mt19937_64 rng(11);
  Trajectory y_hat(grid, 4), p_hat(grid, 4);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    y_hat.set(k, random_vector(rng, 4));
    p_hat.set(k, random_vector(rng, 4));
  }
  const Vector y_hatT = random_vector(rng, 4);
  const Trajectory kappa = integrate_costate_kappa(nodes, p_hat);
  const Trajectory generic = integrate_costate_zeta(spec, nodes, y, &p, &kappa, y_hat, y_hatT);

  Trajectory F(grid, 3);
  std::vector<Matrix> DyF;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    F.set(k, nodes[k].F);
    DyF.push_back(nodes[k].DyF);
  }
  const Trajectory special = bilinear_costate_zeta(b, y, F, DyF, &p, &kappa, y_hat, y_hatT);
  EXPECT_LE((generic.values - special.values).cwiseAbs().maxCoeff(), 1e-10 * (1.0 + generic.values.norm()));
}
