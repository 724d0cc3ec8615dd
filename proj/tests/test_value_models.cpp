#include <gtest/gtest.h>

#include "hjbfl/activation.hpp"
#include "hjbfl/partition_model.hpp"
#include "hjbfl/resnet_model.hpp"
#include "test_support.hpp"

using namespace hjbfl;
using test::rel_err;

namespace {

ProblemSpec shifted_problem() {
  ProblemSpec s = test::toy_problem();
  s.alpha = 0.7;
  s.Q2 = Matrix{{1.0, 0.2}, {0.2, 0.5}};
  s.y_dT = Vector{{0.3, -0.4}};
  return s;
}

/// Relative error tolerant of tiny reference values.
double rel_or_abs(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

template <class Model>
void check_model_derivatives(const Model& model, const ThetaVector& theta, double t, const Vector& y,
                             std::mt19937_64& rng) {
  const int n = model.state_dim();
  const ModelEval e = model.evaluate(theta, t, y, true);
  const double h = 1e-4;

  // Fourth-order central differences keep truncation error well below the tolerance.
  const auto fd4 = [&](auto&& f, const Vector& e) {
    using R = decltype(f(y));
    const R out = (8.0 * (f(y + h * e) - f(y - h * e)) - (f(y + 2 * h * e) - f(y - 2 * h * e))) / (12.0 * h);
    return out;
  };
  for (int k = 0; k < n; ++k) {
    const Vector ek = Vector::Unit(n, k);
    const double fd = fd4([&](const Vector& z) { return model.value(theta, t, z); }, ek);
    EXPECT_LT(rel_or_abs(e.grad_y[k], fd), 1e-6) << "grad_y component " << k;
    const Vector fdg = fd4([&](const Vector& z) -> Vector { return model.grad_y(theta, t, z); }, ek);
    for (int l = 0; l < n; ++l) EXPECT_LT(rel_or_abs(e.hess_yy(l, k), fdg[l]), 1e-6) << "hess " << l << k;
  }
  EXPECT_LT((e.hess_yy - e.hess_yy.transpose()).cwiseAbs().maxCoeff(), 1e-10);

  const Vector d = test::random_unit(rng, model.n_params());
  const double ht = 1e-6;
  const Vector gt = model.grad_theta(theta, t, y);
  const double fd_t = (model.value(theta + ht * d, t, y) - model.value(theta - ht * d, t, y)) / (2 * ht);
  EXPECT_LT(rel_or_abs(gt.dot(d), fd_t), 1e-6);

  const Matrix gyt = model.grad_y_theta(theta, t, y);
  const Vector fd_yt = (model.grad_y(theta + ht * d, t, y) - model.grad_y(theta - ht * d, t, y)) / (2 * ht);
  const Vector an = gyt * d;
  for (int k = 0; k < n; ++k) EXPECT_LT(rel_or_abs(an[k], fd_yt[k]), 1e-6);

  const double c = 0.7;
  const Vector v = test::random_vector(rng, n);
  const Vector vjp = model.theta_vjp(theta, t, y, c, v);
  EXPECT_LT((vjp - (c * gt + gyt.transpose() * v)).norm(), 1e-10 * (1.0 + vjp.norm()));
}

}  // namespace

TEST(Activation, SinCosIdentities) {
  EXPECT_DOUBLE_EQ(activation(Activation::SinCos, 0.0, 0), 1.0);
  EXPECT_DOUBLE_EQ(activation(Activation::SinCos, 0.0, 1), 1.0);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> dist(-10, 10);
  for (int i = 0; i < 100; ++i) {
    const double x = dist(rng);
    EXPECT_NEAR(activation(Activation::SinCos, x, 2), -activation(Activation::SinCos, x, 0), 1e-14);
    EXPECT_NEAR(activation(Activation::SinCos, x, 4), activation(Activation::SinCos, x, 0), 1e-14);
  }
}

TEST(Activation, DerivativesMatchFiniteDifferences) {
  for (Activation a : {Activation::SinCos, Activation::Tanh})
    for (double x : {-1.3, -0.2, 0.0, 0.4, 2.1})
      for (int order = 0; order < 4; ++order) {
        const double h = 1e-5;
        const double fd = (activation(a, x + h, order) - activation(a, x - h, order)) / (2 * h);
        EXPECT_NEAR(activation(a, x, order + 1), fd, 1e-8) << to_string(a) << " order " << order;
      }
  EXPECT_EQ(parse_activation("tanh"), Activation::Tanh);
  EXPECT_THROW(parse_activation("relu"), ConfigError);
}

TEST(ResidualNet, ParameterCountForBenchmarkArchitecture) {
  ProblemSpec s;
  s.n = 10;
  s.alpha = 0.25;
  s.Q2 = Matrix::Identity(10, 10);
  s.y_dT = Vector::Zero(10);
  ResidualNetModel model({11, 60, 1}, Activation::SinCos, TerminalHead(s));
  EXPECT_EQ(model.n_params(), 1440);
  ResidualNetModel deep({3, 5, 4, 1}, Activation::Tanh, TerminalHead(shifted_problem()));
  EXPECT_EQ(deep.n_params(), (5 * 3 * 2 + 5) + (4 * 5 * 2 + 4) + 4);
}

TEST(ResidualNet, RejectsBadArchitectures) {
  const TerminalHead head(shifted_problem());
  EXPECT_THROW(ResidualNetModel({3, 1}, Activation::SinCos, head), ConfigError);
  EXPECT_THROW(ResidualNetModel({3, 4, 2}, Activation::SinCos, head), ConfigError);
  EXPECT_THROW(ResidualNetModel({4, 4, 1}, Activation::SinCos, head), ConfigError);
}

TEST(ResidualNet, TerminalConditionHoldsForRandomParameters) {
  const ProblemSpec s = shifted_problem();
  ResidualNetModel model({3, 8, 1}, Activation::SinCos, TerminalHead(s));
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const ThetaVector theta = test::random_vector(rng, model.n_params(), 2.0);
    const Vector y = test::random_vector(rng, 2, 3.0);
    const double v = model.value(theta, s.T, y);
    const double head = 0.5 * s.alpha * (s.Q2 * (y - s.y_dT)).squaredNorm();
    EXPECT_LE(std::abs(v - head), 1e-12 * (1.0 + std::abs(v)));
  }
}

TEST(ResidualNet, DerivativesMatchFiniteDifferences) {
  const ProblemSpec s = shifted_problem();
  std::mt19937_64 rng(5);
  for (auto arch : {std::vector<int>{3, 6, 1}, std::vector<int>{3, 5, 4, 1}})
    for (Activation act : {Activation::SinCos, Activation::Tanh}) {
      ResidualNetModel model(arch, act, TerminalHead(s));
      for (int probe = 0; probe < 25; ++probe) {
        const ThetaVector theta = model.init_theta(100 + probe);
        const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        check_model_derivatives(model, theta, t, test::random_vector(rng, 2), rng);
      }
    }
}

TEST(ResidualNet, InitIsDeterministicAndScaled) {
  const ProblemSpec s = shifted_problem();
  ResidualNetModel model({3, 20, 1}, Activation::SinCos, TerminalHead(s));
  const ThetaVector a = model.init_theta(42), b = model.init_theta(42);
  EXPECT_EQ((a - b).cwiseAbs().maxCoeff(), 0.0);
  const auto& blk = model.layer_blocks().front();
  EXPECT_LE(a.segment(blk.w1, blk.rows * blk.cols).cwiseAbs().maxCoeff(), 1.0 / std::sqrt(3.0));
  EXPECT_EQ(a.segment(blk.b, blk.rows).cwiseAbs().maxCoeff(), 0.0);
}

TEST(ResidualNet, NonFiniteInputIsANumericError) {
  const ProblemSpec s = shifted_problem();
  ResidualNetModel model({3, 4, 1}, Activation::SinCos, TerminalHead(s));
  ThetaVector theta = model.init_theta(1);
  theta[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW((void)model.value(theta, 0.5, Vector::Zero(2)), NumericError);
}

TEST(Feedback, QuadraticValueGivesNegativeStateFeedback) {
  ProblemSpec s;
  s.n = 2;
  s.m = 2;
  s.T = 1.0;
  s.beta = 1.0;
  s.alpha = 1.0;
  s.Q2 = Matrix::Identity(2, 2);
  s.y_dT = Vector::Zero(2);
  s.g = [](double, const Vector&) { return Matrix(Matrix::Identity(2, 2)); };
  s.dg = [](double, const Vector&) { return std::vector<Matrix>(2, Matrix::Zero(2, 2)); };
  ResidualNetModel model({3, 4, 1}, Activation::SinCos, TerminalHead(s));
  const ThetaVector zero = ThetaVector::Zero(model.n_params());
  const Vector y{{0.3, -1.2}};
  EXPECT_LT((feedback(s, model, zero, 0.2, y) + y).norm(), 1e-15);
  EXPECT_LT((feedback_jacobian_y(s, model, zero, 0.2, y) + Matrix::Identity(2, 2)).norm(), 1e-14);
}

TEST(Feedback, ZeroGradientGivesZeroControl) {
  ProblemSpec s = test::toy_problem();
  s.alpha = 0.0;
  ResidualNetModel model({3, 4, 1}, Activation::SinCos, TerminalHead(s));
  const ThetaVector zero = ThetaVector::Zero(model.n_params());
  EXPECT_EQ(feedback(s, model, zero, 0.4, Vector{{0.1, 0.2}}).norm(), 0.0);
}

TEST(Feedback, ParameterJacobianMatchesFiniteDifferences) {
  const ProblemSpec s = test::toy_problem();
  ResidualNetModel model({3, 7, 1}, Activation::SinCos, TerminalHead(s));
  std::mt19937_64 rng(9);
  for (int probe = 0; probe < 10; ++probe) {
    const ThetaVector theta = model.init_theta(probe);
    const Vector y = test::random_vector(rng, 2);
    const double t = 0.37;
    const Matrix DF = feedback_jacobian_theta(s, model, theta, t, y);
    const Matrix DyF = feedback_jacobian_y(s, model, theta, t, y);
    for (int j = 0; j < 5; ++j) {
      const Vector d = test::random_unit(rng, model.n_params());
      const double h = 1e-6;
      const Vector fd = (feedback(s, model, theta + h * d, t, y) - feedback(s, model, theta - h * d, t, y)) / (2 * h);
      EXPECT_LT(rel_err(DF * d, fd), 1e-6);
    }
    for (int k = 0; k < 2; ++k) {
      const Vector e = Vector::Unit(2, k);
      const double h = 1e-6;
      const Vector fd = (feedback(s, model, theta, t, y + h * e) - feedback(s, model, theta, t, y - h * e)) / (2 * h);
      EXPECT_LT(rel_err(DyF.col(k), fd), 1e-6);
    }
    const Vector w = test::random_vector(rng, 1);
    EXPECT_LT(rel_err(feedback_theta_vjp(s, model, theta, t, y, w), DF.transpose() * w), 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Partition of unity
// ---------------------------------------------------------------------------

namespace {

PartitionPolyModel make_partition(double eps, const ProblemSpec& s, double half_width = 0.6) {
  Vector center = Vector::Zero(s.n + 1);
  center[0] = 0.5 * s.T;
  return PartitionPolyModel(eps, center, half_width, TerminalHead(s));
}

}  // namespace

TEST(Partition, SumsToOneOnCover) {
  const ProblemSpec s = shifted_problem();
  const PartitionPolyModel model = make_partition(0.25, s);
  const double H = model.covered_half_width();
  const int m = 17;
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b)
      for (int c = 0; c < m; ++c) {
        const Vector x = model.center() + H * Vector{{-1.0 + 2.0 * a / (m - 1), -1.0 + 2.0 * b / (m - 1),
                                                      -1.0 + 2.0 * c / (m - 1)}};
        double sum = 0.0;
        Vector grad = Vector::Zero(3);
        for (const auto& w : model.weights(x)) {
          sum += w.phi;
          grad += w.grad;
          EXPECT_LT((x - model.node(w.slot)).norm(), model.radius());
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
        EXPECT_LT(grad.norm(), 1e-9);
        EXPECT_LE(model.active_count(x), model.overlap_bound());
      }
}

TEST(Partition, WeightDerivativesMatchFiniteDifferences) {
  const ProblemSpec s = shifted_problem();
  const PartitionPolyModel model = make_partition(0.3, s);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int probe = 0; probe < 20; ++probe) {
    const Vector x = model.center() + model.covered_half_width() * Vector{{u(rng), u(rng), u(rng)}};
    const auto ws = model.weights(x);
    for (const auto& w : ws)
      for (int k = 0; k < 3; ++k) {
        const double h = 1e-6;
        const Vector e = Vector::Unit(3, k);
        const auto phi_at = [&](const Vector& z) {
          for (const auto& v : model.weights(z))
            if (v.slot == w.slot) return std::pair{v.phi, v.grad};
          return std::pair{0.0, Vector(Vector::Zero(3))};
        };
        const auto [p_plus, g_plus] = phi_at(x + h * e);
        const auto [p_minus, g_minus] = phi_at(x - h * e);
        EXPECT_NEAR(w.grad[k], (p_plus - p_minus) / (2 * h), 1e-6 * (1.0 + std::abs(w.grad[k])));
        const Vector fdh = (g_plus - g_minus) / (2 * h);
        for (int l = 0; l < 3; ++l) EXPECT_NEAR(w.hess(l, k), fdh[l], 1e-5 * (1.0 + std::abs(w.hess(l, k))));
      }
  }
}

TEST(Partition, TerminalConditionAndDerivatives) {
  const ProblemSpec s = shifted_problem();
  const PartitionPolyModel model = make_partition(0.3, s);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int probe = 0; probe < 25; ++probe) {
    const ThetaVector theta = test::random_vector(rng, model.n_params());
    const Vector y{{u(rng), u(rng)}};
    const double head = 0.5 * s.alpha * (s.Q2 * (y - s.y_dT)).squaredNorm();
    const double vT = model.value(theta, s.T, y);
    EXPECT_LE(std::abs(vT - head), 1e-12 * (1.0 + std::abs(vT)));
    check_model_derivatives(model, theta, 0.5 + u(rng), y, rng);
  }
}

TEST(Partition, TaylorInitIsExactForQuadratics) {
  const ProblemSpec s = shifted_problem();
  const PartitionPolyModel model = make_partition(0.25, s);
  const Vector a{{0.4, -1.1}};
  const auto head = TerminalHead(s);
  // V = head(y) + (t - T)(0.3 + 0.8 t + a.y), quadratic in (t,y) with the right terminal values.
  const auto ref = [&](const Vector& x) {
    const double t = x[0];
    const Vector y = x.tail(2);
    TaylorData td;
    const double tau = t - s.T;
    const double lin = 0.3 + 0.8 * t + a.dot(y);
    td.value = head.value(y) + tau * lin;
    td.grad = Vector(3);
    td.grad[0] = lin + 0.8 * tau;
    td.grad.tail(2) = head.grad(y) + tau * a;
    td.hess = Matrix::Zero(3, 3);
    td.hess(0, 0) = 1.6;
    td.hess.block(0, 1, 1, 2) = a.transpose();
    td.hess.block(1, 0, 2, 1) = a;
    td.hess.bottomRightCorner(2, 2) = head.hess();
    return td;
  };
  const ThetaVector theta = model.taylor_init(ref);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int probe = 0; probe < 50; ++probe) {
    const double t = 0.5 + u(rng);
    const Vector y{{u(rng), u(rng)}};
    const ModelEval e = model.evaluate(theta, t, y, true);
    Vector x(3);
    x << t, y;
    const TaylorData want = ref(x);
    EXPECT_NEAR(e.value, want.value, 1e-10);
    EXPECT_LT((e.grad_y - want.grad.tail(2)).norm(), 1e-10);
    EXPECT_LT((e.hess_yy - want.hess.bottomRightCorner(2, 2)).norm(), 1e-9);
  }
}

TEST(Partition, LargeStateDimensionIsRejected) {
  ProblemSpec s;
  s.n = 4;
  s.Q2 = Matrix::Identity(4, 4);
  s.y_dT = Vector::Zero(4);
  EXPECT_THROW(PartitionPolyModel(0.5, Vector::Zero(5), 1.0, TerminalHead(s)), CapabilityError);
}
