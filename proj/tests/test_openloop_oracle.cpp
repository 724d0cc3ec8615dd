#include <gtest/gtest.h>

#include "hjbfl/openloop_oracle.hpp"
#include "test_support.hpp"

using namespace hjbfl;
using namespace hjbfl::test;

namespace {

LQRSpec scalar_lqr() {
  LQRSpec l;
  l.A_lin = Matrix::Zero(1, 1);
  l.B = Matrix::Ones(1, 1);
  l.Q1 = Matrix::Ones(1, 1);
  l.Q2 = Matrix::Ones(1, 1);
  l.alpha = 0.0;
  l.beta = 1.0;
  l.T = 1.0;
  return l;
}

LQRSpec planar_lqr() {
  LQRSpec l;
  l.A_lin = Matrix{{0.0, 1.0}, {-1.0, 0.2}};
  l.B = Matrix{{0.0}, {1.0}};
  l.Q1 = Matrix::Identity(2, 2);
  l.Q2 = Matrix::Identity(2, 2);
  l.alpha = 0.5;
  l.beta = 0.1;
  l.T = 2.0;
  return l;
}

BBConfig oracle_bb() {
  BBConfig bb;
  bb.max_iters = 2000;
  bb.grad_tol = 1e-8;
  bb.relative_tol = true;
  bb.step_init = 1.0;
  return bb;
}

double rel_l2(const Trajectory& a, const Trajectory& b) {
  Trajectory d = a;
  d.values -= b.values;
  return std::sqrt(l2_norm_sq(d) / l2_norm_sq(b));
}

}  // namespace

TEST(Riccati, NoCostGivesZero) {
  LQRSpec l = planar_lqr();
  l.Q1.setZero();
  l.alpha = 0.0;
  for (const Matrix& P : riccati_solve(l, TimeGrid(l.T, 50))) EXPECT_EQ(P.norm(), 0.0);
}

TEST(Riccati, ScalarTanhFirstOrder) {
  const LQRSpec l = scalar_lqr();
  double prev = 0.0;
  for (std::size_t n : {100, 200, 400}) {
    const auto Pi = riccati_solve(l, TimeGrid(1.0, n));
    const double err = std::abs(Pi.front()(0, 0) - std::tanh(1.0));
    EXPECT_LE(err, 1.0 / double(n));
    if (prev > 0.0) EXPECT_NEAR(prev / err, 2.0, 0.2);
    prev = err;
  }
}

TEST(Riccati, SymmetricPositiveSemidefinite) {
  const LQRSpec l = planar_lqr();
  for (const Matrix& P : riccati_solve(l, TimeGrid(l.T, 200))) {
    EXPECT_LE((P - P.transpose()).norm(), 1e-10);
    EXPECT_GE(Eigen::SelfAdjointEigenSolver<Matrix>(P).eigenvalues().minCoeff(), -1e-12);
  }
}

TEST(Riccati, BlowupBoundEnforced) {
  // Unstable drift: Pi grows toward the stabilizing solution 6, past a bound of 1.
  LQRSpec l = scalar_lqr();
  l.T = 10.0;
  l.A_lin = Matrix::Constant(1, 1, 3.0);
  EXPECT_THROW((void)riccati_solve(l, TimeGrid(l.T, 200), 1.0), DivergenceError);
  EXPECT_NEAR(riccati_solve(l, TimeGrid(l.T, 2000)).front()(0, 0), 3.0 + std::sqrt(10.0), 1e-2);
}

TEST(Riccati, ClosedLoopCostMatchesValue) {
  const LQRSpec l = planar_lqr();
  const ProblemSpec spec = l.problem();
  const TimeGrid grid(l.T, 400);
  const auto Pi = riccati_solve(l, grid);
  const Vector y0{{1.0, -0.5}};
  const Trajectory y = riccati_closed_loop(l, Pi, grid, y0);
  const double J = running_cost(spec, y, riccati_feedback(l, Pi, y));
  const double V = 0.5 * y0.dot(Pi.front() * y0);
  EXPECT_LE(rel_err(J, V), 0.01);
}

TEST(OpenLoop, NoTrackingIncentive) {
  ProblemSpec spec = planar_lqr().problem();
  spec.Q1.setZero();
  spec.alpha = 0.0;
  const OpenLoopSolution s = solve_open_loop(spec, Vector{{1.0, 0.0}}, TimeGrid(spec.T, 50), oracle_bb());
  EXPECT_EQ(s.u.values.norm(), 0.0);
  EXPECT_EQ(s.J, 0.0);
  EXPECT_TRUE(s.converged);
}

TEST(OpenLoop, ReducedGradientMatchesFiniteDifferences) {
  const ProblemSpec spec = toy_problem();
  const TimeGrid grid(spec.T, 400);
  const Vector y0{{0.8, -0.3}};
  std::mt19937_64 rng(5);
  Trajectory u(grid, 1);
  for (std::size_t k = 0; k < grid.size(); ++k) u.set(k, Vector{{std::sin(3.0 * grid[k]) + 0.2}});
  const OpenLoopEvaluation e = evaluate_open_loop(spec, y0, u);
  for (int trial = 0; trial < 3; ++trial) {
    Trajectory du(grid, 1);
    const Vector c = random_vector(rng, 3);
    for (std::size_t k = 0; k < grid.size(); ++k)
      du.set(k, Vector{{c[0] + c[1] * std::cos(2.0 * grid[k]) + c[2] * grid[k] * grid[k]}});
    const double h = 1e-6;
    Trajectory up = u, um = u;
    up.values += h * du.values;
    um.values -= h * du.values;
    const double fd = (evaluate_open_loop(spec, y0, up).J - evaluate_open_loop(spec, y0, um).J) / (2.0 * h);
    EXPECT_LE(rel_err(l2_inner(e.gradient, du), fd), 1e-3);
  }
}

TEST(OpenLoop, MatchesRiccatiOracle) {
  for (const LQRSpec& l : {scalar_lqr(), planar_lqr()}) {
    const ProblemSpec spec = l.problem();
    const TimeGrid grid(l.T, 400);
    const Vector y0 = Vector::Ones(spec.n);
    const OpenLoopSolution s = solve_open_loop(spec, y0, grid, oracle_bb());
    EXPECT_TRUE(s.converged);
    const auto Pi = riccati_solve(l, grid);
    EXPECT_LE(rel_err(s.J, 0.5 * y0.dot(Pi.front() * y0)), 0.01);
    const Trajectory yr = riccati_closed_loop(l, Pi, grid, y0);
    EXPECT_LE(rel_l2(s.u, riccati_feedback(l, Pi, yr)), 0.02);
    // Feedback structure along the open-loop optimum itself.
    EXPECT_LE(rel_l2(s.u, riccati_feedback(l, Pi, s.y)), 0.02);
  }
}

TEST(OpenLoop, StationarityAtReturnedControl) {
  const ProblemSpec spec = toy_problem();
  const TimeGrid grid(spec.T, 100);
  const BBConfig bb = oracle_bb();
  const OpenLoopSolution s = solve_open_loop(spec, Vector{{0.8, -0.3}}, grid, bb);
  ASSERT_TRUE(s.converged);
  Trajectory G(grid, spec.m);
  for (std::size_t k = 0; k < grid.size(); ++k)
    G.set(k, spec.beta * s.u.at(k) + spec.g(grid[k], s.y.at(k)).transpose() * s.p.at(k));
  EXPECT_LE(std::sqrt(l2_norm_sq(G)), bb.grad_tol * (1.0 + std::sqrt(l2_norm_sq(s.u))));
  EXPECT_NEAR(std::sqrt(l2_norm_sq(G)), s.grad_norm, 1e-12);
}

TEST(OpenLoop, EnsembleSolvesAreIndependentOfThreads) {
  const ProblemSpec spec = toy_problem();
  const TimeGrid grid(spec.T, 50);
  const EnsembleSet ens = uniform_ensemble({Vector{{0.8, -0.3}}, Vector{{0.1, 0.4}}, Vector{{-0.5, 0.0}}});
  const auto a = solve_open_loop_ensemble(spec, ens, grid, oracle_bb(), {}, 1);
  const auto b = solve_open_loop_ensemble(spec, ens, grid, oracle_bb(), {}, 3);
  for (std::size_t i = 0; i < ens.size(); ++i) {
    EXPECT_EQ(a[i].J, b[i].J);
    EXPECT_TRUE(a[i].u.values == b[i].u.values);
    EXPECT_EQ(a[i].J, solve_open_loop(spec, ens.points[i], grid, oracle_bb()).J);
  }
}
