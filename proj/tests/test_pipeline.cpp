#include <gtest/gtest.h>

#include "hjbfl/hjbfl.hpp"

using namespace hjbfl;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("hjbfl_test_" + name);
  std::filesystem::remove_all(p);
  return p.string();
}

const char* kSmallLqr = R"(
# two-state damped oscillator
[problem]
kind = lqr

[lqr]
A = [[0, 1], [-1, -0.2]]
B = [[0], [1]]
Q1 = [[1, 0], [0, 1]]
Q2 = [[1, 0], [0, 1]]
alpha = 1
beta = 0.5
T = 1

[grid]
n_steps = 40

[model]
arch = [3, 8, 1]
activation = tanh
init_seed = 3

[penalty]
gamma1 = 0.1
gamma2 = 0.1
sweep = [[0, 0], [0.1, 0.1]]

[ensemble]
total = 6
train_count = 3
radius = 0.5
seed = 11
center = [0.5, -0.5]

[train]
max_iters = 15

[oracle]
max_iters = 400
grad_tol = 1e-9

[gradcheck]
dirs = 4
members = 2
)";

RunConfig small_config(const std::string& out, std::size_t threads = 1) {
  RunConfig c = parse_run_config(kSmallLqr);
  c.output_dir = out;
  c.threads = threads;
  return c;
}

}  // namespace

TEST(Config, ParsesSectionsAndLiterals) {
  const RunConfig c = parse_run_config(kSmallLqr);
  EXPECT_EQ(c.problem, ProblemKind::Lqr);
  EXPECT_EQ(c.lqr.A_lin(1, 0), -1.0);
  EXPECT_EQ(c.lqr.beta, 0.5);
  EXPECT_EQ(c.n_steps, 40u);
  EXPECT_EQ(c.model.activation, Activation::Tanh);
  EXPECT_EQ(c.model.arch, (std::vector<int>{3, 8, 1}));
  EXPECT_EQ(c.sweep.size(), 2u);
  EXPECT_EQ(c.ensemble.center, (Vector{{0.5, -0.5}}));
  EXPECT_EQ(c.train.max_iters, 15u);
  EXPECT_TRUE(c.oracle.relative_tol);
}

TEST(Config, DefaultsDescribeTheBilinearBenchmark) {
  const RunConfig c = parse_run_config("");
  EXPECT_EQ(c.problem, ProblemKind::Bilinear);
  EXPECT_EQ(c.n_modes, 10);
  EXPECT_EQ(c.ensemble.total, 130u);
  EXPECT_EQ(c.ensemble.train_count, 30u);
  EXPECT_EQ(c.sweep.size(), 5u);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW((void)parse_run_config("[grid]\nnsteps = 10\n"), ConfigError);
  EXPECT_THROW((void)parse_run_config("[grid]\nn_steps = [1,\n"), ConfigError);
  EXPECT_THROW((void)parse_run_config("[grid]\nn_steps = \"many\"\n"), ConfigError);
  EXPECT_THROW((void)parse_run_config("[grid]\nlinear_scheme = lobatto\nn_steps = 7\n"), ConfigError);
  EXPECT_THROW((void)parse_run_config("[penalty]\ngamma1 = -1\n"), ConfigError);
  EXPECT_THROW((void)parse_run_config("no equals sign\n"), ConfigError);
  EXPECT_THROW((void)parse_run_config("[problem]\nkind = custom\n"), ConfigError);
}

TEST(Config, CanonicalJsonIgnoresFormatting) {
  const RunConfig a = parse_run_config("[grid]\nn_steps = 50 # fine\n");
  const RunConfig b = parse_run_config("\n\n[grid]\n  n_steps=50\n");
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  const RunConfig c = parse_run_config("[grid]\nn_steps = 52\n");
  EXPECT_NE(a.to_json().dump(), c.to_json().dump());
}

TEST(Persistence, ThetaRoundTripChecksLayout) {
  const RunConfig cfg = parse_run_config(kSmallLqr);
  const ProblemSpec spec = cfg.lqr.problem();
  const ResidualNetModel model({3, 8, 1}, Activation::Tanh, TerminalHead(spec));
  const ThetaVector theta = model.init_theta(5);
  const Json j = Json::parse(theta_to_json(model, theta).dump());
  EXPECT_EQ(theta_from_json(j, model), theta);

  const ResidualNetModel wider({3, 9, 1}, Activation::Tanh, TerminalHead(spec));
  EXPECT_THROW((void)theta_from_json(j, wider), ConfigError);
  const PartitionPolyModel part(0.5, Vector::Zero(3), 1.0, TerminalHead(spec));
  EXPECT_THROW((void)theta_from_json(j, part), ConfigError);

  const ThetaVector pt = ThetaVector::LinSpaced(part.n_params(), -1.0, 1.0);
  EXPECT_EQ(theta_from_json(Json::parse(theta_to_json(part, pt).dump()), part), pt);
}

TEST(Persistence, EnsembleRoundTripIsExact) {
  const EnsembleSet e = generate_ensemble(Vector{{0.1, 0.2, 0.3}}, 9, 0.7, 42, 4);
  const EnsembleSet b = ensemble_from_json(Json::parse(ensemble_to_json(e).dump()));
  ASSERT_EQ(b.size(), e.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    EXPECT_EQ(b.points[i], e.points[i]);
    EXPECT_EQ(b.weights[i], e.weights[i]);
    EXPECT_EQ(b.tags[i], e.tags[i]);
  }
}

TEST(Pipeline, MissingUpstreamArtifactNamesTheProducer) {
  Pipeline p(small_config(temp_dir("missing")), nullptr);
  try {
    (void)p.cmd_oracle();
    FAIL() << "expected MissingArtifactError";
  } catch (const MissingArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("hjbfl ensemble"), std::string::npos);
  }
  p.cmd_ensemble();
  EXPECT_THROW((void)p.cmd_validate(p.config().penalty), MissingArtifactError);
  EXPECT_THROW((void)p.cmd_report(), MissingArtifactError);
}

TEST(Pipeline, EndToEndIsCachedAndThreadIndependent) {
  const std::string d1 = temp_dir("run1"), d2 = temp_dir("run2");
  Pipeline p1(small_config(d1, 1), nullptr);
  const TableDocument doc = p1.run_all();
  EXPECT_NE(doc.markdown.find("| gamma1 = 0.1, gamma2 = 0.1 |"), std::string::npos);
  EXPECT_EQ(parse_reports_csv(doc.csv).size(), 4u);

  const PenaltyConfig pen = p1.with_gammas(0.1, 0.1);
  const std::string theta_file = p1.theta_path(pen);
  const auto stamp = std::filesystem::last_write_time(theta_file);
  EXPECT_TRUE(p1.cmd_train(pen).cached);
  EXPECT_EQ(std::filesystem::last_write_time(theta_file), stamp);

  Pipeline p2(small_config(d2, 2), nullptr);
  const TableDocument doc2 = p2.run_all();
  EXPECT_EQ(doc2.csv, doc.csv);
  EXPECT_EQ(slurp(p2.theta_path(pen)), slurp(theta_file));
  EXPECT_EQ(slurp(p2.metrics_path(pen)), slurp(p1.metrics_path(pen)));
  EXPECT_EQ(std::filesystem::path(p2.metrics_path(pen)).filename(),
            std::filesystem::path(p1.metrics_path(pen)).filename());

  const std::vector<MetricsReport> reps = p1.cmd_validate(pen);
  ASSERT_EQ(reps.size(), 2u);
  EXPECT_EQ(reps[0].split, SplitTag::Train);
  EXPECT_EQ(reps[1].split, SplitTag::Validation);
  EXPECT_LT(reps[0].err_Y, 0.5);
}

TEST(Pipeline, GradcheckWithinToleranceOnTheFourthOrderScheme) {
  RunConfig c = small_config(temp_dir("gradcheck_lobatto"));
  c.linear = LinearScheme::Lobatto;
  Pipeline p(c, nullptr);
  p.cmd_ensemble();
  const auto r = p.cmd_gradcheck(p.config().penalty, 4);
  EXPECT_EQ(r.rel_errors.size(), 4u);
  EXPECT_LE(r.worst, c.gradcheck.tolerance);
  EXPECT_TRUE(r.refined_errors.empty());
  EXPECT_TRUE(r.passed);
}

TEST(Pipeline, GradcheckOnTheFirstOrderSchemeNeedsRefinement) {
  Pipeline p(small_config(temp_dir("gradcheck_euler")), nullptr);
  p.cmd_ensemble();
  const auto r = p.cmd_gradcheck(p.config().penalty, 4);
  ASSERT_EQ(r.refined_errors.size(), 4u);
  EXPECT_GT(r.worst, p.config().gradcheck.tolerance);
  for (std::size_t k = 0; k < 4; ++k)
    if (r.rel_errors[k] > p.config().gradcheck.tolerance) EXPECT_LT(1.5 * r.refined_errors[k], r.rel_errors[k]);
  EXPECT_TRUE(r.passed);
}

TEST(Pipeline, GradcheckFailsOnTheWrongTerminalCoefficient) {
  RunConfig c = small_config(temp_dir("gradcheck_paperzero"));
  c.linear = LinearScheme::Lobatto;
  c.phi_terminal = PhiTerminalConvention::PaperZero;
  Pipeline p(c, nullptr);
  p.cmd_ensemble();
  EXPECT_FALSE(p.cmd_gradcheck(p.config().penalty, 4).passed);
}

TEST(Pipeline, StageKeysTrackOnlyTheirInputs) {
  RunConfig a = small_config("x");
  RunConfig b = a;
  b.train.max_iters = 99;
  const Pipeline pa(a, nullptr), pb(b, nullptr);
  EXPECT_EQ(pa.oracle_path(), pb.oracle_path());
  EXPECT_NE(pa.theta_path(a.penalty), pb.theta_path(a.penalty));
  b = a;
  b.output_dir = "y";
  b.threads = 4;
  const Pipeline pc(b, nullptr);
  EXPECT_EQ(std::filesystem::path(pa.theta_path(a.penalty)).filename(),
            std::filesystem::path(pc.theta_path(a.penalty)).filename());
}
