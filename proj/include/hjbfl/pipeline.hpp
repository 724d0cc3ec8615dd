/**
 * @file pipeline.hpp
 * @brief Experiment stages: assemble, ensemble, oracle, train, validate, report, gradcheck.
 *
 * Every stage writes one artifact under the output directory whose name carries a hash of
 * exactly the settings it depends on. A stage whose artifact already exists loads it
 * instead of recomputing.
 */
#pragma once

#include <iostream>
#include <variant>

#include "hjbfl/bilinear_benchmark.hpp"
#include "hjbfl/config.hpp"
#include "hjbfl/metrics_report.hpp"

namespace hjbfl {

/// A downstream stage ran before the stage that produces its input.
class MissingArtifactError : public Error {
 public:
  MissingArtifactError(const std::string& path, const std::string& producer)
      : Error("missing artifact " + path + "; run `hjbfl " + producer + "` with the same config first") {}
};

using AnyModel = std::variant<ResidualNetModel, PartitionPolyModel>;

struct Problem {
  ProblemSpec spec;
  /// Default ensemble center.
  Vector reference;
};

class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg, std::ostream* log = &std::cerr) : cfg_(std::move(cfg)), log_(log) {
    cfg_.validate();
  }

  [[nodiscard]] const RunConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] TimeGrid grid() const { return TimeGrid(problem().spec.T, cfg_.n_steps); }
  [[nodiscard]] SolverOptions solver() const {
    SolverOptions o;
    o.linear = cfg_.linear;
    return o;
  }
  [[nodiscard]] LearningOptions learning() const {
    LearningOptions o;
    o.solver = solver();
    o.phi_terminal = cfg_.phi_terminal;
    o.threads = cfg_.thread_count();
    return o;
  }

  // --------------------------------------------------------------------------
  // Hashes and paths
  // --------------------------------------------------------------------------

  [[nodiscard]] static std::string hash_of(const Json& j) { return hex64(fnv1a64(j.dump())); }

  [[nodiscard]] Json problem_key() const {
    const Json c = cfg_.to_json();
    Json k = {{"problem", c["problem"]}, {"grid", c["grid"]}};
    if (c.contains("lqr")) k["lqr"] = c["lqr"];
    return k;
  }
  [[nodiscard]] Json ensemble_key() const {
    Json k = problem_key();
    k["ensemble"] = cfg_.to_json()["ensemble"];
    return k;
  }
  [[nodiscard]] Json oracle_key() const {
    Json k = ensemble_key();
    k["oracle"] = cfg_.to_json()["oracle"];
    return k;
  }
  [[nodiscard]] Json train_key(const PenaltyConfig& pen) const {
    const Json c = cfg_.to_json();
    Json k = ensemble_key();
    k["model"] = c["model"];
    k["train"] = c["train"];
    k["learning"] = c["learning"];
    k["penalty"] = {{"gamma1", pen.gamma1}, {"gamma2", pen.gamma2}, {"gamma_eps", pen.gamma_eps}};
    return k;
  }
  [[nodiscard]] Json validate_key(const PenaltyConfig& pen) const {
    return {{"train", train_key(pen)}, {"oracle", oracle_key()}};
  }

  [[nodiscard]] std::string path(const std::string& stem, const Json& key, const std::string& ext = ".json") const {
    return (std::filesystem::path(cfg_.output_dir) / (stem + "_" + hash_of(key) + ext)).string();
  }
  [[nodiscard]] std::string bilinear_path() const {
    return (std::filesystem::path(cfg_.output_dir) / ("bilinear_" + std::to_string(cfg_.n_modes) + ".json")).string();
  }
  [[nodiscard]] std::string ensemble_path() const { return path("ensemble", ensemble_key()); }
  [[nodiscard]] std::string oracle_path() const { return path("oracle", oracle_key()); }
  [[nodiscard]] std::string theta_path(const PenaltyConfig& pen) const { return path("theta", train_key(pen)); }
  [[nodiscard]] std::string trace_path(const PenaltyConfig& pen) const {
    return path("trace", train_key(pen), ".csv");
  }
  [[nodiscard]] std::string metrics_path(const PenaltyConfig& pen) const {
    return path("metrics", validate_key(pen));
  }
  [[nodiscard]] Json report_key() const {
    Json rows = Json::array();
    for (auto [a, b] : cfg_.sweep) rows.push_back(validate_key(with_gammas(a, b)));
    return rows;
  }
  [[nodiscard]] std::string report_path(const std::string& ext) const { return path("report", report_key(), ext); }

  [[nodiscard]] PenaltyConfig with_gammas(double g1, double g2) const {
    return PenaltyConfig{g1, g2, cfg_.penalty.gamma_eps};
  }

  // --------------------------------------------------------------------------
  // Stages
  // --------------------------------------------------------------------------

  /// Problem data; the bilinear matrices come from the on-disk cache.
  [[nodiscard]] const Problem& problem() const {
    if (!problem_) {
      Problem p;
      if (cfg_.problem == ProblemKind::Bilinear) {
        const BilinearSpec b = assemble_cached(cfg_.n_modes, bilinear_path(), force_assemble_);
        p.spec = dynamics_callbacks(b);
        p.reference = b.Ybar0;
      } else {
        p.spec = cfg_.lqr.problem();
        p.reference = Vector::Zero(p.spec.n);
      }
      problem_ = std::move(p);
    }
    return *problem_;
  }

  /// Assembles (or reassembles with `force`) the bilinear matrices.
  void cmd_assemble(bool force = false) {
    force_assemble_ = force;
    problem_.reset();
    (void)problem();
    say("assemble: problem with n = " + std::to_string(problem().spec.n) + " ready");
  }

  EnsembleSet cmd_ensemble() {
    const std::string file = ensemble_path();
    if (std::filesystem::exists(file)) return ensemble_from_json(read_json_file(file));
    const Vector center = cfg_.ensemble.center.size() > 0 ? cfg_.ensemble.center : problem().reference;
    if (center.size() != problem().spec.n) throw ConfigError("ensemble.center has the wrong dimension");
    const EnsembleSet e = generate_ensemble(center, cfg_.ensemble.total, cfg_.ensemble.radius, cfg_.ensemble.seed,
                                            cfg_.ensemble.train_count);
    write_json_file(file, ensemble_to_json(e));
    say("ensemble: wrote " + file);
    return e;
  }

  [[nodiscard]] EnsembleSet load_ensemble() const {
    const std::string file = ensemble_path();
    if (!std::filesystem::exists(file)) throw MissingArtifactError(file, "ensemble");
    return ensemble_from_json(read_json_file(file));
  }

  std::vector<OpenLoopSolution> cmd_oracle() {
    const std::string file = oracle_path();
    const EnsembleSet ens = load_ensemble();
    if (std::filesystem::exists(file)) return load_oracle(ens);
    say("oracle: solving " + std::to_string(ens.size()) + " open-loop problems");
    const auto sols = solve_open_loop_ensemble(problem().spec, ens, grid(), cfg_.oracle, solver(), cfg_.thread_count());
    std::size_t unconverged = 0;
    for (const auto& s : sols) unconverged += s.converged ? 0 : 1;
    if (unconverged > 0) say("oracle: " + std::to_string(unconverged) + " solves stopped at the iteration cap");
    write_json_file(file, open_loop_to_json(sols));
    say("oracle: wrote " + file);
    return sols;
  }

  [[nodiscard]] std::vector<OpenLoopSolution> load_oracle(const EnsembleSet& ens) const {
    const std::string file = oracle_path();
    if (!std::filesystem::exists(file)) throw MissingArtifactError(file, "oracle");
    return open_loop_from_json(read_json_file(file), problem().spec, ens, grid(), solver());
  }

  [[nodiscard]] AnyModel make_model() const {
    const ProblemSpec& spec = problem().spec;
    if (cfg_.model.family == "resnet") {
      std::vector<int> arch = cfg_.model.arch;
      if (arch.front() != spec.n + 1) throw ConfigError("model.arch must start with state dimension + 1");
      return ResidualNetModel(arch, cfg_.model.activation, TerminalHead(spec));
    }
    Vector center = cfg_.model.center;
    if (center.size() == 0) {
      center.resize(spec.n + 1);
      center[0] = 0.5 * spec.T;
      center.tail(spec.n) = cfg_.ensemble.center.size() > 0 ? cfg_.ensemble.center : problem().reference;
    }
    return PartitionPolyModel(cfg_.model.epsilon, center, cfg_.model.half_width, TerminalHead(spec));
  }

  struct TrainResult {
    ThetaVector theta;
    double objective = 0.0;
    double grad_norm = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
    bool cached = false;
  };

  TrainResult cmd_train(const PenaltyConfig& pen) {
    const std::string file = theta_path(pen);
    const AnyModel model = make_model();
    if (std::filesystem::exists(file)) {
      const Json j = read_json_file(file);
      TrainResult r;
      r.theta = std::visit([&](const auto& m) { return theta_from_json(j.at("parameters"), m); }, model);
      r.objective = j.at("objective").get<double>();
      r.grad_norm = j.at("grad_norm").get<double>();
      r.iterations = j.at("iterations").get<std::size_t>();
      r.converged = j.at("converged").get<bool>();
      r.cached = true;
      say("train: cached " + file);
      return r;
    }
    const EnsembleSet train = load_ensemble().split(SplitTag::Train);
    const ProblemSpec& spec = problem().spec;
    const TimeGrid g = grid();
    const LearningOptions lo = learning();
    return std::visit(
        [&](const auto& m) {
          const ThetaVector theta0 = initial_theta(m);
          const Objective f = [&](const Vector& x) {
            const ValueAndGradient vg = ensemble_value_and_gradient(spec, pen, m, x, train, g, lo);
            return Evaluation{vg.value, vg.gradient};
          };
          say("train: gamma1 = " + detail::short_number(pen.gamma1) + ", gamma2 = " + detail::short_number(pen.gamma2) + ", " +
              std::to_string(m.n_params()) + " parameters");
          const BBResult bb = bb_minimize(f, theta0, cfg_.train, [&](const BBTraceRow& row) {
            if (row.iter % 50 == 0)
              say("  iter " + std::to_string(row.iter) + "  f " + detail::short_number(row.f) + "  |g| " +
                  detail::short_number(row.grad_norm));
          });
          TrainResult r;
          r.theta = bb.x;
          r.objective = bb.f;
          r.grad_norm = bb.grad_norm;
          r.iterations = bb.iterations;
          r.converged = bb.converged;
          write_trace_csv(trace_path(pen), bb.trace);
          write_json_file(file, {{"parameters", theta_to_json(m, bb.x)},
                                 {"objective", bb.f},
                                 {"grad_norm", bb.grad_norm},
                                 {"iterations", bb.iterations},
                                 {"converged", bb.converged},
                                 {"key", train_key(pen)}});
          say("train: wrote " + file);
          return r;
        },
        model);
  }

  [[nodiscard]] ThetaVector load_theta(const PenaltyConfig& pen) const {
    const std::string file = theta_path(pen);
    if (!std::filesystem::exists(file)) throw MissingArtifactError(file, "train");
    const Json j = read_json_file(file);
    return std::visit([&](const auto& m) { return theta_from_json(j.at("parameters"), m); }, make_model());
  }

  /// Metrics on the training split, then the validation split.
  std::vector<MetricsReport> cmd_validate(const PenaltyConfig& pen) {
    const std::string file = metrics_path(pen);
    if (std::filesystem::exists(file)) return reports_from_file(file);
    const EnsembleSet ens = load_ensemble();
    const auto sols = load_oracle(ens);
    const ThetaVector theta = load_theta(pen);
    const ProblemSpec& spec = problem().spec;
    const TimeGrid g = grid();
    const SolverOptions so = solver();
    std::vector<MemberTrajectories> learned(ens.size()), oracle(ens.size());
    std::visit(
        [&](const auto& m) {
          parallel_for(
              ens.size(),
              [&](std::size_t i) {
                try {
                  learned[i] = learned_rollout(spec, m, theta, ens.points[i], g, so);
                  oracle[i] = oracle_rollout(spec, m, theta, sols[i]);
                } catch (const Error& e) {
                  throw MemberError(i, e.what());
                }
              },
              cfg_.thread_count());
        },
        make_model());
    std::vector<MetricsReport> out;
    const std::string hash = hash_of(validate_key(pen));
    for (SplitTag tag : {SplitTag::Train, SplitTag::Validation}) {
      std::vector<MemberTrajectories> a, b;
      for (std::size_t i = 0; i < ens.size(); ++i)
        if (ens.tags[i] == tag) {
          a.push_back(learned[i]);
          b.push_back(oracle[i]);
        }
      if (a.empty()) continue;
      MetricsReport r = compute_metrics(a, b, tag, pen);
      r.config_hash = hash;
      out.push_back(r);
    }
    Json arr = Json::array();
    for (const auto& r : out) arr.push_back(to_json(r));
    write_json_file(file, {{"reports", arr}});
    say("validate: wrote " + file);
    return out;
  }

  /// Tables over the configured penalty sweep; every sweep entry must have been validated.
  TableDocument cmd_report() {
    std::vector<MetricsReport> all;
    for (auto [a, b] : cfg_.sweep) {
      const std::string file = metrics_path(with_gammas(a, b));
      if (!std::filesystem::exists(file)) throw MissingArtifactError(file, "validate");
      for (const auto& r : reports_from_file(file)) all.push_back(r);
    }
    std::vector<MetricsReport> ordered;
    for (SplitTag tag : {SplitTag::Train, SplitTag::Validation})
      for (const auto& r : all)
        if (r.split == tag) ordered.push_back(r);
    const TableDocument doc = emit_tables(ordered);
    write_text(report_path(".md"), doc.markdown);
    write_text(report_path(".csv"), doc.csv);
    say("report: wrote " + report_path(".md"));
    return doc;
  }

  struct GradcheckResult {
    /// Relative errors on the configured grid and on a grid twice as fine.
    std::vector<double> rel_errors;
    std::vector<double> refined_errors;
    double worst = 0.0;
    bool passed = false;
  };

  /**
   * Analytic directional derivatives against central differences at the initial parameters.
   * The analytic gradient is consistent with the discrete objective only up to the time step,
   * so a direction passes when its error is within tolerance or shrinks by at least 1.5x
   * when the grid is refined.
   */
  GradcheckResult cmd_gradcheck(const PenaltyConfig& pen, std::size_t dirs) {
    EnsembleSet ens = load_ensemble().split(SplitTag::Train);
    const std::size_t keep = std::min(cfg_.gradcheck.members, ens.size());
    ens = uniform_ensemble(std::vector<Vector>(ens.points.begin(), ens.points.begin() + static_cast<long>(keep)));
    const ProblemSpec& spec = problem().spec;
    const LearningOptions lo = learning();
    std::vector<Vector> directions;
    std::mt19937_64 rng(cfg_.gradcheck.seed);
    std::normal_distribution<double> nd;
    GradcheckResult res;
    std::visit(
        [&](const auto& m) {
          const ThetaVector theta = initial_theta(m);
          for (std::size_t k = 0; k < dirs; ++k) {
            Vector d(theta.size());
            for (Eigen::Index i = 0; i < d.size(); ++i) d[i] = nd(rng);
            directions.push_back(d.normalized());
          }
          const auto errors = [&](const TimeGrid& g) {
            const Vector grad = ensemble_gradient(spec, pen, m, theta, ens, g, lo);
            const auto f = [&](const ThetaVector& x) {
              return ensemble_value_and_gradient(spec, pen, m, x, ens, g, lo).value;
            };
            const double h = cfg_.gradcheck.fd_step;
            std::vector<double> out;
            for (const Vector& d : directions) {
              const double fd = (f(theta + h * d) - f(theta - h * d)) / (2.0 * h);
              const double an = grad.dot(d);
              out.push_back(std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-300}));
            }
            return out;
          };
          res.rel_errors = errors(grid());
          if (*std::max_element(res.rel_errors.begin(), res.rel_errors.end()) > cfg_.gradcheck.tolerance)
            res.refined_errors = errors(TimeGrid(spec.T, 2 * cfg_.n_steps));
        },
        make_model());
    res.passed = true;
    for (std::size_t k = 0; k < dirs; ++k) {
      const double e = res.rel_errors[k];
      res.worst = std::max(res.worst, e);
      const bool ok = e <= cfg_.gradcheck.tolerance ||
                      (!res.refined_errors.empty() && res.refined_errors[k] * 1.5 <= e);
      res.passed = res.passed && ok;
    }
    Json j = {{"rel_errors", res.rel_errors}, {"worst", res.worst}, {"passed", res.passed}};
    if (!res.refined_errors.empty()) j["refined_errors"] = res.refined_errors;
    write_json_file(path("gradcheck", train_key(pen)), j);
    return res;
  }

  /// Every stage for every sweep entry, then the tables.
  TableDocument run_all() {
    cmd_assemble();
    cmd_ensemble();
    cmd_oracle();
    for (auto [a, b] : cfg_.sweep) {
      cmd_train(with_gammas(a, b));
      cmd_validate(with_gammas(a, b));
    }
    return cmd_report();
  }

 private:
  template <class M>
  [[nodiscard]] ThetaVector initial_theta(const M& m) const {
    if constexpr (std::is_same_v<M, ResidualNetModel>) {
      return m.init_theta(cfg_.model.init_seed);
    } else {
      std::mt19937_64 rng(cfg_.model.init_seed);
      std::normal_distribution<double> nd(0.0, 1e-2);
      ThetaVector theta(m.n_params());
      for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] = nd(rng);
      return theta;
    }
  }

  static std::vector<MetricsReport> reports_from_file(const std::string& file) {
    const Json doc = read_json_file(file);
    std::vector<MetricsReport> out;
    for (const Json& r : doc.at("reports")) out.push_back(report_from_json(r));
    return out;
  }

  static void write_text(const std::string& file, const std::string& text) {
    const std::filesystem::path p(file);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(file);
    if (!out) throw Error("cannot write " + file);
    out << text;
  }

  void say(const std::string& msg) const {
    if (log_) *log_ << msg << '\n';
  }

  RunConfig cfg_;
  std::ostream* log_;
  bool force_assemble_ = false;
  mutable std::optional<Problem> problem_;
};

}  // namespace hjbfl
