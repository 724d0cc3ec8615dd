// Command-line driver for the feedback-learning pipeline.
//
//   hjbfl <command> --config <file> [--out <dir>] [--seed <u64>] [--dirs <k>]
//
// Exit status: 0 on success, 2 when a check fails, 1 on any error.

#include <CLI11.hpp>
#include <cstdio>

#include "hjbfl/hjbfl.hpp"

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> dirs;
  std::optional<double> gamma1;
  std::optional<double> gamma2;
  bool sweep = false;
  bool force = false;
};

hjbfl::RunConfig load(const Options& o) {
  hjbfl::RunConfig c = hjbfl::load_run_config(o.config);
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.seed) {
    c.ensemble.seed = *o.seed;
    c.model.init_seed = *o.seed;
  }
  if (o.gamma1) c.penalty.gamma1 = *o.gamma1;
  if (o.gamma2) c.penalty.gamma2 = *o.gamma2;
  c.validate();
  return c;
}

/// The configured penalty, or every sweep entry with --sweep.
std::vector<hjbfl::PenaltyConfig> penalties(const Options& o, const hjbfl::Pipeline& p) {
  if (!o.sweep) return {p.config().penalty};
  std::vector<hjbfl::PenaltyConfig> out;
  for (auto [a, b] : p.config().sweep) out.push_back(p.with_gammas(a, b));
  return out;
}

int run(const std::string& command, const Options& o) {
  hjbfl::Pipeline p(load(o));
  if (command == "assemble") {
    p.cmd_assemble(o.force);
  } else if (command == "ensemble") {
    p.cmd_ensemble();
  } else if (command == "oracle") {
    p.cmd_oracle();
  } else if (command == "train") {
    for (const auto& pen : penalties(o, p)) {
      const auto r = p.cmd_train(pen);
      std::printf("gamma1 = %s, gamma2 = %s: objective %s after %zu iterations%s\n",
                  hjbfl::detail::short_number(pen.gamma1).c_str(), hjbfl::detail::short_number(pen.gamma2).c_str(),
                  hjbfl::format_double(r.objective).c_str(), r.iterations, r.cached ? " (cached)" : "");
    }
  } else if (command == "validate") {
    for (const auto& pen : penalties(o, p))
      for (const auto& r : p.cmd_validate(pen)) std::printf("%s\n", hjbfl::to_json(r).dump().c_str());
  } else if (command == "report") {
    std::printf("%s", p.cmd_report().markdown.c_str());
  } else if (command == "gradcheck") {
    const auto r = p.cmd_gradcheck(p.config().penalty, o.dirs.value_or(p.config().gradcheck.dirs));
    for (std::size_t k = 0; k < r.rel_errors.size(); ++k) {
      std::printf("direction %zu: relative error %.3e", k, r.rel_errors[k]);
      if (!r.refined_errors.empty()) std::printf(", refined grid %.3e", r.refined_errors[k]);
      std::printf("\n");
    }
    std::printf("gradcheck %s (worst %.3e, tolerance %.1e)\n", r.passed ? "passed" : "FAILED", r.worst,
                p.config().gradcheck.tolerance);
    return r.passed ? 0 : 2;
  } else if (command == "run") {
    std::printf("%s", p.run_all().markdown.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learning optimal feedback laws from value-function penalties"};
  app.require_subcommand(1);
  Options o;
  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output directory (overrides run.output_dir)");
    sub->add_option("--seed", o.seed, "seed for the ensemble and the parameter initialization");
  };
  const auto penalty = [&](CLI::App* sub) {
    sub->add_option("--gamma1", o.gamma1, "value-matching penalty weight");
    sub->add_option("--gamma2", o.gamma2, "gradient-matching penalty weight");
  };
  const std::vector<std::pair<std::string, std::string>> commands{
      {"assemble", "assemble and cache the bilinear benchmark matrices"},
      {"ensemble", "sample the initial-state ensemble"},
      {"oracle", "solve the open-loop problems for every ensemble member"},
      {"train", "fit the value model on the training split"},
      {"validate", "compare learned feedback and open-loop solutions on both splits"},
      {"report", "print metric tables over the penalty sweep"},
      {"gradcheck", "compare the analytic gradient with finite differences"},
      {"run", "every stage for every penalty in the sweep"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    common(sub);
    if (name == "assemble") sub->add_flag("--force", o.force, "reassemble even if a cached copy exists");
    if (name == "train" || name == "validate") {
      penalty(sub);
      sub->add_flag("--sweep", o.sweep, "every penalty pair of penalty.sweep");
    }
    if (name == "gradcheck") {
      penalty(sub);
      sub->add_option("--dirs", o.dirs, "number of random directions")->check(CLI::PositiveNumber);
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    return run(app.get_subcommands().front()->get_name(), o);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "hjbfl: %s\n", e.what());
    return 1;
  }
}
