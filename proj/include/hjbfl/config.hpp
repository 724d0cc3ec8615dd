/**
 * @file config.hpp
 * @brief Run configuration: a `[section]` / `key = value` document whose values are JSON
 *        literals (bare words are read as strings).
 */
#pragma once

#include <map>
#include <set>

#include "hjbfl/learning.hpp"
#include "hjbfl/optimize.hpp"
#include "hjbfl/persistence.hpp"

namespace hjbfl {

enum class ProblemKind { Bilinear, Lqr };

struct ModelConfig {
  std::string family = "resnet";
  std::vector<int> arch{11, 60, 1};
  Activation activation = Activation::SinCos;
  std::uint64_t init_seed = 1;
  double epsilon = 0.5;
  double half_width = 1.0;
  /// Cube center in (t, y); empty means (T/2, ensemble center).
  Vector center;
};

struct EnsembleConfig {
  std::size_t total = 130;
  std::size_t train_count = 30;
  double radius = 1.0;
  std::uint64_t seed = 2024;
  /// Empty selects the problem's reference state.
  Vector center;
};

struct GradcheckConfig {
  std::size_t dirs = 10;
  std::size_t members = 3;
  double tolerance = 1e-3;
  double fd_step = 1e-5;
  std::uint64_t seed = 17;
};

struct RunConfig {
  ProblemKind problem = ProblemKind::Bilinear;
  int n_modes = 10;
  LQRSpec lqr;
  std::size_t n_steps = 200;
  LinearScheme linear = LinearScheme::ImplicitEuler;
  PhiTerminalConvention phi_terminal = PhiTerminalConvention::DerivedT;
  ModelConfig model;
  PenaltyConfig penalty{0.1, 0.1, 0.0};
  std::vector<std::pair<double, double>> sweep{{0, 0}, {0.1, 0.1}, {0.1, 0}, {1, 1}, {0, 1}};
  EnsembleConfig ensemble;
  BBConfig train;
  BBConfig oracle;
  GradcheckConfig gradcheck;
  std::string output_dir = "hjbfl_out";
  std::size_t threads = 0;

  RunConfig() {
    train.max_iters = 200;
    train.grad_tol = 1e-7;
    train.step_init = 1e-2;
    oracle.max_iters = 2000;
    oracle.grad_tol = 1e-8;
    oracle.relative_tol = true;
    oracle.step_init = 1.0;
  }

  [[nodiscard]] std::size_t thread_count() const { return threads > 0 ? threads : default_thread_count(); }

  void validate() const {
    if (n_modes < 1) throw ConfigError("problem.n_modes must be at least 1");
    if (problem == ProblemKind::Lqr) lqr.validate();
    if (n_steps < 2) throw ConfigError("grid.n_steps must be at least 2");
    if (linear == LinearScheme::Lobatto && n_steps % 2 != 0)
      throw ConfigError("grid.n_steps must be even for the lobatto scheme");
    if (model.family != "resnet" && model.family != "partition")
      throw ConfigError("model.family must be resnet or partition");
    penalty.validate();
    for (auto [a, b] : sweep) PenaltyConfig{a, b, 0.0}.validate();
    if (ensemble.train_count < 1 || ensemble.train_count > ensemble.total)
      throw ConfigError("ensemble.train_count must lie in [1, ensemble.total]");
    if (!(ensemble.radius >= 0.0)) throw ConfigError("ensemble.radius must be nonnegative");
    train.validate();
    oracle.validate();
    if (gradcheck.dirs < 1 || gradcheck.members < 1 || !(gradcheck.fd_step > 0.0))
      throw ConfigError("gradcheck settings must be positive");
  }

  /// Canonical JSON of every setting; hashing this identifies a run.
  [[nodiscard]] Json to_json() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

/// Drops a `#` comment that is not inside a quoted string.
inline std::string strip_comment(const std::string& s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

inline Json parse_value(const std::string& text, const std::string& key, int line) {
  try {
    return Json::parse(text);
  } catch (const Json::exception&) {
    if (text.find_first_of("[]{}\",") == std::string::npos && !text.empty()) return text;
    throw ConfigError("line " + std::to_string(line) + ": cannot parse value of '" + key + "'");
  }
}

inline Matrix matrix_from_json(const Json& j, const std::string& key) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.empty() || rows.front().empty()) throw ConfigError(key + ": empty matrix");
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows.front().size()) throw ConfigError(key + ": ragged matrix");
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  }
  return m;
}

inline Json matrix_to_json(const Matrix& m) {
  Json out = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(row);
  }
  return out;
}

inline Json bb_to_json(const BBConfig& b) {
  return {{"max_iters", b.max_iters},   {"grad_tol", b.grad_tol}, {"relative_tol", b.relative_tol},
          {"step_init", b.step_init},   {"step_min", b.step_min}, {"step_max", b.step_max},
          {"variant", to_string(b.variant)}, {"nonmonotone_window", b.nonmonotone_window}};
}

}  // namespace detail

inline Json RunConfig::to_json() const {
  Json j;
  j["problem"] = {{"kind", problem == ProblemKind::Bilinear ? "bilinear" : "lqr"}, {"n_modes", n_modes}};
  if (problem == ProblemKind::Lqr)
    j["lqr"] = {{"A", detail::matrix_to_json(lqr.A_lin)}, {"B", detail::matrix_to_json(lqr.B)},
                {"Q1", detail::matrix_to_json(lqr.Q1)},   {"Q2", detail::matrix_to_json(lqr.Q2)},
                {"alpha", lqr.alpha},                      {"beta", lqr.beta},
                {"T", lqr.T}};
  j["grid"] = {{"n_steps", n_steps}, {"linear_scheme", to_string(linear)}};
  j["learning"] = {{"phi_terminal", to_string(phi_terminal)}};
  j["model"] = {{"family", model.family},
                {"arch", model.arch},
                {"activation", to_string(model.activation)},
                {"init_seed", model.init_seed},
                {"epsilon", model.epsilon},
                {"half_width", model.half_width},
                {"center", vector_to_json(model.center)}};
  Json sw = Json::array();
  for (auto [a, b] : sweep) sw.push_back({a, b});
  j["penalty"] = {{"gamma1", penalty.gamma1}, {"gamma2", penalty.gamma2}, {"gamma_eps", penalty.gamma_eps},
                  {"sweep", sw}};
  j["ensemble"] = {{"total", ensemble.total},
                   {"train_count", ensemble.train_count},
                   {"radius", ensemble.radius},
                   {"seed", ensemble.seed},
                   {"center", vector_to_json(ensemble.center)}};
  j["train"] = detail::bb_to_json(train);
  j["oracle"] = detail::bb_to_json(oracle);
  j["gradcheck"] = {{"dirs", gradcheck.dirs},
                    {"members", gradcheck.members},
                    {"tolerance", gradcheck.tolerance},
                    {"fd_step", gradcheck.fd_step},
                    {"seed", gradcheck.seed}};
  j["run"] = {{"output_dir", output_dir}, {"threads", threads}};
  return j;
}

/**
 * Parses a configuration document. Every key must be known; later keys override earlier
 * ones, and missing keys keep their defaults.
 */
inline RunConfig parse_run_config(const std::string& text) {
  std::map<std::string, std::pair<Json, int>> kv;
  std::istringstream is(text);
  std::string raw, section;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const std::string line = detail::trim(detail::strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string full = section.empty() ? key : section + "." + key;
    kv[full] = {detail::parse_value(detail::trim(line.substr(eq + 1)), full, line_no), line_no};
  }

  RunConfig c;
  std::set<std::string> used;
  const auto take = [&](const std::string& key, auto&& apply) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    used.insert(key);
    try {
      apply(it->second.first);
    } catch (const Json::exception& e) {
      throw ConfigError("line " + std::to_string(it->second.second) + ": bad value for '" + key + "': " + e.what());
    }
  };
  const auto bb = [&](const std::string& p, BBConfig& b) {
    take(p + ".max_iters", [&](const Json& v) { b.max_iters = v.get<std::size_t>(); });
    take(p + ".grad_tol", [&](const Json& v) { b.grad_tol = v.get<double>(); });
    take(p + ".relative_tol", [&](const Json& v) { b.relative_tol = v.get<bool>(); });
    take(p + ".step_init", [&](const Json& v) { b.step_init = v.get<double>(); });
    take(p + ".step_min", [&](const Json& v) { b.step_min = v.get<double>(); });
    take(p + ".step_max", [&](const Json& v) { b.step_max = v.get<double>(); });
    take(p + ".variant", [&](const Json& v) { b.variant = parse_bb_variant(v.get<std::string>()); });
    take(p + ".nonmonotone_window", [&](const Json& v) { b.nonmonotone_window = v.get<std::size_t>(); });
  };

  take("problem.kind", [&](const Json& v) {
    const auto s = v.get<std::string>();
    if (s == "bilinear")
      c.problem = ProblemKind::Bilinear;
    else if (s == "lqr")
      c.problem = ProblemKind::Lqr;
    else
      throw ConfigError("problem.kind must be bilinear or lqr, got '" + s + "'");
  });
  take("problem.n_modes", [&](const Json& v) { c.n_modes = v.get<int>(); });
  take("lqr.A", [&](const Json& v) { c.lqr.A_lin = detail::matrix_from_json(v, "lqr.A"); });
  take("lqr.B", [&](const Json& v) { c.lqr.B = detail::matrix_from_json(v, "lqr.B"); });
  take("lqr.Q1", [&](const Json& v) { c.lqr.Q1 = detail::matrix_from_json(v, "lqr.Q1"); });
  take("lqr.Q2", [&](const Json& v) { c.lqr.Q2 = detail::matrix_from_json(v, "lqr.Q2"); });
  take("lqr.alpha", [&](const Json& v) { c.lqr.alpha = v.get<double>(); });
  take("lqr.beta", [&](const Json& v) { c.lqr.beta = v.get<double>(); });
  take("lqr.T", [&](const Json& v) { c.lqr.T = v.get<double>(); });
  take("grid.n_steps", [&](const Json& v) { c.n_steps = v.get<std::size_t>(); });
  take("grid.linear_scheme", [&](const Json& v) { c.linear = parse_linear_scheme(v.get<std::string>()); });
  take("learning.phi_terminal", [&](const Json& v) { c.phi_terminal = parse_phi_convention(v.get<std::string>()); });
  take("model.family", [&](const Json& v) { c.model.family = v.get<std::string>(); });
  take("model.arch", [&](const Json& v) { c.model.arch = v.get<std::vector<int>>(); });
  take("model.activation", [&](const Json& v) { c.model.activation = parse_activation(v.get<std::string>()); });
  take("model.init_seed", [&](const Json& v) { c.model.init_seed = v.get<std::uint64_t>(); });
  take("model.epsilon", [&](const Json& v) { c.model.epsilon = v.get<double>(); });
  take("model.half_width", [&](const Json& v) { c.model.half_width = v.get<double>(); });
  take("model.center", [&](const Json& v) { c.model.center = vector_from_json(v); });
  take("penalty.gamma1", [&](const Json& v) { c.penalty.gamma1 = v.get<double>(); });
  take("penalty.gamma2", [&](const Json& v) { c.penalty.gamma2 = v.get<double>(); });
  take("penalty.gamma_eps", [&](const Json& v) { c.penalty.gamma_eps = v.get<double>(); });
  take("penalty.sweep", [&](const Json& v) {
    c.sweep.clear();
    for (const Json& p : v) {
      const auto pair = p.get<std::vector<double>>();
      if (pair.size() != 2) throw ConfigError("penalty.sweep entries must be [gamma1, gamma2]");
      c.sweep.emplace_back(pair[0], pair[1]);
    }
  });
  take("ensemble.total", [&](const Json& v) { c.ensemble.total = v.get<std::size_t>(); });
  take("ensemble.train_count", [&](const Json& v) { c.ensemble.train_count = v.get<std::size_t>(); });
  take("ensemble.radius", [&](const Json& v) { c.ensemble.radius = v.get<double>(); });
  take("ensemble.seed", [&](const Json& v) { c.ensemble.seed = v.get<std::uint64_t>(); });
  take("ensemble.center", [&](const Json& v) { c.ensemble.center = vector_from_json(v); });
  bb("train", c.train);
  bb("oracle", c.oracle);
  take("gradcheck.dirs", [&](const Json& v) { c.gradcheck.dirs = v.get<std::size_t>(); });
  take("gradcheck.members", [&](const Json& v) { c.gradcheck.members = v.get<std::size_t>(); });
  take("gradcheck.tolerance", [&](const Json& v) { c.gradcheck.tolerance = v.get<double>(); });
  take("gradcheck.fd_step", [&](const Json& v) { c.gradcheck.fd_step = v.get<double>(); });
  take("gradcheck.seed", [&](const Json& v) { c.gradcheck.seed = v.get<std::uint64_t>(); });
  take("run.output_dir", [&](const Json& v) { c.output_dir = v.get<std::string>(); });
  take("run.threads", [&](const Json& v) { c.threads = v.get<std::size_t>(); });

  for (const auto& [key, val] : kv)
    if (!used.count(key)) throw ConfigError("line " + std::to_string(val.second) + ": unknown key '" + key + "'");
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace hjbfl
