/**
 * @file metrics_report.hpp
 * @brief Validation statistics of a learned feedback against open-loop reference solutions,
 *        and their Markdown/CSV tables.
 */
#pragma once

#include <algorithm>
#include <array>
#include <json.hpp>

#include "hjbfl/openloop_oracle.hpp"

namespace hjbfl {

/// One member's rollout together with the value surrogate evaluated along it.
struct MemberTrajectories {
  Trajectory y;
  Trajectory p;
  Trajectory u;
  /// Cost-to-go J_t(y, u) at every node.
  ScalarTrajectory J_t;
  /// V_theta(t, y(t)) and its state gradient.
  ScalarTrajectory V;
  Trajectory dV;

  [[nodiscard]] double J() const { return J_t.front(); }
};

template <ValueModel M>
void attach_surrogate(const M& model, const ThetaVector& theta, MemberTrajectories& m) {
  m.V.assign(m.y.size(), 0.0);
  m.dV = Trajectory(m.y.grid, m.y.dim());
  for (std::size_t k = 0; k < m.y.size(); ++k) {
    const ModelEval e = model.evaluate(theta, m.y.grid[k], m.y.at(k), false);
    m.V[k] = e.value;
    m.dV.set(k, e.grad_y);
  }
}

/// Closed-loop state, adjoint and feedback control of the learned law from y0.
template <ValueModel M>
MemberTrajectories learned_rollout(const ProblemSpec& spec, const M& model, const ThetaVector& theta,
                                   const Vector& y0, const TimeGrid& grid, const SolverOptions& opt = {}) {
  MemberTrajectories m;
  m.y = integrate_closed_loop(spec, model, theta, y0, grid, opt);
  const auto nodes = closed_loop_nodes(spec, model, theta, m.y);
  m.p = integrate_adjoint(spec, nodes, m.y, opt);
  m.u = Trajectory(grid, spec.m);
  m.V.resize(nodes.size());
  m.dV = Trajectory(grid, spec.n);
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    m.u.set(k, nodes[k].F);
    m.V[k] = nodes[k].V.value;
    m.dV.set(k, nodes[k].V.grad_y);
  }
  m.J_t = cost_to_go(spec, m.y, m.u);
  return m;
}

/// Reference triple of an open-loop solve, with the learned surrogate evaluated along it.
template <ValueModel M>
MemberTrajectories oracle_rollout(const ProblemSpec& spec, const M& model, const ThetaVector& theta,
                                  const OpenLoopSolution& s) {
  MemberTrajectories m;
  m.y = s.y;
  m.p = s.p;
  m.u = s.u;
  m.J_t = cost_to_go(spec, s.y, s.u);
  attach_surrogate(model, theta, m);
  return m;
}

struct MetricsReport {
  SplitTag split = SplitTag::Train;
  double gamma1 = 0.0;
  double gamma2 = 0.0;
  /// Relative difference of the summed objective values; positive iff the learned law costs more.
  double err_J_avg = 0.0;
  double err_J_nmse = 0.0;
  double err_Y = 0.0;
  double err_P = 0.0;
  double err_U = 0.0;
  /// V_theta - J_t and dV_theta - p along the learned trajectories.
  double err_V = 0.0;
  double err_dV = 0.0;
  /// The same gaps along the reference trajectories.
  double d_V = 0.0;
  double d_dV = 0.0;
  std::string config_hash;
};

/// Column order shared by the JSON, CSV and table writers.
inline constexpr std::array<std::pair<const char*, double MetricsReport::*>, 9> kMetricFields{{
    {"err_J_avg", &MetricsReport::err_J_avg},
    {"err_J_nmse", &MetricsReport::err_J_nmse},
    {"err_Y", &MetricsReport::err_Y},
    {"err_P", &MetricsReport::err_P},
    {"err_U", &MetricsReport::err_U},
    {"err_V", &MetricsReport::err_V},
    {"err_dV", &MetricsReport::err_dV},
    {"d_V", &MetricsReport::d_V},
    {"d_dV", &MetricsReport::d_dV},
}};

namespace detail {

/// Sum of per-member terms in sorted order, so any permutation of the members gives the same bits.
inline double ordered_sum(std::vector<double> terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double v : terms) s += v;
  return s;
}

inline double ratio(const std::vector<double>& num, const std::vector<double>& den, const char* name) {
  const double d = ordered_sum(den);
  if (!(d > 0.0)) throw NumericError(std::string("metric ") + name + ": reference quantity is identically zero");
  return ordered_sum(num) / d;
}

inline double sq_gap(const TimeGrid& grid, const Trajectory& a, const Trajectory& b) {
  ScalarTrajectory v(a.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = (a.at(k) - b.at(k)).squaredNorm();
  return trapezoid(grid, v);
}

inline double sq_gap(const TimeGrid& grid, const ScalarTrajectory& a, const ScalarTrajectory& b) {
  ScalarTrajectory v(a.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = (a[k] - b[k]) * (a[k] - b[k]);
  return trapezoid(grid, v);
}

inline double sq_norm(const TimeGrid& grid, const ScalarTrajectory& a) {
  return sq_gap(grid, a, ScalarTrajectory(a.size(), 0.0));
}

}  // namespace detail

/**
 * All nine statistics over one split. `learned[i]` and `oracle[i]` belong to the same
 * initial condition and share one grid.
 */
inline MetricsReport compute_metrics(const std::vector<MemberTrajectories>& learned,
                                     const std::vector<MemberTrajectories>& oracle, SplitTag split,
                                     const PenaltyConfig& pen = {}) {
  if (learned.empty() || learned.size() != oracle.size())
    throw ContractError("compute_metrics: need matching, nonempty learned and reference bundles");
  const std::size_t N = learned.size();
  std::vector<double> Jl(N), Jo(N), Jgap2(N), Jo2(N);
  std::vector<double> ey(N), ny(N), ep(N), np(N), eu(N), nu(N);
  std::vector<double> ev(N), nv(N), edv(N), ndv(N), dv(N), ndvo(N), ddv(N), nddv(N);
  for (std::size_t i = 0; i < N; ++i) {
    const MemberTrajectories& a = learned[i];
    const MemberTrajectories& b = oracle[i];
    const TimeGrid& g = a.y.grid;
    require_same_grid(g, b.y.grid, "compute_metrics");
    Jl[i] = a.J();
    Jo[i] = b.J();
    Jgap2[i] = (Jl[i] - Jo[i]) * (Jl[i] - Jo[i]);
    Jo2[i] = Jo[i] * Jo[i];
    ey[i] = detail::sq_gap(g, a.y, b.y);
    ny[i] = l2_norm_sq(b.y);
    ep[i] = detail::sq_gap(g, a.p, b.p);
    np[i] = l2_norm_sq(b.p);
    eu[i] = detail::sq_gap(g, a.u, b.u);
    nu[i] = l2_norm_sq(b.u);
    ev[i] = detail::sq_gap(g, a.V, a.J_t);
    nv[i] = detail::sq_norm(g, a.J_t);
    edv[i] = detail::sq_gap(g, a.dV, a.p);
    ndv[i] = l2_norm_sq(a.p);
    dv[i] = detail::sq_gap(g, b.V, b.J_t);
    ndvo[i] = detail::sq_norm(g, b.J_t);
    ddv[i] = detail::sq_gap(g, b.dV, b.p);
    nddv[i] = l2_norm_sq(b.p);
  }
  MetricsReport r;
  r.split = split;
  r.gamma1 = pen.gamma1;
  r.gamma2 = pen.gamma2;
  const double sum_o = detail::ordered_sum(Jo);
  if (!(sum_o > 0.0)) throw NumericError("metric err_J_avg: reference objective sum is zero");
  r.err_J_avg = (detail::ordered_sum(Jl) - sum_o) / sum_o;
  r.err_J_nmse = detail::ratio(Jgap2, Jo2, "err_J_nmse");
  r.err_Y = detail::ratio(ey, ny, "err_Y");
  r.err_P = detail::ratio(ep, np, "err_P");
  r.err_U = detail::ratio(eu, nu, "err_U");
  r.err_V = detail::ratio(ev, nv, "err_V");
  r.err_dV = detail::ratio(edv, ndv, "err_dV");
  r.d_V = detail::ratio(dv, ndvo, "d_V");
  r.d_dV = detail::ratio(ddv, nddv, "d_dV");
  return r;
}

// ============================================================================
// Serialization
// ============================================================================

inline SplitTag parse_split(const std::string& s) {
  if (s == "train") return SplitTag::Train;
  if (s == "validation") return SplitTag::Validation;
  throw ConfigError("unknown split '" + s + "'");
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json m = nlohmann::json::object();
  for (const auto& [name, field] : kMetricFields) m[name] = r.*field;
  return {{"split", to_string(r.split)},
          {"gamma1", r.gamma1},
          {"gamma2", r.gamma2},
          {"metrics", m},
          {"config_hash", r.config_hash}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  try {
    MetricsReport r;
    r.split = parse_split(j.at("split").get<std::string>());
    r.gamma1 = j.at("gamma1").get<double>();
    r.gamma2 = j.at("gamma2").get<double>();
    r.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& [name, field] : kMetricFields) r.*field = j.at("metrics").at(name).get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("metrics report: ") + e.what());
  }
}

/// Percent with two significant digits; "0 %" for an exact zero.
inline std::string format_percent(double ratio) {
  const double p = 100.0 * ratio;
  if (p == 0.0) return "0 %";
  if (!std::isfinite(p)) return "nan %";
  const int decimals = std::max(0, 1 - static_cast<int>(std::floor(std::log10(std::abs(p)))));
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f %%", decimals, p);
  return buf;
}

struct TableDocument {
  std::string markdown;
  std::string csv;
};

namespace detail {

inline std::string short_number(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline std::string penalty_label(const MetricsReport& r) {
  return "gamma1 = " + short_number(r.gamma1) + ", gamma2 = " + short_number(r.gamma2);
}

}  // namespace detail

inline std::string csv_header() {
  std::string h = "split,gamma1,gamma2,config_hash";
  for (const auto& f : kMetricFields) h += std::string(",") + f.first;
  return h;
}

/**
 * Two tables per split in the order the splits first appear: objective, state, adjoint and
 * control errors, then the value-function statistics. The CSV keeps the raw ratios.
 */
inline TableDocument emit_tables(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ContractError("emit_tables: no reports");
  std::vector<SplitTag> splits;
  for (const auto& r : reports)
    if (std::find(splits.begin(), splits.end(), r.split) == splits.end()) splits.push_back(r.split);

  std::ostringstream md;
  const auto row = [&](const MetricsReport& r, std::initializer_list<double MetricsReport::*> cols) {
    md << "| " << detail::penalty_label(r);
    for (auto c : cols) md << " | " << format_percent(r.*c);
    md << " |\n";
  };
  for (std::size_t s = 0; s < splits.size(); ++s) {
    if (s > 0) md << '\n';
    md << "### " << (splits[s] == SplitTag::Train ? "Training set" : "Validation set") << "\n\n";
    md << "| Penalty | Err_Jcal | Err_Y | Err_P | Err_U |\n|---|---|---|---|---|\n";
    for (const auto& r : reports)
      if (r.split == splits[s])
        row(r, {&MetricsReport::err_J_avg, &MetricsReport::err_Y, &MetricsReport::err_P, &MetricsReport::err_U});
    md << "\n| Penalty | Err_J | Err_V | Err_dV | d(V) | d(dV) |\n|---|---|---|---|---|---|\n";
    for (const auto& r : reports)
      if (r.split == splits[s])
        row(r, {&MetricsReport::err_J_nmse, &MetricsReport::err_V, &MetricsReport::err_dV, &MetricsReport::d_V,
                &MetricsReport::d_dV});
  }

  std::ostringstream csv;
  csv << csv_header() << '\n';
  for (const auto& r : reports) {
    csv << to_string(r.split) << ',' << format_double(r.gamma1) << ',' << format_double(r.gamma2) << ','
        << r.config_hash;
    for (const auto& f : kMetricFields) csv << ',' << format_double(r.*(f.second));
    csv << '\n';
  }
  return {md.str(), csv.str()};
}

/// Inverse of the CSV half of emit_tables.
inline std::vector<MetricsReport> parse_reports_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != csv_header()) throw ConfigError("metrics CSV: unexpected header");
  std::vector<MetricsReport> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != 4 + kMetricFields.size()) throw ConfigError("metrics CSV: wrong column count");
    MetricsReport r;
    r.split = parse_split(cells[0]);
    r.gamma1 = std::stod(cells[1]);
    r.gamma2 = std::stod(cells[2]);
    r.config_hash = cells[3];
    for (std::size_t k = 0; k < kMetricFields.size(); ++k) r.*(kMetricFields[k].second) = std::stod(cells[4 + k]);
    out.push_back(r);
  }
  return out;
}

}  // namespace hjbfl
