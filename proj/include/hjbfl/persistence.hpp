/**
 * @file persistence.hpp
 * @brief JSON documents for parameters, ensembles and open-loop controls.
 */
#pragma once

#include <cstdio>
#include <filesystem>
#include <json.hpp>

#include "hjbfl/openloop_oracle.hpp"
#include "hjbfl/partition_model.hpp"
#include "hjbfl/resnet_model.hpp"

namespace hjbfl {

using Json = nlohmann::json;

/// Writes through a temporary file and a rename so readers never see a partial document.
inline void write_json_file(const std::string& path, const Json& j) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write " + tmp);
    out << j.dump(1) << '\n';
    if (!out) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline Json vector_to_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Vector vector_from_json(const Json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// ============================================================================
// Parameters
// ============================================================================

inline Json theta_to_json(const ResidualNetModel& model, const ThetaVector& theta) {
  return {{"family", "resnet"},
          {"arch", model.arch()},
          {"activation", to_string(model.activation_kind())},
          {"theta", vector_to_json(theta)}};
}

inline Json theta_to_json(const PartitionPolyModel& model, const ThetaVector& theta) {
  return {{"family", "partition"},
          {"epsilon", model.epsilon()},
          {"center", vector_to_json(model.center())},
          {"half_width", model.half_width()},
          {"theta", vector_to_json(theta)}};
}

namespace detail {

inline ThetaVector checked_theta(const Json& j, const std::string& family, Eigen::Index expected) {
  try {
    if (j.at("family").get<std::string>() != family)
      throw ConfigError("parameter file holds family '" + j.at("family").get<std::string>() + "', expected '" +
                        family + "'");
    ThetaVector theta = vector_from_json(j.at("theta"));
    if (theta.size() != expected)
      throw ConfigError("parameter file has " + std::to_string(theta.size()) + " entries, layout needs " +
                        std::to_string(expected));
    return theta;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("parameter file: ") + e.what());
  }
}

}  // namespace detail

/// Parameters for `model`; the stored architecture must match.
inline ThetaVector theta_from_json(const Json& j, const ResidualNetModel& model) {
  ThetaVector theta = detail::checked_theta(j, "resnet", model.n_params());
  if (j.at("arch").get<std::vector<int>>() != model.arch())
    throw ConfigError("parameter file architecture does not match the model");
  return theta;
}

inline ThetaVector theta_from_json(const Json& j, const PartitionPolyModel& model) {
  ThetaVector theta = detail::checked_theta(j, "partition", model.n_params());
  if (j.at("epsilon").get<double>() != model.epsilon() || j.at("half_width").get<double>() != model.half_width() ||
      vector_from_json(j.at("center")) != model.center())
    throw ConfigError("parameter file partition layout does not match the model");
  return theta;
}

// ============================================================================
// Ensembles and open-loop controls
// ============================================================================

inline Json ensemble_to_json(const EnsembleSet& e) {
  Json pts = Json::array();
  for (const Vector& p : e.points) pts.push_back(vector_to_json(p));
  std::vector<std::string> tags;
  for (SplitTag t : e.tags) tags.emplace_back(to_string(t));
  return {{"seed", e.seed},   {"radius", e.radius}, {"center", vector_to_json(e.center)},
          {"points", pts},    {"weights", e.weights}, {"tags", tags}};
}

inline EnsembleSet ensemble_from_json(const Json& j) {
  try {
    EnsembleSet e;
    e.seed = j.at("seed").get<std::uint64_t>();
    e.radius = j.at("radius").get<double>();
    e.center = vector_from_json(j.at("center"));
    for (const Json& p : j.at("points")) e.points.push_back(vector_from_json(p));
    e.weights = j.at("weights").get<std::vector<double>>();
    for (const Json& t : j.at("tags"))
      e.tags.push_back(t.get<std::string>() == "train" ? SplitTag::Train : SplitTag::Validation);
    e.validate();
    return e;
  } catch (const Json::exception& ex) {
    throw ConfigError(std::string("ensemble file: ") + ex.what());
  }
}

/// Controls of the open-loop solves, row-major per member; states and adjoints are recomputed on load.
inline Json open_loop_to_json(const std::vector<OpenLoopSolution>& sols) {
  Json members = Json::array();
  for (const auto& s : sols)
    members.push_back({{"u", vector_to_json(detail::flatten(s.u))},
                       {"J", s.J},
                       {"iterations", s.iterations},
                       {"converged", s.converged},
                       {"grad_norm", s.grad_norm}});
  return {{"members", members}};
}

inline std::vector<OpenLoopSolution> open_loop_from_json(const Json& j, const ProblemSpec& spec,
                                                         const EnsembleSet& ens, const TimeGrid& grid,
                                                         const SolverOptions& opt = {}) {
  try {
    const Json& members = j.at("members");
    if (members.size() != ens.size()) throw ConfigError("open-loop file does not match the ensemble size");
    std::vector<OpenLoopSolution> out(ens.size());
    for (std::size_t i = 0; i < ens.size(); ++i) {
      const Json& m = members[i];
      const Vector flat = vector_from_json(m.at("u"));
      if (flat.size() != static_cast<Eigen::Index>(grid.size()) * spec.m)
        throw ConfigError("open-loop file does not match the time grid");
      OpenLoopSolution& s = out[i];
      s.u = detail::unflatten(grid, flat, spec.m);
      const OpenLoopEvaluation e = evaluate_open_loop(spec, ens.points[i], s.u, opt);
      s.y = e.y;
      s.p = e.p;
      s.J = e.J;
      s.iterations = m.at("iterations").get<std::size_t>();
      s.converged = m.at("converged").get<bool>();
      s.grad_norm = m.at("grad_norm").get<double>();
    }
    return out;
  } catch (const Json::exception& ex) {
    throw ConfigError(std::string("open-loop file: ") + ex.what());
  }
}

}  // namespace hjbfl
