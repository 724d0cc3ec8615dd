/**
 * @file optimize.hpp
 * @brief Barzilai-Borwein gradient descent.
 */
#pragma once

#include <algorithm>
#include <deque>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>

#include "hjbfl/core_types.hpp"

namespace hjbfl {

enum class BBVariant { BB1, BB2, Alternating };

inline std::string to_string(BBVariant v) {
  switch (v) {
    case BBVariant::BB1: return "bb1";
    case BBVariant::BB2: return "bb2";
    case BBVariant::Alternating: return "alternating";
  }
  return "?";
}

inline BBVariant parse_bb_variant(const std::string& name) {
  if (name == "bb1") return BBVariant::BB1;
  if (name == "bb2") return BBVariant::BB2;
  if (name == "alternating") return BBVariant::Alternating;
  throw ConfigError("unknown BB variant '" + name + "'");
}

struct BBConfig {
  std::size_t max_iters = 5000;
  double grad_tol = 1e-6;
  /// Stop on |grad| <= grad_tol (1 + |x|) instead of |grad| <= grad_tol.
  bool relative_tol = false;
  double step_init = 1e-3;
  double step_min = 1e-12;
  double step_max = 1e12;
  BBVariant variant = BBVariant::Alternating;
  /// A trial value above the maximum of the last `nonmonotone_window` accepted values is
  /// treated like a non-finite one. Zero disables the comparison.
  std::size_t nonmonotone_window = 0;
  /// Diagonal weights of the inner product used for norms and BB quotients; empty = Euclidean.
  Vector metric;

  void validate() const {
    if (max_iters < 1) throw ConfigError("BBConfig: max_iters must be at least 1");
    if (!(grad_tol >= 0.0)) throw ConfigError("BBConfig: grad_tol must be nonnegative");
    if (!(step_min > 0.0) || !(step_min <= step_init) || !(step_init <= step_max))
      throw ConfigError("BBConfig: need 0 < step_min <= step_init <= step_max");
    if (metric.size() > 0 && !(metric.array() > 0.0).all())
      throw ConfigError("BBConfig: metric weights must be positive");
  }
};

struct Evaluation {
  double value = 0.0;
  Vector gradient;
};

using Objective = std::function<Evaluation(const Vector&)>;

struct BBTraceRow {
  std::size_t iter = 0;
  double f = 0.0;
  double grad_norm = 0.0;
  double step = 0.0;
};

struct BBResult {
  Vector x;
  double f = 0.0;
  Vector gradient;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<BBTraceRow> trace;
};

/// Raised when no finite trial point is found after repeated step halving.
class OptimizationError : public Error {
 public:
  using Error::Error;
};

inline void write_trace_csv(const std::string& path, const std::vector<BBTraceRow>& trace) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "iter,f,grad_norm,step\n";
  for (const auto& r : trace)
    out << r.iter << ',' << format_double(r.f) << ',' << format_double(r.grad_norm) << ','
        << format_double(r.step) << '\n';
}

namespace detail {

inline double weighted_dot(const Vector& w, const Vector& a, const Vector& b) {
  return w.size() == 0 ? a.dot(b) : (w.array() * a.array() * b.array()).sum();
}

inline bool finite(const Evaluation& e) { return std::isfinite(e.value) && e.gradient.allFinite(); }

}  // namespace detail

/**
 * Minimizes f by x_{k+1} = x_k - tau_k grad f(x_k) with
 *   BB1: tau = <s,s> / <s,d>,   BB2: tau = <s,d> / <d,d>,   s = x_k - x_{k-1}, d = g_k - g_{k-1},
 * clamped to [step_min, step_max]; the first step is step_init. Without positive curvature
 * along s the step falls back to |s|/|d|. A trial point whose value or
 * gradient is non-finite, or whose evaluation fails, is retried with half the step up to 30 times.
 */
inline BBResult bb_minimize(const Objective& f, Vector x0, const BBConfig& cfg,
                            const std::function<void(const BBTraceRow&)>& on_iterate = {}) {
  cfg.validate();
  const Vector& W = cfg.metric;
  if (W.size() > 0 && W.size() != x0.size()) throw ContractError("bb_minimize: metric has wrong length");
  const auto norm = [&](const Vector& v) { return std::sqrt(detail::weighted_dot(W, v, v)); };
  const auto tolerance = [&](const Vector& x) { return cfg.grad_tol * (cfg.relative_tol ? 1.0 + norm(x) : 1.0); };

  BBResult r;
  r.x = std::move(x0);
  Evaluation cur = f(r.x);
  if (!detail::finite(cur)) throw OptimizationError("bb_minimize: objective is not finite at the initial point");
  double gnorm = norm(cur.gradient);
  r.trace.push_back({0, cur.value, gnorm, 0.0});
  if (on_iterate) on_iterate(r.trace.back());
  std::deque<double> window{cur.value};

  double tau = cfg.step_init;
  std::size_t k = 0;
  while (gnorm > tolerance(r.x) && k < cfg.max_iters) {
    Vector x_new;
    Evaluation next;
    std::string last_failure = "non-finite objective";
    bool accepted = false;
    for (int attempt = 0; attempt <= 30; ++attempt, tau *= 0.5) {
      x_new = r.x - tau * cur.gradient;
      try {
        next = f(x_new);
      } catch (const ContractError&) {
        throw;
      } catch (const Error& e) {
        last_failure = e.what();
        continue;
      }
      if (!detail::finite(next)) continue;
      if (cfg.nonmonotone_window > 0 && next.value > *std::max_element(window.begin(), window.end())) {
        last_failure = "no decrease within the nonmonotone window";
        continue;
      }
      accepted = true;
      break;
    }
    if (!accepted)
      throw OptimizationError("bb_minimize: iteration " + std::to_string(k + 1) +
                              ": step halved 30 times without an admissible trial point (" + last_failure + ")");

    const Vector s = x_new - r.x;
    const Vector d = next.gradient - cur.gradient;
    const double ss = detail::weighted_dot(W, s, s), sd = detail::weighted_dot(W, s, d),
                 dd = detail::weighted_dot(W, d, d);
    const double used = tau;
    ++k;
    const bool use_bb1 = cfg.variant == BBVariant::BB1 || (cfg.variant == BBVariant::Alternating && k % 2 == 1);
    double cand = use_bb1 ? ss / sd : sd / dd;
    if (!(sd > 0.0) || !std::isfinite(cand)) cand = dd > 0.0 ? std::sqrt(ss / dd) : used;
    tau = std::clamp(cand, cfg.step_min, cfg.step_max);

    r.x = std::move(x_new);
    cur = std::move(next);
    gnorm = norm(cur.gradient);
    r.trace.push_back({k, cur.value, gnorm, used});
    if (on_iterate) on_iterate(r.trace.back());
    if (cfg.nonmonotone_window > 0) {
      window.push_back(cur.value);
      if (window.size() > cfg.nonmonotone_window) window.pop_front();
    }
  }
  r.f = cur.value;
  r.gradient = std::move(cur.gradient);
  r.grad_norm = gnorm;
  r.iterations = k;
  r.converged = gnorm <= tolerance(r.x);
  return r;
}

}  // namespace hjbfl
