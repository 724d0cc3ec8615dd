/**
 * @file partition_model.hpp
 * @brief Partition-of-unity blend of local quadratic surrogates
 *
 *   V(t,y) = alpha/2 |Q2 (y - y_dT)|^2 + S(t,y) - S(T,y),
 *   S(x)   = sum_{i in I} phi_i(x) P_i(x),
 *   P_i(x) = c_i + b_i . (x - x_i) + 1/2 (x - x_i)^T A_i (x - x_i),
 *
 * on a cube of cells of width eps in (t,y)-space. phi_j = psi_j / sum_all psi
 * with psi_j the standard mollifier centred at the barycenter of cell j.
 * The outermost cell layer only contributes to the denominator.
 */
#pragma once

#include <functional>
#include <vector>

#include "hjbfl/value_model.hpp"

namespace hjbfl {

/// Value, gradient and Hessian of a reference function in full (t,y) coordinates.
struct TaylorData {
  double value = 0.0;
  Vector grad;
  Matrix hess;
};

class PartitionPolyModel : public ValueModelBase<PartitionPolyModel> {
 public:
  /// One interior weight with its (t,y)-derivatives.
  struct Weight {
    Eigen::Index slot = 0;
    double phi = 0.0;
    Vector grad;
    Matrix hess;
  };

  /**
   * @param center      cube center in (t,y), length n+1
   * @param half_width  half-width of the region that must be covered
   */
  PartitionPolyModel(double epsilon, Vector center, double half_width, TerminalHead head)
      : eps_(epsilon), half_width_(half_width), center_(std::move(center)), head_(std::move(head)) {
    if (!(epsilon > 0.0)) throw ConfigError("PartitionPolyModel: epsilon must be positive");
    if (!(half_width > 0.0)) throw ConfigError("PartitionPolyModel: half width must be positive");
    d_ = static_cast<int>(center_.size());
    if (d_ < 2) throw ConfigError("PartitionPolyModel: need at least one state dimension");
    if (d_ - 1 > 3) throw CapabilityError("PartitionPolyModel: state dimension above 3 is not supported");
    if (head_.y_dT.size() != d_ - 1) throw ConfigError("PartitionPolyModel: head has wrong dimension");
    n_eps_ = static_cast<int>(std::ceil(half_width / epsilon - 1e-12));
    pad_ = static_cast<int>(std::ceil(0.5 * std::sqrt(static_cast<double>(d_)))) + 1;
    radius_ = epsilon * (0.5 * std::sqrt(static_cast<double>(d_)) + 0.1);
    cells_ = 2 * n_eps_ + 2 * pad_;
    covered_half_ = epsilon * n_eps_;
    lower_ = center_.array() - (covered_half_ + pad_ * epsilon);
    n_interior_ = 1;
    for (int k = 0; k < d_; ++k) n_interior_ *= (cells_ - 2);
    block_ = d_ * (d_ + 1) / 2 + d_ + 1;
    overlap_bound_ = count_overlap_bound();
  }

  [[nodiscard]] Eigen::Index n_params() const noexcept { return n_interior_ * block_; }
  [[nodiscard]] int state_dim() const noexcept { return d_ - 1; }
  [[nodiscard]] const TerminalHead& head() const noexcept { return head_; }

  [[nodiscard]] double epsilon() const noexcept { return eps_; }
  [[nodiscard]] double half_width() const noexcept { return half_width_; }
  [[nodiscard]] double radius() const noexcept { return radius_; }
  [[nodiscard]] int cells_per_dim() const noexcept { return cells_; }
  [[nodiscard]] int padding_layers() const noexcept { return pad_; }
  [[nodiscard]] Eigen::Index interior_count() const noexcept { return n_interior_; }
  [[nodiscard]] Eigen::Index block_size() const noexcept { return block_; }
  [[nodiscard]] const Vector& center() const noexcept { return center_; }
  /// The covered set is center + [-covered_half_width, covered_half_width]^(n+1).
  [[nodiscard]] double covered_half_width() const noexcept { return covered_half_; }
  /// Upper bound on the number of mollifiers that are nonzero at one point.
  [[nodiscard]] int overlap_bound() const noexcept { return overlap_bound_; }

  [[nodiscard]] bool in_cover(const Vector& x) const {
    return ((x - center_).cwiseAbs().array() <= covered_half_ * (1.0 + 1e-14)).all();
  }

  /// Barycenter of the interior cell stored in parameter slot `slot`.
  [[nodiscard]] Vector node(Eigen::Index slot) const {
    Vector x(d_);
    for (int k = d_ - 1; k >= 0; --k) {
      const auto j = static_cast<int>(slot % (cells_ - 2)) + 1;
      slot /= (cells_ - 2);
      x[k] = lower_[k] + (j + 0.5) * eps_;
    }
    return x;
  }

  /// Number of mollifiers (interior and boundary) nonzero at x.
  [[nodiscard]] int active_count(const Vector& x) const {
    int count = 0;
    for_each_near(x, [&](const std::vector<int>&, const Vector& delta) {
      if (delta.squaredNorm() < radius_ * radius_) ++count;
    });
    return count;
  }

  /// Interior weights nonzero at x, with first and second derivatives.
  [[nodiscard]] std::vector<Weight> weights(const Vector& x) const {
    std::vector<Weight> out;
    double Psi = 0.0;
    Vector dPsi = Vector::Zero(d_);
    Matrix hPsi = Matrix::Zero(d_, d_);
    for_each_near(x, [&](const std::vector<int>& idx, const Vector& delta) {
      Mollifier m;
      if (!mollify(delta, true, m)) return;
      Psi += m.value;
      dPsi += m.grad;
      hPsi += m.hess;
      if (interior(idx)) out.push_back({slot_of(idx), m.value, m.grad, m.hess});
    });
    if (Psi <= 0.0) return {};
    for (auto& w : out) {
      const double psi = w.phi;
      const Vector dpsi = w.grad;
      w.phi = psi / Psi;
      w.grad = (dpsi - w.phi * dPsi) / Psi;
      w.hess = (w.hess - w.grad * dPsi.transpose() - dPsi * w.grad.transpose() - w.phi * hPsi) / Psi;
    }
    return out;
  }

  [[nodiscard]] ModelEval evaluate(const ThetaVector& theta, double t, const Vector& y, bool with_hess) const {
    check(theta, y);
    const Blend at_t = blend(theta, point(t, y), with_hess);
    const Blend at_T = blend(theta, point(head_.T, y), with_hess);
    ModelEval out;
    out.value = head_.value(y) + (at_t.value - at_T.value);
    out.grad_y = head_.grad(y) + (at_t.grad - at_T.grad).tail(d_ - 1);
    if (with_hess) {
      const Matrix diff = at_t.hess - at_T.hess;
      out.hess_yy = head_.hess() + diff.bottomRightCorner(d_ - 1, d_ - 1);
      out.hess_yy = 0.5 * (out.hess_yy + out.hess_yy.transpose()).eval();
    }
    return out;
  }

  [[nodiscard]] Vector theta_vjp(const ThetaVector& theta, double t, const Vector& y, double c,
                                 const Vector& v) const {
    check(theta, y);
    Vector grad = Vector::Zero(n_params());
    Vector vf = Vector::Zero(d_);
    vf.tail(d_ - 1) = v;
    accumulate_vjp(point(t, y), c, vf, 1.0, grad);
    accumulate_vjp(point(head_.T, y), c, vf, -1.0, grad);
    return grad;
  }

  /// Parameters whose local polynomials are the second-order Taylor expansions
  /// of `ref` at the cell barycenters.
  [[nodiscard]] ThetaVector taylor_init(const std::function<TaylorData(const Vector&)>& ref) const {
    ThetaVector theta(n_params());
    for (Eigen::Index s = 0; s < n_interior_; ++s) {
      const TaylorData td = ref(node(s));
      if (td.grad.size() != d_ || td.hess.rows() != d_ || td.hess.cols() != d_)
        throw ContractError("taylor_init: reference data has wrong dimension");
      double* p = theta.data() + s * block_;
      for (int k = 0; k < d_; ++k)
        for (int l = k; l < d_; ++l) *p++ = 0.5 * (td.hess(k, l) + td.hess(l, k));
      for (int k = 0; k < d_; ++k) *p++ = td.grad[k];
      *p = td.value;
    }
    return theta;
  }

 private:
  struct Mollifier {
    double value = 0.0;
    Vector grad;
    Matrix hess;
  };
  struct Blend {
    double value = 0.0;
    Vector grad;
    Matrix hess;
  };

  [[nodiscard]] Vector point(double t, const Vector& y) const {
    Vector x(d_);
    x[0] = t;
    x.tail(d_ - 1) = y;
    return x;
  }

  void check(const ThetaVector& theta, const Vector& y) const {
    if (theta.size() != n_params()) throw ContractError("PartitionPolyModel: theta has wrong length");
    if (y.size() != d_ - 1) throw ContractError("PartitionPolyModel: state has wrong dimension");
  }

  [[nodiscard]] bool interior(const std::vector<int>& idx) const {
    for (int j : idx)
      if (j < 1 || j > cells_ - 2) return false;
    return true;
  }

  [[nodiscard]] Eigen::Index slot_of(const std::vector<int>& idx) const {
    Eigen::Index s = 0;
    for (int j : idx) s = s * (cells_ - 2) + (j - 1);
    return s;
  }

  /// psi(x - x_j) = exp(1 / (|delta/r|^2 - 1)) inside the ball, with derivatives.
  bool mollify(const Vector& delta, bool with_hess, Mollifier& m) const {
    const double r2 = radius_ * radius_;
    const double q = delta.squaredNorm() / r2 - 1.0;
    if (q >= 0.0) return false;
    m.value = std::exp(1.0 / q);
    if (m.value == 0.0) return false;
    const double w = -2.0 / (r2 * q * q);
    m.grad = m.value * w * delta;
    if (with_hess) {
      m.hess = Matrix::Identity(d_, d_) * (m.value * w);
      m.hess.noalias() += (m.value * (w * w + 8.0 / (r2 * r2 * q * q * q))) * (delta * delta.transpose());
    }
    return true;
  }

  /// Visits every cell whose barycenter could lie within the mollifier radius of x.
  template <class Visit>
  void for_each_near(const Vector& x, Visit&& visit) const {
    std::vector<int> lo(d_), hi(d_), idx(d_);
    const double reach = radius_ / eps_;
    for (int k = 0; k < d_; ++k) {
      const double u = (x[k] - lower_[k]) / eps_ - 0.5;
      lo[k] = std::max(0, static_cast<int>(std::ceil(u - reach)));
      hi[k] = std::min(cells_ - 1, static_cast<int>(std::floor(u + reach)));
      if (lo[k] > hi[k]) return;
    }
    idx = lo;
    Vector delta(d_);
    while (true) {
      for (int k = 0; k < d_; ++k) delta[k] = x[k] - (lower_[k] + (idx[k] + 0.5) * eps_);
      visit(idx, delta);
      int k = d_ - 1;
      while (k >= 0 && idx[k] == hi[k]) {
        idx[k] = lo[k];
        --k;
      }
      if (k < 0) break;
      ++idx[k];
    }
  }

  [[nodiscard]] Blend blend(const ThetaVector& theta, const Vector& x, bool with_hess) const {
    Blend out;
    out.grad = Vector::Zero(d_);
    if (with_hess) out.hess = Matrix::Zero(d_, d_);
    for (const Weight& w : weights(x)) {
      const double* p = theta.data() + w.slot * block_;
      const Vector delta = x - node(w.slot);
      Matrix A(d_, d_);
      for (int k = 0; k < d_; ++k)
        for (int l = k; l < d_; ++l) A(k, l) = A(l, k) = *p++;
      const Eigen::Map<const Vector> b(p, d_);
      const double c = p[d_];
      const Vector Ad = A * delta;
      const double P = c + b.dot(delta) + 0.5 * delta.dot(Ad);
      const Vector dP = b + Ad;
      out.value += w.phi * P;
      out.grad += w.grad * P + w.phi * dP;
      if (with_hess) {
        out.hess += w.hess * P + w.grad * dP.transpose() + dP * w.grad.transpose() + w.phi * A;
      }
    }
    return out;
  }

  void accumulate_vjp(const Vector& x, double c, const Vector& vf, double sign, Vector& grad) const {
    for (const Weight& w : weights(x)) {
      double* g = grad.data() + w.slot * block_;
      const Vector delta = x - node(w.slot);
      const double a = c * w.phi + vf.dot(w.grad);
      for (int k = 0; k < d_; ++k)
        for (int l = k; l < d_; ++l) {
          const double quad = (k == l ? 0.5 : 1.0) * delta[k] * delta[l];
          const double lin = (k == l) ? vf[k] * delta[k] : vf[k] * delta[l] + vf[l] * delta[k];
          *g++ += sign * (a * quad + w.phi * lin);
        }
      for (int k = 0; k < d_; ++k) *g++ += sign * (a * delta[k] + w.phi * vf[k]);
      *g += sign * a;
    }
  }

  [[nodiscard]] int count_overlap_bound() const {
    const double reach2 = (radius_ / eps_) * (radius_ / eps_);
    const int span = static_cast<int>(std::ceil(radius_ / eps_ + 0.5));
    std::vector<int> idx(d_, -span);
    int count = 0;
    while (true) {
      double dist2 = 0.0;
      for (int j : idx) {
        const double e = std::max(std::abs(j) - 0.5, 0.0);
        dist2 += e * e;
      }
      if (dist2 < reach2) ++count;
      int k = d_ - 1;
      while (k >= 0 && idx[k] == span) {
        idx[k] = -span;
        --k;
      }
      if (k < 0) break;
      ++idx[k];
    }
    return count;
  }

  double eps_;
  double half_width_;
  Vector center_;
  TerminalHead head_;
  int d_ = 0;
  int n_eps_ = 0;
  int pad_ = 0;
  double radius_ = 0.0;
  int cells_ = 0;
  double covered_half_ = 0.0;
  Vector lower_;
  Eigen::Index n_interior_ = 0;
  Eigen::Index block_ = 0;
  int overlap_bound_ = 0;
};

}  // namespace hjbfl
