/**
 * @file resnet_model.hpp
 * @brief Residual-network value model with the terminal shift
 *
 *   V(t,y) = alpha/2 |Q2 (y - y_dT)|^2 + N(t,y) - N(T,y),
 *   N = f_L o ... o f_1,  f_i(x) = sigma(W_i1 x + b_i) + W_i2 x,  f_L(x) = W_L x.
 *
 * All derivatives are hand-coded: the y-gradient by a reverse sweep, the
 * y-Hessian from forward tangents and the layer adjoints, and theta-gradients
 * of c V + v . grad_y V by reversing the tangent-linear program along (0, v).
 */
#pragma once

#include <random>
#include <vector>

#include "hjbfl/activation.hpp"
#include "hjbfl/value_model.hpp"

namespace hjbfl {

class ResidualNetModel : public ValueModelBase<ResidualNetModel> {
  using MapC = Eigen::Map<const RowMatrix>;
  using MapM = Eigen::Map<RowMatrix>;

 public:
  /// Offsets into the flat parameter vector for one hidden layer.
  struct LayerBlock {
    Eigen::Index w1 = 0;
    Eigen::Index w2 = 0;
    Eigen::Index b = 0;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
  };

  ResidualNetModel(std::vector<int> arch, Activation act, TerminalHead head)
      : arch_(std::move(arch)), act_(act), head_(std::move(head)) {
    if (arch_.size() < 3) throw ConfigError("ResidualNetModel: need at least two layers");
    if (arch_.back() != 1) throw ConfigError("ResidualNetModel: last width must be 1");
    for (int w : arch_)
      if (w < 1) throw ConfigError("ResidualNetModel: widths must be positive");
    if (head_.y_dT.size() != arch_.front() - 1)
      throw ConfigError("ResidualNetModel: first width must be state dimension + 1");
    Eigen::Index off = 0;
    for (std::size_t i = 1; i + 1 < arch_.size(); ++i) {
      LayerBlock blk;
      blk.rows = arch_[i];
      blk.cols = arch_[i - 1];
      blk.w1 = off;
      off += blk.rows * blk.cols;
      blk.w2 = off;
      off += blk.rows * blk.cols;
      blk.b = off;
      off += blk.rows;
      blocks_.push_back(blk);
    }
    out_offset_ = off;
    n_params_ = off + arch_[arch_.size() - 2];
  }

  [[nodiscard]] Eigen::Index n_params() const noexcept { return n_params_; }
  [[nodiscard]] int state_dim() const noexcept { return arch_.front() - 1; }
  [[nodiscard]] const TerminalHead& head() const noexcept { return head_; }
  [[nodiscard]] const std::vector<int>& arch() const noexcept { return arch_; }
  [[nodiscard]] Activation activation_kind() const noexcept { return act_; }
  [[nodiscard]] const std::vector<LayerBlock>& layer_blocks() const noexcept { return blocks_; }
  [[nodiscard]] Eigen::Index output_offset() const noexcept { return out_offset_; }

  /// W entries i.i.d. uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero.
  [[nodiscard]] ThetaVector init_theta(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    ThetaVector theta = ThetaVector::Zero(n_params_);
    auto fill = [&](Eigen::Index off, Eigen::Index count, int fan_in) {
      const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-s, s);
      for (Eigen::Index k = 0; k < count; ++k) theta[off + k] = dist(rng);
    };
    for (const auto& blk : blocks_) {
      fill(blk.w1, blk.rows * blk.cols, static_cast<int>(blk.cols));
      fill(blk.w2, blk.rows * blk.cols, static_cast<int>(blk.cols));
    }
    fill(out_offset_, arch_[arch_.size() - 2], arch_[arch_.size() - 2]);
    return theta;
  }

  [[nodiscard]] ModelEval evaluate(const ThetaVector& theta, double t, const Vector& y, bool with_hess) const {
    check(theta, y);
    ModelEval out;
    const PointEval at_t = eval_point(theta, point(t, y), with_hess);
    const PointEval at_T = eval_point(theta, point(head_.T, y), with_hess);
    out.value = head_.value(y) + (at_t.value - at_T.value);
    out.grad_y = head_.grad(y) + (at_t.grad - at_T.grad);
    if (with_hess) {
      out.hess_yy = head_.hess() + (at_t.hess - at_T.hess);
      out.hess_yy = 0.5 * (out.hess_yy + out.hess_yy.transpose()).eval();
    }
    return out;
  }

  [[nodiscard]] Vector theta_vjp(const ThetaVector& theta, double t, const Vector& y, double c,
                                 const Vector& v) const {
    check(theta, y);
    Vector grad = Vector::Zero(n_params_);
    reverse_tangent(theta, point(t, y), c, v, 1.0, grad);
    reverse_tangent(theta, point(head_.T, y), c, v, -1.0, grad);
    return grad;
  }

 private:
  struct PointEval {
    double value = 0.0;
    Vector grad;
    Matrix hess;
  };

  [[nodiscard]] Vector point(double t, const Vector& y) const {
    Vector x(y.size() + 1);
    x[0] = t;
    x.tail(y.size()) = y;
    return x;
  }

  void check(const ThetaVector& theta, const Vector& y) const {
    if (theta.size() != n_params_) throw ContractError("ResidualNetModel: theta has wrong length");
    if (y.size() != state_dim()) throw ContractError("ResidualNetModel: state has wrong dimension");
  }

  [[nodiscard]] Vector act(const Vector& z, int order) const {
    Vector out(z.size());
    for (Eigen::Index j = 0; j < z.size(); ++j) {
      if (!std::isfinite(z[j])) throw NumericError("ResidualNetModel: non-finite activation input");
      out[j] = activation(act_, z[j], order);
    }
    return out;
  }

  [[nodiscard]] PointEval eval_point(const ThetaVector& theta, const Vector& x, bool with_hess) const {
    const int n = state_dim();
    const std::size_t L = blocks_.size();
    std::vector<Vector> a(L + 1), z(L), d1(L);
    std::vector<Matrix> zdot(L);
    a[0] = x;
    Matrix adot;
    if (with_hess) {
      adot = Matrix::Zero(n + 1, n);
      adot.bottomRows(n).setIdentity();
    }
    for (std::size_t i = 0; i < L; ++i) {
      const auto& blk = blocks_[i];
      MapC W1(theta.data() + blk.w1, blk.rows, blk.cols);
      MapC W2(theta.data() + blk.w2, blk.rows, blk.cols);
      z[i] = W1 * a[i] + theta.segment(blk.b, blk.rows);
      a[i + 1] = act(z[i], 0) + W2 * a[i];
      d1[i] = act(z[i], 1);
      if (with_hess) {
        zdot[i] = W1 * adot;
        adot = d1[i].asDiagonal() * zdot[i] + W2 * adot;
      }
    }
    const auto wL = theta.segment(out_offset_, arch_[L]);
    PointEval pe;
    pe.value = wL.dot(a[L]);
    Vector lam = wL;
    if (with_hess) pe.hess = Matrix::Zero(n, n);
    for (std::size_t i = L; i-- > 0;) {
      const auto& blk = blocks_[i];
      MapC W1(theta.data() + blk.w1, blk.rows, blk.cols);
      MapC W2(theta.data() + blk.w2, blk.rows, blk.cols);
      if (with_hess) {
        const Vector curv = lam.cwiseProduct(act(z[i], 2));
        pe.hess.noalias() += zdot[i].transpose() * curv.asDiagonal() * zdot[i];
      }
      lam = (W2.transpose() * lam + W1.transpose() * d1[i].cwiseProduct(lam)).eval();
    }
    pe.grad = lam.tail(n);
    return pe;
  }

  void reverse_tangent(const ThetaVector& theta, const Vector& x, double c, const Vector& v, double sign,
                       Vector& grad) const {
    const std::size_t L = blocks_.size();
    std::vector<Vector> a(L + 1), adot(L + 1), z(L), zdot(L), d1(L);
    a[0] = x;
    adot[0] = Vector::Zero(x.size());
    adot[0].tail(v.size()) = v;
    for (std::size_t i = 0; i < L; ++i) {
      const auto& blk = blocks_[i];
      MapC W1(theta.data() + blk.w1, blk.rows, blk.cols);
      MapC W2(theta.data() + blk.w2, blk.rows, blk.cols);
      z[i] = W1 * a[i] + theta.segment(blk.b, blk.rows);
      zdot[i] = W1 * adot[i];
      d1[i] = act(z[i], 1);
      a[i + 1] = act(z[i], 0) + W2 * a[i];
      adot[i + 1] = d1[i].cwiseProduct(zdot[i]) + W2 * adot[i];
    }
    const auto wL = theta.segment(out_offset_, arch_[L]);
    grad.segment(out_offset_, arch_[L]) += sign * (c * a[L] + adot[L]);
    Vector abar = c * wL;
    Vector adotbar = wL;
    for (std::size_t i = L; i-- > 0;) {
      const auto& blk = blocks_[i];
      MapC W1(theta.data() + blk.w1, blk.rows, blk.cols);
      MapC W2(theta.data() + blk.w2, blk.rows, blk.cols);
      const Vector zdotbar = d1[i].cwiseProduct(adotbar);
      const Vector zbar = d1[i].cwiseProduct(abar) + act(z[i], 2).cwiseProduct(zdot[i]).cwiseProduct(adotbar);
      MapM gW1(grad.data() + blk.w1, blk.rows, blk.cols);
      MapM gW2(grad.data() + blk.w2, blk.rows, blk.cols);
      gW2 += sign * (adotbar * adot[i].transpose() + abar * a[i].transpose());
      gW1 += sign * (zdotbar * adot[i].transpose() + zbar * a[i].transpose());
      grad.segment(blk.b, blk.rows) += sign * zbar;
      adotbar = (W2.transpose() * adotbar + W1.transpose() * zdotbar).eval();
      abar = (W2.transpose() * abar + W1.transpose() * zbar).eval();
    }
  }

  std::vector<int> arch_;
  Activation act_;
  TerminalHead head_;
  std::vector<LayerBlock> blocks_;
  Eigen::Index out_offset_ = 0;
  Eigen::Index n_params_ = 0;
};

}  // namespace hjbfl
