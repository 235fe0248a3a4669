#pragma once

// Differentiable building blocks for the atlas network: dense and modulated
// sine layers with hand-written adjoints, the two training losses, and Adam.
//
// Batches are row-major (batch x features). Adjoint functions accumulate
// (+=) into the gradient buffers they are given so several sub-batches can
// share one buffer.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "cina/errors.hpp"

namespace cina {

template <typename S>
using Tensor2 = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct Param {
  Tensor2<S> value;
  Tensor2<S> grad;
  Tensor2<S> adam_m;
  Tensor2<S> adam_v;
  std::int64_t step_count = 0;

  Param() = default;
  Param(Eigen::Index rows, Eigen::Index cols)
      : value(Tensor2<S>::Zero(rows, cols)),
        grad(Tensor2<S>::Zero(rows, cols)),
        adam_m(Tensor2<S>::Zero(rows, cols)),
        adam_v(Tensor2<S>::Zero(rows, cols)) {}

  Eigen::Index rows() const { return value.rows(); }
  Eigen::Index cols() const { return value.cols(); }
  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
};

namespace detail {

inline void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense layer: y = x W^T + b

template <typename S>
Tensor2<S> linear_forward(const Tensor2<S>& W, const Tensor2<S>& b, const Tensor2<S>& x) {
  detail::require(x.cols() == W.cols(), "linear_forward: input width does not match W");
  detail::require(b.rows() == 1 && b.cols() == W.rows(), "linear_forward: bias must be 1 x out");
  Tensor2<S> y(x.rows(), W.rows());
  if (x.rows() == 0) return y;
  y.noalias() = x * W.transpose();
  y.rowwise() += b.row(0);
  return y;
}

template <typename S>
Tensor2<S> linear_forward(const Param<S>& W, const Param<S>& b, const Tensor2<S>& x) {
  return linear_forward(W.value, b.value, x);
}

// Returns dL/dx; adds dL/dW and dL/db into the given buffers.
template <typename S>
Tensor2<S> linear_backward(const Tensor2<S>& W, const Tensor2<S>& x, const Tensor2<S>& dy, Tensor2<S>& dW,
                           Tensor2<S>& db, bool need_dx = true) {
  detail::require(dy.rows() == x.rows() && dy.cols() == W.rows(), "linear_backward: dy shape mismatch");
  if (x.rows() > 0) {
    dW.noalias() += dy.transpose() * x;
    db.row(0) += dy.colwise().sum();
  }
  if (!need_dx) return {};
  Tensor2<S> dx(x.rows(), W.cols());
  if (x.rows() > 0) dx.noalias() = dy * W;
  return dx;
}

// ---------------------------------------------------------------------------
// Modulated sine layer
//
//   y = sin( omega0 * (phi .* (x W^T)) + b + psi )
//
// The shift psi and the bias b sit outside the omega0 product.

template <typename S>
struct SineCache {
  Tensor2<S> input;
  Tensor2<S> lin;  // x W^T
  Tensor2<S> pre;  // argument of sin
};

namespace detail {

template <typename S>
Tensor2<S> sine_forward_impl(const Tensor2<S>& W, const Tensor2<S>& b, const Tensor2<S>& x, const Vec<S>* phi,
                             const Vec<S>* psi, S omega0, SineCache<S>* cache) {
  require(x.cols() == W.cols(), "sine layer: input width does not match W");
  require(b.rows() == 1 && b.cols() == W.rows(), "sine layer: bias must be 1 x out");
  require(!phi || phi->size() == W.rows(), "sine layer: phi length must equal layer width");
  require(!psi || psi->size() == W.rows(), "sine layer: psi length must equal layer width");

  Tensor2<S> lin(x.rows(), W.rows());
  if (x.rows() > 0) lin.noalias() = x * W.transpose();
  Tensor2<S> pre(x.rows(), W.rows());
  if (x.rows() > 0) {
    Eigen::Matrix<S, 1, Eigen::Dynamic> scale = Eigen::Matrix<S, 1, Eigen::Dynamic>::Constant(W.rows(), omega0);
    Eigen::Matrix<S, 1, Eigen::Dynamic> shift = b.row(0);
    if (phi) scale.array() *= phi->transpose().array();
    if (psi) shift += psi->transpose();
    pre.array() = lin.array().rowwise() * scale.array();
    pre.rowwise() += shift;
  }
  Tensor2<S> y = pre.array().sin().matrix();
  if (cache) {
    cache->input = x;
    cache->lin = std::move(lin);
    cache->pre = std::move(pre);
  }
  return y;
}

}  // namespace detail

template <typename S>
Tensor2<S> modulated_sine_forward(const Tensor2<S>& W, const Tensor2<S>& b, const Tensor2<S>& x, const Vec<S>& phi,
                                  const Vec<S>& psi, S omega0, SineCache<S>* cache = nullptr) {
  return detail::sine_forward_impl(W, b, x, &phi, &psi, omega0, cache);
}

template <typename S>
Tensor2<S> modulated_sine_forward(const Param<S>& W, const Param<S>& b, const Tensor2<S>& x, const Vec<S>& phi,
                                  const Vec<S>& psi, S omega0, SineCache<S>* cache = nullptr) {
  return detail::sine_forward_impl(W.value, b.value, x, &phi, &psi, omega0, cache);
}

// Unmodulated sine layer (phi = 1, psi = 0).
template <typename S>
Tensor2<S> sine_forward(const Tensor2<S>& W, const Tensor2<S>& b, const Tensor2<S>& x, S omega0,
                        SineCache<S>* cache = nullptr) {
  return detail::sine_forward_impl<S>(W, b, x, nullptr, nullptr, omega0, cache);
}

// Adjoint of the (modulated) sine layer. `phi` null means unmodulated, in
// which case dphi/dpsi are ignored; null dW/db skip the weight gradients
// (latent-only fitting). Returns dL/dx when need_dx is set.
template <typename S>
Tensor2<S> sine_backward(const Tensor2<S>& W, const SineCache<S>& cache, const Vec<S>* phi, S omega0,
                         const Tensor2<S>& dy, Tensor2<S>* dW, Tensor2<S>* db, Vec<S>* dphi, Vec<S>* dpsi,
                         bool need_dx = true) {
  detail::require(dy.rows() == cache.pre.rows() && dy.cols() == cache.pre.cols(), "sine_backward: dy shape mismatch");
  const Eigen::Index B = dy.rows();
  Tensor2<S> dlin(B, W.rows());
  if (B > 0) {
    const Tensor2<S> dpre = (dy.array() * cache.pre.array().cos()).matrix();
    if (db) db->row(0) += dpre.colwise().sum();
    if (phi) {
      if (dpsi) *dpsi += dpre.colwise().sum().transpose();
      if (dphi) *dphi += omega0 * (dpre.array() * cache.lin.array()).matrix().colwise().sum().transpose();
      const Eigen::Matrix<S, 1, Eigen::Dynamic> scale = omega0 * phi->transpose();
      dlin.array() = dpre.array().rowwise() * scale.array();
    } else {
      dlin = omega0 * dpre;
    }
    if (dW) dW->noalias() += dlin.transpose() * cache.input;
  }
  if (!need_dx) return {};
  Tensor2<S> dx(B, W.cols());
  if (B > 0) dx.noalias() = dlin * W;
  return dx;
}

// ---------------------------------------------------------------------------
// Modulation map: [phi; psi] = M z + mu

template <typename S>
std::pair<Vec<S>, Vec<S>> modulation_map(const Tensor2<S>& M, const Tensor2<S>& mu, const Vec<S>& z) {
  detail::require(M.cols() == z.size(), "modulation_map: M cols must equal latent size");
  detail::require(M.rows() % 2 == 0, "modulation_map: M rows must be 2 x layer width");
  detail::require(mu.rows() == M.rows() && mu.cols() == 1, "modulation_map: mu must be (2 x width) x 1");
  const Eigen::Index h = M.rows() / 2;
  Vec<S> out = mu.col(0);
  out.noalias() += M * z;
  return {out.head(h), out.tail(h)};
}

template <typename S>
std::pair<Vec<S>, Vec<S>> modulation_map(const Param<S>& M, const Param<S>& mu, const Vec<S>& z) {
  return modulation_map(M.value, mu.value, z);
}

// Adds dL/dM, dL/dmu into the buffers and returns dL/dz.
template <typename S>
Vec<S> modulation_backward(const Tensor2<S>& M, const Vec<S>& z, const Vec<S>& dphi, const Vec<S>& dpsi,
                           Tensor2<S>& dM, Tensor2<S>& dmu) {
  const Eigen::Index h = M.rows() / 2;
  detail::require(dphi.size() == h && dpsi.size() == h, "modulation_backward: gradient length mismatch");
  Vec<S> dout(2 * h);
  dout << dphi, dpsi;
  dM.noalias() += dout * z.transpose();
  dmu.col(0) += dout;
  Vec<S> dz = M.transpose() * dout;
  return dz;
}

// ---------------------------------------------------------------------------
// Losses

template <typename S>
S mse_loss(const Tensor2<S>& pred, const Tensor2<S>& target) {
  detail::require(pred.rows() == target.rows() && pred.cols() == target.cols(), "mse_loss: shape mismatch");
  if (pred.size() == 0) return S(0);
  return (pred - target).squaredNorm() / static_cast<S>(pred.size());
}

// Gradient of weight * mse_loss.
template <typename S>
Tensor2<S> mse_loss_grad(const Tensor2<S>& pred, const Tensor2<S>& target, S weight = S(1)) {
  detail::require(pred.rows() == target.rows() && pred.cols() == target.cols(), "mse_loss_grad: shape mismatch");
  if (pred.size() == 0) return Tensor2<S>(pred.rows(), pred.cols());
  return (S(2) * weight / static_cast<S>(pred.size())) * (pred - target);
}

// Row-wise softmax with max subtraction.
template <typename S>
Tensor2<S> softmax_rows(const Tensor2<S>& logits) {
  Tensor2<S> p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const S m = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - m).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

template <typename S, typename Label>
S cross_entropy_loss(const Tensor2<S>& logits, std::span<const Label> target) {
  detail::require(static_cast<Eigen::Index>(target.size()) == logits.rows(), "cross_entropy_loss: batch mismatch");
  if (logits.rows() == 0) return S(0);
  S total = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto t = static_cast<Eigen::Index>(target[static_cast<std::size_t>(r)]);
    if (t < 0 || t >= logits.cols()) throw ShapeError("cross_entropy_loss: class id out of range");
    const S m = logits.row(r).maxCoeff();
    const S lse = m + std::log((logits.row(r).array() - m).exp().sum());
    total += lse - logits(r, t);
  }
  return total / static_cast<S>(logits.rows());
}

// Gradient of weight * cross_entropy_loss.
template <typename S, typename Label>
Tensor2<S> cross_entropy_loss_grad(const Tensor2<S>& logits, std::span<const Label> target, S weight = S(1)) {
  detail::require(static_cast<Eigen::Index>(target.size()) == logits.rows(), "cross_entropy_loss_grad: batch mismatch");
  Tensor2<S> g = softmax_rows(logits);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto t = static_cast<Eigen::Index>(target[static_cast<std::size_t>(r)]);
    if (t < 0 || t >= logits.cols()) throw ShapeError("cross_entropy_loss_grad: class id out of range");
    g(r, t) -= S(1);
  }
  if (logits.rows() > 0) g *= weight / static_cast<S>(logits.rows());
  return g;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
bool grads_finite(const Param<S>& p) {
  return p.grad.allFinite();
}

// Bias-corrected Adam on every parameter, then zeroes the gradients. If any
// gradient is non-finite nothing is updated and NumericalError is thrown.
template <typename S>
void adam_step(std::span<Param<S>* const> params, const AdamOptions& opt) {
  for (const auto* p : params)
    if (!grads_finite(*p)) throw NumericalError("adam_step: non-finite gradient; step aborted");
  const S b1 = static_cast<S>(opt.beta1);
  const S b2 = static_cast<S>(opt.beta2);
  for (auto* p : params) {
    p->step_count += 1;
    const double t = static_cast<double>(p->step_count);
    const S bc1 = static_cast<S>(1.0 - std::pow(opt.beta1, t));
    const S bc2 = static_cast<S>(1.0 - std::pow(opt.beta2, t));
    const S lr = static_cast<S>(opt.lr);
    const S eps = static_cast<S>(opt.eps);
    p->adam_m = b1 * p->adam_m + (S(1) - b1) * p->grad;
    p->adam_v = b2 * p->adam_v + (S(1) - b2) * p->grad.cwiseAbs2();
    p->value.array() -= lr * (p->adam_m.array() / bc1) / ((p->adam_v.array() / bc2).sqrt() + eps);
    p->zero_grad();
  }
}

template <typename S>
void adam_step(Param<S>& p, const AdamOptions& opt) {
  Param<S>* one[] = {&p};
  adam_step<S>(std::span<Param<S>* const>(one), opt);
}

}  // namespace cina
