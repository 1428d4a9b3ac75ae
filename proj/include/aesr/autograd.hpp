#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "aesr/tensor.hpp"

/// Minimal reverse-mode differentiation over NCHW tensors. Only the operations
/// the super-resolution networks need are provided. Every op is instantiated
/// for float (training) and double (finite-difference verification).
namespace aesr::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  /// Direct access for in-place parameter updates; never use on graph interiors.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  T item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  /// Accumulated gradient; an all-zero tensor if nothing flowed here yet.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  /// Reverse sweep seeded with d(self)/d(self) = 1. `self` must hold one element.
  void backward() const;

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  static Var from_node(std::shared_ptr<Node<T>> n) {
    Var v;
    v.node_ = std::move(n);
    return v;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// While alive, ops on this thread record no graph (inference / frozen paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Convolution. `bias` may be an undefined Var. Zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int padding);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
/// gate (N,1,H,W) broadcast over the channels of x (N,C,H,W).
template <typename T>
Var<T> mul_channels(const Var<T>& gate, const Var<T>& x);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
template <typename T>
Var<T> add_constant(const Var<T>& a, T c);
/// a - s for a one-element s.
template <typename T>
Var<T> sub_scalar(const Var<T>& a, const Var<T>& s);

template <typename T>
Var<T> relu(const Var<T>& a);
template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope);
template <typename T>
Var<T> sigmoid(const Var<T>& a);
/// log(1 + exp(a)), computed stably.
template <typename T>
Var<T> softplus(const Var<T>& a);

template <typename T>
Var<T> upsample_nearest(const Var<T>& a, int factor);
/// Half-pixel-centre bilinear resampling (the usual align_corners=false convention).
template <typename T>
Var<T> resize_bilinear(const Var<T>& a, int out_h, int out_w);
template <typename T>
Var<T> avg_pool2(const Var<T>& a);
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);

template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);
/// mean |a - b|
template <typename T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b);

/// Power-iteration estimate of the top singular value of `weight` viewed as an
/// (out x rest) matrix. Runs `iterations` steps of u <- W v / |W v| with
/// v <- W^T u / |W^T u|, updating `u` in place, then returns |W^T u|. The
/// final right vector is written to `v_out` when given. Zero matrices return
/// a floor of 1e-12 so callers never divide by zero.
template <typename T>
T estimate_spectral_norm(const Tensor<T>& weight, Tensor<T>& u, int iterations, std::vector<T>* v_out = nullptr);

/// Divides `weight` (viewed as out x rest) by its power-iteration estimate of
/// the top singular value. `u` is the persistent left vector; it is advanced
/// by `iterations` steps in place. The gradient treats u and v as constants,
/// which is exact when iterations == 0.
template <typename T>
Var<T> spectral_norm(const Var<T>& weight, Tensor<T>& u, int iterations);

}  // namespace aesr::ag
