#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "deflow/tensor.hpp"

namespace deflow {

/// Trainable leaf: a named value plus its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape(), 0.0) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
    grad.fill(0.0);
  }
};

class Tape;

namespace detail {
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  Tape* tape = nullptr;
  Parameter* param = nullptr;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  /// Gradient buffer, allocated as zeros on first use.
  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape(), 0.0);
    return grad;
  }
};
}  // namespace detail

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }
  Tape* tape() const { return node_->tape; }

  /// Gradient accumulated by the last backward pass; zeros if the loss did
  /// not depend on this value.
  Tensor grad() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Record of one forward pass.
///
/// In record mode every differentiable op appends a node; backward() walks
/// them in strict reverse order, deposits parameter gradients and then
/// releases every saved intermediate. Inference mode records nothing.
/// A tape is single-threaded and single-use.
class Tape {
 public:
  enum class Mode { record, inference };

  explicit Tape(Mode mode = Mode::record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value);
  /// Leaf bound to a Parameter; backward adds into p.grad.
  Var param(Parameter& p);

  void backward(const Var& loss);

  bool recording() const { return mode_ == Mode::record; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return order_.size(); }

  bool non_finite_detected() const { return non_finite_; }
  void flag_non_finite() { non_finite_ = true; }

  /// Drops all recorded nodes without running backward.
  void clear();

  // Used by op implementations.
  void record(const std::shared_ptr<detail::Node>& node) { order_.push_back(node); }

 private:
  Mode mode_;
  bool consumed_ = false;
  bool non_finite_ = false;
  std::vector<std::shared_ptr<detail::Node>> order_;
};

namespace ops {

// Builds a result node. If any input requires a gradient on a recording
// tape, the node is recorded with `backward`; otherwise it is a constant.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node&)> backward);

/// Broadcast shape of two operands (right-aligned, extents equal or 1).
Shape broadcast_shape(const Shape& a, const Shape& b);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var exp(const Var& a);
/// Natural log; non-positive entries produce NaN and flag the tape.
Var log(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var square(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
/// Sum over every axis but the first: [N, ...] -> [N].
Var sum_per_sample(const Var& a);

Var matmul(const Var& a, const Var& b);
Var reshape(const Var& a, Shape shape);
Var slice(const Var& a, std::size_t dim, std::int64_t begin, std::int64_t end);
Var concat(const std::vector<Var>& parts, std::size_t dim);
/// [C] -> [C,C] with v on the diagonal.
Var diag_embed(const Var& v);

/// 2-D convolution, stride 1, zero padding k/2. x [N,C,H,W], w [Co,C,k,k], b [Co].
Var conv2d(const Var& x, const Var& w, const Var& b);
/// Applies W [Co,C] to the channel vector at every spatial location.
Var channel_mix(const Var& x, const Var& w);
/// 2x2 space-to-depth. Output channel c*4 + k holds block position k in
/// the order top-left, top-right, bottom-left, bottom-right.
Var squeeze2x2(const Var& x);
Var unsqueeze2x2(const Var& x);
/// Nearest-neighbour resampling: out[i] = in[floor(i * in / out)].
Var resize_nearest(const Var& x, std::int64_t height, std::int64_t width);

/// Per-sample sum of standard-normal log densities: [N,...] -> [N].
Var std_normal_logpdf(const Var& z);
/// Per-sample sum over spatial locations of ln N(r; 0, S) where the channel
/// vector of r [N,C,H,W] is the variate and S = M M^T (+ I if add_identity).
/// Throws std::domain_error when S is not positive definite.
Var shared_gaussian_logpdf(const Var& r, const Var& m, bool add_identity);

}  // namespace ops
}  // namespace deflow
