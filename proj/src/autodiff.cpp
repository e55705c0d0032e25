#include "deflow/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace deflow {

using detail::Node;

Tensor Var::grad() const {
  if (!node_->grad.empty()) return node_->grad;
  return Tensor(node_->value.shape(), 0.0);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->tape = this;
  n->requires_grad = requires_grad && recording();
  if (n->requires_grad) record(n);
  return Var(n);
}

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::param(Parameter& p) {
  auto n = std::make_shared<Node>();
  n->value = p.value;
  n->tape = this;
  n->requires_grad = recording() && p.trainable;
  if (n->requires_grad) {
    n->param = &p;
    record(n);
  }
  return Var(n);
}

void Tape::backward(const Var& loss) {
  if (consumed_) throw std::logic_error("backward on a consumed tape");
  if (!recording()) throw std::logic_error("backward on an inference tape");
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (loss.tape() != this) throw std::logic_error("loss was not produced on this tape");
  consumed_ = true;
  if (loss.requires_grad()) {
    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node& n = **it;
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(n);
      if (n.param != nullptr) {
        if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
        n.param->grad += n.grad;
      }
    }
  }
  clear();
}

void Tape::clear() {
  for (auto& n : order_) {
    n->inputs.clear();
    n->backward = nullptr;
  }
  order_.clear();
}

namespace ops {

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  Tape* tape = nullptr;
  bool needs = false;
  for (const auto& in : inputs) {
    if (!in.valid()) throw std::invalid_argument("op received an empty Var");
    if (!in.requires_grad()) continue;
    if (needs && in.tape() != tape) throw std::logic_error("op mixes Vars from different tapes");
    tape = in.tape();
    needs = true;
  }
  if (!needs && !inputs.empty()) tape = inputs.front().tape();
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->tape = tape;
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node());
    n->backward = std::move(backward);
    tape->record(n);
  }
  return Var(n);
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

namespace {

// Element strides of `s` laid against broadcast shape `out` (0 where the
// operand extent is 1).
std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::int64_t> strides(r, 0);
  std::int64_t stride = 1;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const std::size_t si = s.size() - 1 - k;
    const std::size_t oi = r - 1 - k;
    strides[oi] = s[si] == 1 ? 0 : stride;
    stride *= s[si];
  }
  return strides;
}

// Calls f(i_out, i_a, i_b) over the broadcast index space.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
  const std::size_t total = shape_numel(out);
  if (sa == out && sb == out) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  const auto st_a = broadcast_strides(sa, out);
  const auto st_b = broadcast_strides(sb, out);
  const std::size_t r = out.size();
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ia = 0, ib = 0;
  // Innermost extent handled in a tight loop.
  const std::int64_t inner = out[r - 1];
  const std::int64_t sa_in = st_a[r - 1], sb_in = st_b[r - 1];
  std::size_t i = 0;
  while (i < total) {
    for (std::int64_t k = 0; k < inner; ++k)
      f(i + static_cast<std::size_t>(k), static_cast<std::size_t>(ia + k * sa_in),
        static_cast<std::size_t>(ib + k * sb_in));
    i += static_cast<std::size_t>(inner);
    // Advance the odometer over the outer dimensions.
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += st_a[d];
      ib += st_b[d];
      if (idx[d] < out[d]) break;
      ia -= st_a[d] * out[d];
      ib -= st_b[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class Binary { add, sub, mul, div };

Var binary(const Var& a, const Var& b, Binary kind) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor out(out_shape);
  const auto& av = a.value().raw();
  const auto& bv = b.value().raw();
  auto& ov = out.raw();
  switch (kind) {
    case Binary::add:
      for_each_broadcast(out_shape, a.shape(), b.shape(),
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { ov[i] = av[ia] + bv[ib]; });
      break;
    case Binary::sub:
      for_each_broadcast(out_shape, a.shape(), b.shape(),
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { ov[i] = av[ia] - bv[ib]; });
      break;
    case Binary::mul:
      for_each_broadcast(out_shape, a.shape(), b.shape(),
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { ov[i] = av[ia] * bv[ib]; });
      break;
    case Binary::div:
      for_each_broadcast(out_shape, a.shape(), b.shape(),
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { ov[i] = av[ia] / bv[ib]; });
      break;
  }
  return make_result(std::move(out), {a, b}, [kind](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto& g = self.grad.raw();
    const auto& av = na.value.raw();
    const auto& bv = nb.value.raw();
    const Shape& os = self.value.shape();
    if (na.requires_grad) {
      auto& ga = na.grad_buffer().raw();
      for_each_broadcast(os, na.value.shape(), nb.value.shape(),
                         [&](std::size_t i, std::size_t ia, std::size_t ib) {
                           switch (kind) {
                             case Binary::add:
                             case Binary::sub: ga[ia] += g[i]; break;
                             case Binary::mul: ga[ia] += g[i] * bv[ib]; break;
                             case Binary::div: ga[ia] += g[i] / bv[ib]; break;
                           }
                         });
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer().raw();
      for_each_broadcast(os, na.value.shape(), nb.value.shape(),
                         [&](std::size_t i, std::size_t ia, std::size_t ib) {
                           switch (kind) {
                             case Binary::add: gb[ib] += g[i]; break;
                             case Binary::sub: gb[ib] -= g[i]; break;
                             case Binary::mul: gb[ib] += g[i] * av[ia]; break;
                             case Binary::div: gb[ib] -= g[i] * av[ia] / (bv[ib] * bv[ib]); break;
                           }
                         });
    }
  });
}

// Unary op with derivative expressed through input x and output y.
template <typename F, typename D>
Var unary(const Var& a, F f, D dfdx) {
  Tensor out(a.shape());
  const auto& av = a.value().raw();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i]);
  return make_result(std::move(out), {a}, [dfdx](Node& self) {
    Node& na = *self.inputs[0];
    auto& ga = na.grad_buffer().raw();
    const auto& g = self.grad.raw();
    const auto& x = na.value.raw();
    const auto& y = self.value.raw();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary(a, b, Binary::add); }
Var sub(const Var& a, const Var& b) { return binary(a, b, Binary::sub); }
Var mul(const Var& a, const Var& b) { return binary(a, b, Binary::mul); }
Var div(const Var& a, const Var& b) { return binary(a, b, Binary::div); }

Var neg(const Var& a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(const Var& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  bool bad = false;
  for (double v : a.value().raw())
    if (!(v > 0.0)) bad = true;
  if (bad && a.tape() != nullptr) a.tape()->flag_non_finite();
  return unary(
      a, [](double x) { return x > 0.0 ? std::log(x) : std::numeric_limits<double>::quiet_NaN(); },
      [](double x, double) { return 1.0 / x; });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum(const Var& a) {
  return make_result(Tensor::scalar(a.value().sum()), {a}, [](Node& self) {
    const double g = self.grad[0];
    for (auto& v : self.inputs[0]->grad_buffer().raw()) v += g;
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Var sum_per_sample(const Var& a) {
  const auto n = a.dim(0);
  const std::size_t per = a.numel() / static_cast<std::size_t>(n);
  Tensor out(Shape{n}, 0.0);
  const auto& av = a.value().raw();
  for (std::int64_t s = 0; s < n; ++s) {
    double acc = 0.0;
    for (std::size_t i = 0; i < per; ++i) acc += av[static_cast<std::size_t>(s) * per + i];
    out[static_cast<std::size_t>(s)] = acc;
  }
  return make_result(std::move(out), {a}, [per](Node& self) {
    auto& ga = self.inputs[0]->grad_buffer().raw();
    for (std::size_t s = 0; s < self.grad.numel(); ++s)
      for (std::size_t i = 0; i < per; ++i) ga[s * per + i] += self.grad[s];
  });
}

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2) {
    throw ShapeError("matmul expects matrices, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  MapMat(out.raw().data(), m, n).noalias() =
      ConstMapMat(a.value().raw().data(), m, k) * ConstMapMat(b.value().raw().data(), k, n);
  return make_result(std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    ConstMapMat g(self.grad.raw().data(), m, n);
    if (na.requires_grad) {
      MapMat(na.grad_buffer().raw().data(), m, k).noalias() +=
          g * ConstMapMat(nb.value.raw().data(), k, n).transpose();
    }
    if (nb.requires_grad) {
      MapMat(nb.grad_buffer().raw().data(), k, n).noalias() +=
          ConstMapMat(na.value.raw().data(), m, k).transpose() * g;
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result(std::move(out), {a}, [](Node& self) {
    auto& ga = self.inputs[0]->grad_buffer().raw();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

namespace {
struct Blocks {
  std::size_t outer;
  std::size_t extent;
  std::size_t inner;
};
Blocks blocks_of(const Shape& s, std::size_t dim) {
  Blocks b{1, static_cast<std::size_t>(s[dim]), 1};
  for (std::size_t i = 0; i < dim; ++i) b.outer *= static_cast<std::size_t>(s[i]);
  for (std::size_t i = dim + 1; i < s.size(); ++i) b.inner *= static_cast<std::size_t>(s[i]);
  return b;
}
}  // namespace

Var slice(const Var& a, std::size_t dim, std::int64_t begin, std::int64_t end) {
  if (dim >= a.value().rank() || begin < 0 || end > a.dim(dim) || begin >= end) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on dim " +
                     std::to_string(dim) + " of " + shape_str(a.shape()));
  }
  const Blocks bl = blocks_of(a.shape(), dim);
  Shape os = a.shape();
  os[dim] = end - begin;
  const std::size_t len = static_cast<std::size_t>(end - begin) * bl.inner;
  const std::size_t off = static_cast<std::size_t>(begin) * bl.inner;
  const std::size_t row = bl.extent * bl.inner;
  Tensor out(os);
  const auto& av = a.value().raw();
  for (std::size_t o = 0; o < bl.outer; ++o)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(o * row + off), len,
                out.raw().begin() + static_cast<std::ptrdiff_t>(o * len));
  return make_result(std::move(out), {a}, [bl, len, off, row](Node& self) {
    auto& ga = self.inputs[0]->grad_buffer().raw();
    const auto& g = self.grad.raw();
    for (std::size_t o = 0; o < bl.outer; ++o)
      for (std::size_t i = 0; i < len; ++i) ga[o * row + off + i] += g[o * len + i];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t dim) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape os = parts[0].shape();
  if (dim >= os.size()) throw ShapeError("concat dim out of range");
  std::int64_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != os.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != dim && s[i] != os[i]) {
        throw ShapeError("concat extent mismatch " + shape_str(os) + " vs " + shape_str(s));
      }
    total += s[dim];
  }
  os[dim] = total;
  const Blocks bl = blocks_of(os, dim);
  const std::size_t row = bl.extent * bl.inner;
  Tensor out(os);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t len = static_cast<std::size_t>(p.dim(dim)) * bl.inner;
    offsets.push_back(off);
    const auto& pv = p.value().raw();
    for (std::size_t o = 0; o < bl.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * len), len,
                  out.raw().begin() + static_cast<std::ptrdiff_t>(o * row + off));
    off += len;
  }
  return make_result(std::move(out), parts, [bl, row, offsets](Node& self) {
    const auto& g = self.grad.raw();
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      Node& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      auto& gi = in.grad_buffer().raw();
      const std::size_t len = gi.size() / bl.outer;
      for (std::size_t o = 0; o < bl.outer; ++o)
        for (std::size_t i = 0; i < len; ++i) gi[o * len + i] += g[o * row + offsets[k] + i];
    }
  });
}

Var diag_embed(const Var& v) {
  if (v.value().rank() != 1) throw ShapeError("diag_embed expects a vector, got " + shape_str(v.shape()));
  const auto n = v.dim(0);
  Tensor out(Shape{n, n}, 0.0);
  for (std::int64_t i = 0; i < n; ++i) out.at(i, i) = v.value()[static_cast<std::size_t>(i)];
  return make_result(std::move(out), {v}, [n](Node& self) {
    auto& gv = self.inputs[0]->grad_buffer().raw();
    for (std::int64_t i = 0; i < n; ++i) gv[static_cast<std::size_t>(i)] += self.grad.at(i, i);
  });
}

}  // namespace ops
}  // namespace deflow
