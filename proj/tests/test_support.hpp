#pragma once

// Shared helpers for the unit suites: finite-difference oracles and random
// tensor generators.

#include <cmath>
#include <functional>

#include "deflow/autodiff.hpp"
#include "deflow/rng.hpp"

namespace deflow::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t(shape);
  for (auto& v : t.raw()) v = scale * rng.normal();
  return t;
}

/// Central finite difference of a scalar function of one tensor.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double step = 1e-5) {
  Tensor g(x.shape(), 0.0);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double fp = f(probe);
    probe[i] = orig - step;
    const double fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), with a floor so all-zero gradients compare
/// absolutely.
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Reverse-mode gradient of `build(tape, leaf)` (a scalar) at x.
inline Tensor tape_gradient(const std::function<Var(Tape&, const Var&)>& build, const Tensor& x) {
  Tape tape;
  Var leaf = tape.leaf(x);
  Var loss = build(tape, leaf);
  tape.backward(loss);
  return leaf.grad();
}

inline double tape_value(const std::function<Var(Tape&, const Var&)>& build, const Tensor& x) {
  Tape tape(Tape::Mode::inference);
  return build(tape, tape.constant(x)).value()[0];
}

/// Relative error between reverse-mode and central-difference gradients.
inline double gradient_check(const std::function<Var(Tape&, const Var&)>& build, const Tensor& x,
                             double step = 1e-5) {
  const Tensor analytic = tape_gradient(build, x);
  const Tensor numeric = numeric_gradient([&](const Tensor& t) { return tape_value(build, t); }, x, step);
  return relative_error(analytic, numeric);
}

}  // namespace deflow::testing
