#include "deflow/flow.hpp"

#include <cmath>
#include <stdexcept>

#include "deflow/linalg.hpp"

namespace deflow::flow {

using namespace deflow::ops;

namespace {

double spatial_size(const Var& act) { return static_cast<double>(act.dim(2) * act.dim(3)); }

void require_cond(const LayerIO& io, std::int64_t channels, const char* who) {
  if (!io.cond.valid()) throw std::invalid_argument(std::string(who) + ": missing condition features");
  const auto& a = io.act.shape();
  const auto& c = io.cond.shape();
  if (c.size() != 4 || c[0] != a[0] || c[2] != a[2] || c[3] != a[3] || c[1] != channels) {
    throw ShapeError(std::string(who) + ": condition " + shape_str(c) + " not aligned with activation " +
                     shape_str(a));
  }
}

Tensor masked_triangle(std::int64_t n, bool lower_part) {
  Tensor m(Shape{n, n}, 0.0);
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < n; ++c)
      if (lower_part ? c < r : c > r) m.at(r, c) = 1.0;
  return m;
}

// Affine transform shared by coupling and injector on the target part.
Var affine_part(const Var& target, const Var& log_s, const Var& bias, Direction dir) {
  if (dir == Direction::forward) return add(mul(target, exp(log_s)), bias);
  return mul(sub(target, bias), exp(neg(log_s)));
}

}  // namespace

LayerIO begin_io(Tape& tape, const Var& act, const Var& cond) {
  return {act, tape.constant(Tensor(Shape{act.dim(0)}, 0.0)), cond};
}

// ---------------------------------------------------------------- Actnorm

Actnorm::Actnorm(std::string name, std::int64_t channels)
    : log_scale_(name + ".log_scale", Tensor(Shape{channels}, 0.0)),
      bias_(name + ".bias", Tensor(Shape{channels}, 0.0)),
      initialized_(name + ".initialized", Tensor(Shape{1}, 0.0)) {
  initialized_.trainable = false;
}

void Actnorm::initialize_from(const Tensor& act) {
  const auto n = act.dim(0), c = act.dim(1), h = act.dim(2), w = act.dim(3);
  if (c != log_scale_.value.dim(0)) throw ShapeError("actnorm init: channel mismatch " + shape_str(act.shape()));
  const double count = static_cast<double>(n * h * w);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) s += act.at(i, ch, y, x);
    const double mean = s / count;
    double q = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) q += (act.at(i, ch, y, x) - mean) * (act.at(i, ch, y, x) - mean);
    double sd = std::sqrt(q / count);
    if (!(sd > 1e-12)) sd = 1.0;
    log_scale_.value[static_cast<std::size_t>(ch)] = -std::log(sd);
    bias_.value[static_cast<std::size_t>(ch)] = -mean / sd;
  }
  set_initialized(true);
}

LayerIO Actnorm::apply(const LayerIO& io, Direction dir) {
  const auto c = log_scale_.value.dim(0);
  if (io.act.value().rank() != 4 || io.act.dim(1) != c) {
    throw ShapeError("actnorm expects " + std::to_string(c) + " channels, got " + shape_str(io.act.shape()));
  }
  if (!initialized()) {
    if (dir == Direction::inverse) throw std::logic_error("actnorm inverse called before initialization");
    initialize_from(io.act.value());
  }
  Tape& tape = *io.act.tape();
  Var ls = tape.param(log_scale_);
  Var b = tape.param(bias_);
  Var ls4 = reshape(ls, Shape{1, c, 1, 1});
  Var b4 = reshape(b, Shape{1, c, 1, 1});
  Var contribution = scale(sum(ls), spatial_size(io.act));
  LayerIO out = io;
  if (dir == Direction::forward) {
    out.act = add(mul(io.act, exp(ls4)), b4);
    out.logdet = add(io.logdet, contribution);
  } else {
    out.act = mul(sub(io.act, b4), exp(neg(ls4)));
    out.logdet = sub(io.logdet, contribution);
  }
  return out;
}

void Actnorm::visit(const ParamVisitor& f) {
  f(log_scale_);
  f(bias_);
  f(initialized_);
}

// ---------------------------------------------------------------- InvConv1x1

InvConv1x1::InvConv1x1(std::string name, std::int64_t channels, Rng& rng)
    : channels_(channels),
      perm_(name + ".perm", Tensor(Shape{channels}, 0.0)),
      sign_(name + ".sign", Tensor(Shape{channels}, 1.0)),
      lower_(name + ".lower", Tensor(Shape{channels, channels}, 0.0)),
      upper_(name + ".upper", Tensor(Shape{channels, channels}, 0.0)),
      log_diag_(name + ".log_diag", Tensor(Shape{channels}, 0.0)) {
  perm_.trainable = false;
  sign_.trainable = false;
  const auto lu = linalg::lu_decompose(linalg::random_orthogonal(channels, rng));
  for (std::int64_t i = 0; i < channels; ++i) {
    perm_.value[static_cast<std::size_t>(i)] = lu.perm[static_cast<std::size_t>(i)];
    const double d = lu.upper.at(i, i);
    sign_.value[static_cast<std::size_t>(i)] = d < 0 ? -1.0 : 1.0;
    log_diag_.value[static_cast<std::size_t>(i)] = std::log(std::abs(d));
    for (std::int64_t j = 0; j < channels; ++j) {
      if (j < i) lower_.value.at(i, j) = lu.lower.at(i, j);
      if (j > i) upper_.value.at(i, j) = lu.upper.at(i, j);
    }
  }
}

void InvConv1x1::set_identity() {
  for (std::int64_t i = 0; i < channels_; ++i) perm_.value[static_cast<std::size_t>(i)] = static_cast<double>(i);
  sign_.value.fill(1.0);
  lower_.value.fill(0.0);
  upper_.value.fill(0.0);
  log_diag_.value.fill(0.0);
}

namespace {
std::vector<int> perm_of(const Tensor& t) {
  std::vector<int> p(t.numel());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<int>(t[i]);
  return p;
}
}  // namespace

Tensor InvConv1x1::weight() const {
  const auto n = channels_;
  Tensor l = linalg::identity(n), u(Shape{n, n}, 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    u.at(i, i) = sign_.value[static_cast<std::size_t>(i)] * std::exp(log_diag_.value[static_cast<std::size_t>(i)]);
    for (std::int64_t j = 0; j < n; ++j) {
      if (j < i) l.at(i, j) = lower_.value.at(i, j);
      if (j > i) u.at(i, j) = upper_.value.at(i, j);
    }
  }
  return linalg::matmul(linalg::permutation_matrix(perm_of(perm_.value)), linalg::matmul(l, u));
}

LayerIO InvConv1x1::apply(const LayerIO& io, Direction dir) {
  if (io.act.value().rank() != 4 || io.act.dim(1) != channels_) {
    throw ShapeError("invconv expects " + std::to_string(channels_) + " channels, got " + shape_str(io.act.shape()));
  }
  Tape& tape = *io.act.tape();
  const auto n = channels_;
  Var ld = tape.param(log_diag_);
  Var contribution = scale(sum(ld), spatial_size(io.act));
  LayerIO out = io;
  if (dir == Direction::forward) {
    Var l = add(mul(tape.param(lower_), tape.constant(masked_triangle(n, true))), tape.constant(linalg::identity(n)));
    Var u = add(mul(tape.param(upper_), tape.constant(masked_triangle(n, false))),
                diag_embed(mul(tape.constant(sign_.value), exp(ld))));
    Var p = tape.constant(linalg::permutation_matrix(perm_of(perm_.value)));
    out.act = channel_mix(io.act, matmul(p, matmul(l, u)));
    out.logdet = add(io.logdet, contribution);
  } else {
    // W^-1 = U^-1 L^-1 P^T by triangular solves against the identity.
    Tensor l = linalg::identity(n), u(Shape{n, n}, 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
      u.at(i, i) = sign_.value[static_cast<std::size_t>(i)] * std::exp(log_diag_.value[static_cast<std::size_t>(i)]);
      for (std::int64_t j = 0; j < n; ++j) {
        if (j < i) l.at(i, j) = lower_.value.at(i, j);
        if (j > i) u.at(i, j) = upper_.value.at(i, j);
      }
    }
    const Tensor pt = linalg::transpose(linalg::permutation_matrix(perm_of(perm_.value)));
    const Tensor inv = linalg::solve_upper(u, linalg::solve_lower(l, pt, true));
    out.act = channel_mix(io.act, tape.constant(inv));
    out.logdet = sub(io.logdet, contribution);
  }
  return out;
}

void InvConv1x1::visit(const ParamVisitor& f) {
  f(perm_);
  f(sign_);
  f(lower_);
  f(upper_);
  f(log_diag_);
}

// ---------------------------------------------------------------- Subnet

Subnet::Subnet(std::string name, std::int64_t in, std::int64_t hidden, std::int64_t out, Rng& rng)
    : w1_(name + ".conv1.weight", Tensor(Shape{hidden, in, 3, 3})),
      b1_(name + ".conv1.bias", Tensor(Shape{hidden}, 0.0)),
      w2_(name + ".conv2.weight", Tensor(Shape{out, hidden, 3, 3}, 0.0)),
      b2_(name + ".conv2.bias", Tensor(Shape{out}, 0.0)) {
  const double sd = std::sqrt(2.0 / static_cast<double>(in * 9));
  for (auto& v : w1_.value.raw()) v = sd * rng.normal();
}

Var Subnet::operator()(const Var& x) {
  Tape& tape = *x.tape();
  Var h = relu(conv2d(x, tape.param(w1_), tape.param(b1_)));
  return conv2d(h, tape.param(w2_), tape.param(b2_));
}

void Subnet::visit(const ParamVisitor& f) {
  f(w1_);
  f(b1_);
  f(w2_);
  f(b2_);
}

// ---------------------------------------------------------------- Coupling

ConditionalCoupling::ConditionalCoupling(std::string name, std::int64_t channels, std::int64_t cond_channels,
                                         std::int64_t hidden, Rng& rng)
    : channels_(channels),
      cond_channels_(cond_channels),
      net_(name + ".net", channels / 2 + cond_channels, hidden, channels, rng) {
  if (channels % 2 != 0) throw ShapeError("coupling needs an even channel count, got " + std::to_string(channels));
}

LayerIO ConditionalCoupling::apply(const LayerIO& io, Direction dir) {
  if (io.act.value().rank() != 4 || io.act.dim(1) != channels_) {
    throw ShapeError("coupling expects " + std::to_string(channels_) + " channels, got " + shape_str(io.act.shape()));
  }
  require_cond(io, cond_channels_, "coupling");
  const auto half = channels_ / 2;
  Var a1 = slice(io.act, 1, 0, half);
  Var a2 = slice(io.act, 1, half, channels_);
  Var h = net_(concat({a1, io.cond}, 1));
  Var log_s = scale(tanh(slice(h, 1, 0, half)), kScaleBound);
  Var b = slice(h, 1, half, channels_);
  LayerIO out = io;
  out.act = concat({a1, affine_part(a2, log_s, b, dir)}, 1);
  Var contribution = sum_per_sample(log_s);
  out.logdet = dir == Direction::forward ? add(io.logdet, contribution) : sub(io.logdet, contribution);
  return out;
}

// ---------------------------------------------------------------- Injector

AffineInjector::AffineInjector(std::string name, std::int64_t channels, std::int64_t cond_channels,
                               std::int64_t hidden, Rng& rng)
    : channels_(channels), cond_channels_(cond_channels), net_(name + ".net", cond_channels, hidden, 2 * channels, rng) {}

LayerIO AffineInjector::apply(const LayerIO& io, Direction dir) {
  if (io.act.value().rank() != 4 || io.act.dim(1) != channels_) {
    throw ShapeError("injector expects " + std::to_string(channels_) + " channels, got " + shape_str(io.act.shape()));
  }
  require_cond(io, cond_channels_, "injector");
  Var h = net_(io.cond);
  Var log_s = scale(tanh(slice(h, 1, 0, channels_)), kScaleBound);
  Var b = slice(h, 1, channels_, 2 * channels_);
  LayerIO out = io;
  out.act = affine_part(io.act, log_s, b, dir);
  Var contribution = sum_per_sample(log_s);
  out.logdet = dir == Direction::forward ? add(io.logdet, contribution) : sub(io.logdet, contribution);
  return out;
}

// ---------------------------------------------------------------- Squeeze / split

LayerIO squeeze(const LayerIO& io, Direction dir) {
  LayerIO out = io;
  out.act = dir == Direction::forward ? squeeze2x2(io.act) : unsqueeze2x2(io.act);
  return out;
}

SplitResult split(const LayerIO& io) {
  if (io.act.value().rank() != 4 || io.act.dim(1) % 2 != 0) {
    throw ShapeError("split needs an even channel count, got " + shape_str(io.act.shape()));
  }
  const auto c = io.act.dim(1);
  SplitResult r{io, slice(io.act, 1, c / 2, c)};
  r.kept.act = slice(io.act, 1, 0, c / 2);
  return r;
}

LayerIO unsplit(const LayerIO& kept, const Var& latent) {
  LayerIO out = kept;
  out.act = concat({kept.act, latent}, 1);
  return out;
}

// ---------------------------------------------------------------- FlowStep

FlowStep::FlowStep(std::string name, std::int64_t channels, std::int64_t cond_channels, std::int64_t hidden, Rng& rng)
    : actnorm_(name + ".actnorm", channels),
      invconv_(name + ".invconv", channels, rng),
      coupling_(name + ".coupling", channels, cond_channels, hidden, rng),
      injector_(name + ".injector", channels, cond_channels, hidden, rng) {}

LayerIO FlowStep::apply(const LayerIO& io, Direction dir) {
  if (dir == Direction::forward) {
    LayerIO t = actnorm_.apply(io, Direction::forward);
    t = invconv_.apply(t, Direction::forward);
    t = coupling_.apply(t, Direction::inverse);
    return injector_.apply(t, Direction::inverse);
  }
  LayerIO t = injector_.apply(io, Direction::forward);
  t = coupling_.apply(t, Direction::forward);
  t = invconv_.apply(t, Direction::inverse);
  return actnorm_.apply(t, Direction::inverse);
}

void FlowStep::visit(const ParamVisitor& f) {
  actnorm_.visit(f);
  invconv_.visit(f);
  coupling_.visit(f);
  injector_.visit(f);
}

}  // namespace deflow::flow
