#include "deflow/latent_shift.hpp"

#include <cmath>
#include <stdexcept>

#include "deflow/linalg.hpp"
#include "deflow/rng.hpp"

namespace deflow {

using namespace deflow::ops;

LatentShift::LatentShift(const std::vector<std::int64_t>& group_channels, bool diagonal, double m_init,
                         const std::string& prefix)
    : diagonal_(diagonal) {
  for (std::size_t g = 0; g < group_channels.size(); ++g) {
    const auto c = group_channels[g];
    const std::string name = prefix + "." + std::to_string(g);
    mu_.emplace_back(name + ".mu", Tensor(Shape{c}, 0.0));
    if (diagonal_) {
      m_.emplace_back(name + ".m_diag", Tensor(Shape{c}, m_init));
    } else {
      Tensor m(Shape{c, c}, 0.0);
      for (std::int64_t i = 0; i < c; ++i) m.at(i, i) = m_init;
      m_.emplace_back(name + ".m", std::move(m));
    }
  }
}

Tensor LatentShift::m_matrix(std::size_t g) const {
  if (!diagonal_) return m_.at(g).value;
  const auto c = channels(g);
  Tensor m(Shape{c, c}, 0.0);
  for (std::int64_t i = 0; i < c; ++i) m.at(i, i) = m_.at(g).value[static_cast<std::size_t>(i)];
  return m;
}

Var LatentShift::m_var(Tape& tape, std::size_t g) {
  Var p = tape.param(m_.at(g));
  return diagonal_ ? diag_embed(p) : p;
}

Tensor LatentShift::covariance(std::size_t g) const {
  const Tensor m = m_matrix(g);
  return linalg::matmul(m, linalg::transpose(m));
}

void LatentShift::set_zero() {
  for (auto& p : mu_) p.value.fill(0.0);
  for (auto& p : m_) p.value.fill(0.0);
}

void LatentShift::set_trainable(bool on) {
  for (auto& p : mu_) p.trainable = on;
  for (auto& p : m_) p.trainable = on;
}

void LatentShift::visit(const flow::ParamVisitor& f) {
  for (std::size_t g = 0; g < mu_.size(); ++g) {
    f(mu_[g]);
    f(m_[g]);
  }
}

namespace {
void require_groups(const LatentGroups& z, const LatentShift& shift) {
  if (z.size() != shift.groups()) {
    throw ShapeError("expected " + std::to_string(shift.groups()) + " latent groups, got " + std::to_string(z.size()));
  }
  for (std::size_t g = 0; g < z.size(); ++g) {
    if (z[g].value().rank() != 4 || z[g].dim(1) != shift.channels(g)) {
      throw ShapeError("latent group " + std::to_string(g) + " has shape " + shape_str(z[g].shape()));
    }
  }
}

Var accumulate(const Var& total, const Var& term) { return total.valid() ? add(total, term) : term; }
}  // namespace

Var logp_zx(const LatentGroups& z) {
  if (z.empty()) throw std::invalid_argument("logp_zx: no latent groups");
  Var total;
  for (const auto& g : z) total = accumulate(total, std_normal_logpdf(g));
  return total;
}

Var logp_zy(const LatentGroups& z, LatentShift& shift) {
  require_groups(z, shift);
  Var total;
  for (std::size_t g = 0; g < z.size(); ++g) {
    Tape& tape = *z[g].tape();
    Var mu = reshape(tape.param(shift.mu(g)), Shape{1, shift.channels(g), 1, 1});
    total = accumulate(total, shared_gaussian_logpdf(sub(z[g], mu), shift.m_var(tape, g), true));
  }
  return total;
}

Var logp_cond_latent(const LatentGroups& z_y, const LatentGroups& z_x, LatentShift& shift) {
  require_groups(z_y, shift);
  require_groups(z_x, shift);
  Var total;
  for (std::size_t g = 0; g < z_y.size(); ++g) {
    if (z_y[g].shape() != z_x[g].shape()) {
      throw ShapeError("conditional density: group shapes differ " + shape_str(z_y[g].shape()) + " vs " +
                       shape_str(z_x[g].shape()));
    }
    Tape& tape = *z_y[g].tape();
    Var mu = reshape(tape.param(shift.mu(g)), Shape{1, shift.channels(g), 1, 1});
    Var r = sub(sub(z_y[g], z_x[g]), mu);
    try {
      total = accumulate(total, shared_gaussian_logpdf(r, shift.m_var(tape, g), false));
    } catch (const std::domain_error&) {
      throw std::domain_error("conditional density is degenerate: shift covariance of latent group " +
                              std::to_string(g) + " is singular");
    }
  }
  return total;
}

std::vector<Tensor> sample_u(const LatentShift& shift, const std::vector<Shape>& shapes, double tau,
                             std::uint64_t seed) {
  if (!(tau >= 0.0)) throw std::invalid_argument("sample_u: temperature must be nonnegative");
  if (shapes.size() != shift.groups()) throw ShapeError("sample_u: group count mismatch");
  Rng rng(seed);
  std::vector<Tensor> out;
  for (std::size_t g = 0; g < shapes.size(); ++g) {
    const Shape& s = shapes[g];
    if (s.size() != 4 || s[1] != shift.channels(g)) throw ShapeError("sample_u: bad group shape " + shape_str(s));
    const Tensor m = shift.m_matrix(g);
    const Tensor& mu = shift.mu(g).value;
    const auto c = s[1];
    Tensor u(s, 0.0);
    std::vector<double> e(static_cast<std::size_t>(c));
    for (std::int64_t n = 0; n < s[0]; ++n)
      for (std::int64_t y = 0; y < s[2]; ++y)
        for (std::int64_t x = 0; x < s[3]; ++x) {
          for (auto& v : e) v = rng.normal();
          for (std::int64_t i = 0; i < c; ++i) {
            double acc = mu[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < c; ++j) acc += m.at(i, j) * e[static_cast<std::size_t>(j)];
            u.at(n, i, y, x) = tau * acc;
          }
        }
    out.push_back(std::move(u));
  }
  return out;
}

namespace {
// Pooled channel mean and 1/N covariance over batch and positions.
void channel_moments(const Tensor& z, std::vector<double>& mean, Tensor& cov) {
  const auto n = z.dim(0), c = z.dim(1), h = z.dim(2), w = z.dim(3);
  const double count = static_cast<double>(n * h * w);
  mean.assign(static_cast<std::size_t>(c), 0.0);
  cov = Tensor(Shape{c, c}, 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        for (std::int64_t a = 0; a < c; ++a) mean[static_cast<std::size_t>(a)] += z.at(i, a, y, x) / count;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        for (std::int64_t a = 0; a < c; ++a)
          for (std::int64_t b = 0; b < c; ++b)
            cov.at(a, b) += (z.at(i, a, y, x) - mean[static_cast<std::size_t>(a)]) *
                            (z.at(i, b, y, x) - mean[static_cast<std::size_t>(b)]) / count;
}
}  // namespace

void estimate_shift(LatentShift& shift, const std::vector<Tensor>& z_x, const std::vector<Tensor>& z_y,
                    double floor) {
  if (z_x.size() != shift.groups() || z_y.size() != shift.groups()) {
    throw ShapeError("estimate_shift: group count mismatch");
  }
  for (std::size_t g = 0; g < shift.groups(); ++g) {
    std::vector<double> mx, my;
    Tensor cx, cy;
    channel_moments(z_x[g], mx, cx);
    channel_moments(z_y[g], my, cy);
    const auto c = shift.channels(g);
    if (cx.dim(0) != c || cy.dim(0) != c) throw ShapeError("estimate_shift: channel mismatch");
    for (std::int64_t i = 0; i < c; ++i) {
      shift.mu(g).value[static_cast<std::size_t>(i)] = my[static_cast<std::size_t>(i)] - mx[static_cast<std::size_t>(i)];
    }
    if (shift.diagonal()) {
      for (std::int64_t i = 0; i < c; ++i) {
        shift.m(g).value[static_cast<std::size_t>(i)] = std::sqrt(std::max(cy.at(i, i) - cx.at(i, i), floor));
      }
      continue;
    }
    Tensor diff(Shape{c, c});
    for (std::int64_t i = 0; i < c; ++i)
      for (std::int64_t j = 0; j < c; ++j) diff.at(i, j) = cy.at(i, j) - cx.at(i, j);
    const auto eig = linalg::symmetric_eigen(diff);
    Tensor& m = shift.m(g).value;
    for (std::int64_t i = 0; i < c; ++i)
      for (std::int64_t k = 0; k < c; ++k)
        m.at(i, k) = eig.vectors.at(i, k) * std::sqrt(std::max(eig.values[static_cast<std::size_t>(k)], floor));
  }
}

}  // namespace deflow
