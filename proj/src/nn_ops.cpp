// Image-shaped differentiable ops: convolution, channel mixing, space-to-depth,
// resampling and the Gaussian latent densities.
#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>

#include "deflow/autodiff.hpp"
#include "deflow/linalg.hpp"

namespace deflow::ops {

using detail::Node;

namespace {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_nchw(const Var& x, const char* op) {
  if (x.value().rank() != 4) {
    throw ShapeError(std::string(op) + " expects [N,C,H,W], got " + shape_str(x.shape()));
  }
}

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// Unfolds one [C,H,W] image into [C*k*k, H*W] columns (zero padding k/2).
void im2col(const double* img, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k,
            double* col) {
  const std::int64_t pad = k / 2;
  const std::int64_t hw = h * w;
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t ky = 0; ky < k; ++ky)
      for (std::int64_t kx = 0; kx < k; ++kx) {
        double* dst = col + ((ch * k + ky) * k + kx) * hw;
        const double* src = img + ch * hw;
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t iy = y + ky - pad;
          double* row = dst + y * w;
          if (iy < 0 || iy >= h) {
            std::fill(row, row + w, 0.0);
            continue;
          }
          for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t ix = x + kx - pad;
            row[x] = (ix < 0 || ix >= w) ? 0.0 : src[iy * w + ix];
          }
        }
      }
}

void col2im_add(const double* col, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k,
                double* img) {
  const std::int64_t pad = k / 2;
  const std::int64_t hw = h * w;
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t ky = 0; ky < k; ++ky)
      for (std::int64_t kx = 0; kx < k; ++kx) {
        const double* src = col + ((ch * k + ky) * k + kx) * hw;
        double* dst = img + ch * hw;
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t iy = y + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t ix = x + kx - pad;
            if (ix >= 0 && ix < w) dst[iy * w + ix] += src[y * w + x];
          }
        }
      }
}
}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b) {
  require_nchw(x, "conv2d");
  if (w.value().rank() != 4 || w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) {
    throw ShapeError("conv2d kernel must be [Co,C,k,k] with odd k, got " + shape_str(w.shape()));
  }
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", kernel " +
                     shape_str(w.shape()));
  }
  if (b.value().rank() != 1 || b.dim(0) != w.dim(0)) {
    throw ShapeError("conv2d bias " + shape_str(b.shape()) + " for kernel " + shape_str(w.shape()));
  }
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto co = w.dim(0), k = w.dim(2);
  const std::int64_t hw = h * wd, ckk = c * k * k;
  auto cols = std::make_shared<AlignedVec>(static_cast<std::size_t>(n * ckk * hw));
  Tensor out(Shape{n, co, h, wd});
  ConstMapMat wm(w.value().raw().data(), co, ckk);
  Eigen::Map<const Eigen::VectorXd> bias(b.value().raw().data(), co);
  for (std::int64_t s = 0; s < n; ++s) {
    double* col = cols->data() + s * ckk * hw;
    im2col(x.value().raw().data() + s * c * hw, c, h, wd, k, col);
    MapMat o(out.raw().data() + s * co * hw, co, hw);
    o.noalias() = wm * ConstMapMat(col, ckk, hw);
    o.colwise() += bias;
  }
  return make_result(std::move(out), {x, w, b}, [=](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nw = *self.inputs[1];
    Node& nb = *self.inputs[2];
    ConstMapMat wm(nw.value.raw().data(), co, ckk);
    AlignedVec gcol(nx.requires_grad ? static_cast<std::size_t>(ckk * hw) : 0);
    for (std::int64_t s = 0; s < n; ++s) {
      ConstMapMat g(self.grad.raw().data() + s * co * hw, co, hw);
      ConstMapMat col(cols->data() + s * ckk * hw, ckk, hw);
      if (nw.requires_grad) MapMat(nw.grad_buffer().raw().data(), co, ckk).noalias() += g * col.transpose();
      if (nb.requires_grad) Eigen::Map<Eigen::VectorXd>(nb.grad_buffer().raw().data(), co) += g.rowwise().sum();
      if (nx.requires_grad) {
        MapMat(gcol.data(), ckk, hw).noalias() = wm.transpose() * g;
        col2im_add(gcol.data(), c, h, wd, k, nx.grad_buffer().raw().data() + s * c * hw);
      }
    }
  });
}

Var channel_mix(const Var& x, const Var& w) {
  require_nchw(x, "channel_mix");
  if (w.value().rank() != 2 || w.dim(1) != x.dim(1)) {
    throw ShapeError("channel_mix weight " + shape_str(w.shape()) + " for input " + shape_str(x.shape()));
  }
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), co = w.dim(0);
  Tensor out(Shape{n, co, x.dim(2), x.dim(3)});
  ConstMapMat wm(w.value().raw().data(), co, c);
  for (std::int64_t s = 0; s < n; ++s) {
    MapMat(out.raw().data() + s * co * hw, co, hw).noalias() =
        wm * ConstMapMat(x.value().raw().data() + s * c * hw, c, hw);
  }
  return make_result(std::move(out), {x, w}, [=](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nw = *self.inputs[1];
    ConstMapMat wm(nw.value.raw().data(), co, c);
    for (std::int64_t s = 0; s < n; ++s) {
      ConstMapMat g(self.grad.raw().data() + s * co * hw, co, hw);
      if (nw.requires_grad) {
        MapMat(nw.grad_buffer().raw().data(), co, c).noalias() +=
            g * ConstMapMat(nx.value.raw().data() + s * c * hw, c, hw).transpose();
      }
      if (nx.requires_grad) {
        MapMat(nx.grad_buffer().raw().data() + s * c * hw, c, hw).noalias() += wm.transpose() * g;
      }
    }
  });
}

namespace {
// Index map for 2x2 space-to-depth on [n,c,h,w] -> [n,4c,h/2,w/2]; calls
// f(squeezed_index, unsqueezed_index).
template <typename F>
void squeeze_map(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w, F&& f) {
  const std::int64_t h2 = h / 2, w2 = w / 2;
  std::size_t o = 0;
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t k = 0; k < 4; ++k) {
        const std::int64_t dy = k / 2, dx = k % 2;
        for (std::int64_t i = 0; i < h2; ++i)
          for (std::int64_t j = 0; j < w2; ++j, ++o)
            f(o, static_cast<std::size_t>(((s * c + ch) * h + 2 * i + dy) * w + 2 * j + dx));
      }
}
}  // namespace

Var squeeze2x2(const Var& x) {
  require_nchw(x, "squeeze2x2");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("squeeze needs even spatial extents, got " + shape_str(x.shape()));
  Tensor out(Shape{n, 4 * c, h / 2, w / 2});
  const auto& xv = x.value().raw();
  squeeze_map(n, c, h, w, [&](std::size_t o, std::size_t i) { out[o] = xv[i]; });
  return make_result(std::move(out), {x}, [=](Node& self) {
    auto& g = self.inputs[0]->grad_buffer().raw();
    squeeze_map(n, c, h, w, [&](std::size_t o, std::size_t i) { g[i] += self.grad[o]; });
  });
}

Var unsqueeze2x2(const Var& x) {
  require_nchw(x, "unsqueeze2x2");
  const auto n = x.dim(0), c4 = x.dim(1);
  if (c4 % 4) throw ShapeError("unsqueeze needs channels divisible by 4, got " + shape_str(x.shape()));
  const auto c = c4 / 4, h = x.dim(2) * 2, w = x.dim(3) * 2;
  Tensor out(Shape{n, c, h, w});
  const auto& xv = x.value().raw();
  squeeze_map(n, c, h, w, [&](std::size_t o, std::size_t i) { out[i] = xv[o]; });
  return make_result(std::move(out), {x}, [=](Node& self) {
    auto& g = self.inputs[0]->grad_buffer().raw();
    squeeze_map(n, c, h, w, [&](std::size_t o, std::size_t i) { g[o] += self.grad[i]; });
  });
}

Var resize_nearest(const Var& x, std::int64_t height, std::int64_t width) {
  require_nchw(x, "resize_nearest");
  if (height <= 0 || width <= 0) throw ShapeError("resize_nearest to non-positive extent");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == height && w == width) return x;
  auto src_index = [=](std::int64_t plane, std::int64_t i, std::int64_t j) {
    return static_cast<std::size_t>((plane * h + i * h / height) * w + j * w / width);
  };
  Tensor out(Shape{n, c, height, width});
  const auto& xv = x.value().raw();
  std::size_t o = 0;
  for (std::int64_t p = 0; p < n * c; ++p)
    for (std::int64_t i = 0; i < height; ++i)
      for (std::int64_t j = 0; j < width; ++j) out[o++] = xv[src_index(p, i, j)];
  return make_result(std::move(out), {x}, [=](Node& self) {
    auto& g = self.inputs[0]->grad_buffer().raw();
    std::size_t o = 0;
    for (std::int64_t p = 0; p < n * c; ++p)
      for (std::int64_t i = 0; i < height; ++i)
        for (std::int64_t j = 0; j < width; ++j) g[src_index(p, i, j)] += self.grad[o++];
  });
}

Var std_normal_logpdf(const Var& z) {
  const auto n = z.dim(0);
  const std::size_t per = z.numel() / static_cast<std::size_t>(n);
  Tensor out(Shape{n});
  const auto& zv = z.value().raw();
  for (std::int64_t s = 0; s < n; ++s) {
    double q = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      const double v = zv[static_cast<std::size_t>(s) * per + i];
      q += v * v;
    }
    out[static_cast<std::size_t>(s)] = -0.5 * q - 0.5 * static_cast<double>(per) * kLog2Pi;
  }
  return make_result(std::move(out), {z}, [per](Node& self) {
    Node& nz = *self.inputs[0];
    auto& g = nz.grad_buffer().raw();
    for (std::size_t s = 0; s < self.grad.numel(); ++s)
      for (std::size_t i = 0; i < per; ++i) g[s * per + i] -= self.grad[s] * nz.value[s * per + i];
  });
}

Var shared_gaussian_logpdf(const Var& r, const Var& m, bool add_identity) {
  require_nchw(r, "shared_gaussian_logpdf");
  const auto n = r.dim(0), c = r.dim(1), hw = r.dim(2) * r.dim(3);
  if (m.value().rank() != 2 || m.dim(0) != c || m.dim(1) != c) {
    throw ShapeError("shared_gaussian_logpdf factor " + shape_str(m.shape()) + " for variate " +
                     shape_str(r.shape()));
  }
  Tensor cov = linalg::matmul(m.value(), linalg::transpose(m.value()));
  if (add_identity)
    for (std::int64_t i = 0; i < c; ++i) cov.at(i, i) += 1.0;
  auto chol = linalg::cholesky(cov);
  if (!chol) {
    throw std::domain_error(add_identity ? "covariance I + M M^T failed to factorize"
                                         : "shift covariance M M^T is singular; conditional density is degenerate");
  }
  double logdet = 0.0;
  for (std::int64_t i = 0; i < c; ++i) logdet += 2.0 * std::log(chol->at(i, i));
  const Tensor lower_inv = linalg::solve_lower(*chol, linalg::identity(c));
  auto prec = std::make_shared<Tensor>(linalg::matmul(linalg::transpose(lower_inv), lower_inv));
  const double per_loc = -0.5 * (logdet + static_cast<double>(c) * kLog2Pi);

  Tensor out(Shape{n});
  ConstMapMat p(prec->raw().data(), c, c);
  RowMat a(c, hw);
  for (std::int64_t s = 0; s < n; ++s) {
    ConstMapMat rs(r.value().raw().data() + s * c * hw, c, hw);
    a.noalias() = p * rs;
    out[static_cast<std::size_t>(s)] = -0.5 * rs.cwiseProduct(a).sum() + static_cast<double>(hw) * per_loc;
  }
  return make_result(std::move(out), {r, m}, [=](Node& self) {
    Node& nr = *self.inputs[0];
    Node& nm = *self.inputs[1];
    ConstMapMat p(prec->raw().data(), c, c);
    RowMat a(c, hw);
    RowMat dcov = RowMat::Zero(c, c);
    for (std::int64_t s = 0; s < n; ++s) {
      const double g = self.grad[static_cast<std::size_t>(s)];
      ConstMapMat rs(nr.value.raw().data() + s * c * hw, c, hw);
      a.noalias() = p * rs;
      if (nr.requires_grad) MapMat(nr.grad_buffer().raw().data() + s * c * hw, c, hw) -= g * a;
      if (nm.requires_grad) {
        dcov.noalias() += 0.5 * g * (a * a.transpose());
        dcov -= 0.5 * g * static_cast<double>(hw) * p;
      }
    }
    if (nm.requires_grad) {
      ConstMapMat mm(nm.value.raw().data(), c, c);
      MapMat(nm.grad_buffer().raw().data(), c, c).noalias() += (dcov + dcov.transpose()) * mm;
    }
  });
}

}  // namespace deflow::ops
