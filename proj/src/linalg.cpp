#include "deflow/linalg.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>

namespace deflow::linalg {

namespace {
void require_square(const Tensor& a, const char* what) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ShapeError(std::string(what) + ": expected square matrix, got " + shape_str(a.shape()));
  }
}
}  // namespace

Tensor identity(std::int64_t n) {
  Tensor t(Shape{n, n}, 0.0);
  for (std::int64_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor transpose(const Tensor& a) {
  Tensor t(Shape{a.dim(1), a.dim(0)});
  for (std::int64_t i = 0; i < a.dim(0); ++i)
    for (std::int64_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor c(Shape{a.dim(0), b.dim(1)}, 0.0);
  for (std::int64_t i = 0; i < a.dim(0); ++i)
    for (std::int64_t k = 0; k < a.dim(1); ++k) {
      const double aik = a.at(i, k);
      for (std::int64_t j = 0; j < b.dim(1); ++j) c.at(i, j) += aik * b.at(k, j);
    }
  return c;
}

std::optional<Tensor> cholesky(const Tensor& s) {
  require_square(s, "cholesky");
  const auto n = s.dim(0);
  Tensor l(Shape{n, n}, 0.0);
  for (std::int64_t j = 0; j < n; ++j) {
    double d = s.at(j, j);
    for (std::int64_t k = 0; k < j; ++k) d -= l.at(j, k) * l.at(j, k);
    if (!(d > 0.0)) return std::nullopt;
    const double ljj = std::sqrt(d);
    l.at(j, j) = ljj;
    for (std::int64_t i = j + 1; i < n; ++i) {
      double v = s.at(i, j);
      for (std::int64_t k = 0; k < j; ++k) v -= l.at(i, k) * l.at(j, k);
      l.at(i, j) = v / ljj;
    }
  }
  return l;
}

Tensor solve_lower(const Tensor& l, const Tensor& b, bool unit_diagonal) {
  require_square(l, "solve_lower");
  const auto n = l.dim(0);
  if (b.rank() != 2 || b.dim(0) != n) throw ShapeError("solve_lower: rhs " + shape_str(b.shape()));
  Tensor x = b;
  for (std::int64_t c = 0; c < b.dim(1); ++c)
    for (std::int64_t i = 0; i < n; ++i) {
      double v = x.at(i, c);
      for (std::int64_t k = 0; k < i; ++k) v -= l.at(i, k) * x.at(k, c);
      x.at(i, c) = unit_diagonal ? v : v / l.at(i, i);
    }
  return x;
}

Tensor solve_upper(const Tensor& u, const Tensor& b, bool unit_diagonal) {
  require_square(u, "solve_upper");
  const auto n = u.dim(0);
  if (b.rank() != 2 || b.dim(0) != n) throw ShapeError("solve_upper: rhs " + shape_str(b.shape()));
  Tensor x = b;
  for (std::int64_t c = 0; c < b.dim(1); ++c)
    for (std::int64_t i = n - 1; i >= 0; --i) {
      double v = x.at(i, c);
      for (std::int64_t k = i + 1; k < n; ++k) v -= u.at(i, k) * x.at(k, c);
      x.at(i, c) = unit_diagonal ? v : v / u.at(i, i);
    }
  return x;
}

LuFactors lu_decompose(const Tensor& a) {
  require_square(a, "lu_decompose");
  const auto n = a.dim(0);
  Tensor w = a;
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (std::int64_t k = 0; k < n; ++k) {
    std::int64_t piv = k;
    for (std::int64_t i = k + 1; i < n; ++i)
      if (std::abs(w.at(i, k)) > std::abs(w.at(piv, k))) piv = i;
    if (w.at(piv, k) == 0.0) throw std::domain_error("lu_decompose: singular matrix");
    if (piv != k) {
      for (std::int64_t j = 0; j < n; ++j) std::swap(w.at(k, j), w.at(piv, j));
      std::swap(perm[static_cast<std::size_t>(k)], perm[static_cast<std::size_t>(piv)]);
    }
    for (std::int64_t i = k + 1; i < n; ++i) {
      w.at(i, k) /= w.at(k, k);
      for (std::int64_t j = k + 1; j < n; ++j) w.at(i, j) -= w.at(i, k) * w.at(k, j);
    }
  }
  LuFactors f{std::move(perm), identity(n), Tensor(Shape{n, n}, 0.0)};
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      if (j < i) f.lower.at(i, j) = w.at(i, j);
      else f.upper.at(i, j) = w.at(i, j);
    }
  return f;
}

Tensor permutation_matrix(const std::vector<int>& perm) {
  const auto n = static_cast<std::int64_t>(perm.size());
  Tensor p(Shape{n, n}, 0.0);
  for (std::int64_t i = 0; i < n; ++i) p.at(perm[static_cast<std::size_t>(i)], i) = 1.0;
  return p;
}

double determinant(const Tensor& a) {
  require_square(a, "determinant");
  LuFactors f;
  try {
    f = lu_decompose(a);
  } catch (const std::domain_error&) {
    return 0.0;
  }
  double det = 1.0;
  for (std::int64_t i = 0; i < a.dim(0); ++i) det *= f.upper.at(i, i);
  // Sign of the permutation from its cycle count.
  std::vector<bool> seen(f.perm.size(), false);
  int transpositions = 0;
  for (std::size_t i = 0; i < f.perm.size(); ++i) {
    if (seen[i]) continue;
    std::size_t j = i;
    int len = 0;
    while (!seen[j]) {
      seen[j] = true;
      j = static_cast<std::size_t>(f.perm[j]);
      ++len;
    }
    transpositions += len - 1;
  }
  return transpositions % 2 ? -det : det;
}

Tensor random_orthogonal(std::int64_t n, Rng& rng) {
  Tensor q(Shape{n, n});
  for (auto& v : q.raw()) v = rng.normal();
  // Modified Gram-Schmidt on columns.
  for (std::int64_t j = 0; j < n; ++j) {
    for (std::int64_t k = 0; k < j; ++k) {
      double dot = 0.0;
      for (std::int64_t i = 0; i < n; ++i) dot += q.at(i, j) * q.at(i, k);
      for (std::int64_t i = 0; i < n; ++i) q.at(i, j) -= dot * q.at(i, k);
    }
    double norm = 0.0;
    for (std::int64_t i = 0; i < n; ++i) norm += q.at(i, j) * q.at(i, j);
    norm = std::sqrt(norm);
    for (std::int64_t i = 0; i < n; ++i) q.at(i, j) /= norm;
  }
  return q;
}

SymEigen symmetric_eigen(const Tensor& s) {
  require_square(s, "symmetric_eigen");
  const auto n = s.dim(0);
  Tensor a = s;
  Tensor v = identity(n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::int64_t p = 0; p < n; ++p)
      for (std::int64_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
    if (off < 1e-30) break;
    for (std::int64_t p = 0; p < n; ++p)
      for (std::int64_t q = p + 1; q < n; ++q) {
        if (a.at(p, q) == 0.0) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * a.at(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::int64_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - sn * akq;
          a.at(k, q) = sn * akp + c * akq;
        }
        for (std::int64_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - sn * aqk;
          a.at(q, k) = sn * apk + c * aqk;
        }
        for (std::int64_t k = 0; k < n; ++k) {
          const double vkp = v.at(k, p), vkq = v.at(k, q);
          v.at(k, p) = c * vkp - sn * vkq;
          v.at(k, q) = sn * vkp + c * vkq;
        }
      }
  }
  SymEigen e{std::vector<double>(static_cast<std::size_t>(n)), std::move(v)};
  for (std::int64_t i = 0; i < n; ++i) e.values[static_cast<std::size_t>(i)] = a.at(i, i);
  return e;
}

}  // namespace deflow::linalg
