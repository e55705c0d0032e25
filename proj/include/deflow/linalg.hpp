#pragma once

#include <optional>
#include <vector>

#include "deflow/rng.hpp"
#include "deflow/tensor.hpp"

// Small dense linear algebra on [n,n] / [n,k] tensors. Sizes here are the
// channel counts of a flow level, so everything is O(n^3) and unblocked.
namespace deflow::linalg {

Tensor identity(std::int64_t n);
Tensor transpose(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);

/// Lower Cholesky factor, or nullopt if `s` is not positive definite.
std::optional<Tensor> cholesky(const Tensor& s);

/// Solves L X = B for lower-triangular L.
Tensor solve_lower(const Tensor& l, const Tensor& b, bool unit_diagonal = false);
/// Solves U X = B for upper-triangular U.
Tensor solve_upper(const Tensor& u, const Tensor& b, bool unit_diagonal = false);

/// A = P L U with partial pivoting; L unit lower, U upper.
/// P is given as `perm`: P(perm[i], i) = 1, i.e. row i of L U is row
/// perm[i] of A.
struct LuFactors {
  std::vector<int> perm;
  Tensor lower;
  Tensor upper;
};
LuFactors lu_decompose(const Tensor& a);

Tensor permutation_matrix(const std::vector<int>& perm);

double determinant(const Tensor& a);

/// Haar-ish random orthogonal matrix from Gram-Schmidt on a Gaussian draw.
Tensor random_orthogonal(std::int64_t n, Rng& rng);

/// Symmetric eigen-decomposition by cyclic Jacobi rotations; returns
/// eigenvalues and column eigenvectors.
struct SymEigen {
  std::vector<double> values;
  Tensor vectors;
};
SymEigen symmetric_eigen(const Tensor& s);

}  // namespace deflow::linalg
