#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

// Closed-form maximum-likelihood fit of the scalar model
//   x ~ N(mu_x, var_x),  y = x' + u,  u ~ N(mu_u, var_u),  x' independent of u,
// from unpaired samples of x and y, and its single-affine-layer flow form.
namespace deflow::gauss1d {

/// Which KKT branch produced the solution.
enum class ShiftCase {
  NoisierTarget,  ///< var_y >= var_x: var_u = var_y - var_x
  ConstantShift,  ///< var_y <  var_x: u is a constant, var_u = 0
};

std::string to_string(ShiftCase c);

struct Gauss1DSolution {
  double mu_x = 0.0;
  double var_x = 1.0;
  double mu_u = 0.0;
  double var_u = 0.0;
  ShiftCase shift_case = ShiftCase::NoisierTarget;
};

/// Two unrelated sample sets with cached 1/N moments.
class SampleSets1D {
 public:
  SampleSets1D(std::vector<double> xs, std::vector<double> ys);

  const std::vector<double>& xs() const { return xs_; }
  const std::vector<double>& ys() const { return ys_; }
  double mean_x() const { return mean_x_; }
  double mean_y() const { return mean_y_; }
  /// Biased (1/N) empirical variances.
  double var_x() const { return var_x_; }
  double var_y() const { return var_y_; }

 private:
  std::vector<double> xs_;
  std::vector<double> ys_;
  double mean_x_ = 0.0, mean_y_ = 0.0, var_x_ = 0.0, var_y_ = 0.0;
};

/// Global minimiser of the joint marginal NLL subject to var_x, var_u >= 0.
/// Requires at least two samples per set; rejects sets with zero variance
/// in both domains.
Gauss1DSolution fit_closed_form(const SampleSets1D& s);

/// -mean ln N(x; mu_x, var_x) - mean ln N(y; mu_x + mu_u, var_x + var_u).
/// An empty set contributes nothing.
double joint_marginal_nll_1d(const Gauss1DSolution& params, const SampleSets1D& s);

/// Parameters of the affine flow f(t) = scale * t + shift that maps p_x to
/// N(0,1), together with the shift distribution in that latent space.
struct StandardBase {
  double scale = 1.0;
  double shift = 0.0;
  double mu_u = 0.0;
  double var_u = 0.0;
};

StandardBase to_standard_base(const Gauss1DSolution& sol);

/// Joint NLL evaluated through the flow: change of variables with a
/// standard-normal x-latent and an N(mu_u, 1 + var_u) y-latent.
double joint_nll_standard_base(const StandardBase& base, const SampleSets1D& s);

/// n draws of x and m independent draws of x' + u.
SampleSets1D sample_pairs_1d(const Gauss1DSolution& truth, std::size_t n, std::size_t m, std::uint64_t seed);

}  // namespace deflow::gauss1d
