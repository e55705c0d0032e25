#include "deflow/gauss1d.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "deflow/rng.hpp"

namespace deflow::gauss1d {

namespace {
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

void moments(const std::vector<double>& v, double& mean, double& var) {
  if (v.empty()) {
    mean = var = 0.0;
    return;
  }
  double s = 0.0;
  for (double t : v) s += t;
  mean = s / static_cast<double>(v.size());
  double q = 0.0;
  for (double t : v) q += (t - mean) * (t - mean);
  var = q / static_cast<double>(v.size());
}

// Mean of -ln N(v; mean, var) over the set.
double mean_gaussian_nll(const std::vector<double>& v, double mean, double var) {
  double q = 0.0;
  for (double t : v) q += (t - mean) * (t - mean);
  return 0.5 * (kLog2Pi + std::log(var)) + 0.5 * q / (var * static_cast<double>(v.size()));
}
}  // namespace

std::string to_string(ShiftCase c) {
  return c == ShiftCase::NoisierTarget ? "NoisierTarget" : "ConstantShift";
}

SampleSets1D::SampleSets1D(std::vector<double> xs, std::vector<double> ys)
    : xs_(std::move(xs)), ys_(std::move(ys)) {
  moments(xs_, mean_x_, var_x_);
  moments(ys_, mean_y_, var_y_);
}

Gauss1DSolution fit_closed_form(const SampleSets1D& s) {
  if (s.xs().size() < 2 || s.ys().size() < 2) {
    throw std::invalid_argument("fit_closed_form needs at least two samples per set");
  }
  if (s.var_x() == 0.0 && s.var_y() == 0.0) {
    throw std::domain_error("fit_closed_form: both sample sets have zero variance");
  }
  Gauss1DSolution sol;
  sol.mu_x = s.mean_x();
  sol.mu_u = s.mean_y() - s.mean_x();
  if (s.var_y() >= s.var_x()) {
    sol.var_x = s.var_x();
    sol.var_u = s.var_y() - s.var_x();
    sol.shift_case = ShiftCase::NoisierTarget;
  } else {
    sol.var_x = 0.5 * (s.var_x() + s.var_y());
    sol.var_u = 0.0;
    sol.shift_case = ShiftCase::ConstantShift;
  }
  return sol;
}

double joint_marginal_nll_1d(const Gauss1DSolution& p, const SampleSets1D& s) {
  double nll = 0.0;
  if (!s.xs().empty()) {
    if (!(p.var_x > 0.0)) throw std::domain_error("joint_marginal_nll_1d: var_x must be positive");
    nll += mean_gaussian_nll(s.xs(), p.mu_x, p.var_x);
  }
  if (!s.ys().empty()) {
    const double var_y = p.var_x + p.var_u;
    if (!(var_y > 0.0)) throw std::domain_error("joint_marginal_nll_1d: var_x + var_u must be positive");
    nll += mean_gaussian_nll(s.ys(), p.mu_x + p.mu_u, var_y);
  }
  return nll;
}

StandardBase to_standard_base(const Gauss1DSolution& sol) {
  if (!(sol.var_x > 0.0)) throw std::domain_error("to_standard_base: var_x must be positive");
  const double sd = std::sqrt(sol.var_x);
  return {1.0 / sd, -sol.mu_x / sd, sol.mu_u / sd, sol.var_u / sol.var_x};
}

double joint_nll_standard_base(const StandardBase& b, const SampleSets1D& s) {
  if (!(b.scale > 0.0)) throw std::domain_error("joint_nll_standard_base: scale must be positive");
  const double logdet = std::log(b.scale);
  double nll = 0.0;
  if (!s.xs().empty()) {
    double q = 0.0;
    for (double t : s.xs()) {
      const double z = b.scale * t + b.shift;
      q += z * z;
    }
    nll += 0.5 * kLog2Pi + 0.5 * q / static_cast<double>(s.xs().size()) - logdet;
  }
  if (!s.ys().empty()) {
    const double var = 1.0 + b.var_u;
    double q = 0.0;
    for (double t : s.ys()) {
      const double z = b.scale * t + b.shift - b.mu_u;
      q += z * z;
    }
    nll += 0.5 * (kLog2Pi + std::log(var)) + 0.5 * q / (var * static_cast<double>(s.ys().size())) - logdet;
  }
  return nll;
}

SampleSets1D sample_pairs_1d(const Gauss1DSolution& truth, std::size_t n, std::size_t m, std::uint64_t seed) {
  if (n < 1 || m < 1) throw std::invalid_argument("sample_pairs_1d needs n, m >= 1");
  if (truth.var_x < 0.0 || truth.var_u < 0.0) throw std::invalid_argument("negative variance in truth");
  Rng rng(seed);
  const double sx = std::sqrt(truth.var_x), su = std::sqrt(truth.var_u);
  std::vector<double> xs(n), ys(m);
  for (auto& v : xs) v = truth.mu_x + sx * rng.normal();
  for (auto& v : ys) {
    const double fresh_x = truth.mu_x + sx * rng.normal();
    v = fresh_x + truth.mu_u + su * rng.normal();
  }
  return SampleSets1D(std::move(xs), std::move(ys));
}

}  // namespace deflow::gauss1d
