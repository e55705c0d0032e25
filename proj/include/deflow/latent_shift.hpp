#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deflow/autodiff.hpp"
#include "deflow/flow.hpp"

namespace deflow {

/// Ordered latent tensors, one per split plus the final activation. Each is [N,C_g,H_g,W_g].
using LatentGroups = std::vector<Var>;

/// Gaussian shift u ~ N(mu, M M^T) between the x- and y-latents, with one
/// (mu, M) per latent group, shared over spatial positions.
class LatentShift {
 public:
  /// M starts at `m_init` * I (or its diagonal in diagonal mode); mu at 0.
  LatentShift(const std::vector<std::int64_t>& group_channels, bool diagonal, double m_init = 1e-3,
              const std::string& prefix = "shift");

  std::size_t groups() const { return mu_.size(); }
  bool diagonal() const { return diagonal_; }
  std::int64_t channels(std::size_t g) const { return mu_.at(g).value.dim(0); }

  Parameter& mu(std::size_t g) { return mu_.at(g); }
  const Parameter& mu(std::size_t g) const { return mu_.at(g); }
  /// [C,C] in full mode, [C] in diagonal mode.
  Parameter& m(std::size_t g) { return m_.at(g); }
  const Parameter& m(std::size_t g) const { return m_.at(g); }

  /// Dense M of group g.
  Tensor m_matrix(std::size_t g) const;
  Var m_var(Tape& tape, std::size_t g);
  /// Sigma_u = M M^T.
  Tensor covariance(std::size_t g) const;

  void set_zero();
  /// Excludes every shift parameter from optimisation (frozen-shift training).
  void set_trainable(bool on);
  void visit(const flow::ParamVisitor& f);

 private:
  bool diagonal_;
  std::vector<Parameter> mu_, m_;
};

/// Sum over groups and entries of ln N(z; 0, I): [N].
Var logp_zx(const LatentGroups& z);
/// Sum over groups and positions of ln N(z; mu, I + M M^T): [N].
Var logp_zy(const LatentGroups& z, LatentShift& shift);
/// Sum over groups and positions of ln N(z_y; z_x + mu, M M^T): [N].
/// Throws std::domain_error when M M^T is singular.
Var logp_cond_latent(const LatentGroups& z_y, const LatentGroups& z_x, LatentShift& shift);

/// Draws u = tau * (M e + mu), e ~ N(0, I), independently at each position of
/// each group. `shapes` are the [N,C,H,W] group shapes.
std::vector<Tensor> sample_u(const LatentShift& shift, const std::vector<Shape>& shapes, double tau,
                             std::uint64_t seed);

/// Post-hoc shift from latent statistics: mu = mean(z_y) - mean(z_x) and
/// Sigma = cov(z_y) - cov(z_x) projected onto the PSD cone (eigenvalues
/// floored at `floor`). Groups are [N,C,H,W]; positions pooled.
void estimate_shift(LatentShift& shift, const std::vector<Tensor>& z_x, const std::vector<Tensor>& z_y,
                    double floor = 1e-6);

}  // namespace deflow
