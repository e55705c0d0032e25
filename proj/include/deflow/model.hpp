#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "deflow/conditioning.hpp"
#include "deflow/flow.hpp"
#include "deflow/latent_shift.hpp"

namespace deflow {

struct ModelConfig {
  std::int64_t channels = 3;
  /// Number of squeeze levels; 0 selects a single per-channel affine layer.
  int levels = 2;
  int steps = 4;
  std::int64_t hidden = 32;
  std::int64_t cond_features = 8;
  std::int64_t cond_hidden = 16;
  bool diagonal_shift = false;
  double shift_init = 1e-3;
  ConditionSpec condition;
  std::uint64_t seed = 0;
};

struct Encoded {
  LatentGroups z;
  Var logdet;  // [N]
};

struct LossParts {
  Var loss;            // scalar
  double nll_x = 0.0;  // mean per-sample nats
  double nll_y = 0.0;
};

class DeFlowModel {
 public:
  explicit DeFlowModel(const ModelConfig& config);
  DeFlowModel(const DeFlowModel&) = delete;
  DeFlowModel& operator=(const DeFlowModel&) = delete;

  const ModelConfig& config() const { return config_; }
  LatentShift& shift() { return *shift_; }
  ConditionEncoder* encoder() { return encoder_.get(); }
  std::vector<flow::FlowStep>& steps(int level) { return levels_.at(static_cast<std::size_t>(level)); }
  flow::Actnorm* affine() { return affine_.get(); }

  /// Shapes of the latent groups for an [N,C,H,W] input.
  std::vector<Shape> group_shapes(std::int64_t n, std::int64_t h, std::int64_t w) const;
  /// Raw condition image h(img); zeros when conditioning is disabled.
  Tensor condition(const Tensor& img, std::uint64_t seed) const;

  /// z = f(x; h). `cond_raw` is the output of condition() for the same batch
  /// (ignored in affine mode).
  Encoded encode(Tape& tape, const Tensor& x, const Tensor& cond_raw);
  /// x = f^-1(z; h).
  Tensor decode(const std::vector<Tensor>& z, const Tensor& cond_raw);

  /// -mean ln p(x|h(x)) - mean ln p(y|h(y)).
  LossParts marginal_nll(Tape& tape, const Tensor& x, const Tensor& hx, const Tensor& y, const Tensor& hy);
  /// -mean ln p(y|x), both sides encoded under h = hx.
  Var paired_cond_nll(Tape& tape, const Tensor& x, const Tensor& y, const Tensor& hx);

  /// y = f^-1(f(x; h) + tau * u; h), u ~ N(mu, Sigma), with h = condition(x, seed).
  Tensor degrade(const Tensor& x, double tau, std::uint64_t seed);

  /// Runs actnorm data-dependent initialisation on an x batch.
  void initialize(const Tensor& x, const Tensor& hx);
  bool initialized();

  void visit(const flow::ParamVisitor& f);
  std::size_t parameter_count();

 private:
  std::vector<std::pair<std::int64_t, std::int64_t>> level_sizes(std::int64_t h, std::int64_t w) const;
  std::vector<Var> features(Tape& tape, const Tensor& cond_raw, std::int64_t h, std::int64_t w);
  void check_input(const Tensor& x) const;

  ModelConfig config_;
  std::unique_ptr<flow::Actnorm> affine_;
  std::vector<std::vector<flow::FlowStep>> levels_;
  std::unique_ptr<ConditionEncoder> encoder_;
  std::unique_ptr<LatentShift> shift_;
};

}  // namespace deflow
