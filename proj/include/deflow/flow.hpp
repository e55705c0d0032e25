#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "deflow/autodiff.hpp"
#include "deflow/rng.hpp"

namespace deflow::flow {

enum class Direction { forward, inverse };

/// Activation flowing through the layers, its per-sample accumulated
/// log|det J| and the conditioning features at the current resolution.
struct LayerIO {
  Var act;     // [N,C,H,W]
  Var logdet;  // [N]
  Var cond;    // [N,Cc,H,W] or invalid
};

/// Starts a pass with zero log-determinant.
LayerIO begin_io(Tape& tape, const Var& act, const Var& cond = Var());

using ParamVisitor = std::function<void(Parameter&)>;

/// Bound on the log-scale of coupling and injector layers: s = exp(bound * tanh(raw)).
inline constexpr double kScaleBound = 2.0;

/// out = exp(log_scale) * act + bias, per channel.
class Actnorm {
 public:
  Actnorm(std::string name, std::int64_t channels);

  LayerIO apply(const LayerIO& io, Direction dir);
  /// Data-dependent init: per-channel output mean 0, variance 1 on `act`.
  void initialize_from(const Tensor& act);
  bool initialized() const { return initialized_.value[0] != 0.0; }
  void set_initialized(bool on) { initialized_.value[0] = on ? 1.0 : 0.0; }

  Parameter& log_scale() { return log_scale_; }
  Parameter& bias() { return bias_; }
  void visit(const ParamVisitor& f);

 private:
  Parameter log_scale_, bias_;
  Parameter initialized_;  // buffer: 0 or 1
};

/// 1x1 convolution with W = P L (U + diag(sign * exp(log_diag))).
class InvConv1x1 {
 public:
  /// Initialised from the LU factors of a random orthogonal matrix.
  InvConv1x1(std::string name, std::int64_t channels, Rng& rng);

  LayerIO apply(const LayerIO& io, Direction dir);
  /// Dense W from the current parameters.
  Tensor weight() const;
  /// Resets to W = I.
  void set_identity();

  Parameter& lower() { return lower_; }
  Parameter& upper() { return upper_; }
  Parameter& log_diag() { return log_diag_; }
  Parameter& sign() { return sign_; }
  Parameter& perm() { return perm_; }
  void visit(const ParamVisitor& f);

 private:
  std::int64_t channels_;
  Parameter perm_, sign_;  // buffers
  Parameter lower_, upper_, log_diag_;
};

/// conv3x3 -> ReLU -> conv3x3; the last layer starts at zero.
class Subnet {
 public:
  Subnet(std::string name, std::int64_t in, std::int64_t hidden, std::int64_t out, Rng& rng);
  Var operator()(const Var& x);
  void visit(const ParamVisitor& f);
  Parameter& last_weight() { return w2_; }
  Parameter& last_bias() { return b2_; }

 private:
  Parameter w1_, b1_, w2_, b2_;
};

/// Forward: second half of the channels a2 -> s * a2 + b with (raw, b)
/// predicted from the first half and the condition.
class ConditionalCoupling {
 public:
  ConditionalCoupling(std::string name, std::int64_t channels, std::int64_t cond_channels, std::int64_t hidden,
                      Rng& rng);
  LayerIO apply(const LayerIO& io, Direction dir);
  Subnet& subnet() { return net_; }
  void visit(const ParamVisitor& f) { net_.visit(f); }

 private:
  std::int64_t channels_, cond_channels_;
  Subnet net_;
};

/// Forward: act -> s * act + b elementwise, (raw, b) predicted from the condition.
class AffineInjector {
 public:
  AffineInjector(std::string name, std::int64_t channels, std::int64_t cond_channels, std::int64_t hidden, Rng& rng);
  LayerIO apply(const LayerIO& io, Direction dir);
  Subnet& subnet() { return net_; }
  void visit(const ParamVisitor& f) { net_.visit(f); }

 private:
  std::int64_t channels_, cond_channels_;
  Subnet net_;
};

LayerIO squeeze(const LayerIO& io, Direction dir);

/// Forward splits off the last half of the channels as a latent group;
/// inverse concatenates `latent` back.
struct SplitResult {
  LayerIO kept;
  Var latent;
};
SplitResult split(const LayerIO& io);
LayerIO unsplit(const LayerIO& kept, const Var& latent);

/// Actnorm -> InvConv -> coupling (inverted) -> injector (inverted) in the
/// forward (image to latent) direction.
class FlowStep {
 public:
  FlowStep(std::string name, std::int64_t channels, std::int64_t cond_channels, std::int64_t hidden, Rng& rng);
  LayerIO apply(const LayerIO& io, Direction dir);

  Actnorm& actnorm() { return actnorm_; }
  InvConv1x1& invconv() { return invconv_; }
  ConditionalCoupling& coupling() { return coupling_; }
  AffineInjector& injector() { return injector_; }
  void visit(const ParamVisitor& f);

 private:
  Actnorm actnorm_;
  InvConv1x1 invconv_;
  ConditionalCoupling coupling_;
  AffineInjector injector_;
};

}  // namespace deflow::flow
