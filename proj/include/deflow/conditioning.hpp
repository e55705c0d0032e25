#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "deflow/autodiff.hpp"
#include "deflow/flow.hpp"
#include "deflow/rng.hpp"

namespace deflow {

/// h(img) = bicubic_downsample(img, down_factor) + N(0, noise_sigma^2), or
/// zeros when disabled.
struct ConditionSpec {
  int down_factor = 4;
  double noise_sigma = 0.03;
  bool disabled = false;
};

/// Bicubic resampling (a = -0.5) by an integer factor with an antialiasing
/// kernel stretched by the factor and mirrored borders. [N,C,H,W] -> [N,C,H/f,W/f].
Tensor bicubic_downsample(const Tensor& img, int factor);

Tensor make_condition(const Tensor& img, const ConditionSpec& spec, std::uint64_t seed);

/// Three 3x3 convolutions with ReLU between them. The feature map is
/// resized (nearest) to every requested level resolution.
class ConditionEncoder {
 public:
  ConditionEncoder(std::int64_t in_channels, std::int64_t hidden, std::int64_t features, Rng& rng);

  std::int64_t features() const { return features_; }

  /// One feature tensor [N,F,h,w] per entry of `sizes`. When `disabled`,
  /// returns zero constants without running the network.
  std::vector<Var> encode(Tape& tape, const Tensor& raw, const std::vector<std::pair<std::int64_t, std::int64_t>>& sizes,
                          bool disabled);

  void visit(const flow::ParamVisitor& f);

 private:
  std::int64_t features_;
  Parameter w1_, b1_, w2_, b2_, w3_, b3_;
};

}  // namespace deflow
