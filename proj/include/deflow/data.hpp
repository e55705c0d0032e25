#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "deflow/tensor.hpp"

namespace deflow::data {

// ---------------------------------------------------------------- image I/O

/// 8-bit PNG (gray, gray+alpha, RGB, RGBA, palette) or binary PPM/PGM.
/// Returns [C,H,W] in [0,1]; alpha is dropped.
Tensor load_image(const std::filesystem::path& path);
/// Writes [C,H,W] (C = 1 or 3) as 8-bit PNG, values rounded and clamped.
void save_png(const std::filesystem::path& path, const Tensor& img);

/// 8-bit pixel -> bucket floor(p / 2^(8-bits)) -> (bucket + U[0,1)) / 2^bits.
/// bits = 0 returns the input unchanged. Input values are p / 255.
Tensor dequantize(const Tensor& img, int bits, std::uint64_t seed);
inline Tensor dequantize_5bit(const Tensor& img, std::uint64_t seed) { return dequantize(img, 5, seed); }

// ---------------------------------------------------------------- oracles

/// Known synthetic degradation y = clean + n.
struct DegradationOracle {
  enum class Kind { white_noise, correlated_noise, shifted_noise };
  Kind kind = Kind::white_noise;
  /// white/correlated: per-entry noise std.
  double sigma = 0.04;
  /// correlated: std (pixels) of the Gaussian blur applied to white noise.
  double corr_width = 1.0;
  /// shifted: per-channel mean and channel covariance of the noise vector.
  std::vector<double> mean;
  Tensor cov;

  /// clean [C,H,W] -> degraded [C,H,W], not clamped.
  Tensor apply(const Tensor& clean, std::uint64_t seed) const;
  /// Normalised 1-D blur taps for correlated noise (unit L2 norm in 2-D).
  std::vector<double> kernel() const;
  /// Lag-1 spatial autocorrelation implied by the kernel.
  double kernel_lag1() const;
  /// Per-channel noise mean / covariance implied by the oracle.
  std::vector<double> noise_mean(std::int64_t channels) const;
  Tensor noise_cov(std::int64_t channels) const;

  std::string kind_name() const;
  static Kind parse_kind(const std::string& name);
};

/// Channel-correlated Gaussian noise used by the recovery experiments:
/// mean (0.008, 0, -0.008), std 0.04, correlation 0.5.
DegradationOracle default_shift_oracle();

// ---------------------------------------------------------------- corpus

class EvalAccess;
/// Issues the evaluation capability; defined by the evaluation module.
EvalAccess grant_evaluation_access();

/// Evaluation-only capability guarding the hidden pairing of oracle corpora.
class EvalAccess {
 private:
  EvalAccess() = default;
  friend EvalAccess grant_evaluation_access();
};

/// Clean and degraded image sets. Oracle corpora additionally carry the
/// hidden clean source of each degraded image, reachable only with EvalAccess.
class Corpus {
 public:
  Corpus() = default;
  Corpus(std::vector<Tensor> clean, std::vector<Tensor> degraded);

  const std::vector<Tensor>& clean() const { return clean_; }
  const std::vector<Tensor>& degraded() const { return degraded_; }
  std::int64_t channels() const;
  const std::optional<DegradationOracle>& oracle() const { return oracle_; }
  std::uint64_t seed() const { return seed_; }
  bool has_hidden_pairing() const { return !hidden_sources_.empty(); }

  /// Clean source of every degraded image (oracle corpora only).
  const std::vector<Tensor>& hidden_sources(const EvalAccess&) const;

  void save(const std::filesystem::path& dir) const;
  /// Reads clean/, degraded/ and meta.txt; the hidden pairing is loaded when present.
  static Corpus load(const std::filesystem::path& dir);

 private:
  friend Corpus synth_corpus(const DegradationOracle&, std::size_t, std::size_t, std::uint64_t, std::int64_t,
                             std::int64_t);
  std::vector<Tensor> clean_, degraded_, hidden_sources_;
  std::optional<DegradationOracle> oracle_;
  std::uint64_t seed_ = 0;
};

/// Procedural smooth clean image [C,size,size] in [0.2, 0.8] with every
/// channel mean 0.5, rendered at twice the size and bicubic-downsampled.
Tensor synth_clean_image(std::int64_t channels, std::int64_t size, std::uint64_t seed);

/// n_clean images for X and n_degraded degraded versions of other, disjoint
/// source images for Y. Images are quantised to 8 bits.
Corpus synth_corpus(const DegradationOracle& oracle, std::size_t n_clean, std::size_t n_degraded, std::uint64_t seed,
                    std::int64_t size = 48, std::int64_t channels = 3);

/// Per-domain channel statistics for normalisation.
struct NormStats {
  std::vector<double> x_mean, x_std, y_mean, y_std;
  bool empty() const { return x_mean.empty(); }
};

NormStats channel_stats(const Corpus& corpus);
/// Maps both domains to zero mean, unit std per channel with their own statistics.
std::pair<Corpus, NormStats> channel_normalize(const Corpus& corpus);
/// (img - mean) / std channel-wise for images [C,H,W] or batches [N,C,H,W].
Tensor normalize_with(const Tensor& img, const std::vector<double>& mean, const std::vector<double>& std);
Tensor denormalize_with(const Tensor& img, const std::vector<double>& mean, const std::vector<double>& std);

/// Random crops with independent horizontal/vertical flips; x and y images
/// chosen uniformly from their domains. Returns ([B,C,p,p], [B,C,p,p]).
std::pair<Tensor, Tensor> sample_unpaired_batch(const Corpus& corpus, std::size_t batch_size, std::int64_t patch,
                                                std::uint64_t seed);

}  // namespace deflow::data
