#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "deflow/data.hpp"
#include "deflow/model.hpp"

namespace deflow::eval {

/// Clean image batch [N,C,H,W] -> degraded batch in image space. With
/// normalisation stats, x is mapped with the x-domain statistics before
/// the model and the output back with the y-domain statistics.
class Degrader {
 public:
  explicit Degrader(DeFlowModel& model, data::NormStats norm = {}) : model_(model), norm_(std::move(norm)) {}
  Tensor operator()(const Tensor& x, double tau, std::uint64_t seed) const;
  DeFlowModel& model() const { return model_; }
  const data::NormStats& norm() const { return norm_; }

 private:
  DeFlowModel& model_;
  data::NormStats norm_;
};

/// Cuts [C,H,W] images into non-overlapping tile x tile crops in raster
/// order; tile = 0 returns the images unchanged. Extents must be divisible.
std::vector<Tensor> tile_images(const std::vector<Tensor>& imgs, std::int64_t tile);

struct ResidualStats {
  std::vector<double> mean;      // per channel
  std::vector<double> variance;  // per channel
  Tensor covariance;             // [C,C]
  std::vector<double> lag1;      // horizontal lag-1 autocorrelation per channel
  std::size_t count = 0;         // pixels per channel

  std::vector<double> stddev() const;
};

/// Moments of residual maps ([C,H,W] or [N,C,H,W]), pooled over all pixels.
ResidualStats residual_moments(const std::vector<Tensor>& residuals);

/// Statistics of degrade(x) - x over the clean set, `n_samples` draws per image.
ResidualStats residual_stats(const Degrader& degrader, const std::vector<Tensor>& clean_set, double tau,
                             int n_samples, std::uint64_t seed);

struct HeldoutNll {
  double x = 0.0, y = 0.0;  // nats per dimension
};

/// Mean NLL per dimension of each domain in image units. `dequant_bits`
/// matches training; normalisation contributes its log-Jacobian.
HeldoutNll heldout_nll(DeFlowModel& model, const data::NormStats& norm, const std::vector<Tensor>& xs,
                       const std::vector<Tensor>& ys, int dequant_bits, std::uint64_t seed);

/// -ln p(y|x) per dimension over the hidden pairs of an oracle corpus,
/// optionally on matching tiles of each pair.
double paired_nll(DeFlowModel& model, const data::NormStats& norm, const data::Corpus& corpus,
                  const data::EvalAccess& access, int dequant_bits, std::uint64_t seed, std::int64_t tile = 0);

/// Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|.
double ks_statistic(std::vector<double> a, std::vector<double> b);

/// Residual statistics implied by an oracle.
struct Truth {
  std::vector<double> mean;
  Tensor covariance;
  std::vector<double> lag1;
};
Truth truth_from_oracle(const data::DegradationOracle& oracle, std::int64_t channels);

/// Recovery errors against the truth. Mean errors are in units of the true
/// per-channel noise std (true means may be zero).
struct RecoveryErrors {
  double mean_error = 0.0;      // max_c |est - true| / true std_c
  double std_rel_error = 0.0;   // max_c |est std - true std| / true std
  double cov_frobenius = 0.0;   // ||est - true||_F / ||true||_F
};
RecoveryErrors recovery_errors(const ResidualStats& est, const Truth& truth);

struct Report {
  ResidualStats residuals;
  std::optional<Truth> truth;
  HeldoutNll nll;
  std::optional<double> paired;
  double tau = 1.0;
};

/// True when any reported number is NaN.
bool has_nan(const Report& r);

/// Writes `dir`/residuals.csv, `dir`/nll.csv and, with truth, `dir`/summary.csv.
/// Throws when unwritable.
void emit_report(const Report& r, const std::filesystem::path& dir);

/// Minimal CSV reader (no quoting) returning the header and rows.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace deflow::eval
