#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deflow/data.hpp"
#include "deflow/gauss1d.hpp"
#include "deflow/model.hpp"

namespace deflow::train {

enum class ShiftMode { full, diagonal, frozen };

std::string to_string(ShiftMode m);
ShiftMode parse_shift_mode(const std::string& s);

/// Raised for unknown keys, unparsable values and violated invariants.
/// `key()` names the offending entry.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& what) : std::invalid_argument(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct TrainConfig {
  std::int64_t iterations = 100000;
  double base_lr = 5e-5;
  /// Fractions of `iterations` at which the learning rate halves.
  std::vector<double> lr_milestones{0.5, 0.75, 0.9, 0.95};
  std::int64_t batch_size = 8;
  std::int64_t patch_size = 160;
  int steps = 4;   // K
  int levels = 2;  // L; 0 = single affine layer
  std::int64_t hidden = 64;
  std::int64_t cond_features = 8;
  std::int64_t cond_hidden = 16;
  ShiftMode shift_mode = ShiftMode::full;
  double shift_init = 1e-3;
  /// Frozen mode: estimate the shift from latent statistics after training.
  bool posthoc_shift = false;
  std::int64_t posthoc_batches = 16;
  ConditionSpec condition;
  int dequant_bits = 5;
  bool channel_norm = false;
  std::uint64_t seed = 0;
  double clip_norm = 100.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::int64_t log_every = 100;
  std::int64_t checkpoint_every = 0;

  ModelConfig model_config(std::int64_t channels) const;
  /// Throws ConfigError on violated invariants.
  void validate() const;
};

/// Flat key=value view. Every key maps to exactly one field.
std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& cfg);
std::vector<std::string> config_keys();
bool is_config_key(const std::string& key);
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
/// Lines "key=value"; '#' starts a comment. Keys not in `extra` or the
/// config are rejected. Values of `extra` keys are returned in the map.
TrainConfig parse_config_text(const std::string& text, const std::vector<std::string>& extra = {},
                              std::map<std::string, std::string>* extra_values = nullptr);
std::string format_config(const TrainConfig& cfg);
/// Keys that change the parameter layout.
bool same_architecture(const TrainConfig& a, const TrainConfig& b);

/// base_lr * 2^-(milestones passed); a milestone at fraction f is passed
/// once iter >= f * iterations.
double lr_at(const TrainConfig& cfg, std::int64_t iter);

struct AdamMoments {
  Tensor m, v;
};

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t step = 0;
  /// Keyed by parameter name.
  std::map<std::string, AdamMoments> moments;
};

/// Non-finite gradient; names the first offending parameter.
class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient in parameter " + param), param_(param) {}
  const std::string& param() const { return param_; }

 private:
  std::string param_;
};

/// Bias-corrected Adam update of every trainable parameter from its grad.
/// All gradients are checked before anything is modified.
void adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr);

struct Batch {
  Tensor x, y;  // [B,C,H,W] each
};

/// Source of training batches; batch i depends only on (seed, i).
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual Batch batch(std::uint64_t index) const = 0;
  virtual std::int64_t channels() const = 0;
};

/// Unpaired crops from an image corpus, dequantized and optionally
/// channel-normalized per domain.
class CorpusBatches : public BatchSource {
 public:
  CorpusBatches(const data::Corpus& corpus, const TrainConfig& cfg);
  Batch batch(std::uint64_t index) const override;
  std::int64_t channels() const override { return corpus_.channels(); }
  const data::NormStats& norm() const { return norm_; }

 private:
  const data::Corpus& corpus_;
  std::int64_t batch_size_, patch_;
  int bits_;
  std::uint64_t seed_;
  data::NormStats norm_;
};

/// The same full batch every iteration, e.g. 1-D samples as [N,1,1,1].
class FixedBatches : public BatchSource {
 public:
  FixedBatches(Tensor x, Tensor y) : b_{std::move(x), std::move(y)} {}
  static FixedBatches from_samples(const gauss1d::SampleSets1D& s);
  Batch batch(std::uint64_t) const override { return b_; }
  std::int64_t channels() const override { return b_.x.dim(1); }

 private:
  Batch b_;
};

/// Model, optimizer and counters: everything a checkpoint holds.
struct TrainState {
  TrainConfig config;
  std::int64_t channels = 3;
  std::unique_ptr<DeFlowModel> model;
  AdamState adam;
  std::int64_t iteration = 0;
  data::NormStats norm;

  TrainState(const TrainConfig& cfg, std::int64_t channels);
  /// Trainable parameters in visiting order.
  std::vector<Parameter*> trainable();
};

struct LogRow {
  std::int64_t iter = 0;
  double lr = 0, nll_total = 0, nll_x = 0, nll_y = 0, grad_norm = 0;
};

inline constexpr const char* kLogHeader = "iter,lr,nll_total,nll_x,nll_y,grad_norm";
std::string format_log_row(const LogRow& r);

struct TrainHooks {
  /// CSV metrics log; the header is written when `write_header`.
  std::ostream* log = nullptr;
  bool write_header = true;
  /// Checkpoint written every `checkpoint_every` iterations and at the end.
  std::filesystem::path checkpoint;
};

struct TrainReport {
  std::vector<LogRow> rows;  // every iteration
  std::int64_t clipped = 0;
  bool halted = false;
  std::string message;
};

/// Runs from state.iteration up to config.iterations. On a non-finite loss
/// or gradient the run halts without applying the step; the checkpoint
/// then holds the last good state.
TrainReport train(TrainState& state, const BatchSource& source, const TrainHooks& hooks = {});

/// Post-hoc shift from `batches` batches of the source.
void estimate_posthoc_shift(TrainState& state, const BatchSource& source, std::int64_t batches);

// ---------------------------------------------------------------- checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<char> serialize_checkpoint(TrainState& state);
void save_checkpoint(const std::filesystem::path& path, TrainState& state);
/// Rebuilds the state from the echoed config.
std::unique_ptr<TrainState> load_checkpoint(const std::filesystem::path& path);
/// Loads into an existing state; the architecture must match, otherwise
/// the error message prints both configs.
void load_checkpoint_into(const std::filesystem::path& path, TrainState& state);

}  // namespace deflow::train
