#include "deflow/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>

#include "deflow/rng.hpp"

namespace deflow::train {

std::string to_string(ShiftMode m) {
  switch (m) {
    case ShiftMode::full: return "full";
    case ShiftMode::diagonal: return "diagonal";
    case ShiftMode::frozen: return "frozen";
  }
  return "full";
}

ShiftMode parse_shift_mode(const std::string& s) {
  if (s == "full") return ShiftMode::full;
  if (s == "diagonal") return ShiftMode::diagonal;
  if (s == "frozen" || s == "frozen-zero") return ShiftMode::frozen;
  throw ConfigError("shift_mode", "shift_mode must be full, diagonal or frozen, got '" + s + "'");
}

// ---------------------------------------------------------------- config

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError(key, "invalid number for " + key + ": '" + s + "'");
  }
  return v;
}

std::int64_t parse_int(const std::string& key, const std::string& s) {
  std::int64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError(key, "invalid integer for " + key + ": '" + s + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError(key, "invalid unsigned integer for " + key + ": '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key, "invalid boolean for " + key + ": '" + s + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Field {
  const char* key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

template <typename T>
Field int_field(const char* key, T TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return std::to_string(c.*member); },
          [key, member](TrainConfig& c, const std::string& v) { c.*member = static_cast<T>(parse_int(key, v)); }};
}

Field double_field(const char* key, double TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return fmt_double(c.*member); },
          [key, member](TrainConfig& c, const std::string& v) { c.*member = parse_double(key, v); }};
}

Field bool_field(const char* key, bool TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [key, member](TrainConfig& c, const std::string& v) { c.*member = parse_bool(key, v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      int_field("iterations", &TrainConfig::iterations),
      double_field("base_lr", &TrainConfig::base_lr),
      {"lr_milestones",
       [](const TrainConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.lr_milestones.size(); ++i) s += (i ? "," : "") + fmt_double(c.lr_milestones[i]);
         return s;
       },
       [](TrainConfig& c, const std::string& v) {
         c.lr_milestones.clear();
         std::stringstream ss(v);
         std::string item;
         while (std::getline(ss, item, ',')) {
           item = trim(item);
           if (!item.empty()) c.lr_milestones.push_back(parse_double("lr_milestones", item));
         }
       }},
      int_field("batch_size", &TrainConfig::batch_size),
      int_field("patch_size", &TrainConfig::patch_size),
      int_field("K", &TrainConfig::steps),
      int_field("L", &TrainConfig::levels),
      int_field("H_c", &TrainConfig::hidden),
      int_field("cond_features", &TrainConfig::cond_features),
      int_field("cond_hidden", &TrainConfig::cond_hidden),
      {"shift_mode", [](const TrainConfig& c) { return to_string(c.shift_mode); },
       [](TrainConfig& c, const std::string& v) { c.shift_mode = parse_shift_mode(v); }},
      double_field("shift_init", &TrainConfig::shift_init),
      bool_field("posthoc_shift", &TrainConfig::posthoc_shift),
      int_field("posthoc_batches", &TrainConfig::posthoc_batches),
      {"cond_down", [](const TrainConfig& c) { return std::to_string(c.condition.down_factor); },
       [](TrainConfig& c, const std::string& v) { c.condition.down_factor = static_cast<int>(parse_int("cond_down", v)); }},
      {"cond_sigma", [](const TrainConfig& c) { return fmt_double(c.condition.noise_sigma); },
       [](TrainConfig& c, const std::string& v) { c.condition.noise_sigma = parse_double("cond_sigma", v); }},
      {"cond_disabled", [](const TrainConfig& c) { return std::string(c.condition.disabled ? "true" : "false"); },
       [](TrainConfig& c, const std::string& v) { c.condition.disabled = parse_bool("cond_disabled", v); }},
      int_field("dequant_bits", &TrainConfig::dequant_bits),
      bool_field("channel_norm", &TrainConfig::channel_norm),
      {"seed", [](const TrainConfig& c) { return std::to_string(c.seed); },
       [](TrainConfig& c, const std::string& v) { c.seed = parse_uint("seed", v); }},
      double_field("clip_norm", &TrainConfig::clip_norm),
      double_field("adam_beta1", &TrainConfig::adam_beta1),
      double_field("adam_beta2", &TrainConfig::adam_beta2),
      double_field("adam_eps", &TrainConfig::adam_eps),
      int_field("log_every", &TrainConfig::log_every),
      int_field("checkpoint_every", &TrainConfig::checkpoint_every),
  };
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (key == f.key) return &f;
  return nullptr;
}

}  // namespace

ModelConfig TrainConfig::model_config(std::int64_t channels) const {
  ModelConfig m;
  m.channels = channels;
  m.levels = levels;
  m.steps = steps;
  m.hidden = hidden;
  m.cond_features = cond_features;
  m.cond_hidden = cond_hidden;
  m.diagonal_shift = shift_mode == ShiftMode::diagonal;
  m.shift_init = shift_init;
  m.condition = condition;
  m.seed = seed;
  return m;
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const char* key, const std::string& msg) {
    if (!ok) throw ConfigError(key, std::string(key) + ": " + msg);
  };
  need(iterations >= 0, "iterations", "must be non-negative");
  need(base_lr > 0, "base_lr", "must be positive");
  for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
    need(lr_milestones[i] > 0 && lr_milestones[i] < 1, "lr_milestones", "fractions must lie in (0, 1)");
    need(i == 0 || lr_milestones[i] > lr_milestones[i - 1], "lr_milestones", "must be strictly increasing");
  }
  need(batch_size > 0, "batch_size", "must be positive");
  need(patch_size > 0, "patch_size", "must be positive");
  need(levels >= 0 && levels <= 4, "L", "must be in [0, 4]");
  need(steps > 0, "K", "must be positive");
  need(hidden > 0, "H_c", "must be positive");
  need(cond_features > 0, "cond_features", "must be positive");
  need(cond_hidden > 0, "cond_hidden", "must be positive");
  need(shift_init >= 0, "shift_init", "must be non-negative");
  need(posthoc_batches > 0, "posthoc_batches", "must be positive");
  need(condition.down_factor > 0, "cond_down", "must be positive");
  need(condition.noise_sigma >= 0, "cond_sigma", "must be non-negative");
  need(dequant_bits >= 0 && dequant_bits <= 8, "dequant_bits", "must be in [0, 8]");
  need(clip_norm > 0, "clip_norm", "must be positive");
  need(adam_beta1 >= 0 && adam_beta1 < 1, "adam_beta1", "must be in [0, 1)");
  need(adam_beta2 >= 0 && adam_beta2 < 1, "adam_beta2", "must be in [0, 1)");
  need(adam_eps > 0, "adam_eps", "must be positive");
  need(log_every > 0, "log_every", "must be positive");
  need(checkpoint_every >= 0, "checkpoint_every", "must be non-negative");
  if (levels > 0) {
    const std::int64_t unit = std::int64_t{1} << levels;
    need(patch_size % unit == 0, "patch_size", "must be divisible by 2^L = " + std::to_string(unit));
    need(patch_size % condition.down_factor == 0, "patch_size", "must be divisible by cond_down");
  }
}

std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(cfg));
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

bool is_config_key(const std::string& key) { return find_field(key) != nullptr; }

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError(key, "unknown config key '" + key + "'");
  f->set(cfg, trim(value));
}

TrainConfig parse_config_text(const std::string& text, const std::vector<std::string>& extra,
                              std::map<std::string, std::string>* extra_values) {
  TrainConfig cfg;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(line, "line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (seen[key]++) throw ConfigError(key, "duplicate config key '" + key + "'");
    if (std::find(extra.begin(), extra.end(), key) != extra.end()) {
      if (extra_values) (*extra_values)[key] = value;
      continue;
    }
    set_config_value(cfg, key, value);
  }
  return cfg;
}

std::string format_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : config_entries(cfg)) out += k + "=" + v + "\n";
  return out;
}

bool same_architecture(const TrainConfig& a, const TrainConfig& b) {
  return a.levels == b.levels && a.steps == b.steps && a.hidden == b.hidden && a.cond_features == b.cond_features &&
         a.cond_hidden == b.cond_hidden &&
         (a.shift_mode == ShiftMode::diagonal) == (b.shift_mode == ShiftMode::diagonal);
}

double lr_at(const TrainConfig& cfg, std::int64_t iter) {
  int passed = 0;
  for (double m : cfg.lr_milestones)
    if (static_cast<double>(iter) >= m * static_cast<double>(cfg.iterations)) ++passed;
  return std::ldexp(cfg.base_lr, -passed);
}

// ---------------------------------------------------------------- Adam

void adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr) {
  for (const Parameter* p : params) {
    if (p->grad.shape() != p->value.shape()) throw ShapeError("adam_step: gradient shape mismatch for " + p->name);
    if (!p->grad.all_finite()) throw NonFiniteGradient(p->name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t), c2 = 1.0 - std::pow(state.beta2, t);
  for (Parameter* p : params) {
    auto& mom = state.moments[p->name];
    if (mom.m.shape() != p->value.shape()) {
      mom.m = Tensor(p->value.shape(), 0.0);
      mom.v = Tensor(p->value.shape(), 0.0);
    }
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double g = p->grad[i];
      mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g;
      mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g * g;
      p->value[i] -= lr * (mom.m[i] / c1) / (std::sqrt(mom.v[i] / c2) + state.eps);
    }
  }
}

// ---------------------------------------------------------------- batches

CorpusBatches::CorpusBatches(const data::Corpus& corpus, const TrainConfig& cfg)
    : corpus_(corpus),
      batch_size_(cfg.batch_size),
      patch_(cfg.patch_size),
      bits_(cfg.dequant_bits),
      seed_(cfg.seed) {
  if (corpus.clean().empty() || corpus.degraded().empty()) throw std::invalid_argument("corpus has an empty domain");
  if (cfg.channel_norm) norm_ = data::channel_stats(corpus);
}

Batch CorpusBatches::batch(std::uint64_t index) const {
  const std::uint64_t s = derive_seed(seed_, index);
  auto [x, y] = data::sample_unpaired_batch(corpus_, static_cast<std::size_t>(batch_size_), patch_, derive_seed(s, 0));
  Batch b{data::dequantize(x, bits_, derive_seed(s, 1)), data::dequantize(y, bits_, derive_seed(s, 2))};
  if (!norm_.empty()) {
    b.x = data::normalize_with(b.x, norm_.x_mean, norm_.x_std);
    b.y = data::normalize_with(b.y, norm_.y_mean, norm_.y_std);
  }
  return b;
}

FixedBatches FixedBatches::from_samples(const gauss1d::SampleSets1D& s) {
  const auto n = static_cast<std::int64_t>(s.xs().size()), m = static_cast<std::int64_t>(s.ys().size());
  return FixedBatches(Tensor(Shape{n, 1, 1, 1}, s.xs()), Tensor(Shape{m, 1, 1, 1}, s.ys()));
}

// ---------------------------------------------------------------- training

TrainState::TrainState(const TrainConfig& cfg, std::int64_t ch) : config(cfg), channels(ch) {
  config.validate();
  model = std::make_unique<DeFlowModel>(config.model_config(channels));
  if (config.shift_mode == ShiftMode::frozen) {
    model->shift().set_zero();
    model->shift().set_trainable(false);
  }
  adam.beta1 = config.adam_beta1;
  adam.beta2 = config.adam_beta2;
  adam.eps = config.adam_eps;
}

std::vector<Parameter*> TrainState::trainable() {
  std::vector<Parameter*> out;
  model->visit([&](Parameter& p) {
    if (p.trainable) out.push_back(&p);
  });
  return out;
}

std::string format_log_row(const LogRow& r) {
  return std::to_string(r.iter) + "," + fmt_double(r.lr) + "," + fmt_double(r.nll_total) + "," + fmt_double(r.nll_x) +
         "," + fmt_double(r.nll_y) + "," + fmt_double(r.grad_norm);
}

namespace {
std::pair<Tensor, Tensor> conditions(DeFlowModel& model, const Batch& b, std::uint64_t seed, std::uint64_t index) {
  const std::uint64_t s = derive_seed(seed, index);
  return {model.condition(b.x, derive_seed(s, 3)), model.condition(b.y, derive_seed(s, 4))};
}
}  // namespace

TrainReport train(TrainState& state, const BatchSource& source, const TrainHooks& hooks) {
  const TrainConfig& cfg = state.config;
  if (source.channels() != state.channels) throw std::invalid_argument("batch channels do not match the model");
  DeFlowModel& model = *state.model;
  TrainReport report;
  if (hooks.log && hooks.write_header) *hooks.log << kLogHeader << "\n";
  auto params = state.trainable();

  for (std::int64_t it = state.iteration; it < cfg.iterations; ++it) {
    const Batch b = source.batch(static_cast<std::uint64_t>(it));
    const auto [hx, hy] = conditions(model, b, cfg.seed, static_cast<std::uint64_t>(it));
    if (!model.initialized()) model.initialize(b.x, hx);
    for (Parameter* p : params) p->zero_grad();

    LogRow row;
    row.iter = it;
    row.lr = lr_at(cfg, it);
    try {
      Tape tape;
      LossParts parts = model.marginal_nll(tape, b.x, hx, b.y, hy);
      row.nll_total = parts.loss.value()[0];
      row.nll_x = parts.nll_x;
      row.nll_y = parts.nll_y;
      if (!std::isfinite(row.nll_total) || tape.non_finite_detected()) {
        throw std::domain_error("non-finite loss at iteration " + std::to_string(it));
      }
      tape.backward(parts.loss);
      double sq = 0;
      for (Parameter* p : params)
        for (double g : p->grad.raw()) sq += g * g;
      row.grad_norm = std::sqrt(sq);
      if (!std::isfinite(row.grad_norm)) {
        for (Parameter* p : params)
          if (!p->grad.all_finite()) throw NonFiniteGradient(p->name);
      }
      if (row.grad_norm > cfg.clip_norm) {
        const double f = cfg.clip_norm / row.grad_norm;
        for (Parameter* p : params)
          for (double& g : p->grad.raw()) g *= f;
        ++report.clipped;
      }
      adam_step(params, state.adam, row.lr);
    } catch (const std::exception& e) {
      report.halted = true;
      report.message = std::string("halted at iteration ") + std::to_string(it) + ": " + e.what();
      break;
    }
    state.iteration = it + 1;
    report.rows.push_back(row);
    const bool last = it + 1 == cfg.iterations;
    if (hooks.log && (it % cfg.log_every == 0 || last || row.grad_norm > cfg.clip_norm)) {
      *hooks.log << format_log_row(row) << "\n";
    }
    if (!hooks.checkpoint.empty() && cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && !last) {
      save_checkpoint(hooks.checkpoint, state);
    }
  }
  if (!report.halted && cfg.shift_mode == ShiftMode::frozen && cfg.posthoc_shift) {
    estimate_posthoc_shift(state, source, cfg.posthoc_batches);
  }
  if (hooks.log) hooks.log->flush();
  if (!hooks.checkpoint.empty()) save_checkpoint(hooks.checkpoint, state);
  return report;
}

void estimate_posthoc_shift(TrainState& state, const BatchSource& source, std::int64_t batches) {
  DeFlowModel& model = *state.model;
  std::vector<std::vector<Tensor>> zx, zy;
  for (std::int64_t i = 0; i < batches; ++i) {
    const auto index = (std::uint64_t{1} << 62) + static_cast<std::uint64_t>(i);
    const Batch b = source.batch(index);
    const auto [hx, hy] = conditions(model, b, state.config.seed, index);
    if (!model.initialized()) model.initialize(b.x, hx);
    Tape tape(Tape::Mode::inference);
    const Encoded ex = model.encode(tape, b.x, hx), ey = model.encode(tape, b.y, hy);
    zx.resize(ex.z.size());
    zy.resize(ey.z.size());
    for (std::size_t g = 0; g < ex.z.size(); ++g) {
      zx[g].push_back(ex.z[g].value());
      zy[g].push_back(ey.z[g].value());
    }
  }
  auto stack = [](const std::vector<Tensor>& parts) {
    Shape shape = parts.front().shape();
    shape[0] = 0;
    std::vector<double> data;
    for (const auto& t : parts) {
      shape[0] += t.dim(0);
      data.insert(data.end(), t.raw().begin(), t.raw().end());
    }
    return Tensor(shape, std::move(data));
  };
  std::vector<Tensor> gx, gy;
  for (std::size_t g = 0; g < zx.size(); ++g) {
    gx.push_back(stack(zx[g]));
    gy.push_back(stack(zy[g]));
  }
  estimate_shift(model.shift(), gx, gy);
}

// ---------------------------------------------------------------- checkpoints

namespace {
constexpr char kMagic[8] = {'D', 'F', 'L', 'W', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::vector<char>& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

void put_string(std::vector<char>& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.insert(out.end(), s.begin(), s.end());
}

struct Reader {
  std::span<const char> in;
  std::size_t off = 0;

  void need(std::size_t n) const {
    if (off + n > in.size()) throw std::runtime_error("checkpoint truncated");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
  }
  std::string string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s(in.data() + off, n);
    off += n;
    return s;
  }
  Tensor tensor() { return read_tensor_from(in, off); }
};

std::uint64_t fnv1a(std::span<const char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct CheckpointData {
  std::uint32_t channels = 0;
  TrainConfig config;
  std::string config_text;
  std::int64_t iteration = 0, adam_step = 0;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, AdamMoments>> moments;
  data::NormStats norm;
};

std::vector<double> as_vec(const Tensor& t) { return {t.raw().begin(), t.raw().end()}; }

CheckpointData parse(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 + 4 + 8 || std::memcmp(buf.data(), kMagic, 8) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint file");
  }
  Reader r{std::span<const char>(buf.data(), buf.size() - 8), 8};
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint " + path.string() + " has format version " + std::to_string(version) +
                             ", expected " + std::to_string(kCheckpointVersion));
  }
  std::uint64_t stored = 0;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (stored != fnv1a(std::span<const char>(buf.data(), buf.size() - 8))) {
    throw std::runtime_error("checkpoint " + path.string() + " is corrupt or truncated (checksum mismatch)");
  }
  CheckpointData d;
  d.channels = r.get<std::uint32_t>();
  d.config_text = r.string();
  d.config = parse_config_text(d.config_text);
  d.iteration = r.get<std::int64_t>();
  d.adam_step = r.get<std::int64_t>();
  const auto np = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < np; ++i) {
    std::string name = r.string();
    d.params.emplace_back(std::move(name), r.tensor());
  }
  const auto nm = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < nm; ++i) {
    std::string name = r.string();
    AdamMoments m;
    m.m = r.tensor();
    m.v = r.tensor();
    d.moments.emplace_back(std::move(name), std::move(m));
  }
  if (r.get<std::uint32_t>() != 0) {
    d.norm.x_mean = as_vec(r.tensor());
    d.norm.x_std = as_vec(r.tensor());
    d.norm.y_mean = as_vec(r.tensor());
    d.norm.y_std = as_vec(r.tensor());
  }
  if (r.off != r.in.size()) throw std::runtime_error("checkpoint " + path.string() + " has trailing bytes");
  return d;
}

void apply(const CheckpointData& d, TrainState& state, const std::filesystem::path& path) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [n, t] : d.params) by_name[n] = &t;
  std::size_t matched = 0;
  state.model->visit([&](Parameter& p) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint " + path.string() + " lacks parameter " + p.name);
    if (it->second->shape() != p.value.shape()) {
      throw std::runtime_error("checkpoint parameter " + p.name + " has shape " + shape_str(it->second->shape()) +
                               ", model expects " + shape_str(p.value.shape()));
    }
    p.value = *it->second;
    p.zero_grad();
    ++matched;
  });
  if (matched != d.params.size()) throw std::runtime_error("checkpoint " + path.string() + " has extra parameters");
  state.iteration = d.iteration;
  state.adam.step = d.adam_step;
  state.adam.moments.clear();
  for (const auto& [n, m] : d.moments) state.adam.moments[n] = m;
  state.norm = d.norm;
}
}  // namespace

std::vector<char> serialize_checkpoint(TrainState& state) {
  std::vector<char> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(state.channels));
  put_string(out, format_config(state.config));
  put<std::int64_t>(out, state.iteration);
  put<std::int64_t>(out, state.adam.step);
  std::vector<Parameter*> all;
  state.model->visit([&](Parameter& p) { all.push_back(&p); });
  put<std::uint32_t>(out, static_cast<std::uint32_t>(all.size()));
  for (Parameter* p : all) {
    put_string(out, p->name);
    write_tensor_to(out, p->value);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(state.adam.moments.size()));
  for (const auto& [name, m] : state.adam.moments) {
    put_string(out, name);
    write_tensor_to(out, m.m);
    write_tensor_to(out, m.v);
  }
  put<std::uint32_t>(out, state.norm.empty() ? 0 : 1);
  if (!state.norm.empty()) {
    auto vec = [](const std::vector<double>& v) { return Tensor(Shape{static_cast<std::int64_t>(v.size())}, v); };
    write_tensor_to(out, vec(state.norm.x_mean));
    write_tensor_to(out, vec(state.norm.x_std));
    write_tensor_to(out, vec(state.norm.y_mean));
    write_tensor_to(out, vec(state.norm.y_std));
  }
  put<std::uint64_t>(out, fnv1a(out));
  return out;
}

void save_checkpoint(const std::filesystem::path& path, TrainState& state) {
  const auto bytes = serialize_checkpoint(state);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::unique_ptr<TrainState> load_checkpoint(const std::filesystem::path& path) {
  const CheckpointData d = parse(path);
  auto state = std::make_unique<TrainState>(d.config, d.channels);
  apply(d, *state, path);
  return state;
}

void load_checkpoint_into(const std::filesystem::path& path, TrainState& state) {
  const CheckpointData d = parse(path);
  if (!same_architecture(d.config, state.config) || static_cast<std::int64_t>(d.channels) != state.channels) {
    throw std::runtime_error("checkpoint " + path.string() + " does not match the model architecture.\n" +
                             "checkpoint config (channels=" + std::to_string(d.channels) + "):\n" + d.config_text +
                             "model config (channels=" + std::to_string(state.channels) + "):\n" +
                             format_config(state.config));
  }
  apply(d, state, path);
}

}  // namespace deflow::train
