// deflow: command-line front end (gauss1d, train, sample, eval, synth-corpus).

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "deflow/eval.hpp"
#include "deflow/gauss1d.hpp"
#include "deflow/trainer.hpp"

namespace fs = std::filesystem;
using namespace deflow;

namespace {

constexpr int kOk = 0, kRuntime = 1, kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --seed, then DEFLOW_SEED, then entropy (printed so the run can be repeated).
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const std::optional<std::uint64_t>& fallback = {}) {
  if (flag) return *flag;
  if (fallback) return *fallback;
  if (const char* env = std::getenv("DEFLOW_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("DEFLOW_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  std::random_device rd;
  const std::uint64_t s = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  std::cerr << "seed: " << s << "\n";
  return s;
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw UsageError("cannot read " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::vector<fs::path> image_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("input directory " + dir.string() + " does not exist");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (ext == ".png" || ext == ".ppm" || ext == ".pgm") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::unique_ptr<train::TrainState> open_checkpoint(const fs::path& p) {
  if (!fs::exists(p)) throw UsageError("checkpoint " + p.string() + " does not exist");
  return train::load_checkpoint(p);
}

// ---------------------------------------------------------------- gauss1d

struct Gauss1dArgs {
  double mu_x = 0, var_x = 0, mu_u = 0, var_u = 0;
  std::size_t n = 0, m = 0;
  std::optional<std::uint64_t> seed;
  bool train = false;
  std::int64_t iterations = 2000;
  double lr = 0.02;
};

int run_gauss1d(const Gauss1dArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed);
  const gauss1d::Gauss1DSolution truth{a.mu_x, a.var_x, a.mu_u, a.var_u, gauss1d::ShiftCase::NoisierTarget};
  const auto sets = gauss1d::sample_pairs_1d(truth, a.n, a.m ? a.m : a.n, seed);
  const auto sol = gauss1d::fit_closed_form(sets);
  std::cout << "closed_form mu_x=" << fmt(sol.mu_x) << " var_x=" << fmt(sol.var_x) << " mu_u=" << fmt(sol.mu_u)
            << " var_u=" << fmt(sol.var_u) << " case=" << gauss1d::to_string(sol.shift_case) << "\n";
  std::cout << "closed_form_nll " << fmt(gauss1d::joint_marginal_nll_1d(sol, sets)) << "\n";
  const auto base = gauss1d::to_standard_base(sol);
  std::cout << "standard_base scale=" << fmt(base.scale) << " shift=" << fmt(base.shift) << " mu_u=" << fmt(base.mu_u)
            << " var_u=" << fmt(base.var_u) << "\n";
  if (a.train) {
    train::TrainConfig c;
    c.levels = 0;
    c.iterations = a.iterations;
    c.base_lr = a.lr;
    c.patch_size = 1;
    c.batch_size = static_cast<std::int64_t>(sets.xs().size());
    c.dequant_bits = 0;
    c.seed = seed;
    train::TrainState st(c, 1);
    const auto src = train::FixedBatches::from_samples(sets);
    const auto rep = train::train(st, src);
    if (rep.halted) throw std::runtime_error(rep.message);
    auto& shift = st.model->shift();
    const double m = shift.m(0).value[0];
    const double ls = st.model->affine()->log_scale().value[0], b = st.model->affine()->bias().value[0];
    std::cout << "trained_flow scale=" << fmt(std::exp(ls)) << " shift=" << fmt(b) << " mu_u=" << fmt(shift.mu(0).value[0])
              << " var_u=" << fmt(m * m) << "\n";
    const gauss1d::StandardBase learned{std::exp(ls), b, shift.mu(0).value[0], m * m};
    std::cout << "trained_flow_nll " << fmt(gauss1d::joint_nll_standard_base(learned, sets)) << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, corpus, out;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  std::map<std::string, std::string> extra;
  train::TrainConfig cfg;
  std::optional<std::uint64_t> config_seed;
  try {
    std::string text = a.config.empty() ? "" : read_text(a.config);
    cfg = train::parse_config_text(text, {"corpus", "out_dir"}, &extra);
    for (const auto& kv : a.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw train::ConfigError(kv, "--set expects key=value, got '" + kv + "'");
      const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
      if (key == "corpus" || key == "out_dir") {
        extra[key] = value;
      } else {
        train::set_config_value(cfg, key, value);
        text += "\n" + kv;
      }
    }
    if (train::parse_config_text(text, {"corpus", "out_dir"}).seed != train::TrainConfig{}.seed ||
        text.find("seed") != std::string::npos) {
      config_seed = cfg.seed;
    }
    cfg.seed = resolve_seed(a.seed, config_seed);
    cfg.validate();
  } catch (const train::ConfigError& e) {
    std::cerr << "config error (key '" << e.key() << "'): " << e.what() << "\n";
    return kUsage;
  }
  const std::string corpus_dir = a.corpus.empty() ? extra["corpus"] : a.corpus;
  const std::string out_dir = a.out.empty() ? extra["out_dir"] : a.out;
  if (corpus_dir.empty()) throw UsageError("no corpus given (--corpus or corpus= in the config)");
  if (out_dir.empty()) throw UsageError("no output directory given (--out or out_dir= in the config)");
  if (!fs::is_directory(corpus_dir)) throw UsageError("corpus directory " + corpus_dir + " does not exist");

  const data::Corpus corpus = data::Corpus::load(corpus_dir);
  fs::create_directories(out_dir);
  {
    std::ofstream f(fs::path(out_dir) / "config.txt", std::ios::trunc);
    f << train::format_config(cfg) << "corpus=" << corpus_dir << "\n";
  }
  train::TrainState state(cfg, corpus.channels());
  train::CorpusBatches src(corpus, cfg);
  state.norm = src.norm();
  std::ofstream log(fs::path(out_dir) / "train_log.csv", std::ios::trunc);
  train::TrainHooks hooks;
  hooks.log = &log;
  hooks.checkpoint = fs::path(out_dir) / "model.ckpt";
  const auto rep = train::train(state, src, hooks);
  if (rep.clipped > 0) std::cerr << "gradient clipped at " << rep.clipped << " iterations\n";
  if (rep.halted) {
    std::cerr << rep.message << "\n";
    return kRuntime;
  }
  if (!rep.rows.empty()) {
    const auto& last = rep.rows.back();
    std::cout << "iterations " << state.iteration << " nll_x " << fmt(last.nll_x) << " nll_y " << fmt(last.nll_y) << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------- sample

struct SampleArgs {
  std::string checkpoint, input, out;
  double tau = 1.0;
  int count = 1;
  std::optional<std::uint64_t> seed;
};

int run_sample(const SampleArgs& a) {
  auto state = open_checkpoint(a.checkpoint);
  const auto files = image_files(a.input);
  if (a.count < 1) throw UsageError("--count must be positive");
  const std::uint64_t seed = resolve_seed(a.seed);
  fs::create_directories(a.out);
  eval::Degrader degrade(*state->model, state->norm);
  char tau_str[32];
  std::snprintf(tau_str, sizeof(tau_str), "%.2f", a.tau);
  for (std::size_t i = 0; i < files.size(); ++i) {
    const Tensor img = data::load_image(files[i]);
    const Tensor x = img.reshaped(Shape{1, img.dim(0), img.dim(1), img.dim(2)});
    for (int v = 0; v < a.count; ++v) {
      const Tensor y = degrade(x, a.tau, derive_seed(seed, i * static_cast<std::size_t>(a.count) + static_cast<std::size_t>(v)));
      const auto name = files[i].stem().string() + "_v" + std::to_string(v) + "_tau" + tau_str + ".png";
      data::save_png(fs::path(a.out) / name, y.reshaped(img.shape()));
    }
  }
  std::cout << "wrote " << files.size() * static_cast<std::size_t>(a.count) << " images to " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, corpus, out;
  double tau = 1.0;
  int samples = 2;
  std::int64_t tile = -1;
  std::optional<std::uint64_t> seed;
};

int run_eval(const EvalArgs& a) {
  auto state = open_checkpoint(a.checkpoint);
  if (!fs::is_directory(a.corpus)) throw UsageError("corpus directory " + a.corpus + " does not exist");
  const std::uint64_t seed = resolve_seed(a.seed);
  const data::Corpus corpus = data::Corpus::load(a.corpus);
  const std::int64_t tile = a.tile < 0 ? (state->config.levels == 0 ? 0 : state->config.patch_size) : a.tile;
  const int bits = state->config.dequant_bits;
  auto& model = *state->model;

  eval::Report r;
  r.tau = a.tau;
  const auto clean = eval::tile_images(corpus.clean(), tile);
  r.residuals = eval::residual_stats(eval::Degrader(model, state->norm), clean, a.tau, a.samples, derive_seed(seed, 0));
  r.nll = eval::heldout_nll(model, state->norm, clean, eval::tile_images(corpus.degraded(), tile), bits,
                            derive_seed(seed, 1));
  if (corpus.oracle()) r.truth = eval::truth_from_oracle(*corpus.oracle(), corpus.channels());
  if (corpus.has_hidden_pairing()) {
    r.paired = eval::paired_nll(model, state->norm, corpus, data::grant_evaluation_access(), bits, derive_seed(seed, 2), tile);
  }
  eval::emit_report(r, a.out);
  std::cout << "nll_x " << fmt(r.nll.x) << " nll_y " << fmt(r.nll.y);
  if (r.paired) std::cout << " nll_y_given_x " << fmt(*r.paired);
  std::cout << "\n";
  if (r.truth) {
    const auto e = eval::recovery_errors(r.residuals, *r.truth);
    std::cout << "mean_error_in_std " << fmt(e.mean_error) << " std_rel_error " << fmt(e.std_rel_error)
              << " cov_frobenius_rel_error " << fmt(e.cov_frobenius) << "\n";
  }
  if (eval::has_nan(r)) {
    std::cerr << "report contains NaN\n";
    return kRuntime;
  }
  return kOk;
}

// ---------------------------------------------------------------- synth-corpus

struct SynthArgs {
  std::string out, kind = "shifted_noise";
  double sigma = 0.04, corr_width = 1.0;
  std::size_t n_clean = 32, n_degraded = 32;
  std::int64_t size = 48, channels = 3;
  std::optional<std::uint64_t> seed;
};

int run_synth(const SynthArgs& a) {
  data::DegradationOracle o;
  try {
    o.kind = data::DegradationOracle::parse_kind(a.kind);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  if (o.kind == data::DegradationOracle::Kind::shifted_noise) {
    if (a.channels != 3) throw UsageError("shifted_noise is defined for 3 channels");
    o = data::default_shift_oracle();
  }
  o.sigma = a.sigma;
  o.corr_width = a.corr_width;
  const std::uint64_t seed = resolve_seed(a.seed);
  const auto c = data::synth_corpus(o, a.n_clean, a.n_degraded, seed, a.size, a.channels);
  c.save(a.out);
  std::cout << "wrote " << a.n_clean << " clean and " << a.n_degraded << " degraded images to " << a.out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DeFlow: learning stochastic image degradations from unpaired data"};
  app.require_subcommand(1);

  Gauss1dArgs g;
  auto* gauss = app.add_subcommand("gauss1d", "Fit the 1-D Gaussian shift model in closed form (and optionally by training)");
  gauss->add_option("--mu-x", g.mu_x, "Clean mean")->required();
  gauss->add_option("--var-x", g.var_x, "Clean variance")->required()->check(CLI::NonNegativeNumber);
  gauss->add_option("--mu-u", g.mu_u, "Shift mean")->required();
  gauss->add_option("--var-u", g.var_u, "Shift variance")->required()->check(CLI::NonNegativeNumber);
  gauss->add_option("--n", g.n, "Clean sample count")->required()->check(CLI::PositiveNumber);
  gauss->add_option("--m", g.m, "Degraded sample count (default: n)");
  gauss->add_option("--seed", g.seed, "Random seed");
  gauss->add_flag("--train", g.train, "Also train a single affine flow layer and print its estimate");
  gauss->add_option("--iterations", g.iterations, "Training iterations")->check(CLI::PositiveNumber);
  gauss->add_option("--lr", g.lr, "Training learning rate")->check(CLI::PositiveNumber);

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train a model on an unpaired corpus");
  tr->add_option("--config", t.config, "key=value config file");
  tr->add_option("--corpus", t.corpus, "Corpus directory (overrides corpus=)");
  tr->add_option("--out", t.out, "Output directory (overrides out_dir=)");
  tr->add_option("--set", t.sets, "Override a config key: --set key=value");
  tr->add_option("--seed", t.seed, "Random seed (overrides seed=)");

  SampleArgs s;
  auto* sa = app.add_subcommand("sample", "Write degraded variants of clean images");
  sa->add_option("--checkpoint", s.checkpoint, "Model checkpoint")->required();
  sa->add_option("--input", s.input, "Directory of clean images")->required();
  sa->add_option("--out", s.out, "Output directory")->required();
  sa->add_option("--tau", s.tau, "Sampling temperature")->check(CLI::NonNegativeNumber);
  sa->add_option("--count", s.count, "Variants per input");
  sa->add_option("--seed", s.seed, "Random seed");

  EvalArgs e;
  auto* ev = app.add_subcommand("eval", "Evaluate a model on a corpus and write CSV reports");
  ev->add_option("--checkpoint", e.checkpoint, "Model checkpoint")->required();
  ev->add_option("--corpus", e.corpus, "Evaluation corpus directory")->required();
  ev->add_option("--out", e.out, "Report directory")->required();
  ev->add_option("--tau", e.tau, "Sampling temperature")->check(CLI::NonNegativeNumber);
  ev->add_option("--samples", e.samples, "Degraded draws per image")->check(CLI::PositiveNumber);
  ev->add_option("--tile", e.tile, "Evaluation tile size (default: training patch size, 0 = whole images)");
  ev->add_option("--seed", e.seed, "Random seed");

  SynthArgs y;
  auto* sy = app.add_subcommand("synth-corpus", "Generate an oracle corpus with a known degradation");
  sy->add_option("--out", y.out, "Output directory")->required();
  sy->add_option("--kind", y.kind, "white_noise, correlated_noise or shifted_noise");
  sy->add_option("--sigma", y.sigma, "Noise std (white/correlated)")->check(CLI::PositiveNumber);
  sy->add_option("--corr-width", y.corr_width, "Blur std of correlated noise")->check(CLI::PositiveNumber);
  sy->add_option("--n-clean", y.n_clean, "Clean images")->check(CLI::PositiveNumber);
  sy->add_option("--n-degraded", y.n_degraded, "Degraded images")->check(CLI::PositiveNumber);
  sy->add_option("--size", y.size, "Image size")->check(CLI::PositiveNumber);
  sy->add_option("--channels", y.channels, "Channels (1 or 3)");
  sy->add_option("--seed", y.seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }

  try {
    if (*gauss) return run_gauss1d(g);
    if (*tr) return run_train(t);
    if (*sa) return run_sample(s);
    if (*ev) return run_eval(e);
    if (*sy) return run_synth(y);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const train::ConfigError& err) {
    std::cerr << "config error (key '" << err.key() << "'): " << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
