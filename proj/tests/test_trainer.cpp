#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "deflow/gauss1d.hpp"
#include "deflow/rng.hpp"
#include "deflow/trainer.hpp"

using namespace deflow;
using namespace deflow::train;
namespace fs = std::filesystem;

namespace {
fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("deflow_test_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.iterations = 6;
  c.base_lr = 1e-3;
  c.batch_size = 2;
  c.patch_size = 8;
  c.steps = 1;
  c.levels = 2;
  c.hidden = 4;
  c.cond_features = 2;
  c.cond_hidden = 4;
  c.condition.down_factor = 2;
  c.seed = 42;
  c.log_every = 1;
  return c;
}

const data::Corpus& tiny_corpus() {
  static const data::Corpus c = data::synth_corpus(data::default_shift_oracle(), 3, 3, 17, 16);
  return c;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::vector<char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& p, const std::vector<char>& b) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
}

// Batch source that injects a NaN into the y batch from a given index on.
class PoisonedBatches : public BatchSource {
 public:
  PoisonedBatches(const BatchSource& inner, std::uint64_t from) : inner_(inner), from_(from) {}
  Batch batch(std::uint64_t i) const override {
    Batch b = inner_.batch(i);
    if (i >= from_) b.y[0] = std::numeric_limits<double>::quiet_NaN();
    return b;
  }
  std::int64_t channels() const override { return inner_.channels(); }

 private:
  const BatchSource& inner_;
  std::uint64_t from_;
};
}  // namespace

TEST_CASE("config text round trip") {
  TrainConfig c = tiny_config();
  c.shift_mode = ShiftMode::diagonal;
  c.base_lr = 3.3e-5;
  c.lr_milestones = {0.25, 0.6};
  c.condition.noise_sigma = 0.07;
  const TrainConfig back = parse_config_text(format_config(c));
  CHECK(config_entries(back) == config_entries(c));
  CHECK(format_config(back) == format_config(c));
  // Order independence and comments.
  const TrainConfig a = parse_config_text("K=3\n# note\nL = 1 # trailing\n");
  const TrainConfig b = parse_config_text("L=1\nK=3\n");
  CHECK(format_config(a) == format_config(b));
  CHECK(a.steps == 3);
  CHECK(a.levels == 1);
  // Every key is accepted by the setter and maps to one field.
  for (const auto& [k, v] : config_entries(c)) CHECK(is_config_key(k));
  CHECK(config_keys().size() == config_entries(c).size());
}

TEST_CASE("config rejections name the key") {
  try {
    parse_config_text("iterations=5\nbogus_key=1\n");
    FAIL("accepted unknown key");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "bogus_key");
  }
  CHECK_THROWS_AS(parse_config_text("K=1\nK=2\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("K=two\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("no equals sign\n"), ConfigError);
  std::map<std::string, std::string> extra;
  parse_config_text("corpus=/tmp/x\nK=2\n", {"corpus"}, &extra);
  CHECK(extra.at("corpus") == "/tmp/x");

  TrainConfig c = tiny_config();
  c.lr_milestones = {0.5, 0.5};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.lr_milestones = {0.0, 0.5};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.patch_size = 10;  // not divisible by 4
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.iterations = 100000;
  c.base_lr = 5e-5;
  CHECK(lr_at(c, 0) == 5e-5);
  CHECK(lr_at(c, 49999) == 5e-5);
  CHECK(lr_at(c, 50000) == 2.5e-5);
  CHECK(lr_at(c, 75000) == 1.25e-5);
  CHECK(lr_at(c, 96000) == doctest::Approx(5e-5 / 16));
  double prev = lr_at(c, 0);
  for (std::int64_t i = 0; i < c.iterations; i += 997) {
    const double lr = lr_at(c, i);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("adam zero gradient leaves parameters and decays moments") {
  Parameter p("w", Tensor::vector({1.0, -2.0}));
  AdamState st;
  p.grad = Tensor::vector({0.5, 0.25});
  adam_step({&p}, st, 0.1);
  const Tensor after_first = p.value;
  const Tensor m1 = st.moments["w"].m, v1 = st.moments["w"].v;
  p.grad.fill(0.0);
  adam_step({&p}, st, 0.1);
  // Zero gradient with nonzero momentum still moves; a fresh state does not.
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(st.moments["w"].m[i] == doctest::Approx(0.9 * m1[i]));
    CHECK(st.moments["w"].v[i] == doctest::Approx(0.999 * v1[i]));
  }
  Parameter q("q", Tensor::vector({3.0, 4.0}));
  AdamState fresh;
  q.grad.fill(0.0);
  adam_step({&q}, fresh, 0.1);
  CHECK(q.value == Tensor::vector({3.0, 4.0}));
  CHECK(after_first != Tensor::vector({1.0, -2.0}));
}

TEST_CASE("adam first step moves by lr") {
  Parameter p("w", Tensor::vector({0.0, 0.0, 0.0}));
  p.grad = Tensor::vector({2.0, -0.5, 1e-3});
  AdamState st;
  adam_step({&p}, st, 0.01);
  // Bias-corrected first step: -lr * g / (|g| + eps).
  for (std::size_t i = 0; i < 3; ++i) {
    const double g = p.grad[i];
    CHECK(p.value[i] == doctest::Approx(-0.01 * g / (std::abs(g) + 1e-8)).epsilon(1e-12));
  }
}

TEST_CASE("adam matches a scalar reference over many steps") {
  Rng rng(5);
  Parameter p("w", Tensor(Shape{4}, 0.0));
  for (auto& v : p.value.raw()) v = rng.normal();
  std::vector<double> ref(p.value.raw().begin(), p.value.raw().end()), m(4, 0.0), v(4, 0.0);
  AdamState st;
  st.beta1 = 0.8;
  st.beta2 = 0.99;
  st.eps = 1e-6;
  for (int t = 1; t <= 25; ++t) {
    for (auto& g : p.grad.raw()) g = rng.normal();
    const double lr = 0.05 / t;
    for (std::size_t i = 0; i < 4; ++i) {
      const double g = p.grad[i];
      m[i] = 0.8 * m[i] + 0.2 * g;
      v[i] = 0.99 * v[i] + 0.01 * g * g;
      const double mh = m[i] / (1 - std::pow(0.8, t)), vh = v[i] / (1 - std::pow(0.99, t));
      ref[i] -= lr * mh / (std::sqrt(vh) + 1e-6);
    }
    adam_step({&p}, st, lr);
  }
  for (std::size_t i = 0; i < 4; ++i) CHECK(p.value[i] == doctest::Approx(ref[i]).epsilon(1e-13));
}

TEST_CASE("adam aborts on a non-finite gradient") {
  Parameter a("a", Tensor::vector({1.0})), b("layer.b", Tensor::vector({2.0, 3.0}));
  a.grad = Tensor::vector({0.1});
  b.grad = Tensor::vector({0.1, std::nan("")});
  AdamState st;
  try {
    adam_step({&a, &b}, st, 0.1);
    FAIL("no exception");
  } catch (const NonFiniteGradient& e) {
    CHECK(e.param() == "layer.b");
    CHECK(std::string(e.what()).find("layer.b") != std::string::npos);
  }
  CHECK(a.value == Tensor::vector({1.0}));
  CHECK(st.step == 0);
  CHECK(st.moments.empty());
}

TEST_CASE("corpus batches are deterministic and dequantized") {
  TrainConfig c = tiny_config();
  const CorpusBatches src(tiny_corpus(), c);
  const Batch a = src.batch(3), b = src.batch(3), d = src.batch(4);
  CHECK(a.x == b.x);
  CHECK(a.y == b.y);
  CHECK(a.x != d.x);
  CHECK(a.x.shape() == Shape{2, 3, 8, 8});
  for (double v : a.x.raw()) CHECK((v >= 0.0 && v < 1.0));
  // 5-bit buckets: every value sits in [k/32, (k+1)/32) for the pixel's bucket.
  c.dequant_bits = 0;
  const Batch raw = CorpusBatches(tiny_corpus(), c).batch(3);
  for (std::size_t i = 0; i < raw.x.numel(); ++i) {
    const double bucket = std::floor(std::lround(raw.x[i] * 255.0) / 8.0);
    CHECK(a.x[i] >= bucket / 32.0);
    CHECK(a.x[i] < (bucket + 1.0) / 32.0);
  }
}

TEST_CASE("training is deterministic and logs the header") {
  const TrainConfig c = tiny_config();
  auto run = [&](std::string& log) {
    TrainState st(c, 3);
    CorpusBatches src(tiny_corpus(), c);
    std::ostringstream out;
    TrainHooks hooks;
    hooks.log = &out;
    const TrainReport r = train::train(st, src, hooks);
    CHECK_FALSE(r.halted);
    log = out.str();
    return serialize_checkpoint(st);
  };
  std::string la, lb;
  const auto a = run(la), b = run(lb);
  CHECK(a == b);
  CHECK(la == lb);
  CHECK(la.rfind(std::string(kLogHeader) + "\n", 0) == 0);
  std::istringstream lines(la);
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) ++n;
  CHECK(n == 1 + 6);
}

TEST_CASE("zero iterations leaves the initialization") {
  TrainConfig c = tiny_config();
  c.iterations = 0;
  TrainState fresh(c, 3), trained(c, 3);
  CorpusBatches src(tiny_corpus(), c);
  const TrainReport r = train::train(trained, src);
  CHECK(r.rows.empty());
  CHECK(serialize_checkpoint(trained) == serialize_checkpoint(fresh));
}

TEST_CASE("actnorm is initialized from the first batch before the first step") {
  TrainConfig c = tiny_config();
  c.iterations = 1;
  TrainState st(c, 3);
  CHECK_FALSE(st.model->initialized());
  CorpusBatches src(tiny_corpus(), c);
  train::train(st, src);
  CHECK(st.model->initialized());
}

TEST_CASE("training NLL drops over 200 iterations on an oracle corpus") {
  TrainConfig c = tiny_config();
  c.iterations = 201;
  c.lr_milestones.clear();
  c.batch_size = 4;
  c.patch_size = 16;
  c.condition.down_factor = 4;
  TrainState st(c, 3);
  CorpusBatches src(tiny_corpus(), c);
  const TrainReport r = train::train(st, src);
  REQUIRE(r.rows.size() == 201);
  CHECK(r.rows[200].nll_total < r.rows[0].nll_total);
}

TEST_CASE("clipping is recorded in the log") {
  TrainConfig c = tiny_config();
  c.clip_norm = 1e-3;
  c.log_every = 1000;
  TrainState st(c, 3);
  CorpusBatches src(tiny_corpus(), c);
  std::ostringstream out;
  TrainHooks hooks;
  hooks.log = &out;
  const TrainReport r = train::train(st, src, hooks);
  CHECK(r.clipped == 6);
  std::istringstream lines(out.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) ++n;
  CHECK(n == 1 + 6);  // clipped iterations are always logged
  for (const auto& row : r.rows) CHECK(row.grad_norm > c.clip_norm);
}

TEST_CASE("non-finite loss halts and keeps the last good checkpoint") {
  const auto dir = scratch("halt");
  TrainConfig c = tiny_config();
  CorpusBatches inner(tiny_corpus(), c);
  PoisonedBatches src(inner, 3);
  TrainState st(c, 3);
  TrainHooks hooks;
  hooks.checkpoint = dir / "model.ckpt";
  const TrainReport r = train::train(st, src, hooks);
  CHECK(r.halted);
  CHECK(r.message.find("iteration 3") != std::string::npos);
  CHECK(r.rows.size() == 3);
  auto back = load_checkpoint(dir / "model.ckpt");
  CHECK(back->iteration == 3);
  back->model->visit([](Parameter& p) { CHECK(p.value.all_finite()); });
  CHECK(serialize_checkpoint(*back) == serialize_checkpoint(st));
}

TEST_CASE("checkpoint round trip is lossless and byte-stable") {
  const auto dir = scratch("ckpt");
  TrainConfig c = tiny_config();
  c.channel_norm = true;
  TrainState st(c, 3);
  CorpusBatches src(tiny_corpus(), c);
  st.norm = src.norm();
  train::train(st, src);
  save_checkpoint(dir / "a.ckpt", st);
  auto back = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(dir / "b.ckpt", *back);
  CHECK(read_bytes(dir / "a.ckpt") == read_bytes(dir / "b.ckpt"));
  std::map<std::string, Tensor> orig;
  st.model->visit([&](Parameter& p) { orig[p.name] = p.value; });
  back->model->visit([&](Parameter& p) { CHECK(orig.at(p.name) == p.value); });
  CHECK(back->iteration == st.iteration);
  CHECK(back->adam.step == st.adam.step);
  CHECK(back->norm.y_std == st.norm.y_std);
  for (const auto& [name, m] : st.adam.moments) {
    CHECK(back->adam.moments.at(name).m == m.m);
    CHECK(back->adam.moments.at(name).v == m.v);
  }
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto dir = scratch("corrupt");
  TrainConfig c = tiny_config();
  TrainState st(c, 3);
  save_checkpoint(dir / "a.ckpt", st);
  const auto bytes = read_bytes(dir / "a.ckpt");

  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  write_bytes(dir / "t.ckpt", truncated);
  CHECK_THROWS_AS(load_checkpoint(dir / "t.ckpt"), std::runtime_error);

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  write_bytes(dir / "f.ckpt", flipped);
  CHECK_THROWS_WITH(load_checkpoint(dir / "f.ckpt"), doctest::Contains("checksum"));

  auto versioned = bytes;
  versioned[8] = 7;
  write_bytes(dir / "v.ckpt", versioned);
  CHECK_THROWS_WITH(load_checkpoint(dir / "v.ckpt"), doctest::Contains("version"));

  write_bytes(dir / "junk.ckpt", std::vector<char>{'h', 'e', 'l', 'l', 'o'});
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), std::runtime_error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
}

TEST_CASE("loading into a different architecture prints both configs") {
  const auto dir = scratch("arch");
  TrainConfig c = tiny_config();
  TrainState st(c, 3);
  save_checkpoint(dir / "a.ckpt", st);
  TrainConfig other = c;
  other.steps = 2;
  TrainState target(other, 3);
  try {
    load_checkpoint_into(dir / "a.ckpt", target);
    FAIL("mismatch accepted");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("K=1") != std::string::npos);
    CHECK(msg.find("K=2") != std::string::npos);
  }
  TrainState same(c, 3);
  CHECK_NOTHROW(load_checkpoint_into(dir / "a.ckpt", same));
}

TEST_CASE("resuming from a checkpoint continues the same trajectory") {
  const auto dir = scratch("resume");
  TrainConfig c = tiny_config();
  c.lr_milestones.clear();
  CorpusBatches src(tiny_corpus(), c);
  TrainState straight(c, 3);
  train::train(straight, src);

  TrainConfig half = c;
  half.iterations = 3;
  TrainState first(half, 3);
  TrainHooks hooks;
  hooks.checkpoint = dir / "h.ckpt";
  train::train(first, src, hooks);
  auto resumed = load_checkpoint(dir / "h.ckpt");
  resumed->config.iterations = c.iterations;
  train::train(*resumed, src);
  std::map<std::string, Tensor> want;
  straight.model->visit([&](Parameter& p) { want[p.name] = p.value; });
  resumed->model->visit([&](Parameter& p) { CHECK(want.at(p.name) == p.value); });
}

TEST_CASE("frozen shift stays zero; post-hoc estimation fills it") {
  TrainConfig c = tiny_config();
  c.shift_mode = ShiftMode::frozen;
  TrainState st(c, 3);
  CorpusBatches src(tiny_corpus(), c);
  train::train(st, src);
  for (std::size_t g = 0; g < st.model->shift().groups(); ++g) {
    CHECK(st.model->shift().mu(g).value.max_abs() == 0.0);
    CHECK(st.model->shift().m(g).value.max_abs() == 0.0);
  }
  c.posthoc_shift = true;
  c.posthoc_batches = 2;
  TrainState post(c, 3);
  train::train(post, src);
  CHECK(post.model->shift().m(0).value.max_abs() > 0.0);
  CHECK_FALSE(post.model->shift().m(0).trainable);
}

TEST_CASE("affine flow on 1-D Gaussian data recovers the closed-form shift") {
  gauss1d::Gauss1DSolution truth{0.5, 1.0, 0.3, 0.64, gauss1d::ShiftCase::NoisierTarget};
  const auto sets = gauss1d::sample_pairs_1d(truth, 5000, 5000, 3);
  const auto want = gauss1d::to_standard_base(gauss1d::fit_closed_form(sets));
  TrainConfig c;
  c.levels = 0;
  c.iterations = 1500;
  c.base_lr = 2e-2;
  c.patch_size = 1;
  c.batch_size = 5000;
  c.dequant_bits = 0;
  c.seed = 1;
  TrainState st(c, 1);
  const auto src = FixedBatches::from_samples(sets);
  const TrainReport r = train::train(st, src);
  REQUIRE_FALSE(r.halted);
  const double mu = st.model->shift().mu(0).value[0];
  const double m = st.model->shift().m(0).value[0];
  CHECK(std::abs(mu - want.mu_u) <= 0.05 * std::abs(want.mu_u));
  CHECK(std::abs(m * m - want.var_u) <= 0.05 * want.var_u);
}
