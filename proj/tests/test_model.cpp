#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>

#include "deflow/linalg.hpp"
#include "deflow/model.hpp"
#include "test_support.hpp"

using namespace deflow;
using deflow::testing::random_tensor;

namespace {
const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

ModelConfig small_config(std::int64_t channels = 3, int levels = 2) {
  ModelConfig c;
  c.channels = channels;
  c.levels = levels;
  c.steps = 2;
  c.hidden = 6;
  c.cond_features = 4;
  c.cond_hidden = 5;
  c.condition.down_factor = 2;
  c.condition.noise_sigma = 0.03;
  c.seed = 17;
  return c;
}

void randomize_flow(DeFlowModel& m, Rng& rng, double sd = 0.2) {
  m.visit([&](Parameter& p) {
    if (!p.trainable || p.name.rfind("shift", 0) == 0) return;
    for (auto& v : p.value.raw()) v += sd * rng.normal();
  });
}

void make_identity(DeFlowModel& m) {
  for (int l = 0; l < m.config().levels; ++l)
    for (auto& s : m.steps(l)) {
      s.actnorm().set_initialized(true);
      s.invconv().set_identity();
    }
  m.shift().set_zero();
}

ModelConfig affine_config() {
  ModelConfig c;
  c.channels = 1;
  c.levels = 0;
  return c;
}

Tensor column(std::vector<double> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor(Shape{n, 1, 1, 1}, std::move(v));
}

double max_group_diff(const std::vector<Tensor>& a, const std::vector<Var>& b) {
  double worst = 0;
  for (std::size_t g = 0; g < a.size(); ++g) worst = std::max(worst, max_abs_diff(a[g], b[g].value()));
  return worst;
}
}  // namespace

TEST_CASE("latent layout covers the input exactly") {
  DeFlowModel m(small_config());
  const auto shapes = m.group_shapes(2, 16, 16);
  REQUIRE(shapes.size() == 2);
  CHECK(shapes[0] == Shape{2, 6, 8, 8});
  CHECK(shapes[1] == Shape{2, 24, 4, 4});
  CHECK(shape_numel(shapes[0]) + shape_numel(shapes[1]) == 2u * 3 * 16 * 16);
  CHECK(m.shift().groups() == 2);
  Rng rng(1);
  const Tensor x = random_tensor(Shape{2, 3, 16, 16}, rng);
  Tape tape(Tape::Mode::inference);
  const auto enc = m.encode(tape, x, m.condition(x, 1));
  for (std::size_t g = 0; g < shapes.size(); ++g) CHECK(enc.z[g].shape() == shapes[g]);
  CHECK_THROWS_AS(m.encode(tape, Tensor(Shape{1, 3, 6, 6}), Tensor(Shape{1, 3, 3, 3})), ShapeError);
}

TEST_CASE("identity parameters rearrange the input") {
  DeFlowModel m(small_config());
  make_identity(m);
  Rng rng(2);
  const Tensor x = random_tensor(Shape{2, 3, 8, 8}, rng);
  Tape tape(Tape::Mode::inference);
  const auto enc = m.encode(tape, x, m.condition(x, 3));
  CHECK(enc.logdet.value().max_abs() == 0.0);
  Var s1 = ops::squeeze2x2(tape.constant(x));
  Var kept = ops::slice(s1, 1, 0, 6), dropped = ops::slice(s1, 1, 6, 12);
  CHECK(max_group_diff({dropped.value(), ops::squeeze2x2(kept).value()}, enc.z) == 0.0);
}

TEST_CASE("identical samples get identical log-determinants") {
  DeFlowModel m(small_config());
  Rng rng(3);
  Tensor x = random_tensor(Shape{2, 3, 8, 8}, rng);
  for (std::size_t i = 0; i < 192; ++i) x[192 + i] = x[i];
  Tensor h = m.condition(x, 4);
  for (std::size_t i = 0; i < h.numel() / 2; ++i) h[h.numel() / 2 + i] = h[i];
  m.initialize(x, h);
  randomize_flow(m, rng);
  Tape tape(Tape::Mode::inference);
  const auto ld = m.encode(tape, x, h).logdet.value();
  CHECK(ld[0] == ld[1]);
}

TEST_CASE("model logdet matches the dense jacobian") {
  for (int levels : {1, 2}) {
    DeFlowModel m(small_config(3, levels));
    Rng rng(4);
    const Tensor x = random_tensor(Shape{1, 3, 4, 4}, rng);
    const Tensor h = m.condition(x, 5);
    m.initialize(random_tensor(Shape{4, 3, 4, 4}, rng), m.condition(random_tensor(Shape{4, 3, 4, 4}, rng), 6));
    randomize_flow(m, rng, 0.1);
    auto flat = [&](const Tensor& in) {
      Tape tape(Tape::Mode::inference);
      const auto enc = m.encode(tape, in, h);
      std::vector<double> out;
      for (const auto& g : enc.z) out.insert(out.end(), g.value().raw().begin(), g.value().raw().end());
      return std::make_pair(out, enc.logdet.value()[0]);
    };
    const std::int64_t d = 48;
    Tensor jac(Shape{d, d});
    Tensor probe = x;
    const double step = 1e-6;
    for (std::int64_t j = 0; j < d; ++j) {
      const double orig = probe[static_cast<std::size_t>(j)];
      probe[static_cast<std::size_t>(j)] = orig + step;
      const auto fp = flat(probe).first;
      probe[static_cast<std::size_t>(j)] = orig - step;
      const auto fm = flat(probe).first;
      probe[static_cast<std::size_t>(j)] = orig;
      REQUIRE(static_cast<std::int64_t>(fp.size()) == d);
      for (std::int64_t i = 0; i < d; ++i) jac.at(i, j) = (fp[static_cast<std::size_t>(i)] - fm[static_cast<std::size_t>(i)]) / (2 * step);
    }
    const double numeric = std::log(std::abs(linalg::determinant(jac)));
    CHECK(std::abs(flat(x).second - numeric) <= 1e-5);
  }
}

TEST_CASE("round trip after initialisation") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    ModelConfig c = small_config();
    c.seed = static_cast<std::uint64_t>(trial);
    DeFlowModel m(c);
    const Tensor x = random_tensor(Shape{3, 3, 16, 16}, rng);
    const Tensor h = m.condition(x, static_cast<std::uint64_t>(trial));
    m.initialize(x, h);
    randomize_flow(m, rng, 0.05);
    Tape tape(Tape::Mode::inference);
    const auto enc = m.encode(tape, x, h);
    std::vector<Tensor> z;
    for (const auto& g : enc.z) z.push_back(g.value());
    CHECK(max_abs_diff(m.decode(z, h), x) <= 1e-8);
  }
}

TEST_CASE("marginal objective in one dimension") {
  DeFlowModel m(affine_config());
  m.affine()->set_initialized(true);
  m.shift().set_zero();
  Tape tape;
  const auto parts = m.marginal_nll(tape, column({0.0}), Tensor(), column({0.0}), Tensor());
  CHECK(parts.loss.value()[0] == doctest::Approx(1.83788).epsilon(1e-5));
  CHECK(parts.loss.value()[0] == doctest::Approx(2.0 * kHalfLog2Pi).epsilon(1e-14));
  CHECK_THROWS_AS(m.marginal_nll(tape, Tensor(Shape{0, 1, 1, 1}), Tensor(), column({0.0}), Tensor()),
                  std::invalid_argument);
}

TEST_CASE("zero shift treats both domains identically") {
  DeFlowModel m(small_config());
  m.shift().set_zero();
  Rng rng(6);
  const Tensor x = random_tensor(Shape{2, 3, 8, 8}, rng);
  const Tensor h = m.condition(x, 1);
  Tape tape(Tape::Mode::inference);
  const auto parts = m.marginal_nll(tape, x, h, x, h);
  CHECK(std::abs(parts.nll_x - parts.nll_y) <= 1e-12);

  const auto enc = m.encode(tape, x, h);
  CHECK(max_abs_diff(logp_zx(enc.z).value(), logp_zy(enc.z, m.shift()).value()) <= 1e-12);
}

TEST_CASE("change of variables is assembled from encode and the latent density") {
  DeFlowModel m(small_config());
  Rng rng(7);
  const Tensor x = random_tensor(Shape{2, 3, 8, 8}, rng), y = random_tensor(Shape{2, 3, 8, 8}, rng);
  const Tensor hx = m.condition(x, 1), hy = m.condition(y, 2);
  m.initialize(x, hx);
  randomize_flow(m, rng, 0.1);
  Tape tape(Tape::Mode::inference);
  const auto parts = m.marginal_nll(tape, x, hx, y, hy);
  const auto ex = m.encode(tape, x, hx);
  double manual = 0.0;
  for (std::int64_t n = 0; n < 2; ++n) {
    double lp = ex.logdet.value()[static_cast<std::size_t>(n)];
    for (const auto& g : ex.z) {
      const std::size_t per = g.numel() / 2;
      for (std::size_t i = 0; i < per; ++i) {
        const double z = g.value()[static_cast<std::size_t>(n) * per + i];
        lp += -kHalfLog2Pi - 0.5 * z * z;
      }
    }
    manual -= lp / 2.0;
  }
  CHECK(std::abs(parts.nll_x - manual) <= 1e-12 * std::abs(manual));
}

TEST_CASE("paired conditional objective") {
  DeFlowModel m(affine_config());
  m.affine()->set_initialized(true);
  m.shift().set_zero();
  m.shift().m(0).value[0] = 1.0;
  Tape tape(Tape::Mode::inference);
  CHECK(m.paired_cond_nll(tape, column({0.3}), column({0.3}), Tensor()).value()[0] ==
        doctest::Approx(kHalfLog2Pi).epsilon(1e-14));

  m.shift().mu(0).value[0] = 0.4;
  double previous = m.paired_cond_nll(tape, column({0.3}), column({3.0}), Tensor()).value()[0];
  for (double y = 2.8; y >= 0.7 - 1e-12; y -= 0.1) {
    const double v = m.paired_cond_nll(tape, column({0.3}), column({y}), Tensor()).value()[0];
    CHECK(v <= previous + 1e-15);
    previous = v;
  }

  m.shift().m(0).value[0] = 0.0;
  CHECK_THROWS_AS(m.paired_cond_nll(tape, column({0.3}), column({0.3}), Tensor()), std::domain_error);
}

TEST_CASE("paired objective matches its composition") {
  DeFlowModel m(small_config());
  Rng rng(8);
  const Tensor x = random_tensor(Shape{2, 3, 8, 8}, rng), y = random_tensor(Shape{2, 3, 8, 8}, rng);
  const Tensor h = m.condition(x, 1);
  m.initialize(x, h);
  randomize_flow(m, rng, 0.1);
  for (std::size_t g = 0; g < m.shift().groups(); ++g) {
    for (auto& v : m.shift().m(g).value.raw()) v = 0.3 * rng.normal();
    for (auto& v : m.shift().mu(g).value.raw()) v = 0.3 * rng.normal();
  }
  Tape tape(Tape::Mode::inference);
  const double loss = m.paired_cond_nll(tape, x, y, h).value()[0];
  const auto ex = m.encode(tape, x, h), ey = m.encode(tape, y, h);
  const Tensor per = logp_cond_latent(ey.z, ex.z, m.shift()).value();
  const double manual = -0.5 * (per[0] + ey.logdet.value()[0] + per[1] + ey.logdet.value()[1]);
  CHECK(std::abs(loss - manual) <= 1e-12 * std::abs(manual));
}

TEST_CASE("degradation is the identity without a shift") {
  DeFlowModel m(small_config());
  Rng rng(9);
  const Tensor x = random_tensor(Shape{2, 3, 8, 8}, rng);
  m.initialize(x, m.condition(x, 1));
  randomize_flow(m, rng, 0.1);
  m.shift().set_zero();
  CHECK(max_abs_diff(m.degrade(x, 1.0, 3), x) <= 1e-8);
  for (std::size_t g = 0; g < m.shift().groups(); ++g) m.shift().m(g).value.fill(0.2);
  CHECK(max_abs_diff(m.degrade(x, 0.0, 3), x) <= 1e-8);
}

TEST_CASE("degradation pushes the latent shift through an affine flow") {
  DeFlowModel m(affine_config());
  m.affine()->set_initialized(true);
  const double sigma_x = 2.0, mu_x = 1.0, mu_u = 0.5, var_u = 0.49;
  m.affine()->log_scale().value[0] = -std::log(sigma_x);
  m.affine()->bias().value[0] = -mu_x / sigma_x;
  m.shift().mu(0).value[0] = mu_u;
  m.shift().m(0).value[0] = std::sqrt(var_u);
  Rng rng(10);
  const Tensor x = random_tensor(Shape{100000, 1, 1, 1}, rng);
  const Tensor y = m.degrade(x, 1.0, 11);
  double s = 0, q = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += y[i] - x[i];
  const double mean = s / 1e5;
  for (std::size_t i = 0; i < x.numel(); ++i) q += (y[i] - x[i] - mean) * (y[i] - x[i] - mean);
  CHECK(std::abs(mean - mu_u * sigma_x) <= 0.02 * mu_u * sigma_x);
  CHECK(std::abs(q / 1e5 - var_u * sigma_x * sigma_x) <= 0.02 * var_u * sigma_x * sigma_x);
}

TEST_CASE("sampling stochasticity and temperature ladder") {
  DeFlowModel m(small_config());
  Rng rng(12);
  const Tensor x = random_tensor(Shape{4, 3, 16, 16}, rng, 0.3);
  m.initialize(x, m.condition(x, 1));
  randomize_flow(m, rng, 0.05);
  for (std::size_t g = 0; g < m.shift().groups(); ++g) {
    const auto c = m.shift().channels(g);
    for (std::int64_t i = 0; i < c; ++i) m.shift().m(g).value.at(i, i) = 0.3;
  }
  auto residual_moments = [&](const Tensor& y) {
    double s = 0, q = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) s += y[i] - x[i];
    const double n = static_cast<double>(x.numel()), mean = s / n;
    for (std::size_t i = 0; i < x.numel(); ++i) q += (y[i] - x[i] - mean) * (y[i] - x[i] - mean);
    return std::make_pair(mean, q / n);
  };
  const Tensor a = m.degrade(x, 1.0, 100), b = m.degrade(x, 1.0, 200);
  CHECK(max_abs_diff(a, b) > 0.0);
  const auto ma = residual_moments(a), mb = residual_moments(b);
  CHECK(std::abs(std::sqrt(ma.second) - std::sqrt(mb.second)) <= 0.1 * std::sqrt(ma.second));

  double previous = 0.0;
  for (double tau : {0.33, 0.66, 1.0, 1.33, 1.66}) {
    const double var = residual_moments(m.degrade(x, tau, 300)).second;
    CHECK(var >= previous);
    previous = var;
  }
}

TEST_CASE("marginal objective gradients for every parameter group") {
  ModelConfig c = small_config(1, 2);
  DeFlowModel m(c);
  Rng rng(13);
  const Tensor x = random_tensor(Shape{2, 1, 4, 4}, rng), y = random_tensor(Shape{2, 1, 4, 4}, rng);
  const Tensor hx = m.condition(x, 1), hy = m.condition(y, 2);
  m.initialize(x, hx);
  randomize_flow(m, rng, 0.2);
  for (std::size_t g = 0; g < m.shift().groups(); ++g) {
    for (auto& v : m.shift().m(g).value.raw()) v = 0.3 * rng.normal();
    for (auto& v : m.shift().mu(g).value.raw()) v = 0.3 * rng.normal();
  }
  std::vector<Parameter*> params;
  m.visit([&](Parameter& p) {
    if (p.trainable) params.push_back(&p);
  });
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(m.marginal_nll(tape, x, hx, y, hy).loss);
  }
  int checked = 0;
  bool saw_flow = false, saw_shift = false, saw_encoder = false;
  for (Parameter* p : params) {
    const Tensor saved = p->value;
    const Tensor numeric = deflow::testing::numeric_gradient(
        [&](const Tensor& v) {
          p->value = v;
          Tape t(Tape::Mode::inference);
          const double r = m.marginal_nll(t, x, hx, y, hy).loss.value()[0];
          p->value = saved;
          return r;
        },
        saved);
    const double err = deflow::testing::relative_error(p->grad, numeric);
    INFO(p->name);
    CHECK(err <= 1e-4);
    ++checked;
    saw_flow = saw_flow || p->name.rfind("level", 0) == 0;
    saw_shift = saw_shift || p->name.rfind("shift", 0) == 0;
    saw_encoder = saw_encoder || p->name.rfind("cond", 0) == 0;
  }
  CHECK(checked > 20);
  CHECK(saw_flow);
  CHECK(saw_shift);
  CHECK(saw_encoder);
}
