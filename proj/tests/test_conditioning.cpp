#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "deflow/conditioning.hpp"
#include "test_support.hpp"

using namespace deflow;
using deflow::testing::random_tensor;

TEST_CASE("constant images stay constant") {
  for (int f : {2, 4, 8}) {
    const Tensor img(Shape{2, 3, 16, 16}, 0.37);
    const Tensor d = bicubic_downsample(img, f);
    CHECK(d.shape() == Shape{2, 3, 16 / f, 16 / f});
    for (double v : d.raw()) CHECK(v == doctest::Approx(0.37).epsilon(1e-14));
  }
}

TEST_CASE("factor one is the identity") {
  Rng rng(1);
  const Tensor img = random_tensor(Shape{1, 3, 5, 7}, rng);
  CHECK(bicubic_downsample(img, 1) == img);
}

TEST_CASE("interior of a linear ramp is reproduced") {
  for (int f : {2, 3, 4}) {
    const std::int64_t size = 12 * f;
    Tensor img(Shape{1, 1, size, size});
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x) img.at(0, 0, y, x) = 0.1 + 0.02 * x - 0.013 * y;
    const Tensor d = bicubic_downsample(img, f);
    for (std::int64_t i = 0; i < 12; ++i)
      for (std::int64_t j = 0; j < 12; ++j) {
        const double cy = (i + 0.5) * f - 0.5, cx = (j + 0.5) * f - 0.5;
        const bool interior = cy - 2.0 * f >= 0 && cy + 2.0 * f <= size - 1 && cx - 2.0 * f >= 0 && cx + 2.0 * f <= size - 1;
        if (!interior) continue;
        CHECK(std::abs(d.at(0, 0, i, j) - (0.1 + 0.02 * cx - 0.013 * cy)) <= 1e-6);
      }
  }
}

TEST_CASE("downsampling suppresses white noise") {
  Rng rng(2);
  const Tensor img = random_tensor(Shape{4, 1, 64, 64}, rng, 1.0);
  const Tensor d = bicubic_downsample(img, 4);
  double q = 0;
  for (double v : d.raw()) q += v * v;
  CHECK(std::sqrt(q / static_cast<double>(d.numel())) < 0.35);
}

TEST_CASE("non dividing factor is rejected") {
  CHECK_THROWS_AS(bicubic_downsample(Tensor(Shape{1, 1, 6, 8}), 4), std::invalid_argument);
}

TEST_CASE("condition construction") {
  Rng rng(3);
  const Tensor img = random_tensor(Shape{2, 3, 16, 16}, rng);
  ConditionSpec off{4, 0.03, true};
  const Tensor z = make_condition(img, off, 1);
  CHECK(z.shape() == Shape{2, 3, 4, 4});
  CHECK(z.max_abs() == 0.0);

  ConditionSpec clean{4, 0.0, false};
  CHECK(make_condition(img, clean, 1) == bicubic_downsample(img, 4));

  ConditionSpec noisy{4, 0.03, false};
  CHECK(make_condition(img, noisy, 7) == make_condition(img, noisy, 7));
  CHECK(make_condition(img, noisy, 7) != make_condition(img, noisy, 8));
}

TEST_CASE("condition noise has the requested spread") {
  Tensor img(Shape{4, 1, 1000, 1000}, 0.5);
  ConditionSpec spec{2, 0.03, false};
  const Tensor h = make_condition(img, spec, 99);
  const Tensor base = bicubic_downsample(img, 2);
  double s = 0, q = 0;
  for (std::size_t i = 0; i < h.numel(); ++i) {
    const double d = h[i] - base[i];
    s += d;
    q += d * d;
  }
  const double n = static_cast<double>(h.numel());
  CHECK(n >= 1e6);
  const double sd = std::sqrt(q / n - (s / n) * (s / n));
  CHECK(std::abs(sd - 0.03) <= 0.01 * 0.03);
}

TEST_CASE("encoder shapes, zero behaviour and disabled mode") {
  Rng rng(4);
  ConditionEncoder enc(3, 8, 5, rng);
  Tape tape(Tape::Mode::inference);
  const std::vector<std::pair<std::int64_t, std::int64_t>> sizes = {{8, 8}, {4, 4}, {2, 2}};
  auto zero = enc.encode(tape, Tensor(Shape{2, 3, 4, 4}, 0.0), sizes, false);
  REQUIRE(zero.size() == 3);
  CHECK(zero[0].shape() == Shape{2, 5, 8, 8});
  CHECK(zero[1].shape() == Shape{2, 5, 4, 4});
  CHECK(zero[2].shape() == Shape{2, 5, 2, 2});
  for (const auto& f : zero) CHECK(f.value().max_abs() == 0.0);

  const Tensor raw = random_tensor(Shape{2, 3, 4, 4}, rng);
  auto live = enc.encode(tape, raw, sizes, false);
  CHECK(live[1].value().max_abs() > 0.0);
  // Upsampled level repeats each coarse value over a 2x2 block.
  CHECK(live[0].value().at(1, 2, 5, 4) == live[1].value().at(1, 2, 2, 2));
  auto off = enc.encode(tape, raw, sizes, true);
  for (const auto& f : off) CHECK(f.value().max_abs() == 0.0);
  CHECK_THROWS_AS(enc.encode(tape, Tensor(Shape{1, 2, 4, 4}), sizes, false), ShapeError);
}

TEST_CASE("encoder weight gradients match finite differences") {
  Rng rng(5);
  ConditionEncoder enc(3, 4, 3, rng);
  const Tensor raw = random_tensor(Shape{2, 3, 4, 4}, rng);
  const Tensor probe = random_tensor(Shape{2, 3, 8, 8}, rng);
  auto loss = [&](Tape& tape) {
    auto f = enc.encode(tape, raw, {{8, 8}}, false);
    return ops::sum(ops::mul(ops::tanh(f[0]), tape.constant(probe)));
  };
  std::vector<Parameter*> params;
  enc.visit([&](Parameter& p) { params.push_back(&p); });
  for (Parameter* p : params) {
    p->zero_grad();
    Tape tape;
    tape.backward(loss(tape));
    const Tensor analytic = p->grad;
    const Tensor saved = p->value;
    const Tensor numeric = deflow::testing::numeric_gradient(
        [&](const Tensor& v) {
          p->value = v;
          Tape t(Tape::Mode::inference);
          const double r = loss(t).value()[0];
          p->value = saved;
          return r;
        },
        saved);
    CHECK(deflow::testing::relative_error(analytic, numeric) <= 1e-4);
  }
}
