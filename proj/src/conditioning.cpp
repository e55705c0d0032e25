#include "deflow/conditioning.hpp"

#include <cmath>
#include <stdexcept>

namespace deflow {

namespace {

double cubic(double x, double a = -0.5) {
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

std::int64_t mirror(std::int64_t k, std::int64_t n) {
  const std::int64_t period = 2 * n;
  k %= period;
  if (k < 0) k += period;
  return k < n ? k : period - 1 - k;
}

struct Taps {
  std::vector<std::int64_t> index;
  std::vector<double> weight;
};

// Per output sample, source indices and normalised weights along one axis.
std::vector<Taps> make_taps(std::int64_t in, int factor) {
  const std::int64_t out = in / factor;
  const double f = factor;
  std::vector<Taps> taps(static_cast<std::size_t>(out));
  for (std::int64_t i = 0; i < out; ++i) {
    const double centre = (static_cast<double>(i) + 0.5) * f - 0.5;
    auto first = static_cast<std::int64_t>(std::floor(centre - 2.0 * f));
    auto last = static_cast<std::int64_t>(std::ceil(centre + 2.0 * f));
    Taps& t = taps[static_cast<std::size_t>(i)];
    double total = 0.0;
    for (std::int64_t k = first; k <= last; ++k) {
      const double w = cubic((static_cast<double>(k) - centre) / f);
      if (w == 0.0) continue;
      t.index.push_back(mirror(k, in));
      t.weight.push_back(w);
      total += w;
    }
    for (auto& w : t.weight) w /= total;
  }
  return taps;
}

}  // namespace

Tensor bicubic_downsample(const Tensor& img, int factor) {
  if (img.rank() != 4) throw ShapeError("bicubic_downsample expects [N,C,H,W], got " + shape_str(img.shape()));
  if (factor < 1) throw std::invalid_argument("bicubic_downsample: factor must be positive");
  const auto n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
  if (h % factor != 0 || w % factor != 0) {
    throw std::invalid_argument("bicubic_downsample: factor " + std::to_string(factor) + " does not divide " +
                                shape_str(img.shape()));
  }
  if (factor == 1) return img;
  const auto oh = h / factor, ow = w / factor;
  const auto rows = make_taps(h, factor), cols = make_taps(w, factor);
  Tensor tmp(Shape{n, c, h, ow}, 0.0), out(Shape{n, c, oh, ow}, 0.0);
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < ow; ++x) {
          const Taps& t = cols[static_cast<std::size_t>(x)];
          double acc = 0.0;
          for (std::size_t k = 0; k < t.index.size(); ++k) acc += t.weight[k] * img.at(s, ch, y, t.index[k]);
          tmp.at(s, ch, y, x) = acc;
        }
      for (std::int64_t y = 0; y < oh; ++y) {
        const Taps& t = rows[static_cast<std::size_t>(y)];
        for (std::int64_t x = 0; x < ow; ++x) {
          double acc = 0.0;
          for (std::size_t k = 0; k < t.index.size(); ++k) acc += t.weight[k] * tmp.at(s, ch, t.index[k], x);
          out.at(s, ch, y, x) = acc;
        }
      }
    }
  return out;
}

Tensor make_condition(const Tensor& img, const ConditionSpec& spec, std::uint64_t seed) {
  if (spec.noise_sigma < 0.0) throw std::invalid_argument("make_condition: negative noise sigma");
  Tensor h = bicubic_downsample(img, spec.down_factor);
  if (spec.disabled) {
    h.fill(0.0);
    return h;
  }
  if (spec.noise_sigma > 0.0) {
    Rng rng(seed);
    for (auto& v : h.raw()) v += spec.noise_sigma * rng.normal();
  }
  return h;
}

ConditionEncoder::ConditionEncoder(std::int64_t in_channels, std::int64_t hidden, std::int64_t features, Rng& rng)
    : features_(features),
      w1_("cond.conv1.weight", Tensor(Shape{hidden, in_channels, 3, 3})),
      b1_("cond.conv1.bias", Tensor(Shape{hidden}, 0.0)),
      w2_("cond.conv2.weight", Tensor(Shape{hidden, hidden, 3, 3})),
      b2_("cond.conv2.bias", Tensor(Shape{hidden}, 0.0)),
      w3_("cond.conv3.weight", Tensor(Shape{features, hidden, 3, 3})),
      b3_("cond.conv3.bias", Tensor(Shape{features}, 0.0)) {
  for (Parameter* w : {&w1_, &w2_, &w3_}) {
    const double sd = std::sqrt(2.0 / static_cast<double>(w->value.dim(1) * 9));
    for (auto& v : w->value.raw()) v = sd * rng.normal();
  }
}

std::vector<Var> ConditionEncoder::encode(Tape& tape, const Tensor& raw,
                                          const std::vector<std::pair<std::int64_t, std::int64_t>>& sizes,
                                          bool disabled) {
  if (raw.rank() != 4 || raw.dim(1) != w1_.value.dim(1)) {
    throw ShapeError("condition encoder expects " + std::to_string(w1_.value.dim(1)) + " input channels, got " +
                     shape_str(raw.shape()));
  }
  std::vector<Var> out;
  if (disabled) {
    for (auto [h, w] : sizes) out.push_back(tape.constant(Tensor(Shape{raw.dim(0), features_, h, w}, 0.0)));
    return out;
  }
  using namespace ops;
  Var x = tape.constant(raw);
  Var f = relu(conv2d(x, tape.param(w1_), tape.param(b1_)));
  f = relu(conv2d(f, tape.param(w2_), tape.param(b2_)));
  f = conv2d(f, tape.param(w3_), tape.param(b3_));
  for (auto [h, w] : sizes) {
    Var level = (h == f.dim(2) && w == f.dim(3)) ? f : resize_nearest(f, h, w);
    if (level.dim(2) != h || level.dim(3) != w) throw std::logic_error("condition feature alignment failed");
    out.push_back(level);
  }
  return out;
}

void ConditionEncoder::visit(const flow::ParamVisitor& f) {
  for (Parameter* p : {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_}) f(*p);
}

}  // namespace deflow
