#include "deflow/model.hpp"

#include <stdexcept>

namespace deflow {

using namespace deflow::ops;
using flow::Direction;
using flow::LayerIO;

DeFlowModel::DeFlowModel(const ModelConfig& config) : config_(config) {
  if (config_.channels < 1) throw std::invalid_argument("model needs at least one channel");
  if (config_.levels < 0 || config_.levels > 4) throw std::invalid_argument("levels must be in [0, 4]");
  if (config_.levels > 0 && config_.steps < 1) throw std::invalid_argument("steps must be positive");
  Rng rng(derive_seed(config_.seed, 0x5eed));
  std::vector<std::int64_t> groups;
  if (config_.levels == 0) {
    affine_ = std::make_unique<flow::Actnorm>("affine", config_.channels);
    groups.push_back(config_.channels);
  } else {
    encoder_ = std::make_unique<ConditionEncoder>(config_.channels, config_.cond_hidden, config_.cond_features, rng);
    std::int64_t c = config_.channels;
    for (int l = 0; l < config_.levels; ++l) {
      c *= 4;
      auto& level = levels_.emplace_back();
      level.reserve(static_cast<std::size_t>(config_.steps));
      for (int k = 0; k < config_.steps; ++k) {
        level.emplace_back("level" + std::to_string(l) + ".step" + std::to_string(k), c, config_.cond_features,
                           config_.hidden, rng);
      }
      if (l + 1 < config_.levels) {
        groups.push_back(c / 2);
        c /= 2;
      }
    }
    groups.push_back(c);
  }
  shift_ = std::make_unique<LatentShift>(groups, config_.diagonal_shift, config_.shift_init);
}

void DeFlowModel::check_input(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != config_.channels) {
    throw ShapeError("model expects [N," + std::to_string(config_.channels) + ",H,W], got " + shape_str(x.shape()));
  }
  if (x.dim(0) < 1) throw std::invalid_argument("empty batch");
  const std::int64_t unit = std::int64_t{1} << config_.levels;
  if (x.dim(2) % unit != 0 || x.dim(3) % unit != 0) {
    throw ShapeError("spatial extent of " + shape_str(x.shape()) + " is not divisible by " + std::to_string(unit));
  }
}

std::vector<Shape> DeFlowModel::group_shapes(std::int64_t n, std::int64_t h, std::int64_t w) const {
  if (config_.levels == 0) return {Shape{n, config_.channels, h, w}};
  std::vector<Shape> out;
  std::int64_t c = config_.channels;
  for (int l = 0; l < config_.levels; ++l) {
    c *= 4;
    h /= 2;
    w /= 2;
    if (l + 1 < config_.levels) {
      out.push_back(Shape{n, c / 2, h, w});
      c /= 2;
    }
  }
  out.push_back(Shape{n, c, h, w});
  return out;
}

std::vector<std::pair<std::int64_t, std::int64_t>> DeFlowModel::level_sizes(std::int64_t h, std::int64_t w) const {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (int l = 0; l < config_.levels; ++l) {
    h /= 2;
    w /= 2;
    out.emplace_back(h, w);
  }
  return out;
}

Tensor DeFlowModel::condition(const Tensor& img, std::uint64_t seed) const {
  if (affine_) return Tensor();
  return make_condition(img, config_.condition, seed);
}

std::vector<Var> DeFlowModel::features(Tape& tape, const Tensor& cond_raw, std::int64_t h, std::int64_t w) {
  return encoder_->encode(tape, cond_raw, level_sizes(h, w), config_.condition.disabled);
}

Encoded DeFlowModel::encode(Tape& tape, const Tensor& x, const Tensor& cond_raw) {
  check_input(x);
  LayerIO io = flow::begin_io(tape, tape.constant(x));
  Encoded out;
  if (affine_) {
    io = affine_->apply(io, Direction::forward);
    out.z.push_back(io.act);
    out.logdet = io.logdet;
    return out;
  }
  if (cond_raw.rank() != 4 || cond_raw.dim(0) != x.dim(0)) {
    throw ShapeError("condition " + shape_str(cond_raw.shape()) + " does not match batch " + shape_str(x.shape()));
  }
  const auto feats = features(tape, cond_raw, x.dim(2), x.dim(3));
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    io = flow::squeeze(io, Direction::forward);
    io.cond = feats[l];
    for (auto& step : levels_[l]) io = step.apply(io, Direction::forward);
    if (l + 1 < levels_.size()) {
      auto parts = flow::split(io);
      out.z.push_back(parts.latent);
      io = parts.kept;
    }
  }
  out.z.push_back(io.act);
  out.logdet = io.logdet;
  return out;
}

Tensor DeFlowModel::decode(const std::vector<Tensor>& z, const Tensor& cond_raw) {
  if (z.size() != shift_->groups()) throw ShapeError("decode: wrong number of latent groups");
  Tape tape(Tape::Mode::inference);
  LayerIO io = flow::begin_io(tape, tape.constant(z.back()));
  if (affine_) return affine_->apply(io, Direction::inverse).act.value();
  const std::int64_t h = z.back().dim(2) << config_.levels, w = z.back().dim(3) << config_.levels;
  const auto feats = features(tape, cond_raw, h, w);
  for (std::size_t l = levels_.size(); l-- > 0;) {
    if (l + 1 < levels_.size()) io = flow::unsplit(io, tape.constant(z[l]));
    io.cond = feats[l];
    for (std::size_t k = levels_[l].size(); k-- > 0;) io = levels_[l][k].apply(io, Direction::inverse);
    io = flow::squeeze(io, Direction::inverse);
  }
  return io.act.value();
}

LossParts DeFlowModel::marginal_nll(Tape& tape, const Tensor& x, const Tensor& hx, const Tensor& y, const Tensor& hy) {
  if (x.numel() == 0 || y.numel() == 0) throw std::invalid_argument("marginal_nll: empty batch");
  Encoded ex = encode(tape, x, hx);
  Encoded ey = encode(tape, y, hy);
  Var nll_x = neg(mean(add(logp_zx(ex.z), ex.logdet)));
  Var nll_y = neg(mean(add(logp_zy(ey.z, *shift_), ey.logdet)));
  LossParts parts;
  parts.nll_x = nll_x.value()[0];
  parts.nll_y = nll_y.value()[0];
  parts.loss = add(nll_x, nll_y);
  return parts;
}

Var DeFlowModel::paired_cond_nll(Tape& tape, const Tensor& x, const Tensor& y, const Tensor& hx) {
  if (x.shape() != y.shape()) throw ShapeError("paired_cond_nll: batches are not aligned");
  Encoded ex = encode(tape, x, hx);
  Encoded ey = encode(tape, y, hx);
  return neg(mean(add(logp_cond_latent(ey.z, ex.z, *shift_), ey.logdet)));
}

Tensor DeFlowModel::degrade(const Tensor& x, double tau, std::uint64_t seed) {
  const Tensor h = condition(x, derive_seed(seed, 1));
  Tape tape(Tape::Mode::inference);
  Encoded e = encode(tape, x, h);
  std::vector<Shape> shapes;
  for (const auto& g : e.z) shapes.push_back(g.shape());
  const auto u = sample_u(*shift_, shapes, tau, derive_seed(seed, 2));
  std::vector<Tensor> zy;
  for (std::size_t g = 0; g < u.size(); ++g) {
    Tensor t = e.z[g].value();
    t += u[g];
    zy.push_back(std::move(t));
  }
  return decode(zy, h);
}

void DeFlowModel::initialize(const Tensor& x, const Tensor& hx) {
  Tape tape(Tape::Mode::inference);
  encode(tape, x, hx);
}

bool DeFlowModel::initialized() {
  bool all = true;
  if (affine_) return affine_->initialized();
  for (auto& level : levels_)
    for (auto& step : level) all = all && step.actnorm().initialized();
  return all;
}

void DeFlowModel::visit(const flow::ParamVisitor& f) {
  if (affine_) affine_->visit(f);
  if (encoder_) encoder_->visit(f);
  for (auto& level : levels_)
    for (auto& step : level) step.visit(f);
  shift_->visit(f);
}

std::size_t DeFlowModel::parameter_count() {
  std::size_t n = 0;
  visit([&](Parameter& p) {
    if (p.trainable) n += p.value.numel();
  });
  return n;
}

}  // namespace deflow
