#include "deflow/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "deflow/rng.hpp"

namespace deflow::data {
EvalAccess grant_evaluation_access() { return EvalAccess(); }
}  // namespace deflow::data

namespace deflow::eval {

namespace {
constexpr std::size_t kChunk = 8;

// Stacks same-shaped [C,H,W] images [begin, end) into [N,C,H,W].
Tensor stack(const std::vector<Tensor>& imgs, std::size_t begin, std::size_t end) {
  const Shape& s = imgs[begin].shape();
  if (s.size() != 3) throw ShapeError("expected [C,H,W] images, got " + shape_str(s));
  std::vector<double> data;
  data.reserve((end - begin) * imgs[begin].numel());
  for (std::size_t i = begin; i < end; ++i) {
    if (imgs[i].shape() != s) throw ShapeError("images in a chunk must share a shape");
    data.insert(data.end(), imgs[i].raw().begin(), imgs[i].raw().end());
  }
  return Tensor(Shape{static_cast<std::int64_t>(end - begin), s[0], s[1], s[2]}, std::move(data));
}

// Chunk boundaries grouping consecutive images of equal shape.
std::vector<std::pair<std::size_t, std::size_t>> chunks(const std::vector<Tensor>& imgs) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t i = 0;
  while (i < imgs.size()) {
    std::size_t j = i + 1;
    while (j < imgs.size() && j - i < kChunk && imgs[j].shape() == imgs[i].shape()) ++j;
    out.emplace_back(i, j);
    i = j;
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Per-sample NLL of a batch in nats, including the normalisation Jacobian.
double batch_nll_sum(DeFlowModel& model, const Tensor& batch, const std::vector<double>& mean,
                     const std::vector<double>& sd, bool y_domain, std::uint64_t seed) {
  Tensor in = mean.empty() ? batch : data::normalize_with(batch, mean, sd);
  const Tensor h = model.condition(in, seed);
  Tape tape(Tape::Mode::inference);
  const Encoded e = model.encode(tape, in, h);
  const Var lp = y_domain ? logp_zy(e.z, model.shift()) : logp_zx(e.z);
  double sum = 0;
  for (std::size_t i = 0; i < lp.numel(); ++i) sum -= lp.value()[i] + e.logdet.value()[i];
  if (!sd.empty()) {
    const double per_channel = static_cast<double>(batch.dim(2) * batch.dim(3));
    for (double s : sd) sum += static_cast<double>(batch.dim(0)) * per_channel * std::log(s);
  }
  return sum;
}
}  // namespace

Tensor Degrader::operator()(const Tensor& x, double tau, std::uint64_t seed) const {
  if (norm_.empty()) return model_.degrade(x, tau, seed);
  const Tensor out = model_.degrade(data::normalize_with(x, norm_.x_mean, norm_.x_std), tau, seed);
  return data::denormalize_with(out, norm_.y_mean, norm_.y_std);
}

std::vector<Tensor> tile_images(const std::vector<Tensor>& imgs, std::int64_t tile) {
  if (tile == 0) return imgs;
  if (tile < 0) throw std::invalid_argument("tile size must be non-negative");
  std::vector<Tensor> out;
  for (const Tensor& img : imgs) {
    if (img.rank() != 3) throw ShapeError("tile_images expects [C,H,W], got " + shape_str(img.shape()));
    const auto c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (h % tile != 0 || w % tile != 0) {
      throw ShapeError("image " + shape_str(img.shape()) + " is not divisible into " + std::to_string(tile) + " tiles");
    }
    for (std::int64_t ty = 0; ty < h; ty += tile)
      for (std::int64_t tx = 0; tx < w; tx += tile) {
        Tensor t(Shape{c, tile, tile});
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (std::int64_t y = 0; y < tile; ++y)
            for (std::int64_t x = 0; x < tile; ++x) {
              t[static_cast<std::size_t>((ch * tile + y) * tile + x)] =
                  img[static_cast<std::size_t>((ch * h + ty + y) * w + tx + x)];
            }
        out.push_back(std::move(t));
      }
  }
  return out;
}

std::vector<double> ResidualStats::stddev() const {
  std::vector<double> out;
  for (double v : variance) out.push_back(std::sqrt(v));
  return out;
}

ResidualStats residual_moments(const std::vector<Tensor>& residuals) {
  if (residuals.empty()) throw std::invalid_argument("residual_moments: no residuals");
  const std::size_t c = static_cast<std::size_t>(residuals.front().rank() == 4 ? residuals.front().dim(1)
                                                                               : residuals.front().dim(0));
  ResidualStats st;
  std::vector<double> sum(c, 0.0), cross(c * c, 0.0), lag_num(c, 0.0), lag_sq(c, 0.0);
  std::vector<double> lag_a(c, 0.0), lag_b(c, 0.0);
  double lag_n = 0;
  std::size_t count = 0;
  for (const Tensor& r : residuals) {
    const Tensor t = r.rank() == 3 ? r.reshaped(Shape{1, r.dim(0), r.dim(1), r.dim(2)}) : r;
    if (t.rank() != 4 || static_cast<std::size_t>(t.dim(1)) != c) throw ShapeError("residual shapes disagree");
    const auto n = t.dim(0), h = t.dim(2), w = t.dim(3);
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          for (std::size_t i = 0; i < c; ++i) {
            const double vi = t.at(b, static_cast<std::int64_t>(i), y, x);
            sum[i] += vi;
            for (std::size_t j = 0; j < c; ++j) cross[i * c + j] += vi * t.at(b, static_cast<std::int64_t>(j), y, x);
            if (x + 1 < w) {
              const double vn = t.at(b, static_cast<std::int64_t>(i), y, x + 1);
              lag_num[i] += vi * vn;
              lag_a[i] += vi;
              lag_b[i] += vn;
              lag_sq[i] += vi * vi;
            }
          }
          ++count;
          if (x + 1 < w) lag_n += 1;
        }
  }
  const double nd = static_cast<double>(count);
  st.count = count;
  st.mean.resize(c);
  st.variance.resize(c);
  st.lag1.resize(c);
  st.covariance = Tensor(Shape{static_cast<std::int64_t>(c), static_cast<std::int64_t>(c)});
  for (std::size_t i = 0; i < c; ++i) st.mean[i] = sum[i] / nd;
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      st.covariance.at(static_cast<std::int64_t>(i), static_cast<std::int64_t>(j)) =
          cross[i * c + j] / nd - st.mean[i] * st.mean[j];
    }
  for (std::size_t i = 0; i < c; ++i) {
    // Symmetrise so that the diagonal and the variances agree exactly.
    for (std::size_t j = i + 1; j < c; ++j) {
      const auto a = static_cast<std::int64_t>(i), b = static_cast<std::int64_t>(j);
      const double v = 0.5 * (st.covariance.at(a, b) + st.covariance.at(b, a));
      st.covariance.at(a, b) = st.covariance.at(b, a) = v;
    }
    st.variance[i] = st.covariance.at(static_cast<std::int64_t>(i), static_cast<std::int64_t>(i));
    const double cov_lag = lag_num[i] / lag_n - (lag_a[i] / lag_n) * (lag_b[i] / lag_n);
    st.lag1[i] = st.variance[i] > 0 ? cov_lag / st.variance[i] : 0.0;
  }
  return st;
}

ResidualStats residual_stats(const Degrader& degrader, const std::vector<Tensor>& clean_set, double tau,
                             int n_samples, std::uint64_t seed) {
  if (clean_set.empty() || n_samples < 1) throw std::invalid_argument("residual_stats: nothing to evaluate");
  std::vector<Tensor> residuals;
  const auto parts = chunks(clean_set);
  for (int s = 0; s < n_samples; ++s)
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const Tensor x = stack(clean_set, parts[k].first, parts[k].second);
      Tensor y = degrader(x, tau, derive_seed(seed, static_cast<std::uint64_t>(s) * parts.size() + k));
      for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= x[i];
      residuals.push_back(std::move(y));
    }
  return residual_moments(residuals);
}

HeldoutNll heldout_nll(DeFlowModel& model, const data::NormStats& norm, const std::vector<Tensor>& xs,
                       const std::vector<Tensor>& ys, int dequant_bits, std::uint64_t seed) {
  auto domain = [&](const std::vector<Tensor>& set, bool y_domain) {
    if (set.empty()) return std::nan("");
    double total = 0, dims = 0;
    const auto parts = chunks(set);
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const std::uint64_t s = derive_seed(seed, 2 * k + (y_domain ? 1 : 0));
      const Tensor batch = data::dequantize(stack(set, parts[k].first, parts[k].second), dequant_bits, derive_seed(s, 0));
      total += batch_nll_sum(model, batch, y_domain ? norm.y_mean : norm.x_mean, y_domain ? norm.y_std : norm.x_std,
                             y_domain, derive_seed(s, 1));
      dims += static_cast<double>(batch.numel());
    }
    return total / dims;
  };
  return {domain(xs, false), domain(ys, true)};
}

double paired_nll(DeFlowModel& model, const data::NormStats& norm, const data::Corpus& corpus,
                  const data::EvalAccess& access, int dequant_bits, std::uint64_t seed, std::int64_t tile) {
  const auto sources = tile_images(corpus.hidden_sources(access), tile);
  const auto ys = tile_images(corpus.degraded(), tile);
  double total = 0, dims = 0;
  const auto parts = chunks(ys);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::uint64_t s = derive_seed(seed, k);
    Tensor x = data::dequantize(stack(sources, parts[k].first, parts[k].second), dequant_bits, derive_seed(s, 0));
    Tensor y = data::dequantize(stack(ys, parts[k].first, parts[k].second), dequant_bits, derive_seed(s, 1));
    double jac = 0;
    if (!norm.empty()) {
      x = data::normalize_with(x, norm.x_mean, norm.x_std);
      y = data::normalize_with(y, norm.y_mean, norm.y_std);
      for (double sd : norm.y_std) jac += static_cast<double>(y.dim(0) * y.dim(2) * y.dim(3)) * std::log(sd);
    }
    const Tensor h = model.condition(x, derive_seed(s, 2));
    Tape tape(Tape::Mode::inference);
    const Var nll = model.paired_cond_nll(tape, x, y, h);
    total += nll.value()[0] * static_cast<double>(y.dim(0)) + jac;
    dims += static_cast<double>(y.numel());
  }
  return total / dims;
}

double ks_statistic(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("ks_statistic needs two nonempty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == v) ++i;
    while (j < b.size() && b[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return d;
}

Truth truth_from_oracle(const data::DegradationOracle& oracle, std::int64_t channels) {
  Truth t;
  t.mean = oracle.noise_mean(channels);
  t.covariance = oracle.noise_cov(channels);
  const double lag = oracle.kind == data::DegradationOracle::Kind::correlated_noise ? oracle.kernel_lag1() : 0.0;
  t.lag1.assign(static_cast<std::size_t>(channels), lag);
  return t;
}

RecoveryErrors recovery_errors(const ResidualStats& est, const Truth& truth) {
  RecoveryErrors e;
  const auto c = static_cast<std::int64_t>(truth.mean.size());
  if (static_cast<std::int64_t>(est.mean.size()) != c) throw ShapeError("recovery_errors: channel mismatch");
  double num = 0, den = 0;
  for (std::int64_t i = 0; i < c; ++i) {
    const double sd = std::sqrt(truth.covariance.at(i, i));
    const auto k = static_cast<std::size_t>(i);
    e.mean_error = std::max(e.mean_error, std::abs(est.mean[k] - truth.mean[k]) / sd);
    e.std_rel_error = std::max(e.std_rel_error, std::abs(std::sqrt(est.variance[k]) - sd) / sd);
    for (std::int64_t j = 0; j < c; ++j) {
      const double d = est.covariance.at(i, j) - truth.covariance.at(i, j);
      num += d * d;
      den += truth.covariance.at(i, j) * truth.covariance.at(i, j);
    }
  }
  e.cov_frobenius = std::sqrt(num / den);
  return e;
}

bool has_nan(const Report& r) {
  auto bad = [](const auto& v) {
    return std::any_of(v.begin(), v.end(), [](double x) { return std::isnan(x); });
  };
  if (bad(r.residuals.mean) || bad(r.residuals.variance) || bad(r.residuals.lag1)) return true;
  if (bad(r.residuals.covariance.raw())) return true;
  if (std::isnan(r.nll.x) || std::isnan(r.nll.y)) return true;
  return r.paired && std::isnan(*r.paired);
}

void emit_report(const Report& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write report file " + (dir / name).string());
    return f;
  };
  {
    std::ofstream f = open("residuals.csv");
    f << "statistic,channel,channel2,estimate,truth,abs_error,rel_error,std_error\n";
    const auto c = static_cast<std::int64_t>(r.residuals.mean.size());
    auto row = [&](const char* stat, std::int64_t i, std::int64_t j, double est, std::optional<double> truth,
                   std::optional<double> scale) {
      f << stat << "," << i << "," << (j < 0 ? "" : std::to_string(j)) << "," << fmt(est) << ",";
      if (truth) {
        const double abs = std::abs(est - *truth);
        f << fmt(*truth) << "," << fmt(abs) << "," << (*truth != 0.0 ? fmt(abs / std::abs(*truth)) : "") << ","
          << (scale ? fmt(abs / *scale) : "");
      } else {
        f << ",,,";
      }
      f << "\n";
    };
    for (std::int64_t i = 0; i < c; ++i) {
      const auto k = static_cast<std::size_t>(i);
      std::optional<double> t, sd;
      if (r.truth) {
        t = r.truth->mean[k];
        sd = std::sqrt(r.truth->covariance.at(i, i));
      }
      row("mean", i, -1, r.residuals.mean[k], t, sd);
    }
    for (std::int64_t i = 0; i < c; ++i) {
      std::optional<double> t;
      if (r.truth) t = std::sqrt(r.truth->covariance.at(i, i));
      row("std", i, -1, std::sqrt(r.residuals.variance[static_cast<std::size_t>(i)]), t, std::nullopt);
    }
    for (std::int64_t i = 0; i < c; ++i)
      for (std::int64_t j = 0; j < c; ++j) {
        std::optional<double> t;
        if (r.truth) t = r.truth->covariance.at(i, j);
        row("cov", i, j, r.residuals.covariance.at(i, j), t, std::nullopt);
      }
    for (std::int64_t i = 0; i < c; ++i) {
      std::optional<double> t;
      if (r.truth) t = r.truth->lag1[static_cast<std::size_t>(i)];
      row("lag1", i, -1, r.residuals.lag1[static_cast<std::size_t>(i)], t, std::nullopt);
    }
    if (!f) throw std::runtime_error("failed writing " + (dir / "residuals.csv").string());
  }
  {
    std::ofstream f = open("nll.csv");
    f << "metric,nats_per_dim\n";
    f << "nll_x," << fmt(r.nll.x) << "\n";
    f << "nll_y," << fmt(r.nll.y) << "\n";
    if (r.paired) f << "nll_y_given_x," << fmt(*r.paired) << "\n";
    if (!f) throw std::runtime_error("failed writing " + (dir / "nll.csv").string());
  }
  if (r.truth) {
    std::ofstream f = open("summary.csv");
    const RecoveryErrors e = recovery_errors(r.residuals, *r.truth);
    f << "metric,value\n";
    f << "tau," << fmt(r.tau) << "\n";
    f << "pixels," << r.residuals.count << "\n";
    f << "mean_error_in_std," << fmt(e.mean_error) << "\n";
    f << "std_rel_error," << fmt(e.std_rel_error) << "\n";
    f << "cov_frobenius_rel_error," << fmt(e.cov_frobenius) << "\n";
    if (!f) throw std::runtime_error("failed writing " + (dir / "summary.csv").string());
  }
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  };
  CsvTable t;
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error(path.string() + " is empty");
  t.header = split(line);
  while (std::getline(f, line))
    if (!line.empty()) t.rows.push_back(split(line));
  return t;
}

}  // namespace deflow::eval
