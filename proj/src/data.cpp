#include "deflow/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "deflow/conditioning.hpp"
#include "deflow/linalg.hpp"
#include "deflow/rng.hpp"

namespace deflow::data {

namespace fs = std::filesystem;

namespace {

std::runtime_error io_error(const fs::path& path, const std::string& what) {
  return std::runtime_error(path.string() + ": " + what);
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

double quantize8(double v) { return to_byte(v) / 255.0; }

Tensor quantized(Tensor t) {
  for (auto& v : t.raw()) v = quantize8(v);
  return t;
}

// Next whitespace-separated header token of a PNM file, skipping comments.
std::string pnm_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

Tensor load_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error(path, "cannot open");
  const std::string magic = pnm_token(in);
  if (magic != "P6" && magic != "P5") throw io_error(path, "unsupported PNM variant '" + magic + "'");
  std::int64_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(pnm_token(in));
    h = std::stoll(pnm_token(in));
    maxval = std::stoll(pnm_token(in));
  } catch (const std::exception&) {
    throw io_error(path, "malformed PNM header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw io_error(path, "unsupported PNM dimensions or depth");
  const std::int64_t c = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> buf(static_cast<std::size_t>(w * h * c));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw io_error(path, "truncated pixel data");
  Tensor img(Shape{c, h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        img[static_cast<std::size_t>((ch * h + y) * w + x)] =
            buf[static_cast<std::size_t>((y * w + x) * c + ch)] / static_cast<double>(maxval);
      }
  return img;
}

Tensor load_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) throw io_error(path, image.message);
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw io_error(path, "16-bit PNG is not supported");
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::int64_t c = color ? 3 : 1, h = image.height, w = image.width;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw io_error(path, msg);
  }
  Tensor img(Shape{c, h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        img[static_cast<std::size_t>((ch * h + y) * w + x)] = buf[static_cast<std::size_t>((y * w + x) * c + ch)] / 255.0;
      }
  return img;
}

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return e;
}

std::vector<fs::path> image_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw io_error(dir, "not a directory");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto ext = lower_ext(entry.path());
    if (entry.is_regular_file() && (ext == ".png" || ext == ".ppm" || ext == ".pgm")) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string join(const std::vector<double>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::vector<double> split_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

std::string numbered(const std::string& prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04zu.png", prefix.c_str(), i);
  return buf;
}

}  // namespace

Tensor load_image(const fs::path& path) {
  if (!fs::exists(path)) throw io_error(path, "no such file");
  const auto ext = lower_ext(path);
  if (ext == ".png") return load_png(path);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return load_pnm(path);
  throw io_error(path, "unsupported image format");
}

void save_png(const fs::path& path, const Tensor& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3)) {
    throw ShapeError("save_png expects [1|3,H,W], got " + shape_str(img.shape()));
  }
  const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<png_byte> buf(static_cast<std::size_t>(c * h * w));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        buf[static_cast<std::size_t>((y * w + x) * c + ch)] = to_byte(img[static_cast<std::size_t>((ch * h + y) * w + x)]);
      }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw io_error(path, "cannot write PNG: " + msg);
  }
}

Tensor dequantize(const Tensor& img, int bits, std::uint64_t seed) {
  if (bits == 0) return img;
  if (bits < 1 || bits > 8) throw std::invalid_argument("dequantize: bits must be in [1, 8] or 0");
  const double levels = std::ldexp(1.0, bits);
  const long shift = 8 - bits;
  Rng rng(seed);
  Tensor out(img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) {
    const long p = to_byte(img[i]);
    out[i] = (static_cast<double>(p >> shift) + rng.uniform()) / levels;
  }
  return out;
}

// ---------------------------------------------------------------- oracles

std::string DegradationOracle::kind_name() const {
  switch (kind) {
    case Kind::white_noise: return "white_noise";
    case Kind::correlated_noise: return "correlated_noise";
    case Kind::shifted_noise: return "shifted_noise";
  }
  return "?";
}

DegradationOracle::Kind DegradationOracle::parse_kind(const std::string& name) {
  if (name == "white_noise") return Kind::white_noise;
  if (name == "correlated_noise") return Kind::correlated_noise;
  if (name == "shifted_noise") return Kind::shifted_noise;
  throw std::invalid_argument("unknown degradation kind '" + name + "'");
}

std::vector<double> DegradationOracle::kernel() const {
  if (!(corr_width > 0.0)) throw std::invalid_argument("correlated noise needs a positive width");
  const int radius = static_cast<int>(std::ceil(3.0 * corr_width));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (corr_width * corr_width));
    k[static_cast<std::size_t>(i + radius)] = v;
    norm += v * v;
  }
  for (auto& v : k) v /= std::sqrt(norm);
  return k;
}

double DegradationOracle::kernel_lag1() const {
  const auto k = kernel();
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < k.size(); ++i) s += k[i] * k[i + 1];
  return s;
}

std::vector<double> DegradationOracle::noise_mean(std::int64_t channels) const {
  if (kind == Kind::shifted_noise) return mean;
  return std::vector<double>(static_cast<std::size_t>(channels), 0.0);
}

Tensor DegradationOracle::noise_cov(std::int64_t channels) const {
  if (kind == Kind::shifted_noise) return cov;
  Tensor c(Shape{channels, channels}, 0.0);
  for (std::int64_t i = 0; i < channels; ++i) c.at(i, i) = sigma * sigma;
  return c;
}

Tensor DegradationOracle::apply(const Tensor& clean, std::uint64_t seed) const {
  if (clean.rank() != 3) throw ShapeError("oracle expects [C,H,W], got " + shape_str(clean.shape()));
  const std::int64_t c = clean.dim(0), h = clean.dim(1), w = clean.dim(2);
  Rng rng(seed);
  Tensor out = clean;
  switch (kind) {
    case Kind::white_noise:
      for (auto& v : out.raw()) v += sigma * rng.normal();
      break;
    case Kind::correlated_noise: {
      const auto k = kernel();
      const auto r = static_cast<std::int64_t>(k.size() / 2);
      const std::int64_t ph = h + 2 * r, pw = w + 2 * r;
      std::vector<double> noise(static_cast<std::size_t>(ph * pw)), rows(static_cast<std::size_t>(ph * w));
      for (std::int64_t ch = 0; ch < c; ++ch) {
        for (auto& v : noise) v = rng.normal();
        for (std::int64_t y = 0; y < ph; ++y)
          for (std::int64_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (std::int64_t t = 0; t < 2 * r + 1; ++t) acc += k[static_cast<std::size_t>(t)] * noise[static_cast<std::size_t>(y * pw + x + t)];
            rows[static_cast<std::size_t>(y * w + x)] = acc;
          }
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (std::int64_t t = 0; t < 2 * r + 1; ++t) acc += k[static_cast<std::size_t>(t)] * rows[static_cast<std::size_t>((y + t) * w + x)];
            out[static_cast<std::size_t>((ch * h + y) * w + x)] += sigma * acc;
          }
      }
      break;
    }
    case Kind::shifted_noise: {
      if (static_cast<std::int64_t>(mean.size()) != c || cov.rank() != 2 || cov.dim(0) != c || cov.dim(1) != c) {
        throw ShapeError("shifted noise parameters do not match " + std::to_string(c) + " channels");
      }
      const auto chol = linalg::cholesky(cov);
      if (!chol) throw std::invalid_argument("shifted noise covariance is not positive definite");
      std::vector<double> e(static_cast<std::size_t>(c));
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          for (auto& v : e) v = rng.normal();
          for (std::int64_t i = 0; i < c; ++i) {
            double acc = mean[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j <= i; ++j) acc += chol->at(i, j) * e[static_cast<std::size_t>(j)];
            out[static_cast<std::size_t>((i * h + y) * w + x)] += acc;
          }
        }
      break;
    }
  }
  return out;
}

DegradationOracle default_shift_oracle() {
  DegradationOracle o;
  o.kind = DegradationOracle::Kind::shifted_noise;
  o.sigma = 0.04;
  o.mean = {0.008, 0.0, -0.008};
  o.cov = Tensor(Shape{3, 3});
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < 3; ++j) o.cov.at(i, j) = 0.04 * 0.04 * (i == j ? 1.0 : 0.5);
  return o;
}

// ---------------------------------------------------------------- corpus

Corpus::Corpus(std::vector<Tensor> clean, std::vector<Tensor> degraded)
    : clean_(std::move(clean)), degraded_(std::move(degraded)) {
  for (const auto* set : {&clean_, &degraded_})
    for (const auto& img : *set)
      if (img.rank() != 3) throw ShapeError("corpus images must be [C,H,W], got " + shape_str(img.shape()));
  if (!clean_.empty() && !degraded_.empty() && clean_[0].dim(0) != degraded_[0].dim(0)) {
    throw ShapeError("clean and degraded images have different channel counts");
  }
}

std::int64_t Corpus::channels() const {
  if (!clean_.empty()) return clean_[0].dim(0);
  if (!degraded_.empty()) return degraded_[0].dim(0);
  return 0;
}

const std::vector<Tensor>& Corpus::hidden_sources(const EvalAccess&) const {
  if (hidden_sources_.empty()) throw std::logic_error("corpus has no hidden pairing");
  return hidden_sources_;
}

void Corpus::save(const fs::path& dir) const {
  fs::create_directories(dir / "clean");
  fs::create_directories(dir / "degraded");
  for (std::size_t i = 0; i < clean_.size(); ++i) save_png(dir / "clean" / numbered("clean", i), clean_[i]);
  for (std::size_t i = 0; i < degraded_.size(); ++i) save_png(dir / "degraded" / numbered("degraded", i), degraded_[i]);
  std::ofstream meta(dir / "meta.txt");
  if (!meta) throw io_error(dir / "meta.txt", "cannot write");
  meta << "n_clean=" << clean_.size() << "\n"
       << "n_degraded=" << degraded_.size() << "\n"
       << "channels=" << channels() << "\n"
       << "seed=" << seed_ << "\n";
  if (oracle_) {
    meta << "kind=" << oracle_->kind_name() << "\n"
         << "sigma=" << join({oracle_->sigma}) << "\n"
         << "corr_width=" << join({oracle_->corr_width}) << "\n";
    if (oracle_->kind == DegradationOracle::Kind::shifted_noise) {
      meta << "mean=" << join(oracle_->mean) << "\n"
           << "cov=" << join(std::vector<double>(oracle_->cov.raw().begin(), oracle_->cov.raw().end())) << "\n";
    }
  }
  if (!hidden_sources_.empty()) {
    fs::create_directories(dir / "hidden");
    std::ofstream pairing(dir / "hidden" / "pairing.txt");
    for (std::size_t i = 0; i < hidden_sources_.size(); ++i) {
      save_png(dir / "hidden" / numbered("source", i), hidden_sources_[i]);
      pairing << numbered("degraded", i) << " " << numbered("source", i) << "\n";
    }
    meta << "hidden_pairing=hidden/pairing.txt\n";
  }
}

Corpus Corpus::load(const fs::path& dir) {
  std::vector<Tensor> clean, degraded;
  for (const auto& p : image_files(dir / "clean")) clean.push_back(load_image(p));
  for (const auto& p : image_files(dir / "degraded")) degraded.push_back(load_image(p));
  if (clean.empty() || degraded.empty()) throw io_error(dir, "corpus needs images in clean/ and degraded/");
  Corpus corpus(std::move(clean), std::move(degraded));
  const fs::path meta_path = dir / "meta.txt";
  if (!fs::exists(meta_path)) return corpus;
  std::map<std::string, std::string> meta;
  std::ifstream in(meta_path);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (line.empty() || line[0] == '#' || eq == std::string::npos) continue;
    meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  try {
    if (meta.count("seed")) corpus.seed_ = std::stoull(meta["seed"]);
    if (meta.count("kind")) {
      DegradationOracle o;
      o.kind = DegradationOracle::parse_kind(meta["kind"]);
      if (meta.count("sigma")) o.sigma = std::stod(meta["sigma"]);
      if (meta.count("corr_width")) o.corr_width = std::stod(meta["corr_width"]);
      if (o.kind == DegradationOracle::Kind::shifted_noise) {
        o.mean = split_doubles(meta.at("mean"));
        const auto c = static_cast<std::int64_t>(o.mean.size());
        o.cov = Tensor(Shape{c, c}, split_doubles(meta.at("cov")));
      }
      corpus.oracle_ = o;
    }
  } catch (const std::exception& e) {
    throw io_error(meta_path, std::string("malformed metadata: ") + e.what());
  }
  if (meta.count("hidden_pairing")) {
    std::ifstream pairing(dir / meta["hidden_pairing"]);
    if (!pairing) throw io_error(dir / meta["hidden_pairing"], "cannot open hidden pairing");
    std::map<std::string, std::string> map;
    std::string deg, src;
    while (pairing >> deg >> src) map[deg] = src;
    const auto files = image_files(dir / "degraded");
    for (const auto& f : files) {
      const auto it = map.find(f.filename().string());
      if (it == map.end()) throw io_error(f, "missing from hidden pairing");
      corpus.hidden_sources_.push_back(load_image(dir / "hidden" / it->second));
    }
  }
  return corpus;
}

Tensor synth_clean_image(std::int64_t channels, std::int64_t size, std::uint64_t seed) {
  Rng rng(seed);
  const std::int64_t big = 2 * size;
  // Luminance plus one colour field per channel, each a sum of low-frequency waves and blobs.
  auto field = [&]() {
    std::vector<double> f(static_cast<std::size_t>(big * big), 0.0);
    for (int k = 0; k < 6; ++k) {
      const double period = rng.uniform(10.0, 60.0), angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi), amp = rng.uniform(0.3, 1.0);
      const double fx = std::cos(angle) * 2.0 * std::numbers::pi / period, fy = std::sin(angle) * 2.0 * std::numbers::pi / period;
      for (std::int64_t y = 0; y < big; ++y)
        for (std::int64_t x = 0; x < big; ++x) f[static_cast<std::size_t>(y * big + x)] += amp * std::sin(fx * x + fy * y + phase);
    }
    for (int k = 0; k < 3; ++k) {
      const double cx = rng.uniform(0.0, big), cy = rng.uniform(0.0, big), r = rng.uniform(4.0, 16.0);
      const double amp = rng.uniform(-1.5, 1.5);
      for (std::int64_t y = 0; y < big; ++y)
        for (std::int64_t x = 0; x < big; ++x) {
          const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          f[static_cast<std::size_t>(y * big + x)] += amp * std::exp(-0.5 * d2 / (r * r));
        }
    }
    return f;
  };
  const auto lum = field();
  Tensor hi(Shape{1, channels, big, big});
  for (std::int64_t c = 0; c < channels; ++c) {
    const auto colour = field();
    const double mix = rng.uniform(0.2, 0.5);
    for (std::int64_t i = 0; i < big * big; ++i) {
      hi[static_cast<std::size_t>(c * big * big + i)] = lum[static_cast<std::size_t>(i)] + mix * colour[static_cast<std::size_t>(i)];
    }
  }
  Tensor lo = bicubic_downsample(hi, 2);
  // Every channel gets mean exactly 0.5 and the largest deviation 0.3.
  const std::size_t plane = static_cast<std::size_t>(size * size);
  double dev = 1e-12;
  for (std::int64_t c = 0; c < channels; ++c) {
    const auto begin = lo.raw().begin() + static_cast<std::ptrdiff_t>(c) * static_cast<std::ptrdiff_t>(plane);
    const double mean = std::accumulate(begin, begin + static_cast<std::ptrdiff_t>(plane), 0.0) / static_cast<double>(plane);
    for (auto it = begin; it != begin + static_cast<std::ptrdiff_t>(plane); ++it) {
      *it -= mean;
      dev = std::max(dev, std::abs(*it));
    }
  }
  for (auto& v : lo.raw()) v = 0.5 + 0.3 * v / dev;
  return lo.reshaped(Shape{channels, size, size});
}

Corpus synth_corpus(const DegradationOracle& oracle, std::size_t n_clean, std::size_t n_degraded, std::uint64_t seed,
                    std::int64_t size, std::int64_t channels) {
  if (n_clean == 0) throw std::invalid_argument("synth_corpus: n_clean must be positive");
  if (n_degraded == 0) throw std::invalid_argument("synth_corpus: n_degraded must be positive");
  if (size < 4) throw std::invalid_argument("synth_corpus: image size too small");
  // Source image i is shared by no one: X uses sources [0, n_clean), Y uses the rest.
  std::vector<Tensor> clean, degraded, hidden;
  for (std::size_t i = 0; i < n_clean; ++i) {
    clean.push_back(quantized(synth_clean_image(channels, size, derive_seed(seed, 2 * i))));
  }
  for (std::size_t j = 0; j < n_degraded; ++j) {
    const std::size_t src = n_clean + j;
    Tensor source = quantized(synth_clean_image(channels, size, derive_seed(seed, 2 * src)));
    degraded.push_back(quantized(oracle.apply(source, derive_seed(seed, 2 * src + 1))));
    hidden.push_back(std::move(source));
  }
  Corpus c(std::move(clean), std::move(degraded));
  c.hidden_sources_ = std::move(hidden);
  c.oracle_ = oracle;
  c.seed_ = seed;
  return c;
}

// ---------------------------------------------------------------- normalisation

namespace {
void set_stats(const std::vector<Tensor>& imgs, std::vector<double>& mean, std::vector<double>& sd) {
  const auto c = imgs.at(0).dim(0);
  mean.assign(static_cast<std::size_t>(c), 0.0);
  sd.assign(static_cast<std::size_t>(c), 0.0);
  std::vector<double> count(static_cast<std::size_t>(c), 0.0);
  for (const auto& img : imgs) {
    const auto hw = img.dim(1) * img.dim(2);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < hw; ++i) mean[static_cast<std::size_t>(ch)] += img[static_cast<std::size_t>(ch * hw + i)];
    for (std::int64_t ch = 0; ch < c; ++ch) count[static_cast<std::size_t>(ch)] += static_cast<double>(hw);
  }
  for (std::size_t ch = 0; ch < mean.size(); ++ch) mean[ch] /= count[ch];
  for (const auto& img : imgs) {
    const auto hw = img.dim(1) * img.dim(2);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < hw; ++i) {
        const double d = img[static_cast<std::size_t>(ch * hw + i)] - mean[static_cast<std::size_t>(ch)];
        sd[static_cast<std::size_t>(ch)] += d * d;
      }
  }
  for (std::size_t ch = 0; ch < sd.size(); ++ch) {
    sd[ch] = std::sqrt(sd[ch] / count[ch]);
    if (!(sd[ch] > 0.0)) throw std::domain_error("channel " + std::to_string(ch) + " has zero variance");
  }
}

Tensor channelwise(const Tensor& img, const std::vector<double>& mean, const std::vector<double>& sd, bool forward) {
  const std::size_t axis = img.rank() == 4 ? 1 : 0;
  if (img.rank() < 3 || static_cast<std::size_t>(img.dim(axis)) != mean.size()) {
    throw ShapeError("channel statistics do not match " + shape_str(img.shape()));
  }
  const auto c = img.dim(axis);
  const auto hw = img.dim(axis + 1) * img.dim(axis + 2);
  Tensor out(img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) {
    const auto ch = static_cast<std::size_t>((static_cast<std::int64_t>(i) / hw) % c);
    out[i] = forward ? (img[i] - mean[ch]) / sd[ch] : img[i] * sd[ch] + mean[ch];
  }
  return out;
}
}  // namespace

NormStats channel_stats(const Corpus& corpus) {
  if (corpus.clean().empty() || corpus.degraded().empty()) throw std::invalid_argument("channel_stats: empty corpus");
  NormStats s;
  set_stats(corpus.clean(), s.x_mean, s.x_std);
  set_stats(corpus.degraded(), s.y_mean, s.y_std);
  return s;
}

Tensor normalize_with(const Tensor& img, const std::vector<double>& mean, const std::vector<double>& sd) {
  return channelwise(img, mean, sd, true);
}

Tensor denormalize_with(const Tensor& img, const std::vector<double>& mean, const std::vector<double>& sd) {
  return channelwise(img, mean, sd, false);
}

std::pair<Corpus, NormStats> channel_normalize(const Corpus& corpus) {
  const NormStats s = channel_stats(corpus);
  std::vector<Tensor> clean, degraded;
  for (const auto& img : corpus.clean()) clean.push_back(normalize_with(img, s.x_mean, s.x_std));
  for (const auto& img : corpus.degraded()) degraded.push_back(normalize_with(img, s.y_mean, s.y_std));
  return {Corpus(std::move(clean), std::move(degraded)), s};
}

// ---------------------------------------------------------------- batches

namespace {
void crop_into(const Tensor& img, Tensor& batch, std::int64_t slot, std::int64_t patch, Rng& rng) {
  const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const auto oy = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(h - patch + 1)));
  const auto ox = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w - patch + 1)));
  const bool flip_h = rng.coin(), flip_v = rng.coin();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < patch; ++y)
      for (std::int64_t x = 0; x < patch; ++x) {
        const std::int64_t sy = oy + (flip_v ? patch - 1 - y : y);
        const std::int64_t sx = ox + (flip_h ? patch - 1 - x : x);
        batch.at(slot, ch, y, x) = img[static_cast<std::size_t>((ch * h + sy) * w + sx)];
      }
}
}  // namespace

std::pair<Tensor, Tensor> sample_unpaired_batch(const Corpus& corpus, std::size_t batch_size, std::int64_t patch,
                                                std::uint64_t seed) {
  if (corpus.clean().empty() || corpus.degraded().empty()) throw std::invalid_argument("sample_unpaired_batch: empty domain");
  if (batch_size == 0 || patch < 1) throw std::invalid_argument("sample_unpaired_batch: batch and patch must be positive");
  for (const auto* set : {&corpus.clean(), &corpus.degraded()})
    for (const auto& img : *set)
      if (img.dim(1) < patch || img.dim(2) < patch) {
        throw std::invalid_argument("patch " + std::to_string(patch) + " exceeds image " + shape_str(img.shape()));
      }
  const auto c = corpus.channels();
  const auto b = static_cast<std::int64_t>(batch_size);
  Tensor x(Shape{b, c, patch, patch}), y(Shape{b, c, patch, patch});
  Rng rng(seed);
  for (std::int64_t i = 0; i < b; ++i) {
    crop_into(corpus.clean()[rng.below(corpus.clean().size())], x, i, patch, rng);
    crop_into(corpus.degraded()[rng.below(corpus.degraded().size())], y, i, patch, rng);
  }
  return {x, y};
}

}  // namespace deflow::data
