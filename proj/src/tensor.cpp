#include "deflow/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

namespace deflow {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace {
constexpr char kTensorMagic[8] = {'D', 'F', 'T', 'E', 'N', 'S', 'R', '1'};

template <typename T>
void put(std::vector<char>& out, T v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(std::span<const char> in, std::size_t& offset) {
  if (offset + sizeof(T) > in.size()) throw std::runtime_error("tensor data truncated");
  T v;
  std::memcpy(&v, in.data() + offset, sizeof(T));
  offset += sizeof(T);
  return v;
}
}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, const std::vector<double>& data) : Tensor(std::move(shape), AlignedVec(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, AlignedVec data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::vector(std::initializer_list<double> v) {
  return Tensor(Shape{static_cast<std::int64_t>(v.size())}, std::vector<double>(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const auto r = static_cast<std::int64_t>(rows.size());
  const auto c = static_cast<std::int64_t>(rows.begin()->size());
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(r * c));
  for (const auto& row : rows) {
    if (static_cast<std::int64_t>(row.size()) != c) throw ShapeError("ragged matrix literal");
    d.insert(d.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(d));
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& o) {
  if (o.shape_ != shape_) {
    throw ShapeError("accumulate shape mismatch " + shape_str(shape_) + " vs " + shape_str(o.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void write_tensor_to(std::vector<char>& out, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  const auto* p = reinterpret_cast<const char*>(t.raw().data());
  out.insert(out.end(), p, p + t.numel() * sizeof(double));
}

Tensor read_tensor_from(std::span<const char> in, std::size_t& offset) {
  const auto rank = get<std::uint32_t>(in, offset);
  if (rank == 0 || rank > 8) throw std::runtime_error("invalid tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = get<std::uint32_t>(in, offset);
    if (e == 0) throw std::runtime_error("zero extent in tensor data");
  }
  const std::size_t n = shape_numel(shape);
  if (offset + n * sizeof(double) > in.size()) throw std::runtime_error("tensor data truncated");
  std::vector<double> data(n);
  std::memcpy(data.data(), in.data() + offset, n * sizeof(double));
  offset += n * sizeof(double);
  return Tensor(std::move(shape), std::move(data));
}

void write_raw_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::vector<char> buf(std::begin(kTensorMagic), std::end(kTensorMagic));
  write_tensor_to(buf, t);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

Tensor read_raw_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), kTensorMagic, 8) != 0) {
    throw std::runtime_error("bad tensor magic in " + path.string());
  }
  std::size_t offset = 8;
  Tensor t = read_tensor_from(buf, offset);
  if (offset != buf.size()) throw std::runtime_error("trailing bytes in " + path.string());
  return t;
}

}  // namespace deflow
