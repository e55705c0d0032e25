#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace deflow {

using Shape = std::vector<std::int64_t>;

/// Allocator returning 64-byte aligned blocks, so vectorised kernels see the
/// same alignment (and summation order) on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using AlignedVec = std::vector<double, AlignedAllocator<double>>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Error raised for shape or argument contract violations.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array of 64-bit reals.
///
/// A Tensor is a plain value. Gradient bookkeeping lives on the Tape
/// (see autodiff.hpp); trainable leaves are Parameters.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, const std::vector<double>& data);
  Tensor(Shape shape, AlignedVec data);
  Tensor(Shape shape, std::initializer_list<double> data) : Tensor(std::move(shape), AlignedVec(data)) {}

  static Tensor scalar(double v) { return Tensor(Shape{1}, {v}); }
  static Tensor vector(std::initializer_list<double> v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  AlignedVec& raw() { return data_; }
  const AlignedVec& raw() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Four-index access for [N,C,H,W] tensors.
  double& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  double at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  double& at(std::int64_t r, std::int64_t c) {
    return data_[static_cast<std::size_t>(r * shape_[1] + c)];
  }
  double at(std::int64_t r, std::int64_t c) const {
    return data_[static_cast<std::size_t>(r * shape_[1] + c)];
  }

  /// Same data under a different shape with equal element count.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;
  double sum() const;
  double max_abs() const;

  void fill(double v);
  Tensor& operator+=(const Tensor& o);

  bool operator==(const Tensor& o) const = default;

 private:
  Shape shape_;
  AlignedVec data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

/// Raw fixture format: 8-byte magic "DFTENSR1", u32 rank, u32 extents,
/// then float64 values, all little-endian.
void write_raw_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_raw_tensor(const std::filesystem::path& path);

void write_tensor_to(std::vector<char>& out, const Tensor& t);
Tensor read_tensor_from(std::span<const char> in, std::size_t& offset);

}  // namespace deflow
