// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xfus/error.hpp"

namespace xfus {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* to_string(DType dt);
std::string shape_str(const std::vector<std::size_t>& shape);

/// Dense row-major tensor of finite scalars. Storage is always double; with
/// dtype f32 every value is quantized to the nearest float on construction and
/// after every operation, so f32 semantics survive a double carrier exactly.
/// Tensors are immutable once built and safe to share across threads.
class Tensor {
 public:
  Tensor() : dtype_(DType::f64), shape_{0} {}

  static Tensor zeros(std::vector<std::size_t> shape, DType dt = DType::f64);
  static Tensor full(std::vector<std::size_t> shape, double value, DType dt = DType::f64);
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                          DType dt = DType::f64);
  static Tensor scalar(double value, DType dt = DType::f64);
  static Tensor row(std::vector<double> data, DType dt = DType::f64);

  DType dtype() const noexcept { return dtype_; }
  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  std::span<const double> data() const noexcept { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& other) const {
    return dtype_ == other.dtype_ && shape_ == other.shape_;
  }
  /// Bit-level equality (distinguishes -0.0 from +0.0).
  bool bitwise_equal(const Tensor& other) const;

 private:
  Tensor(DType dt, std::vector<std::size_t> shape, std::vector<double> data)
      : dtype_(dt), shape_(std::move(shape)), data_(std::move(data)) {}

  DType dtype_;
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);

/// Ordered parameter map: iteration is lexicographic by name, which fixes the
/// byte order of fingerprints, archives, and merges.
class NamedTensorMap {
 public:
  using const_iterator = std::map<std::string, Tensor>::const_iterator;

  void set(const std::string& name, Tensor t) { entries_[name] = std::move(t); }
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const_iterator begin() const { return entries_.begin(); }
  const_iterator end() const { return entries_.end(); }
  std::vector<std::string> names() const;

  /// FNV-1a 64 over the canonical stream: for each entry in name order,
  /// name bytes, NUL, dtype code, rank, extents (LE u64), raw scalars
  /// (f32: 4-byte LE, f64: 8-byte LE).
  std::uint64_t fingerprint() const;

  bool bitwise_equal(const NamedTensorMap& other) const;

 private:
  std::map<std::string, Tensor> entries_;
};

// Elementwise arithmetic. Binary ops require matching shape and dtype; all
// results are checked finite (NaN/Inf raise NonFinite).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

using TensorBinaryFn = std::function<Tensor(const Tensor&, const Tensor&)>;

/// Applies f per name over two maps with identical key sets and shapes.
NamedTensorMap map_combine(const TensorBinaryFn& f, const NamedTensorMap& a,
                           const NamedTensorMap& b);

/// Smallest |value| retained when keeping ceil(keep_fraction * N)
/// largest-magnitude elements; ties at the cut are all retained.
/// keep_fraction == 0 returns +infinity (keep nothing).
double magnitude_threshold(const Tensor& t, double keep_fraction);

// Incremental FNV-1a 64.
struct Fnv64 {
  std::uint64_t h = 0xcbf29ce484222325ull;
  void update(const void* data, std::size_t n);
  void update_u64(std::uint64_t v);
  void update_f64(double v);
  void update_f32(float v);
  void update_str(std::string_view s);
};

void check_finite(std::span<const double> values, const char* what);

}  // namespace xfus
