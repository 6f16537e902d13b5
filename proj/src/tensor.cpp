// SPDX-License-Identifier: Apache-2.0
#include "xfus/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "xfus/rng.hpp"

namespace xfus {

const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidArgument: return "invalid argument";
    case ErrorKind::ShapeMismatch: return "shape mismatch";
    case ErrorKind::KeyMismatch: return "key mismatch";
    case ErrorKind::NonFinite: return "non-finite value";
    case ErrorKind::Io: return "i/o error";
    case ErrorKind::BadMagic: return "bad magic";
    case ErrorKind::BadVersion: return "unknown version";
    case ErrorKind::Truncated: return "truncated file";
    case ErrorKind::OverlappingExtents: return "overlapping extents";
    case ErrorKind::BadHeader: return "bad header";
    case ErrorKind::EmptyCheckpoint: return "empty checkpoint";
    case ErrorKind::MalformedLine: return "malformed line";
    case ErrorKind::MixedDomainBatch: return "mixed-domain batch";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::RewardCollapse: return "reward collapse";
    case ErrorKind::MissingReference: return "missing reference policy";
    case ErrorKind::FingerprintMismatch: return "fingerprint mismatch";
    case ErrorKind::SplitContamination: return "split contamination";
    case ErrorKind::StageFailure: return "stage failure";
  }
  return "unknown error";
}

const char* to_string(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

double quantize(double v, DType dt) {
  return dt == DType::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

void quantize_all(std::vector<double>& data, DType dt) {
  if (dt == DType::f32) {
    for (auto& v : data) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace

void check_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) fail(ErrorKind::NonFinite, std::string(what));
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, DType dt) {
  std::vector<double> data(shape_numel(shape), 0.0);
  return Tensor(dt, std::move(shape), std::move(data));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, DType dt) {
  if (!std::isfinite(value)) fail(ErrorKind::NonFinite, "fill value");
  std::vector<double> data(shape_numel(shape), quantize(value, dt));
  return Tensor(dt, std::move(shape), std::move(data));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data, DType dt) {
  if (data.size() != shape_numel(shape)) {
    fail(ErrorKind::ShapeMismatch, "data length " + std::to_string(data.size()) +
                                       " does not match shape " + shape_str(shape));
  }
  check_finite(data, "tensor construction");
  quantize_all(data, dt);
  return Tensor(dt, std::move(shape), std::move(data));
}

Tensor Tensor::scalar(double value, DType dt) {
  return from_data({}, {value}, dt);
}

Tensor Tensor::row(std::vector<double> data, DType dt) {
  std::size_t n = data.size();
  return from_data({n}, std::move(data), dt);
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (!same_shape(other)) return false;
  return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

const Tensor& NamedTensorMap::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(ErrorKind::KeyMismatch, "no tensor named '" + name + "'");
  return it->second;
}

std::vector<std::string> NamedTensorMap::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

void Fnv64::update(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
}

void Fnv64::update_u64(std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  update(b, 8);
}

void Fnv64::update_f64(double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  update_u64(bits);
}

void Fnv64::update_f32(float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  update(b, 4);
}

void Fnv64::update_str(std::string_view s) { update(s.data(), s.size()); }

std::uint64_t NamedTensorMap::fingerprint() const {
  Fnv64 f;
  for (const auto& [name, t] : entries_) {
    f.update_str(name);
    unsigned char nul = 0;
    f.update(&nul, 1);
    unsigned char dt = static_cast<unsigned char>(t.dtype());
    f.update(&dt, 1);
    unsigned char rank = static_cast<unsigned char>(t.rank());
    f.update(&rank, 1);
    for (auto e : t.shape()) f.update_u64(e);
    if (t.dtype() == DType::f32) {
      for (double v : t.data()) f.update_f32(static_cast<float>(v));
    } else {
      for (double v : t.data()) f.update_f64(v);
    }
  }
  return f.h;
}

bool NamedTensorMap::bitwise_equal(const NamedTensorMap& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto it = entries_.begin();
  auto jt = other.entries_.begin();
  for (; it != entries_.end(); ++it, ++jt) {
    if (it->first != jt->first || !it->second.bitwise_equal(jt->second)) return false;
  }
  return true;
}

namespace {

void require_match(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    fail(ErrorKind::ShapeMismatch, std::string(op) + ": dtype " + to_string(a.dtype()) +
                                       " vs " + to_string(b.dtype()));
  }
  if (a.shape() != b.shape()) {
    fail(ErrorKind::ShapeMismatch,
         std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_match(a, b, op);
  std::vector<double> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i], db[i]);
  return Tensor::from_data(a.shape(), std::move(out), a.dtype());
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor& a, double s) {
  if (!std::isfinite(s)) fail(ErrorKind::InvalidArgument, "scale factor must be finite");
  std::vector<double> out(a.numel());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * s;
  return Tensor::from_data(a.shape(), std::move(out), a.dtype());
}

NamedTensorMap map_combine(const TensorBinaryFn& f, const NamedTensorMap& a,
                           const NamedTensorMap& b) {
  auto an = a.names();
  auto bn = b.names();
  if (an != bn) {
    std::vector<std::string> diff;
    std::set_symmetric_difference(an.begin(), an.end(), bn.begin(), bn.end(),
                                  std::back_inserter(diff));
    std::string msg = "key sets differ:";
    for (const auto& k : diff) msg += " '" + k + "'";
    fail(ErrorKind::KeyMismatch, msg);
  }
  NamedTensorMap out;
  for (const auto& name : an) out.set(name, f(a.at(name), b.at(name)));
  return out;
}

double magnitude_threshold(const Tensor& t, double keep_fraction) {
  if (t.numel() == 0) fail(ErrorKind::InvalidArgument, "magnitude_threshold: empty tensor");
  if (!(keep_fraction >= 0.0 && keep_fraction <= 1.0)) {
    fail(ErrorKind::InvalidArgument, "keep_fraction must lie in [0,1]");
  }
  const std::size_t n = t.numel();
  const std::size_t keep = static_cast<std::size_t>(
      std::ceil(keep_fraction * static_cast<double>(n)));
  if (keep == 0) return std::numeric_limits<double>::infinity();
  std::vector<double> mags(n);
  auto d = t.data();
  for (std::size_t i = 0; i < n; ++i) mags[i] = std::fabs(d[i]);
  std::nth_element(mags.begin(), mags.begin() + (keep - 1), mags.end(), std::greater<>());
  return mags[keep - 1];
}

// ---- SeededRng ----

std::uint64_t SeededRng::uniform_int(std::uint64_t n) {
  if (n == 0) fail(ErrorKind::InvalidArgument, "uniform_int(0)");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double SeededRng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  double u1 = uniform_open01();
  double u2 = uniform01();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * 3.141592653589793238462643383279502884 * u2;
  cached_ = r * std::sin(a);
  has_cached_ = true;
  return r * std::cos(a);
}

std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 33;
  x *= 0xFF51AFD7ED558CCDull;
  x ^= x >> 33;
  x *= 0xC4CEB9FE1A85EC53ull;
  x ^= x >> 33;
  return x;
}

SeededRng SeededRng::child(std::uint64_t salt) const {
  return SeededRng(mix64(seed_ ^ mix64(salt + 0x9E3779B97F4A7C15ull)));
}

std::uint64_t hash_label(std::uint64_t seed, std::string_view label) {
  Fnv64 f;
  f.update_u64(seed);
  f.update_str(label);
  return mix64(f.h);
}

}  // namespace xfus
