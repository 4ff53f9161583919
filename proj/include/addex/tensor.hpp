#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace addex {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes do not conform. The message carries both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense n-dimensional array of doubles in row-major order.
///
/// Feature maps use height x width x channels layout; dense weights are
/// rows x cols. Scalars are tensors of shape [1].
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)) {
    validate_shape(shape);
    data.assign(numel(shape), fill);
  }

  Tensor(Shape s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    validate_shape(shape);
    if (data.size() != numel(shape)) {
      throw ShapeError("tensor of shape " + to_string(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool empty() const { return data.empty(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  /// Value of a single-element tensor.
  double item() const {
    if (data.size() != 1) {
      throw ShapeError("item() on tensor of shape " + to_string(shape));
    }
    return data[0];
  }

  // HWC indexing for rank-3 maps.
  double& at(std::size_t h, std::size_t w, std::size_t c) {
    return data[(h * shape[1] + w) * shape[2] + c];
  }
  double at(std::size_t h, std::size_t w, std::size_t c) const {
    return data[(h * shape[1] + w) * shape[2] + c];
  }

  std::span<const double> values() const { return data; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static void validate_shape(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (std::size_t d : s) {
      if (d == 0) throw ShapeError("tensor shape " + to_string(s) + " has a zero dimension");
    }
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape) +
                     " vs " + to_string(b.shape));
  }
}

/// Order-fixed sum (left to right), so reductions are reproducible.
inline double sum_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

inline double dot_of(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// FNV-1a over the raw bytes of every value; used to assert frozen models.
inline std::uint64_t checksum(std::span<const double> v, std::uint64_t h = 1469598103934665603ull) {
  for (double x : v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&x);
    for (std::size_t i = 0; i < sizeof(double); ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace addex
