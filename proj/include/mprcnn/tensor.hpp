#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mprcnn {

/// Error raised when tensor shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NCHW shape. Every dimension is at least 1.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  [[nodiscard]] std::size_t count() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;

  [[nodiscard]] std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

/// Dense 4-D array in (batch, channel, height, width) order.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(shape) {
    if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
      throw ShapeError("tensor dimensions must be >= 1, got " + shape.str());
    }
    data_.assign(shape.count(), fill);
  }
  Tensor(int n, int c, int h, int w, T fill = T{0}) : Tensor(Shape{n, c, h, w}, fill) {}

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] int n() const { return shape_.n; }
  [[nodiscard]] int c() const { return shape_.c; }
  [[nodiscard]] int h() const { return shape_.h; }
  [[nodiscard]] int w() const { return shape_.w; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] T* data() { return data_.data(); }
  [[nodiscard]] const T* data() const { return data_.data(); }
  [[nodiscard]] std::span<T> span() { return data_; }
  [[nodiscard]] std::span<const T> span() const { return data_; }
  [[nodiscard]] std::vector<T>& vec() { return data_; }
  [[nodiscard]] const std::vector<T>& vec() const { return data_; }

  [[nodiscard]] std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& operator()(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  const T& operator()(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Pointer to the start of one (n, c) plane.
  T* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T{0}); }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  [[nodiscard]] Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

/// Sum with 64-bit accumulation.
template <class T>
double sum(std::span<const T> xs) {
  double s = 0.0;
  for (T v : xs) s += static_cast<double>(v);
  return s;
}

template <class T>
void axpy(T alpha, const Tensor<T>& x, Tensor<T>& y) {
  if (x.shape() != y.shape()) {
    throw ShapeError("axpy shape mismatch " + x.shape().str() + " vs " + y.shape().str());
  }
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

/// Concatenate along channels: a's channels first, then b's.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n) {
    throw ShapeError("concat_channels: batch mismatch " + std::to_string(sa.n) + " vs " + std::to_string(sb.n));
  }
  if (sa.h != sb.h) {
    throw ShapeError("concat_channels: height mismatch " + std::to_string(sa.h) + " vs " + std::to_string(sb.h));
  }
  if (sa.w != sb.w) {
    throw ShapeError("concat_channels: width mismatch " + std::to_string(sa.w) + " vs " + std::to_string(sb.w));
  }
  Tensor<T> out(sa.n, sa.c + sb.c, sa.h, sa.w);
  const std::size_t plane = sa.plane();
  for (int n = 0; n < sa.n; ++n) {
    std::copy_n(a.plane(n, 0), plane * sa.c, out.plane(n, 0));
    std::copy_n(b.plane(n, 0), plane * sb.c, out.plane(n, sa.c));
  }
  return out;
}

/// Channels [begin, end) of x.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int end) {
  if (begin < 0 || end > x.c() || begin >= end) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") outside channel count " + std::to_string(x.c()));
  }
  Tensor<T> out(x.n(), end - begin, x.h(), x.w());
  const std::size_t plane = x.shape().plane();
  for (int n = 0; n < x.n(); ++n) {
    std::copy_n(x.plane(n, begin), plane * (end - begin), out.plane(n, 0));
  }
  return out;
}

}  // namespace mprcnn
