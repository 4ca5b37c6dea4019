#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mprcnn/boxes.hpp"
#include "mprcnn/tensor.hpp"

namespace mprcnn::testsupport {

/// Small random-instance generator used by the property and oracle suites.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double normal(double mean = 0.0, double sd = 1.0) { return std::normal_distribution<double>(mean, sd)(rng_); }
  bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(rng_); }

  template <class T>
  const T& pick(const std::vector<T>& xs) {
    return xs[static_cast<std::size_t>(integer(0, static_cast<int>(xs.size()) - 1))];
  }

  /// Box with integer coordinates inside [0, extent) and sides in [min_side, max_side].
  Box int_box(int extent, int min_side, int max_side) {
    const int w = integer(min_side, max_side);
    const int h = integer(min_side, max_side);
    const int l = integer(0, std::max(0, extent - w));
    const int t = integer(0, std::max(0, extent - h));
    return {static_cast<double>(l), static_cast<double>(t), static_cast<double>(w), static_cast<double>(h)};
  }

  Box real_box(double extent, double min_side, double max_side) {
    const double w = real(min_side, max_side);
    const double h = real(min_side, max_side);
    return {real(-0.2 * extent, extent), real(-0.2 * extent, extent), w, h};
  }

  template <class T>
  Tensor<T> tensor(Shape s, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(s);
    for (auto& v : t.vec()) v = static_cast<T>(real(lo, hi));
    return t;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

}  // namespace mprcnn::testsupport
