#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mprcnn/tensor.hpp"

namespace mprcnn {

/// A learnable tensor with its gradient accumulator.
template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Shape s) : name(std::move(n)), value(s), grad(s) {}
};

template <class T>
using ParamList = std::vector<Param<T>*>;

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline int conv_out_extent(int in, int kernel, int stride, int pad, int dilation) {
  const int extent = dilation * (kernel - 1) + 1;
  return (in + 2 * pad - extent) / stride + 1;
}

}  // namespace detail

struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 0;
  int dilation = 1;
};

/// 2-D convolution with stride, zero padding and dilation ("atrous" when
/// dilation > 1). Lowered to im2col + GEMM.
template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, ConvSpec spec)
      : weight(name + ".weight", Shape{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel}),
        bias(name + ".bias", Shape{1, spec.out_channels, 1, 1}),
        spec_(spec) {
    if (spec.kernel < 1 || spec.stride < 1 || spec.dilation < 1 || spec.pad < 0) {
      throw ShapeError(name + ": kernel, stride and dilation must be positive and pad non-negative");
    }
  }

  [[nodiscard]] const ConvSpec& spec() const { return spec_; }
  void set_dilation(int d) { spec_.dilation = d; }
  void set_pad(int p) { spec_.pad = p; }

  [[nodiscard]] Shape output_shape(const Shape& in) const {
    check_input(in);
    return Shape{in.n, spec_.out_channels,
                 detail::conv_out_extent(in.h, spec_.kernel, spec_.stride, spec_.pad, spec_.dilation),
                 detail::conv_out_extent(in.w, spec_.kernel, spec_.stride, spec_.pad, spec_.dilation)};
  }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return apply(x);
  }

  /// Forward without caching the input; used for inference-only taps.
  [[nodiscard]] Tensor<T> apply(const Tensor<T>& x) const {
    const Shape os = output_shape(x.shape());
    Tensor<T> y(os);
    const int k = spec_.in_channels * spec_.kernel * spec_.kernel;
    const int p = os.h * os.w;
    std::vector<T> col(static_cast<std::size_t>(k) * p);
    detail::ConstMatMap<T> wmat(weight.value.data(), spec_.out_channels, k);
    for (int n = 0; n < x.n(); ++n) {
      im2col(x, n, os, col.data());
      detail::ConstMatMap<T> cmat(col.data(), k, p);
      detail::MatMap<T> ymat(y.plane(n, 0), spec_.out_channels, p);
      ymat.noalias() = wmat * cmat;
      for (int o = 0; o < spec_.out_channels; ++o) ymat.row(o).array() += bias.value[o];
    }
    return y;
  }

  /// Accumulates weight/bias gradients and returns the input gradient.
  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T>& x = input_;
    const Shape os = output_shape(x.shape());
    if (dy.shape() != os) {
      throw ShapeError(weight.name + ": gradient shape " + dy.shape().str() + " != output " + os.str());
    }
    Tensor<T> dx(x.shape());
    const int k = spec_.in_channels * spec_.kernel * spec_.kernel;
    const int p = os.h * os.w;
    std::vector<T> col(static_cast<std::size_t>(k) * p);
    std::vector<T> dcol(static_cast<std::size_t>(k) * p);
    detail::ConstMatMap<T> wmat(weight.value.data(), spec_.out_channels, k);
    detail::MatMap<T> dwmat(weight.grad.data(), spec_.out_channels, k);
    for (int n = 0; n < x.n(); ++n) {
      im2col(x, n, os, col.data());
      detail::ConstMatMap<T> cmat(col.data(), k, p);
      detail::ConstMatMap<T> dymat(dy.plane(n, 0), spec_.out_channels, p);
      dwmat.noalias() += dymat * cmat.transpose();
      for (int o = 0; o < spec_.out_channels; ++o) {
        bias.grad[o] += static_cast<T>(sum(std::span<const T>(dy.plane(n, o), p)));
      }
      detail::MatMap<T> dcmat(dcol.data(), k, p);
      dcmat.noalias() = wmat.transpose() * dymat;
      col2im(dcol.data(), n, os, dx);
    }
    return dx;
  }

  ParamList<T> params() { return {&weight, &bias}; }

  Param<T> weight;
  Param<T> bias;

 private:
  void check_input(const Shape& in) const {
    if (in.c != spec_.in_channels) {
      throw ShapeError(weight.name + ": input channels " + std::to_string(in.c) + " != expected " +
                       std::to_string(spec_.in_channels));
    }
    const int extent = spec_.dilation * (spec_.kernel - 1) + 1;
    if (extent > in.h + 2 * spec_.pad) {
      throw ShapeError(weight.name + ": height " + std::to_string(in.h) + " (pad " + std::to_string(spec_.pad) +
                       ") smaller than kernel extent " + std::to_string(extent));
    }
    if (extent > in.w + 2 * spec_.pad) {
      throw ShapeError(weight.name + ": width " + std::to_string(in.w) + " (pad " + std::to_string(spec_.pad) +
                       ") smaller than kernel extent " + std::to_string(extent));
    }
  }

  void im2col(const Tensor<T>& x, int n, const Shape& os, T* col) const {
    const int kk = spec_.kernel;
    const int p = os.h * os.w;
    for (int c = 0; c < spec_.in_channels; ++c) {
      const T* src = x.plane(n, c);
      for (int ky = 0; ky < kk; ++ky) {
        for (int kx = 0; kx < kk; ++kx) {
          T* row = col + static_cast<std::size_t>((c * kk + ky) * kk + kx) * p;
          for (int oy = 0; oy < os.h; ++oy) {
            const int iy = oy * spec_.stride - spec_.pad + ky * spec_.dilation;
            T* dst = row + static_cast<std::size_t>(oy) * os.w;
            if (iy < 0 || iy >= x.h()) {
              std::fill_n(dst, os.w, T{0});
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(iy) * x.w();
            for (int ox = 0; ox < os.w; ++ox) {
              const int ix = ox * spec_.stride - spec_.pad + kx * spec_.dilation;
              dst[ox] = (ix >= 0 && ix < x.w()) ? srow[ix] : T{0};
            }
          }
        }
      }
    }
  }

  void col2im(const T* col, int n, const Shape& os, Tensor<T>& dx) const {
    const int kk = spec_.kernel;
    const int p = os.h * os.w;
    for (int c = 0; c < spec_.in_channels; ++c) {
      T* dst = dx.plane(n, c);
      for (int ky = 0; ky < kk; ++ky) {
        for (int kx = 0; kx < kk; ++kx) {
          const T* row = col + static_cast<std::size_t>((c * kk + ky) * kk + kx) * p;
          for (int oy = 0; oy < os.h; ++oy) {
            const int iy = oy * spec_.stride - spec_.pad + ky * spec_.dilation;
            if (iy < 0 || iy >= dx.h()) continue;
            T* drow = dst + static_cast<std::size_t>(iy) * dx.w();
            const T* srow = row + static_cast<std::size_t>(oy) * os.w;
            for (int ox = 0; ox < os.w; ++ox) {
              const int ix = ox * spec_.stride - spec_.pad + kx * spec_.dilation;
              if (ix >= 0 && ix < dx.w()) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }

  ConvSpec spec_{};
  Tensor<T> input_;
};

template <class T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> y = x;
    for (auto& v : y.vec()) v = v > T{0} ? v : T{0};
    output_ = y;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (!(output_[i] > T{0})) dx[i] = T{0};
    }
    return dx;
  }

 private:
  Tensor<T> output_;
};

/// Non-overlapping max pooling (kernel == stride); trailing rows/cols that
/// do not fill a window are dropped.
template <class T>
class MaxPool2d {
 public:
  MaxPool2d() = default;
  explicit MaxPool2d(int k) : k_(k) {}

  Tensor<T> forward(const Tensor<T>& x) {
    const int oh = x.h() / k_;
    const int ow = x.w() / k_;
    if (oh < 1 || ow < 1) {
      throw ShapeError("max pool: input " + x.shape().str() + " smaller than window " + std::to_string(k_));
    }
    in_shape_ = x.shape();
    Tensor<T> y(x.n(), x.c(), oh, ow);
    argmax_.assign(y.size(), 0);
    std::size_t o = 0;
    for (int n = 0; n < x.n(); ++n) {
      for (int c = 0; c < x.c(); ++c) {
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox, ++o) {
            std::size_t best = x.index(n, c, oy * k_, ox * k_);
            for (int dy = 0; dy < k_; ++dy) {
              for (int dx = 0; dx < k_; ++dx) {
                const std::size_t i = x.index(n, c, oy * k_ + dy, ox * k_ + dx);
                if (x[i] > x[best]) best = i;
              }
            }
            y[o] = x[best];
            argmax_[o] = best;
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx(in_shape_);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax_[o]] += dy[o];
    return dx;
  }

 private:
  int k_ = 2;
  Shape in_shape_{};
  std::vector<std::size_t> argmax_;
};

/// Per-channel 4x4 transposed convolution, stride 2, pad 1, applied over an
/// edge-replicated input so constants are preserved at the border. Weights
/// start at the separable bilinear kernel and stay learnable.
template <class T>
class Upsample2x {
 public:
  static constexpr int kKernel = 4;

  Upsample2x() = default;
  Upsample2x(const std::string& name, int channels) : weight(name + ".weight", Shape{channels, 1, kKernel, kKernel}) {
    reset_bilinear();
  }

  void reset_bilinear() {
    const auto k1 = bilinear_1d();
    for (int c = 0; c < weight.value.n(); ++c) {
      for (int y = 0; y < kKernel; ++y) {
        for (int x = 0; x < kKernel; ++x) weight.value(c, 0, y, x) = static_cast<T>(k1[y] * k1[x]);
      }
    }
  }

  /// 1-D bilinear taps for factor 2: 1 - |i/f - c| with f = 2, c = 0.75.
  static std::array<double, kKernel> bilinear_1d() { return {0.25, 0.75, 0.75, 0.25}; }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return apply(x);
  }

  [[nodiscard]] Tensor<T> apply(const Tensor<T>& x) const {
    if (x.c() != weight.value.n()) {
      throw ShapeError(weight.name + ": input channels " + std::to_string(x.c()) + " != " +
                       std::to_string(weight.value.n()));
    }
    Tensor<T> y(x.n(), x.c(), 2 * x.h(), 2 * x.w());
    for (int n = 0; n < x.n(); ++n) {
      for (int c = 0; c < x.c(); ++c) {
        const T* k = weight.value.plane(c, 0);
        for (int oy = 0; oy < y.h(); ++oy) {
          for (int ox = 0; ox < y.w(); ++ox) {
            double acc = 0.0;
            for_taps(x.h(), x.w(), oy, ox, [&](int iy, int ix, int ky, int kx) {
              acc += static_cast<double>(x(n, c, iy, ix)) * k[ky * kKernel + kx];
            });
            y(n, c, oy, ox) = static_cast<T>(acc);
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T>& x = input_;
    Tensor<T> dx(x.shape());
    for (int n = 0; n < x.n(); ++n) {
      for (int c = 0; c < x.c(); ++c) {
        const T* k = weight.value.plane(c, 0);
        T* dk = weight.grad.plane(c, 0);
        for (int oy = 0; oy < dy.h(); ++oy) {
          for (int ox = 0; ox < dy.w(); ++ox) {
            const T g = dy(n, c, oy, ox);
            for_taps(x.h(), x.w(), oy, ox, [&](int iy, int ix, int ky, int kx) {
              dx(n, c, iy, ix) += g * k[ky * kKernel + kx];
              dk[ky * kKernel + kx] += g * x(n, c, iy, ix);
            });
          }
        }
      }
    }
    return dx;
  }

  ParamList<T> params() { return {&weight}; }

  Param<T> weight;

 private:
  // Output o receives padded input p through tap k when 2p + k == o + 3;
  // padded index p maps to the clamped original index p - 1.
  template <class F>
  static void for_taps(int h, int w, int oy, int ox, F&& f) {
    for (int ky = 0; ky < kKernel; ++ky) {
      const int sy = oy + 3 - ky;
      if (sy < 0 || (sy & 1)) continue;
      const int py = sy / 2;
      if (py > h + 1) continue;
      const int iy = std::clamp(py - 1, 0, h - 1);
      for (int kx = 0; kx < kKernel; ++kx) {
        const int sx = ox + 3 - kx;
        if (sx < 0 || (sx & 1)) continue;
        const int px = sx / 2;
        if (px > w + 1) continue;
        f(iy, std::clamp(px - 1, 0, w - 1), ky, kx);
      }
    }
  }

  Tensor<T> input_;
};

/// Channel-wise L2 normalization at every spatial location followed by a
/// learnable per-channel scale.
template <class T>
class L2Normalize {
 public:
  static constexpr double kEps = 1e-10;

  L2Normalize() = default;
  L2Normalize(const std::string& name, int channels, T init_scale)
      : scale(name + ".scale", Shape{1, channels, 1, 1}) {
    scale.value.fill(init_scale);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    if (x.c() != scale.value.c()) {
      throw ShapeError(scale.name + ": input channels " + std::to_string(x.c()) + " != " +
                       std::to_string(scale.value.c()));
    }
    Tensor<T> y(x.shape());
    inv_norm_.assign(static_cast<std::size_t>(x.n()) * x.shape().plane(), 0.0);
    const std::size_t plane = x.shape().plane();
    for (int n = 0; n < x.n(); ++n) {
      for (std::size_t p = 0; p < plane; ++p) {
        double ss = 0.0;
        for (int c = 0; c < x.c(); ++c) {
          const double v = x.plane(n, c)[p];
          ss += v * v;
        }
        const double inv = 1.0 / std::sqrt(ss + kEps);
        inv_norm_[n * plane + p] = inv;
        for (int c = 0; c < x.c(); ++c) {
          y.plane(n, c)[p] = static_cast<T>(scale.value[c] * x.plane(n, c)[p] * inv);
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T>& x = input_;
    Tensor<T> dx(x.shape());
    const std::size_t plane = x.shape().plane();
    for (int n = 0; n < x.n(); ++n) {
      for (std::size_t p = 0; p < plane; ++p) {
        const double inv = inv_norm_[n * plane + p];
        double dot = 0.0;  // sum_c dy_c * s_c * x_c
        for (int c = 0; c < x.c(); ++c) {
          const double xv = x.plane(n, c)[p];
          const double g = dy.plane(n, c)[p];
          dot += g * scale.value[c] * xv;
          scale.grad[c] += static_cast<T>(g * xv * inv);
        }
        const double inv3 = inv * inv * inv;
        for (int c = 0; c < x.c(); ++c) {
          const double xv = x.plane(n, c)[p];
          const double g = dy.plane(n, c)[p];
          dx.plane(n, c)[p] = static_cast<T>(scale.value[c] * g * inv - xv * inv3 * dot);
        }
      }
    }
    return dx;
  }

  ParamList<T> params() { return {&scale}; }

  Param<T> scale;

 private:
  Tensor<T> input_;
  std::vector<double> inv_norm_;
};

/// Numerically stable two-class softmax.
template <class T>
std::pair<T, T> softmax_pair(T a, T b) {
  const T m = std::max(a, b);
  const T ea = std::exp(a - m);
  const T eb = std::exp(b - m);
  const T z = ea + eb;
  return {ea / z, eb / z};
}

/// Zero-mean Gaussian initialization.
template <class T>
void gaussian_init(Tensor<T>& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
}

}  // namespace mprcnn
