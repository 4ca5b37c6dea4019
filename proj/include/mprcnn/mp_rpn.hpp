#pragma once

#include <spdlog/spdlog.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mprcnn/anchors.hpp"
#include "mprcnn/boxes.hpp"
#include "mprcnn/checkpoint.hpp"
#include "mprcnn/image.hpp"
#include "mprcnn/layers.hpp"
#include "mprcnn/losses.hpp"
#include "mprcnn/ohem.hpp"

namespace mprcnn {

/// Small VGG-like trunk. Taps at strides 4, 8, 16 and 32 stand in for
/// Conv3_3, Conv4_3, Conv5_3 and Conv6_2.
struct TrunkConfig {
  int stem = 8;
  std::array<int, 4> widths{16, 32, 64, 64};
};

struct RpnConfig {
  TrunkConfig trunk;
  int det4_channels = 32;
  int path_channels = 32;    // each of the three parallel Det-16/Det-32 paths
  int reduce_channels = 64;  // 1x1 reduction after the path concat
  int det_channels = 64;     // sliding 3x3 detection conv of Det-16/Det-32
  bool atrous = true;        // path dilations {1, 2, 4}; {1, 1, 1} when off
  double l2_scale = 10.0;
  double head_init_std = 0.01;
  std::uint64_t seed = 1;

  [[nodiscard]] std::array<int, 3> path_dilations() const {
    return atrous ? std::array<int, 3>{1, 2, 4} : std::array<int, 3>{1, 1, 1};
  }
};

/// Raw head outputs of one branch: cls (N, 2k, H, W) logits with channel
/// 2s + c for scale s and class c; reg (N, 4k, H, W) with channel 4s + j.
template <class T>
struct BranchHeads {
  Tensor<T> cls;
  Tensor<T> reg;
};

template <class T>
using Heads = std::array<BranchHeads<T>, 3>;

/// Raised when a training loss or activation stops being finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
void he_init(Conv2d<T>& conv, std::mt19937_64& rng) {
  const auto& s = conv.spec();
  gaussian_init(conv.weight.value, std::sqrt(2.0 / (s.in_channels * s.kernel * s.kernel)), rng);
  conv.bias.value.zero();
}

template <class T>
void std_init(Conv2d<T>& conv, double stddev, std::mt19937_64& rng) {
  gaussian_init(conv.weight.value, stddev, rng);
  conv.bias.value.zero();
}

template <class T>
Tensor<T> add(Tensor<T> a, const Tensor<T>& b) {
  axpy(T{1}, b, a);
  return a;
}

}  // namespace detail

/// 3x3 detection conv followed by sibling 1x1 classification and regression
/// heads.
template <class T>
struct HeadBlock {
  Conv2d<T> det;
  ReLU<T> det_relu;
  Conv2d<T> cls;
  Conv2d<T> reg;

  HeadBlock() = default;
  HeadBlock(const std::string& name, int in, int mid, int anchors)
      : det(name + ".det", {in, mid, 3, 1, 1, 1}),
        cls(name + ".cls", {mid, 2 * anchors, 1, 1, 0, 1}),
        reg(name + ".reg", {mid, 4 * anchors, 1, 1, 0, 1}) {}

  void init(double head_std, std::mt19937_64& rng) {
    detail::he_init(det, rng);
    detail::std_init(cls, head_std, rng);
    detail::std_init(reg, head_std, rng);
  }

  BranchHeads<T> forward(const Tensor<T>& x) {
    Tensor<T> a = det_relu.forward(det.forward(x));
    return {cls.forward(a), reg.forward(a)};
  }

  Tensor<T> backward(const BranchHeads<T>& g) {
    Tensor<T> da = detail::add(cls.backward(g.cls), reg.backward(g.reg));
    return det.backward(det_relu.backward(da));
  }

  ParamList<T> params() { return {&det.weight, &det.bias, &cls.weight, &cls.bias, &reg.weight, &reg.bias}; }
};

/// Det-4: L2-normalized stride-4 features concatenated with L2-normalized,
/// 2x upsampled stride-8 features.
template <class T>
struct Det4Branch {
  L2Normalize<T> norm_fine;
  Upsample2x<T> up;
  L2Normalize<T> norm_coarse;
  HeadBlock<T> head;
  int fine_channels = 0;

  Det4Branch() = default;
  Det4Branch(const RpnConfig& cfg, int anchors)
      : norm_fine("det4.norm3", cfg.trunk.widths[0], static_cast<T>(cfg.l2_scale)),
        up("det4.up", cfg.trunk.widths[1]),
        norm_coarse("det4.norm4", cfg.trunk.widths[1], static_cast<T>(cfg.l2_scale)),
        head("det4", cfg.trunk.widths[0] + cfg.trunk.widths[1], cfg.det4_channels, anchors),
        fine_channels(cfg.trunk.widths[0]) {}

  BranchHeads<T> forward(const Tensor<T>& tap4, const Tensor<T>& tap8) {
    Tensor<T> cat = concat_channels(norm_fine.forward(tap4), norm_coarse.forward(up.forward(tap8)));
    return head.forward(cat);
  }

  std::pair<Tensor<T>, Tensor<T>> backward(const BranchHeads<T>& g) {
    Tensor<T> dcat = head.backward(g);
    Tensor<T> d4 = norm_fine.backward(slice_channels(dcat, 0, fine_channels));
    Tensor<T> d8 = up.backward(norm_coarse.backward(slice_channels(dcat, fine_channels, dcat.c())));
    return {std::move(d4), std::move(d8)};
  }

  ParamList<T> params() {
    ParamList<T> p{&norm_fine.scale, &up.weight, &norm_coarse.scale};
    for (auto* q : head.params()) p.push_back(q);
    return p;
  }
};

/// Det-16 / Det-32: three parallel 3x3 paths (dilations 1, 2, 4 when atrous),
/// channel concat, 1x1 reduction, then the detection head.
template <class T>
struct MultiPathBranch {
  std::array<Conv2d<T>, 3> paths;
  std::array<ReLU<T>, 3> path_relu;
  Conv2d<T> reduce;
  ReLU<T> reduce_relu;
  HeadBlock<T> head;
  int path_channels = 0;

  MultiPathBranch() = default;
  MultiPathBranch(const std::string& name, const RpnConfig& cfg, int in, int anchors)
      : reduce(name + ".reduce", {3 * cfg.path_channels, cfg.reduce_channels, 1, 1, 0, 1}),
        head(name, cfg.reduce_channels, cfg.det_channels, anchors),
        path_channels(cfg.path_channels) {
    const auto dil = cfg.path_dilations();
    for (int i = 0; i < 3; ++i) {
      paths[i] = Conv2d<T>(name + ".path" + std::to_string(i + 1), {in, cfg.path_channels, 3, 1, dil[i], dil[i]});
    }
  }

  void init(double head_std, std::mt19937_64& rng) {
    for (auto& p : paths) detail::he_init(p, rng);
    detail::he_init(reduce, rng);
    head.init(head_std, rng);
  }

  BranchHeads<T> forward(const Tensor<T>& tap) {
    Tensor<T> a = path_relu[0].forward(paths[0].forward(tap));
    Tensor<T> b = path_relu[1].forward(paths[1].forward(tap));
    Tensor<T> c = path_relu[2].forward(paths[2].forward(tap));
    Tensor<T> cat = concat_channels(concat_channels(a, b), c);
    return head.forward(reduce_relu.forward(reduce.forward(cat)));
  }

  Tensor<T> backward(const BranchHeads<T>& g) {
    Tensor<T> dcat = reduce.backward(reduce_relu.backward(head.backward(g)));
    Tensor<T> dx;
    for (int i = 0; i < 3; ++i) {
      Tensor<T> d = paths[i].backward(
          path_relu[i].backward(slice_channels(dcat, i * path_channels, (i + 1) * path_channels)));
      dx = i == 0 ? std::move(d) : detail::add(std::move(dx), d);
    }
    return dx;
  }

  ParamList<T> params() {
    ParamList<T> p;
    for (auto& c : paths) {
      p.push_back(&c.weight);
      p.push_back(&c.bias);
    }
    p.push_back(&reduce.weight);
    p.push_back(&reduce.bias);
    for (auto* q : head.params()) p.push_back(q);
    return p;
  }
};

/// The three-branch region proposal network.
template <class T>
class MpRpn {
 public:
  static constexpr int kMinInput = 32;

  MpRpn() : MpRpn(RpnConfig{}) {}
  explicit MpRpn(const RpnConfig& cfg) : cfg_(cfg) {
    const auto& t = cfg.trunk;
    conv_ = {Conv2d<T>("trunk.conv1", {1, t.stem, 3, 1, 1, 1}),
             Conv2d<T>("trunk.conv2", {t.stem, t.stem, 3, 1, 1, 1}),
             Conv2d<T>("trunk.conv3", {t.stem, t.widths[0], 3, 1, 1, 1}),
             Conv2d<T>("trunk.conv4", {t.widths[0], t.widths[1], 3, 1, 1, 1}),
             Conv2d<T>("trunk.conv5", {t.widths[1], t.widths[2], 3, 1, 1, 1}),
             Conv2d<T>("trunk.conv6", {t.widths[2], t.widths[3], 3, 1, 1, 1})};
    det4_ = Det4Branch<T>(cfg, branch_config(Branch::Det4).num_scales());
    det16_ = MultiPathBranch<T>("det16", cfg, t.widths[2], branch_config(Branch::Det16).num_scales());
    det32_ = MultiPathBranch<T>("det32", cfg, t.widths[3], branch_config(Branch::Det32).num_scales());
    std::mt19937_64 rng(cfg.seed);
    for (auto& c : conv_) detail::he_init(c, rng);
    det4_.head.init(cfg.head_init_std, rng);
    det16_.init(cfg.head_init_std, rng);
    det32_.init(cfg.head_init_std, rng);
  }

  [[nodiscard]] const RpnConfig& config() const { return cfg_; }

  /// Runs all three branches; caches activations for backward().
  Heads<T> forward(const Tensor<T>& x) {
    if (x.h() < kMinInput || x.w() < kMinInput) {
      throw ShapeError("input " + x.shape().str() + " is smaller than one stride-32 cell");
    }
    if (x.c() != 1) throw ShapeError("input channels " + std::to_string(x.c()) + " != 1");
    Tensor<T> a = pool_[0].forward(relu_[0].forward(conv_[0].forward(x)));
    a = pool_[1].forward(relu_[1].forward(conv_[1].forward(a)));
    tap4_ = relu_[2].forward(conv_[2].forward(a));
    tap8_ = relu_[3].forward(conv_[3].forward(pool_[2].forward(tap4_)));
    tap16_ = relu_[4].forward(conv_[4].forward(pool_[3].forward(tap8_)));
    tap32_ = relu_[5].forward(conv_[5].forward(pool_[4].forward(tap16_)));
    return {det4_.forward(tap4_, tap8_), det16_.forward(tap16_), det32_.forward(tap32_)};
  }

  /// Backpropagates head gradients (same shapes as forward's outputs),
  /// accumulating into every parameter's grad.
  void backward(const Heads<T>& g) {
    auto [d4, d8] = det4_.backward(g[0]);
    Tensor<T> d16 = det16_.backward(g[1]);
    Tensor<T> d32 = det32_.backward(g[2]);
    Tensor<T> d = conv_[5].backward(relu_[5].backward(d32));
    d = conv_[4].backward(relu_[4].backward(detail::add(pool_[4].backward(d), d16)));
    d = conv_[3].backward(relu_[3].backward(detail::add(pool_[3].backward(d), d8)));
    d = conv_[2].backward(relu_[2].backward(detail::add(pool_[2].backward(d), d4)));
    d = conv_[1].backward(relu_[1].backward(pool_[1].backward(d)));
    (void)conv_[0].backward(relu_[0].backward(pool_[0].backward(d)));
  }

  /// Stride-4 feature map and the stride-8 feature map used by the second
  /// stage, from the last forward(). With `atrous_conv4` the stride-8 stage is
  /// recomputed on the unpooled stride-4 map with dilation 2, doubling its
  /// resolution (returned stride 4 instead of 8).
  struct Stage2Maps {
    Tensor<T> fine;
    int fine_stride = 4;
    Tensor<T> coarse;
    int coarse_stride = 8;
  };

  [[nodiscard]] Stage2Maps stage2_maps(bool atrous_conv4) const {
    if (tap4_.empty()) throw std::logic_error("stage2_maps called before forward");
    if (!atrous_conv4) return {tap4_, 4, tap8_, 8};
    Conv2d<T> dilated = conv_[3];
    dilated.set_dilation(2);
    dilated.set_pad(2);
    Tensor<T> m = dilated.apply(tap4_);
    for (auto& v : m.vec()) v = v > T{0} ? v : T{0};
    return {tap4_, 4, std::move(m), 4};
  }

  ParamList<T> params() {
    ParamList<T> p;
    for (auto& c : conv_) {
      p.push_back(&c.weight);
      p.push_back(&c.bias);
    }
    for (auto* q : det4_.params()) p.push_back(q);
    for (auto* q : det16_.params()) p.push_back(q);
    for (auto* q : det32_.params()) p.push_back(q);
    return p;
  }

  void zero_grad() {
    for (auto* p : params()) p->grad.zero();
  }

  /// Regression head parameters of all branches (for tests and ablations).
  ParamList<T> regression_params() {
    return {&det4_.head.reg.weight, &det4_.head.reg.bias, &det16_.head.reg.weight, &det16_.head.reg.bias,
            &det32_.head.reg.weight, &det32_.head.reg.bias};
  }

  ParamList<T> classification_params() {
    return {&det4_.head.cls.weight, &det4_.head.cls.bias, &det16_.head.cls.weight, &det16_.head.cls.bias,
            &det32_.head.cls.weight, &det32_.head.cls.bias};
  }

  /// Checkpoint records: a "config" record followed by every parameter.
  [[nodiscard]] std::vector<NamedArray> to_records() {
    std::vector<NamedArray> out;
    const auto& t = cfg_.trunk;
    out.push_back({"config",
                   {11},
                   {static_cast<float>(t.stem), static_cast<float>(t.widths[0]), static_cast<float>(t.widths[1]),
                    static_cast<float>(t.widths[2]), static_cast<float>(t.widths[3]),
                    static_cast<float>(cfg_.det4_channels), static_cast<float>(cfg_.path_channels),
                    static_cast<float>(cfg_.reduce_channels), static_cast<float>(cfg_.det_channels),
                    cfg_.atrous ? 1.0f : 0.0f, static_cast<float>(cfg_.l2_scale)}});
    for (auto* p : params()) {
      const Shape& s = p->value.shape();
      NamedArray r{p->name,
                   {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
                    static_cast<std::uint32_t>(s.w)},
                   {}};
      r.data.reserve(p->value.size());
      for (T v : p->value.vec()) r.data.push_back(static_cast<float>(v));
      out.push_back(std::move(r));
    }
    return out;
  }

  static MpRpn from_records(const std::vector<NamedArray>& records) {
    if (records.empty() || records[0].name != "config" || records[0].data.size() != 11) {
      throw FormatError("checkpoint lacks a valid config record");
    }
    const auto& c = records[0].data;
    RpnConfig cfg;
    cfg.trunk.stem = static_cast<int>(c[0]);
    for (int i = 0; i < 4; ++i) cfg.trunk.widths[i] = static_cast<int>(c[1 + i]);
    cfg.det4_channels = static_cast<int>(c[5]);
    cfg.path_channels = static_cast<int>(c[6]);
    cfg.reduce_channels = static_cast<int>(c[7]);
    cfg.det_channels = static_cast<int>(c[8]);
    cfg.atrous = c[9] != 0.0f;
    cfg.l2_scale = c[10];
    MpRpn net(cfg);
    std::map<std::string, const NamedArray*> by_name;
    for (std::size_t i = 1; i < records.size(); ++i) by_name[records[i].name] = &records[i];
    for (auto* p : net.params()) {
      auto it = by_name.find(p->name);
      if (it == by_name.end()) throw FormatError("checkpoint missing parameter " + p->name);
      if (it->second->data.size() != p->value.size()) throw FormatError("checkpoint shape mismatch for " + p->name);
      for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = static_cast<T>(it->second->data[i]);
    }
    if (by_name.size() != net.params().size()) throw FormatError("checkpoint has unexpected extra records");
    return net;
  }

 private:
  RpnConfig cfg_;
  std::array<Conv2d<T>, 6> conv_;
  std::array<ReLU<T>, 6> relu_;
  std::array<MaxPool2d<T>, 5> pool_{};
  Det4Branch<T> det4_;
  MultiPathBranch<T> det16_;
  MultiPathBranch<T> det32_;
  Tensor<T> tap4_, tap8_, tap16_, tap32_;
};

/// Anchor sets matching the head grids of a padded input of size (h, w).
inline std::array<AnchorSet, 3> anchors_for_input(int h, int w) {
  std::array<AnchorSet, 3> out;
  for (Branch b : kBranches) {
    const auto cfg = branch_config(b);
    out[static_cast<int>(b)] = generate_anchors(cfg, h / cfg.stride, w / cfg.stride);
  }
  return out;
}

/// Per-anchor view of one branch's heads.
struct BranchOutput {
  std::vector<std::array<double, 2>> logits;
  std::vector<std::pair<double, double>> probs;
  std::vector<RegressionTarget> reg;
};

template <class T>
BranchOutput gather_branch(const BranchHeads<T>& heads, int scales) {
  const int h = heads.cls.h();
  const int w = heads.cls.w();
  if (heads.cls.c() != 2 * scales || heads.reg.c() != 4 * scales) {
    throw ShapeError("head channels do not match anchor scales");
  }
  BranchOutput out;
  const std::size_t n = static_cast<std::size_t>(h) * w * scales;
  out.logits.resize(n);
  out.probs.resize(n);
  out.reg.resize(n);
  std::size_t i = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int s = 0; s < scales; ++s, ++i) {
        const double l0 = heads.cls(0, 2 * s, y, x);
        const double l1 = heads.cls(0, 2 * s + 1, y, x);
        out.logits[i] = {l0, l1};
        out.probs[i] = softmax_pair(l0, l1);
        out.reg[i] = {heads.reg(0, 4 * s, y, x), heads.reg(0, 4 * s + 1, y, x), heads.reg(0, 4 * s + 2, y, x),
                      heads.reg(0, 4 * s + 3, y, x)};
      }
    }
  }
  return out;
}

/// Scatters per-anchor gradients back into head-shaped tensors.
template <class T>
BranchHeads<T> scatter_branch_grad(const BranchHeads<T>& like, const BranchLossGrad& g, int scales) {
  BranchHeads<T> out{Tensor<T>(like.cls.shape()), Tensor<T>(like.reg.shape())};
  std::size_t i = 0;
  for (int y = 0; y < like.cls.h(); ++y) {
    for (int x = 0; x < like.cls.w(); ++x) {
      for (int s = 0; s < scales; ++s, ++i) {
        out.cls(0, 2 * s, y, x) = static_cast<T>(g.dlogits[i][0]);
        out.cls(0, 2 * s + 1, y, x) = static_cast<T>(g.dlogits[i][1]);
        for (int j = 0; j < 4; ++j) out.reg(0, 4 * s + j, y, x) = static_cast<T>(g.dreg[i][j]);
      }
    }
  }
  return out;
}

struct TrainConfig {
  int steps = 2000;
  double lr = 0.01;
  double lr_decay = 0.2;         // multiply lr by this in the second phase
  double decay_fraction = 0.75;  // fraction of steps run at the base lr
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::array<double, 3> alphas{1.0, 1.0, 1.0};
  double lambda = 1.0;
  int ohem_batch = 256;
  bool ohem = true;
  LabelOptions labels{};
  std::uint64_t seed = 1;

  [[nodiscard]] double lr_at(int step) const {
    return step < static_cast<int>(decay_fraction * steps) ? lr : lr * lr_decay;
  }
};

/// SGD with momentum and L2 weight decay on convolution weights:
/// v <- m v - lr (g + wd w); w <- w + v.
template <class T>
class SgdMomentum {
 public:
  void step(const ParamList<T>& params, double lr, double momentum, double weight_decay) {
    if (velocity_.size() != params.size()) {
      velocity_.clear();
      for (auto* p : params) velocity_.emplace_back(p->value.shape());
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      Param<T>& p = *params[k];
      const bool decay = p.name.ends_with(".weight");
      const double wd = decay ? weight_decay : 0.0;
      Tensor<T>& v = velocity_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]) + wd * p.value[i];
        v[i] = static_cast<T>(momentum * v[i] - lr * g);
        p.value[i] += v[i];
      }
    }
  }

 private:
  std::vector<Tensor<T>> velocity_;
};

struct StepStats {
  double total = 0.0;
  std::array<double, 3> branch{};
  std::array<std::size_t, 3> positives{};
};

/// Labels anchors, picks each branch's mini-batch (hard example mining or
/// random 1:3 sampling) and returns per-anchor loss gradients for one image.
template <class T>
StepStats compute_loss_grads(const Heads<T>& heads, const std::array<AnchorSet, 3>& anchor_sets,
                             std::span<const Box> gts, const TrainConfig& cfg, std::mt19937_64& rng,
                             Heads<T>* grads) {
  const auto labels = label_branches(std::span<const AnchorSet>(anchor_sets), gts, cfg.labels);
  StepStats stats;
  for (int m = 0; m < 3; ++m) {
    const AnchorSet& set = anchor_sets[m];
    const int scales = set.config.num_scales();
    const BranchOutput out = gather_branch(heads[m], scales);
    const AnchorLabels& lab = labels[m];
    const std::size_t n = set.size();
    std::vector<int> y(n, 0);
    std::vector<RegressionTarget> gt_t(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = lab.label[i] == AnchorLabel::Positive ? 1 : 0;
      if (lab.reg_target[i]) gt_t[i] = *lab.reg_target[i];
    }
    Selection sel;
    if (cfg.ohem) {
      LossGrid grid{set.feat_h, set.feat_w, scales, std::vector<double>(n, 0.0), lab.label, lab.forced};
      for (std::size_t i = 0; i < n; ++i) {
        if (lab.label[i] != AnchorLabel::Ignore) grid.loss[i] = cross_entropy(out.probs[i], y[i]);
      }
      sel = select_hard(grid, cfg.ohem_batch);
    } else {
      sel = select_random(std::span<const AnchorLabel>(lab.label), cfg.ohem_batch, rng);
    }
    const BranchLossGrad g = branch_loss_with_grad(out.logits, y, out.reg, gt_t, sel.mask, cfg.lambda, cfg.alphas[m]);
    stats.branch[m] = g.loss;
    stats.positives[m] = sel.positives;
    stats.total += g.loss;
    if (grads != nullptr) (*grads)[m] = scatter_branch_grad(heads[m], g, scales);
  }
  return stats;
}

/// One SGD step on a single image.
template <class T>
StepStats train_step(MpRpn<T>& net, const Tensor<T>& input, std::span<const Box> gts, SgdMomentum<T>& opt,
                     const TrainConfig& cfg, int step, std::mt19937_64& rng) {
  const Heads<T> heads = net.forward(input);
  const auto anchor_sets = anchors_for_input(input.h(), input.w());
  Heads<T> grads;
  const StepStats stats = compute_loss_grads(heads, anchor_sets, gts, cfg, rng, &grads);
  if (!std::isfinite(stats.total)) {
    throw TrainingDiverged("loss is not finite at step " + std::to_string(step) + " (branch losses " +
                           std::to_string(stats.branch[0]) + ", " + std::to_string(stats.branch[1]) + ", " +
                           std::to_string(stats.branch[2]) + ")");
  }
  net.zero_grad();
  net.backward(grads);
  opt.step(net.params(), cfg.lr_at(step), cfg.momentum, cfg.weight_decay);
  return stats;
}

struct ProposalConfig {
  double branch_nms = 0.7;
  std::array<int, 3> top_k{150, 40, 10};
  double merge_nms = 0.5;
};

struct Proposal {
  Box box;  // score = face probability
  Branch branch = Branch::Det4;
};

struct ProposalSet {
  std::vector<Proposal> merged;
  std::array<std::vector<Proposal>, 3> per_branch;
};

/// Decodes, clips and per-branch suppresses proposals from head outputs,
/// keeps each branch's top-k and merges them with a second NMS pass.
template <class T>
ProposalSet proposals_from_heads(const Heads<T>& heads, const std::array<AnchorSet, 3>& anchor_sets, int img_w,
                                 int img_h, const ProposalConfig& cfg) {
  ProposalSet out;
  std::vector<Proposal> pool;
  for (int m = 0; m < 3; ++m) {
    const AnchorSet& set = anchor_sets[m];
    const BranchOutput bo = gather_branch(heads[m], set.config.num_scales());
    std::vector<Box> boxes;
    boxes.reserve(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
      Box b = clip_to_image(decode(bo.reg[i], set.anchors[i]), img_w, img_h);
      if (b.empty()) continue;
      b.score = bo.probs[i].second;
      boxes.push_back(b);
    }
    for (std::size_t k : nms_indices(boxes, cfg.branch_nms, static_cast<std::size_t>(std::max(0, cfg.top_k[m])))) {
      out.per_branch[m].push_back({boxes[k], static_cast<Branch>(m)});
      pool.push_back(out.per_branch[m].back());
    }
  }
  std::vector<Box> boxes;
  boxes.reserve(pool.size());
  for (const auto& p : pool) boxes.push_back(p.box);
  for (std::size_t k : nms_indices(boxes, cfg.merge_nms)) out.merged.push_back(pool[k]);
  return out;
}

/// Runs the network on an image already at working resolution.
template <class T>
ProposalSet propose(MpRpn<T>& net, const GrayImage& img, const ProposalConfig& cfg = {}) {
  const Tensor<T> input = image_to_tensor<T>(img);
  const Heads<T> heads = net.forward(input);
  return proposals_from_heads(heads, anchors_for_input(input.h(), input.w()), img.width, img.height, cfg);
}

}  // namespace mprcnn
