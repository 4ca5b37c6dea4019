#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mprcnn/boxes.hpp"

namespace mprcnn {

enum class Branch : int { Det4 = 0, Det16 = 1, Det32 = 2 };

inline constexpr std::array<Branch, 3> kBranches{Branch::Det4, Branch::Det16, Branch::Det32};

[[nodiscard]] inline std::string_view branch_name(Branch b) {
  switch (b) {
    case Branch::Det4:
      return "Det-4";
    case Branch::Det16:
      return "Det-16";
    case Branch::Det32:
      return "Det-32";
  }
  return "?";
}

/// Stride and square anchor side lengths owned by one detection branch.
struct BranchConfig {
  Branch branch = Branch::Det4;
  int stride = 4;
  std::vector<double> scales;

  [[nodiscard]] int num_scales() const { return static_cast<int>(scales.size()); }
};

/// Anchor scales per branch; aspect ratio is always 1.
[[nodiscard]] inline BranchConfig branch_config(Branch b) {
  switch (b) {
    case Branch::Det4:
      return {b, 4, {8, 16, 32}};
    case Branch::Det16:
      return {b, 16, {32, 64, 128, 256, 360}};
    case Branch::Det32:
      return {b, 32, {360, 512, 720, 900}};
  }
  throw std::invalid_argument("unknown branch");
}

/// Anchors laid out row-major over (y, x, scale).
struct AnchorSet {
  BranchConfig config;
  int feat_h = 0;
  int feat_w = 0;
  std::vector<Box> anchors;

  [[nodiscard]] std::size_t size() const { return anchors.size(); }
  [[nodiscard]] std::size_t index(int y, int x, int s) const {
    return (static_cast<std::size_t>(y) * feat_w + x) * config.scales.size() + s;
  }
};

[[nodiscard]] inline AnchorSet generate_anchors(const BranchConfig& config, int feat_h, int feat_w) {
  if (feat_h < 1 || feat_w < 1) throw std::invalid_argument("generate_anchors: feature dims must be >= 1");
  AnchorSet set{config, feat_h, feat_w, {}};
  set.anchors.reserve(static_cast<std::size_t>(feat_h) * feat_w * config.scales.size());
  for (int y = 0; y < feat_h; ++y) {
    for (int x = 0; x < feat_w; ++x) {
      const double cx = (x + 0.5) * config.stride;
      const double cy = (y + 0.5) * config.stride;
      for (double s : config.scales) set.anchors.push_back(Box::from_center(cx, cy, s, s));
    }
  }
  return set;
}

enum class AnchorLabel : signed char { Negative = 0, Positive = 1, Ignore = -1 };

struct AnchorLabels {
  std::vector<AnchorLabel> label;
  std::vector<int> matched_gt;  // -1 unless positive
  std::vector<std::optional<RegressionTarget>> reg_target;
  std::vector<bool> forced;  // positive only through the best-match rule

  [[nodiscard]] std::size_t size() const { return label.size(); }
  [[nodiscard]] std::size_t count(AnchorLabel l) const {
    std::size_t n = 0;
    for (auto v : label) n += (v == l);
    return n;
  }
};

struct LabelOptions {
  double positive_iou = 0.5;  // strictly greater -> positive
  double negative_iou = 0.3;  // strictly less -> negative
  bool force_best_match = true;
};

namespace detail {

inline void set_positive(AnchorLabels& out, std::size_t i, int gt, const Box& gt_box, const Box& anchor) {
  out.label[i] = AnchorLabel::Positive;
  out.matched_gt[i] = gt;
  out.reg_target[i] = encode(gt_box, anchor);
}

inline AnchorLabels threshold_labels(const AnchorSet& set, std::span<const Box> gts, const LabelOptions& opt,
                                     std::vector<double>* best_iou_per_gt,
                                     std::vector<std::size_t>* best_anchor_per_gt) {
  const std::size_t n = set.size();
  AnchorLabels out{std::vector<AnchorLabel>(n, AnchorLabel::Negative), std::vector<int>(n, -1),
                   std::vector<std::optional<RegressionTarget>>(n), std::vector<bool>(n, false)};
  for (const Box& g : gts) require_positive_area(g, "label");
  for (std::size_t i = 0; i < n; ++i) {
    double best = 0.0;
    int arg = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(set.anchors[i], gts[g]);
      if (v > best) {
        best = v;
        arg = static_cast<int>(g);
      }
      if (best_iou_per_gt != nullptr && v > (*best_iou_per_gt)[g]) {
        (*best_iou_per_gt)[g] = v;
        (*best_anchor_per_gt)[g] = i;
      }
    }
    if (best > opt.positive_iou) {
      set_positive(out, i, arg, gts[arg], set.anchors[i]);
    } else if (best < opt.negative_iou) {
      out.label[i] = AnchorLabel::Negative;
    } else {
      out.label[i] = AnchorLabel::Ignore;
    }
  }
  return out;
}

inline void force(AnchorLabels& labels, const AnchorSet& set, std::size_t anchor, int gt, const Box& gt_box) {
  if (labels.label[anchor] == AnchorLabel::Positive) return;
  set_positive(labels, anchor, gt, gt_box, set.anchors[anchor]);
  labels.forced[anchor] = true;
}

}  // namespace detail

/// Labels one anchor set against ground truth. With force_best_match, the
/// highest-IoU anchor of every gt (within this set) becomes positive.
[[nodiscard]] inline AnchorLabels label_anchors(const AnchorSet& set, std::span<const Box> gts,
                                                const LabelOptions& opt = {}) {
  std::vector<double> best(gts.size(), 0.0);
  std::vector<std::size_t> arg(gts.size(), 0);
  AnchorLabels out = detail::threshold_labels(set, gts, opt, &best, &arg);
  if (opt.force_best_match) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (best[g] > 0.0) detail::force(out, set, arg[g], static_cast<int>(g), gts[g]);
    }
  }
  return out;
}

/// Labels all branches jointly. Thresholds apply per anchor as in
/// label_anchors, but the best-match rule picks a single anchor per gt across
/// every branch, so a gt is only forced onto the branch that fits it best.
[[nodiscard]] inline std::vector<AnchorLabels> label_branches(std::span<const AnchorSet> sets, std::span<const Box> gts,
                                                              const LabelOptions& opt = {}) {
  std::vector<AnchorLabels> out;
  std::vector<double> best(gts.size(), 0.0);
  std::vector<std::size_t> best_anchor(gts.size(), 0);
  std::vector<std::size_t> best_set(gts.size(), 0);
  for (std::size_t s = 0; s < sets.size(); ++s) {
    std::vector<double> b(gts.size(), 0.0);
    std::vector<std::size_t> a(gts.size(), 0);
    out.push_back(detail::threshold_labels(sets[s], gts, opt, &b, &a));
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (b[g] > best[g]) {
        best[g] = b[g];
        best_anchor[g] = a[g];
        best_set[g] = s;
      }
    }
  }
  if (opt.force_best_match) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (best[g] > 0.0) detail::force(out[best_set[g]], sets[best_set[g]], best_anchor[g], static_cast<int>(g), gts[g]);
    }
  }
  return out;
}

}  // namespace mprcnn
