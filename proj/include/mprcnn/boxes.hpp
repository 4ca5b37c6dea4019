#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mprcnn {

/// Axis-aligned box in continuous pixel coordinates: [l, l+w) x [t, t+h).
struct Box {
  double l = 0.0;
  double t = 0.0;
  double w = 0.0;
  double h = 0.0;
  double score = 0.0;

  [[nodiscard]] double r() const { return l + w; }
  [[nodiscard]] double b() const { return t + h; }
  [[nodiscard]] double cx() const { return l + 0.5 * w; }
  [[nodiscard]] double cy() const { return t + 0.5 * h; }
  [[nodiscard]] double area() const { return w * h; }
  [[nodiscard]] bool empty() const { return !(w > 0.0 && h > 0.0); }

  static Box from_center(double cx, double cy, double w, double h, double score = 0.0) {
    return {cx - 0.5 * w, cy - 0.5 * h, w, h, score};
  }

  bool operator==(const Box&) const = default;
};

/// Offsets of a box relative to a reference box: center shifts in units of
/// the reference size and log size ratios.
struct RegressionTarget {
  double bx = 0.0;
  double by = 0.0;
  double bw = 0.0;
  double bh = 0.0;

  bool operator==(const RegressionTarget&) const = default;
};

inline constexpr double kDecodeLogClamp = 4.0;

inline void require_positive_area(const Box& b, const char* what) {
  if (b.empty()) throw std::invalid_argument(std::string(what) + ": box must have positive width and height");
}

[[nodiscard]] inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.r(), b.r()) - std::max(a.l, b.l);
  const double ih = std::min(a.b(), b.b()) - std::max(a.t, b.t);
  return (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
}

[[nodiscard]] inline double iou(const Box& a, const Box& b) {
  require_positive_area(a, "iou");
  require_positive_area(b, "iou");
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

[[nodiscard]] inline RegressionTarget encode(const Box& gt, const Box& anchor) {
  require_positive_area(gt, "encode");
  require_positive_area(anchor, "encode");
  return {(gt.cx() - anchor.cx()) / anchor.w, (gt.cy() - anchor.cy()) / anchor.h, std::log(gt.w / anchor.w),
          std::log(gt.h / anchor.h)};
}

/// Inverse of encode. Log-size offsets are clamped to +-kDecodeLogClamp.
[[nodiscard]] inline Box decode(const RegressionTarget& t, const Box& anchor) {
  const double bw = std::clamp(t.bw, -kDecodeLogClamp, kDecodeLogClamp);
  const double bh = std::clamp(t.bh, -kDecodeLogClamp, kDecodeLogClamp);
  const double cx = t.bx * anchor.w + anchor.cx();
  const double cy = t.by * anchor.h + anchor.cy();
  return Box::from_center(cx, cy, anchor.w * std::exp(bw), anchor.h * std::exp(bh), anchor.score);
}

/// Surrounding region [l - w, t, 3w, 3h] used for context features.
[[nodiscard]] inline Box context_region(const Box& r) { return {r.l - r.w, r.t, 3.0 * r.w, 3.0 * r.h, r.score}; }

/// Intersection with [0, img_w] x [0, img_h]. An empty intersection yields a
/// zero-area box (Box::empty() is true) that callers must drop.
[[nodiscard]] inline Box clip_to_image(const Box& r, double img_w, double img_h) {
  if (!(img_w > 0.0 && img_h > 0.0)) throw std::invalid_argument("clip_to_image: image size must be positive");
  const double l = std::clamp(r.l, 0.0, img_w);
  const double t = std::clamp(r.t, 0.0, img_h);
  const double rr = std::clamp(r.r(), 0.0, img_w);
  const double bb = std::clamp(r.b(), 0.0, img_h);
  if (rr <= l || bb <= t) return {l, t, 0.0, 0.0, r.score};
  return {l, t, rr - l, bb - t, r.score};
}

/// Greedy non-maximum suppression. Returns indices of kept boxes in
/// descending score order; equal scores keep the lower index first. A box is
/// dropped when its IoU with an already kept box exceeds `threshold`.
/// Stops after `max_keep` boxes, which gives the same prefix as a full run.
[[nodiscard]] inline std::vector<std::size_t> nms_indices(std::span<const Box> boxes, double threshold,
                                                         std::size_t max_keep = std::numeric_limits<std::size_t>::max()) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].score > boxes[b].score; });
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    if (kept.size() >= max_keep) break;
    bool suppressed = false;
    for (std::size_t k : kept) {
      if (iou(boxes[i], boxes[k]) > threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(i);
  }
  return kept;
}

[[nodiscard]] inline std::vector<Box> nms(std::span<const Box> boxes, double threshold) {
  std::vector<Box> out;
  for (std::size_t i : nms_indices(boxes, threshold)) out.push_back(boxes[i]);
  return out;
}

}  // namespace mprcnn
