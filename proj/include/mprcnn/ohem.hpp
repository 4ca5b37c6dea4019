#pragma once

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "mprcnn/anchors.hpp"

namespace mprcnn {

/// Per-anchor classification losses on a branch's (y, x, scale) grid.
struct LossGrid {
  int feat_h = 0;
  int feat_w = 0;
  int scales = 0;
  std::vector<double> loss;
  std::vector<AnchorLabel> label;
  std::vector<bool> exempt;  // never suppressed (best-match positives)

  [[nodiscard]] std::size_t size() const { return loss.size(); }
  [[nodiscard]] std::size_t index(int y, int x, int s) const {
    return (static_cast<std::size_t>(y) * feat_w + x) * scales + s;
  }
  void check() const {
    const std::size_t n = static_cast<std::size_t>(feat_h) * feat_w * scales;
    if (loss.size() != n || label.size() != n || (!exempt.empty() && exempt.size() != n)) {
      throw std::invalid_argument("LossGrid: array sizes do not match feat_h * feat_w * scales");
    }
  }
  [[nodiscard]] bool is_exempt(std::size_t i) const { return !exempt.empty() && exempt[i]; }
};

/// Mask of anchors that survive neighbor suppression: an anchor survives when
/// its loss is strictly greater than each of its existing 8 neighbors in the
/// same scale slice, or when it is exempt.
[[nodiscard]] inline std::vector<bool> suppression_survivors(const LossGrid& grid) {
  grid.check();
  std::vector<bool> keep(grid.size(), false);
  for (int s = 0; s < grid.scales; ++s) {
    for (int y = 0; y < grid.feat_h; ++y) {
      for (int x = 0; x < grid.feat_w; ++x) {
        const std::size_t i = grid.index(y, x, s);
        if (grid.is_exempt(i)) {
          keep[i] = true;
          continue;
        }
        const double v = grid.loss[i];
        bool peak = true;
        for (int dy = -1; dy <= 1 && peak; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            const int ny = y + dy;
            const int nx = x + dx;
            if (ny < 0 || nx < 0 || ny >= grid.feat_h || nx >= grid.feat_w) continue;
            if (!(v > grid.loss[grid.index(ny, nx, s)])) {
              peak = false;
              break;
            }
          }
        }
        keep[i] = peak;
      }
    }
  }
  return keep;
}

/// Step 1: zero the loss of every anchor that is not a strict local maximum.
[[nodiscard]] inline LossGrid spatial_suppress(const LossGrid& grid) {
  const auto keep = suppression_survivors(grid);
  LossGrid out = grid;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!keep[i]) out.loss[i] = 0.0;
  }
  return out;
}

struct Selection {
  std::vector<char> mask;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t fallback = 0;  // picked from suppressed anchors
};

namespace detail {

inline Selection quota_take(const std::vector<std::size_t>& pos_order, const std::vector<std::size_t>& neg_order,
                            std::size_t n, int batch) {
  if (batch <= 0) throw std::invalid_argument("selection batch must be positive");
  const auto b = static_cast<std::size_t>(batch);
  std::size_t n_pos = std::min(b / 4, pos_order.size());
  const std::size_t n_neg = std::min(b - n_pos, neg_order.size());
  n_pos = std::min(pos_order.size(), b - n_neg);
  Selection sel;
  sel.mask.assign(n, 0);
  for (std::size_t k = 0; k < n_pos; ++k) sel.mask[pos_order[k]] = 1;
  for (std::size_t k = 0; k < n_neg; ++k) sel.mask[neg_order[k]] = 1;
  sel.positives = n_pos;
  sel.negatives = n_neg;
  if (n_pos + n_neg < b) {
    spdlog::warn("hard example selection: only {} candidates for batch {}", n_pos + n_neg, b);
  }
  return sel;
}

}  // namespace detail

/// Step 1 followed by Step 2: rank each class by post-suppression loss
/// (descending, index ascending on ties) and take batch/4 positives and the
/// rest negatives. Suppressed anchors rank after all survivors, ordered by
/// their original loss, and only fill a class when its survivors run out.
/// Ignored anchors are never selected.
[[nodiscard]] inline Selection select_hard(const LossGrid& grid, int batch = 256) {
  const auto keep = suppression_survivors(grid);
  std::vector<std::size_t> pos;
  std::vector<std::size_t> neg;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid.label[i] == AnchorLabel::Positive) pos.push_back(i);
    if (grid.label[i] == AnchorLabel::Negative) neg.push_back(i);
  }
  auto rank = [&](std::size_t a, std::size_t b) {
    if (keep[a] != keep[b]) return static_cast<bool>(keep[a]);
    if (grid.loss[a] != grid.loss[b]) return grid.loss[a] > grid.loss[b];
    return a < b;
  };
  std::sort(pos.begin(), pos.end(), rank);
  std::sort(neg.begin(), neg.end(), rank);
  Selection sel = detail::quota_take(pos, neg, grid.size(), batch);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (sel.mask[i] && !keep[i]) ++sel.fallback;
  }
  if (sel.fallback > 0) spdlog::debug("hard example selection: {} picks from suppressed anchors", sel.fallback);
  return sel;
}

/// Uniform random sampling with the same 1:3 quota; the baseline when hard
/// example mining is disabled.
template <class Rng>
[[nodiscard]] Selection select_random(std::span<const AnchorLabel> labels, int batch, Rng& rng) {
  std::vector<std::size_t> pos;
  std::vector<std::size_t> neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == AnchorLabel::Positive) pos.push_back(i);
    if (labels[i] == AnchorLabel::Negative) neg.push_back(i);
  }
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  return detail::quota_take(pos, neg, labels.size(), batch);
}

}  // namespace mprcnn
