#pragma once

// Independent reference implementations used only by tests. They favor
// exhaustive or exact-integer formulations over speed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mprcnn/anchors.hpp"
#include "mprcnn/boxes.hpp"
#include "mprcnn/ohem.hpp"
#include "mprcnn/tensor.hpp"

namespace mprcnn::oracle {

/// Box with integer corners, for exact overlap arithmetic.
struct IBox {
  std::int64_t l = 0, t = 0, w = 0, h = 0;

  static IBox from(const Box& b) {
    IBox r{std::llround(b.l), std::llround(b.t), std::llround(b.w), std::llround(b.h)};
    if (r.l != b.l || r.t != b.t || r.w != b.w || r.h != b.h) throw std::invalid_argument("box is not integral");
    return r;
  }
  [[nodiscard]] std::int64_t area() const { return w * h; }
};

/// Intersection and union as exact integers.
struct Overlap {
  std::int64_t inter = 0;
  std::int64_t uni = 1;

  // inter / uni > num / den
  [[nodiscard]] bool above(std::int64_t num, std::int64_t den) const { return inter * den > num * uni; }
  [[nodiscard]] bool below(std::int64_t num, std::int64_t den) const { return inter * den < num * uni; }
  [[nodiscard]] bool greater(const Overlap& o) const { return inter * o.uni > o.inter * uni; }
  [[nodiscard]] double value() const { return static_cast<double>(inter) / static_cast<double>(uni); }
};

/// Counts the unit cells covered by both boxes.
inline std::int64_t raster_intersection(const IBox& a, const IBox& b) {
  std::int64_t n = 0;
  for (std::int64_t y = a.t; y < a.t + a.h; ++y) {
    for (std::int64_t x = a.l; x < a.l + a.w; ++x) {
      n += (x >= b.l && x < b.l + b.w && y >= b.t && y < b.t + b.h) ? 1 : 0;
    }
  }
  return n;
}

inline Overlap raster_overlap(const IBox& a, const IBox& b) {
  const std::int64_t i = raster_intersection(a, b);
  return {i, a.area() + b.area() - i};
}

inline Overlap interval_overlap(const IBox& a, const IBox& b) {
  const std::int64_t iw = std::max<std::int64_t>(0, std::min(a.l + a.w, b.l + b.w) - std::max(a.l, b.l));
  const std::int64_t ih = std::max<std::int64_t>(0, std::min(a.t + a.h, b.t + b.h) - std::max(a.t, b.t));
  return {iw * ih, a.area() + b.area() - iw * ih};
}

/// Greedy suppression on a shrinking candidate list, threshold num/den.
inline std::vector<std::size_t> nms(const std::vector<IBox>& boxes, const std::vector<double>& scores,
                                    std::int64_t num, std::int64_t den) {
  std::vector<std::size_t> alive;
  for (std::size_t i = 0; i < boxes.size(); ++i) alive.push_back(i);
  std::vector<std::size_t> kept;
  while (!alive.empty()) {
    std::size_t best = alive[0];
    for (std::size_t i : alive) {
      if (scores[i] > scores[best] || (scores[i] == scores[best] && i < best)) best = i;
    }
    kept.push_back(best);
    std::vector<std::size_t> next;
    for (std::size_t i : alive) {
      if (i != best && !raster_overlap(boxes[i], boxes[best]).above(num, den)) next.push_back(i);
    }
    alive = std::move(next);
  }
  return kept;
}

/// Checks the defining properties of a greedy NMS result: kept boxes are
/// pairwise below the threshold and each dropped box overlaps a kept box of
/// higher priority beyond it.
inline bool nms_certificate(const std::vector<IBox>& boxes, const std::vector<double>& scores,
                            const std::vector<std::size_t>& kept, std::int64_t num, std::int64_t den) {
  auto before = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  std::vector<char> is_kept(boxes.size(), 0);
  for (std::size_t k : kept) is_kept[k] = 1;
  for (std::size_t a : kept) {
    for (std::size_t b : kept) {
      if (a != b && raster_overlap(boxes[a], boxes[b]).above(num, den)) return false;
    }
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (is_kept[i]) continue;
    bool covered = false;
    for (std::size_t k : kept) covered |= before(k, i) && raster_overlap(boxes[i], boxes[k]).above(num, den);
    if (!covered) return false;
  }
  return true;
}

struct Labels {
  std::vector<AnchorLabel> label;
  std::vector<int> matched;
};

/// Thresholds 1/2 (positive, strict) and 3/10 (negative, strict) with the
/// best anchor of every gt, searched over all sets in order, forced positive.
inline std::vector<Labels> label(const std::vector<std::vector<IBox>>& sets, const std::vector<IBox>& gts,
                                 bool force = true) {
  std::vector<Labels> out(sets.size());
  for (std::size_t s = 0; s < sets.size(); ++s) {
    out[s].label.assign(sets[s].size(), AnchorLabel::Negative);
    out[s].matched.assign(sets[s].size(), -1);
    for (std::size_t i = 0; i < sets[s].size(); ++i) {
      Overlap best{0, 1};
      int arg = -1;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        const Overlap o = interval_overlap(sets[s][i], gts[g]);
        if (o.greater(best)) {
          best = o;
          arg = static_cast<int>(g);
        }
      }
      if (best.above(1, 2)) {
        out[s].label[i] = AnchorLabel::Positive;
        out[s].matched[i] = arg;
      } else if (!best.below(3, 10)) {
        out[s].label[i] = AnchorLabel::Ignore;
      }
    }
  }
  if (!force) return out;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    Overlap best{0, 1};
    std::size_t bs = 0, bi = 0;
    for (std::size_t s = 0; s < sets.size(); ++s) {
      for (std::size_t i = 0; i < sets[s].size(); ++i) {
        const Overlap o = interval_overlap(sets[s][i], gts[g]);
        if (o.greater(best)) {
          best = o;
          bs = s;
          bi = i;
        }
      }
    }
    if (best.inter > 0 && out[bs].label[bi] != AnchorLabel::Positive) {
      out[bs].label[bi] = AnchorLabel::Positive;
      out[bs].matched[bi] = static_cast<int>(g);
    }
  }
  return out;
}

/// Survivor mask: compares every anchor with every other anchor of the same
/// scale at Chebyshev distance one.
inline std::vector<bool> suppression_survivors(const LossGrid& g) {
  std::vector<bool> keep(g.size(), true);
  for (int y = 0; y < g.feat_h; ++y) {
    for (int x = 0; x < g.feat_w; ++x) {
      for (int s = 0; s < g.scales; ++s) {
        const std::size_t i = g.index(y, x, s);
        if (!g.exempt.empty() && g.exempt[i]) continue;
        for (int y2 = 0; y2 < g.feat_h; ++y2) {
          for (int x2 = 0; x2 < g.feat_w; ++x2) {
            const int d = std::max(std::abs(y2 - y), std::abs(x2 - x));
            if (d == 1 && !(g.loss[i] > g.loss[g.index(y2, x2, s)])) keep[i] = false;
          }
        }
      }
    }
  }
  return keep;
}

/// Hard selection by a full sort of every candidate on the key
/// (survivor first, loss descending, index ascending).
inline std::vector<char> select_hard(const LossGrid& g, int batch) {
  const auto keep = oracle::suppression_survivors(g);
  struct Cand {
    bool survivor;
    double loss;
    std::size_t index;
  };
  std::vector<Cand> pos, neg;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Cand c{static_cast<bool>(keep[i]), g.loss[i], i};
    if (g.label[i] == AnchorLabel::Positive) pos.push_back(c);
    if (g.label[i] == AnchorLabel::Negative) neg.push_back(c);
  }
  auto key = [](const Cand& c) { return std::make_tuple(!c.survivor, -c.loss, c.index); };
  auto cmp = [&](const Cand& a, const Cand& b) { return key(a) < key(b); };
  std::sort(pos.begin(), pos.end(), cmp);
  std::sort(neg.begin(), neg.end(), cmp);
  const std::size_t b = static_cast<std::size_t>(batch);
  const std::size_t quota = b / 4;
  std::size_t n_pos = std::min(quota, pos.size());
  std::size_t n_neg = std::min(b - n_pos, neg.size());
  if (n_pos + n_neg < b) n_pos = std::min(pos.size(), b - n_neg);
  std::vector<char> mask(g.size(), 0);
  for (std::size_t k = 0; k < n_pos; ++k) mask[pos[k].index] = 1;
  for (std::size_t k = 0; k < n_neg; ++k) mask[neg[k].index] = 1;
  return mask;
}

/// Per-bin max over the cells whose extent meets the bin's open span
/// (i L / bins, (i + 1) L / bins), tested in exact integer arithmetic.
template <class T>
std::vector<float> roi_pool(const Tensor<T>& map, int x0, int y0, int x1, int y1, int bins) {
  const int lw = x1 - x0, lh = y1 - y0;
  std::vector<float> out;
  for (int c = 0; c < map.c(); ++c) {
    for (int by = 0; by < bins; ++by) {
      for (int bx = 0; bx < bins; ++bx) {
        std::optional<T> m;
        for (int y = y0; y < y1; ++y) {
          const int ry = y - y0;
          if (!(ry * bins < (by + 1) * lh && (ry + 1) * bins > by * lh)) continue;
          for (int x = x0; x < x1; ++x) {
            const int rx = x - x0;
            if (!(rx * bins < (bx + 1) * lw && (rx + 1) * bins > bx * lw)) continue;
            const T v = map(0, c, y, x);
            if (!m || v > *m) m = v;
          }
        }
        out.push_back(m ? static_cast<float>(*m) : 0.0f);
      }
    }
  }
  return out;
}

/// Greedy-by-score matching as the lexicographic maximum, over every
/// injective partial assignment, of the key (iou_1, -gt_1, iou_2, -gt_2, ...)
/// in detection order. Only pairs with IoU > 1/2 may be assigned.
inline std::vector<int> match(const std::vector<IBox>& dets, const std::vector<IBox>& gts) {
  const std::size_t nd = dets.size(), ng = gts.size();
  std::vector<int> cur(nd, -1), best;
  std::vector<char> used(ng, 0);
  auto better = [&](const std::vector<int>& a, const std::vector<int>& b) {
    for (std::size_t d = 0; d < nd; ++d) {
      const Overlap oa = a[d] >= 0 ? interval_overlap(dets[d], gts[a[d]]) : Overlap{0, 1};
      const Overlap ob = b[d] >= 0 ? interval_overlap(dets[d], gts[b[d]]) : Overlap{0, 1};
      if (oa.greater(ob)) return true;
      if (ob.greater(oa)) return false;
      const int ga = a[d] >= 0 ? a[d] : static_cast<int>(ng);
      const int gb = b[d] >= 0 ? b[d] : static_cast<int>(ng);
      if (ga != gb) return ga < gb;
    }
    return false;
  };
  std::function<void(std::size_t)> rec = [&](std::size_t d) {
    if (d == nd) {
      if (best.empty() && nd > 0) best = cur;
      else if (better(cur, best)) best = cur;
      return;
    }
    cur[d] = -1;
    rec(d + 1);
    for (std::size_t g = 0; g < ng; ++g) {
      if (used[g] || !interval_overlap(dets[d], gts[g]).above(1, 2)) continue;
      used[g] = 1;
      cur[d] = static_cast<int>(g);
      rec(d + 1);
      used[g] = 0;
      cur[d] = -1;
    }
  };
  rec(0);
  return best;
}

/// Direct nested-loop convolution of image 0.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride, int pad, int dil) {
  const int k = w.h();
  const int oh = (x.h() + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  const int ow = (x.w() + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  Tensor<T> y(x.n(), w.n(), oh, ow);
  for (int n = 0; n < x.n(); ++n) {
    for (int o = 0; o < w.n(); ++o) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias[o];
          for (int c = 0; c < x.c(); ++c) {
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride - pad + ky * dil;
                const int ix = ox * stride - pad + kx * dil;
                if (iy >= 0 && ix >= 0 && iy < x.h() && ix < x.w()) acc += double(x(n, c, iy, ix)) * w(o, c, ky, kx);
              }
            }
          }
          y(n, o, oy, ox) = static_cast<T>(acc);
        }
      }
    }
  }
  return y;
}

/// Transposed convolution (kernel 4, stride 2, crop 1) evaluated by
/// scattering every sample of the edge-replicated, one-pixel padded input.
template <class T>
Tensor<T> upsample2x(const Tensor<T>& x, const Tensor<T>& kernel) {
  Tensor<T> y(x.n(), x.c(), 2 * x.h(), 2 * x.w());
  std::vector<double> acc(y.size(), 0.0);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      for (int py = 0; py < x.h() + 2; ++py) {
        for (int px = 0; px < x.w() + 2; ++px) {
          const double v = x(n, c, std::clamp(py - 1, 0, x.h() - 1), std::clamp(px - 1, 0, x.w() - 1));
          for (int ky = 0; ky < 4; ++ky) {
            for (int kx = 0; kx < 4; ++kx) {
              const int oy = 2 * py + ky - 3;
              const int ox = 2 * px + kx - 3;
              if (oy < 0 || ox < 0 || oy >= y.h() || ox >= y.w()) continue;
              acc[y.index(n, c, oy, ox)] += v * kernel(c, 0, ky, kx);
            }
          }
        }
      }
    }
  }
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(acc[i]);
  return y;
}

}  // namespace mprcnn::oracle
