#pragma once

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mprcnn/boxes.hpp"
#include "mprcnn/layers.hpp"

namespace mprcnn {

inline constexpr double kProbFloor = 1e-12;

/// -log p(true class), with the probability floored at kProbFloor.
[[nodiscard]] inline double cross_entropy(std::pair<double, double> probs, int label) {
  const double p = label == 1 ? probs.second : probs.first;
  return -std::log(std::max(p, kProbFloor));
}

[[nodiscard]] inline double smooth_l1_scalar(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

[[nodiscard]] inline double smooth_l1_grad(double x) {
  if (std::abs(x) < 1.0) return x;
  return x > 0.0 ? 1.0 : -1.0;
}

[[nodiscard]] inline double smooth_l1(const RegressionTarget& pred, const RegressionTarget& gt) {
  return smooth_l1_scalar(pred.bx - gt.bx) + smooth_l1_scalar(pred.by - gt.by) + smooth_l1_scalar(pred.bw - gt.bw) +
         smooth_l1_scalar(pred.bh - gt.bh);
}

/// Per-sample inputs of one branch. Regression entries are read only where
/// label == 1.
struct BranchLossInput {
  std::vector<std::pair<double, double>> probs;
  std::vector<int> labels;
  std::vector<RegressionTarget> pred_targets;
  std::vector<RegressionTarget> gt_targets;
  std::vector<bool> selected;

  void check() const {
    const std::size_t n = labels.size();
    if (probs.size() != n || pred_targets.size() != n || gt_targets.size() != n || selected.size() != n) {
      throw std::invalid_argument("BranchLossInput: arrays must have equal length");
    }
  }
};

/// (1/N) * sum over selected samples of [CE + lambda * [label == 1] * smoothL1],
/// N being the number of selected samples. An empty selection contributes 0.
[[nodiscard]] inline double branch_loss(const BranchLossInput& in, double lambda) {
  in.check();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < in.labels.size(); ++i) {
    if (!in.selected[i]) continue;
    ++count;
    total += cross_entropy(in.probs[i], in.labels[i]);
    if (in.labels[i] == 1) total += lambda * smooth_l1(in.pred_targets[i], in.gt_targets[i]);
  }
  if (count == 0) {
    spdlog::warn("branch_loss: empty selection, branch contributes 0");
    return 0.0;
  }
  return total / static_cast<double>(count);
}

/// Weighted sum of the three branch losses.
[[nodiscard]] inline double total_loss(std::span<const double, 3> branch_losses, std::span<const double, 3> alphas) {
  double s = 0.0;
  for (std::size_t m = 0; m < 3; ++m) s += alphas[m] * branch_losses[m];
  return s;
}

/// Loss value and gradients with respect to raw logits and predicted targets.
struct BranchLossGrad {
  double loss = 0.0;
  std::size_t selected = 0;
  std::vector<std::array<double, 2>> dlogits;
  std::vector<std::array<double, 4>> dreg;
};

/// Same objective as branch_loss, taking logit pairs so the softmax is part
/// of the differentiated function. `scale` multiplies loss and gradients
/// (the branch weight alpha).
[[nodiscard]] inline BranchLossGrad branch_loss_with_grad(std::span<const std::array<double, 2>> logits,
                                                         std::span<const int> labels,
                                                         std::span<const RegressionTarget> pred,
                                                         std::span<const RegressionTarget> gt,
                                                         std::span<const char> selected, double lambda,
                                                         double scale = 1.0) {
  const std::size_t n = labels.size();
  if (logits.size() != n || pred.size() != n || gt.size() != n || selected.size() != n) {
    throw std::invalid_argument("branch_loss_with_grad: arrays must have equal length");
  }
  BranchLossGrad out;
  out.dlogits.assign(n, {0.0, 0.0});
  out.dreg.assign(n, {0.0, 0.0, 0.0, 0.0});
  for (std::size_t i = 0; i < n; ++i) out.selected += selected[i] != 0;
  if (out.selected == 0) {
    spdlog::warn("branch_loss: empty selection, branch contributes 0");
    return out;
  }
  const double inv = scale / static_cast<double>(out.selected);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!selected[i]) continue;
    const auto [p0, p1] = softmax_pair(logits[i][0], logits[i][1]);
    total += cross_entropy({p0, p1}, labels[i]);
    out.dlogits[i][0] = inv * (p0 - (labels[i] == 0 ? 1.0 : 0.0));
    out.dlogits[i][1] = inv * (p1 - (labels[i] == 1 ? 1.0 : 0.0));
    if (labels[i] == 1 && lambda != 0.0) {
      const std::array<double, 4> d{pred[i].bx - gt[i].bx, pred[i].by - gt[i].by, pred[i].bw - gt[i].bw,
                                    pred[i].bh - gt[i].bh};
      for (int k = 0; k < 4; ++k) {
        total += lambda * smooth_l1_scalar(d[k]);
        out.dreg[i][k] = inv * lambda * smooth_l1_grad(d[k]);
      }
    }
  }
  out.loss = scale * total / static_cast<double>(out.selected);
  return out;
}

}  // namespace mprcnn
