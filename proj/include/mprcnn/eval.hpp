#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mprcnn/anchors.hpp"
#include "mprcnn/binary_io.hpp"
#include "mprcnn/boxes.hpp"
#include "mprcnn/keyvalue.hpp"

namespace mprcnn {

struct Detection {
  std::string image_id;
  Box box;
  double score = 0.0;
  int branch = -1;  // producing branch, or -1 when unknown

  bool operator==(const Detection&) const = default;
};

struct MatchResult {
  std::vector<char> tp;
  std::vector<int> matched_gt;  // -1 for false positives
  std::size_t fn = 0;
};

/// Greedy one-to-one matching. Detections must be sorted by descending
/// score; each takes the unconsumed ground truth of highest IoU (lower index
/// on ties) when that IoU exceeds `iou_threshold`.
inline MatchResult match(std::span<const Detection> dets, std::span<const Box> gts, double iou_threshold = 0.5) {
  for (std::size_t i = 1; i < dets.size(); ++i) {
    if (dets[i].score > dets[i - 1].score) throw std::invalid_argument("match: detections not sorted by score");
  }
  MatchResult r;
  r.tp.assign(dets.size(), 0);
  r.matched_gt.assign(dets.size(), -1);
  std::vector<char> used(gts.size(), 0);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    if (dets[d].box.empty()) continue;
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double v = iou(dets[d].box, gts[g]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = 1;
      r.tp[d] = 1;
      r.matched_gt[d] = best;
    }
  }
  r.fn = static_cast<std::size_t>(std::count(used.begin(), used.end(), 0));
  return r;
}

/// Detections and ground truth of one image.
struct EvalImage {
  std::string id;
  std::vector<Detection> dets;
  std::vector<Box> gts;
};

struct HeightBin {
  double lo;
  double hi;
  bool lo_inclusive;
  std::string name;

  [[nodiscard]] bool contains(double h) const { return (lo_inclusive ? h >= lo : h > lo) && h <= hi; }
};

inline std::vector<HeightBin> default_height_bins() {
  return {{8, 32, true, "small"}, {32, 360, false, "medium"}, {360, 900, false, "large"}};
}

struct BinRecall {
  std::string name;
  std::size_t gts = 0;
  std::size_t matched = 0;
  [[nodiscard]] std::optional<double> recall() const {
    if (gts == 0) return std::nullopt;
    return static_cast<double>(matched) / static_cast<double>(gts);
  }
};

struct ScaleRecall {
  std::vector<BinRecall> bins;
  BinRecall all{"all"};
};

struct EvalReport {
  std::vector<std::pair<double, double>> pr_points;  // (recall, precision)
  double ap = 0.0;
  ScaleRecall recall;
  double score_threshold = 0.5;
  std::size_t tp = 0, fp = 0, fn = 0;  // at score_threshold
};

namespace eval_detail {

inline std::vector<Detection> sorted(std::vector<Detection> dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return dets;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace eval_detail

/// PR curve over every distinct score threshold and all-points average
/// precision (area under the precision envelope).
inline std::pair<std::vector<std::pair<double, double>>, double> pr_and_ap(std::span<const EvalImage> images) {
  std::size_t n_gt = 0;
  std::vector<std::pair<double, char>> all;
  for (const auto& im : images) {
    n_gt += im.gts.size();
    const auto dets = eval_detail::sorted(im.dets);
    const auto m = match(dets, im.gts);
    for (std::size_t i = 0; i < dets.size(); ++i) all.push_back({dets[i].score, m.tp[i]});
  }
  if (n_gt == 0) throw std::invalid_argument("pr_and_ap: no ground-truth boxes");
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::pair<double, double>> pts;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    tp += all[i].second ? 1 : 0;
    if (i + 1 < all.size() && all[i + 1].first == all[i].first) continue;
    pts.push_back({static_cast<double>(tp) / static_cast<double>(n_gt), static_cast<double>(tp) / (i + 1.0)});
  }
  std::vector<double> env(pts.size());
  double best = 0.0;
  for (std::size_t k = pts.size(); k-- > 0;) {
    best = std::max(best, pts[k].second);
    env[k] = best;
  }
  double ap = 0.0;
  double prev_r = 0.0;
  for (std::size_t k = 0; k < pts.size(); ++k) {
    ap += (pts[k].first - prev_r) * env[k];
    prev_r = pts[k].first;
  }
  return {pts, ap};
}

/// Recall per ground-truth height bin using detections scoring at least
/// `score_threshold`. With `branch` set, only that branch's detections count.
inline ScaleRecall recall_by_scale(std::span<const EvalImage> images, double score_threshold = 0.5,
                                   const std::vector<HeightBin>& bins = default_height_bins(),
                                   std::optional<int> branch = std::nullopt) {
  ScaleRecall out;
  for (const auto& b : bins) out.bins.push_back({b.name});
  for (const auto& im : images) {
    std::vector<Detection> kept;
    for (const auto& d : im.dets) {
      if (d.score >= score_threshold && (!branch || d.branch == *branch)) kept.push_back(d);
    }
    const auto m = match(eval_detail::sorted(std::move(kept)), im.gts);
    std::vector<char> hit(im.gts.size(), 0);
    for (int g : m.matched_gt) {
      if (g >= 0) hit[static_cast<std::size_t>(g)] = 1;
    }
    for (std::size_t g = 0; g < im.gts.size(); ++g) {
      ++out.all.gts;
      out.all.matched += hit[g] ? 1 : 0;
      for (std::size_t b = 0; b < bins.size(); ++b) {
        if (bins[b].contains(im.gts[g].h)) {
          ++out.bins[b].gts;
          out.bins[b].matched += hit[g] ? 1 : 0;
        }
      }
    }
  }
  return out;
}

inline EvalReport evaluate(std::span<const EvalImage> images, double score_threshold = 0.5) {
  EvalReport r;
  r.score_threshold = score_threshold;
  std::tie(r.pr_points, r.ap) = pr_and_ap(images);
  r.recall = recall_by_scale(images, score_threshold);
  for (const auto& im : images) {
    std::vector<Detection> kept;
    for (const auto& d : im.dets) {
      if (d.score >= score_threshold) kept.push_back(d);
    }
    const auto m = match(eval_detail::sorted(std::move(kept)), im.gts);
    const auto tp = static_cast<std::size_t>(std::count(m.tp.begin(), m.tp.end(), 1));
    r.tp += tp;
    r.fp += m.tp.size() - tp;
    r.fn += m.fn;
  }
  return r;
}

inline std::string recall_cell(const BinRecall& b) {
  const auto r = b.recall();
  return r ? eval_detail::fmt(*r) : "NA";
}

inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "metric,value\n";
  os << "ap," << eval_detail::fmt(r.ap) << "\n";
  os << "score_threshold," << eval_detail::fmt(r.score_threshold) << "\n";
  os << "tp," << r.tp << "\nfp," << r.fp << "\nfn," << r.fn << "\n";
  for (const auto& b : r.recall.bins) os << "recall_" << b.name << "," << recall_cell(b) << "\n";
  os << "recall_all," << recall_cell(r.recall.all) << "\n";
  return os.str();
}

inline std::string pr_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "recall,precision\n";
  for (const auto& [rc, pr] : r.pr_points) os << eval_detail::fmt(rc) << "," << eval_detail::fmt(pr) << "\n";
  return os.str();
}

/// Precision-recall curves as a standalone SVG.
inline std::string pr_svg(const std::vector<std::pair<std::string, EvalReport>>& curves) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};
  const int w = 480, h = 400, m = 50;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<rect x=\"" << m << "\" y=\"" << m / 2 << "\" width=\"" << w - 1.5 * m << "\" height=\"" << h - 1.5 * m
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\">Recall</text>\n";
  os << "<text x=\"14\" y=\"" << h / 2 << "\" transform=\"rotate(-90 14 " << h / 2
     << ")\" text-anchor=\"middle\">Precision</text>\n";
  const double pw = w - 1.5 * m, ph = h - 1.5 * m;
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const auto& [name, rep] = curves[c];
    const char* col = colors[c % 6];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [rc, pr] : rep.pr_points) os << eval_detail::fmt(m + rc * pw) << "," << eval_detail::fmt(m / 2.0 + (1.0 - pr) * ph) << " ";
    os << "\"/>\n";
    os << "<text x=\"" << m + 10 << "\" y=\"" << h - 0.5 * m - 20 - 16.0 * static_cast<double>(curves.size() - 1 - c)
       << "\" fill=\"" << col << "\">" << name << " (" << eval_detail::fmt(rep.ap).substr(0, 5) << ")</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// Detections file: one "image_id left top width height score" line per
// detection; an optional seventh column names the producing branch.
inline void write_detections(std::ostream& os, std::span<const Detection> dets, bool with_branch = false) {
  for (const auto& d : dets) {
    os << d.image_id << " " << format_exact(d.box.l) << " " << format_exact(d.box.t) << " " << format_exact(d.box.w)
       << " " << format_exact(d.box.h) << " " << format_exact(d.score);
    if (with_branch && d.branch >= 0) os << " " << branch_name(static_cast<Branch>(d.branch));
    os << "\n";
  }
}

inline std::vector<Detection> read_detections(std::istream& is, const std::string& origin = "<stream>") {
  std::vector<Detection> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Detection d;
    std::string branch, extra;
    if (!(ls >> d.image_id >> d.box.l >> d.box.t >> d.box.w >> d.box.h >> d.score)) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": expected 'image_id left top width height score'");
    }
    if (ls >> branch) {
      bool found = false;
      for (Branch b : kBranches) {
        if (branch == branch_name(b)) {
          d.branch = static_cast<int>(b);
          found = true;
        }
      }
      if (!found || (ls >> extra)) throw FormatError(origin + ":" + std::to_string(lineno) + ": unexpected trailing text");
    }
    d.box.score = d.score;
    out.push_back(std::move(d));
  }
  return out;
}

inline void save_detections(const std::string& path, std::span<const Detection> dets, bool with_branch = false) {
  auto os = io::open_out(path, std::ios::out);
  write_detections(os, dets, with_branch);
}

inline std::vector<Detection> load_detections(const std::string& path) {
  auto is = io::open_in(path, std::ios::in);
  return read_detections(is, path);
}

/// Groups detections under the images they belong to, keeping image order.
inline std::vector<EvalImage> group_by_image(std::span<const Detection> dets,
                                             const std::vector<std::pair<std::string, std::vector<Box>>>& gts) {
  std::vector<EvalImage> out;
  std::map<std::string, std::size_t> at;
  for (const auto& [id, boxes] : gts) {
    at[id] = out.size();
    out.push_back({id, {}, boxes});
  }
  for (const auto& d : dets) {
    auto it = at.find(d.image_id);
    if (it == at.end()) throw FormatError("detection refers to unknown image '" + d.image_id + "'");
    out[it->second].dets.push_back(d);
  }
  return out;
}

}  // namespace mprcnn
