#pragma once

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mprcnn/binary_io.hpp"
#include "mprcnn/boxes.hpp"
#include "mprcnn/keyvalue.hpp"
#include "mprcnn/seeds.hpp"
#include "mprcnn/tensor.hpp"

namespace mprcnn {

inline constexpr int kPoolBins = 5;

/// Half-open cell range [x0, x1) x [y0, y1) of a feature map.
struct CellRegion {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  [[nodiscard]] bool empty() const { return x1 <= x0 || y1 <= y0; }
  bool operator==(const CellRegion&) const = default;
};

/// Cells touched by an image-space region on a map of the given stride:
/// floor of the near edge, ceil of the far edge, clipped to the map.
inline CellRegion cell_region(const Box& region, int stride, int map_w, int map_h) {
  const double s = stride;
  CellRegion c{static_cast<int>(std::floor(region.l / s)), static_cast<int>(std::floor(region.t / s)),
               static_cast<int>(std::ceil(region.r() / s)), static_cast<int>(std::ceil(region.b() / s))};
  c.x0 = std::clamp(c.x0, 0, map_w);
  c.x1 = std::clamp(c.x1, 0, map_w);
  c.y0 = std::clamp(c.y0, 0, map_h);
  c.y1 = std::clamp(c.y1, 0, map_h);
  return c;
}

/// Max-pools a cell region of image 0 of `map` into a bins x bins grid per
/// channel. Output layout is (channel, bin row, bin col). Bin i spans cells
/// [x0 + floor(i L / bins), x0 + ceil((i + 1) L / bins)); empty bins are 0.
template <class T>
std::vector<float> roi_pool(const Tensor<T>& map, const CellRegion& cells, int bins = kPoolBins) {
  if (cells.empty()) throw std::invalid_argument("roi_pool: empty region");
  if (cells.x0 < 0 || cells.y0 < 0 || cells.x1 > map.w() || cells.y1 > map.h()) {
    throw std::invalid_argument("roi_pool: region outside the feature map");
  }
  const int lw = cells.x1 - cells.x0;
  const int lh = cells.y1 - cells.y0;
  std::vector<float> out(static_cast<std::size_t>(map.c()) * bins * bins, 0.0f);
  for (int c = 0; c < map.c(); ++c) {
    const T* plane = map.plane(0, c);
    for (int by = 0; by < bins; ++by) {
      const int ys = cells.y0 + (by * lh) / bins;
      const int ye = cells.y0 + ((by + 1) * lh + bins - 1) / bins;
      for (int bx = 0; bx < bins; ++bx) {
        const int xs = cells.x0 + (bx * lw) / bins;
        const int xe = cells.x0 + ((bx + 1) * lw + bins - 1) / bins;
        if (ye <= ys || xe <= xs) continue;
        T m = std::numeric_limits<T>::lowest();
        for (int y = ys; y < ye; ++y) {
          for (int x = xs; x < xe; ++x) m = std::max(m, plane[static_cast<std::size_t>(y) * map.w() + x]);
        }
        out[(static_cast<std::size_t>(c) * bins + by) * bins + bx] = static_cast<float>(m);
      }
    }
  }
  return out;
}

template <class T>
std::vector<float> roi_pool(const Tensor<T>& map, const Box& region, int stride, int bins = kPoolBins) {
  return roi_pool(map, cell_region(region, stride, map.w(), map.h()), bins);
}

/// Pooled face and context descriptor of one proposal. `values` holds
/// [face@A, face@B, context@A, context@B], each channels x 5 x 5.
struct ProposalFeatures {
  std::vector<float> values;
  double rpn_score = 0.0;
  int label = -1;
};

/// Which part of the descriptor a forest consumes.
enum class FeatureView { FaceContext, Face, Context };

inline const char* view_name(FeatureView v) {
  switch (v) {
    case FeatureView::Face:
      return "face";
    case FeatureView::Context:
      return "context";
    default:
      return "face+context";
  }
}

inline FeatureView parse_view(const std::string& s) {
  if (s == "face") return FeatureView::Face;
  if (s == "context") return FeatureView::Context;
  if (s == "face+context" || s == "both") return FeatureView::FaceContext;
  throw std::invalid_argument("unknown feature view '" + s + "' (face, context, face+context)");
}

inline std::span<const float> view_of(std::span<const float> values, FeatureView v) {
  if (values.size() % 2 != 0) throw std::invalid_argument("descriptor length must be even");
  const std::size_t half = values.size() / 2;
  switch (v) {
    case FeatureView::Face:
      return values.subspan(0, half);
    case FeatureView::Context:
      return values.subspan(half);
    default:
      return values;
  }
}

struct ExtractResult {
  std::vector<ProposalFeatures> features;
  std::vector<std::size_t> kept;  // index into the input list for each feature row
  std::size_t dropped = 0;
};

/// Pools every proposal's face box and context box on two feature maps.
/// Boxes are in the coordinates of the network input; proposals that do not
/// intersect the img_w x img_h image are dropped and counted.
template <class T>
ExtractResult extract(std::span<const Box> proposals, const Tensor<T>& map_a, int stride_a, const Tensor<T>& map_b,
                      int stride_b, int img_w, int img_h) {
  ExtractResult res;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const Box& p = proposals[i];
    const Box face = clip_to_image(p, img_w, img_h);
    if (face.empty()) {
      ++res.dropped;
      continue;
    }
    const Box ctx = clip_to_image(context_region(p), img_w, img_h);
    ProposalFeatures f;
    f.rpn_score = p.score;
    for (const Box* region : {&face, &ctx}) {
      for (auto [map, stride] : {std::pair{&map_a, stride_a}, std::pair{&map_b, stride_b}}) {
        const auto pooled = roi_pool(*map, *region, stride);
        f.values.insert(f.values.end(), pooled.begin(), pooled.end());
      }
    }
    res.features.push_back(std::move(f));
    res.kept.push_back(i);
  }
  if (res.dropped > 0) spdlog::info("extract: dropped {} proposals outside the image", res.dropped);
  return res;
}

/// Row-major feature matrix with per-row RPN score and label.
struct FeatureSet {
  int cols = 0;
  std::vector<float> x;
  std::vector<float> rpn;
  std::vector<std::uint8_t> y;

  [[nodiscard]] std::size_t rows() const { return y.size(); }
  [[nodiscard]] std::span<const float> row(std::size_t i) const {
    return {x.data() + i * static_cast<std::size_t>(cols), static_cast<std::size_t>(cols)};
  }
  void add(std::span<const float> values, double rpn_score, int label) {
    if (cols == 0 && rows() == 0) cols = static_cast<int>(values.size());
    if (values.size() != static_cast<std::size_t>(cols)) {
      throw ShapeError("feature row length " + std::to_string(values.size()) + " != " + std::to_string(cols));
    }
    if (label != 0 && label != 1) throw std::invalid_argument("feature label must be 0 or 1");
    x.insert(x.end(), values.begin(), values.end());
    rpn.push_back(static_cast<float>(rpn_score));
    y.push_back(static_cast<std::uint8_t>(label));
  }
  [[nodiscard]] std::size_t count(int label) const {
    return static_cast<std::size_t>(std::count(y.begin(), y.end(), static_cast<std::uint8_t>(label)));
  }
  [[nodiscard]] FeatureSet subset(std::span<const std::size_t> idx, FeatureView view = FeatureView::FaceContext) const {
    FeatureSet out;
    for (std::size_t i : idx) out.add(view_of(row(i), view), rpn[i], y[i]);
    if (idx.empty()) out.cols = static_cast<int>(view_of(std::vector<float>(cols, 0.0f), view).size());
    return out;
  }
};

// Feature dump: float32 row-major matrix of [features..., rpn_score, label]
// with a text sidecar "<path>.hdr" giving rows, cols and label_column.
inline void save_feature_dump(const std::string& path, const FeatureSet& fs) {
  auto os = io::open_out(path);
  for (std::size_t i = 0; i < fs.rows(); ++i) {
    for (float v : fs.row(i)) io::put_f32(os, v);
    io::put_f32(os, fs.rpn[i]);
    io::put_f32(os, static_cast<float>(fs.y[i]));
  }
  KeyValues hdr;
  hdr.set("rows", std::to_string(fs.rows()));
  hdr.set("cols", std::to_string(fs.cols + 2));
  hdr.set("label_column", std::to_string(fs.cols + 1));
  hdr.save(path + ".hdr");
}

inline FeatureSet load_feature_dump(const std::string& path) {
  const KeyValues hdr = KeyValues::load(path + ".hdr");
  const auto rows = hdr.get<std::size_t>("rows", 0);
  const auto cols = hdr.get<int>("cols", 0);
  const auto label_col = hdr.get<int>("label_column", -1);
  if (cols < 3 || label_col != cols - 1) throw FormatError(path + ".hdr: expected label in the last column");
  auto is = io::open_in(path);
  FeatureSet fs;
  fs.cols = cols - 2;
  std::vector<float> row(static_cast<std::size_t>(fs.cols));
  for (std::size_t i = 0; i < rows; ++i) {
    for (auto& v : row) v = io::get_f32(is);
    const float rpn = io::get_f32(is);
    const float label = io::get_f32(is);
    if (label != 0.0f && label != 1.0f) throw FormatError(path + ": row " + std::to_string(i) + " has a bad label");
    fs.add(row, rpn, static_cast<int>(label));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": more data than the header declares");
  return fs;
}

/// Depth-bounded binary tree stored in preorder; the left child of node i is
/// node i + 1.
struct Tree {
  struct Node {
    std::int32_t feature = -1;  // -1 marks a leaf
    float threshold = 0.0f;     // go left when x[feature] <= threshold
    float value = 0.0f;         // leaf score
    std::int32_t right = -1;

    [[nodiscard]] bool leaf() const { return feature < 0; }
    bool operator==(const Node&) const = default;
  };
  std::vector<Node> nodes;

  [[nodiscard]] float eval(std::span<const float> x) const {
    std::size_t i = 0;
    while (!nodes[i].leaf()) {
      const Node& n = nodes[i];
      i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? i + 1 : static_cast<std::size_t>(n.right);
    }
    return nodes[i].value;
  }
  [[nodiscard]] int depth() const {
    int best = 0;
    std::vector<std::pair<std::size_t, int>> stack{{0, 0}};
    while (!stack.empty()) {
      auto [i, d] = stack.back();
      stack.pop_back();
      best = std::max(best, d);
      if (!nodes[i].leaf()) {
        stack.push_back({i + 1, d + 1});
        stack.push_back({static_cast<std::size_t>(nodes[i].right), d + 1});
      }
    }
    return best;
  }
  bool operator==(const Tree&) const = default;
};

struct CascadeStage {
  std::uint32_t trees = 0;
  std::uint32_t mined = 0;          // negatives added after this stage
  float max_mined_prob = 0.0f;      // highest probability among them
  bool operator==(const CascadeStage&) const = default;
};

/// Additive tree ensemble on top of an initial score derived from the RPN
/// probability. Probability is sigmoid(2F).
struct ForestModel {
  std::uint32_t feature_dim = 0;
  bool rpn_init = true;
  std::vector<Tree> trees;
  std::vector<CascadeStage> cascade_log;

  bool operator==(const ForestModel&) const = default;
};

inline constexpr double kRpnClamp = 1e-6;

/// Initial additive score: half the logit of the clamped RPN probability.
inline double initial_score(double rpn_score, bool rpn_init) {
  if (!rpn_init) return 0.0;
  const double p = std::clamp(rpn_score, kRpnClamp, 1.0 - kRpnClamp);
  return 0.5 * std::log(p / (1.0 - p));
}

inline double score_to_prob(double f) { return 1.0 / (1.0 + std::exp(-2.0 * f)); }

/// F0 plus the first `n_trees` tree scores (all trees by default).
inline double score(const ForestModel& m, std::span<const float> x, double rpn_score,
                    std::size_t n_trees = std::numeric_limits<std::size_t>::max()) {
  if (x.size() != m.feature_dim) {
    throw ShapeError("feature length " + std::to_string(x.size()) + " != model dimension " +
                     std::to_string(m.feature_dim));
  }
  double f = initial_score(rpn_score, m.rpn_init);
  const std::size_t n = std::min(n_trees, m.trees.size());
  for (std::size_t t = 0; t < n; ++t) f += m.trees[t].eval(x);
  return f;
}

inline double score_prob(const ForestModel& m, std::span<const float> x, double rpn_score) {
  return score_to_prob(score(m, x, rpn_score));
}

/// Logistic loss log(1 + exp(-2 y F)) with y in {-1, +1}.
inline double logistic_nll(double f, int label) {
  const double z = (label == 1 ? 2.0 : -2.0) * f;
  return z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

// ForestModel file: "MPBF", u32 version, u32 feature_dim, u8 rpn_init,
// u32 tree count, per tree u32 node count then preorder nodes
// (i32 feature, f32 threshold, u8 leaf flag, f32 value), then u32 stage
// count and per stage (u32 trees, u32 mined, f32 max mined probability).
inline constexpr std::uint32_t kForestVersion = 1;

inline void write_forest(std::ostream& os, const ForestModel& m) {
  io::put_bytes(os, "MPBF");
  io::put_u32(os, kForestVersion);
  io::put_u32(os, m.feature_dim);
  io::put_u8(os, m.rpn_init ? 1 : 0);
  io::put_u32(os, static_cast<std::uint32_t>(m.trees.size()));
  for (const Tree& t : m.trees) {
    io::put_u32(os, static_cast<std::uint32_t>(t.nodes.size()));
    for (const auto& n : t.nodes) {
      io::put_i32(os, n.feature);
      io::put_f32(os, n.threshold);
      io::put_u8(os, n.leaf() ? 1 : 0);
      io::put_f32(os, n.value);
    }
  }
  io::put_u32(os, static_cast<std::uint32_t>(m.cascade_log.size()));
  for (const auto& s : m.cascade_log) {
    io::put_u32(os, s.trees);
    io::put_u32(os, s.mined);
    io::put_f32(os, s.max_mined_prob);
  }
}

namespace bf_detail {

// Rebuilds right-child links of a preorder node list; returns one past the
// subtree rooted at i.
inline std::size_t link(std::vector<Tree::Node>& nodes, std::size_t i, int depth) {
  if (i >= nodes.size()) throw FormatError("forest tree is truncated");
  if (depth > 64) throw FormatError("forest tree is too deep");
  if (nodes[i].leaf()) return i + 1;
  const std::size_t r = link(nodes, i + 1, depth + 1);
  nodes[i].right = static_cast<std::int32_t>(r);
  return link(nodes, r, depth + 1);
}

}  // namespace bf_detail

inline ForestModel read_forest(std::istream& is) {
  io::expect_magic(is, "MPBF");
  const auto version = io::get_u32(is);
  if (version != kForestVersion) throw FormatError("unsupported forest version " + std::to_string(version));
  ForestModel m;
  m.feature_dim = io::get_u32(is);
  m.rpn_init = io::get_u8(is) != 0;
  const auto n_trees = io::get_u32(is);
  m.trees.resize(n_trees);
  for (auto& t : m.trees) {
    const auto n_nodes = io::get_u32(is);
    if (n_nodes == 0 || n_nodes > (1u << 20)) throw FormatError("bad forest node count");
    t.nodes.resize(n_nodes);
    for (auto& n : t.nodes) {
      n.feature = io::get_i32(is);
      n.threshold = io::get_f32(is);
      const bool leaf = io::get_u8(is) != 0;
      n.value = io::get_f32(is);
      if (leaf != (n.feature < 0)) throw FormatError("forest node leaf flag disagrees with its feature index");
      if (!leaf && static_cast<std::uint32_t>(n.feature) >= m.feature_dim) {
        throw FormatError("forest node splits on feature " + std::to_string(n.feature) + " beyond dimension");
      }
    }
    if (bf_detail::link(t.nodes, 0, 0) != t.nodes.size()) throw FormatError("forest tree has trailing nodes");
  }
  const auto n_stages = io::get_u32(is);
  if (n_stages > 1024) throw FormatError("bad cascade stage count");
  m.cascade_log.resize(n_stages);
  for (auto& s : m.cascade_log) {
    s.trees = io::get_u32(is);
    s.mined = io::get_u32(is);
    s.max_mined_prob = io::get_f32(is);
  }
  return m;
}

inline void save_forest(const std::string& path, const ForestModel& m) {
  auto os = io::open_out(path);
  write_forest(os, m);
}

inline ForestModel load_forest(const std::string& path) {
  auto is = io::open_in(path);
  return read_forest(is);
}

struct ForestConfig {
  std::vector<int> stage_trees{64, 128, 256, 512, 1024, 1536};
  int final_trees = 2048;
  int divisor = 8;        // desk-scale reduction of tree counts and mining quota
  int max_depth = 5;
  int mine_per_stage = 10000;
  double feature_fraction = 1.0 / 16.0;  // candidate features per node
  double smoothing = 0.1;                // leaf smoothing, in units of the mean sample weight
  double shrinkage = 0.05;               // multiplier on every leaf score
  double max_leaf = 1.0;                 // leaf scores are clamped to +-max_leaf
  bool rpn_init = true;
  std::uint64_t seed = 1;

  [[nodiscard]] static int divided(int v, int divisor) { return std::max(1, v / std::max(1, divisor)); }
  [[nodiscard]] std::vector<int> schedule() const {
    std::vector<int> s;
    for (int t : stage_trees) s.push_back(divided(t, divisor));
    return s;
  }
  [[nodiscard]] int final_size() const { return divided(final_trees, divisor); }
  [[nodiscard]] int mine_quota() const { return divided(mine_per_stage, divisor); }
};

struct ForestTraining {
  ForestModel model;
  // Training-set loss before the first tree and after each tree, per stage
  // (the last entry is the final forest).
  std::vector<std::vector<double>> nll;
};

namespace bf_detail {

/// Training rows of one stage with features quantized to at most 256 bins.
struct Binned {
  std::size_t n = 0;
  int cols = 0;
  std::vector<std::vector<float>> cuts;  // per feature, ascending
  std::vector<std::uint8_t> bins;        // feature-major: bins[f * n + i]

  Binned(const std::vector<std::span<const float>>& rows, int cols_) : n(rows.size()), cols(cols_) {
    cuts.resize(static_cast<std::size_t>(cols));
    bins.resize(n * static_cast<std::size_t>(cols));
    const std::size_t stride = std::max<std::size_t>(1, n / 4096);
    std::vector<float> vals;
    for (int f = 0; f < cols; ++f) {
      vals.clear();
      for (std::size_t i = 0; i < n; i += stride) vals.push_back(rows[i][static_cast<std::size_t>(f)]);
      std::sort(vals.begin(), vals.end());
      vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
      auto& c = cuts[static_cast<std::size_t>(f)];
      if (vals.size() <= 256) {
        c.assign(vals.begin(), vals.end() - (vals.empty() ? 0 : 1));
      } else {
        for (std::size_t k = 1; k < 256; ++k) c.push_back(vals[k * vals.size() / 256]);
        c.erase(std::unique(c.begin(), c.end()), c.end());
      }
      std::uint8_t* col = bins.data() + static_cast<std::size_t>(f) * n;
      for (std::size_t i = 0; i < n; ++i) {
        col[i] = static_cast<std::uint8_t>(std::lower_bound(c.begin(), c.end(), rows[i][static_cast<std::size_t>(f)]) -
                                           c.begin());
      }
    }
  }
};

struct Split {
  int feature = -1;
  int cut = -1;
  double z = std::numeric_limits<double>::infinity();
};

class TreeBuilder {
 public:
  TreeBuilder(const Binned& data, std::span<const int> labels, std::span<const double> weights,
              const ForestConfig& cfg, std::mt19937_64& rng)
      : data_(data), y_(labels), w_(weights), cfg_(cfg), rng_(rng) {
    perm_.resize(static_cast<std::size_t>(data.cols));
    std::iota(perm_.begin(), perm_.end(), 0);
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    eps_ = cfg.smoothing * total / static_cast<double>(std::max<std::size_t>(1, data.n));
  }

  /// Grows a tree; `leaf_of` receives each sample's leaf node index.
  Tree build(std::vector<std::int32_t>& leaf_of) {
    Tree t;
    std::vector<std::uint32_t> idx(data_.n);
    std::iota(idx.begin(), idx.end(), 0u);
    leaf_of.assign(data_.n, -1);
    grow(t, idx, 0, leaf_of);
    return t;
  }

 private:
  void grow(Tree& t, std::vector<std::uint32_t>& idx, int depth, std::vector<std::int32_t>& leaf_of) {
    double wp = 0.0, wn = 0.0;
    for (auto i : idx) (y_[i] == 1 ? wp : wn) += w_[i];
    const auto self = static_cast<std::int32_t>(t.nodes.size());
    t.nodes.emplace_back();
    Split best;
    if (depth < cfg_.max_depth && wp > 0.0 && wn > 0.0 && idx.size() >= 2) best = find_split(idx);
    const double parent_z = 2.0 * std::sqrt(wp * wn);
    if (best.feature < 0 || !(best.z < parent_z * (1.0 - 1e-12))) {
      const double v = std::clamp(0.5 * std::log((wp + eps_) / (wn + eps_)), -cfg_.max_leaf, cfg_.max_leaf);
      t.nodes[static_cast<std::size_t>(self)].value = static_cast<float>(cfg_.shrinkage * v);
      for (auto i : idx) leaf_of[i] = self;
      return;
    }
    const auto& c = data_.cuts[static_cast<std::size_t>(best.feature)];
    t.nodes[static_cast<std::size_t>(self)].feature = best.feature;
    t.nodes[static_cast<std::size_t>(self)].threshold = c[static_cast<std::size_t>(best.cut)];
    const std::uint8_t* col = data_.bins.data() + static_cast<std::size_t>(best.feature) * data_.n;
    std::vector<std::uint32_t> left, right;
    for (auto i : idx) (col[i] <= best.cut ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    grow(t, left, depth + 1, leaf_of);
    t.nodes[static_cast<std::size_t>(self)].right = static_cast<std::int32_t>(t.nodes.size());
    grow(t, right, depth + 1, leaf_of);
  }

  Split find_split(const std::vector<std::uint32_t>& idx) {
    const int cols = data_.cols;
    const int k = std::clamp(static_cast<int>(std::lround(cols * cfg_.feature_fraction)), 1, cols);
    for (int j = 0; j < k; ++j) {
      std::uniform_int_distribution<int> pick(j, cols - 1);
      std::swap(perm_[static_cast<std::size_t>(j)], perm_[static_cast<std::size_t>(pick(rng_))]);
    }
    std::vector<int> feats(perm_.begin(), perm_.begin() + k);
    std::sort(feats.begin(), feats.end());
    Split best;
    std::array<double, 256> hp{}, hn{};
    std::array<std::uint32_t, 256> hc{};
    for (int f : feats) {
      const auto ncut = static_cast<int>(data_.cuts[static_cast<std::size_t>(f)].size());
      if (ncut == 0) continue;
      hp.fill(0.0);
      hn.fill(0.0);
      hc.fill(0);
      const std::uint8_t* col = data_.bins.data() + static_cast<std::size_t>(f) * data_.n;
      double tp = 0.0, tn = 0.0;
      for (auto i : idx) {
        const std::uint8_t b = col[i];
        (y_[i] == 1 ? hp[b] : hn[b]) += w_[i];
        ++hc[b];
      }
      for (int b = 0; b <= ncut; ++b) {
        tp += hp[static_cast<std::size_t>(b)];
        tn += hn[static_cast<std::size_t>(b)];
      }
      double lp = 0.0, ln = 0.0;
      std::size_t lc = 0;
      for (int cut = 0; cut < ncut; ++cut) {
        lp += hp[static_cast<std::size_t>(cut)];
        ln += hn[static_cast<std::size_t>(cut)];
        lc += hc[static_cast<std::size_t>(cut)];
        if (lc == 0 || lc == idx.size()) continue;
        const double z = 2.0 * (std::sqrt(lp * ln) + std::sqrt((tp - lp) * std::max(0.0, tn - ln)));
        if (z < best.z) best = {f, cut, z};
      }
    }
    return best;
  }

  const Binned& data_;
  std::span<const int> y_;
  std::span<const double> w_;
  const ForestConfig& cfg_;
  std::mt19937_64& rng_;
  std::vector<int> perm_;
  double eps_ = 0.0;
};

inline double total_nll(std::span<const double> f, std::span<const int> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) s += logistic_nll(f[i], y[i]);
  return s;
}

/// Halves each leaf's value until the loss of the samples in that leaf does
/// not increase, so every added tree is a descent step on the logistic loss.
inline void safeguard_leaves(Tree& t, const std::vector<std::int32_t>& leaf_of, std::span<const double> f,
                             std::span<const int> y) {
  std::vector<std::vector<std::uint32_t>> members(t.nodes.size());
  for (std::size_t i = 0; i < leaf_of.size(); ++i) members[static_cast<std::size_t>(leaf_of[i])].push_back(
      static_cast<std::uint32_t>(i));
  for (std::size_t n = 0; n < t.nodes.size(); ++n) {
    if (!t.nodes[n].leaf()) continue;
    const auto& m = members[n];
    auto loss = [&](float v) {
      double s = 0.0;
      for (auto i : m) s += logistic_nll(f[i] + static_cast<double>(v), y[i]);
      return s;
    };
    const double base = loss(0.0f);
    float v = t.nodes[n].value;
    int tries = 0;
    while (v != 0.0f && loss(v) > base) {
      v = ++tries >= 60 ? 0.0f : v * 0.5f;
    }
    t.nodes[n].value = v;
  }
}

/// Trains one forest of `n_trees` trees on the given rows.
inline void fit_forest(const std::vector<std::span<const float>>& rows, std::span<const int> y,
                       std::span<const double> f0, int n_trees, const ForestConfig& cfg, std::uint64_t seed,
                       std::vector<Tree>& trees, std::vector<double>& nll) {
  const Binned data(rows, static_cast<int>(rows.empty() ? 0 : rows[0].size()));
  std::vector<double> f(f0.begin(), f0.end());
  std::vector<double> w(f.size());
  std::vector<std::int32_t> leaf_of;
  nll.push_back(total_nll(f, y));
  for (int k = 0; k < n_trees; ++k) {
    for (std::size_t i = 0; i < f.size(); ++i) w[i] = std::exp(-(y[i] == 1 ? 1.0 : -1.0) * f[i]);
    const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
    for (auto& v : w) v /= wsum;
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    TreeBuilder builder(data, y, w, cfg, rng);
    Tree t = builder.build(leaf_of);
    safeguard_leaves(t, leaf_of, f, y);
    std::vector<double> next(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) next[i] = f[i] + t.eval(rows[i]);
    double loss = total_nll(next, y);
    if (loss > nll.back()) {
      // Rounding across leaves can still tip the sum; a zero tree keeps it exact.
      for (auto& n : t.nodes) n.value = 0.0f;
      for (std::size_t i = 0; i < f.size(); ++i) next[i] = f[i] + t.eval(rows[i]);
      loss = total_nll(next, y);
    }
    f.swap(next);
    nll.push_back(loss);
    trees.push_back(std::move(t));
  }
}

}  // namespace bf_detail

/// Cascade training: each stage trains a fresh forest of the scheduled size
/// on the current set, then moves the highest-scoring negatives of the
/// mining pool into the set. A final forest is trained on the last set.
inline ForestTraining train_forest(const FeatureSet& initial, const FeatureSet& pool, const ForestConfig& cfg) {
  if (initial.cols <= 0) throw std::invalid_argument("train_forest: empty feature dimension");
  if (pool.rows() > 0 && pool.cols != initial.cols) throw ShapeError("mining pool has a different feature length");
  if (cfg.divisor < 1) throw std::invalid_argument("forest schedule divisor must be >= 1");
  const std::size_t n_pos = initial.count(1);
  const std::size_t n_neg = initial.count(0);
  if (n_pos == 0 || n_neg == 0) {
    throw std::invalid_argument("train_forest: need both classes, got " + std::to_string(n_pos) + " positives and " +
                                std::to_string(n_neg) + " negatives");
  }

  std::vector<std::span<const float>> rows;
  std::vector<int> y;
  std::vector<double> f0;
  for (std::size_t i = 0; i < initial.rows(); ++i) {
    rows.push_back(initial.row(i));
    y.push_back(initial.y[i]);
    f0.push_back(initial_score(initial.rpn[i], cfg.rpn_init));
  }
  std::vector<std::size_t> remaining;
  for (std::size_t i = 0; i < pool.rows(); ++i) {
    if (pool.y[i] == 0) remaining.push_back(i);
  }

  ForestTraining out;
  out.model.feature_dim = static_cast<std::uint32_t>(initial.cols);
  out.model.rpn_init = cfg.rpn_init;
  const auto schedule = cfg.schedule();
  for (std::size_t s = 0; s <= schedule.size(); ++s) {
    const bool final_stage = s == schedule.size();
    const int n_trees = final_stage ? cfg.final_size() : schedule[s];
    ForestModel stage;
    stage.feature_dim = out.model.feature_dim;
    stage.rpn_init = cfg.rpn_init;
    out.nll.emplace_back();
    bf_detail::fit_forest(rows, y, f0, n_trees, cfg, derive_seed(cfg.seed, s), stage.trees, out.nll.back());
    CascadeStage log{static_cast<std::uint32_t>(n_trees), 0, 0.0f};
    if (!final_stage && !remaining.empty()) {
      std::vector<std::pair<double, std::size_t>> scored;
      scored.reserve(remaining.size());
      for (std::size_t i : remaining) scored.push_back({score_prob(stage, pool.row(i), pool.rpn[i]), i});
      const std::size_t take = std::min(scored.size(), static_cast<std::size_t>(cfg.mine_quota()));
      std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(),
                        [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
      std::vector<char> taken(pool.rows(), 0);
      for (std::size_t k = 0; k < take; ++k) {
        const std::size_t i = scored[k].second;
        taken[i] = 1;
        rows.push_back(pool.row(i));
        y.push_back(0);
        f0.push_back(initial_score(pool.rpn[i], cfg.rpn_init));
      }
      log.mined = static_cast<std::uint32_t>(take);
      log.max_mined_prob = take > 0 ? static_cast<float>(scored[0].first) : 0.0f;
      std::erase_if(remaining, [&](std::size_t i) { return taken[i] != 0; });
    }
    out.model.cascade_log.push_back(log);
    spdlog::debug("forest stage {}: {} trees, {} rows, {} mined", s, n_trees, rows.size(), log.mined);
    if (final_stage) out.model.trees = std::move(stage.trees);
  }
  return out;
}

}  // namespace mprcnn
