#pragma once

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mprcnn/eval.hpp"
#include "mprcnn/keyvalue.hpp"
#include "mprcnn/mp_rpn.hpp"
#include "mprcnn/roi_bf.hpp"
#include "mprcnn/seeds.hpp"
#include "mprcnn/synth.hpp"

namespace mprcnn {

inline constexpr const char* kVersion = "0.1.0";

/// Settings shared by every pipeline stage.
struct RunConfig {
  int image_size = 160;  // shorter edge after resizing
  RpnConfig rpn;
  TrainConfig train;
  ProposalConfig proposal;
  ForestConfig forest;
  bool atrous_conv4 = true;    // stride-8 stage-2 map computed with dilation 2
  double bf_pos_iou = 0.7;     // proposal labels for forest training
  double bf_neg_iou = 0.5;
  int bf_neg_per_image = 24;   // negatives kept per training image
  int bf_initial_neg_ratio = 3;
  FeatureView view = FeatureView::FaceContext;
  double score_threshold = 0.5;  // for recall and counts
  int log_every = 50;
  std::uint64_t seed = 1;

  /// Propagates the master seed into every component.
  void apply_seed(std::uint64_t s) {
    seed = s;
    rpn.seed = derive_seed(s, 1);
    train.seed = derive_seed(s, 2);
    forest.seed = derive_seed(s, 3);
  }

  [[nodiscard]] KeyValues to_kv() const {
    KeyValues kv;
    auto d = [](double v) { return format_exact(v); };
    kv.set("image_size", std::to_string(image_size));
    kv.set("trunk.stem", std::to_string(rpn.trunk.stem));
    std::string widths;
    for (int i = 0; i < 4; ++i) widths += (i ? "," : "") + std::to_string(rpn.trunk.widths[i]);
    kv.set("trunk.widths", widths);
    kv.set("rpn.atrous", rpn.atrous ? "true" : "false");
    kv.set("rpn.seed", std::to_string(rpn.seed));
    kv.set("train.steps", std::to_string(train.steps));
    kv.set("train.lr", d(train.lr));
    kv.set("train.lr_decay", d(train.lr_decay));
    kv.set("train.decay_fraction", d(train.decay_fraction));
    kv.set("train.momentum", d(train.momentum));
    kv.set("train.weight_decay", d(train.weight_decay));
    kv.set("train.alphas", d(train.alphas[0]) + "," + d(train.alphas[1]) + "," + d(train.alphas[2]));
    kv.set("train.lambda", d(train.lambda));
    kv.set("train.ohem", train.ohem ? "true" : "false");
    kv.set("train.ohem_batch", std::to_string(train.ohem_batch));
    kv.set("train.seed", std::to_string(train.seed));
    kv.set("proposal.branch_nms", d(proposal.branch_nms));
    kv.set("proposal.merge_nms", d(proposal.merge_nms));
    kv.set("proposal.top_k", std::to_string(proposal.top_k[0]) + "," + std::to_string(proposal.top_k[1]) + "," +
                                 std::to_string(proposal.top_k[2]));
    kv.set("forest.divisor", std::to_string(forest.divisor));
    kv.set("forest.depth", std::to_string(forest.max_depth));
    kv.set("forest.mine_per_stage", std::to_string(forest.mine_per_stage));
    kv.set("forest.feature_fraction", d(forest.feature_fraction));
    kv.set("forest.shrinkage", d(forest.shrinkage));
    kv.set("forest.max_leaf", d(forest.max_leaf));
    kv.set("forest.smoothing", d(forest.smoothing));
    kv.set("bf.pos_iou", d(bf_pos_iou));
    kv.set("bf.neg_iou", d(bf_neg_iou));
    kv.set("bf.neg_per_image", std::to_string(bf_neg_per_image));
    kv.set("bf.initial_neg_ratio", std::to_string(bf_initial_neg_ratio));
    kv.set("forest.rpn_init", forest.rpn_init ? "true" : "false");
    kv.set("forest.seed", std::to_string(forest.seed));
    kv.set("stage2.atrous_conv4", atrous_conv4 ? "true" : "false");
    kv.set("bf.view", view_name(view));
    kv.set("score_threshold", d(score_threshold));
    kv.set("seed", std::to_string(seed));
    return kv;
  }
};

/// 64-bit FNV-1a, printed as 16 hex digits.
inline std::string fnv1a_hex(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Run manifest: command, configuration hash, seed and version.
inline void write_manifest(const std::string& path, const std::string& command, const std::string& config_text,
                           std::uint64_t seed) {
  KeyValues kv;
  kv.set("command", command);
  kv.set("config_hash", fnv1a_hex(config_text));
  kv.set("seed", std::to_string(seed));
  kv.set("version", kVersion);
  kv.save(path);
}

/// An image resized to working resolution with its boxes in the same frame.
struct Prepared {
  GrayImage image;
  double scale = 1.0;
  std::vector<Box> gts;
};

inline Prepared prepare(const Sample& s, int shorter) {
  Prepared p;
  p.scale = resize_shorter_edge(s.image, shorter, p.image);
  for (const Box& b : s.gts) p.gts.push_back({b.l * p.scale, b.t * p.scale, b.w * p.scale, b.h * p.scale});
  return p;
}

struct TrainLogRow {
  int step;
  double lr;
  StepStats stats;
};

/// SGD over the dataset, one image per step, reshuffled each epoch.
/// `on_log` receives averages over each `log_every` window.
inline MpRpn<float> train_rpn(const Dataset& data, const RunConfig& cfg,
                              const std::function<void(const TrainLogRow&)>& on_log = {}) {
  if (data.empty()) throw std::invalid_argument("train_rpn: empty dataset");
  std::vector<Tensor<float>> inputs;
  std::vector<std::vector<Box>> gts;
  for (const auto& s : data) {
    Prepared p = prepare(s, cfg.image_size);
    inputs.push_back(image_to_tensor<float>(p.image));
    gts.push_back(std::move(p.gts));
  }
  MpRpn<float> net(cfg.rpn);
  SgdMomentum<float> opt;
  std::mt19937_64 rng(cfg.train.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainLogRow acc{0, 0.0, {}};
  int in_window = 0;
  for (int step = 0; step < cfg.train.steps; ++step) {
    const std::size_t k = static_cast<std::size_t>(step) % order.size();
    if (k == 0) {
      for (std::size_t i = order.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(order[i - 1], order[pick(rng)]);
      }
    }
    const std::size_t idx = order[k];
    const StepStats st = train_step(net, inputs[idx], std::span<const Box>(gts[idx]), opt, cfg.train, step, rng);
    acc.stats.total += st.total;
    for (int m = 0; m < 3; ++m) {
      acc.stats.branch[m] += st.branch[m];
      acc.stats.positives[m] += st.positives[m];
    }
    ++in_window;
    if (on_log && (in_window == cfg.log_every || step + 1 == cfg.train.steps)) {
      acc.step = step + 1;
      acc.lr = cfg.train.lr_at(step);
      acc.stats.total /= in_window;
      for (auto& b : acc.stats.branch) b /= in_window;
      on_log(acc);
      acc = {};
      in_window = 0;
    }
  }
  return net;
}

inline std::string train_log_header() { return "step,lr,loss,loss_det4,loss_det16,loss_det32,positives\n"; }

inline std::string train_log_line(const TrainLogRow& r) {
  std::ostringstream os;
  os << r.step << "," << format_exact(r.lr) << "," << format_exact(r.stats.total);
  for (double b : r.stats.branch) os << "," << format_exact(b);
  os << "," << (r.stats.positives[0] + r.stats.positives[1] + r.stats.positives[2]) << "\n";
  return os.str();
}

/// Proposals of one image with pooled descriptors, in working-resolution
/// coordinates.
struct ImageProposals {
  Prepared prep;
  std::vector<Proposal> proposals;
  ExtractResult features;
};

inline ImageProposals propose_with_features(MpRpn<float>& net, const Sample& s, const RunConfig& cfg,
                                            bool with_features) {
  ImageProposals out;
  out.prep = prepare(s, cfg.image_size);
  const ProposalSet ps = propose(net, out.prep.image, cfg.proposal);
  out.proposals = ps.merged;
  if (with_features && !out.proposals.empty()) {
    std::vector<Box> boxes;
    for (const auto& p : out.proposals) boxes.push_back(p.box);
    const auto maps = net.stage2_maps(cfg.atrous_conv4);
    out.features = extract(std::span<const Box>(boxes), maps.fine, maps.fine_stride, maps.coarse, maps.coarse_stride,
                           out.prep.image.width, out.prep.image.height);
  }
  return out;
}

/// Detections for one image in its original coordinates, best first. With a
/// forest, scores are the forest probability instead of the RPN probability.
inline std::vector<Detection> detect(MpRpn<float>& net, const ForestModel* forest, const Sample& s,
                                     const RunConfig& cfg) {
  const FeatureView view = cfg.view;
  ImageProposals ip = propose_with_features(net, s, cfg, forest != nullptr);
  std::vector<Detection> dets;
  auto to_original = [&](const Box& b) {
    const double k = 1.0 / ip.prep.scale;
    return Box{b.l * k, b.t * k, b.w * k, b.h * k};
  };
  if (forest == nullptr) {
    for (const auto& p : ip.proposals) dets.push_back({s.id, to_original(p.box), p.box.score, static_cast<int>(p.branch)});
  } else {
    for (std::size_t r = 0; r < ip.features.features.size(); ++r) {
      const auto& f = ip.features.features[r];
      const Proposal& p = ip.proposals[ip.features.kept[r]];
      const double prob = score_prob(*forest, view_of(f.values, view), f.rpn_score);
      dets.push_back({s.id, to_original(p.box), prob, static_cast<int>(p.branch)});
    }
  }
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return dets;
}

inline std::vector<EvalImage> detect_all(MpRpn<float>& net, const ForestModel* forest, const Dataset& data,
                                         const RunConfig& cfg) {
  std::vector<EvalImage> out;
  for (const auto& s : data) out.push_back({s.id, detect(net, forest, s, cfg), s.gts});
  return out;
}

/// Labelled forest training rows from the proposals of every image: all
/// positives (IoU >= bf_pos_iou with some ground truth) and up to
/// bf_neg_per_image randomly chosen negatives (IoU < bf_neg_iou).
inline FeatureSet collect_features(MpRpn<float>& net, const Dataset& data, const RunConfig& cfg) {
  FeatureSet fs;
  for (std::size_t n = 0; n < data.size(); ++n) {
    ImageProposals ip = propose_with_features(net, data[n], cfg, true);
    std::vector<std::size_t> negs;
    for (std::size_t r = 0; r < ip.features.features.size(); ++r) {
      const Box& b = ip.proposals[ip.features.kept[r]].box;
      double best = 0.0;
      for (const Box& g : ip.prep.gts) best = std::max(best, iou(b, g));
      if (best >= cfg.bf_pos_iou) {
        fs.add(ip.features.features[r].values, ip.features.features[r].rpn_score, 1);
      } else if (best < cfg.bf_neg_iou) {
        negs.push_back(r);
      }
    }
    std::mt19937_64 rng(derive_seed(cfg.forest.seed, n));
    const std::size_t keep = std::min(negs.size(), static_cast<std::size_t>(std::max(0, cfg.bf_neg_per_image)));
    for (std::size_t i = 0; i < keep; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, negs.size() - 1);
      std::swap(negs[i], negs[pick(rng)]);
    }
    negs.resize(keep);
    std::sort(negs.begin(), negs.end());
    for (std::size_t r : negs) fs.add(ip.features.features[r].values, ip.features.features[r].rpn_score, 0);
  }
  return fs;
}

/// Splits a labelled set into the initial training set (all positives and
/// ratio x as many negatives) and the negative mining pool, restricted to a
/// feature view.
inline std::pair<FeatureSet, FeatureSet> split_for_cascade(const FeatureSet& all, const RunConfig& cfg) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < all.rows(); ++i) (all.y[i] ? pos : neg).push_back(i);
  std::mt19937_64 rng(derive_seed(cfg.forest.seed, 0xb007));
  for (std::size_t i = neg.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(neg[i - 1], neg[pick(rng)]);
  }
  const std::size_t n_init = std::min(neg.size(), pos.size() * static_cast<std::size_t>(cfg.bf_initial_neg_ratio));
  std::vector<std::size_t> init = pos;
  init.insert(init.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(n_init));
  std::sort(init.begin(), init.end());
  std::vector<std::size_t> pool(neg.begin() + static_cast<std::ptrdiff_t>(n_init), neg.end());
  std::sort(pool.begin(), pool.end());
  return {all.subset(init, cfg.view), all.subset(pool, cfg.view)};
}

inline ForestTraining train_bf(const FeatureSet& all, const RunConfig& cfg) {
  auto [initial, pool] = split_for_cascade(all, cfg);
  return train_forest(initial, pool, cfg.forest);
}

// ---- ablation tables ------------------------------------------------------

inline std::string csv_num(std::optional<double> v) { return v ? eval_detail::fmt(*v) : "NA"; }

struct AblationRow {
  bool atrous;
  bool ohem;
  ScaleRecall recall;
  double ap;
};

inline std::string ablation_recall_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "atrous,ohem,recall_small,recall_medium,recall_large,recall_all\n";
  for (const auto& r : rows) {
    os << (r.atrous ? "on" : "off") << "," << (r.ohem ? "on" : "off");
    for (const auto& b : r.recall.bins) os << "," << csv_num(b.recall());
    os << "," << csv_num(r.recall.all.recall()) << "\n";
  }
  return os.str();
}

inline std::string ablation_ap_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "atrous,ohem,ap\n";
  for (const auto& r : rows) {
    os << (r.atrous ? "on" : "off") << "," << (r.ohem ? "on" : "off") << "," << eval_detail::fmt(r.ap) << "\n";
  }
  return os.str();
}

/// Trains and evaluates the four atrous x OHEM variants.
inline std::vector<AblationRow> ablate_atrous_ohem(const Dataset& train, const Dataset& val, const RunConfig& base,
                                                   const std::function<void(const std::string&)>& progress = {}) {
  std::vector<AblationRow> rows;
  for (bool atrous : {false, true}) {
    for (bool ohem : {false, true}) {
      RunConfig cfg = base;
      cfg.rpn.atrous = atrous;
      cfg.train.ohem = ohem;
      if (progress) progress(std::string("training atrous=") + (atrous ? "on" : "off") + " ohem=" + (ohem ? "on" : "off"));
      MpRpn<float> net = train_rpn(train, cfg);
      const auto images = detect_all(net, nullptr, val, cfg);
      rows.push_back({atrous, ohem, recall_by_scale(images, cfg.score_threshold), pr_and_ap(images).second});
    }
  }
  return rows;
}

struct BranchTable {
  std::array<ScaleRecall, 3> branch;
  ScaleRecall combined;
};

inline BranchTable branch_recall(std::span<const EvalImage> images, double score_threshold) {
  BranchTable t;
  for (int m = 0; m < 3; ++m) t.branch[m] = recall_by_scale(images, score_threshold, default_height_bins(), m);
  t.combined = recall_by_scale(images, score_threshold);
  return t;
}

inline std::string branch_table_csv(const BranchTable& t) {
  std::ostringstream os;
  os << "branch,recall_small,recall_medium,recall_large,recall_all\n";
  auto row = [&](const std::string& name, const ScaleRecall& r) {
    os << name;
    for (const auto& b : r.bins) os << "," << csv_num(b.recall());
    os << "," << csv_num(r.all.recall()) << "\n";
  };
  for (Branch b : kBranches) row(std::string(branch_name(b)), t.branch[static_cast<int>(b)]);
  row("Combined", t.combined);
  return os.str();
}

struct BfRow {
  std::string method;
  double ap;
};

inline std::string bf_table_csv(const std::vector<BfRow>& rows) {
  std::ostringstream os;
  os << "method,ap\n";
  for (const auto& r : rows) os << r.method << "," << eval_detail::fmt(r.ap) << "\n";
  return os.str();
}

/// AP of the RPN alone and of forests on face, context and face+context
/// descriptors, all trained on `train` and evaluated on `val`.
inline std::vector<BfRow> ablate_bf(MpRpn<float>& net, const Dataset& train, const Dataset& val, const RunConfig& base,
                                    std::vector<ForestTraining>* forests = nullptr) {
  std::vector<BfRow> rows;
  rows.push_back({"MP-RPN", pr_and_ap(detect_all(net, nullptr, val, base)).second});
  const FeatureSet all = collect_features(net, train, base);
  for (FeatureView v : {FeatureView::Face, FeatureView::Context, FeatureView::FaceContext}) {
    RunConfig cfg = base;
    cfg.view = v;
    ForestTraining ft = train_bf(all, cfg);
    rows.push_back({std::string("MP-RPN+BF(") + view_name(v) + ")",
                    pr_and_ap(detect_all(net, &ft.model, val, cfg)).second});
    if (forests) forests->push_back(std::move(ft));
  }
  return rows;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  auto os = io::open_out(path.string(), std::ios::out);
  os << text;
}

/// Whole workflow on generated data: train the RPN and a forest, detect on
/// the validation split and write reports into `dir`.
inline void run_pipeline(const SceneSpec& scene, int n_train, int n_val, const RunConfig& cfg,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const Dataset train = generate_dataset(scene, n_train, 0);
  const Dataset val = generate_dataset(scene, n_val, static_cast<std::uint64_t>(n_train));
  std::ostringstream log;
  log << train_log_header();
  MpRpn<float> net = train_rpn(train, cfg, [&](const TrainLogRow& r) { log << train_log_line(r); });
  write_text(dir / "train_log.csv", log.str());
  save_checkpoint((dir / "rpn.mpt").string(), net.to_records());
  const FeatureSet feats = collect_features(net, train, cfg);
  const ForestTraining ft = train_bf(feats, cfg);
  save_forest((dir / "forest.mpbf").string(), ft.model);
  const auto rpn_only = detect_all(net, nullptr, val, cfg);
  const auto with_bf = detect_all(net, &ft.model, val, cfg);
  std::vector<Detection> flat;
  for (const auto& im : with_bf) flat.insert(flat.end(), im.dets.begin(), im.dets.end());
  save_detections((dir / "detections.txt").string(), flat);
  const EvalReport rep = evaluate(with_bf, cfg.score_threshold);
  write_text(dir / "report.csv", report_csv(rep));
  write_text(dir / "pr.csv", pr_csv(rep));
  write_text(dir / "branches.csv", branch_table_csv(branch_recall(rpn_only, cfg.score_threshold)));
  write_text(dir / "pr.svg", pr_svg({{"MP-RPN", evaluate(rpn_only, cfg.score_threshold)}, {"MP-RPN+BF", rep}}));
  const std::string cfg_text = cfg.to_kv().str() + scene.to_kv().str();
  write_manifest((dir / "manifest.txt").string(), "pipeline", cfg_text, cfg.seed);
}

}  // namespace mprcnn
