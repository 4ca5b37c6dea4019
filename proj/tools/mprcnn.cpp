#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "mprcnn/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mprcnn;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kMissingFile = 3, kFormat = 4, kRuntime = 5 };

int fail(int code, const char* kind, std::string msg) {
  std::replace(msg.begin(), msg.end(), '\n', ' ');
  std::replace(msg.begin(), msg.end(), '"', '\'');
  std::cerr << "error: code=" << code << " kind=" << kind << " message=\"" << msg << "\"\n";
  return code;
}

// Options shared by several commands are bound to one RunConfig; list-valued
// flags land in these vectors and are copied over after parsing.
struct Options {
  RunConfig run;
  std::uint64_t seed = 1;
  std::vector<int> widths{16, 32, 64, 64};
  std::vector<double> alphas{1.0, 1.0, 1.0};
  std::vector<int> top_k{150, 40, 10};
  std::vector<int> stages{64, 128, 256, 512, 1024, 1536};
  std::string view = "face+context";
  int verbose = 0;

  // paths
  std::string data, out, model, forest, features, dets, scene, grid = "atrous,ohem", log;
  int n_train = 500, n_val = 100;
  SceneSpec spec;

  void finalize() {
    run.apply_seed(seed);
    if (widths.size() != 4) throw std::invalid_argument("--widths needs 4 values");
    if (alphas.size() != 3) throw std::invalid_argument("--alpha needs 3 values");
    if (top_k.size() != 3) throw std::invalid_argument("--top-k needs 3 values");
    std::copy(widths.begin(), widths.end(), run.rpn.trunk.widths.begin());
    std::copy(alphas.begin(), alphas.end(), run.train.alphas.begin());
    std::copy(top_k.begin(), top_k.end(), run.proposal.top_k.begin());
    run.forest.stage_trees = stages;
    run.view = parse_view(view);
    if (run.image_size < MpRpn<float>::kMinInput) throw std::invalid_argument("--image-size must be at least 32");
  }
};

void add_common(CLI::App* app, Options& o) {
  app->add_option("--seed", o.seed, "[decision] master random seed");
  app->add_flag("-v,--verbose", o.verbose, "[decision] more log output (repeatable)");
}

void add_image_size(CLI::App* app, Options& o) {
  app->add_option("--image-size", o.run.image_size, "[decision] shorter image edge after resizing");
}

void add_rpn_options(CLI::App* app, Options& o) {
  auto& r = o.run;
  add_image_size(app, o);
  app->add_option("--stem", r.rpn.trunk.stem, "[decision] channels of the first two trunk convolutions");
  app->add_option("--widths", o.widths, "[decision] trunk widths at strides 4, 8, 16, 32")->expected(4);
  app->add_flag("--atrous,!--no-atrous", r.rpn.atrous, "[paper] dilations {1,2,4} in the Det-16/Det-32 paths (default: on)");
  app->add_option("--steps", r.train.steps, "[decision] SGD steps (one image each)");
  app->add_option("--lr", r.train.lr, "[decision] base learning rate");
  app->add_option("--lr-decay", r.train.lr_decay, "[paper] learning-rate factor in the second phase");
  app->add_option("--decay-fraction", r.train.decay_fraction, "[decision] fraction of steps at the base rate");
  app->add_option("--momentum", r.train.momentum, "[paper] SGD momentum");
  app->add_option("--weight-decay", r.train.weight_decay, "[paper] L2 weight decay on convolution weights");
  app->add_option("--alpha", o.alphas, "[paper] per-branch loss weights")->expected(3);
  app->add_option("--lambda", r.train.lambda, "[paper] regression loss weight");
  app->add_flag("--ohem,!--no-ohem", r.train.ohem, "[paper] hard example mining (off: random 1:3 sampling; default: on)");
  app->add_option("--ohem-batch", r.train.ohem_batch, "[paper] anchors per branch per step");
  app->add_option("--pos-iou", r.train.labels.positive_iou, "[paper] anchor positive IoU threshold");
  app->add_option("--neg-iou", r.train.labels.negative_iou, "[paper] anchor negative IoU threshold");
  app->add_option("--log-every", r.log_every, "[decision] steps per training-log row");
}

void add_proposal_options(CLI::App* app, Options& o) {
  auto& p = o.run.proposal;
  add_image_size(app, o);
  app->add_option("--branch-nms", p.branch_nms, "[paper] per-branch NMS IoU threshold");
  app->add_option("--merge-nms", p.merge_nms, "[paper] NMS IoU threshold after merging branches");
  app->add_option("--top-k", o.top_k, "[paper] proposals kept per branch (Det-4, Det-16, Det-32)")->expected(3);
}

void add_stage2_options(CLI::App* app, Options& o) {
  app->add_flag("--atrous-conv4,!--no-atrous-conv4", o.run.atrous_conv4,
                "[paper] pool the stride-8 stage from a dilated pass at stride 4 (default: on)");
}

void add_bf_label_options(CLI::App* app, Options& o) {
  app->add_option("--bf-pos-iou", o.run.bf_pos_iou, "[decision] proposal IoU for a positive forest sample");
  app->add_option("--bf-neg-iou", o.run.bf_neg_iou, "[decision] proposal IoU below which a sample is negative");
  app->add_option("--neg-per-image", o.run.bf_neg_per_image, "[decision] negatives sampled per training image");
}

void add_forest_options(CLI::App* app, Options& o) {
  auto& f = o.run.forest;
  app->add_option("--stages", o.stages, "[paper] cascade stage sizes before division");
  app->add_option("--final-trees", f.final_trees, "[paper] trees in the final forest before division");
  app->add_option("--divisor", f.divisor, "[decision] desk-scale divisor of tree counts and mining quota");
  app->add_option("--depth", f.max_depth, "[paper] maximum tree depth");
  app->add_option("--mine", f.mine_per_stage, "[paper] negatives mined after each stage before division");
  app->add_option("--feature-fraction", f.feature_fraction, "[decision] candidate features per split");
  app->add_option("--shrinkage", f.shrinkage, "[decision] multiplier on leaf scores");
  app->add_option("--max-leaf", f.max_leaf, "[decision] clamp on leaf scores before shrinkage");
  app->add_option("--smoothing", f.smoothing, "[decision] leaf smoothing relative to the mean sample weight");
  app->add_flag("--rpn-init,!--no-rpn-init", f.rpn_init, "[paper] start from the RPN probability (default: on)");
  app->add_option("--neg-ratio", o.run.bf_initial_neg_ratio, "[decision] initial negatives per positive");
  app->add_option("--view", o.view, "[paper] descriptor part: face, context or face+context");
}

Dataset load_split(const std::string& dir) { return read_dataset(dir); }

MpRpn<float> load_model(const std::string& path) { return MpRpn<float>::from_records(load_checkpoint(path)); }

void manifest(const CLI::App& app, const std::string& path, const std::string& command, const Options& o) {
  write_manifest(path, command, app.config_to_str(true, false), o.seed);
}

std::string sibling(const std::string& path, const std::string& suffix) { return path + suffix; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale two-stage detector: region proposals, boosted forest verification and evaluation"};
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "[decision] INI/TOML config file; command-line flags take precedence");
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic train/val dataset");
  add_common(gen, o);
  gen->add_option("--out", o.out, "[decision] output directory")->required();
  gen->add_option("--scene", o.scene, "[decision] scene spec (key = value file); flags below override it");
  gen->add_option("--train", o.n_train, "[decision] training images");
  gen->add_option("--val", o.n_val, "[decision] validation images");
  gen->add_option("--width", o.spec.width, "[decision] image width");
  gen->add_option("--height", o.spec.height, "[decision] image height");
  gen->add_option("--min-targets", o.spec.min_targets, "[decision] minimum targets per image");
  gen->add_option("--max-targets", o.spec.max_targets, "[decision] maximum targets per image");
  gen->add_option("--clutter", o.spec.clutter_density, "[decision] distractors per 10,000 pixels");
  gen->add_option("--partial", o.spec.partial_prob, "[decision] chance a target may cross the border");
  gen->add_flag("--blur", o.spec.blur, "[decision] blur half of the images (default: off)");
  gen->add_flag("--occlusion", o.spec.occlusion, "[decision] occlude some targets (default: off)");

  auto* train = app.add_subcommand("train-rpn", "Train the proposal network");
  add_common(train, o);
  train->add_option("--data", o.data, "[decision] dataset split directory")->required();
  train->add_option("--out", o.out, "[decision] checkpoint path")->required();
  train->add_option("--log", o.log, "[decision] training log CSV (default <out>.log.csv)");
  add_rpn_options(train, o);

  auto* prop = app.add_subcommand("propose", "Write merged proposals with their branch");
  add_common(prop, o);
  prop->add_option("--model", o.model, "[decision] checkpoint path")->required();
  prop->add_option("--data", o.data, "[decision] dataset split directory")->required();
  prop->add_option("--out", o.out, "[decision] proposals file")->required();
  add_proposal_options(prop, o);

  auto* ext = app.add_subcommand("extract-features", "Pool labelled proposal descriptors for forest training");
  add_common(ext, o);
  ext->add_option("--model", o.model, "[decision] checkpoint path")->required();
  ext->add_option("--data", o.data, "[decision] dataset split directory")->required();
  ext->add_option("--out", o.out, "[decision] feature dump path")->required();
  add_proposal_options(ext, o);
  add_stage2_options(ext, o);
  add_bf_label_options(ext, o);

  auto* tbf = app.add_subcommand("train-bf", "Train the cascaded boosted forest");
  add_common(tbf, o);
  tbf->add_option("--features", o.features, "[decision] feature dump from extract-features")->required();
  tbf->add_option("--out", o.out, "[decision] forest model path")->required();
  add_forest_options(tbf, o);

  auto* det = app.add_subcommand("detect", "Detect on a dataset split");
  add_common(det, o);
  det->add_option("--model", o.model, "[decision] checkpoint path")->required();
  det->add_option("--forest", o.forest, "[decision] optional forest model for rescoring");
  det->add_option("--data", o.data, "[decision] dataset split directory")->required();
  det->add_option("--out", o.out, "[decision] detections file")->required();
  det->add_option("--view", o.view, "[paper] descriptor part the forest was trained on");
  add_proposal_options(det, o);
  add_stage2_options(det, o);

  auto* ev = app.add_subcommand("evaluate", "Score detections against annotations");
  add_common(ev, o);
  ev->add_option("--dets", o.dets, "[decision] detections file")->required();
  ev->add_option("--data", o.data, "[decision] dataset split directory")->required();
  ev->add_option("--out", o.out, "[decision] report directory")->required();
  ev->add_option("--score-threshold", o.run.score_threshold, "[decision] score threshold for recall and counts");

  auto* abl = app.add_subcommand("ablate", "Run an ablation grid and write its table");
  add_common(abl, o);
  abl->add_option("--grid", o.grid, "[paper] atrous,ohem | bf | branches")->required();
  abl->add_option("--data", o.data, "[decision] dataset directory with train/ and val/")->required();
  abl->add_option("--out", o.out, "[decision] report directory")->required();
  abl->add_option("--model", o.model, "[decision] checkpoint for bf/branches (trained if absent)");
  abl->add_option("--score-threshold", o.run.score_threshold, "[decision] score threshold for recall");
  add_rpn_options(abl, o);
  abl->add_option("--branch-nms", o.run.proposal.branch_nms, "[paper] per-branch NMS IoU threshold");
  abl->add_option("--merge-nms", o.run.proposal.merge_nms, "[paper] NMS IoU threshold after merging branches");
  abl->add_option("--top-k", o.top_k, "[paper] proposals kept per branch")->expected(3);
  add_stage2_options(abl, o);
  add_bf_label_options(abl, o);
  add_forest_options(abl, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::FileError& e) {
    return fail(kMissingFile, "missing_file", e.what());
  } catch (const CLI::ParseError& e) {
    return fail(kUsage, "usage", e.what());
  }

  auto logger = spdlog::stderr_color_mt("mprcnn");
  spdlog::set_default_logger(logger);
  spdlog::set_level(o.verbose >= 2 ? spdlog::level::debug
                    : o.verbose == 1 ? spdlog::level::info
                                     : spdlog::level::err);

  try {
    o.finalize();
    if (*gen) {
      if (!o.scene.empty()) {
        const SceneSpec from_file = SceneSpec::from_kv(KeyValues::load(o.scene));
        // Flags given explicitly win over the file.
        SceneSpec merged = from_file;
        if (gen->count("--width")) merged.width = o.spec.width;
        if (gen->count("--height")) merged.height = o.spec.height;
        if (gen->count("--min-targets")) merged.min_targets = o.spec.min_targets;
        if (gen->count("--max-targets")) merged.max_targets = o.spec.max_targets;
        if (gen->count("--clutter")) merged.clutter_density = o.spec.clutter_density;
        if (gen->count("--partial")) merged.partial_prob = o.spec.partial_prob;
        if (gen->count("--blur")) merged.blur = o.spec.blur;
        if (gen->count("--occlusion")) merged.occlusion = o.spec.occlusion;
        if (gen->count("--seed")) merged.seed = o.seed;
        o.spec = merged;
      } else {
        o.spec.seed = o.seed;
      }
      o.spec.validate();
      if (o.n_train < 0 || o.n_val < 0) throw std::invalid_argument("image counts must be non-negative");
      const fs::path out(o.out);
      write_dataset(out / "train", generate_dataset(o.spec, o.n_train, 0));
      write_dataset(out / "val", generate_dataset(o.spec, o.n_val, static_cast<std::uint64_t>(o.n_train)));
      o.spec.to_kv().save((out / "scene.cfg").string());
      write_manifest((out / "manifest.txt").string(), "gen-data", o.spec.to_kv().str(), o.spec.seed);
    } else if (*train) {
      const Dataset data = load_split(o.data);
      std::ostringstream log;
      log << train_log_header();
      MpRpn<float> net = train_rpn(data, o.run, [&](const TrainLogRow& r) {
        log << train_log_line(r);
        spdlog::info("step {} loss {:.5f}", r.step, r.stats.total);
      });
      save_checkpoint(o.out, net.to_records());
      write_text(o.log.empty() ? sibling(o.out, ".log.csv") : o.log, log.str());
      manifest(app, sibling(o.out, ".manifest"), "train-rpn", o);
    } else if (*prop) {
      MpRpn<float> net = load_model(o.model);
      std::vector<Detection> all;
      for (const auto& s : load_split(o.data)) {
        const auto d = detect(net, nullptr, s, o.run);
        all.insert(all.end(), d.begin(), d.end());
      }
      save_detections(o.out, all, true);
      manifest(app, sibling(o.out, ".manifest"), "propose", o);
    } else if (*ext) {
      MpRpn<float> net = load_model(o.model);
      const FeatureSet feats = collect_features(net, load_split(o.data), o.run);
      save_feature_dump(o.out, feats);
      spdlog::info("{} rows ({} positive), {} features", feats.rows(), feats.count(1), feats.cols);
      manifest(app, sibling(o.out, ".manifest"), "extract-features", o);
    } else if (*tbf) {
      const FeatureSet feats = load_feature_dump(o.features);
      const ForestTraining ft = train_bf(feats, o.run);
      save_forest(o.out, ft.model);
      std::ostringstream log;
      log << "stage,trees,mined,max_mined_prob,nll_start,nll_end\n";
      for (std::size_t s = 0; s < ft.model.cascade_log.size(); ++s) {
        const auto& c = ft.model.cascade_log[s];
        log << s + 1 << "," << c.trees << "," << c.mined << "," << format_exact(c.max_mined_prob) << ","
            << format_exact(ft.nll[s].front()) << "," << format_exact(ft.nll[s].back()) << "\n";
      }
      write_text(sibling(o.out, ".cascade.csv"), log.str());
      manifest(app, sibling(o.out, ".manifest"), "train-bf", o);
    } else if (*det) {
      MpRpn<float> net = load_model(o.model);
      std::optional<ForestModel> forest;
      if (!o.forest.empty()) forest = load_forest(o.forest);
      std::vector<Detection> all;
      for (const auto& s : load_split(o.data)) {
        const auto d = detect(net, forest ? &*forest : nullptr, s, o.run);
        all.insert(all.end(), d.begin(), d.end());
      }
      save_detections(o.out, all, true);
      manifest(app, sibling(o.out, ".manifest"), "detect", o);
    } else if (*ev) {
      const auto ann = load_annotations((fs::path(o.data) / "annotations.txt").string());
      std::vector<std::pair<std::string, std::vector<Box>>> gts;
      for (const auto& a : ann) gts.push_back({fs::path(a.image_path).stem().string(), a.boxes});
      const auto dets = load_detections(o.dets);
      const auto images = group_by_image(dets, gts);
      const EvalReport rep = evaluate(images, o.run.score_threshold);
      const fs::path out(o.out);
      fs::create_directories(out);
      write_text(out / "report.csv", report_csv(rep));
      write_text(out / "pr.csv", pr_csv(rep));
      write_text(out / "pr.svg", pr_svg({{"detections", rep}}));
      const bool tagged = std::any_of(dets.begin(), dets.end(), [](const Detection& d) { return d.branch >= 0; });
      if (tagged) write_text(out / "branches.csv", branch_table_csv(branch_recall(images, o.run.score_threshold)));
      manifest(app, (out / "manifest.txt").string(), "evaluate", o);
      std::cout << "ap " << eval_detail::fmt(rep.ap) << "\n";
    } else if (*abl) {
      const fs::path root(o.data);
      const fs::path out(o.out);
      fs::create_directories(out);
      const Dataset train_set = load_split((root / "train").string());
      const Dataset val_set = load_split((root / "val").string());
      auto model = [&]() {
        if (!o.model.empty()) return load_model(o.model);
        return train_rpn(train_set, o.run);
      };
      if (o.grid == "atrous,ohem" || o.grid == "ohem,atrous") {
        const auto rows = ablate_atrous_ohem(train_set, val_set, o.run, [](const std::string& m) { spdlog::info("{}", m); });
        write_text(out / "ablation_recall.csv", ablation_recall_csv(rows));
        write_text(out / "ablation_ap.csv", ablation_ap_csv(rows));
      } else if (o.grid == "bf") {
        MpRpn<float> net = model();
        write_text(out / "bf_ap.csv", bf_table_csv(ablate_bf(net, train_set, val_set, o.run)));
      } else if (o.grid == "branches") {
        MpRpn<float> net = model();
        const auto images = detect_all(net, nullptr, val_set, o.run);
        write_text(out / "branches.csv", branch_table_csv(branch_recall(images, o.run.score_threshold)));
      } else {
        return fail(kUsage, "usage", "--grid must be one of: atrous,ohem | bf | branches");
      }
      manifest(app, (out / "manifest.txt").string(), "ablate", o);
    }
  } catch (const MissingFileError& e) {
    return fail(kMissingFile, "missing_file", e.what());
  } catch (const FormatError& e) {
    return fail(kFormat, "format", e.what());
  } catch (const ShapeError& e) {
    return fail(kFormat, "schema", e.what());
  } catch (const std::invalid_argument& e) {
    return fail(kFormat, "config", e.what());
  } catch (const TrainingDiverged& e) {
    return fail(kRuntime, "diverged", e.what());
  } catch (const std::exception& e) {
    return fail(kRuntime, "runtime", e.what());
  }
  return kOk;
}
