#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mprcnn/pipeline.hpp"

using namespace mprcnn;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "mprcnn_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig small_config() {
  RunConfig cfg;
  cfg.image_size = 96;
  cfg.rpn.trunk.stem = 4;
  cfg.rpn.trunk.widths = {8, 8, 8, 8};
  cfg.train.steps = 30;
  cfg.forest.divisor = 64;
  cfg.forest.mine_per_stage = 640;
  cfg.log_every = 10;
  cfg.apply_seed(3);
  return cfg;
}

SceneSpec small_scene() {
  SceneSpec scene;
  scene.width = 96;
  scene.height = 96;
  return scene;
}

}  // namespace

TEST(Pipeline, EmptyForestKeepsRpnRanking) {
  const RunConfig cfg = small_config();
  MpRpn<float> net(cfg.rpn);
  for (const auto& s : generate_dataset(small_scene(), 3)) {
    const auto rpn = detect(net, nullptr, s, cfg);
    const auto ip = propose_with_features(net, s, cfg, true);
    if (ip.features.features.empty()) continue;
    ForestModel forest;
    forest.feature_dim = static_cast<std::uint32_t>(ip.features.features[0].values.size());
    const auto bf = detect(net, &forest, s, cfg);
    ASSERT_EQ(bf.size(), rpn.size());
    for (std::size_t i = 0; i < rpn.size(); ++i) {
      EXPECT_EQ(bf[i].box, rpn[i].box);
      EXPECT_EQ(bf[i].branch, rpn[i].branch);
      EXPECT_NEAR(bf[i].score, std::clamp(rpn[i].score, kRpnClamp, 1.0 - kRpnClamp), 1e-9);
    }
  }
}

TEST(Pipeline, SplitForCascadeKeepsAllPositives) {
  FeatureSet all;
  for (int i = 0; i < 40; ++i) {
    const std::vector<float> row{static_cast<float>(i), 0.0f};
    all.add(row, 0.5, i % 5 == 0 ? 1 : 0);
  }
  const RunConfig cfg = small_config();
  const auto [initial, pool] = split_for_cascade(all, cfg);
  EXPECT_EQ(initial.count(1), 8u);
  EXPECT_EQ(initial.count(0), 24u);
  EXPECT_EQ(initial.rows() + pool.rows(), all.rows());
  EXPECT_EQ(pool.count(1), 0u);
}

TEST(Pipeline, RepeatedRunsAreByteIdentical) {
  const RunConfig cfg = small_config();
  const auto a = fresh_dir("pipeline_a");
  const auto b = fresh_dir("pipeline_b");
  run_pipeline(small_scene(), 6, 3, cfg, a);
  run_pipeline(small_scene(), 6, 3, cfg, b);
  for (const char* name : {"train_log.csv", "rpn.mpt", "forest.mpbf", "detections.txt", "report.csv", "pr.csv",
                           "branches.csv", "pr.svg", "manifest.txt"}) {
    ASSERT_TRUE(std::filesystem::exists(a / name)) << name;
    EXPECT_EQ(slurp(a / name), slurp(b / name)) << name;
  }
  EXPECT_NE(slurp(a / "manifest.txt").find("seed = 3"), std::string::npos);
}
