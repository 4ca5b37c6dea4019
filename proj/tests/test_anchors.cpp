#include <gtest/gtest.h>

#include <set>

#include "generators.hpp"
#include "mprcnn/anchors.hpp"
#include "mprcnn/mp_rpn.hpp"
#include "oracles.hpp"

using namespace mprcnn;
using mprcnn::testsupport::Gen;

namespace {

std::vector<oracle::IBox> integral(const AnchorSet& set) {
  std::vector<oracle::IBox> out;
  for (const auto& a : set.anchors) out.push_back(oracle::IBox::from(a));
  return out;
}

void expect_consistent(const AnchorLabels& lab) {
  for (std::size_t i = 0; i < lab.size(); ++i) {
    const bool pos = lab.label[i] == AnchorLabel::Positive;
    EXPECT_EQ(pos, lab.matched_gt[i] >= 0);
    EXPECT_EQ(pos, lab.reg_target[i].has_value());
  }
}

}  // namespace

TEST(BranchConfig, ScalesAndStrides) {
  EXPECT_EQ(branch_config(Branch::Det4).scales, (std::vector<double>{8, 16, 32}));
  EXPECT_EQ(branch_config(Branch::Det16).scales, (std::vector<double>{32, 64, 128, 256, 360}));
  EXPECT_EQ(branch_config(Branch::Det32).scales, (std::vector<double>{360, 512, 720, 900}));
  EXPECT_EQ(branch_config(Branch::Det4).stride, 4);
  EXPECT_EQ(branch_config(Branch::Det16).stride, 16);
  EXPECT_EQ(branch_config(Branch::Det32).stride, 32);
}

TEST(BranchConfig, OnlyBoundaryScalesAreShared) {
  std::map<double, int> owners;
  for (Branch b : kBranches) {
    for (double s : branch_config(b).scales) ++owners[s];
  }
  for (const auto& [s, n] : owners) {
    if (s == 32 || s == 360) {
      EXPECT_EQ(n, 2) << s;
    } else {
      EXPECT_EQ(n, 1) << s;
    }
  }
}

TEST(GenerateAnchors, Examples) {
  const auto det4 = generate_anchors(branch_config(Branch::Det4), 16, 16);
  EXPECT_EQ(det4.size(), 768u);
  EXPECT_EQ(det4.anchors[0], (Box{-2, -2, 8, 8}));
  const auto det32 = generate_anchors(branch_config(Branch::Det32), 1, 1);
  ASSERT_EQ(det32.size(), 4u);
  const std::vector<double> sides{360, 512, 720, 900};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(det32.anchors[i].w, sides[i]);
    EXPECT_EQ(det32.anchors[i].h, sides[i]);
    EXPECT_EQ(det32.anchors[i].cx(), 16.0);
  }
  EXPECT_THROW((void)generate_anchors(branch_config(Branch::Det4), 0, 3), std::invalid_argument);
}

TEST(GenerateAnchors, LayoutIsRowMajorOverYXScale) {
  const auto set = generate_anchors(branch_config(Branch::Det16), 3, 5);
  EXPECT_EQ(set.size(), 3u * 5u * 5u);
  for (int y = 0; y < 3; ++y) {
    for (int x = 0; x < 5; ++x) {
      for (int s = 0; s < 5; ++s) {
        const Box& a = set.anchors[set.index(y, x, s)];
        EXPECT_DOUBLE_EQ(a.cx(), (x + 0.5) * 16);
        EXPECT_DOUBLE_EQ(a.cy(), (y + 0.5) * 16);
        EXPECT_DOUBLE_EQ(a.w, set.config.scales[s]);
      }
    }
  }
}

TEST(LabelAnchors, AnchorEqualToGtIsPositiveWithZeroTarget) {
  const auto set = generate_anchors(branch_config(Branch::Det4), 4, 4);
  const std::vector<Box> gts{set.anchors[set.index(2, 1, 1)]};
  const auto lab = label_anchors(set, gts);
  const std::size_t i = set.index(2, 1, 1);
  EXPECT_EQ(lab.label[i], AnchorLabel::Positive);
  EXPECT_EQ(*lab.reg_target[i], (RegressionTarget{0, 0, 0, 0}));
  EXPECT_FALSE(lab.forced[i]);
  expect_consistent(lab);
}

TEST(LabelAnchors, StrictThresholds) {
  AnchorSet set{branch_config(Branch::Det4), 1, 1, {Box{0, 0, 10, 10}}};
  const LabelOptions no_force{0.5, 0.3, false};
  auto one = [&](Box gt) { return label_anchors(set, std::vector<Box>{gt}, no_force).label[0]; };
  EXPECT_EQ(one(Box{0, 0, 10, 4}), AnchorLabel::Ignore);    // 0.4
  EXPECT_EQ(one(Box{0, 0, 10, 5}), AnchorLabel::Ignore);    // exactly 0.5
  EXPECT_EQ(one(Box{0, 0, 10, 3}), AnchorLabel::Ignore);    // exactly 0.3
  EXPECT_EQ(one(Box{0, 0, 10, 6}), AnchorLabel::Positive);  // 0.6
  EXPECT_EQ(one(Box{0, 0, 10, 2}), AnchorLabel::Negative);  // 0.2
}

TEST(LabelAnchors, EmptyGtsAreAllNegative) {
  const auto set = generate_anchors(branch_config(Branch::Det16), 2, 2);
  const auto lab = label_anchors(set, std::vector<Box>{});
  EXPECT_EQ(lab.count(AnchorLabel::Negative), set.size());
}

TEST(LabelAnchors, ForcedBestMatchCanBeDisabled) {
  AnchorSet set{branch_config(Branch::Det4), 1, 1, {Box{0, 0, 10, 10}}};
  const std::vector<Box> gts{Box{0, 0, 10, 4}};
  EXPECT_EQ(label_anchors(set, gts).label[0], AnchorLabel::Positive);
  EXPECT_TRUE(label_anchors(set, gts).forced[0]);
  EXPECT_EQ(label_anchors(set, gts, {0.5, 0.3, false}).label[0], AnchorLabel::Ignore);
}

TEST(LabelAnchors, MatchesOracleOnRandomInstances) {
  Gen gen(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const Branch b = gen.coin(0.7) ? Branch::Det4 : Branch::Det16;
    const auto set = generate_anchors(branch_config(b), gen.integer(1, 5), gen.integer(1, 5));
    std::vector<Box> gts;
    for (int g = gen.integer(0, 3); g > 0; --g) gts.push_back(gen.int_box(40, 3, 40));
    std::vector<oracle::IBox> ig;
    for (const auto& g : gts) ig.push_back(oracle::IBox::from(g));
    const bool force = gen.coin(0.8);
    const auto got = label_anchors(set, gts, {0.5, 0.3, force});
    const auto want = oracle::label({integral(set)}, ig, force)[0];
    ASSERT_EQ(got.label, want.label) << "trial " << trial;
    ASSERT_EQ(got.matched_gt, want.matched);
    expect_consistent(got);
    for (std::size_t i = 0; i < got.size(); ++i) {
      if (got.reg_target[i]) {
        EXPECT_EQ(*got.reg_target[i], encode(gts[got.matched_gt[i]], set.anchors[i]));
      }
    }
  }
}

TEST(LabelBranches, MatchesJointOracleOnRandomInstances) {
  Gen gen(22);
  for (int trial = 0; trial < 300; ++trial) {
    const int side = 32 * gen.integer(1, 3);
    const auto sets = anchors_for_input(side, side);
    std::vector<Box> gts;
    for (int g = gen.integer(0, 4); g > 0; --g) gts.push_back(gen.int_box(side, 4, side));
    std::vector<oracle::IBox> ig;
    for (const auto& g : gts) ig.push_back(oracle::IBox::from(g));
    const auto got = label_branches(std::span<const AnchorSet>(sets), gts);
    const auto want = oracle::label({integral(sets[0]), integral(sets[1]), integral(sets[2])}, ig);
    for (int m = 0; m < 3; ++m) {
      ASSERT_EQ(got[m].label, want[m].label) << "trial " << trial << " branch " << m;
      ASSERT_EQ(got[m].matched_gt, want[m].matched);
    }
  }
}

TEST(LabelBranches, EveryGtGetsAPositiveAnchor) {
  Gen gen(23);
  const int side = 1024;
  const auto sets = anchors_for_input(side, side);
  for (int trial = 0; trial < 12; ++trial) {
    std::vector<Box> gts;
    for (int g = gen.integer(1, 4); g > 0; --g) {
      const double h = std::exp(gen.real(std::log(8.0), std::log(900.0)));
      const double w = h * gen.real(0.7, 1.0);
      gts.push_back({gen.real(0, side - w), gen.real(0, side - h), w, h});
    }
    const auto labels = label_branches(std::span<const AnchorSet>(sets), gts);
    std::vector<int> hits(gts.size(), 0);
    for (const auto& lab : labels) {
      expect_consistent(lab);
      for (std::size_t i = 0; i < lab.size(); ++i) {
        if (lab.matched_gt[i] >= 0) ++hits[lab.matched_gt[i]];
      }
    }
    for (std::size_t g = 0; g < gts.size(); ++g) EXPECT_GE(hits[g], 1) << "gt height " << gts[g].h;
  }
}
