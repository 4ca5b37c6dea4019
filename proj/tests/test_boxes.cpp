#include <gtest/gtest.h>

#include <cmath>

#include "generators.hpp"
#include "mprcnn/boxes.hpp"
#include "oracles.hpp"

using namespace mprcnn;
using mprcnn::testsupport::Gen;

TEST(Iou, Examples) {
  const Box a{0, 0, 10, 10};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, Box{20, 20, 5, 5}), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, Box{10, 0, 10, 10}), 0.0);
  const auto o = oracle::raster_overlap(oracle::IBox{0, 0, 10, 10}, oracle::IBox{5, 0, 10, 10});
  EXPECT_EQ(o.inter, 50);
  EXPECT_EQ(o.uni, 150);
  EXPECT_DOUBLE_EQ(iou(a, Box{5, 0, 10, 10}), 1.0 / 3.0);
}

TEST(Iou, RejectsEmptyBoxes) {
  EXPECT_THROW((void)iou(Box{0, 0, 0, 5}, Box{0, 0, 5, 5}), std::invalid_argument);
  EXPECT_THROW((void)iou(Box{0, 0, 5, 5}, Box{0, 0, 5, -1}), std::invalid_argument);
}

TEST(Iou, MatchesRasterOracleAndIsSymmetric) {
  Gen gen(11);
  for (int i = 0; i < 1000; ++i) {
    const Box a = gen.int_box(24, 1, 12);
    const Box b = gen.int_box(24, 1, 12);
    const auto o = oracle::raster_overlap(oracle::IBox::from(a), oracle::IBox::from(b));
    EXPECT_DOUBLE_EQ(iou(a, b), o.value());
    EXPECT_DOUBLE_EQ(iou(a, b), iou(b, a));
    EXPECT_GE(iou(a, b), 0.0);
    EXPECT_LE(iou(a, b), 1.0);
  }
}

TEST(Encode, Examples) {
  const Box anchor = Box::from_center(16, 16, 32, 32);
  EXPECT_EQ(encode(anchor, anchor), (RegressionTarget{0, 0, 0, 0}));
  const RegressionTarget t = encode(Box::from_center(20, 16, 64, 32), anchor);
  EXPECT_DOUBLE_EQ(t.bx, 0.125);
  EXPECT_DOUBLE_EQ(t.by, 0.0);
  EXPECT_DOUBLE_EQ(t.bw, std::log(2.0));
  EXPECT_DOUBLE_EQ(t.bh, 0.0);
}

TEST(Decode, Examples) {
  const Box anchor = Box::from_center(16, 16, 32, 32);
  EXPECT_EQ(decode({0, 0, 0, 0}, anchor), anchor);
  const Box g = decode({0.125, 0, std::log(2.0), 0}, anchor);
  EXPECT_NEAR(g.cx(), 20.0, 1e-12);
  EXPECT_NEAR(g.cy(), 16.0, 1e-12);
  EXPECT_NEAR(g.w, 64.0, 1e-12);
  EXPECT_NEAR(g.h, 32.0, 1e-12);
  const Box clamped = decode({0, 0, 100, -100}, anchor);
  EXPECT_NEAR(clamped.w, std::exp(4.0) * 32, 1e-9);
  EXPECT_NEAR(clamped.h, std::exp(-4.0) * 32, 1e-12);
}

TEST(EncodeDecode, RoundTripOnRandomPairs) {
  Gen gen(12);
  for (int i = 0; i < 10000; ++i) {
    const Box gt = gen.real_box(500, 2, 400);
    Box anchor = gen.real_box(500, 8, 400);
    // Decode clamps log size ratios to [-4, 4]; round trips hold inside that range.
    while (std::abs(std::log(gt.w / anchor.w)) > 4 || std::abs(std::log(gt.h / anchor.h)) > 4) {
      anchor = gen.real_box(500, 8, 400);
    }
    const Box back = decode(encode(gt, anchor), anchor);
    const double tol = 1e-6;
    EXPECT_NEAR(back.l, gt.l, tol * std::max(1.0, std::abs(gt.l)));
    EXPECT_NEAR(back.t, gt.t, tol * std::max(1.0, std::abs(gt.t)));
    EXPECT_NEAR(back.w, gt.w, tol * gt.w);
    EXPECT_NEAR(back.h, gt.h, tol * gt.h);
  }
}

TEST(ContextRegion, Examples) {
  EXPECT_EQ(context_region(Box{10, 20, 30, 40}), (Box{-20, 20, 90, 120}));
  EXPECT_EQ(context_region(Box{0, 0, 7, 5}), (Box{-7, 0, 21, 15}));
}

TEST(ContextRegion, AreaScalesByNineAndEightyOne) {
  Gen gen(13);
  for (int i = 0; i < 1000; ++i) {
    const Box b = gen.int_box(100, 1, 50);
    EXPECT_DOUBLE_EQ(context_region(b).area(), 9.0 * b.area());
    EXPECT_DOUBLE_EQ(context_region(context_region(b)).area(), 81.0 * b.area());
  }
}

TEST(ClipToImage, Examples) {
  EXPECT_EQ(clip_to_image(Box{5, 5, 10, 10}, 64, 64), (Box{5, 5, 10, 10}));
  EXPECT_EQ(clip_to_image(Box{-20, 20, 90, 120}, 64, 64), (Box{0, 20, 64, 44}));
  EXPECT_TRUE(clip_to_image(Box{70, 70, 10, 10}, 64, 64).empty());
  EXPECT_TRUE(clip_to_image(Box{-30, 0, 10, 10}, 64, 64).empty());
}

TEST(ClipToImage, MatchesIntervalIntersection) {
  Gen gen(14);
  for (int i = 0; i < 1000; ++i) {
    const Box b = gen.real_box(80, 1, 60);
    const double iw = 64, ih = 48;
    const Box c = clip_to_image(b, iw, ih);
    const double l = std::max(b.l, 0.0), r = std::min(b.r(), iw);
    const double t = std::max(b.t, 0.0), bt = std::min(b.b(), ih);
    if (r <= l || bt <= t) {
      EXPECT_TRUE(c.empty());
    } else {
      EXPECT_DOUBLE_EQ(c.l, l);
      EXPECT_DOUBLE_EQ(c.t, t);
      EXPECT_NEAR(c.w, r - l, 1e-12);
      EXPECT_NEAR(c.h, bt - t, 1e-12);
    }
  }
}

TEST(Nms, Examples) {
  EXPECT_TRUE(nms(std::vector<Box>{}, 0.5).empty());
  const std::vector<Box> one{{1, 2, 3, 4, 0.3}};
  EXPECT_EQ(nms(one, 0.5), one);
  const std::vector<Box> dup{{0, 0, 10, 10, 0.8}, {0, 0, 10, 10, 0.9}};
  const auto kept = nms(dup, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_DOUBLE_EQ(kept[0].score, 0.9);
}

TEST(Nms, EqualScoresKeepLowerIndex) {
  const std::vector<Box> boxes{{0, 0, 10, 10, 0.5}, {1, 0, 10, 10, 0.5}, {50, 50, 4, 4, 0.5}};
  EXPECT_EQ(nms_indices(boxes, 0.3), (std::vector<std::size_t>{0, 2}));
}

TEST(Nms, MatchesOracleOnRandomInstances) {
  Gen gen(15);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = gen.integer(1, 12);
    std::vector<Box> boxes;
    std::vector<oracle::IBox> ib;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      Box b = gen.int_box(20, 2, 10);
      b.score = gen.integer(0, 5) / 5.0;
      boxes.push_back(b);
      ib.push_back(oracle::IBox::from(b));
      scores.push_back(b.score);
    }
    const auto got = nms_indices(boxes, 0.4);
    EXPECT_EQ(got, oracle::nms(ib, scores, 2, 5));
    EXPECT_TRUE(oracle::nms_certificate(ib, scores, got, 2, 5));
    for (std::size_t k = 1; k < got.size(); ++k) EXPECT_GE(boxes[got[k - 1]].score, boxes[got[k]].score);
  }
}

TEST(Nms, DuplicatingAnInputKeepsGeometry) {
  Gen gen(16);
  auto geometry = [](const std::vector<Box>& v) {
    std::vector<std::array<double, 5>> g;
    for (const auto& b : v) g.push_back({b.l, b.t, b.w, b.h, b.score});
    return g;
  };
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Box> boxes;
    for (int i = gen.integer(1, 10); i > 0; --i) {
      Box b = gen.real_box(40, 2, 20);
      b.score = gen.real(0, 1);
      boxes.push_back(b);
    }
    const double thr = gen.real(0.1, 0.9);
    auto more = boxes;
    more.push_back(gen.pick(boxes));
    EXPECT_EQ(geometry(nms(boxes, thr)), geometry(nms(more, thr)));
  }
}

TEST(Nms, MaxKeepGivesPrefixOfFullRun) {
  Gen gen(17);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Box> boxes;
    for (int i = gen.integer(1, 30); i > 0; --i) {
      Box b = gen.real_box(60, 4, 20);
      b.score = gen.real(0, 1);
      boxes.push_back(b);
    }
    const auto full = nms_indices(boxes, 0.5);
    const std::size_t k = static_cast<std::size_t>(gen.integer(0, 10));
    const auto part = nms_indices(boxes, 0.5, k);
    ASSERT_EQ(part.size(), std::min(k, full.size()));
    EXPECT_TRUE(std::equal(part.begin(), part.end(), full.begin()));
  }
}
