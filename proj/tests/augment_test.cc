#include <gtest/gtest.h>

#include <set>

#include "lymphdet/augment.h"
#include "lymphdet/synthetic.h"

namespace lymphdet {
namespace {

struct Fixture {
  RgbImage image;
  CompiledMaps maps;
  AnnotationSet truth;
};

Fixture make_fixture(uint64_t seed) {
  std::mt19937_64 rng(seed);
  SyntheticScene s = generate_scene(SceneSpec{}, rng);
  return {s.image, compile_maps(s.truth, s.image.height(), s.image.width()), s.truth};
}

// Reflection for indices at most one period outside [0, n).
int reflect_once(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

TEST(MirrorPad, Identity) {
  GrayImage img(3, 4, 1);
  for (size_t i = 0; i < img.size(); ++i) img.values()[i] = static_cast<uint8_t>(i);
  EXPECT_EQ(mirror_pad(img, 0, 0, 0, 0).values(), img.values());
}

TEST(MirrorPad, RowExample) {
  GrayImage row(1, 3, 1);
  row.values() = {'a', 'b', 'c'};
  const GrayImage out = mirror_pad(row, 0, 0, 2, 0);
  EXPECT_EQ(out.values(), (std::vector<uint8_t>{'c', 'b', 'a', 'b', 'c'}));
}

TEST(MirrorPad, MatchesIndexOracle) {
  std::mt19937_64 rng(1);
  RgbImage img(8, 8, 3);
  for (auto& v : img.values()) v = static_cast<uint8_t>(rng());
  const RgbImage out = mirror_pad(img, 3, 3, 3, 3);
  ASSERT_EQ(out.height(), 14);
  for (int r = 0; r < 14; ++r) {
    for (int c = 0; c < 14; ++c) {
      for (int k = 0; k < 3; ++k) {
        EXPECT_EQ(out.at(r, c, k), img.at(reflect_once(r - 3, 8), reflect_once(c - 3, 8), k));
      }
    }
  }
  EXPECT_THROW(mirror_pad(img, 8, 0, 0, 0), InvalidInput);
}

TEST(ReflectIndex, Periodic) {
  EXPECT_EQ(reflect_index(-1, 5), 1);
  EXPECT_EQ(reflect_index(5, 5), 3);
  EXPECT_EQ(reflect_index(-4, 5), 4);
  EXPECT_EQ(reflect_index(-5, 5), 3);
  EXPECT_EQ(reflect_index(13, 5), 3);
  EXPECT_EQ(reflect_index(7, 1), 0);
  for (int i = -40; i < 40; ++i) {
    const int j = reflect_index(i, 6);
    EXPECT_TRUE(j >= 0 && j < 6);
    EXPECT_EQ(reflect_index(i + 10, 6), j);  // period 2(n-1)
  }
}

TEST(Flip, TwiceIsIdentity) {
  const Fixture f = make_fixture(2);
  for (Flip flip : {Flip::kHorizontal, Flip::kVertical}) {
    EXPECT_EQ(flip_image(flip_image(f.image, flip), flip).values(), f.image.values());
  }
}

TEST(ApplyPlan, IdentityCentresOnAnchor) {
  const Fixture f = make_fixture(3);
  for (double u : {0.0, 0.3, 0.99}) {
    AugmentPlan plan;
    plan.anchor_u = u;
    const TrainingPatch p = apply_plan(f.image, f.maps.labels, f.maps.weights, plan, 64);
    EXPECT_EQ(p.center, p.anchor);
    EXPECT_EQ(p.labels.at(32, 32), f.maps.labels.at(p.anchor.row, p.anchor.col));
    EXPECT_GT(p.labels.at(32, 32), 0);
    EXPECT_EQ(p.image.at(32, 32, 1), f.image.at(p.anchor.row, p.anchor.col, 1));
  }
}

TEST(ApplyPlan, FullTurnIsIdentity) {
  const Fixture f = make_fixture(4);
  AugmentPlan plain, turned;
  plain.anchor_u = turned.anchor_u = 0.5;
  turned.angle_deg = 360;
  const TrainingPatch a = apply_plan(f.image, f.maps.labels, f.maps.weights, plain, 96);
  const TrainingPatch b = apply_plan(f.image, f.maps.labels, f.maps.weights, turned, 96);
  EXPECT_EQ(a.labels.values(), b.labels.values());
  EXPECT_EQ(a.weights.values(), b.weights.values());
  for (size_t i = 0; i < a.image.size(); ++i) {
    EXPECT_LE(std::abs(int(a.image.values()[i]) - int(b.image.values()[i])), 2);
  }
}

TEST(ApplyPlan, PositiveCentresStayPositive) {
  const Fixture f = make_fixture(5);
  std::mt19937_64 rng(6);
  const int h = f.image.height(), w = f.image.width();
  for (int trial = 0; trial < 40; ++trial) {
    const AugmentPlan plan = draw_plan(rng);
    const TrainingPatch p = apply_plan(f.image, f.maps.labels, f.maps.weights, plan, 128);
    const Pixel origin{p.center.row - 64, p.center.col - 64};
    for (const Pixel& pp : f.truth.positive_points) {
      const PointF t = transform_point({double(pp.row), double(pp.col)}, h, w, plan);
      const int r = static_cast<int>(std::lround(t.row)) - origin.row;
      const int c = static_cast<int>(std::lround(t.col)) - origin.col;
      if (t.row < 0 || t.col < 0 || t.row > h - 1 || t.col > w - 1) continue;
      if (r < 0 || c < 0 || r >= 128 || c >= 128) continue;
      EXPECT_EQ(p.labels.at(r, c), kLabelPositive) << "angle " << plan.angle_deg;
    }
  }
}

TEST(ApplyPlan, ValuesStayCategoricalAndAnchorNearCentre) {
  const Fixture f = make_fixture(7);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const TrainingPatch p = sample_patch(f.image, f.maps.labels, f.maps.weights, rng,
                                         AugmentOptions{64, 20});
    EXPECT_LE(std::abs(p.anchor.row - p.center.row), 20);
    EXPECT_LE(std::abs(p.anchor.col - p.center.col), 20);
    for (auto v : p.labels.values()) EXPECT_TRUE(v <= 2);
    for (auto v : p.weights.values()) EXPECT_TRUE(v == 0.0f || v == 0.5f || v == 1.0f);
  }
}

TEST(ApplyPlan, DeterministicUnderSeed) {
  const Fixture f = make_fixture(9);
  std::mt19937_64 a(10), b(10);
  for (int i = 0; i < 5; ++i) {
    const TrainingPatch x = sample_patch(f.image, f.maps.labels, f.maps.weights, a);
    const TrainingPatch y = sample_patch(f.image, f.maps.labels, f.maps.weights, b);
    EXPECT_EQ(x.image.values(), y.image.values());
    EXPECT_EQ(x.labels.values(), y.labels.values());
  }
}

TEST(ApplyPlan, NeedsALabelledPixel) {
  RgbImage img(16, 16, 3);
  LabelMap lab(16, 16, 1, 0);
  WeightMap wgt(16, 16, 1, 0.0f);
  EXPECT_THROW(apply_plan(img, lab, wgt, AugmentPlan{}, 8), InvalidInput);
}

TEST(DrawPlan, CoversAllBranches) {
  std::mt19937_64 rng(11);
  std::set<int> flips;
  int rotated = 0;
  for (int i = 0; i < 400; ++i) {
    const AugmentPlan p = draw_plan(rng);
    flips.insert(static_cast<int>(p.flip));
    if (p.angle_deg != 0) {
      ++rotated;
      EXPECT_GE(p.angle_deg, 1);
      EXPECT_LE(p.angle_deg, 360);
    }
    EXPECT_LE(std::abs(p.dx), 20);
  }
  EXPECT_EQ(flips.size(), 3u);
  EXPECT_GT(rotated, 150);
  EXPECT_LT(rotated, 250);
}

}  // namespace
}  // namespace lymphdet
