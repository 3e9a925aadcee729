#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cisseg/calib/calib_distill.hpp"
#include "cisseg/diffcore/ops.hpp"
#include "test_util.hpp"

using namespace cisseg;

namespace {

Array voxel(std::vector<double> p) {
  const std::size_t c = p.size();
  return Array(Shape{1, c, 1}, std::move(p));
}

const std::vector<std::uint8_t> kOn{1};
const std::vector<std::uint8_t> kOff{0};

}  // namespace

TEST(Affinity, WorkedExample) {
  const AffinityMap a = affinity(voxel({1, 0}), {{1, {1, 0}}, {2, {0, 1}}});
  EXPECT_NEAR(a.weights[0], 0.731059, 1e-6);
  EXPECT_NEAR(a.weights[1], 0.268941, 1e-6);
  EXPECT_EQ(a.index_of(2), 1);
  EXPECT_EQ(a.index_of(9), -1);
}

TEST(Affinity, SingletonAndScaleInvariance) {
  EXPECT_DOUBLE_EQ(affinity(voxel({0.3, 2}), {{1, {1, 1}}}).weights[0], 1.0);
  const PrototypeList protos{{1, {1, 0.5}}, {2, {-0.2, 1}}, {3, {0.7, -0.7}}};
  const AffinityMap a = affinity(voxel({0.3, 0.9}), protos);
  const AffinityMap b = affinity(voxel({1.5, 4.5}), protos);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.weights[i], b.weights[i], 1e-12);
}

TEST(Affinity, Errors) {
  EXPECT_THROW(affinity(voxel({1, 0}), {}), ArgumentError);
  EXPECT_THROW(affinity(voxel({1, 0}), {{1, {1, 0, 0}}}), ShapeError);
}

TEST(Fold, WorkedExamples) {
  const StepClasses layout{{1}, {2}};
  const Array f = fold_new_into_bg(voxel({0.05, 0.9, 0.05}), layout);
  EXPECT_NEAR(f[0], 0.1, 1e-15);
  EXPECT_EQ(f[1], 0.9);
  const Array u = fold_new_into_bg(voxel({1.0 / 3, 1.0 / 3, 1.0 / 3}), layout);
  EXPECT_NEAR(u[0], 2.0 / 3, 1e-15);
  const StepClasses first{{}, {1, 2}};
  // step 1 has no old classes: everything folds into one channel
  EXPECT_THROW(fold_new_into_bg(voxel({0.5, 0.5}), layout), ShapeError);
  EXPECT_NEAR(fold_new_into_bg(voxel({0.2, 0.3, 0.5}), first)[0], 1.0, 1e-15);
}

TEST(Orcd, WorkedExampleAndEmptyMask) {
  Tape t(false);
  const StepClasses layout{{1}, {2}};
  Var s = t.constant(voxel({0.05, 0.9, 0.05}));
  const AffinityMap a{voxel({1.0}), {1}};
  EXPECT_NEAR(orcd_loss(s, voxel({0.2, 0.8}), a, kOn, layout).value().item(), 0.036690, 1e-6);
  EXPECT_EQ(orcd_loss(s, voxel({0.2, 0.8}), a, kOff, layout).value().item(), 0.0);
  EXPECT_EQ(orcd_loss(s, voxel({0.1, 0.9}), a, kOn, layout).value().item(), 0.0);
}

TEST(Crcd, WorkedExampleAndModes) {
  Tape t(false);
  const StepClasses layout{{1}, {2}};
  Var s = t.constant(voxel({0.05, 0.9, 0.05}));
  const AffinityMap old_only{voxel({1.0}), {1}};
  EXPECT_NEAR(crcd_loss(s, voxel({0.2, 0.8}), old_only, kOn, layout).value().item(), 0.036690, 1e-6);
  EXPECT_EQ(crcd_loss(s, voxel({0.2, 0.8}), old_only, kOff, layout).value().item(), 0.0);

  // the new class only contributes in zero-target mode
  const AffinityMap seen{voxel({0.5, 0.5}), {1, 2}};
  const double skip =
      crcd_loss(s, voxel({0.1, 0.9}), seen, kOn, layout, KlDirection::StudentTeacher, CrcdNewClassMode::Skip)
          .value()
          .item();
  const double zero =
      crcd_loss(s, voxel({0.1, 0.9}), seen, kOn, layout, KlDirection::StudentTeacher, CrcdNewClassMode::ZeroTarget)
          .value()
          .item();
  EXPECT_EQ(skip, 0.0);
  EXPECT_NEAR(zero, 0.5 * bernoulli_kl(0.05, 0.0), 1e-12);
}

TEST(UnbiasedCe, WorkedExamples) {
  Tape t(false);
  const StepClasses layout{{1}, {2}};
  Var s = t.constant(voxel({0.3, 0.5, 0.2}));
  EXPECT_NEAR(unbiased_ce(s, std::vector<int>{0}, layout).value().item(), 0.223144, 1e-6);
  EXPECT_NEAR(unbiased_ce(s, std::vector<int>{2}, layout).value().item(), 1.609438, 1e-6);
  EXPECT_NEAR(unbiased_ce(s, std::vector<int>{0}, layout, CeMode::Standard).value().item(), -std::log(0.3), 1e-12);
  EXPECT_THROW(unbiased_ce(s, std::vector<int>{1}, layout), ArgumentError);
  EXPECT_THROW(unbiased_ce(s, std::vector<int>{0, 0}, layout), ShapeError);
}

TEST(UnbiasedCe, FirstStepIsStandardCe) {
  std::mt19937_64 rng(12);
  const StepClasses layout{{}, {1, 2}};
  const Array p = softmax(testutil::random_array(Shape{2, 3, 6}, rng), 1);
  std::uniform_int_distribution<int> lab(0, 2);
  std::vector<int> gt(12);
  for (int& g : gt) g = lab(rng);
  Tape t(false);
  const double u = unbiased_ce(t.constant(p), gt, layout).value().item();
  const double s = unbiased_ce(t.constant(p), gt, layout, CeMode::Standard).value().item();
  EXPECT_EQ(u, s);
}

TEST(CalibratedLosses, NonNegativeOnRandomInputs) {
  std::mt19937_64 rng(21);
  const StepClasses layout{{1, 2}, {3}};
  for (int trial = 0; trial < 50; ++trial) {
    Tape t(false);
    Var s = t.constant(softmax(testutil::random_array(Shape{1, 4, 8}, rng, 2.0), 1));
    const Array teach = softmax(testutil::random_array(Shape{1, 3, 8}, rng, 2.0), 1);
    const AffinityMap a_old = affinity(testutil::random_array(Shape{1, 3, 8}, rng), {{1, {1, 0, 0}}, {2, {0, 1, 0}}});
    const AffinityMap a_seen =
        affinity(testutil::random_array(Shape{1, 3, 8}, rng), {{1, {1, 0, 0}}, {2, {0, 1, 0}}, {3, {0, 0, 1}}});
    std::vector<std::uint8_t> mask(8);
    for (auto& m : mask) m = static_cast<std::uint8_t>(rng() & 1u);
    EXPECT_GE(orcd_loss(s, teach, a_old, mask, layout).value().item(), 0.0);
    EXPECT_GE(crcd_loss(s, teach, a_seen, mask, layout).value().item(), 0.0);
  }
}

TEST(CalibratedLosses, ShapeMismatch) {
  Tape t(false);
  const StepClasses layout{{1}, {2}};
  Var s = t.constant(voxel({0.3, 0.5, 0.2}));
  const AffinityMap a{voxel({1.0}), {1}};
  EXPECT_THROW(orcd_loss(s, voxel({0.2, 0.3, 0.5}), a, kOn, layout), ShapeError);
  EXPECT_THROW(orcd_loss(t.constant(voxel({0.5, 0.5})), voxel({0.2, 0.8}), a, kOn, layout), ShapeError);
}
