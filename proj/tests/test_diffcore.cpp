#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cisseg/diffcore/gradcheck.hpp"
#include "cisseg/diffcore/numeric.hpp"
#include "cisseg/diffcore/ops.hpp"
#include "test_util.hpp"

using namespace cisseg;

TEST(Array, RejectsBadShapes) {
  EXPECT_THROW(Array(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Array(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Array a(Shape{2, 3}, 1.5);
  EXPECT_EQ(a.size(), 6u);
  EXPECT_THROW(a.reshaped(Shape{4}), ShapeError);
  EXPECT_EQ(a.reshaped(Shape{3, 2}).shape(), (Shape{3, 2}));
}

TEST(Array, RequireFinite) {
  Array a(Shape{2}, 0.0);
  EXPECT_NO_THROW(a.require_finite("a"));
  a[1] = std::nan("");
  EXPECT_THROW(a.require_finite("a"), NumericError);
}

TEST(Softmax, KnownValues) {
  const Array p = softmax(Array::vector({1, 2, 3}), 0);
  EXPECT_NEAR(p[0], 0.0900306, 1e-6);
  EXPECT_NEAR(p[1], 0.2447285, 1e-6);
  EXPECT_NEAR(p[2], 0.6652410, 1e-6);
}

TEST(Softmax, HugeLogitsStayFinite) {
  const Array p = softmax(Array::vector({1000, 1000}), 0);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, SlicesSumToOneAndShiftKeepsArgmax) {
  std::mt19937_64 rng(3);
  const Array x = testutil::random_array(Shape{2, 5, 7}, rng, 4.0);
  const Array p = softmax(x, 1);
  Array shifted = x;
  for (double& v : shifted.data()) v += 123.25;
  const Array ps = softmax(shifted, 1);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t v = 0; v < 7; ++v) {
      double s = 0;
      std::size_t am = 0, ams = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        s += p[(b * 5 + c) * 7 + v];
        if (p[(b * 5 + c) * 7 + v] > p[(b * 5 + am) * 7 + v]) am = c;
        if (ps[(b * 5 + c) * 7 + v] > ps[(b * 5 + ams) * 7 + v]) ams = c;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
      EXPECT_EQ(am, ams);
    }
}

TEST(Softmax, RejectsNonFinite) {
  EXPECT_THROW(softmax(Array::vector({1.0, std::nan("")}), 0), NumericError);
}

TEST(BernoulliKl, KnownValuesAndSign) {
  EXPECT_NEAR(bernoulli_kl(0.9, 0.8), 0.0366900, 1e-6);
  EXPECT_DOUBLE_EQ(bernoulli_kl(0.3, 0.3), 0.0);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) EXPECT_GE(bernoulli_kl(u(rng), u(rng)), 0.0);
  // endpoints are clamped rather than producing infinities
  EXPECT_TRUE(std::isfinite(bernoulli_kl(1.0, 0.0)));
  EXPECT_THROW(bernoulli_kl(Array::vector({0.1}), Array::vector({0.1, 0.2})), ShapeError);
}

TEST(Cosine, ZeroVectorAndRange) {
  const std::vector<double> z{0, 0}, a{1, 0}, b{-2, 0};
  EXPECT_EQ(cosine_similarity(z, a), 0.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(a, b), -1.0);
  EXPECT_THROW(cosine_similarity(a, std::vector<double>{1.0}), ShapeError);
}

TEST(Tape, BackwardNeedsScalar) {
  Tape t;
  Var x = t.leaf(Array::vector({1, 2}), true);
  EXPECT_THROW(t.backward(x), ShapeError);
  Tape off(false);
  Var y = off.leaf(Array::scalar(1.0), false);
  EXPECT_THROW(off.backward(y), ArgumentError);
}

TEST(Tape, GradOfDotIsWeights) {
  Tape t;
  Var x = t.leaf(Array::vector({1, 2, 3}), true);
  Var y = ops::dot_constant(x, Array::vector({4, 5, 6}));
  EXPECT_DOUBLE_EQ(y.value().item(), 32.0);
  t.backward(y);
  EXPECT_EQ(t.grad(x).values(), (std::vector<double>{4, 5, 6}));
}

namespace {

double check(const TapeFunction& f, Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return finite_diff_check(f, testutil::random_array(std::move(s), rng));
}

}  // namespace

TEST(Gradients, SoftmaxRelu) {
  std::mt19937_64 rng(9);
  const Array c = testutil::random_array(Shape{2, 3, 4}, rng);
  auto f = [&](Tape&, Var x) { return ops::dot_constant(ops::softmax(x, 1), c); };
  EXPECT_LT(check(f, Shape{2, 3, 4}, 1), 1e-7);
  auto g = [&](Tape&, Var x) { return ops::dot_constant(ops::relu(x), c); };
  EXPECT_LT(check(g, Shape{2, 3, 4}, 2), 1e-7);
}

TEST(Gradients, Conv3dAllInputs) {
  std::mt19937_64 rng(5);
  const Array input = testutil::random_array(Shape{2, 2, 5, 4, 3}, rng);
  const Array weight = testutil::random_array(Shape{3, 2, 3, 3, 3}, rng);
  const Array bias = testutil::random_array(Shape{3}, rng);
  const Array probe = testutil::random_array(Shape{2, 3, 5, 4, 3}, rng);
  auto wrt_input = [&](Tape& t, Var x) {
    return ops::dot_constant(ops::conv3d(x, t.constant(weight), t.constant(bias)), probe);
  };
  auto wrt_weight = [&](Tape& t, Var w) {
    return ops::dot_constant(ops::conv3d(t.constant(input), w, t.constant(bias)), probe);
  };
  auto wrt_bias = [&](Tape& t, Var b) {
    return ops::dot_constant(ops::conv3d(t.constant(input), t.constant(weight), b), probe);
  };
  EXPECT_LT(finite_diff_check(wrt_input, input), 1e-7);
  EXPECT_LT(finite_diff_check(wrt_weight, weight), 1e-7);
  EXPECT_LT(finite_diff_check(wrt_bias, bias), 1e-7);
}

TEST(Conv3d, IdentityKernelAndPadding) {
  Tape t(false);
  Array x(Shape{1, 1, 3, 3, 1});
  for (std::size_t i = 0; i < 9; ++i) x[i] = static_cast<double>(i);
  Array w(Shape{1, 1, 3, 3, 1}, 0.0);
  w[4] = 1.0;  // centre tap
  Var y = ops::conv3d(t.constant(x), t.constant(w), t.constant(Array(Shape{1}, 0.5)));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(y.value()[i], i + 0.5);
  // all-ones 3x3 kernel at a corner sees four in-bounds voxels
  Var s = ops::conv3d(t.constant(x), t.constant(Array(Shape{1, 1, 3, 3, 1}, 1.0)), t.constant(Array(Shape{1}, 0.0)));
  EXPECT_DOUBLE_EQ(s.value()[0], 0 + 1 + 3 + 4);
  EXPECT_THROW(ops::conv3d(t.constant(x), t.constant(Array(Shape{1, 1, 2, 3, 1})), t.constant(Array(Shape{1}))),
               ShapeError);
}

TEST(Gradients, SegmentMeanAndCombineRows) {
  const std::vector<int> labels{0, 1, 1, 2, 0, 2, 2, 5};
  std::mt19937_64 rng(4);
  const Array probe = testutil::random_array(Shape{2, 3}, rng);
  auto f = [&](Tape&, Var x) {
    ops::SegmentMeans m = ops::segment_mean(x, labels, {0, 2, 7});
    return ops::dot_constant(ops::combine_rows(*m.means, {{{0, 1.0}, {1, 0.5}}, {{1, 2.0}}}), probe);
  };
  EXPECT_LT(check(f, Shape{2, 3, 4}, 3), 1e-7);
}

TEST(SegmentMean, SkipsAbsentClasses) {
  Tape t(false);
  Array f(Shape{1, 1, 4}, std::vector<double>{1, 2, 3, 10});
  const std::vector<int> labels{0, 0, 1, 3};
  ops::SegmentMeans m = ops::segment_mean(t.constant(f), labels, {0, 1, 2});
  ASSERT_EQ(m.classes, (std::vector<int>{0, 1}));
  EXPECT_EQ(m.counts, (std::vector<std::size_t>{2, 1}));
  EXPECT_DOUBLE_EQ(m.means->value()[0], 1.5);
  EXPECT_DOUBLE_EQ(m.means->value()[1], 3.0);
  EXPECT_FALSE(ops::segment_mean(t.constant(f), labels, {9}).means.has_value());
}

TEST(Gradients, MeanRowSqDistance) {
  std::mt19937_64 rng(8);
  const Array target = testutil::random_array(Shape{3, 4}, rng);
  auto f = [&](Tape&, Var q) { return ops::mean_row_sq_distance(q, target); };
  EXPECT_LT(check(f, Shape{3, 4}, 6), 1e-7);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A node whose backward deliberately reports twice the true derivative.
  auto f = [](Tape& t, Var x) {
    Array y = Array::scalar(x.value()[0] * x.value()[0]);
    return t.record(std::move(y), {x}, [x](Tape& tt, const Array& g) {
      Array gx(x.shape(), 0.0);
      gx[0] = g[0] * 4.0 * tt.value(x)[0];
      tt.accumulate(x, gx);
    });
  };
  EXPECT_GT(finite_diff_check(f, Array::vector({1.5})), 0.5);
}
