#include <gtest/gtest.h>

#include <random>

#include "cisseg/prototypes/finalize.hpp"
#include "cisseg/prototypes/prototypes.hpp"
#include "test_util.hpp"

using namespace cisseg;

TEST(Cma, WorkedExample) {
  PrototypeStore s(1);
  s.cma_update(1, std::vector<double>{4.0}, 2);  // p = [2], N = 2
  EXPECT_EQ(s.mean(1), std::vector<double>{2.0});
  s.cma_update(1, std::vector<double>{12.0}, 2);  // batch {5, 7}
  EXPECT_EQ(s.mean(1), std::vector<double>{4.0});
  EXPECT_EQ(s.count(1), 4u);
}

TEST(Cma, ZeroCountIsNoOpAndErrors) {
  PrototypeStore s(2);
  s.cma_update(3, std::vector<double>{1.0, 1.0}, 0);
  EXPECT_FALSE(s.contains(3));
  EXPECT_THROW(s.cma_update(3, std::vector<double>{1.0, 1.0}, -1), ArgumentError);
  EXPECT_THROW(s.cma_update(3, std::vector<double>{1.0}, 1), ShapeError);
  EXPECT_THROW(s.mean(3), ArgumentError);
}

TEST(Cma, OrderOfBatchesDoesNotMatter) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 1);
  std::vector<std::vector<double>> batches(10, std::vector<double>(3));
  for (auto& b : batches)
    for (double& x : b) x = n(rng);
  PrototypeStore fwd(3), rev(3);
  for (std::size_t i = 0; i < batches.size(); ++i) fwd.cma_update(0, batches[i], 1 + static_cast<long long>(i));
  for (std::size_t i = batches.size(); i-- > 0;) rev.cma_update(0, batches[i], 1 + static_cast<long long>(i));
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(fwd.mean(0)[k], rev.mean(0)[k], 1e-12);
  EXPECT_EQ(fwd.count(0), rev.count(0));
}

TEST(LocalPrototypes, MeansAndAbsentClasses) {
  // B = 1, K = 2, V = 4
  const Array f(Shape{1, 2, 4}, std::vector<double>{1, 2, 3, 4, 10, 20, 30, 40});
  const std::vector<int> labels{0, 1, 1, 0};
  const LocalPrototypes lp = local_prototypes(f, labels, {0, 1, 2});
  EXPECT_EQ(lp.vectors.at(0), (std::vector<double>{2.5, 25.0}));
  EXPECT_EQ(lp.vectors.at(1), (std::vector<double>{2.5, 25.0}));
  EXPECT_FALSE(lp.contains(2));
  EXPECT_EQ(lp.counts.at(1), 2u);
  EXPECT_THROW(local_prototypes(f, std::vector<int>{0, 1}, {0}), ShapeError);
}

TEST(PrototypeStore, AccumulateMatchesPooledMean) {
  std::mt19937_64 rng(7);
  const Array a = testutil::random_array(Shape{2, 3, 5}, rng);
  const Array b = testutil::random_array(Shape{1, 3, 5}, rng);
  std::uniform_int_distribution<int> lab(0, 2);
  std::vector<int> la(10), lb(5);
  for (int& x : la) x = lab(rng);
  for (int& x : lb) x = lab(rng);
  PrototypeStore s(3);
  s.accumulate(a, la, {0, 1, 2});
  s.accumulate(b, lb, {0, 1, 2});
  for (int c = 0; c <= 2; ++c) {
    std::vector<double> sum(3, 0.0);
    std::size_t n = 0;
    auto add = [&](const Array& f, const std::vector<int>& l, std::size_t B) {
      for (std::size_t bb = 0; bb < B; ++bb)
        for (std::size_t v = 0; v < 5; ++v)
          if (l[bb * 5 + v] == c) {
            ++n;
            for (std::size_t k = 0; k < 3; ++k) sum[k] += f[(bb * 3 + k) * 5 + v];
          }
    };
    add(a, la, 2);
    add(b, lb, 1);
    if (n == 0) continue;
    EXPECT_EQ(s.count(c), n);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(s.mean(c)[k], sum[k] / n, 1e-12);
  }
}

TEST(PrototypeStore, PersistRoundTripIsExact) {
  testutil::TempDir dir("proto");
  PrototypeStore s(2, 3);
  s.cma_update(0, std::vector<double>{0.1, 1.0 / 3.0}, 3);
  s.cma_update(4, std::vector<double>{-2e-300, 7.25}, 1);
  const PrototypeStore back = persist_roundtrip(s, dir.path / "p.proto");
  EXPECT_TRUE(back == s);
  EXPECT_EQ(back.step(), 3);
}

TEST(PrototypeStore, TruncatedFileFails) {
  testutil::TempDir dir("proto_trunc");
  PrototypeStore s(2, 1);
  s.cma_update(0, std::vector<double>{1, 2}, 1);
  const auto path = dir.path / "p.proto";
  s.save(path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  EXPECT_THROW(PrototypeStore::load(path), IoError);
}

TEST(Finalize, RecomputesBackgroundAndCarriesMissingClasses) {
  SegNet net(4, kPlanarKernel, {1, 2}, 3);
  const ModelSnapshot snap = snapshot_freeze(net, 2);
  const auto base = generate_collection(1, {1, 2, 3}, {16, 16, 1}, 2);
  const StepDataset ds = make_step_dataset(base, {3});
  std::vector<std::vector<int>> regions;
  for (const auto& v : base) regions.push_back(remap_labels(v.labels, {1, 3}));  // class 2 unseen this step

  PrototypeStore prev(4, 1);
  prev.cma_update(0, std::vector<double>{9, 9, 9, 9}, 1);
  prev.cma_update(2, std::vector<double>{5, 5, 5, 5}, 5);
  const PrototypeStore g = finalize_step_globals(snap, ds, regions, {1, 2, 3}, 2, &prev);

  PrototypeStore expect(4, 2);
  for (std::size_t i = 0; i < base.size(); ++i) {
    const auto out = snap.forward(base[i].intensity.reshaped(Shape{1, 1, 16, 16, 1}));
    expect.accumulate(out.features, regions[i], {0, 1, 3});
  }
  for (int c : {0, 1, 3}) {
    EXPECT_EQ(g.mean(c), expect.mean(c));
    EXPECT_EQ(g.count(c), expect.count(c));
  }
  EXPECT_EQ(g.mean(2), prev.mean(2));  // carried over
  EXPECT_EQ(g.count(2), 5u);
  EXPECT_THROW(finalize_step_globals(snap, StepDataset{}, {}, {1}, 2), ArgumentError);
}
