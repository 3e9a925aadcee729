#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cisseg/calib/calib_distill.hpp"
#include "cisseg/dapd/dapd.hpp"
#include "cisseg/diffcore/gradcheck.hpp"
#include "cisseg/diffcore/ops.hpp"
#include "cisseg/harness/trainer.hpp"
#include "cisseg/pseudo/pseudo.hpp"

namespace cisseg {

/// Worst finite-difference error of one loss over a batch of random instances.
struct GradientReport {
  std::string loss;
  std::size_t instances = 0;
  double worst = 0.0;
};

namespace detail {

// One random incremental-step problem small enough for central differences.
struct GradientInstance {
  StepClasses layout;
  std::size_t B = 1, V = 1;
  Array logits;         // [B, S, V]; doubles as the student features (K = S)
  Array teacher_probs;  // [B, 1 + old, V]
  Array teacher_feats;  // [B, S, V]
  std::vector<int> gt;
  std::vector<int> regions;
  std::vector<int> teacher_regions;
  std::vector<std::uint8_t> old_mask, cur_mask;
  AffinityMap aff_old, aff_seen;
  PrototypeStore globals;
};

inline Array random_array(Shape s, std::mt19937_64& rng, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  Array a(std::move(s), 0.0);
  for (double& x : a.data()) x = n(rng);
  return a;
}

inline GradientInstance random_instance(std::mt19937_64& rng) {
  GradientInstance g;
  std::uniform_int_distribution<int> n_old(1, 2), n_cur(1, 2), n_b(1, 2), n_v(4, 16);
  const int o = n_old(rng), c = n_cur(rng);
  for (int i = 1; i <= o; ++i) g.layout.old_classes.push_back(i);
  for (int i = 1; i <= c; ++i) g.layout.current_classes.push_back(o + i);
  g.B = static_cast<std::size_t>(n_b(rng));
  g.V = static_cast<std::size_t>(n_v(rng));
  const std::size_t S = g.layout.student_channels(), T = g.layout.teacher_channels();
  const std::size_t N = g.B * g.V;

  g.logits = random_array(Shape{g.B, S, g.V}, rng, 1.5);
  g.teacher_probs = softmax(random_array(Shape{g.B, T, g.V}, rng, 1.5), 1);
  g.teacher_feats = random_array(Shape{g.B, S, g.V}, rng, 1.0);

  std::uniform_int_distribution<std::size_t> pick_cur(0, g.layout.current_classes.size());
  std::uniform_int_distribution<std::size_t> pick_seen(0, g.layout.seen().size());
  const std::vector<int> seen = g.layout.seen();
  g.gt.resize(N);
  g.regions.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t a = pick_cur(rng);
    g.gt[i] = a == 0 ? 0 : g.layout.current_classes[a - 1];
    const std::size_t r = pick_seen(rng);
    g.regions[i] = r == 0 ? 0 : seen[r - 1];
  }
  g.regions[0] = 0;  // the background prototype must exist
  g.teacher_regions = remap_labels(g.regions, g.layout.old_classes);

  PseudoLabelMap pl{g.regions, std::vector<double>(N, 0.0)};
  const RegionMasks m = region_masks(pl, g.layout.old_classes, g.layout.current_classes);
  g.old_mask = m.old_region;
  g.cur_mask = m.current_region;

  auto protos = [&](const std::vector<int>& classes) {
    PrototypeList p;
    for (int cls : classes) {
      const Array v = random_array(Shape{S}, rng, 1.0);
      p.emplace_back(cls, v.values());
    }
    return p;
  };
  g.aff_old = affinity(g.teacher_feats, protos(g.layout.old_classes));
  g.aff_seen = affinity(random_array(Shape{g.B, S, g.V}, rng, 1.0), protos(seen));

  g.globals = PrototypeStore(S, 1);
  std::vector<int> global_classes{0};
  global_classes.insert(global_classes.end(), g.layout.old_classes.begin(), g.layout.old_classes.end());
  for (int cls : global_classes) {
    const Array v = random_array(Shape{S}, rng, 1.0);
    g.globals.cma_update(cls, v.values(), 1);
  }
  return g;
}

inline Var instance_dapd(const GradientInstance& g, Var features, const LossWeights& w) {
  std::vector<int> pool{0};
  for (int c : g.layout.seen()) pool.push_back(c);
  std::vector<int> tpool{0};
  for (int c : g.layout.old_classes) tpool.push_back(c);
  const ops::SegmentMeans locals = ops::segment_mean(features, g.regions, pool);
  const LocalPrototypes teacher = local_prototypes(g.teacher_feats, g.teacher_regions, tpool, PrototypeSource::Teacher);
  return dapd_loss(locals, teacher, g.globals, w, g.layout);
}

}  // namespace detail

/// Central-difference check of every loss, with respect to student logits
/// (ce, orcd, crcd, total) or features (dapd), over `instances` random problems.
inline std::vector<GradientReport> run_gradient_suite(std::size_t instances, std::uint64_t seed,
                                                      double eps = 1e-6) {
  std::mt19937_64 rng(seed);
  const LossWeights w;
  std::map<std::string, double> worst;
  const std::vector<std::string> names{"unbiased_ce", "orcd_loss", "crcd_loss", "dapd_loss", "total_loss"};
  for (const auto& n : names) worst[n] = 0.0;

  for (std::size_t i = 0; i < instances; ++i) {
    const detail::GradientInstance g = detail::random_instance(rng);
    auto probs = [](Var x) { return ops::softmax(x, 1); };
    auto ce = [&](Tape&, Var x) { return unbiased_ce(probs(x), g.gt, g.layout); };
    auto orcd = [&](Tape&, Var x) { return orcd_loss(probs(x), g.teacher_probs, g.aff_old, g.old_mask, g.layout); };
    auto crcd = [&](Tape&, Var x) {
      return crcd_loss(probs(x), g.teacher_probs, g.aff_seen, g.cur_mask, g.layout);
    };
    auto dapd = [&](Tape&, Var x) { return detail::instance_dapd(g, x, w); };
    auto total = [&](Tape& t, Var x) {
      return total_loss(ce(t, x), orcd(t, x), crcd(t, x), dapd(t, x), w);
    };
    worst["unbiased_ce"] = std::max(worst["unbiased_ce"], finite_diff_check(ce, g.logits, eps));
    worst["orcd_loss"] = std::max(worst["orcd_loss"], finite_diff_check(orcd, g.logits, eps));
    worst["crcd_loss"] = std::max(worst["crcd_loss"], finite_diff_check(crcd, g.logits, eps));
    worst["dapd_loss"] = std::max(worst["dapd_loss"], finite_diff_check(dapd, g.logits, eps));
    worst["total_loss"] = std::max(worst["total_loss"], finite_diff_check(total, g.logits, eps));
  }
  std::vector<GradientReport> out;
  for (const auto& n : names) out.push_back({n, instances, worst[n]});
  return out;
}

}  // namespace cisseg
