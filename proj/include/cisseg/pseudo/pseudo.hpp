#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cisseg/diffcore/array.hpp"
#include "cisseg/diffcore/numeric.hpp"

namespace cisseg {

inline constexpr double kDefaultTau = 0.7;

/// Pseudo-labels Ỹ with the teacher entropy u that gated them.
struct PseudoLabelMap {
  std::vector<int> labels;         // [B * V]
  std::vector<double> uncertainty; // [B * V], natural-log entropy, >= 0
};

/// Old-region / current-region indicator masks; they partition the voxels.
struct RegionMasks {
  std::vector<std::uint8_t> old_region;
  std::vector<std::uint8_t> current_region;

  std::size_t old_count() const { return count(old_region); }
  std::size_t current_count() const { return count(current_region); }

 private:
  static std::size_t count(const std::vector<std::uint8_t>& m) {
    std::size_t n = 0;
    for (auto v : m) n += v;
    return n;
  }
};

/// Entropy -sum_c p ln p along the channel axis of [B, C, spatial...] probabilities.
/// Output is [B * V] in batch-major voxel order.
inline std::vector<double> entropy_map(const Array& probs) {
  const Shape& s = probs.shape();
  if (s.size() < 2) throw ShapeError("entropy_map expects [B, C, spatial...] probabilities");
  const std::size_t B = s[0], C = s[1];
  const std::size_t V = probs.size() / (B * C);
  std::vector<double> u(B * V, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t v = 0; v < V; ++v) {
      double total = 0.0, h = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double p = probs[(b * C + c) * V + v];
        if (!std::isfinite(p) || p < -1e-12) throw NumericError("entropy_map: invalid probability");
        total += p;
        h -= p * std::log(clamp_probability(p));
      }
      if (std::abs(total - 1.0) > 1e-6) {
        throw NumericError("entropy_map: probabilities sum to " + std::to_string(total) + ", not 1");
      }
      u[b * V + v] = std::max(0.0, h);
    }
  }
  return u;
}

/// Entropy-gated pseudo-labels.
///
/// `teacher_probs` is [B, 1 + old, spatial...] with channel j >= 1 standing for
/// `old_classes[j - 1]`. Voxels with ground-truth foreground keep it; a
/// background voxel takes the teacher's argmax class when that argmax is not
/// background and its entropy is below `tau`. Ties go to the lowest channel.
inline PseudoLabelMap pseudo_labels(std::span<const int> gt, const Array& teacher_probs,
                                    const std::vector<int>& old_classes, double tau = kDefaultTau) {
  if (!(tau >= 0.0)) throw ArgumentError("tau must be non-negative");
  const Shape& s = teacher_probs.shape();
  if (s.size() < 2 || s[1] != old_classes.size() + 1) {
    throw ShapeError("teacher probabilities " + shape_string(s) + " do not cover background + " +
                     std::to_string(old_classes.size()) + " old classes");
  }
  const std::size_t B = s[0], C = s[1];
  const std::size_t V = teacher_probs.size() / (B * C);
  if (gt.size() != B * V) {
    throw ShapeError("pseudo_labels: " + std::to_string(gt.size()) + " labels for " + std::to_string(B * V) +
                     " voxels");
  }
  PseudoLabelMap out;
  out.uncertainty = entropy_map(teacher_probs);
  out.labels.assign(gt.begin(), gt.end());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t v = 0; v < V; ++v) {
      const std::size_t i = b * V + v;
      if (gt[i] != 0) continue;
      std::size_t best = 0;
      double best_p = teacher_probs[(b * C) * V + v];
      for (std::size_t c = 1; c < C; ++c) {
        const double p = teacher_probs[(b * C + c) * V + v];
        if (p > best_p) {
          best_p = p;
          best = c;
        }
      }
      if (best != 0 && out.uncertainty[i] < tau) out.labels[i] = old_classes[best - 1];
    }
  }
  return out;
}

inline RegionMasks region_masks(const PseudoLabelMap& pl, const std::vector<int>& old_classes,
                                const std::vector<int>& current_classes) {
  const std::set<int> old(old_classes.begin(), old_classes.end());
  const std::set<int> cur(current_classes.begin(), current_classes.end());
  RegionMasks m;
  m.old_region.resize(pl.labels.size());
  m.current_region.resize(pl.labels.size());
  for (std::size_t i = 0; i < pl.labels.size(); ++i) {
    const int y = pl.labels[i];
    if (old.count(y)) {
      m.old_region[i] = 1;
    } else if (y == 0 || cur.count(y)) {
      m.current_region[i] = 1;
    } else {
      throw ArgumentError("pseudo-label " + std::to_string(y) + " is neither old, current nor background");
    }
  }
  return m;
}

}  // namespace cisseg
