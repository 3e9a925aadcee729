#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cisseg/calib/calib_distill.hpp"
#include "cisseg/diffcore/ops.hpp"
#include "cisseg/prototypes/prototypes.hpp"

namespace cisseg {

/// Loss weights of the total objective. Defaults follow the best values of the
/// weight ablation (lambda_ll 0.5, lambda_lg 0.1, lambda_orcd 1, lambda_crcd 0.5).
struct LossWeights {
  double ll = 0.5;
  double lg = 0.1;
  double orcd = 1.0;
  double crcd = 0.5;

  void validate() const {
    if (ll < 0.0 || lg < 0.0 || orcd < 0.0 || crcd < 0.0) {
      throw ArgumentError("loss weights must be non-negative");
    }
  }
};

enum class MergeMode {
  Sum,          // background + current-class locals added up
  WeightedMean  // voxel-count weighted mean of the same locals
};

/// Student prototypes over {0} ∪ old classes after folding the current classes
/// into background.
struct MergedPrototypes {
  Var rows;                 // [classes.size(), K]
  std::vector<int> classes; // 0 first, then present old classes in layout order
  MergeMode mode = MergeMode::Sum;
};

/// Folds current-class local prototypes into the background one; old-class
/// prototypes pass through unchanged. `student_locals` must contain class 0.
inline MergedPrototypes unbiased_merge(const ops::SegmentMeans& student_locals, const StepClasses& layout,
                                       MergeMode mode = MergeMode::Sum) {
  auto row_of = [&](int c) -> long {
    for (std::size_t r = 0; r < student_locals.classes.size(); ++r)
      if (student_locals.classes[r] == c) return static_cast<long>(r);
    return -1;
  };
  const long bg = row_of(0);
  if (bg < 0 || !student_locals.means) throw ArgumentError("unbiased_merge: no background prototype");

  std::vector<std::pair<std::size_t, std::size_t>> bg_parts{{static_cast<std::size_t>(bg),
                                                             student_locals.counts[static_cast<std::size_t>(bg)]}};
  for (int c : layout.current_classes) {
    const long r = row_of(c);
    if (r >= 0) bg_parts.push_back({static_cast<std::size_t>(r), student_locals.counts[static_cast<std::size_t>(r)]});
  }
  double total = 0.0;
  for (const auto& [r, n] : bg_parts) total += static_cast<double>(n);

  MergedPrototypes out;
  out.mode = mode;
  std::vector<std::vector<std::pair<std::size_t, double>>> recipe;
  std::vector<std::pair<std::size_t, double>> bg_recipe;
  for (const auto& [r, n] : bg_parts) {
    bg_recipe.push_back({r, mode == MergeMode::Sum ? 1.0 : static_cast<double>(n) / total});
  }
  recipe.push_back(std::move(bg_recipe));
  out.classes.push_back(0);
  for (int c : layout.old_classes) {
    const long r = row_of(c);
    if (r < 0) continue;
    recipe.push_back({{static_cast<std::size_t>(r), 1.0}});
    out.classes.push_back(c);
  }
  out.rows = ops::combine_rows(*student_locals.means, recipe);
  return out;
}

/// Mean squared L2 distance between merged prototypes and `targets`, over the
/// classes both sides have.
inline Var prototype_distance(const MergedPrototypes& q, const std::map<int, std::vector<double>>& targets) {
  const std::size_t K = q.rows.shape()[1];
  std::vector<std::vector<std::pair<std::size_t, double>>> pick;
  std::vector<double> tgt;
  for (std::size_t r = 0; r < q.classes.size(); ++r) {
    auto it = targets.find(q.classes[r]);
    if (it == targets.end()) continue;
    if (it->second.size() != K) throw ShapeError("prototype_distance: target length mismatch");
    pick.push_back({{r, 1.0}});
    tgt.insert(tgt.end(), it->second.begin(), it->second.end());
  }
  if (pick.empty()) throw ArgumentError("prototype_distance: no class in common");
  Var rows = pick.size() == q.classes.size() ? q.rows : ops::combine_rows(q.rows, pick);
  return ops::mean_row_sq_distance(rows, Array(Shape{pick.size(), K}, std::move(tgt)));
}

inline std::map<int, std::vector<double>> store_targets(const PrototypeStore& store) {
  std::map<int, std::vector<double>> out;
  for (const auto& [c, e] : store.entries()) out[c] = e.mean;
  return out;
}

/// lambda_ll * L_pd(q, teacher locals) + lambda_lg * L_pd(q, previous-step globals).
inline Var dapd_loss(const ops::SegmentMeans& student_locals, const LocalPrototypes& teacher_locals,
                     const PrototypeStore& globals, const LossWeights& w, const StepClasses& layout,
                     MergeMode mode = MergeMode::Sum) {
  w.validate();
  const MergedPrototypes q = unbiased_merge(student_locals, layout, mode);
  std::vector<Var> terms;
  std::vector<double> weights;
  if (w.ll > 0.0) {
    terms.push_back(prototype_distance(q, teacher_locals.vectors));
    weights.push_back(w.ll);
  }
  if (w.lg > 0.0) {
    terms.push_back(prototype_distance(q, store_targets(globals)));
    weights.push_back(w.lg);
  }
  if (terms.empty()) return q.rows.tape->constant(Array::scalar(0.0));
  return ops::weighted_sum(terms, weights);
}

}  // namespace cisseg
