#pragma once

#include <vector>

#include "cisseg/model/segnet.hpp"
#include "cisseg/phantoms/phantom.hpp"
#include "cisseg/prototypes/prototypes.hpp"

namespace cisseg {

/// End-of-step pass that rebuilds the global prototypes for step `step`.
///
/// Runs `model` frozen over every volume of `dataset` and accumulates a fresh
/// cumulative mean per class of {0} ∪ `seen_classes`, where voxel membership comes
/// from `region_labels` (ground truth for current classes, pseudo-labels for old
/// ones, 0 elsewhere). Background is therefore always recomputed. A seen class
/// with no voxel this step keeps its entry from `previous`, if any.
inline PrototypeStore finalize_step_globals(const ModelSnapshot& model, const StepDataset& dataset,
                                            const std::vector<std::vector<int>>& region_labels,
                                            const std::vector<int>& seen_classes, int step,
                                            const PrototypeStore* previous = nullptr) {
  if (dataset.volumes.empty()) throw ArgumentError("finalize_step_globals: empty dataset");
  if (region_labels.size() != dataset.volumes.size()) {
    throw ShapeError("finalize_step_globals: one label map per volume required");
  }
  std::vector<int> classes{0};
  classes.insert(classes.end(), seen_classes.begin(), seen_classes.end());
  PrototypeStore store(model.net().feature_dim(), step);
  for (std::size_t i = 0; i < dataset.volumes.size(); ++i) {
    const PhantomVolume& v = dataset.volumes[i];
    const Array x = v.intensity.reshaped(Shape{1, 1, v.size[0], v.size[1], v.size[2]});
    const ModelSnapshot::Output out = model.forward(x);
    store.accumulate(out.features, region_labels[i], classes);
  }
  if (previous) {
    for (int c : seen_classes) {
      if (!store.contains(c) && previous->contains(c)) store.set_entry(c, previous->entries().at(c));
    }
  }
  return store;
}

}  // namespace cisseg
