#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cisseg/harness/schedule.hpp"

namespace cisseg {

/// Dice of class `c`: 2|P∩G| / (|P| + |G|), and 1 when c is absent from both.
inline double dsc(std::span<const int> pred, std::span<const int> gt, int c) {
  if (pred.size() != gt.size()) {
    throw ShapeError("dsc: prediction has " + std::to_string(pred.size()) + " voxels, ground truth " +
                     std::to_string(gt.size()));
  }
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool in_p = pred[i] == c, in_g = gt[i] == c;
    p += in_p;
    g += in_g;
    both += in_p && in_g;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

/// Old / New / All Dice averages.
struct Aggregate {
  double old_dsc = 0.0;
  std::optional<double> new_dsc;  // absent while only C^1 has been learned
  double all_dsc = 0.0;
};

/// Unweighted class means: Old over C^1, New over C^{2:t}, All over C^{1:t}.
inline Aggregate aggregate_metrics(const std::map<int, double>& per_class, const ProtocolSchedule& schedule,
                                   std::size_t through_step) {
  if (through_step == 0 || through_step > schedule.num_steps()) {
    throw ArgumentError("aggregate_metrics: step out of range");
  }
  auto mean_of = [&](const std::vector<int>& classes) {
    double s = 0.0;
    for (int c : classes) {
      auto it = per_class.find(c);
      if (it == per_class.end()) throw ArgumentError("aggregate_metrics: no DSC for class " + std::to_string(c));
      s += it->second;
    }
    return s / static_cast<double>(classes.size());
  };
  Aggregate a;
  a.old_dsc = mean_of(schedule.step(1));
  const std::vector<int> seen = schedule.seen_through(through_step);
  a.all_dsc = mean_of(seen);
  if (through_step > 1) {
    std::vector<int> fresh(seen.begin() + static_cast<long>(schedule.step(1).size()), seen.end());
    a.new_dsc = mean_of(fresh);
  }
  return a;
}

inline Aggregate aggregate_metrics(const std::map<int, double>& per_class, const ProtocolSchedule& schedule) {
  return aggregate_metrics(per_class, schedule, schedule.num_steps());
}

struct ClassScore {
  int step = 0;
  int cls = 0;
  double dsc = 0.0;
  std::string method;
};

struct StepSummary {
  int step = 0;
  std::string method;
  Aggregate agg;
};

/// Everything a protocol run reports.
struct MetricsReport {
  std::string method;
  std::vector<ClassScore> per_class;
  std::vector<StepSummary> summary;

  const StepSummary& final_step() const {
    if (summary.empty()) throw ArgumentError("empty metrics report");
    return summary.back();
  }
};

}  // namespace cisseg
