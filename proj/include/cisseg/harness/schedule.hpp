#pragma once

#include <charconv>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cisseg/errors.hpp"

namespace cisseg {

/// Ordered class sets C^1 ... C^T of an N1-N2 protocol: N1 classes in the first
/// step, N2 in each later one.
class ProtocolSchedule {
 public:
  ProtocolSchedule() = default;

  explicit ProtocolSchedule(std::vector<std::vector<int>> steps) : steps_(std::move(steps)) { validate(); }

  /// Parses "N1-N2" over classes 1..num_classes.
  static ProtocolSchedule parse(std::string_view notation, int num_classes) {
    const auto dash = notation.find('-');
    if (dash == std::string_view::npos) {
      throw ConfigError("protocol '" + std::string(notation) + "' is not of the form N1-N2");
    }
    auto to_int = [&](std::string_view s) {
      int v = 0;
      auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || end != s.data() + s.size() || v <= 0) {
        throw ConfigError("protocol '" + std::string(notation) + "' has an invalid count");
      }
      return v;
    };
    const int first = to_int(notation.substr(0, dash));
    const int step = to_int(notation.substr(dash + 1));
    if (num_classes <= 0) throw ConfigError("class count must be positive");
    if (first > num_classes) {
      throw ConfigError("protocol " + std::string(notation) + " needs more than " + std::to_string(num_classes) +
                        " classes");
    }
    if ((num_classes - first) % step != 0) {
      throw ConfigError("protocol " + std::string(notation) + " does not divide " + std::to_string(num_classes) +
                        " classes");
    }
    std::vector<std::vector<int>> steps;
    int next = 1;
    auto take = [&](int n) {
      std::vector<int> s;
      for (int i = 0; i < n; ++i) s.push_back(next++);
      steps.push_back(std::move(s));
    };
    take(first);
    while (next <= num_classes) take(step);
    return ProtocolSchedule(std::move(steps));
  }

  std::size_t num_steps() const noexcept { return steps_.size(); }
  const std::vector<int>& step(std::size_t t) const { return steps_.at(t - 1); }  // 1-based
  const std::vector<std::vector<int>>& steps() const noexcept { return steps_; }

  /// C^{1:t}
  std::vector<int> seen_through(std::size_t t) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < t && i < steps_.size(); ++i) out.insert(out.end(), steps_[i].begin(), steps_[i].end());
    return out;
  }

  std::vector<int> all_classes() const { return seen_through(steps_.size()); }

 private:
  void validate() const {
    if (steps_.empty()) throw ConfigError("protocol has no steps");
    std::set<int> seen;
    for (const auto& s : steps_) {
      if (s.empty()) throw ConfigError("protocol step without classes");
      for (int c : s) {
        if (c <= 0) throw ConfigError("class ids must be positive");
        if (!seen.insert(c).second) throw ConfigError("class " + std::to_string(c) + " appears in two steps");
      }
    }
  }

  std::vector<std::vector<int>> steps_;
};

}  // namespace cisseg
