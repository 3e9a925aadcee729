#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cisseg/diffcore/array.hpp"
#include "cisseg/io.hpp"

namespace cisseg {

enum class PrototypeSource { Teacher, Student };

/// Per-batch class means (one vector of length K per present class).
struct LocalPrototypes {
  PrototypeSource source = PrototypeSource::Student;
  std::size_t dim = 0;
  std::map<int, std::vector<double>> vectors;
  std::map<int, std::size_t> counts;

  bool contains(int c) const { return vectors.count(c) != 0; }
};

/// Per-class feature sums and voxel counts of `features` [B, K, spatial...].
struct ClassSums {
  std::size_t dim = 0;
  std::map<int, std::vector<double>> sums;
  std::map<int, std::size_t> counts;
};

inline ClassSums class_sums(const Array& features, std::span<const int> labels,
                            const std::vector<int>& class_set) {
  const Shape& fs = features.shape();
  if (fs.size() < 3) throw ShapeError("prototype pooling expects [B, K, spatial...] features");
  const std::size_t B = fs[0], K = fs[1];
  const std::size_t V = features.size() / (B * K);
  if (labels.size() != B * V) {
    throw ShapeError("prototype pooling: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(B * V) + " voxels");
  }
  ClassSums out;
  out.dim = K;
  for (int c : class_set) {
    out.sums[c].assign(K, 0.0);
    out.counts[c] = 0;
  }
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t v = 0; v < V; ++v) {
      auto it = out.sums.find(labels[b * V + v]);
      if (it == out.sums.end()) continue;
      ++out.counts[it->first];
      for (std::size_t k = 0; k < K; ++k) it->second[k] += features[(b * K + k) * V + v];
    }
  }
  return out;
}

/// Class means of `features` [B, K, spatial...] over the voxels labelled with each
/// class of `class_set`. Classes without voxels are left out.
inline LocalPrototypes local_prototypes(const Array& features, std::span<const int> labels,
                                        const std::vector<int>& class_set,
                                        PrototypeSource source = PrototypeSource::Student) {
  ClassSums cs = class_sums(features, labels, class_set);
  LocalPrototypes out;
  out.source = source;
  out.dim = cs.dim;
  for (auto& [c, s] : cs.sums) {
    const std::size_t n = cs.counts[c];
    if (n == 0) continue;
    for (double& x : s) x /= static_cast<double>(n);
    out.vectors[c] = std::move(s);
    out.counts[c] = n;
  }
  return out;
}

/// Global class prototypes kept as cumulative moving averages.
///
/// After any sequence of updates, `mean(c)` is the mean of every feature vector
/// ever attributed to class c and `count(c)` is how many there were.
class PrototypeStore {
 public:
  struct Entry {
    std::vector<double> mean;
    std::uint64_t count = 0;

    friend bool operator==(const Entry&, const Entry&) = default;
  };

  PrototypeStore() = default;
  explicit PrototypeStore(std::size_t dim, int step = 0) : dim_(dim), step_(step) {}

  std::size_t dim() const noexcept { return dim_; }
  int step() const noexcept { return step_; }
  void set_step(int step) noexcept { step_ = step; }

  bool contains(int c) const { return entries_.count(c) != 0; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::map<int, Entry>& entries() const { return entries_; }

  const std::vector<double>& mean(int c) const { return at(c).mean; }
  std::uint64_t count(int c) const { return at(c).count; }

  std::vector<int> classes() const {
    std::vector<int> out;
    for (const auto& [c, e] : entries_) out.push_back(c);
    return out;
  }

  /// Folds a batch with feature sum `batch_sum` over `batch_count` vectors into
  /// class `c`: p <- (N p + sum) / (N + n), N <- N + n. Zero counts are no-ops.
  void cma_update(int c, std::span<const double> batch_sum, long long batch_count) {
    if (batch_count < 0) throw ArgumentError("cma_update: negative batch count");
    if (batch_sum.size() != dim_) {
      throw ShapeError("cma_update: vector length " + std::to_string(batch_sum.size()) +
                       " != prototype dim " + std::to_string(dim_));
    }
    if (batch_count == 0) return;
    Entry& e = entries_[c];
    if (e.mean.empty()) e.mean.assign(dim_, 0.0);
    const auto n_pre = static_cast<double>(e.count);
    const auto n_new = static_cast<double>(e.count + static_cast<std::uint64_t>(batch_count));
    for (std::size_t k = 0; k < dim_; ++k) e.mean[k] = (n_pre * e.mean[k] + batch_sum[k]) / n_new;
    e.count += static_cast<std::uint64_t>(batch_count);
  }

  /// Accumulates every class of `class_set` found in `labels` from `features`
  /// [B, K, spatial...].
  void accumulate(const Array& features, std::span<const int> labels, const std::vector<int>& class_set) {
    const ClassSums cs = class_sums(features, labels, class_set);
    if (cs.dim != dim_) {
      throw ShapeError("feature dim " + std::to_string(cs.dim) + " != store dim " + std::to_string(dim_));
    }
    for (const auto& [c, sum] : cs.sums) cma_update(c, sum, static_cast<long long>(cs.counts.at(c)));
  }

  /// Replaces (or creates) the entry of class `c`.
  void set_entry(int c, Entry e) {
    if (e.mean.size() != dim_) throw ShapeError("prototype entry has wrong length");
    entries_[c] = std::move(e);
  }

  void save(const std::filesystem::path& path) const {
    std::string body = "cisseg-prototypes 1\n";
    body += "step " + std::to_string(step_) + "\n";
    body += "dim " + std::to_string(dim_) + "\n";
    body += "classes " + std::to_string(entries_.size()) + "\n";
    for (const auto& [c, e] : entries_) {
      body += "class " + std::to_string(c) + " " + std::to_string(e.count);
      for (double x : e.mean) body += " " + io::format_double(x);
      body += "\n";
    }
    io::write_checked(path, body);
  }

  static PrototypeStore load(const std::filesystem::path& path) {
    io::LineReader rd(io::read_checked(path));
    auto tok = rd.next("cisseg-prototypes");
    io::expect_tokens(tok, 2);
    if (tok[1] != "1") throw IoError("unsupported prototype snapshot version " + tok[1]);
    tok = rd.next("step");
    io::expect_tokens(tok, 2);
    const int step = io::parse_int<int>(tok[1]);
    tok = rd.next("dim");
    io::expect_tokens(tok, 2);
    PrototypeStore store(io::parse_int<std::size_t>(tok[1]), step);
    tok = rd.next("classes");
    io::expect_tokens(tok, 2);
    const auto n = io::parse_int<std::size_t>(tok[1]);
    for (std::size_t i = 0; i < n; ++i) {
      tok = rd.next("class");
      io::expect_tokens(tok, store.dim_ + 3);
      Entry e;
      const int c = io::parse_int<int>(tok[1]);
      e.count = io::parse_int<std::uint64_t>(tok[2]);
      for (std::size_t k = 0; k < store.dim_; ++k) e.mean.push_back(io::parse_double(tok[k + 3]));
      if (!store.entries_.emplace(c, std::move(e)).second) {
        throw IoError("duplicate class " + std::to_string(c) + " in prototype snapshot");
      }
    }
    if (!rd.at_end()) throw IoError("trailing data in prototype snapshot");
    return store;
  }

  friend bool operator==(const PrototypeStore&, const PrototypeStore&) = default;

 private:
  const Entry& at(int c) const {
    auto it = entries_.find(c);
    if (it == entries_.end()) throw ArgumentError("no prototype for class " + std::to_string(c));
    return it->second;
  }

  std::size_t dim_ = 0;
  int step_ = 0;
  std::map<int, Entry> entries_;
};

inline PrototypeStore persist_roundtrip(const PrototypeStore& store, const std::filesystem::path& path) {
  store.save(path);
  return PrototypeStore::load(path);
}

}  // namespace cisseg
