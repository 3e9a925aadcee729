#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cisseg/diffcore/ops.hpp"
#include "cisseg/diffcore/tape.hpp"
#include "cisseg/io.hpp"

namespace cisseg {

/// Kernel extents (H, W, D) of the encoder convolutions.
using Kernel = std::array<std::size_t, 3>;

inline constexpr Kernel kVolumetricKernel{3, 3, 3};
inline constexpr Kernel kPlanarKernel{3, 3, 1};

struct NamedTensor {
  std::string name;
  Array value;
};

/// Output of one forward pass. `params` are the tape handles of the network
/// parameters in `SegNet::parameters()` order.
struct ForwardResult {
  Var features;  // [B, K, H, W, D], penultimate layer
  Var logits;    // [B, 1 + classes, H, W, D]
  std::vector<Var> params;
};

/// Tiny segmentation network: three same-padded convolutions with ReLU
/// producing K feature channels, then a pointwise head K -> 1 + classes.
///
/// Head channel 0 is background; channel j >= 1 predicts `classes()[j - 1]`.
/// The head grows with `expand_head` and never loses or rewrites rows.
class SegNet {
 public:
  static constexpr std::size_t kEncoderLayers = 3;

  SegNet() = default;

  SegNet(std::size_t feature_dim, Kernel kernel, std::vector<int> classes, std::uint64_t seed)
      : feature_dim_(feature_dim), kernel_(kernel) {
    if (feature_dim == 0) throw ArgumentError("feature_dim must be positive");
    for (std::size_t e : kernel) {
      if (e == 0 || e % 2 == 0) throw ArgumentError("kernel extents must be odd");
    }
    std::mt19937_64 rng(seed);
    std::size_t in_ch = 1;
    for (std::size_t l = 0; l < kEncoderLayers; ++l) {
      const std::size_t fan_in = in_ch * kernel[0] * kernel[1] * kernel[2];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      Array w(Shape{feature_dim, in_ch, kernel[0], kernel[1], kernel[2]});
      for (double& v : w.data()) v = dist(rng);
      params_.push_back({"conv" + std::to_string(l + 1) + ".weight", std::move(w)});
      params_.push_back({"conv" + std::to_string(l + 1) + ".bias", Array(Shape{feature_dim}, 0.0)});
      in_ch = feature_dim;
    }
    params_.push_back({"head.weight", Array(Shape{1, feature_dim, 1, 1, 1}, 0.0)});
    params_.push_back({"head.bias", Array(Shape{1}, 0.0)});
    {
      std::uniform_real_distribution<double> dist(-head_init_bound(), head_init_bound());
      for (double& v : head_weight().data()) v = dist(rng);
    }
    if (!classes.empty()) expand_head(classes, rng, NewBias::Background);
  }

  enum class NewBias { Background, Zero };

  std::size_t feature_dim() const noexcept { return feature_dim_; }
  const Kernel& kernel() const noexcept { return kernel_; }
  const std::vector<int>& classes() const noexcept { return classes_; }
  std::size_t head_outputs() const { return params_.empty() ? 0 : head_bias().size(); }

  const std::vector<NamedTensor>& parameters() const noexcept { return params_; }
  std::vector<NamedTensor>& parameters() noexcept { return params_; }

  /// Output channel of class `c`, or -1 when the head does not know it.
  long channel_of(int c) const {
    for (std::size_t i = 0; i < classes_.size(); ++i)
      if (classes_[i] == c) return static_cast<long>(i + 1);
    return -1;
  }

  /// Smallest spatial extent a volume needs along each axis.
  std::array<std::size_t, 3> receptive_field() const {
    std::array<std::size_t, 3> rf{};
    for (std::size_t a = 0; a < 3; ++a) rf[a] = (kernel_[a] - 1) * kEncoderLayers + 1;
    return rf;
  }

  /// Adds one head row per new class. Existing rows are untouched; new weights
  /// are drawn from U(-1/sqrt(K), 1/sqrt(K)).
  void expand_head(std::span<const int> new_classes, std::mt19937_64& rng,
                   NewBias bias_init = NewBias::Background) {
    if (new_classes.empty()) throw ArgumentError("expand_head needs at least one new class");
    std::set<int> seen(classes_.begin(), classes_.end());
    for (int c : new_classes) {
      if (c <= 0) throw ArgumentError("class ids must be positive");
      if (!seen.insert(c).second) {
        throw ArgumentError("class " + std::to_string(c) + " already has a head row");
      }
    }
    const std::size_t K = feature_dim_;
    const std::size_t old_rows = head_outputs();
    const std::size_t rows = old_rows + new_classes.size();
    Array w(Shape{rows, K, 1, 1, 1});
    Array b(Shape{rows});
    std::copy(head_weight().data().begin(), head_weight().data().end(), w.data().begin());
    std::copy(head_bias().data().begin(), head_bias().data().end(), b.data().begin());
    std::uniform_real_distribution<double> dist(-head_init_bound(), head_init_bound());
    for (std::size_t r = old_rows; r < rows; ++r) {
      for (std::size_t k = 0; k < K; ++k) w[r * K + k] = dist(rng);
      b[r] = bias_init == NewBias::Background ? head_bias()[0] : 0.0;
    }
    head_weight() = std::move(w);
    head_bias() = std::move(b);
    classes_.insert(classes_.end(), new_classes.begin(), new_classes.end());
  }

  /// Runs the network on `volume` [B, 1, H, W, D]. With `trainable` the
  /// parameters are recorded as gradient-requiring leaves.
  ForwardResult forward(Tape& tape, const Array& volume, bool trainable = false) const {
    check_input(volume);
    ForwardResult r;
    r.params.reserve(params_.size());
    for (const NamedTensor& p : params_) r.params.push_back(tape.leaf(p.value, trainable));
    Var h = tape.constant(volume);
    for (std::size_t l = 0; l < kEncoderLayers; ++l) {
      h = ops::relu(ops::conv3d(h, r.params[2 * l], r.params[2 * l + 1]));
    }
    r.features = h;
    r.logits = ops::conv3d(h, r.params[2 * kEncoderLayers], r.params[2 * kEncoderLayers + 1]);
    return r;
  }

  /// Saves parameters, class layout and `step` as a checksummed text record.
  void save(const std::filesystem::path& path, int step) const {
    std::string body = "cisseg-checkpoint 1\n";
    body += "step " + std::to_string(step) + "\n";
    body += "feature_dim " + std::to_string(feature_dim_) + "\n";
    body += "kernel " + std::to_string(kernel_[0]) + " " + std::to_string(kernel_[1]) + " " +
            std::to_string(kernel_[2]) + "\n";
    body += "classes " + std::to_string(classes_.size());
    for (int c : classes_) body += " " + std::to_string(c);
    body += "\ntensors " + std::to_string(params_.size()) + "\n";
    for (const NamedTensor& p : params_) {
      body += "tensor " + p.name + " " + std::to_string(p.value.rank());
      for (std::size_t d : p.value.shape()) body += " " + std::to_string(d);
      body += "\n";
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        body += (i ? " " : "") + io::format_double(p.value[i]);
      }
      body += "\n";
    }
    io::write_checked(path, body);
  }

  /// Loads a record written by `save`; returns the network and its step.
  static std::pair<SegNet, int> load(const std::filesystem::path& path) {
    io::LineReader rd(io::read_checked(path));
    auto tok = rd.next("cisseg-checkpoint");
    io::expect_tokens(tok, 2);
    if (tok[1] != "1") throw IoError("unsupported checkpoint version " + tok[1]);
    SegNet net;
    tok = rd.next("step");
    io::expect_tokens(tok, 2);
    const int step = io::parse_int<int>(tok[1]);
    tok = rd.next("feature_dim");
    io::expect_tokens(tok, 2);
    net.feature_dim_ = io::parse_int<std::size_t>(tok[1]);
    tok = rd.next("kernel");
    io::expect_tokens(tok, 4);
    for (std::size_t a = 0; a < 3; ++a) net.kernel_[a] = io::parse_int<std::size_t>(tok[a + 1]);
    tok = rd.next("classes");
    if (tok.size() < 2) throw IoError("malformed classes line");
    const auto n_classes = io::parse_int<std::size_t>(tok[1]);
    io::expect_tokens(tok, n_classes + 2);
    for (std::size_t i = 0; i < n_classes; ++i) net.classes_.push_back(io::parse_int<int>(tok[i + 2]));
    tok = rd.next("tensors");
    io::expect_tokens(tok, 2);
    const auto n_tensors = io::parse_int<std::size_t>(tok[1]);
    if (n_tensors != 2 * kEncoderLayers + 2) throw IoError("unexpected tensor count");
    for (std::size_t t = 0; t < n_tensors; ++t) {
      tok = rd.next("tensor");
      if (tok.size() < 3) throw IoError("malformed tensor header");
      const auto rank = io::parse_int<std::size_t>(tok[2]);
      io::expect_tokens(tok, rank + 3);
      Shape shape;
      for (std::size_t d = 0; d < rank; ++d) shape.push_back(io::parse_int<std::size_t>(tok[d + 3]));
      auto vals = rd.next();
      std::vector<double> data;
      data.reserve(vals.size());
      for (const std::string& s : vals) data.push_back(io::parse_double(s));
      try {
        net.params_.push_back({tok[1], Array(shape, std::move(data))});
      } catch (const ShapeError& e) {
        throw IoError(std::string("checkpoint tensor '") + tok[1] + "': " + e.what());
      }
    }
    if (!rd.at_end()) throw IoError("trailing data in checkpoint");
    net.validate_loaded();
    return {std::move(net), step};
  }

  friend bool operator==(const SegNet& a, const SegNet& b) {
    if (a.feature_dim_ != b.feature_dim_ || a.kernel_ != b.kernel_ || a.classes_ != b.classes_ ||
        a.params_.size() != b.params_.size())
      return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i) {
      if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value)) return false;
    }
    return true;
  }

 private:
  double head_init_bound() const { return 1.0 / std::sqrt(static_cast<double>(feature_dim_)); }

  Array& head_weight() { return params_[2 * kEncoderLayers].value; }
  Array& head_bias() { return params_[2 * kEncoderLayers + 1].value; }
  const Array& head_weight() const { return params_[2 * kEncoderLayers].value; }
  const Array& head_bias() const { return params_[2 * kEncoderLayers + 1].value; }

  void check_input(const Array& volume) const {
    const Shape& s = volume.shape();
    if (s.size() != 5 || s[1] != 1) {
      throw ShapeError("SegNet expects a [B, 1, H, W, D] volume, got " + shape_string(s));
    }
    const auto rf = receptive_field();
    for (std::size_t a = 0; a < 3; ++a) {
      if (s[2 + a] < rf[a]) {
        throw ShapeError("volume " + shape_string(s) + " is smaller than the receptive field");
      }
    }
    volume.require_finite("SegNet input");
  }

  void validate_loaded() const {
    std::size_t in_ch = 1;
    for (std::size_t l = 0; l < kEncoderLayers; ++l) {
      if (params_[2 * l].value.shape() != Shape{feature_dim_, in_ch, kernel_[0], kernel_[1], kernel_[2]} ||
          params_[2 * l + 1].value.shape() != Shape{feature_dim_}) {
        throw IoError("checkpoint encoder layer " + std::to_string(l + 1) + " has wrong shape");
      }
      in_ch = feature_dim_;
    }
    const std::size_t rows = classes_.size() + 1;
    if (head_weight().shape() != Shape{rows, feature_dim_, 1, 1, 1} || head_bias().shape() != Shape{rows}) {
      throw IoError("checkpoint head does not match its class list");
    }
  }

  std::size_t feature_dim_ = 0;
  Kernel kernel_{3, 3, 3};
  std::vector<int> classes_;
  std::vector<NamedTensor> params_;
};

/// Frozen copy of a SegNet taken at the end of an incremental step; the
/// distillation teacher of the following step.
class ModelSnapshot {
 public:
  ModelSnapshot(SegNet net, int step) : net_(std::move(net)), step_(step) {}

  const SegNet& net() const noexcept { return net_; }
  int step() const noexcept { return step_; }

  struct Output {
    Array features;
    Array logits;
    Array probs;  // softmax over the channel axis
  };

  Output forward(const Array& volume) const {
    Tape tape(false);
    ForwardResult r = net_.forward(tape, volume, false);
    return Output{r.features.value(), r.logits.value(), softmax(r.logits.value(), 1)};
  }

 private:
  SegNet net_;
  int step_;
};

inline ModelSnapshot snapshot_freeze(const SegNet& net, int step) {
  if (net.parameters().empty()) throw ArgumentError("cannot snapshot an uninitialized network");
  return ModelSnapshot(net, step);
}

}  // namespace cisseg
