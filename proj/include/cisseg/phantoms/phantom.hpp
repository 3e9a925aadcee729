#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cisseg/diffcore/array.hpp"
#include "cisseg/errors.hpp"

namespace cisseg {

using Size3 = std::array<std::size_t, 3>;

inline constexpr std::size_t kMaxPhantomClasses = 8;
inline constexpr double kPhantomNoiseSigma = 0.05;
inline constexpr double kBackgroundIntensity = 0.05;

/// Mean intensity of each organ class (ids 1..8). Spaced over [0.2, 0.9];
/// classes 5 and 6 sit deliberately close together.
inline double class_intensity(int c) {
  static constexpr std::array<double, kMaxPhantomClasses> kMeans{0.20, 0.30, 0.40, 0.50,
                                                                 0.62, 0.68, 0.80, 0.90};
  if (c < 1 || c > static_cast<int>(kMaxPhantomClasses)) {
    throw ArgumentError("phantom class ids must be in 1..8, got " + std::to_string(c));
  }
  return kMeans[static_cast<std::size_t>(c - 1)];
}

/// One synthetic labelled volume.
struct PhantomVolume {
  Array intensity;          // [1, H, W, D] in [0, 1]
  std::vector<int> labels;  // H*W*D, row-major, 0 = background
  Size3 size{};
  std::uint64_t seed = 0;

  std::size_t voxels() const { return size[0] * size[1] * size[2]; }

  /// Voxel count per label value present.
  std::map<int, std::size_t> histogram() const {
    std::map<int, std::size_t> h;
    for (int l : labels) ++h[l];
    return h;
  }
};

/// Volumes of one incremental step, with only that step's classes as foreground.
struct StepDataset {
  std::vector<PhantomVolume> volumes;
  std::vector<int> classes;
};

namespace detail {

inline void check_class_set(const std::vector<int>& class_set) {
  if (class_set.empty()) throw ArgumentError("phantom class set is empty");
  if (class_set.size() > kMaxPhantomClasses) throw ArgumentError("at most 8 phantom classes");
  std::set<int> uniq(class_set.begin(), class_set.end());
  if (uniq.size() != class_set.size()) throw ArgumentError("duplicate class in phantom class set");
  for (int c : class_set) (void)class_intensity(c);
}

}  // namespace detail

/// Generates a phantom: one axis-aligned ellipsoid per class, painted in
/// class order, with class-specific mean intensity plus Gaussian noise.
///
/// Pure function of (seed, class_set, size). An axis of extent 1 is treated as
/// a 2-d slice. Placement is retried until every class keeps at least half of
/// its painted voxels; failure means the volume is too small.
inline PhantomVolume generate_volume(std::uint64_t seed, const std::vector<int>& class_set, Size3 size) {
  detail::check_class_set(class_set);
  const bool planar = size[2] == 1;
  for (std::size_t a = 0; a < (planar ? 2u : 3u); ++a) {
    if (size[a] < 8) throw ArgumentError("phantom extents must be at least 8");
  }
  const std::size_t H = size[0], W = size[1], D = size[2];
  const std::size_t N = H * W * D;

  std::mt19937_64 rng(seed);
  constexpr int kAttempts = 200;
  std::vector<int> labels(N, 0);
  bool placed = false;
  for (int attempt = 0; attempt < kAttempts && !placed; ++attempt) {
    std::fill(labels.begin(), labels.end(), 0);
    std::vector<std::size_t> painted(class_set.size(), 0);
    for (std::size_t k = 0; k < class_set.size(); ++k) {
      std::array<double, 3> centre{}, radius{};
      for (std::size_t a = 0; a < 3; ++a) {
        const double ext = static_cast<double>(size[a]);
        if (size[a] == 1) {
          centre[a] = 0.0;
          radius[a] = 1e9;
          continue;
        }
        const double rmin = std::max(1.5, 0.08 * ext);
        const double rmax = std::max(rmin + 0.5, 0.16 * ext);
        radius[a] = std::uniform_real_distribution<double>(rmin, rmax)(rng);
        centre[a] = std::uniform_real_distribution<double>(radius[a] * 0.6, ext - 1.0 - radius[a] * 0.6)(rng);
      }
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
          for (std::size_t d = 0; d < D; ++d) {
            const double x = (static_cast<double>(h) - centre[0]) / radius[0];
            const double y = (static_cast<double>(w) - centre[1]) / radius[1];
            const double z = (static_cast<double>(d) - centre[2]) / radius[2];
            if (x * x + y * y + z * z <= 1.0) {
              labels[(h * W + w) * D + d] = class_set[k];
              ++painted[k];
            }
          }
    }
    placed = true;
    for (std::size_t k = 0; k < class_set.size() && placed; ++k) {
      const auto visible = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), class_set[k]));
      placed = painted[k] > 0 && visible > 0 && 2 * visible >= painted[k];
    }
  }
  if (!placed) {
    throw ArgumentError("cannot place " + std::to_string(class_set.size()) + " classes in a " +
                        std::to_string(H) + "x" + std::to_string(W) + "x" + std::to_string(D) + " volume");
  }

  PhantomVolume vol;
  vol.size = size;
  vol.seed = seed;
  vol.intensity = Array(Shape{1, H, W, D});
  std::normal_distribution<double> noise(0.0, kPhantomNoiseSigma);
  for (std::size_t i = 0; i < N; ++i) {
    const double mean = labels[i] == 0 ? kBackgroundIntensity : class_intensity(labels[i]);
    vol.intensity[i] = std::clamp(mean + noise(rng), 0.0, 1.0);
  }
  vol.labels = std::move(labels);
  return vol;
}

/// `count` volumes with per-volume seeds derived from `seed`.
inline std::vector<PhantomVolume> generate_collection(std::uint64_t seed, const std::vector<int>& class_set,
                                                      Size3 size, std::size_t count) {
  std::vector<PhantomVolume> out;
  out.reserve(count);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::vector<std::uint32_t> seeds(2 * count);
  seq.generate(seeds.begin(), seeds.end());
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = (static_cast<std::uint64_t>(seeds[2 * i]) << 32) | seeds[2 * i + 1];
    out.push_back(generate_volume(s, class_set, size));
  }
  return out;
}

/// 8:2 train/test split preserving order; the test part gets the trailing volumes.
inline std::pair<std::vector<PhantomVolume>, std::vector<PhantomVolume>> split_train_test(
    std::vector<PhantomVolume> all) {
  if (all.size() < 2) throw ArgumentError("need at least two volumes to split");
  std::size_t n_test = std::max<std::size_t>(1, (all.size() * 2 + 5) / 10);
  std::vector<PhantomVolume> test(std::make_move_iterator(all.end() - static_cast<long>(n_test)),
                                  std::make_move_iterator(all.end()));
  all.resize(all.size() - n_test);
  return {std::move(all), std::move(test)};
}

/// Keeps labels in `keep`, maps every other label to background.
inline std::vector<int> remap_labels(const std::vector<int>& labels, const std::vector<int>& keep) {
  std::set<int> k(keep.begin(), keep.end());
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = k.count(labels[i]) ? labels[i] : 0;
  return out;
}

inline StepDataset make_step_dataset(const std::vector<PhantomVolume>& base,
                                     const std::vector<int>& current_classes) {
  if (current_classes.empty()) throw ArgumentError("make_step_dataset: current class set is empty");
  std::set<int> present;
  for (const PhantomVolume& v : base) present.insert(v.labels.begin(), v.labels.end());
  for (int c : current_classes) {
    if (!present.count(c)) {
      throw ArgumentError("class " + std::to_string(c) + " does not occur in the base volumes");
    }
  }
  StepDataset ds;
  ds.classes = current_classes;
  ds.volumes.reserve(base.size());
  for (const PhantomVolume& v : base) {
    PhantomVolume r = v;
    r.labels = remap_labels(v.labels, current_classes);
    ds.volumes.push_back(std::move(r));
  }
  return ds;
}

/// Writes `<prefix>.img.raw` (float64), `<prefix>.lbl.raw` (int32), both
/// little-endian row-major, and a `<prefix>.hdr` text sidecar.
inline void export_volume(const PhantomVolume& vol, const std::filesystem::path& prefix) {
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  const std::string base = prefix.string();
  {
    std::ofstream img(base + ".img.raw", std::ios::binary);
    std::ofstream lbl(base + ".lbl.raw", std::ios::binary);
    if (!img || !lbl) throw IoError("cannot write volume export at " + base);
    img.write(reinterpret_cast<const char*>(vol.intensity.data().data()),
              static_cast<std::streamsize>(vol.intensity.size() * sizeof(double)));
    for (int l : vol.labels) {
      const auto v = static_cast<std::int32_t>(l);
      lbl.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  }
  std::ofstream hdr(base + ".hdr");
  if (!hdr) throw IoError("cannot write volume header at " + base);
  hdr << "cisseg-volume 1\n"
      << "shape " << vol.size[0] << ' ' << vol.size[1] << ' ' << vol.size[2] << '\n'
      << "image_dtype float64\n"
      << "label_dtype int32\n"
      << "seed " << vol.seed << '\n';
}

}  // namespace cisseg
