#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cisseg/diffcore/array.hpp"
#include "cisseg/diffcore/numeric.hpp"
#include "cisseg/diffcore/tape.hpp"

namespace cisseg {

/// Label layout of one incremental step. Student channels are
/// [background, old..., current...]; teacher channels are [background, old...].
struct StepClasses {
  std::vector<int> old_classes;
  std::vector<int> current_classes;

  std::size_t teacher_channels() const { return 1 + old_classes.size(); }
  std::size_t student_channels() const { return 1 + old_classes.size() + current_classes.size(); }

  std::vector<int> seen() const {
    std::vector<int> all(old_classes);
    all.insert(all.end(), current_classes.begin(), current_classes.end());
    return all;
  }
};

/// Per-voxel class weights: [B, classes.size(), spatial...], each voxel on the simplex.
struct AffinityMap {
  Array weights;
  std::vector<int> classes;

  long index_of(int c) const {
    auto it = std::find(classes.begin(), classes.end(), c);
    return it == classes.end() ? -1 : static_cast<long>(it - classes.begin());
  }
};

using PrototypeList = std::vector<std::pair<int, std::vector<double>>>;

/// Cosine similarity of every voxel feature to every prototype, softmaxed over
/// prototypes (divided by `temperature` first). `features` is [B, K, spatial...].
inline AffinityMap affinity(const Array& features, const PrototypeList& prototypes, double temperature = 1.0) {
  if (prototypes.empty()) throw ArgumentError("affinity needs at least one prototype");
  if (!(temperature > 0.0)) throw ArgumentError("affinity temperature must be positive");
  const Shape& fs = features.shape();
  if (fs.size() < 3) throw ShapeError("affinity expects [B, K, spatial...] features");
  const std::size_t B = fs[0], K = fs[1];
  const std::size_t V = features.size() / (B * K);
  const std::size_t P = prototypes.size();
  std::vector<double> pnorm(P);
  for (std::size_t p = 0; p < P; ++p) {
    if (prototypes[p].second.size() != K) {
      throw ShapeError("prototype of class " + std::to_string(prototypes[p].first) + " has length " +
                       std::to_string(prototypes[p].second.size()) + ", features have " + std::to_string(K));
    }
    double n = 0.0;
    for (double x : prototypes[p].second) n += x * x;
    pnorm[p] = std::sqrt(n);
  }
  Shape out_shape = fs;
  out_shape[1] = P;
  AffinityMap out{Array(out_shape), {}};
  for (const auto& [c, v] : prototypes) out.classes.push_back(c);

  std::vector<double> cos(P);
  for (std::size_t b = 0; b < B; ++b) {
    const double* f = features.data().data() + b * K * V;
    double* w = out.weights.data().data() + b * P * V;
    for (std::size_t v = 0; v < V; ++v) {
      double fn = 0.0;
      for (std::size_t k = 0; k < K; ++k) fn += f[k * V + v] * f[k * V + v];
      fn = std::sqrt(fn);
      double mx = -1e300;
      for (std::size_t p = 0; p < P; ++p) {
        double c = 0.0;
        if (fn > 0.0 && pnorm[p] > 0.0) {
          double dot = 0.0;
          for (std::size_t k = 0; k < K; ++k) dot += f[k * V + v] * prototypes[p].second[k];
          c = std::clamp(dot / (fn * pnorm[p]), -1.0, 1.0);
        }
        cos[p] = c / temperature;
        mx = std::max(mx, cos[p]);
      }
      double sum = 0.0;
      for (std::size_t p = 0; p < P; ++p) {
        cos[p] = std::exp(cos[p] - mx);
        sum += cos[p];
      }
      for (std::size_t p = 0; p < P; ++p) w[p * V + v] = cos[p] / sum;
    }
  }
  return out;
}

/// Equal weight 1/|classes| everywhere; the uncalibrated baseline.
inline AffinityMap uniform_affinity(const Shape& feature_shape, const std::vector<int>& classes) {
  if (classes.empty()) throw ArgumentError("uniform_affinity needs at least one class");
  Shape s = feature_shape;
  s[1] = classes.size();
  return AffinityMap{Array(s, 1.0 / static_cast<double>(classes.size())), classes};
}

/// Collapses the current-class channels of a student softmax into background.
/// Input [B, student_channels, spatial...] -> [B, teacher_channels, spatial...].
inline Array fold_new_into_bg(const Array& student_probs, const StepClasses& layout) {
  const Shape& s = student_probs.shape();
  if (s.size() < 2 || s[1] != layout.student_channels()) {
    throw ShapeError("fold_new_into_bg: student has " + shape_string(s) + ", layout expects " +
                     std::to_string(layout.student_channels()) + " channels");
  }
  const std::size_t B = s[0], S = s[1], T = layout.teacher_channels();
  const std::size_t V = student_probs.size() / (B * S);
  Shape os = s;
  os[1] = T;
  Array out(os);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t v = 0; v < V; ++v) {
      double bg = student_probs[(b * S) * V + v];
      for (std::size_t c = T; c < S; ++c) bg += student_probs[(b * S + c) * V + v];
      out[(b * T) * V + v] = bg;
      for (std::size_t c = 1; c < T; ++c) out[(b * T + c) * V + v] = student_probs[(b * S + c) * V + v];
    }
  }
  return out;
}

namespace ops {

inline Var fold_new_into_bg(Var student_probs, const StepClasses& layout) {
  Array folded = cisseg::fold_new_into_bg(student_probs.value(), layout);
  const Shape& s = student_probs.shape();
  const std::size_t B = s[0], S = s[1], T = layout.teacher_channels();
  const std::size_t V = student_probs.value().size() / (B * S);
  return student_probs.tape->record(std::move(folded), {student_probs},
                                    [student_probs, B, S, T, V](Tape& t, const Array& g) {
                                      Array* gs = t.grad_buffer(student_probs);
                                      if (!gs) return;
                                      for (std::size_t b = 0; b < B; ++b)
                                        for (std::size_t v = 0; v < V; ++v) {
                                          const double gbg = g[(b * T) * V + v];
                                          (*gs)[(b * S) * V + v] += gbg;
                                          for (std::size_t c = T; c < S; ++c) (*gs)[(b * S + c) * V + v] += gbg;
                                          for (std::size_t c = 1; c < T; ++c)
                                            (*gs)[(b * S + c) * V + v] += g[(b * T + c) * V + v];
                                        }
                                    });
}

/// One weighted channel comparison of a calibrated KL sum.
struct KlTerm {
  std::size_t student_channel;
  long teacher_channel;  // -1: compare against a zero (clamped) teacher probability
  std::size_t affinity_channel;
};

/// (1/|mask|) * sum over masked voxels and terms of a * KL(student_ch || teacher_ch).
/// Affinity and teacher are constants; 0 for an empty mask.
inline Var calibrated_kl(Var student, const Array& teacher, const Array& weights,
                         std::span<const std::uint8_t> mask, std::vector<KlTerm> terms, KlDirection dir) {
  const Shape& ss = student.shape();
  const std::size_t B = ss[0], S = ss[1];
  const std::size_t V = student.value().size() / (B * S);
  const std::size_t T = teacher.shape()[1], A = weights.shape()[1];
  if (teacher.shape()[0] != B || teacher.size() != B * T * V || weights.shape()[0] != B ||
      weights.size() != B * A * V || mask.size() != B * V) {
    throw ShapeError("calibrated_kl: student " + shape_string(ss) + ", teacher " + shape_string(teacher.shape()) +
                     ", affinity " + shape_string(weights.shape()) + " and mask of " +
                     std::to_string(mask.size()) + " do not agree");
  }
  for (const KlTerm& term : terms) {
    if (term.student_channel >= S || term.teacher_channel >= static_cast<long>(T) ||
        term.affinity_channel >= A) {
      throw ShapeError("calibrated_kl: channel index out of range");
    }
  }
  std::size_t n_mask = 0;
  for (auto m : mask) n_mask += m != 0;
  Tape& tape = *student.tape;
  if (n_mask == 0 || terms.empty()) return tape.constant(Array::scalar(0.0));

  auto teacher_at = [&teacher, T, V](const KlTerm& term, std::size_t b, std::size_t v) {
    return term.teacher_channel < 0 ? 0.0
                                    : teacher[(b * T + static_cast<std::size_t>(term.teacher_channel)) * V + v];
  };
  const Array& sv = student.value();
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t v = 0; v < V; ++v) {
      if (!mask[b * V + v]) continue;
      for (const KlTerm& term : terms) {
        const double p = sv[(b * S + term.student_channel) * V + v];
        const double q = teacher_at(term, b, v);
        const double a = weights[(b * A + term.affinity_channel) * V + v];
        total += a * (dir == KlDirection::StudentTeacher ? bernoulli_kl(p, q) : bernoulli_kl(q, p));
      }
    }
  const double inv = 1.0 / static_cast<double>(n_mask);

  if (!student.requires_grad()) return tape.constant(Array::scalar(total * inv));
  auto ctx = std::make_shared<const std::tuple<Array, Array, std::vector<std::uint8_t>, std::vector<KlTerm>>>(
      teacher, weights, std::vector<std::uint8_t>(mask.begin(), mask.end()), std::move(terms));
  return tape.record(Array::scalar(total * inv), {student},
                     [student, ctx, B, S, T, A, V, inv, dir](Tape& t, const Array& g) {
                       Array* gs = t.grad_buffer(student);
                       if (!gs) return;
                       const auto& [teach, wts, msk, trm] = *ctx;
                       const Array& sv = t.value(student);
                       const double scale = g[0] * inv;
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t v = 0; v < V; ++v) {
                           if (!msk[b * V + v]) continue;
                           for (const KlTerm& term : trm) {
                             const std::size_t si = (b * S + term.student_channel) * V + v;
                             const double p = sv[si];
                             const double q =
                                 term.teacher_channel < 0
                                     ? 0.0
                                     : teach[(b * T + static_cast<std::size_t>(term.teacher_channel)) * V + v];
                             const double a = wts[(b * A + term.affinity_channel) * V + v];
                             const double d = dir == KlDirection::StudentTeacher ? bernoulli_kl_dp(p, q)
                                                                                 : bernoulli_kl_dq(q, p);
                             (*gs)[si] += scale * a * d;
                           }
                         }
                     });
}

}  // namespace ops

/// How CRCD treats current-class channels, which the teacher does not have.
enum class CrcdNewClassMode {
  ZeroTarget,  // KL(student_c || clamped 0), weighted by the class's affinity
  Skip,        // sum over old classes only
};

namespace detail {

inline void check_student(Var student, const StepClasses& layout, const char* what) {
  const Shape& s = student.shape();
  if (s.size() < 2 || s[1] != layout.student_channels()) {
    throw ShapeError(std::string(what) + ": student " + shape_string(s) + " does not match " +
                     std::to_string(layout.student_channels()) + " channels");
  }
}

inline void check_teacher(const Array& teacher, Var student, const StepClasses& layout, const char* what) {
  Shape expect = student.shape();
  expect[1] = layout.teacher_channels();
  if (teacher.shape() != expect) {
    throw ShapeError(std::string(what) + ": teacher " + shape_string(teacher.shape()) + ", expected " +
                     shape_string(expect));
  }
}

}  // namespace detail

/// Old-region calibrated distillation: over voxels with M_old = 1, the
/// affinity-weighted per-channel Bernoulli KL between the folded student and the
/// teacher on every old class, averaged over the region.
inline Var orcd_loss(Var student_probs, const Array& teacher_probs, const AffinityMap& affinity_old,
                     std::span<const std::uint8_t> old_mask, const StepClasses& layout,
                     KlDirection dir = KlDirection::StudentTeacher) {
  detail::check_student(student_probs, layout, "orcd_loss");
  detail::check_teacher(teacher_probs, student_probs, layout, "orcd_loss");
  Var folded = ops::fold_new_into_bg(student_probs, layout);
  std::vector<ops::KlTerm> terms;
  for (std::size_t j = 0; j < layout.old_classes.size(); ++j) {
    const long a = affinity_old.index_of(layout.old_classes[j]);
    if (a < 0) continue;
    terms.push_back({j + 1, static_cast<long>(j + 1), static_cast<std::size_t>(a)});
  }
  return ops::calibrated_kl(folded, teacher_probs, affinity_old.weights, old_mask, std::move(terms), dir);
}

/// Current-region calibrated distillation over voxels with M_cur = 1, summing
/// over every seen class present in `affinity_seen`.
inline Var crcd_loss(Var student_probs, const Array& teacher_probs, const AffinityMap& affinity_seen,
                     std::span<const std::uint8_t> current_mask, const StepClasses& layout,
                     KlDirection dir = KlDirection::StudentTeacher,
                     CrcdNewClassMode mode = CrcdNewClassMode::ZeroTarget) {
  detail::check_student(student_probs, layout, "crcd_loss");
  detail::check_teacher(teacher_probs, student_probs, layout, "crcd_loss");
  std::vector<ops::KlTerm> terms;
  for (std::size_t j = 0; j < layout.old_classes.size(); ++j) {
    const long a = affinity_seen.index_of(layout.old_classes[j]);
    if (a < 0) continue;
    terms.push_back({j + 1, static_cast<long>(j + 1), static_cast<std::size_t>(a)});
  }
  if (mode == CrcdNewClassMode::ZeroTarget) {
    const std::size_t base = 1 + layout.old_classes.size();
    for (std::size_t k = 0; k < layout.current_classes.size(); ++k) {
      const long a = affinity_seen.index_of(layout.current_classes[k]);
      if (a < 0) continue;
      terms.push_back({base + k, -1, static_cast<std::size_t>(a)});
    }
  }
  return ops::calibrated_kl(student_probs, teacher_probs, affinity_seen.weights, current_mask, std::move(terms),
                            dir);
}

enum class CeMode {
  Unbiased,  // background voxels score background + old-class mass
  Standard,  // background voxels score the background channel only
};

/// Mean over voxels of -ln q_i on student probabilities [B, S, spatial...].
/// Labels are background or current classes.
inline Var unbiased_ce(Var student_probs, std::span<const int> gt, const StepClasses& layout,
                       CeMode mode = CeMode::Unbiased) {
  detail::check_student(student_probs, layout, "unbiased_ce");
  const Shape& s = student_probs.shape();
  const std::size_t B = s[0], S = s[1];
  const std::size_t V = student_probs.value().size() / (B * S);
  if (gt.size() != B * V) throw ShapeError("unbiased_ce: label map size mismatch");

  std::map<int, std::size_t> fg_channel;
  for (std::size_t k = 0; k < layout.current_classes.size(); ++k)
    fg_channel[layout.current_classes[k]] = 1 + layout.old_classes.size() + k;
  const std::size_t bg_channels = mode == CeMode::Unbiased ? layout.teacher_channels() : 1;

  // channel of the scored probability for foreground voxels, -1 for background
  std::vector<long> target(B * V);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == 0) {
      target[i] = -1;
      continue;
    }
    auto it = fg_channel.find(gt[i]);
    if (it == fg_channel.end()) {
      throw ArgumentError("unbiased_ce: label " + std::to_string(gt[i]) + " is not background or a current class");
    }
    target[i] = static_cast<long>(it->second);
  }

  const Array& p = student_probs.value();
  std::vector<double> q(B * V);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t v = 0; v < V; ++v) {
      const std::size_t i = b * V + v;
      double qi;
      if (target[i] >= 0) {
        qi = p[(b * S + static_cast<std::size_t>(target[i])) * V + v];
      } else {
        qi = p[(b * S) * V + v];
        for (std::size_t c = 1; c < bg_channels; ++c) qi += p[(b * S + c) * V + v];
      }
      q[i] = qi;
      total -= std::log(clamp_probability(qi));
    }
  const double inv = 1.0 / static_cast<double>(B * V);
  return student_probs.tape->record(
      Array::scalar(total * inv), {student_probs},
      [student_probs, target = std::move(target), q = std::move(q), B, S, V, bg_channels, inv](Tape& t,
                                                                                              const Array& g) {
        Array* gs = t.grad_buffer(student_probs);
        if (!gs) return;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t v = 0; v < V; ++v) {
            const std::size_t i = b * V + v;
            const double d = -g[0] * inv * clamp_probability_slope(q[i]) / clamp_probability(q[i]);
            if (target[i] >= 0) {
              (*gs)[(b * S + static_cast<std::size_t>(target[i])) * V + v] += d;
            } else {
              for (std::size_t c = 0; c < bg_channels; ++c) (*gs)[(b * S + c) * V + v] += d;
            }
          }
      });
}

}  // namespace cisseg
