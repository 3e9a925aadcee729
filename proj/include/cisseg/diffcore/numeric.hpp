#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>

#include "cisseg/diffcore/array.hpp"

namespace cisseg {

// Probabilities that enter a logarithm are clamped into [kProbEps, 1 - kProbEps].
inline constexpr double kProbEps = 1e-7;

inline double clamp_probability(double p) noexcept {
  return std::clamp(p, kProbEps, 1.0 - kProbEps);
}

// Derivative of clamp_probability; zero where the clamp is active.
inline double clamp_probability_slope(double p) noexcept {
  return (p > kProbEps && p < 1.0 - kProbEps) ? 1.0 : 0.0;
}

/// Which side of a per-channel KL the student sits on.
/// `StudentTeacher` is KL(student || teacher), the order the calibrated losses are written in.
enum class KlDirection { StudentTeacher, TeacherStudent };

/// Bernoulli KL: p ln(p/q) + (1-p) ln((1-p)/(1-q)), both arguments clamped.
inline double bernoulli_kl(double p, double q) noexcept {
  const double pc = clamp_probability(p);
  const double qc = clamp_probability(q);
  return pc * std::log(pc / qc) + (1.0 - pc) * std::log((1.0 - pc) / (1.0 - qc));
}

// d/dp of bernoulli_kl(p, q).
inline double bernoulli_kl_dp(double p, double q) noexcept {
  const double pc = clamp_probability(p);
  const double qc = clamp_probability(q);
  return clamp_probability_slope(p) * (std::log(pc / qc) - std::log((1.0 - pc) / (1.0 - qc)));
}

// d/dq of bernoulli_kl(p, q).
inline double bernoulli_kl_dq(double p, double q) noexcept {
  const double pc = clamp_probability(p);
  const double qc = clamp_probability(q);
  return clamp_probability_slope(q) * (-pc / qc + (1.0 - pc) / (1.0 - qc));
}

inline Array bernoulli_kl(const Array& p, const Array& q) {
  if (p.shape() != q.shape()) {
    throw ShapeError("bernoulli_kl shape mismatch: " + shape_string(p.shape()) + " vs " +
                     shape_string(q.shape()));
  }
  Array out(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = bernoulli_kl(p[i], q[i]);
  return out;
}

/// Cosine similarity; 0 when either vector is all zeros.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw ShapeError("cosine_similarity length mismatch: " + std::to_string(u.size()) + " vs " +
                     std::to_string(v.size()));
  }
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

/// Max-subtracted softmax along `axis`.
inline Array softmax(const Array& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis);
  x.require_finite("softmax");
  Array out(x.shape());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < v.outer; ++a) {
    const std::size_t base = a * v.extent * v.inner;
    for (std::size_t i = 0; i < v.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < v.extent; ++k) mx = std::max(mx, in[base + k * v.inner + i]);
      double sum = 0.0;
      for (std::size_t k = 0; k < v.extent; ++k) {
        const double e = std::exp(in[base + k * v.inner + i] - mx);
        o[base + k * v.inner + i] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < v.extent; ++k) o[base + k * v.inner + i] /= sum;
    }
  }
  return out;
}

}  // namespace cisseg
