#pragma once

#include <algorithm>
#include <cstddef>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cisseg/diffcore/array.hpp"
#include "cisseg/diffcore/numeric.hpp"
#include "cisseg/diffcore/tape.hpp"

namespace cisseg::ops {

// ---------------------------------------------------------------------------
// Elementwise / reductions

inline Var softmax(Var x, std::size_t axis) {
  Array s = cisseg::softmax(x.value(), axis);
  const AxisView v = axis_view(s.shape(), axis);
  std::shared_ptr<const Array> saved;
  if (x.requires_grad()) saved = std::make_shared<const Array>(s);
  return x.tape->record(std::move(s), {x}, [x, v, saved](Tape& t, const Array& g) {
    Array* gx = t.grad_buffer(x);
    if (!gx) return;
    auto gd = g.data();
    auto sd = saved->data();
    auto out = gx->data();
    for (std::size_t a = 0; a < v.outer; ++a) {
      const std::size_t base = a * v.extent * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) {
        double dot = 0.0;
        for (std::size_t k = 0; k < v.extent; ++k) {
          const std::size_t idx = base + k * v.inner + i;
          dot += sd[idx] * gd[idx];
        }
        for (std::size_t k = 0; k < v.extent; ++k) {
          const std::size_t idx = base + k * v.inner + i;
          out[idx] += sd[idx] * (gd[idx] - dot);
        }
      }
    }
  });
}

inline Var relu(Var x) {
  const Array& xv = x.value();
  Array y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return x.tape->record(std::move(y), {x}, [x](Tape& t, const Array& g) {
    Array* gx = t.grad_buffer(x);
    if (!gx) return;
    const Array& xv = t.value(x);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) (*gx)[i] += g[i];
    }
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(Array::scalar(s), {x}, [x](Tape& t, const Array& g) {
    Array* gx = t.grad_buffer(x);
    if (!gx) return;
    for (double& v : gx->data()) v += g[0];
  });
}

/// Sum of x * w for a constant weight array of the same shape.
inline Var dot_constant(Var x, Array w) {
  if (x.shape() != w.shape()) {
    throw ShapeError("dot_constant shape mismatch: " + shape_string(x.shape()) + " vs " +
                     shape_string(w.shape()));
  }
  double s = 0.0;
  const Array& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * w[i];
  return x.tape->record(Array::scalar(s), {x}, [x, w = std::move(w)](Tape& t, const Array& g) {
    Array* gx = t.grad_buffer(x);
    if (!gx) return;
    for (std::size_t i = 0; i < w.size(); ++i) (*gx)[i] += g[0] * w[i];
  });
}

/// Scalar linear combination sum_i weights[i] * terms[i].
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw ArgumentError("weighted_sum needs one weight per term");
  }
  Tape& tape = *terms.front().tape;
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().size() != 1) throw ShapeError("weighted_sum terms must be scalars");
    s += weights[i] * terms[i].value()[0];
  }
  return tape.record(Array::scalar(s), terms, [terms, weights](Tape& t, const Array& g) {
    for (std::size_t i = 0; i < terms.size(); ++i) {
      if (Array* gi = t.grad_buffer(terms[i])) (*gi)[0] += weights[i] * g[0];
    }
  });
}

inline Var add(Var a, Var b) { return weighted_sum({a, b}, {1.0, 1.0}); }
inline Var scale(Var a, double c) { return weighted_sum({a}, {c}); }

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

struct Run {
  std::size_t out_off;
  std::size_t in_off;
  std::size_t len;
};

// Contiguous index runs where out[h,w,d] pairs with in[h+dh, w+dw, d+dd].
inline std::vector<Run> tap_runs(std::size_t H, std::size_t W, std::size_t D, long dh, long dw,
                                 long dd) {
  std::vector<Run> runs;
  const long h0 = std::max(0L, -dh), h1 = std::min<long>(H, static_cast<long>(H) - dh);
  const long w0 = std::max(0L, -dw), w1 = std::min<long>(W, static_cast<long>(W) - dw);
  const long d0 = std::max(0L, -dd), d1 = std::min<long>(D, static_cast<long>(D) - dd);
  if (h0 >= h1 || w0 >= w1 || d0 >= d1) return runs;
  const long Wl = static_cast<long>(W), Dl = static_cast<long>(D);
  const long shift = (dh * Wl + dw) * Dl + dd;
  auto push = [&](long out_off, long len) {
    runs.push_back(Run{static_cast<std::size_t>(out_off), static_cast<std::size_t>(out_off + shift),
                       static_cast<std::size_t>(len)});
  };
  if (dw == 0 && dd == 0) {
    push(h0 * Wl * Dl, (h1 - h0) * Wl * Dl);
  } else if (dd == 0) {
    for (long h = h0; h < h1; ++h) push((h * Wl + w0) * Dl, (w1 - w0) * Dl);
  } else {
    for (long h = h0; h < h1; ++h)
      for (long w = w0; w < w1; ++w) push((h * Wl + w) * Dl + d0, d1 - d0);
  }
  return runs;
}

}  // namespace detail

/// Zero-padded, stride-1 "same" convolution.
///
/// input [B, Ci, H, W, D], weight [Co, Ci, KH, KW, KD] with odd kernel extents,
/// bias [Co] -> output [B, Co, H, W, D].
inline Var conv3d(Var input, Var weight, Var bias) {
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 5 || ws.size() != 5 || bias.shape().size() != 1) {
    throw ShapeError("conv3d expects 5-d input/weight and 1-d bias");
  }
  const std::size_t B = xs[0], Ci = xs[1], H = xs[2], W = xs[3], D = xs[4];
  const std::size_t Co = ws[0], KH = ws[2], KW = ws[3], KD = ws[4];
  if (ws[1] != Ci) {
    throw ShapeError("conv3d channel mismatch: input " + shape_string(xs) + " weight " + shape_string(ws));
  }
  if (bias.shape()[0] != Co) throw ShapeError("conv3d bias length mismatch");
  if (KH % 2 == 0 || KW % 2 == 0 || KD % 2 == 0) throw ShapeError("conv3d kernel extents must be odd");

  const std::size_t V = H * W * D;
  const std::size_t taps = KH * KW * KD;
  auto runs = std::make_shared<std::vector<std::vector<detail::Run>>>();
  runs->reserve(taps);
  for (std::size_t kh = 0; kh < KH; ++kh)
    for (std::size_t kw = 0; kw < KW; ++kw)
      for (std::size_t kd = 0; kd < KD; ++kd)
        runs->push_back(detail::tap_runs(H, W, D, static_cast<long>(kh) - static_cast<long>(KH / 2),
                                         static_cast<long>(kw) - static_cast<long>(KW / 2),
                                         static_cast<long>(kd) - static_cast<long>(KD / 2)));

  const Array& x = input.value();
  const Array& w = weight.value();
  const Array& bv = bias.value();
  Array y(Shape{B, Co, H, W, D});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Co; ++co) {
      double* o = y.data().data() + (b * Co + co) * V;
      std::fill(o, o + V, bv[co]);
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* in = x.data().data() + (b * Ci + ci) * V;
        const double* wk = w.data().data() + (co * Ci + ci) * taps;
        for (std::size_t tap = 0; tap < taps; ++tap) {
          const double wv = wk[tap];
          for (const detail::Run& r : (*runs)[tap]) {
            double* __restrict op = o + r.out_off;
            const double* __restrict ip = in + r.in_off;
            for (std::size_t j = 0; j < r.len; ++j) op[j] += wv * ip[j];
          }
        }
      }
    }
  }

  return input.tape->record(
      std::move(y), {input, weight, bias},
      [input, weight, bias, runs, B, Ci, Co, V, taps](Tape& t, const Array& g) {
        const Array& x = t.value(input);
        const Array& w = t.value(weight);
        Array* gx = t.grad_buffer(input);
        Array* gw = t.grad_buffer(weight);
        Array* gb = t.grad_buffer(bias);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t co = 0; co < Co; ++co) {
            const double* go = g.data().data() + (b * Co + co) * V;
            if (gb) {
              double s = 0.0;
              for (std::size_t j = 0; j < V; ++j) s += go[j];
              (*gb)[co] += s;
            }
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const std::size_t wbase = (co * Ci + ci) * taps;
              const double* in = x.data().data() + (b * Ci + ci) * V;
              double* gin = gx ? gx->data().data() + (b * Ci + ci) * V : nullptr;
              for (std::size_t tap = 0; tap < taps; ++tap) {
                const double wv = w[wbase + tap];
                double acc = 0.0;
                for (const detail::Run& r : (*runs)[tap]) {
                  const double* __restrict gp = go + r.out_off;
                  const double* __restrict ip = in + r.in_off;
                  if (gw) {
                    for (std::size_t j = 0; j < r.len; ++j) acc += gp[j] * ip[j];
                  }
                  if (gin) {
                    double* __restrict gip = gin + r.in_off;
                    for (std::size_t j = 0; j < r.len; ++j) gip[j] += wv * gp[j];
                  }
                }
                if (gw) (*gw)[wbase + tap] += acc;
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Prototype pooling

/// Per-class masked means of a [B, K, spatial...] feature array.
struct SegmentMeans {
  std::optional<Var> means;        // [classes.size(), K]; empty when no class is present
  std::vector<int> classes;        // classes with at least one voxel, in request order
  std::vector<std::size_t> counts;
};

/// Mean feature vector of every requested class over the voxels labelled with it.
/// `labels` holds one class id per (batch, voxel) in [B, spatial...] order.
inline SegmentMeans segment_mean(Var features, std::span<const int> labels,
                                 const std::vector<int>& classes) {
  const Shape& fs = features.shape();
  if (fs.size() < 3) throw ShapeError("segment_mean expects [B, K, spatial...] features");
  const std::size_t B = fs[0], K = fs[1];
  const std::size_t V = shape_volume(fs) / (B * K);
  if (labels.size() != B * V) {
    throw ShapeError("segment_mean: label map has " + std::to_string(labels.size()) +
                     " voxels, features have " + std::to_string(B * V));
  }
  std::vector<std::size_t> counts(classes.size(), 0);
  std::vector<long> slot(B * V, -1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t c = 0; c < classes.size(); ++c) {
      if (labels[i] == classes[c]) {
        slot[i] = static_cast<long>(c);
        ++counts[c];
        break;
      }
    }
  }
  SegmentMeans result;
  std::vector<long> row(classes.size(), -1);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    if (counts[c] == 0) continue;
    row[c] = static_cast<long>(result.classes.size());
    result.classes.push_back(classes[c]);
    result.counts.push_back(counts[c]);
  }
  if (result.classes.empty()) return result;

  const std::size_t n = result.classes.size();
  Array sums(Shape{n, K}, 0.0);
  const Array& f = features.value();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      const double* fp = f.data().data() + (b * K + k) * V;
      for (std::size_t v = 0; v < V; ++v) {
        const long s = slot[b * V + v];
        if (s >= 0) sums[static_cast<std::size_t>(row[s]) * K + k] += fp[v];
      }
    }
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < K; ++k) sums[r * K + k] /= static_cast<double>(result.counts[r]);

  std::vector<long> voxel_row(B * V, -1);
  for (std::size_t i = 0; i < voxel_row.size(); ++i)
    if (slot[i] >= 0) voxel_row[i] = row[slot[i]];
  std::vector<double> inv_count(n);
  for (std::size_t r = 0; r < n; ++r) inv_count[r] = 1.0 / static_cast<double>(result.counts[r]);

  result.means = features.tape->record(
      std::move(sums), {features},
      [features, voxel_row = std::move(voxel_row), inv_count = std::move(inv_count), B, K, V](
          Tape& t, const Array& g) {
        Array* gf = t.grad_buffer(features);
        if (!gf) return;
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t k = 0; k < K; ++k) {
            double* gp = gf->data().data() + (b * K + k) * V;
            for (std::size_t v = 0; v < V; ++v) {
              const long r = voxel_row[b * V + v];
              if (r >= 0) gp[v] += g[static_cast<std::size_t>(r) * K + k] * inv_count[r];
            }
          }
        }
      });
  return result;
}

/// Builds rows out[m] = sum_j weight_j * in[src_j] from a [n, K] input.
inline Var combine_rows(Var rows, const std::vector<std::vector<std::pair<std::size_t, double>>>& recipe) {
  const Shape& s = rows.shape();
  if (s.size() != 2) throw ShapeError("combine_rows expects a [n, K] input");
  if (recipe.empty()) throw ArgumentError("combine_rows needs at least one output row");
  const std::size_t n = s[0], K = s[1];
  Array out(Shape{recipe.size(), K}, 0.0);
  const Array& in = rows.value();
  for (std::size_t m = 0; m < recipe.size(); ++m) {
    for (const auto& [src, wt] : recipe[m]) {
      if (src >= n) throw ShapeError("combine_rows source row out of range");
      for (std::size_t k = 0; k < K; ++k) out[m * K + k] += wt * in[src * K + k];
    }
  }
  return rows.tape->record(std::move(out), {rows}, [rows, recipe, K](Tape& t, const Array& g) {
    Array* gr = t.grad_buffer(rows);
    if (!gr) return;
    for (std::size_t m = 0; m < recipe.size(); ++m)
      for (const auto& [src, wt] : recipe[m])
        for (std::size_t k = 0; k < K; ++k) (*gr)[src * K + k] += wt * g[m * K + k];
  });
}

/// (1/m) * sum_r ||q_r - target_r||^2 for [m, K] arrays; gradient flows into q only.
inline Var mean_row_sq_distance(Var q, Array targets) {
  const Shape& s = q.shape();
  if (s.size() != 2 || targets.shape() != s) {
    throw ShapeError("mean_row_sq_distance shape mismatch: " + shape_string(s) + " vs " +
                     shape_string(targets.shape()));
  }
  const double m = static_cast<double>(s[0]);
  const Array& qv = q.value();
  double total = 0.0;
  for (std::size_t i = 0; i < qv.size(); ++i) {
    const double d = qv[i] - targets[i];
    total += d * d;
  }
  return q.tape->record(Array::scalar(total / m), {q},
                        [q, targets = std::move(targets), m](Tape& t, const Array& g) {
                          Array* gq = t.grad_buffer(q);
                          if (!gq) return;
                          const Array& qv = t.value(q);
                          for (std::size_t i = 0; i < qv.size(); ++i)
                            (*gq)[i] += g[0] * 2.0 * (qv[i] - targets[i]) / m;
                        });
}

}  // namespace cisseg::ops
