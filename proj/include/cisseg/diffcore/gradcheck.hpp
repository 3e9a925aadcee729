#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "cisseg/diffcore/array.hpp"
#include "cisseg/diffcore/tape.hpp"

namespace cisseg {

/// Scalar-valued function recorded on a tape, taking one differentiable input.
using TapeFunction = std::function<Var(Tape&, Var)>;

/// Compares the reverse-mode gradient of `f` at `x` with central differences.
///
/// Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
inline double finite_diff_check(const TapeFunction& f, const Array& x, double eps = 1e-6) {
  if (!(eps > 0.0)) throw ArgumentError("finite_diff_check: eps must be positive");

  auto evaluate = [&f](const Array& at) {
    Tape tape(false);
    const double v = f(tape, tape.leaf(at, false)).value().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite function value");
    return v;
  };

  Tape tape;
  Var in = tape.leaf(x, true);
  Var out = f(tape, in);
  if (!std::isfinite(out.value().item())) {
    throw NumericError("finite_diff_check: non-finite function value");
  }
  tape.backward(out);
  const Array analytic = tape.has_grad(in) ? tape.grad(in) : Array(x.shape(), 0.0);

  double worst = 0.0;
  Array probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = evaluate(probe);
    probe[i] = orig - eps;
    const double down = evaluate(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace cisseg
