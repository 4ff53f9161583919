#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "addex/autodiff.hpp"

namespace addex {

/// Scalar-valued function built on a tape from a single input variable.
using TapeFunction = std::function<Var(Tape&, Var)>;

/// Compares reverse-mode gradients of f at x against central differences.
/// Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
inline double grad_check(const TapeFunction& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");

  Tape tape;
  Var in = tape.variable(x);
  Var root = f(tape, in);
  const Tensor analytic = backward(tape, root)[in];

  auto eval = [&](const Tensor& point) {
    Tape t;
    return f(t, t.constant(point)).item();
  };

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + step;
    const double up = eval(probe);
    probe.data[i] = orig - step;
    const double down = eval(probe);
    probe.data[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic.data[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace addex
