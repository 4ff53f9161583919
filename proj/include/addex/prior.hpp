#pragma once

// Rough per-image concept weights w used to steer early explainer training.
//
// Case 1: w_i = sum over (h, w) of d(score)/d(x_hwi), unnormalized; the
// normalization inside the prior losses absorbs any common factor.
// Case 2: first-order Taylor ratio w_i = <d score/dx, d y_i/dx> / |d y_i/dx|^2.

#include <algorithm>
#include <cstddef>
#include <vector>

#include "addex/autodiff.hpp"
#include "addex/grad_check.hpp"
#include "addex/models.hpp"
#include "addex/tensor.hpp"

namespace addex {

/// Squared gradient norms below this mark a concept unusable on that sample.
inline constexpr double kDegenerateGradient = 1e-12;

struct PriorWeights {
  Tensor w;
  ConceptMode source = ConceptMode::kCase1;
  bool clamped = false;
  // Every entry is zero, so no normalized prior distribution exists.
  bool degenerate = false;
  // Case 2 concepts whose own gradient vanished (their w_i was set to 0).
  std::vector<std::size_t> degenerate_concepts;
};

namespace detail {
inline bool all_zero(const Tensor& t) {
  return std::all_of(t.data.begin(), t.data.end(), [](double v) { return v == 0.0; });
}
}  // namespace detail

/// Case 1 prior from a top map: one backward pass from the performer score.
inline PriorWeights prior_case1_from_map(const PerformerModel& performer, const Tensor& top_map) {
  Tape tape;
  Var x = tape.variable(top_map);
  Var score = dense_on_sums(tape, performer.head, x);
  Var sums = spatial_sum(tape.constant(backward(tape, score)[x]));
  PriorWeights p;
  p.w = sums.value();
  p.source = ConceptMode::kCase1;
  p.degenerate = detail::all_zero(p.w);
  return p;
}

inline PriorWeights prior_case1(const PerformerModel& performer, const Tensor& image) {
  return prior_case1_from_map(performer, performer_forward(performer, image).top_map);
}

/// Case 2 prior. `target` and every entry of `concepts` map the shared
/// feature to a scalar; each gets its own backward pass.
inline PriorWeights prior_case2(const TapeFunction& target, const std::vector<TapeFunction>& concepts,
                                const Tensor& shared) {
  auto gradient = [&](const TapeFunction& f) {
    Tape tape;
    Var x = tape.variable(shared);
    Var root = f(tape, x);
    return backward(tape, root)[x];
  };
  const Tensor g_target = gradient(target);
  PriorWeights p;
  p.w = Tensor({concepts.size()});
  p.source = ConceptMode::kCase2;
  for (std::size_t i = 0; i < concepts.size(); ++i) {
    const Tensor g = gradient(concepts[i]);
    const double norm2 = dot_of(g.data, g.data);
    if (norm2 < kDegenerateGradient) {
      p.degenerate_concepts.push_back(i);
      continue;
    }
    p.w.data[i] = dot_of(g_target.data, g.data) / norm2;
  }
  p.degenerate = detail::all_zero(p.w);
  return p;
}

/// Case 2 prior on the performer's shared top map, with the bank's heads as concepts.
inline PriorWeights prior_case2(const PerformerModel& performer, const ConceptBank& bank,
                                const Tensor& shared) {
  if (bank.mode != ConceptMode::kCase2) throw std::invalid_argument("prior_case2 needs a case2 bank");
  std::vector<TapeFunction> concepts;
  for (const DenseLayer& head : bank.heads) {
    concepts.push_back([&head](Tape& t, Var x) { return dense_on_sums(t, head, x); });
  }
  return prior_case2([&](Tape& t, Var x) { return dense_on_sums(t, performer.head, x); }, concepts,
                     shared);
}

/// w_i <- max(w_i, 0). Idempotent.
inline PriorWeights clamp_nonneg(PriorWeights p) {
  for (double& v : p.w.data) v = std::max(v, 0.0);
  p.clamped = true;
  p.degenerate = detail::all_zero(p.w);
  return p;
}

}  // namespace addex
