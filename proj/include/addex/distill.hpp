#pragma once

// Explainer training: squared distillation residual plus a decaying prior
// term lambda(t) * P(alpha, w), with lambda(t) = beta / sqrt(t).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "addex/autodiff.hpp"
#include "addex/models.hpp"
#include "addex/optim.hpp"
#include "addex/prior.hpp"
#include "addex/random.hpp"
#include "addex/tensor.hpp"

namespace addex {

/// Smoothing inside the cross-entropy logarithm.
inline constexpr double kLogSmoothing = 1e-12;

enum class PriorKind { kCrossEntropy, kL2, kNone };

inline const char* to_string(PriorKind k) {
  switch (k) {
    case PriorKind::kCrossEntropy: return "ce";
    case PriorKind::kL2: return "l2";
    case PriorKind::kNone: return "none";
  }
  return "?";
}

inline PriorKind prior_kind_from_string(const std::string& s) {
  if (s == "ce" || s == "cross_entropy") return PriorKind::kCrossEntropy;
  if (s == "l2") return PriorKind::kL2;
  if (s == "none") return PriorKind::kNone;
  throw std::invalid_argument("unknown prior kind '" + s + "' (expected ce, l2 or none)");
}

struct DistillConfig {
  double beta = 10.0;
  PriorKind prior = PriorKind::kCrossEntropy;
  long epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  std::uint64_t seed = 0;
  bool positive = true;

  void validate() const {
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw std::invalid_argument("beta must be finite and >= 0");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw std::invalid_argument("learning rate must be finite and > 0");
    }
  }

  /// Priors are clamped to be nonnegative exactly when the cross-entropy
  /// prior is used, since it needs both distributions nonnegative.
  bool clamp_priors() const { return prior == PriorKind::kCrossEntropy; }
};

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

/// (score - sum_i alpha_i y_i - b)^2
inline double distill_loss(double score, const Tensor& alpha, const Tensor& y, double b) {
  const double r = score - explainer_predict(alpha, y, b);
  return r * r;
}

inline Var distill_loss(Var score, Var alpha, Var y, Var b) {
  Var r = sub(score, explainer_predict(alpha, y, b));
  return dot(r, r);
}

/// Mean of squared residuals.
inline double mean_squared(std::span<const double> residuals) {
  if (residuals.empty()) throw std::invalid_argument("mean_squared: empty batch");
  double s = 0.0;
  for (double r : residuals) s += r * r;
  return s / static_cast<double>(residuals.size());
}

/// -sum_i w^_i log(alpha^_i + eps) with both vectors L1-normalized; w is the
/// fixed target. Empty when either vector sums to zero.
inline std::optional<Var> prior_loss_ce(Var alpha, const Tensor& w) {
  require_same_shape(alpha.value(), w, "prior_loss_ce");
  double w1 = 0.0;
  for (double v : w.data) {
    if (v < 0.0) throw std::invalid_argument("prior_loss_ce: prior weights must be nonnegative");
    w1 += v;
  }
  for (double v : alpha.value().data) {
    if (v < 0.0) throw std::invalid_argument("prior_loss_ce: alpha must be nonnegative");
  }
  Var a1 = l1norm(alpha);
  if (w1 == 0.0 || a1.item() == 0.0) return std::nullopt;
  Tensor target = w;
  for (double& v : target.data) v /= w1;
  Tape& tape = *alpha.tape;
  Var log_a = log(add_scalar(div(alpha, a1), kLogSmoothing));
  return scale(dot(tape.constant(std::move(target)), log_a), -1.0);
}

/// |alpha/|alpha|_2 - w/|w|_2|_2^2, in [0, 4]. Empty when either norm is zero.
inline std::optional<Var> prior_loss_l2(Var alpha, const Tensor& w) {
  require_same_shape(alpha.value(), w, "prior_loss_l2");
  const double w2 = std::sqrt(dot_of(w.data, w.data));
  Var a2 = l2norm(alpha);
  if (w2 == 0.0 || a2.item() == 0.0) return std::nullopt;
  Tensor target = w;
  for (double& v : target.data) v /= w2;
  Var d = sub(div(alpha, a2), alpha.tape->constant(std::move(target)));
  return dot(d, d);
}

inline std::optional<Var> prior_loss(PriorKind kind, Var alpha, const Tensor& w) {
  switch (kind) {
    case PriorKind::kCrossEntropy: return prior_loss_ce(alpha, w);
    case PriorKind::kL2: return prior_loss_l2(alpha, w);
    case PriorKind::kNone: return std::nullopt;
  }
  return std::nullopt;
}

inline std::optional<double> prior_loss_ce(const Tensor& alpha, const Tensor& w) {
  Tape tape;
  auto v = prior_loss_ce(tape.constant(alpha), w);
  return v ? std::optional<double>(v->item()) : std::nullopt;
}

inline std::optional<double> prior_loss_l2(const Tensor& alpha, const Tensor& w) {
  Tape tape;
  auto v = prior_loss_l2(tape.constant(alpha), w);
  return v ? std::optional<double>(v->item()) : std::nullopt;
}

/// beta / sqrt(t) for epochs t = 1, 2, ...
inline double lambda_schedule(long t, double beta) {
  if (t < 1) throw std::invalid_argument("lambda_schedule: epoch index must be >= 1, got " + std::to_string(t));
  return beta / std::sqrt(static_cast<double>(t));
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

/// Everything the explainer needs for one image, computed once from the
/// frozen performer and concept bank.
struct DistillSample {
  Tensor input;  // explainer input (image or top map)
  Tensor y;      // concept scores
  double score = 0.0;
  std::optional<PriorWeights> prior;
};

inline std::vector<std::size_t> all_concepts(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

inline Tensor select(const Tensor& v, std::span<const std::size_t> idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v.data.at(i));
  return Tensor::vector(std::move(out));
}

inline PriorWeights select(const PriorWeights& p, std::span<const std::size_t> idx) {
  PriorWeights out;
  out.w = select(p.w, idx);
  out.source = p.source;
  out.clamped = p.clamped;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    for (std::size_t d : p.degenerate_concepts) {
      if (d == idx[k]) out.degenerate_concepts.push_back(k);
    }
  }
  out.degenerate = detail::all_zero(out.w);
  return out;
}

/// Builds samples over the concepts in `subset` (all concepts when empty).
inline std::vector<DistillSample> prepare_samples(const PerformerModel& performer, const ConceptBank& bank,
                                                  std::span<const Tensor> images, ExplainerInput source,
                                                  PriorKind prior, bool clamp,
                                                  std::vector<std::size_t> subset = {}) {
  if (subset.empty()) subset = all_concepts(bank.num_concepts);
  for (std::size_t i : subset) {
    if (i >= bank.num_concepts) throw std::out_of_range("concept subset index out of range");
  }
  std::vector<DistillSample> samples;
  samples.reserve(images.size());
  for (const Tensor& image : images) {
    PerformerOutput out = performer_forward(performer, image);
    DistillSample s;
    s.y = select(concept_scores(bank, out.top_map), subset);
    s.score = out.score;
    if (prior != PriorKind::kNone) {
      PriorWeights w = bank.mode == ConceptMode::kCase1 ? prior_case1_from_map(performer, out.top_map)
                                                        : prior_case2(performer, bank, out.top_map);
      w = select(w, subset);
      s.prior = clamp ? clamp_nonneg(std::move(w)) : std::move(w);
    }
    s.input = source == ExplainerInput::kImage ? image : std::move(out.top_map);
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Batch loss and training
// ---------------------------------------------------------------------------

struct LossTerms {
  double distill = 0.0;  // batch mean of squared residuals
  double prior = 0.0;    // batch mean of the prior term (skipped samples add 0)
  double lambda = 0.0;
  double total = 0.0;
  std::size_t skipped_priors = 0;
};

/// Per-sample graphs for one batch, all sharing the explainer's parameter vars.
struct BatchGraph {
  Var root;  // mean over the batch of distill + lambda * prior
  LossTerms terms;
};

inline BatchGraph batch_graph(Tape& tape, const ExplainerModel& explainer, const ExplainerVars& vars,
                              std::span<const DistillSample* const> batch, const DistillConfig& cfg,
                              long t) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  LossTerms terms;
  terms.lambda = cfg.prior == PriorKind::kNone ? 0.0 : lambda_schedule(t, cfg.beta);
  // A zero weight keeps the prior off the graph so the trajectory is the baseline's.
  const bool prior_on_graph = terms.lambda != 0.0;
  std::optional<Var> acc;
  for (const DistillSample* s : batch) {
    Var alpha = explainer_alpha(explainer, vars, tape.constant(s->input));
    Var loss = distill_loss(tape.constant(Tensor::scalar(s->score)), alpha, tape.constant(s->y), vars.bias);
    terms.distill += loss.item();
    if (cfg.prior != PriorKind::kNone) {
      if (!s->prior) throw std::invalid_argument("sample is missing prior weights");
      if (prior_on_graph) {
        auto p = prior_loss(cfg.prior, alpha, s->prior->w);
        if (p) {
          terms.prior += p->item();
          loss = add(loss, scale(*p, terms.lambda));
        } else {
          ++terms.skipped_priors;
        }
      } else {
        Tape scratch;
        auto p = prior_loss(cfg.prior, scratch.constant(alpha.value()), s->prior->w);
        if (p) terms.prior += p->item();
        else ++terms.skipped_priors;
      }
    }
    acc = acc ? add(*acc, loss) : loss;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  terms.distill *= inv;
  terms.prior *= inv;
  terms.total = terms.distill + terms.lambda * terms.prior;
  return {scale(*acc, inv), terms};
}

/// Loss of the current explainer on a batch, without updating anything.
inline LossTerms total_loss(const ExplainerModel& explainer, std::span<const DistillSample> batch,
                            const DistillConfig& cfg, long t) {
  std::vector<const DistillSample*> ptrs;
  for (const DistillSample& s : batch) ptrs.push_back(&s);
  Tape tape;
  return batch_graph(tape, explainer, bind(tape, explainer, false), ptrs, cfg, t).terms;
}

struct EpochRecord {
  long epoch = 0;
  double distill = 0.0;  // L
  double prior = 0.0;    // prior loss
  double lambda = 0.0;
  double total = 0.0;
  std::size_t skipped_priors = 0;
};

struct TrainState {
  long epoch = 0;
  std::vector<EpochRecord> history;
};

/// Raised when training produces a non-finite loss; carries the epoch index.
class DivergenceError : public NumericError {
 public:
  DivergenceError(long epoch, const std::string& what)
      : NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  long epoch() const { return epoch_; }

 private:
  long epoch_;
};

/// Trains the explainer in place. Only the explainer's parameters change.
/// Per-epoch values are means of the batch losses seen during that epoch.
inline TrainState train(ExplainerModel& explainer, std::span<const DistillSample> samples,
                        const DistillConfig& cfg) {
  cfg.validate();
  explainer.validate();
  if (samples.empty()) throw std::invalid_argument("train: dataset is empty");
  if (cfg.positive != explainer.positive) {
    throw std::invalid_argument("train: positivity flag differs between config and explainer");
  }
  Optimizer opt(cfg.optimizer, cfg.learning_rate, explainer.parameters());
  Rng order_rng(derive_seed(cfg.seed, 2));
  std::vector<std::size_t> order = all_concepts(samples.size());

  TrainState state;
  for (long t = 1; t <= cfg.epochs; ++t) {
    state.epoch = t;
    order_rng.shuffle(order);
    EpochRecord rec{t};
    std::size_t batches = 0;
    try {
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        std::vector<const DistillSample*> batch;
        for (std::size_t k = start; k < end; ++k) batch.push_back(&samples[order[k]]);

        Tape tape;
        ExplainerVars vars = bind(tape, explainer, true);
        BatchGraph g = batch_graph(tape, explainer, vars, batch, cfg, t);
        if (!std::isfinite(g.terms.total)) throw NumericError("non-finite batch loss");
        GradientMap grads = backward(tape, g.root);
        std::vector<Tensor> gs;
        for (std::size_t i = 0; i < vars.weights.size(); ++i) {
          gs.push_back(grads[vars.weights[i]]);
          gs.push_back(grads[vars.biases[i]]);
        }
        gs.push_back(grads[vars.bias]);
        opt.step(gs);

        rec.distill += g.terms.distill;
        rec.prior += g.terms.prior;
        rec.lambda = g.terms.lambda;
        rec.total += g.terms.total;
        rec.skipped_priors += g.terms.skipped_priors;
        ++batches;
      }
    } catch (const DivergenceError&) {
      throw;
    } catch (const NumericError& e) {
      throw DivergenceError(t, e.what());
    }
    rec.distill /= static_cast<double>(batches);
    rec.prior /= static_cast<double>(batches);
    rec.total /= static_cast<double>(batches);
    for (const Tensor* p : explainer.parameters()) {
      if (!p->all_finite()) throw DivergenceError(t, "non-finite explainer parameter");
    }
    state.history.push_back(rec);
  }
  return state;
}

/// Prepares samples from the frozen models and trains. Throws if either
/// frozen model changed during training.
inline TrainState train(ExplainerModel& explainer, const PerformerModel& performer, const ConceptBank& bank,
                        std::span<const Tensor> images, const DistillConfig& cfg,
                        std::vector<std::size_t> subset = {}) {
  const std::uint64_t before = checksum(performer) ^ checksum(bank);
  const auto samples =
      prepare_samples(performer, bank, images, explainer.input, cfg.prior, cfg.clamp_priors(), std::move(subset));
  TrainState state = train(explainer, samples, cfg);
  if ((checksum(performer) ^ checksum(bank)) != before) {
    throw std::logic_error("frozen performer or concept bank changed during training");
  }
  return state;
}

}  // namespace addex
