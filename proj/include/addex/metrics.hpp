#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "addex/distill.hpp"
#include "addex/io.hpp"
#include "addex/models.hpp"
#include "addex/tensor.hpp"
#include "json.hpp"

namespace addex {

// ---------------------------------------------------------------------------
// Contributions
// ---------------------------------------------------------------------------

struct ContributionVector {
  Tensor raw;         // alpha_i * y_i, signed
  Tensor normalized;  // |raw_i| / sum_j |raw_j|
  bool defined = true;  // false when every contribution is zero
};

inline ContributionVector contributions(const Tensor& alpha, const Tensor& y) {
  if (alpha.size() != y.size()) {
    throw ShapeError("contributions: alpha has " + std::to_string(alpha.size()) + " entries, y has " +
                     std::to_string(y.size()));
  }
  ContributionVector c{Tensor(alpha.shape), Tensor(alpha.shape)};
  double total = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    c.raw.data[i] = alpha.data[i] * y.data[i];
    total += std::abs(c.raw.data[i]);
  }
  if (total == 0.0) {
    c.defined = false;
    return c;
  }
  for (std::size_t i = 0; i < alpha.size(); ++i) c.normalized.data[i] = std::abs(c.raw.data[i]) / total;
  return c;
}

/// Natural-log entropy of a distribution, with 0 ln 0 = 0.
inline double entropy(std::span<const double> c, double tolerance = 1e-9) {
  if (c.empty()) throw std::invalid_argument("entropy: empty distribution");
  double total = 0.0;
  for (double v : c) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("entropy: entries must be finite and >= 0");
    total += v;
  }
  if (std::abs(total - 1.0) > tolerance) {
    throw std::invalid_argument("entropy: entries sum to " + std::to_string(total) + ", not 1");
  }
  double h = 0.0;
  for (double v : c) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

/// Contri_p = sum over i in part p of raw_i. Concepts outside every part are left out.
inline std::map<std::string, double> aggregate_parts(const Tensor& raw, const PartMap& parts) {
  validate_parts(parts, raw.size());
  std::map<std::string, double> out;
  for (const auto& [name, indices] : parts) {
    double s = 0.0;
    for (std::size_t i : indices) s += raw.data[i];
    out[name] = s;
  }
  return out;
}

inline std::map<std::string, double> aggregate_parts(const Tensor& alpha, const Tensor& y, const PartMap& parts) {
  return aggregate_parts(contributions(alpha, y).raw, parts);
}

/// Sum of contributions whose concept belongs to no part.
inline double unassigned_contribution(const Tensor& raw, const PartMap& parts) {
  std::vector<char> owned(raw.size(), 0);
  for (const auto& entry : parts) {
    for (std::size_t i : entry.second) owned.at(i) = 1;
  }
  double s = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!owned[i]) s += raw.data[i];
  }
  return s;
}

/// Keeps only the concepts in `subset`, renumbered by their position in it.
/// Parts left empty are dropped.
inline PartMap restrict_parts(const PartMap& parts, std::span<const std::size_t> subset) {
  PartMap out;
  for (const auto& [name, indices] : parts) {
    std::vector<std::size_t> kept;
    for (std::size_t k = 0; k < subset.size(); ++k) {
      if (std::find(indices.begin(), indices.end(), subset[k]) != indices.end()) kept.push_back(k);
    }
    if (!kept.empty()) out[name] = std::move(kept);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation oracle
// ---------------------------------------------------------------------------

struct AblationResult {
  double score = 0.0;
  std::map<std::string, double> deltas;  // score - score with the part's channels zeroed
  std::optional<std::map<std::string, double>> oracle;  // score * delta_p / sum of deltas
};

/// Zeroes each part's channels in the top map, re-runs the head, and
/// distributes the score in proportion to the signed drops. The oracle is
/// empty when the drops sum to less than `tolerance` in magnitude.
inline AblationResult ablation_ground_truth(const PerformerModel& performer, const Tensor& top_map,
                                            const PartMap& parts, double tolerance = 1e-9) {
  if (top_map.rank() != 3) throw ShapeError("ablation expects a top map [H x W x n]");
  const std::size_t n = top_map.shape[2];
  validate_parts(parts, n);
  AblationResult r;
  r.score = performer_score_from_map(performer, top_map);
  double total = 0.0;
  for (const auto& [name, channels] : parts) {
    Tensor edited = top_map;
    for (std::size_t p = 0; p < edited.size() / n; ++p) {
      for (std::size_t c : channels) edited.data[p * n + c] = 0.0;
    }
    const double d = r.score - performer_score_from_map(performer, edited);
    r.deltas[name] = d;
    total += d;
  }
  if (std::abs(total) < tolerance) return r;
  std::map<std::string, double> oracle;
  for (const auto& [name, d] : r.deltas) oracle[name] = r.score * d / total;
  r.oracle = std::move(oracle);
  return r;
}

inline AblationResult ablation_ground_truth_image(const PerformerModel& performer, const Tensor& image,
                                                  const PartMap& parts, double tolerance = 1e-9) {
  return ablation_ground_truth(performer, performer_forward(performer, image).top_map, parts, tolerance);
}

// ---------------------------------------------------------------------------
// Contribution error, deviation, accuracy
// ---------------------------------------------------------------------------

struct ContributionError {
  std::map<std::string, double> per_part;  // E|Contri_p - y*_p| / E[y]
  double mean = 0.0;                       // average over parts
  std::size_t included = 0;
  std::size_t excluded = 0;  // images whose oracle was undefined
};

/// `estimated[k]` holds Contri_p for image k, `oracle[k]` its ablation oracle
/// (empty when undefined), `scores[k]` the performer output.
inline ContributionError contribution_error(std::span<const std::map<std::string, double>> estimated,
                                            std::span<const std::optional<std::map<std::string, double>>> oracle,
                                            std::span<const double> scores, double tolerance = 1e-12) {
  if (estimated.size() != oracle.size() || estimated.size() != scores.size()) {
    throw std::invalid_argument("contribution_error: input lengths differ");
  }
  ContributionError out;
  double score_sum = 0.0;
  for (std::size_t k = 0; k < estimated.size(); ++k) {
    if (!oracle[k]) {
      ++out.excluded;
      continue;
    }
    ++out.included;
    score_sum += scores[k];
    for (const auto& [name, truth] : *oracle[k]) {
      out.per_part[name] += std::abs(estimated[k].at(name) - truth);
    }
  }
  if (out.included == 0) throw std::invalid_argument("contribution_error: oracle undefined on every image");
  const double n = static_cast<double>(out.included);
  const double mean_score = score_sum / n;
  if (std::abs(mean_score) < tolerance) {
    throw std::invalid_argument("contribution_error: mean performer output is ~0, error undefined");
  }
  for (auto& [name, e] : out.per_part) {
    e = (e / n) / mean_score;
    out.mean += e;
  }
  if (!out.per_part.empty()) out.mean /= static_cast<double>(out.per_part.size());
  return out;
}

struct DeviationResult {
  std::vector<double> per_image;
  double mean = 0.0;
};

/// |score - prediction| / (max score - min score), per image and on average.
inline DeviationResult relative_deviation(std::span<const double> scores, std::span<const double> predictions) {
  if (scores.size() != predictions.size() || scores.empty()) {
    throw std::invalid_argument("relative_deviation: need equally sized, nonempty inputs");
  }
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) throw std::invalid_argument("relative_deviation: performer outputs have zero range");
  DeviationResult r;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    r.per_image.push_back(std::abs(scores[k] - predictions[k]) / range);
    r.mean += r.per_image.back();
  }
  r.mean /= static_cast<double>(scores.size());
  return r;
}

struct ThresholdResult {
  double tau = 0.0;
  double accuracy = 0.0;
};

inline double accuracy_at(std::span<const double> scores, std::span<const int> labels, double tau) {
  std::size_t hits = 0;
  for (std::size_t k = 0; k < scores.size(); ++k) hits += ((scores[k] > tau) == (labels[k] != 0));
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

/// Predict positive when score > tau. Candidates are the midpoints between
/// adjacent distinct sorted scores plus -inf and +inf; the best accuracy
/// wins, ties going to the smallest |tau|.
inline ThresholdResult accuracy_with_threshold(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw std::invalid_argument("accuracy_with_threshold: need equally sized, nonempty inputs");
  }
  const bool has_pos = std::any_of(labels.begin(), labels.end(), [](int l) { return l != 0; });
  const bool has_neg = std::any_of(labels.begin(), labels.end(), [](int l) { return l == 0; });
  if (!has_pos || !has_neg) throw std::invalid_argument("accuracy_with_threshold: both classes must be present");

  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> candidates{-inf};
  for (std::size_t i = 0; i + 1 < sorted.size(); ++i) candidates.push_back(0.5 * (sorted[i] + sorted[i + 1]));
  candidates.push_back(inf);

  ThresholdResult best{inf, -1.0};
  for (double tau : candidates) {
    const double acc = accuracy_at(scores, labels, tau);
    if (acc > best.accuracy || (acc == best.accuracy && std::abs(tau) < std::abs(best.tau))) best = {tau, acc};
  }
  return best;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct ImageRecord {
  int label = 0;
  double score = 0.0;            // performer output
  double explainer_score = 0.0;  // sum alpha_i y_i + b
  double deviation = 0.0;
  std::optional<double> entropy;  // empty when contributions are all zero
  std::vector<double> alpha;
  std::vector<double> y;
  std::vector<double> contributions;
  std::map<std::string, double> parts;
  double unassigned = 0.0;
};

struct MetricsReport {
  std::size_t num_concepts = 0;
  double explainer_bias = 0.0;
  double mean_entropy = 0.0;  // over positive images with defined contributions
  std::size_t entropy_images = 0;
  std::optional<ContributionError> contribution_error;  // positive images; full concept set only
  double mean_deviation = 0.0;
  double performer_accuracy = 0.0;
  double performer_tau = 0.0;
  double explainer_accuracy = 0.0;
  double explainer_tau = 0.0;
  std::vector<ImageRecord> images;
};

/// Evaluates a trained explainer on labeled images. `subset` lists the
/// concepts the explainer was trained on (all when empty). The contribution
/// error is only computed when the explainer sees every concept.
inline MetricsReport evaluate(const PerformerModel& performer, const ConceptBank& bank,
                              const ExplainerModel& explainer, std::span<const Tensor> images,
                              std::span<const int> labels, std::vector<std::size_t> subset = {}) {
  if (images.size() != labels.size()) throw std::invalid_argument("evaluate: images and labels differ in length");
  if (subset.empty()) subset = all_concepts(bank.num_concepts);
  const bool full = subset.size() == bank.num_concepts;
  const PartMap parts = restrict_parts(bank.parts, subset);
  const auto samples = prepare_samples(performer, bank, images, explainer.input, PriorKind::kNone, false, subset);

  MetricsReport rep;
  rep.num_concepts = subset.size();
  rep.explainer_bias = explainer.b();
  std::vector<double> scores, preds;
  std::vector<std::map<std::string, double>> est;
  std::vector<std::optional<std::map<std::string, double>>> oracle;
  std::vector<double> oracle_scores;
  double entropy_sum = 0.0;

  for (std::size_t k = 0; k < samples.size(); ++k) {
    const DistillSample& s = samples[k];
    const Tensor alpha = explainer_weights(explainer, s.input);
    const ContributionVector c = contributions(alpha, s.y);
    ImageRecord r;
    r.label = labels[k];
    r.score = s.score;
    r.explainer_score = explainer_predict(alpha, s.y, explainer.b());
    r.alpha = alpha.data;
    r.y = s.y.data;
    r.contributions = c.raw.data;
    r.parts = aggregate_parts(c.raw, parts);
    r.unassigned = unassigned_contribution(c.raw, parts);
    if (c.defined) r.entropy = entropy(c.normalized.data);
    if (r.label != 0 && r.entropy) {
      entropy_sum += *r.entropy;
      ++rep.entropy_images;
    }
    if (full && r.label != 0) {
      const Tensor top = explainer.input == ExplainerInput::kTopMap ? s.input
                                                                     : performer_forward(performer, images[k]).top_map;
      est.push_back(r.parts);
      oracle.push_back(ablation_ground_truth(performer, top, parts).oracle);
      oracle_scores.push_back(s.score);
    }
    scores.push_back(r.score);
    preds.push_back(r.explainer_score);
    rep.images.push_back(std::move(r));
  }

  if (rep.entropy_images > 0) rep.mean_entropy = entropy_sum / static_cast<double>(rep.entropy_images);
  if (full && !est.empty()) rep.contribution_error = contribution_error(est, oracle, oracle_scores);
  const DeviationResult dev = relative_deviation(scores, preds);
  rep.mean_deviation = dev.mean;
  for (std::size_t k = 0; k < rep.images.size(); ++k) rep.images[k].deviation = dev.per_image[k];
  const ThresholdResult pt = accuracy_with_threshold(scores, labels);
  const ThresholdResult et = accuracy_with_threshold(preds, labels);
  rep.performer_accuracy = pt.accuracy;
  rep.performer_tau = pt.tau;
  rep.explainer_accuracy = et.accuracy;
  rep.explainer_tau = et.tau;
  return rep;
}

inline nlohmann::json to_json(const ContributionError& e) {
  return {{"per_part", e.per_part}, {"mean", e.mean}, {"included", e.included}, {"excluded", e.excluded}};
}

inline nlohmann::json to_json(const MetricsReport& r, bool with_images = true) {
  nlohmann::json j{
      {"num_concepts", r.num_concepts},
      {"explainer_bias", r.explainer_bias},
      {"mean_entropy", r.mean_entropy},
      {"entropy_images", r.entropy_images},
      {"contribution_error", r.contribution_error ? to_json(*r.contribution_error) : nlohmann::json(nullptr)},
      {"mean_deviation", r.mean_deviation},
      {"performer_accuracy", r.performer_accuracy},
      {"performer_tau", json_number(r.performer_tau)},
      {"explainer_accuracy", r.explainer_accuracy},
      {"explainer_tau", json_number(r.explainer_tau)},
  };
  if (!with_images) return j;
  nlohmann::json images = nlohmann::json::array();
  for (const ImageRecord& im : r.images) {
    images.push_back({{"label", im.label},
                      {"score", im.score},
                      {"explainer_score", im.explainer_score},
                      {"deviation", im.deviation},
                      {"entropy", im.entropy ? nlohmann::json(*im.entropy) : nlohmann::json(nullptr)},
                      {"alpha", im.alpha},
                      {"y", im.y},
                      {"contributions", im.contributions},
                      {"parts", im.parts},
                      {"unassigned", im.unassigned}});
  }
  j["images"] = std::move(images);
  return j;
}

/// One row per image, then a blank line and a metric,value summary block.
inline std::string to_csv(const MetricsReport& r) {
  std::string out = "image,label,score,explainer_score,deviation,entropy\n";
  for (std::size_t k = 0; k < r.images.size(); ++k) {
    const ImageRecord& im = r.images[k];
    out += std::to_string(k) + ',' + std::to_string(im.label) + ',' + format_double(im.score) + ',' +
           format_double(im.explainer_score) + ',' + format_double(im.deviation) + ',' +
           (im.entropy ? format_double(*im.entropy) : std::string()) + '\n';
  }
  out += "\nmetric,value\n";
  auto row = [&](const std::string& name, double v) { out += name + ',' + format_double(v) + '\n'; };
  row("mean_entropy", r.mean_entropy);
  if (r.contribution_error) {
    row("contribution_error", r.contribution_error->mean);
    for (const auto& [name, e] : r.contribution_error->per_part) row("contribution_error." + name, e);
    row("oracle_excluded", static_cast<double>(r.contribution_error->excluded));
  }
  row("mean_deviation", r.mean_deviation);
  row("performer_accuracy", r.performer_accuracy);
  row("performer_tau", r.performer_tau);
  row("explainer_accuracy", r.explainer_accuracy);
  row("explainer_tau", r.explainer_tau);
  return out;
}

}  // namespace addex
