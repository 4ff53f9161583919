#pragma once

// Performer construction for the synthetic benchmark. The trunk is planted:
// layer 1 detects each template above the detection floor and layer 2 turns
// the detection into a 3x3 blob whose spatial sum is
// activation_scale * gain_i * evidence_i. Scalar heads on the channel sums
// are fitted by least squares to the planted targets.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "addex/metrics.hpp"
#include "addex/models.hpp"
#include "addex/synthetic.hpp"

namespace addex {

/// Raised when the pretrained performer does not beat the majority class.
class PretrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PerformerTopology {
  double activation_scale = 0.1;
  // Required margin of training accuracy over the majority-class rate.
  double min_accuracy_margin = 0.05;
};

struct HeadFit {
  std::string name;
  double rmse = 0.0;
  // Threshold-scan accuracy of the head against its binary target, when both classes occur.
  std::optional<double> accuracy;
};

struct PretrainResult {
  PerformerModel performer;
  ConceptBank bank;
  double train_accuracy = 0.0;
  double majority_rate = 0.0;
  std::vector<HeadFit> fits;  // performer head first, then concept heads (case 2)
};

inline std::vector<double> concept_gains(const SyntheticSpec& spec) {
  std::vector<double> g(spec.num_concepts, 1.0);
  g[spec.shortcut_concept] *= spec.shortcut_multiplier;
  return g;
}

inline std::vector<ConvLayer> planted_trunk(const SyntheticSpec& spec, const std::vector<Tensor>& templates,
                                            const PerformerTopology& topo) {
  const std::size_t n = spec.num_concepts, k = spec.template_size;
  if (templates.size() != n) throw ConfigError("planted trunk needs one template per concept");
  if (!(topo.activation_scale > 0.0)) throw ConfigError("activation_scale must be positive");
  const double offpeak = max_offpeak(templates);
  std::vector<double> energy(n);
  for (std::size_t i = 0; i < n; ++i) {
    energy[i] = dot_of(templates[i].data, templates[i].data);
    if (!(spec.amplitude_max * offpeak < spec.detection_floor * energy[i])) {
      throw ConfigError("detection floor " + std::to_string(spec.detection_floor) +
                        " does not suppress off-peak responses (max " + std::to_string(offpeak) + ")");
    }
  }
  ConvLayer detect{Tensor({k, k, 1, n}), Tensor({n}), Padding::kSame};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k * k; ++p) detect.kernels.data[p * n + i] = templates[i].data[p];
    detect.bias.data[i] = -spec.detection_floor * energy[i];
  }
  // Each detection is spread over a 3x3 box; the 9 copies and the template
  // energy are divided out so the channel sum equals scale * gain * evidence.
  const std::vector<double> gain = concept_gains(spec);
  ConvLayer spread{Tensor({3, 3, n, n}), Tensor({n}), Padding::kSame};
  for (std::size_t p = 0; p < 9; ++p) {
    for (std::size_t i = 0; i < n; ++i) {
      spread.kernels.data[(p * n + i) * n + i] = topo.activation_scale * gain[i] / (9.0 * energy[i]);
    }
  }
  return {detect, spread};
}

namespace detail {

/// Least-squares [features 1] * coef = target; returns (weights, bias, rmse).
inline std::tuple<std::vector<double>, double, double> fit_linear(const std::vector<Tensor>& features,
                                                                  const std::vector<double>& target) {
  const Eigen::Index rows = static_cast<Eigen::Index>(features.size());
  const Eigen::Index n = static_cast<Eigen::Index>(features.at(0).size());
  Eigen::MatrixXd A(rows, n + 1);
  Eigen::VectorXd b(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < n; ++c) A(r, c) = features[static_cast<std::size_t>(r)].data[static_cast<std::size_t>(c)];
    A(r, n) = 1.0;
    b(r) = target[static_cast<std::size_t>(r)];
  }
  const Eigen::VectorXd coef = A.colPivHouseholderQr().solve(b);
  const double rmse = std::sqrt((A * coef - b).squaredNorm() / static_cast<double>(rows));
  std::vector<double> w(coef.data(), coef.data() + n);
  return {w, coef(n), rmse};
}

inline DenseLayer as_head(const std::vector<double>& w, double bias) {
  return {Tensor({1, w.size()}, w), Tensor::scalar(bias)};
}

inline std::optional<double> scan_accuracy(const std::vector<double>& scores, const std::vector<int>& labels) {
  const bool pos = std::find(labels.begin(), labels.end(), 1) != labels.end();
  const bool neg = std::find(labels.begin(), labels.end(), 0) != labels.end();
  if (!pos || !neg) return std::nullopt;
  return accuracy_with_threshold(scores, labels).accuracy;
}

}  // namespace detail

/// Builds the planted trunk, fits the performer head to the planted score and,
/// in case 2, one concept head per concept to its evidence. Throws
/// PretrainError when training accuracy does not clear the majority rate.
inline PretrainResult pretrain_performer(const Dataset& data, const PerformerTopology& topo, ConceptMode mode) {
  const SyntheticSpec& spec = data.spec;
  const std::size_t n = spec.num_concepts;
  if (data.train.size() == 0) throw PretrainError("training split is empty");
  PretrainResult res;
  PerformerModel& f = res.performer;
  f.input_shape = {spec.height, spec.width, 1};
  f.trunk = planted_trunk(spec, data.templates, topo);
  f.top_layer = f.trunk.size() - 1;

  std::vector<Tensor> sums;
  for (const Tensor& img : data.train.images) {
    Tape tape;
    sums.push_back(spatial_sum(trunk_graph(tape, f.trunk, tape.constant(img))).value());
  }
  auto [w, bias, rmse] = detail::fit_linear(sums, data.train.planted_score);
  f.head = detail::as_head(w, bias);
  f.validate();

  std::vector<double> scores;
  for (const Tensor& y : sums) scores.push_back(dot_of(w, y.data) + bias);
  const std::vector<int>& labels = data.train.labels;
  const double pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1)) / static_cast<double>(labels.size());
  res.majority_rate = std::max(pos, 1.0 - pos);
  const bool both = pos > 0.0 && pos < 1.0;
  if (both) {
    const ThresholdResult t = accuracy_with_threshold(scores, labels);
    f.decision_threshold = t.tau;
    res.train_accuracy = t.accuracy;
  } else {
    res.train_accuracy = res.majority_rate;
  }
  res.fits.push_back({"performer", rmse, res.train_accuracy});
  if (!(res.train_accuracy > res.majority_rate + topo.min_accuracy_margin)) {
    throw PretrainError("performer training accuracy " + std::to_string(res.train_accuracy) +
                        " does not exceed the majority-class rate " + std::to_string(res.majority_rate) +
                        " by " + std::to_string(topo.min_accuracy_margin) + "; experiment halted");
  }

  res.bank.mode = mode;
  res.bank.num_concepts = n;
  res.bank.parts = spec.parts;
  if (mode == ConceptMode::kCase2) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> target;
      std::vector<int> present;
      for (std::size_t s = 0; s < data.train.size(); ++s) {
        target.push_back(evidence(spec, data.train.presence[s], data.train.amplitude[s])[i]);
        present.push_back(data.train.presence[s][i]);
      }
      auto [hw, hb, hr] = detail::fit_linear(sums, target);
      std::vector<double> out;
      for (const Tensor& y : sums) out.push_back(dot_of(hw, y.data) + hb);
      res.bank.heads.push_back(detail::as_head(hw, hb));
      res.fits.push_back({"concept" + std::to_string(i), hr, detail::scan_accuracy(out, present)});
    }
  }
  res.bank.validate();
  return res;
}

}  // namespace addex
