#pragma once

// Performer f, concept scorers f_i and explainer g, plus the additive
// prediction sum_i alpha_i * y_i + b that the explainer produces.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "addex/autodiff.hpp"
#include "addex/random.hpp"
#include "addex/tensor.hpp"

namespace addex {

struct DenseLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  std::size_t in_features() const { return weight.shape.at(1); }
  std::size_t out_features() const { return weight.shape.at(0); }
};

/// Convolution followed by relu.
struct ConvLayer {
  Tensor kernels;  // [k x k x C x n]
  Tensor bias;     // [n]
  Padding padding = Padding::kSame;

  std::size_t kernel_size() const { return kernels.shape.at(0); }
  std::size_t in_channels() const { return kernels.shape.at(2); }
  std::size_t out_channels() const { return kernels.shape.at(3); }
};

/// Concept name -> indices of the concepts (channels or heads) it owns.
using PartMap = std::map<std::string, std::vector<std::size_t>>;

inline void validate_parts(const PartMap& parts, std::size_t num_concepts) {
  std::set<std::size_t> seen;
  for (const auto& [name, indices] : parts) {
    for (std::size_t i : indices) {
      if (i >= num_concepts) {
        throw std::out_of_range("part '" + name + "' references concept " + std::to_string(i) +
                                " but only " + std::to_string(num_concepts) + " exist");
      }
      if (!seen.insert(i).second) {
        throw std::invalid_argument("concept " + std::to_string(i) +
                                    " is assigned to more than one part");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Performer
// ---------------------------------------------------------------------------

/// Conv/relu trunk whose designated top map feeds spatial sums into a scalar
/// head. The head output is the pre-decision score; there is no
/// probability layer.
struct PerformerModel {
  Shape input_shape;  // [H x W x C]
  std::vector<ConvLayer> trunk;
  std::size_t top_layer = 0;
  DenseLayer head;  // [1 x n]
  double decision_threshold = 0.0;

  std::size_t num_channels() const { return trunk.at(top_layer).out_channels(); }

  void validate() const {
    if (input_shape.size() != 3) throw ShapeError("performer input must be [H x W x C]");
    if (trunk.empty()) throw std::invalid_argument("performer trunk has no layers");
    if (top_layer + 1 != trunk.size()) {
      throw std::invalid_argument("performer top layer must be the last trunk layer");
    }
    std::size_t channels = input_shape[2];
    for (std::size_t i = 0; i < trunk.size(); ++i) {
      if (trunk[i].in_channels() != channels) {
        throw ShapeError("trunk layer " + std::to_string(i) + " expects " +
                         std::to_string(trunk[i].in_channels()) + " channels, receives " +
                         std::to_string(channels));
      }
      channels = trunk[i].out_channels();
    }
    if (head.weight.shape != Shape{1, channels} || head.bias.shape != Shape{1}) {
      throw ShapeError("performer head must be [1 x " + std::to_string(channels) + "], got " +
                       to_string(head.weight.shape));
    }
  }
};

inline Var trunk_graph(Tape& tape, const std::vector<ConvLayer>& trunk, Var image) {
  Var h = image;
  for (const ConvLayer& layer : trunk) {
    h = relu(conv2d(h, tape.constant(layer.kernels), tape.constant(layer.bias), layer.padding));
  }
  return h;
}

/// head(spatial_sum(x)) as a [1] node.
inline Var dense_on_sums(Tape& tape, const DenseLayer& head, Var top_map) {
  return dense(spatial_sum(top_map), tape.constant(head.weight), tape.constant(head.bias));
}

struct PerformerGraph {
  Var score;
  Var top_map;
};

inline PerformerGraph performer_graph(Tape& tape, const PerformerModel& model, Var image) {
  if (image.shape() != model.input_shape) {
    throw ShapeError("performer expects image " + to_string(model.input_shape) + ", got " +
                     to_string(image.shape()));
  }
  Var x = trunk_graph(tape, model.trunk, image);
  return {dense_on_sums(tape, model.head, x), x};
}

struct PerformerOutput {
  double score = 0.0;
  Tensor top_map;
};

inline PerformerOutput performer_forward(const PerformerModel& model, const Tensor& image) {
  Tape tape;
  PerformerGraph g = performer_graph(tape, model, tape.constant(image));
  return {g.score.item(), g.top_map.value()};
}

/// Re-runs only the head on a (possibly edited) top map.
inline double performer_score_from_map(const PerformerModel& model, const Tensor& top_map) {
  Tape tape;
  return dense_on_sums(tape, model.head, tape.constant(top_map)).item();
}

inline std::uint64_t checksum(const PerformerModel& m) {
  std::uint64_t h = checksum(m.head.weight.data);
  h = checksum(m.head.bias.data, h);
  for (const ConvLayer& l : m.trunk) {
    h = checksum(l.kernels.data, h);
    h = checksum(l.bias.data, h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Concept bank
// ---------------------------------------------------------------------------

enum class ConceptMode { kCase1, kCase2 };

inline const char* to_string(ConceptMode m) { return m == ConceptMode::kCase1 ? "case1" : "case2"; }

inline ConceptMode concept_mode_from_string(const std::string& s) {
  if (s == "case1") return ConceptMode::kCase1;
  if (s == "case2") return ConceptMode::kCase2;
  throw std::invalid_argument("unknown concept mode '" + s + "'");
}

/// Case 1: concept i is channel i of the performer's top map, scored by its
/// spatial sum. Case 2: concept i is a scalar head on the shared trunk.
struct ConceptBank {
  ConceptMode mode = ConceptMode::kCase1;
  std::size_t num_concepts = 0;
  std::vector<DenseLayer> heads;  // case 2 only, each [1 x channels]
  PartMap parts;

  void validate() const {
    if (num_concepts < 2) throw std::invalid_argument("concept bank needs at least 2 concepts");
    if (mode == ConceptMode::kCase2 && heads.size() != num_concepts) {
      throw std::invalid_argument("case2 bank has " + std::to_string(heads.size()) +
                                  " heads for " + std::to_string(num_concepts) + " concepts");
    }
    if (mode == ConceptMode::kCase1 && !heads.empty()) {
      throw std::invalid_argument("case1 bank must not carry heads");
    }
    validate_parts(parts, num_concepts);
  }
};

inline std::uint64_t checksum(const ConceptBank& b) {
  std::uint64_t h = 1469598103934665603ull;
  for (const DenseLayer& l : b.heads) {
    h = checksum(l.weight.data, h);
    h = checksum(l.bias.data, h);
  }
  return h;
}

/// y_i = sum over (h, w) of x_{h,w,i}.
inline Tensor concept_scores_case1(const Tensor& top_map) {
  Tape tape;
  return spatial_sum(tape.constant(top_map)).value();
}

/// Every head reads the same trunk activation, so the trunk runs once.
inline Var concept_scores_case2_graph(Tape& tape, const ConceptBank& bank, Var shared) {
  if (bank.mode != ConceptMode::kCase2) {
    throw std::invalid_argument("concept_scores_case2 called on a case1 bank");
  }
  Var sums = spatial_sum(shared);
  std::vector<double> y;
  y.reserve(bank.heads.size());
  for (const DenseLayer& head : bank.heads) {
    y.push_back(dense(sums, tape.constant(head.weight), tape.constant(head.bias)).item());
  }
  return tape.constant(Tensor::vector(std::move(y)));
}

inline Tensor concept_scores_case2_from_map(const ConceptBank& bank, const Tensor& shared) {
  Tape tape;
  return concept_scores_case2_graph(tape, bank, tape.constant(shared)).value();
}

inline Tensor concept_scores_case2(const ConceptBank& bank, const PerformerModel& trunk_owner,
                                   const Tensor& image) {
  if (bank.mode != ConceptMode::kCase2) {
    throw std::invalid_argument("concept_scores_case2 called on a case1 bank");
  }
  return concept_scores_case2_from_map(bank, performer_forward(trunk_owner, image).top_map);
}

/// Concept scores given the performer's top map (the shared feature in case 2).
inline Tensor concept_scores(const ConceptBank& bank, const Tensor& top_map) {
  return bank.mode == ConceptMode::kCase1 ? concept_scores_case1(top_map)
                                          : concept_scores_case2_from_map(bank, top_map);
}

// ---------------------------------------------------------------------------
// Explainer
// ---------------------------------------------------------------------------

enum class ExplainerInput { kImage, kTopMap };

inline const char* to_string(ExplainerInput in) {
  return in == ExplainerInput::kImage ? "image" : "top_map";
}

inline ExplainerInput explainer_input_from_string(const std::string& s) {
  if (s == "image") return ExplainerInput::kImage;
  if (s == "top_map") return ExplainerInput::kTopMap;
  throw std::invalid_argument("unknown explainer input '" + s + "'");
}

/// g: dense layers with relu between them, producing one weight per concept;
/// softplus on the output when `positive` is set. `bias` is the additive b.
struct ExplainerModel {
  ExplainerInput input = ExplainerInput::kTopMap;
  std::vector<DenseLayer> layers;
  Tensor bias = Tensor::scalar(0.0);
  bool positive = true;

  std::size_t input_size() const { return layers.at(0).in_features(); }
  std::size_t num_concepts() const { return layers.back().out_features(); }
  double b() const { return bias.item(); }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> p;
    for (DenseLayer& l : layers) {
      p.push_back(&l.weight);
      p.push_back(&l.bias);
    }
    p.push_back(&bias);
    return p;
  }

  void validate() const {
    if (layers.empty()) throw std::invalid_argument("explainer has no layers");
    for (std::size_t i = 1; i < layers.size(); ++i) {
      if (layers[i].in_features() != layers[i - 1].out_features()) {
        throw ShapeError("explainer layer " + std::to_string(i) + " input mismatch");
      }
    }
    if (bias.shape != Shape{1}) throw ShapeError("explainer bias must be scalar");
  }
};

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the additive bias b starts at 0.
inline ExplainerModel make_explainer(std::size_t input_size, std::size_t num_concepts,
                                     std::span<const std::size_t> hidden, bool positive,
                                     ExplainerInput input, Rng& rng) {
  if (input_size == 0 || num_concepts == 0) {
    throw std::invalid_argument("explainer needs nonzero input and output sizes");
  }
  ExplainerModel m;
  m.input = input;
  m.positive = positive;
  std::vector<std::size_t> widths{input_size};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(num_concepts);
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const std::size_t fan_in = widths[i], fan_out = widths[i + 1];
    const double r = 1.0 / std::sqrt(static_cast<double>(fan_in));
    DenseLayer layer{Tensor({fan_out, fan_in}), Tensor({fan_out})};
    for (double& v : layer.weight.data) v = rng.uniform(-r, r);
    for (double& v : layer.bias.data) v = rng.uniform(-r, r);
    m.layers.push_back(std::move(layer));
  }
  return m;
}

struct ExplainerVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
  Var bias;
};

/// Places the explainer's parameters on the tape as variables (for training)
/// or as constants (for evaluation).
inline ExplainerVars bind(Tape& tape, const ExplainerModel& m, bool trainable) {
  auto put = [&](const Tensor& t) { return trainable ? tape.variable(t) : tape.constant(t); };
  ExplainerVars v;
  for (const DenseLayer& l : m.layers) {
    v.weights.push_back(put(l.weight));
    v.biases.push_back(put(l.bias));
  }
  v.bias = put(m.bias);
  return v;
}

/// alpha = g(input). The input may have any shape; it is flattened.
inline Var explainer_alpha(const ExplainerModel& m, const ExplainerVars& vars, Var input) {
  if (input.value().size() != m.input_size()) {
    throw ShapeError("explainer expects " + std::to_string(m.input_size()) +
                     " input values, got " + to_string(input.shape()));
  }
  Var h = input.value().rank() == 1 ? input : flatten(input);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    h = dense(h, vars.weights[i], vars.biases[i]);
    if (i + 1 < m.layers.size()) h = relu(h);
  }
  return m.positive ? softplus(h) : h;
}

inline Tensor explainer_weights(const ExplainerModel& m, const Tensor& input) {
  Tape tape;
  return explainer_alpha(m, bind(tape, m, false), tape.constant(input)).value();
}

/// sum_i alpha_i * y_i + b
inline double explainer_predict(const Tensor& alpha, const Tensor& y, double b) {
  if (alpha.size() != y.size()) {
    throw ShapeError("explainer_predict: alpha has " + std::to_string(alpha.size()) +
                     " entries, y has " + std::to_string(y.size()));
  }
  return dot_of(alpha.data, y.data) + b;
}

inline Var explainer_predict(Var alpha, Var y, Var b) { return add(dot(alpha, y), b); }

inline std::uint64_t checksum(const ExplainerModel& m) {
  std::uint64_t h = checksum(m.bias.data);
  for (const DenseLayer& l : m.layers) {
    h = checksum(l.weight.data, h);
    h = checksum(l.bias.data, h);
  }
  return h;
}

}  // namespace addex
