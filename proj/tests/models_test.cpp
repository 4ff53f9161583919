#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "addex/models.hpp"
#include "test_util.hpp"

using namespace addex;
using addex::testing::random_tensor;

namespace {

PerformerModel tiny_performer(Rng& rng, std::size_t channels = 3) {
  PerformerModel m;
  m.input_shape = {5, 5, 1};
  m.trunk.push_back({random_tensor({3, 3, 1, 4}, rng), random_tensor({4}, rng), Padding::kSame});
  m.trunk.push_back({random_tensor({3, 3, 4, channels}, rng), random_tensor({channels}, rng), Padding::kSame});
  m.top_layer = 1;
  m.head = {random_tensor({1, channels}, rng), random_tensor({1}, rng)};
  m.validate();
  return m;
}

ConceptBank case2_bank(std::vector<DenseLayer> heads) {
  ConceptBank b;
  b.mode = ConceptMode::kCase2;
  b.num_concepts = heads.size();
  b.heads = std::move(heads);
  b.validate();
  return b;
}

}  // namespace

TEST(Performer, ZeroImageZeroBiasesGivesHeadBias) {
  Rng rng(1);
  PerformerModel m = tiny_performer(rng);
  for (ConvLayer& l : m.trunk) l.bias = Tensor(l.bias.shape, 0.0);
  auto out = performer_forward(m, Tensor({5, 5, 1}));
  EXPECT_EQ(out.score, m.head.bias.item());
  for (double v : out.top_map.data) EXPECT_EQ(v, 0.0);
}

TEST(Performer, ZeroImagePropagatesReluOfBiases) {
  PerformerModel m;
  m.input_shape = {3, 3, 1};
  m.trunk.push_back({Tensor({1, 1, 1, 2}, 1.0), Tensor::vector({0.5, -0.5}), Padding::kSame});
  m.head = {Tensor({1, 2}, {1.0, 1.0}), Tensor::scalar(0.25)};
  m.validate();
  auto out = performer_forward(m, Tensor({3, 3, 1}));
  for (std::size_t p = 0; p < 9; ++p) {
    EXPECT_EQ(out.top_map.data[2 * p], 0.5);
    EXPECT_EQ(out.top_map.data[2 * p + 1], 0.0);
  }
  EXPECT_DOUBLE_EQ(out.score, 9 * 0.5 + 0.25);
}

TEST(Performer, IdentityKernelPassesInputThrough) {
  Rng rng(2);
  PerformerModel m;
  m.input_shape = {4, 4, 1};
  m.trunk.push_back({Tensor({1, 1, 1, 1}, 1.0), Tensor({1}), Padding::kValid});
  m.head = {Tensor({1, 1}, 1.0), Tensor({1})};
  Tensor image = random_tensor({4, 4, 1}, rng, 0.0, 1.0);
  EXPECT_EQ(performer_forward(m, image).top_map, image);
}

TEST(Performer, ShapeMismatchRejected) {
  Rng rng(3);
  PerformerModel m = tiny_performer(rng);
  EXPECT_THROW(performer_forward(m, Tensor({4, 5, 1})), ShapeError);
}

TEST(Performer, ValidateCatchesChannelMismatch) {
  Rng rng(4);
  PerformerModel m = tiny_performer(rng);
  m.head.weight = Tensor({1, 7});
  EXPECT_THROW(m.validate(), ShapeError);
}

TEST(Performer, Deterministic) {
  Rng rng(5);
  PerformerModel m = tiny_performer(rng);
  Tensor image = random_tensor({5, 5, 1}, rng);
  auto a = performer_forward(m, image), b = performer_forward(m, image);
  EXPECT_EQ(a.score, b.score);
  EXPECT_EQ(a.top_map, b.top_map);
  EXPECT_EQ(performer_score_from_map(m, a.top_map), a.score);
}

TEST(ConceptCase1, ZeroMap) {
  EXPECT_EQ(concept_scores_case1(Tensor({3, 3, 4})).data, std::vector<double>(4, 0.0));
}

TEST(ConceptCase1, HandSums) {
  // channel 0: 1+2+3+4, channel 1: 0+1+2+3
  Tensor x({2, 2, 2}, {1, 0, 2, 1, 3, 2, 4, 3});
  EXPECT_EQ(concept_scores_case1(x).data, (std::vector<double>{10, 6}));
}

TEST(ConceptCase1, EqualsChannelL1OnNonnegativeMaps) {
  Rng rng(6);
  Tensor x = random_tensor({4, 3, 3}, rng, 0.0, 2.0);
  Tensor y = concept_scores_case1(x);
  for (std::size_t c = 0; c < 3; ++c) {
    double l1 = 0.0;
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t w = 0; w < 3; ++w) l1 += std::abs(x.at(h, w, c));
    EXPECT_NEAR(y.data[c], l1, 1e-12);
  }
}

TEST(ConceptCase2, ZeroHeadsGiveBiases) {
  Rng rng(7);
  PerformerModel m = tiny_performer(rng);
  ConceptBank bank = case2_bank({{Tensor({1, 3}), Tensor::scalar(1.5)}, {Tensor({1, 3}), Tensor::scalar(-2.0)}});
  Tensor y = concept_scores_case2(bank, m, random_tensor({5, 5, 1}, rng));
  EXPECT_EQ(y.data, (std::vector<double>{1.5, -2.0}));
}

TEST(ConceptCase2, DuplicatedPerformerHead) {
  Rng rng(8);
  PerformerModel m = tiny_performer(rng);
  ConceptBank bank = case2_bank({m.head, m.head});
  Tensor image = random_tensor({5, 5, 1}, rng);
  const double score = performer_forward(m, image).score;
  for (double v : concept_scores_case2(bank, m, image).data) EXPECT_EQ(v, score);
}

TEST(ConceptCase2, ModeMismatchRejected) {
  Rng rng(9);
  PerformerModel m = tiny_performer(rng);
  ConceptBank bank;
  bank.num_concepts = 3;
  EXPECT_THROW(concept_scores_case2(bank, m, Tensor({5, 5, 1})), std::invalid_argument);
}

TEST(ConceptBank, ValidationRules) {
  ConceptBank b;
  b.num_concepts = 1;
  EXPECT_THROW(b.validate(), std::invalid_argument);
  b.num_concepts = 3;
  b.parts = {{"a", {0, 1}}, {"b", {1}}};
  EXPECT_THROW(b.validate(), std::invalid_argument);
  b.parts = {{"a", {0}}, {"b", {3}}};
  EXPECT_THROW(b.validate(), std::out_of_range);
  b.parts = {{"a", {0, 2}}};
  EXPECT_NO_THROW(b.validate());
  b.mode = ConceptMode::kCase2;
  EXPECT_THROW(b.validate(), std::invalid_argument);
}

TEST(ConceptMode, StringRoundTrip) {
  for (ConceptMode m : {ConceptMode::kCase1, ConceptMode::kCase2}) {
    EXPECT_EQ(concept_mode_from_string(to_string(m)), m);
  }
  EXPECT_THROW(concept_mode_from_string("case3"), std::invalid_argument);
}

TEST(Explainer, PositiveZeroPreactivationGivesLn2) {
  Rng rng(10);
  std::vector<std::size_t> hidden{4};
  ExplainerModel g = make_explainer(6, 3, hidden, true, ExplainerInput::kTopMap, rng);
  g.layers.back().weight = Tensor(g.layers.back().weight.shape, 0.0);
  g.layers.back().bias = Tensor(g.layers.back().bias.shape, 0.0);
  Tensor alpha = explainer_weights(g, random_tensor({6}, rng));
  for (double a : alpha.data) EXPECT_DOUBLE_EQ(a, std::numbers::ln2);
}

TEST(Explainer, LinearZeroWeightsGiveBias) {
  Rng rng(11);
  ExplainerModel g = make_explainer(6, 3, {}, false, ExplainerInput::kTopMap, rng);
  g.layers[0].weight = Tensor({3, 6});
  g.layers[0].bias = Tensor::vector({0.1, -0.2, 0.3});
  EXPECT_EQ(explainer_weights(g, random_tensor({6}, rng)).data, (std::vector<double>{0.1, -0.2, 0.3}));
}

TEST(Explainer, PositivityHoldsOnExtremeInputs) {
  Rng rng(12);
  std::vector<std::size_t> hidden{8};
  ExplainerModel g = make_explainer(12, 5, hidden, true, ExplainerInput::kTopMap, rng);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor alpha = explainer_weights(g, random_tensor({2, 2, 3}, rng, -30.0, 30.0));
    EXPECT_GT(*std::min_element(alpha.data.begin(), alpha.data.end()), 0.0);
  }
}

TEST(Explainer, InitRangeAndZeroBias) {
  Rng rng(13);
  std::vector<std::size_t> hidden{32};
  ExplainerModel g = make_explainer(64, 4, hidden, true, ExplainerInput::kTopMap, rng);
  EXPECT_EQ(g.b(), 0.0);
  EXPECT_EQ(g.input_size(), 64u);
  EXPECT_EQ(g.num_concepts(), 4u);
  for (double v : g.layers[0].weight.data) EXPECT_LE(std::abs(v), 1.0 / 8.0);
  for (double v : g.layers[1].weight.data) EXPECT_LE(std::abs(v), 1.0 / std::sqrt(32.0));
  Rng again(13);
  EXPECT_EQ(checksum(make_explainer(64, 4, hidden, true, ExplainerInput::kTopMap, again)), checksum(g));
}

TEST(Explainer, InputSizeMismatchRejected) {
  Rng rng(14);
  ExplainerModel g = make_explainer(6, 3, {}, true, ExplainerInput::kTopMap, rng);
  EXPECT_THROW(explainer_weights(g, Tensor({5})), ShapeError);
}

TEST(Predict, HandValues) {
  EXPECT_EQ(explainer_predict(Tensor::vector({1, 1}), Tensor::vector({2, 3}), 0.0), 5.0);
  EXPECT_EQ(explainer_predict(Tensor::vector({0, 0}), Tensor::vector({2, 3}), 1.25), 1.25);
  EXPECT_DOUBLE_EQ(explainer_predict(Tensor::vector({0.5, 2, 1}), Tensor::vector({2, 1, -3}), 0.5), 0.5);
  EXPECT_THROW(explainer_predict(Tensor::vector({1}), Tensor::vector({2, 3}), 0.0), ShapeError);
}

TEST(Predict, LinearInEachArgument) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor({4}, rng), y1 = random_tensor({4}, rng), y2 = random_tensor({4}, rng);
    const double b = rng.uniform(-1, 1), c = rng.uniform(-3, 3);
    Tensor combo({4});
    for (std::size_t i = 0; i < 4; ++i) combo.data[i] = y1.data[i] + c * y2.data[i];
    EXPECT_NEAR(explainer_predict(a, combo, b) - b,
                (explainer_predict(a, y1, b) - b) + c * (explainer_predict(a, y2, b) - b), 1e-12);
    // symmetric roles: linear in alpha for fixed y
    EXPECT_NEAR(explainer_predict(combo, a, b) - b,
                (explainer_predict(y1, a, b) - b) + c * (explainer_predict(y2, a, b) - b), 1e-12);
  }
}

TEST(Predict, TapeVersionAgrees) {
  Tape t;
  Var p = explainer_predict(t.constant(Tensor::vector({0.5, 2, 1})), t.constant(Tensor::vector({2, 1, -3})),
                            t.constant(Tensor::scalar(0.5)));
  EXPECT_DOUBLE_EQ(p.item(), 0.5);
}
