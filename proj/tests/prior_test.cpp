#include <gtest/gtest.h>

#include <cmath>

#include "addex/distill.hpp"
#include "addex/prior.hpp"
#include "test_util.hpp"

using namespace addex;
using addex::testing::random_tensor;

namespace {

PerformerModel head_only(std::vector<double> a, std::size_t h = 1, std::size_t w = 1) {
  PerformerModel m;
  const std::size_t n = a.size();
  m.input_shape = {h, w, n};
  m.trunk.push_back({Tensor({1, 1, n, n}), Tensor({n}), Padding::kSame});
  for (std::size_t i = 0; i < n; ++i) m.trunk[0].kernels.data[i * n + i] = 1.0;
  m.head = {Tensor({1, n}, std::move(a)), Tensor::scalar(0.3)};
  m.validate();
  return m;
}

PerformerModel random_performer(Rng& rng) {
  PerformerModel m;
  m.input_shape = {5, 5, 1};
  m.trunk.push_back({random_tensor({3, 3, 1, 4}, rng), random_tensor({4}, rng), Padding::kSame});
  m.trunk.push_back({random_tensor({3, 3, 4, 3}, rng), random_tensor({3}, rng, 0.1, 0.5), Padding::kSame});
  m.top_layer = 1;
  m.head = {random_tensor({1, 3}, rng), random_tensor({1}, rng)};
  m.validate();
  return m;
}

TapeFunction linear(std::vector<double> coeffs) {
  return [coeffs](Tape& t, Var x) { return dot(x, t.constant(Tensor::vector(coeffs))); };
}

}  // namespace

TEST(PriorCase1, LinearHeadOnOnePixel) {
  PerformerModel m = head_only({3, 5});
  PriorWeights p = prior_case1_from_map(m, Tensor({1, 1, 2}, {0.4, 0.9}));
  EXPECT_EQ(p.w.data, (std::vector<double>{3, 5}));
  EXPECT_EQ(p.source, ConceptMode::kCase1);
  EXPECT_FALSE(p.degenerate);
}

// Oracle: sum over positions of central differences of the score w.r.t. x_{hwi}.
TEST(PriorCase1, MatchesFiniteDifferences) {
  Rng rng(1);
  PerformerModel m = random_performer(rng);
  Tensor image = random_tensor({5, 5, 1}, rng);
  Tensor map = performer_forward(m, image).top_map;
  PriorWeights p = prior_case1(m, image);
  const double h = 1e-5;
  for (std::size_t c = 0; c < 3; ++c) {
    double total = 0.0;
    for (std::size_t i = c; i < map.size(); i += 3) {
      Tensor up = map, down = map;
      up.data[i] += h;
      down.data[i] -= h;
      total += (performer_score_from_map(m, up) - performer_score_from_map(m, down)) / (2 * h);
    }
    EXPECT_NEAR(p.w.data[c], total, 1e-6);
  }
}

TEST(PriorCase1, UnusedChannelGetsZero) {
  PerformerModel m = head_only({2, 0, 1}, 2, 2);
  PriorWeights p = prior_case1_from_map(m, Tensor({2, 2, 3}, 1.0));
  EXPECT_EQ(p.w.data[1], 0.0);
  EXPECT_EQ(p.w.data[0], 8.0);
}

TEST(PriorCase1, AllZeroHeadIsDegenerate) {
  PerformerModel m = head_only({0, 0});
  EXPECT_TRUE(prior_case1_from_map(m, Tensor({1, 1, 2}, 1.0)).degenerate);
}

TEST(PriorCase1, ScaleEquivariantAndLossInvariant) {
  Rng rng(2);
  PerformerModel m = random_performer(rng);
  for (double& v : m.head.weight.data) v = std::abs(v) + 0.1;
  Tensor image = random_tensor({5, 5, 1}, rng);
  PriorWeights base = prior_case1(m, image);
  Tensor alpha = random_tensor({3}, rng, 0.1, 2.0);
  for (double c : {0.5, 3.0, 17.0}) {
    PerformerModel scaled = m;
    for (double& v : scaled.head.weight.data) v *= c;
    PriorWeights p = prior_case1(scaled, image);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p.w.data[i], c * base.w.data[i], 1e-12 * c);
    EXPECT_NEAR(*prior_loss_ce(alpha, p.w), *prior_loss_ce(alpha, base.w), 1e-12);
    EXPECT_NEAR(*prior_loss_l2(alpha, p.w), *prior_loss_l2(alpha, base.w), 1e-12);
  }
}

TEST(PriorCase2, LinearMapsHandValues) {
  PriorWeights p = prior_case2(linear({1, 2}), {linear({1, 0}), linear({1, 1})}, Tensor::vector({0.3, -0.7}));
  EXPECT_DOUBLE_EQ(p.w.data[0], 1.0);
  EXPECT_DOUBLE_EQ(p.w.data[1], 1.5);
  EXPECT_EQ(p.source, ConceptMode::kCase2);
}

TEST(PriorCase2, SelfExplanationIsOne) {
  Rng rng(3);
  PerformerModel m = random_performer(rng);
  ConceptBank bank;
  bank.mode = ConceptMode::kCase2;
  bank.num_concepts = 2;
  bank.heads = {m.head, {random_tensor({1, 3}, rng), Tensor({1})}};
  Tensor shared = performer_forward(m, random_tensor({5, 5, 1}, rng)).top_map;
  EXPECT_NEAR(prior_case2(m, bank, shared).w.data[0], 1.0, 1e-14);
}

TEST(PriorCase2, OrthogonalGradientGivesZero) {
  PriorWeights p = prior_case2(linear({1, 0, 2}), {linear({0, 3, 0}), linear({2, 5, -1})}, Tensor({3}));
  EXPECT_EQ(p.w.data[0], 0.0);
  EXPECT_EQ(p.w.data[1], 0.0);
  EXPECT_FALSE(p.degenerate_concepts.size());
}

TEST(PriorCase2, VanishingConceptGradientIsRecorded) {
  PriorWeights p = prior_case2(linear({1, 2}), {linear({0, 0}), linear({1e-7, 0}), linear({0, 1})},
                               Tensor({2}));
  EXPECT_EQ(p.w.data[0], 0.0);
  EXPECT_EQ(p.w.data[1], 0.0);
  EXPECT_EQ(p.w.data[2], 2.0);
  EXPECT_EQ(p.degenerate_concepts, (std::vector<std::size_t>{0, 1}));
  EXPECT_FALSE(p.degenerate);
}

// Linear networks: the first-order expansion is exact, so the weights equal
// the closed-form coefficient ratios <a, b_i> / |b_i|^2.
TEST(PriorCase2, ExactOnRandomLinearNetworks) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 6, n = 4;
    Tensor a = random_tensor({d}, rng);
    std::vector<Tensor> b;
    std::vector<TapeFunction> concepts;
    for (std::size_t i = 0; i < n; ++i) {
      b.push_back(random_tensor({d}, rng));
      concepts.push_back(linear(b.back().data));
    }
    PriorWeights p = prior_case2(linear(a.data), concepts, random_tensor({d}, rng));
    for (std::size_t i = 0; i < n; ++i) {
      double num = 0.0, den = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        num += a.data[j] * b[i].data[j];
        den += b[i].data[j] * b[i].data[j];
      }
      EXPECT_NEAR(p.w.data[i], num / den, 1e-10);
    }
  }
}

// Heads on spatial sums of the shared map are linear in the map, so the
// bank-level overload is exact too: ratio of the head rows scaled by H*W.
TEST(PriorCase2, BankOverloadExactForLinearHeads) {
  Rng rng(5);
  PerformerModel m = random_performer(rng);
  ConceptBank bank;
  bank.mode = ConceptMode::kCase2;
  bank.num_concepts = 3;
  for (int i = 0; i < 3; ++i) bank.heads.push_back({random_tensor({1, 3}, rng), random_tensor({1}, rng)});
  Tensor shared = performer_forward(m, random_tensor({5, 5, 1}, rng)).top_map;
  PriorWeights p = prior_case2(m, bank, shared);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& bi = bank.heads[i].weight.data;
    const auto& a = m.head.weight.data;
    const double expect = (a[0] * bi[0] + a[1] * bi[1] + a[2] * bi[2]) / (bi[0] * bi[0] + bi[1] * bi[1] + bi[2] * bi[2]);
    EXPECT_NEAR(p.w.data[i], expect, 1e-10);
  }
}

TEST(PriorCase2, RejectsCase1Bank) {
  Rng rng(6);
  PerformerModel m = random_performer(rng);
  ConceptBank bank;
  bank.num_concepts = 3;
  EXPECT_THROW(prior_case2(m, bank, Tensor({5, 5, 3})), std::invalid_argument);
}

TEST(Clamp, Examples) {
  PriorWeights p;
  p.w = Tensor::vector({-1, 2});
  PriorWeights c = clamp_nonneg(p);
  EXPECT_EQ(c.w.data, (std::vector<double>{0, 2}));
  EXPECT_TRUE(c.clamped);
  EXPECT_FALSE(c.degenerate);

  p.w = Tensor::vector({3, 5});
  EXPECT_EQ(clamp_nonneg(p).w.data, (std::vector<double>{3, 5}));

  p.w = Tensor::vector({-1, -2});
  c = clamp_nonneg(p);
  EXPECT_EQ(c.w.data, (std::vector<double>{0, 0}));
  EXPECT_TRUE(c.degenerate);
}

TEST(Clamp, Idempotent) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    PriorWeights p;
    p.w = random_tensor({5}, rng);
    PriorWeights once = clamp_nonneg(p);
    PriorWeights twice = clamp_nonneg(once);
    EXPECT_EQ(once.w, twice.w);
    EXPECT_EQ(once.degenerate, twice.degenerate);
    for (double v : once.w.data) EXPECT_GE(v, 0.0);
  }
}
