#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "addex/synthetic.hpp"

using namespace addex;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.height = 16;
  s.width = 16;
  s.num_concepts = 3;
  s.train_size = 20;
  s.eval_size = 10;
  return s;
}

// Direct sum over the overlap of a and b shifted by (du, dv).
double correlation_oracle(const Tensor& a, const Tensor& b, long du, long dv) {
  const long k = static_cast<long>(a.shape[0]);
  double s = 0.0;
  for (long u = 0; u < k; ++u)
    for (long v = 0; v < k; ++v) {
      const long i = u - du, j = v - dv;
      if (i < 0 || j < 0 || i >= k || j >= k) continue;
      s += a.data[i * k + j] * b.data[u * k + v];
    }
  return s;
}

}  // namespace

TEST(Templates, ShiftedCorrelationMatchesDirectSum) {
  Rng rng(1);
  Tensor a({3, 3}), b({3, 3});
  for (double& v : a.data) v = rng.uniform(-1, 1);
  for (double& v : b.data) v = rng.uniform(-1, 1);
  for (long du = -2; du <= 2; ++du)
    for (long dv = -2; dv <= 2; ++dv) EXPECT_NEAR(shifted_correlation(a, b, du, dv), correlation_oracle(a, b, du, dv), 1e-14);
  EXPECT_NEAR(shifted_correlation(a, a, 0, 0), dot_of(a.data, a.data), 1e-14);
}

TEST(Templates, SearchedSetHonoursBounds) {
  SyntheticSpec s;
  s.resolve();
  auto ts = resolve_templates(s);
  ASSERT_EQ(ts.size(), 8u);
  EXPECT_LE(max_offpeak(ts), 4.0);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    for (double v : ts[i].data) EXPECT_EQ(std::abs(v), 1.0);
    for (std::size_t j = i + 1; j < ts.size(); ++j) EXPECT_LT(normalized_correlation(ts[i], ts[j]), 0.9);
  }
}

TEST(Templates, ImpossibleSearchReportsCounts) {
  Rng rng(2);
  try {
    search_templates(5, 3, 0.0, rng, 500);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("need 5"), std::string::npos);
  }
}

TEST(Templates, SimilarExplicitTemplatesRejected) {
  SyntheticSpec s = small_spec();
  s.num_concepts = 2;
  s.templates = {{1, 1, 1, 1, -1, 1, 1, 1, 1}, {1, 1, 1, 1, -1, 1, 1, 1, 1}};
  EXPECT_THROW(generate_dataset(s), ConfigError);
}

TEST(Generate, SingleConceptNoNoiseStampsTemplate) {
  SyntheticSpec s = small_spec();
  s.num_concepts = 1;
  s.noise_sigma = 0.0;
  s.category_fraction = 1.0;
  s.clutter_presence = 0.0;
  s.amplitude_min = s.amplitude_max = 1.0;
  Dataset d = generate_dataset(s);
  const Tensor& t = d.templates[0];
  for (const Tensor& img : d.train.images) {
    std::size_t nonzero = 0;
    for (double v : img.data) nonzero += v != 0.0;
    EXPECT_EQ(nonzero, 9u);
    bool found = false;
    for (std::size_t r = 0; r + 3 <= 16 && !found; ++r)
      for (std::size_t c = 0; c + 3 <= 16 && !found; ++c) {
        bool match = true;
        for (std::size_t u = 0; u < 3; ++u)
          for (std::size_t v = 0; v < 3; ++v) match = match && img.at(r + u, c + v, 0) == t.data[u * 3 + v];
        found = match;
      }
    EXPECT_TRUE(found);
  }
  for (int label : d.train.labels) EXPECT_EQ(label, 1);
}

TEST(Generate, DeterministicUnderSeed) {
  SyntheticSpec s = small_spec();
  EXPECT_EQ(to_json(generate_dataset(s)).dump(), to_json(generate_dataset(s)).dump());
  SyntheticSpec other = s;
  other.seed = 1;
  EXPECT_NE(to_json(generate_dataset(s)).dump(), to_json(generate_dataset(other)).dump());
}

TEST(Generate, OverlapImpossibleReportsSizes) {
  SyntheticSpec s = small_spec();
  s.height = s.width = 8;
  s.margin = 0;
  s.num_concepts = 8;
  s.category_fraction = 1.0;
  try {
    generate_dataset(s);
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("8x8"), std::string::npos) << msg;
    EXPECT_NE(msg.find("3x3"), std::string::npos) << msg;
  }
}

TEST(Generate, LabelsAndGroundTruthAreConsistent) {
  SyntheticSpec s;
  s.train_size = 200;
  s.eval_size = 50;
  s.parts = {{"head", {0, 1}}, {"legs", {2, 3, 4}}, {"tail", {5}}};
  s.category_parts = {"head", "tail"};
  s.importance = {1, 2, 0, 1, 1, 3, 1, 1};
  Dataset d = generate_dataset(s);
  std::size_t positives = 0;
  for (std::size_t k = 0; k < d.train.size(); ++k) {
    const auto& p = d.train.presence[k];
    const int expect = p[0] && p[1] && p[5];
    EXPECT_EQ(d.train.labels[k], expect);
    positives += expect;
    // parts in name order: head, legs, tail
    EXPECT_EQ(d.train.part_presence[k], (std::vector<int>{p[0] && p[1], p[2] && p[3] && p[4], p[5]}));
    double planted = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      if (p[i]) {
        EXPECT_GE(d.train.amplitude[k][i], s.amplitude_min);
        EXPECT_LT(d.train.amplitude[k][i], s.amplitude_max);
        planted += s.importance[i] * (d.train.amplitude[k][i] - s.detection_floor);
      } else {
        EXPECT_EQ(d.train.amplitude[k][i], 0.0);
      }
    }
    EXPECT_NEAR(d.train.planted_score[k], planted, 1e-12);
  }
  EXPECT_GT(positives, 60u);
  EXPECT_LT(positives, 160u);
}

TEST(Spec, Validation) {
  auto bad = [](auto edit) {
    SyntheticSpec s = small_spec();
    edit(s);
    s.resolve();
    EXPECT_THROW(s.validate(), ConfigError);
  };
  bad([](SyntheticSpec& s) { s.template_size = 4; });
  bad([](SyntheticSpec& s) { s.importance = {1, -1, 1}; });
  bad([](SyntheticSpec& s) { s.importance = {1, 0, 0}; });
  bad([](SyntheticSpec& s) { s.importance = {1, 1}; });
  bad([](SyntheticSpec& s) { s.shortcut_concept = 3; });
  bad([](SyntheticSpec& s) { s.parts = {{"a", {0, 1}}, {"b", {1}}}; });
  bad([](SyntheticSpec& s) { s.category_parts = {"wing"}; });
  bad([](SyntheticSpec& s) { s.detection_floor = 0.9; });
  bad([](SyntheticSpec& s) { s.height = 5; });
  SyntheticSpec ok = small_spec();
  ok.resolve();
  EXPECT_NO_THROW(ok.validate());
  EXPECT_EQ(ok.parts.size(), 3u);
  EXPECT_EQ(ok.category_parts.size(), 3u);
}

TEST(Spec, JsonRoundTripAndUnknownKeys) {
  SyntheticSpec s = small_spec();
  s.importance = {1, 2, 3};
  s.resolve();
  SyntheticSpec back = spec_from_json(to_json(s));
  EXPECT_EQ(to_json(back), to_json(s));
  nlohmann::json j = to_json(s);
  j["colour"] = 3;
  EXPECT_THROW(spec_from_json(j), ConfigError);
  EXPECT_THROW(spec_from_json(nlohmann::json{{"num_concepts", "eight"}}), ConfigError);
  SyntheticSpec partial = spec_from_json(nlohmann::json{{"num_concepts", 4}, {"seed", 9}});
  EXPECT_EQ(partial.num_concepts, 4u);
  EXPECT_EQ(partial.importance.size(), 4u);
}

TEST(Dataset, SaveLoadRoundTrip) {
  Dataset d = generate_dataset(small_spec());
  const auto path = std::filesystem::temp_directory_path() / "addex_dataset_roundtrip.json";
  save_dataset(d, path.string());
  Dataset back = load_dataset(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(back.templates, d.templates);
  EXPECT_EQ(back.train.images, d.train.images);
  EXPECT_EQ(back.eval.labels, d.eval.labels);
  EXPECT_EQ(back.train.planted_score, d.train.planted_score);
  EXPECT_EQ(to_json(back).dump(), to_json(d).dump());
}

TEST(Dataset, RejectsWrongKindOrVersion) {
  nlohmann::json j = to_json(generate_dataset(small_spec()));
  j["format_version"] = 99;
  EXPECT_THROW(dataset_from_json(j), ConfigError);
  j["format_version"] = kFormatVersion;
  j["kind"] = "checkpoint";
  EXPECT_THROW(dataset_from_json(j), ConfigError);
}
