#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>

#include "addex/checkpoint.hpp"
#include "addex/metrics.hpp"
#include "addex/pretrain.hpp"

using namespace addex;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  Dataset data;
  Checkpoint ckpt;
};

Fixture make_fixture(ConceptMode mode) {
  SyntheticSpec s;
  s.height = s.width = 16;
  s.num_concepts = 4;
  s.train_size = 64;
  s.eval_size = 16;
  s.shortcut_multiplier = 1.0;
  Fixture f{generate_dataset(s), {}};
  PretrainResult r = pretrain_performer(f.data, PerformerTopology{}, mode);
  Rng rng(3);
  std::vector<std::size_t> hidden{8};
  f.ckpt.mode = mode;
  f.ckpt.rng_seed = 12345678901234567ull;
  f.ckpt.performer = r.performer;
  f.ckpt.bank = r.bank;
  f.ckpt.explainer = make_explainer(16 * 16 * 4, 3, hidden, true, ExplainerInput::kTopMap, rng);
  f.ckpt.explainer->bias = Tensor::scalar(-0.123456789012345);
  f.ckpt.concept_subset = {0, 2, 3};
  return f;
}

std::string temp_path(const std::string& name) { return (fs::temp_directory_path() / name).string(); }

}  // namespace

TEST(Checkpoint, RoundTripReproducesProbeOutputsExactly) {
  for (ConceptMode mode : {ConceptMode::kCase1, ConceptMode::kCase2}) {
    Fixture f = make_fixture(mode);
    const std::string path = temp_path("addex_ckpt_roundtrip.json");
    save_checkpoint(f.ckpt, path);
    Checkpoint back = load_checkpoint(path);
    fs::remove(path);

    EXPECT_EQ(back.mode, mode);
    EXPECT_EQ(back.rng_seed, f.ckpt.rng_seed);
    EXPECT_EQ(back.concept_subset, f.ckpt.concept_subset);
    EXPECT_EQ(back.bank.parts, f.ckpt.bank.parts);
    EXPECT_EQ(checksum(back.performer), checksum(f.ckpt.performer));
    EXPECT_EQ(checksum(back.bank), checksum(f.ckpt.bank));
    EXPECT_EQ(checksum(*back.explainer), checksum(*f.ckpt.explainer));
    EXPECT_EQ(back.performer.decision_threshold, f.ckpt.performer.decision_threshold);
    for (const Tensor& image : f.data.eval.images) {
      const auto a = performer_forward(f.ckpt.performer, image), b = performer_forward(back.performer, image);
      ASSERT_EQ(a.score, b.score);
      ASSERT_EQ(a.top_map, b.top_map);
      ASSERT_EQ(concept_scores(f.ckpt.bank, a.top_map), concept_scores(back.bank, b.top_map));
      ASSERT_EQ(explainer_weights(*f.ckpt.explainer, a.top_map), explainer_weights(*back.explainer, b.top_map));
    }
    EXPECT_EQ(checkpoint_text(back), checkpoint_text(f.ckpt));
  }
}

TEST(Checkpoint, InfiniteThresholdSurvives) {
  Fixture f = make_fixture(ConceptMode::kCase1);
  f.ckpt.performer.decision_threshold = -std::numeric_limits<double>::infinity();
  f.ckpt.explainer.reset();
  Checkpoint back = checkpoint_from_json(nlohmann::json::parse(checkpoint_text(f.ckpt)));
  EXPECT_EQ(back.performer.decision_threshold, -std::numeric_limits<double>::infinity());
  EXPECT_FALSE(back.explainer.has_value());
}

TEST(Checkpoint, TruncatedFileNamesMissingField) {
  Fixture f = make_fixture(ConceptMode::kCase2);
  const std::string text = checkpoint_text(f.ckpt);
  const std::string path = temp_path("addex_ckpt_truncated.json");
  for (double fraction : {0.0, 0.2, 0.5, 0.9, 0.999}) {
    std::ofstream(path, std::ios::binary) << text.substr(0, static_cast<std::size_t>(fraction * text.size()));
    try {
      load_checkpoint(path);
      FAIL() << "loaded a truncated file at " << fraction;
    } catch (const CheckpointError& e) {
      const std::string msg = e.what();
      EXPECT_NE(msg.find("truncated"), std::string::npos) << msg;
      EXPECT_NE(msg.find("missing field '"), std::string::npos) << msg;
    }
  }
  // Cut just before the explainer: that is the field reported.
  const std::size_t cut = text.find(",\"explainer\"");
  ASSERT_NE(cut, std::string::npos);
  std::ofstream(path, std::ios::binary) << text.substr(0, cut);
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("missing field 'explainer'"), std::string::npos) << e.what();
  }
  fs::remove(path);
}

TEST(Checkpoint, VersionAndKindChecked) {
  Fixture f = make_fixture(ConceptMode::kCase1);
  nlohmann::json j = to_json(f.ckpt);
  j["format_version"] = 2;
  try {
    checkpoint_from_json(j);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("format_version 2"), std::string::npos);
  }
  j["format_version"] = kFormatVersion;
  j["kind"] = "dataset";
  EXPECT_THROW(checkpoint_from_json(j), CheckpointError);
}

TEST(Checkpoint, CorruptedArraysRejected) {
  Fixture f = make_fixture(ConceptMode::kCase1);
  nlohmann::json j = to_json(f.ckpt);
  j["performer"]["head"]["weight"]["data"].erase(0);
  try {
    checkpoint_from_json(j);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("performer.head.weight"), std::string::npos) << e.what();
  }
  j = to_json(f.ckpt);
  j["explainer"]["layers"][1]["weight"]["data"][0] = "x";
  EXPECT_THROW(checkpoint_from_json(j), CheckpointError);
  j = to_json(f.ckpt);
  j["performer"]["trunk"][1]["padding"] = "reflect";
  EXPECT_THROW(checkpoint_from_json(j), CheckpointError);
  j = to_json(f.ckpt);
  j["performer"]["head"]["weight"] = {{"shape", {1, 3}}, {"data", {1, 2, 3}}};
  EXPECT_THROW(checkpoint_from_json(j), CheckpointError);
}

TEST(Checkpoint, MissingFileReported) {
  EXPECT_THROW(load_checkpoint(temp_path("addex_no_such_checkpoint.json")), CheckpointError);
}

// A reloaded explainer evaluated on the same data gives the same report bytes.
TEST(Checkpoint, ReloadedModelsGiveIdenticalMetrics) {
  Fixture f = make_fixture(ConceptMode::kCase1);
  const std::string path = temp_path("addex_ckpt_metrics.json");
  save_checkpoint(f.ckpt, path);
  Checkpoint back = load_checkpoint(path);
  fs::remove(path);
  auto report = [&](const Checkpoint& c) {
    return to_json(evaluate(c.performer, c.bank, *c.explainer, f.data.eval.images, f.data.eval.labels,
                            c.concept_subset))
        .dump();
  };
  EXPECT_EQ(report(back), report(f.ckpt));
}
