#pragma once

// JSON checkpoints for the performer, concept bank and explainer. Parameter
// arrays are flat lists of doubles, written in shortest round-trip form so a
// reload reproduces every bit.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "addex/io.hpp"
#include "addex/models.hpp"
#include "json.hpp"

namespace addex {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ConceptMode mode = ConceptMode::kCase1;
  std::uint64_t rng_seed = 0;
  PerformerModel performer;
  ConceptBank bank;
  std::optional<ExplainerModel> explainer;
  std::vector<std::size_t> concept_subset;  // concepts the explainer sees; empty means all
};

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

inline nlohmann::json tensor_json(const Tensor& t) { return {{"shape", t.shape}, {"data", t.data}}; }

inline nlohmann::json dense_json(const DenseLayer& l) {
  return {{"weight", tensor_json(l.weight)}, {"bias", tensor_json(l.bias)}};
}

inline nlohmann::json to_json(const PerformerModel& m) {
  nlohmann::json trunk = nlohmann::json::array();
  for (const ConvLayer& l : m.trunk) {
    trunk.push_back({{"kernels", tensor_json(l.kernels)},
                     {"bias", tensor_json(l.bias)},
                     {"padding", l.padding == Padding::kSame ? "same" : "valid"}});
  }
  return {{"input_shape", m.input_shape},
          {"trunk", std::move(trunk)},
          {"top_layer", m.top_layer},
          {"head", dense_json(m.head)},
          {"decision_threshold", json_number(m.decision_threshold)}};
}

inline nlohmann::json to_json(const ConceptBank& b) {
  nlohmann::json heads = nlohmann::json::array();
  for (const DenseLayer& h : b.heads) heads.push_back(dense_json(h));
  return {{"mode", to_string(b.mode)}, {"num_concepts", b.num_concepts}, {"heads", std::move(heads)}, {"parts", b.parts}};
}

inline nlohmann::json to_json(const ExplainerModel& e) {
  nlohmann::json layers = nlohmann::json::array();
  for (const DenseLayer& l : e.layers) layers.push_back(dense_json(l));
  return {{"input", to_string(e.input)},
          {"positive", e.positive},
          {"bias", e.bias.item()},
          {"layers", std::move(layers)}};
}

inline nlohmann::json to_json(const Checkpoint& c) {
  return {{"format_version", kFormatVersion},
          {"kind", "checkpoint"},
          {"mode", to_string(c.mode)},
          {"rng_seed", c.rng_seed},
          {"performer", to_json(c.performer)},
          {"concept_bank", to_json(c.bank)},
          {"explainer", c.explainer ? to_json(*c.explainer) : nlohmann::json(nullptr)},
          {"concept_subset", c.concept_subset}};
}

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

namespace detail {

/// Walks a document, naming the full path of anything missing or malformed.
class Reader {
 public:
  Reader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {}

  Reader at(const std::string& key) const {
    if (!j_.is_object() || !j_.contains(key)) throw CheckpointError("checkpoint is missing field '" + join(key) + "'");
    return Reader(j_.at(key), join(key));
  }

  Reader at(std::size_t i) const {
    const std::string p = path_ + "[" + std::to_string(i) + "]";
    if (!j_.is_array() || i >= j_.size()) throw CheckpointError("checkpoint is missing field '" + p + "'");
    return Reader(j_.at(i), p);
  }

  bool has(const std::string& key) const { return j_.is_object() && j_.contains(key); }
  bool is_null() const { return j_.is_null(); }
  std::size_t size() const { return j_.is_array() ? j_.size() : 0; }

  template <typename T>
  T get() const {
    try {
      return j_.get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError("checkpoint field '" + path_ + "' has the wrong type: " + e.what());
    }
  }

  /// Doubles may be written as "inf" / "-inf" strings.
  double number() const {
    if (j_.is_string()) {
      const std::string s = j_.get<std::string>();
      if (s == "inf") return INFINITY;
      if (s == "-inf") return -INFINITY;
    }
    return get<double>();
  }

  Tensor tensor() const {
    Shape shape = at("shape").get<Shape>();
    std::vector<double> data = at("data").get<std::vector<double>>();
    try {
      return Tensor(std::move(shape), std::move(data));
    } catch (const ShapeError& e) {
      throw CheckpointError("checkpoint field '" + path_ + "' is corrupted: " + e.what());
    }
  }

  DenseLayer dense() const { return {at("weight").tensor(), at("bias").tensor()}; }

  const std::string& path() const { return path_; }

 private:
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  const nlohmann::json& j_;
  std::string path_;
};

inline PerformerModel performer_from(const Reader& r) {
  PerformerModel m;
  m.input_shape = r.at("input_shape").get<Shape>();
  const Reader trunk = r.at("trunk");
  for (std::size_t i = 0; i < trunk.size(); ++i) {
    const Reader l = trunk.at(i);
    const std::string pad = l.at("padding").get<std::string>();
    if (pad != "same" && pad != "valid") throw CheckpointError("checkpoint field '" + l.path() + ".padding' is invalid");
    m.trunk.push_back({l.at("kernels").tensor(), l.at("bias").tensor(), pad == "same" ? Padding::kSame : Padding::kValid});
  }
  m.top_layer = r.at("top_layer").get<std::size_t>();
  m.head = r.at("head").dense();
  m.decision_threshold = r.at("decision_threshold").number();
  return m;
}

inline ConceptBank bank_from(const Reader& r) {
  ConceptBank b;
  b.mode = concept_mode_from_string(r.at("mode").get<std::string>());
  b.num_concepts = r.at("num_concepts").get<std::size_t>();
  const Reader heads = r.at("heads");
  for (std::size_t i = 0; i < heads.size(); ++i) b.heads.push_back(heads.at(i).dense());
  b.parts = r.at("parts").get<PartMap>();
  return b;
}

inline ExplainerModel explainer_from(const Reader& r) {
  ExplainerModel e;
  e.input = explainer_input_from_string(r.at("input").get<std::string>());
  e.positive = r.at("positive").get<bool>();
  e.bias = Tensor::scalar(r.at("bias").number());
  const Reader layers = r.at("layers");
  for (std::size_t i = 0; i < layers.size(); ++i) e.layers.push_back(layers.at(i).dense());
  return e;
}

}  // namespace detail

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  const detail::Reader r(j, "");
  const int version = r.at("format_version").get<int>();
  if (version != kFormatVersion) {
    throw CheckpointError("checkpoint format_version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kFormatVersion) + ")");
  }
  if (r.at("kind").get<std::string>() != "checkpoint") throw CheckpointError("document is not a checkpoint");
  Checkpoint c;
  try {
    c.mode = concept_mode_from_string(r.at("mode").get<std::string>());
    c.rng_seed = r.at("rng_seed").get<std::uint64_t>();
    c.performer = detail::performer_from(r.at("performer"));
    c.bank = detail::bank_from(r.at("concept_bank"));
    const detail::Reader ex = r.at("explainer");
    if (!ex.is_null()) c.explainer = detail::explainer_from(ex);
    c.concept_subset = r.at("concept_subset").get<std::vector<std::size_t>>();
    c.performer.validate();
    c.bank.validate();
    if (c.explainer) c.explainer->validate();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint is inconsistent: ") + e.what());
  }
  return c;
}

/// Serialized checkpoint with header fields first and the large parameter
/// arrays last, so a truncated file still carries its header.
inline std::string checkpoint_text(const Checkpoint& c) {
  const nlohmann::json j = to_json(c);
  std::string out = "{";
  for (const char* key : {"format_version", "kind", "mode", "rng_seed", "concept_subset", "concept_bank",
                          "performer", "explainer"}) {
    if (out.size() > 1) out += ',';
    out += nlohmann::json(key).dump() + ':' + j.at(key).dump();
  }
  return out + "}\n";
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) { write_text_file(path, checkpoint_text(c)); }

/// Loads a checkpoint. A file cut short is parsed as far as it goes, and the
/// error names the first required field that is absent.
inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();

  nlohmann::json doc;
  nlohmann::detail::json_sax_dom_parser<nlohmann::json> sax(doc, false);
  const bool ok = nlohmann::json::sax_parse(text, &sax, nlohmann::json::input_format_t::json, false);
  if (ok) return checkpoint_from_json(doc);
  try {
    (void)checkpoint_from_json(doc);
  } catch (const CheckpointError& e) {
    throw CheckpointError("checkpoint '" + path + "' is truncated or malformed; " + e.what());
  }
  throw CheckpointError("checkpoint '" + path + "' is truncated or malformed");
}

}  // namespace addex
