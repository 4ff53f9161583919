#pragma once

// Synthetic images with planted concepts: each concept is a small +-1
// template stamped at a random location over a faint noise background.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "addex/io.hpp"
#include "addex/models.hpp"
#include "addex/random.hpp"
#include "addex/tensor.hpp"
#include "json.hpp"

namespace addex {

struct SyntheticSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_concepts = 8;
  std::size_t template_size = 3;
  // Explicit templates (template_size^2 values each); searched from the seed when empty.
  std::vector<std::vector<double>> templates;
  // Largest off-center auto- or cross-correlation a searched template set may have.
  double max_offpeak_correlation = 4.0;
  PartMap parts;                            // singleton part per concept when empty
  std::vector<std::string> category_parts;  // every part when empty
  std::vector<double> importance;           // all ones when empty
  std::size_t shortcut_concept = 0;
  double shortcut_multiplier = 8.0;
  // Fraction of images drawn with every category part present.
  double category_fraction = 0.5;
  // Presence probability of each concept not forced by the category.
  double clutter_presence = 0.3;
  double amplitude_min = 0.8;
  double amplitude_max = 1.2;
  // Evidence for concept i is amplitude_i - detection_floor.
  double detection_floor = 5.0 / 9.0;
  double noise_sigma = 0.01;
  std::size_t margin = 2;
  std::size_t train_size = 512;
  std::size_t eval_size = 256;
  std::uint64_t seed = 0;

  /// Fills defaults that depend on other fields.
  void resolve() {
    if (parts.empty()) {
      for (std::size_t i = 0; i < num_concepts; ++i) parts["part" + std::to_string(i)] = {i};
    }
    if (category_parts.empty()) {
      for (const auto& entry : parts) category_parts.push_back(entry.first);
    }
    if (importance.empty()) importance.assign(num_concepts, 1.0);
  }

  void validate() const {
    if (num_concepts < 1) throw ConfigError("num_concepts must be >= 1");
    if (template_size < 1 || template_size % 2 == 0) throw ConfigError("template_size must be odd");
    if (height < template_size + 2 * margin || width < template_size + 2 * margin) {
      throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) +
                        " cannot hold a " + std::to_string(template_size) + "x" + std::to_string(template_size) +
                        " patch with margin " + std::to_string(margin));
    }
    if (importance.size() != num_concepts) throw ConfigError("importance needs one entry per concept");
    std::size_t nonzero = 0;
    for (double v : importance) {
      if (!(v >= 0.0)) throw ConfigError("importance entries must be nonnegative");
      nonzero += v > 0.0;
    }
    if (nonzero < std::min<std::size_t>(2, num_concepts)) {
      throw ConfigError("importance needs at least 2 nonzero entries");
    }
    if (shortcut_concept >= num_concepts) throw ConfigError("shortcut_concept out of range");
    if (!(shortcut_multiplier > 0.0)) throw ConfigError("shortcut_multiplier must be positive");
    try {
      validate_parts(parts, num_concepts);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    for (const std::string& p : category_parts) {
      if (!parts.count(p)) throw ConfigError("category part '" + p + "' is not a known part");
    }
    if (!(category_fraction >= 0.0 && category_fraction <= 1.0)) throw ConfigError("category_fraction must be in [0, 1]");
    if (!(clutter_presence >= 0.0 && clutter_presence <= 1.0)) throw ConfigError("clutter_presence must be in [0, 1]");
    if (!(amplitude_min > 0.0 && amplitude_min <= amplitude_max)) {
      throw ConfigError("need 0 < amplitude_min <= amplitude_max");
    }
    if (!(detection_floor >= 0.0 && detection_floor < amplitude_min)) {
      throw ConfigError("detection_floor must lie in [0, amplitude_min)");
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
    if (train_size + eval_size == 0) throw ConfigError("dataset would be empty");
    for (const auto& t : templates) {
      if (t.size() != template_size * template_size) throw ConfigError("template has the wrong number of values");
    }
    if (!templates.empty() && templates.size() != num_concepts) {
      throw ConfigError("need one template per concept");
    }
  }
};

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// Correlation of b against a shifted by (du, dv); both are k x k.
inline double shifted_correlation(const Tensor& a, const Tensor& b, long du, long dv) {
  const long k = static_cast<long>(a.shape[0]);
  double s = 0.0;
  for (long i = 0; i < k; ++i) {
    for (long j = 0; j < k; ++j) {
      const long u = i + du, v = j + dv;
      if (u >= 0 && u < k && v >= 0 && v < k) s += a.data[i * k + j] * b.data[u * k + v];
    }
  }
  return s;
}

/// Largest correlation between a and b over every shift, skipping the
/// aligned position when a and b are the same template.
inline double max_offpeak(const Tensor& a, const Tensor& b, bool same) {
  const long k = static_cast<long>(a.shape[0]);
  double best = -INFINITY;
  for (long du = -(k - 1); du <= k - 1; ++du) {
    for (long dv = -(k - 1); dv <= k - 1; ++dv) {
      if (same && du == 0 && dv == 0) continue;
      best = std::max(best, shifted_correlation(a, b, du, dv));
    }
  }
  return best;
}

inline double normalized_correlation(const Tensor& a, const Tensor& b) {
  return dot_of(a.data, b.data) / std::sqrt(dot_of(a.data, a.data) * dot_of(b.data, b.data));
}

/// Largest off-peak response any template gives to any stamped template.
inline double max_offpeak(const std::vector<Tensor>& templates) {
  double best = -INFINITY;
  for (std::size_t i = 0; i < templates.size(); ++i) {
    for (std::size_t j = 0; j < templates.size(); ++j) {
      best = std::max(best, max_offpeak(templates[i], templates[j], i == j));
    }
  }
  return best;
}

/// Draws distinct +-1 patterns and keeps those whose shifted auto- and
/// cross-correlations with every kept pattern stay below the bound.
inline std::vector<Tensor> search_templates(std::size_t count, std::size_t k, double bound, Rng& rng,
                                            std::size_t max_draws = 20000) {
  std::vector<Tensor> kept;
  std::set<std::vector<double>> seen;
  for (std::size_t draw = 0; draw < max_draws && kept.size() < count; ++draw) {
    Tensor t({k, k});
    for (double& v : t.data) v = rng.bernoulli(0.5) ? 1.0 : -1.0;
    if (!seen.insert(t.data).second) continue;
    if (max_offpeak(t, t, true) > bound) continue;
    bool ok = true;
    for (const Tensor& o : kept) {
      if (max_offpeak(t, o, false) > bound || max_offpeak(o, t, false) > bound) {
        ok = false;
        break;
      }
    }
    if (ok) kept.push_back(std::move(t));
  }
  if (kept.size() < count) {
    throw ConfigError("found only " + std::to_string(kept.size()) + " templates of size " + std::to_string(k) +
                      " with off-peak correlation <= " + std::to_string(bound) + ", need " +
                      std::to_string(count));
  }
  return kept;
}

inline std::vector<Tensor> resolve_templates(const SyntheticSpec& spec) {
  const std::size_t k = spec.template_size;
  std::vector<Tensor> ts;
  if (spec.templates.empty()) {
    Rng rng(derive_seed(spec.seed, 100));
    ts = search_templates(spec.num_concepts, k, spec.max_offpeak_correlation, rng);
  } else {
    for (const auto& t : spec.templates) ts.emplace_back(Shape{k, k}, t);
  }
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (dot_of(ts[i].data, ts[i].data) == 0.0) throw ConfigError("template " + std::to_string(i) + " is all zero");
    for (std::size_t j = i + 1; j < ts.size(); ++j) {
      const double c = normalized_correlation(ts[i], ts[j]);
      if (!(c < 0.9)) {
        throw ConfigError("templates " + std::to_string(i) + " and " + std::to_string(j) +
                          " are too similar (normalized correlation " + std::to_string(c) + ")");
      }
    }
  }
  return ts;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct Split {
  std::vector<Tensor> images;  // [H x W x 1]
  std::vector<int> labels;
  std::vector<std::vector<int>> presence;        // per concept
  std::vector<std::vector<double>> amplitude;    // per concept, 0 when absent
  std::vector<std::vector<int>> part_presence;   // per part, in PartMap order
  std::vector<double> planted_score;             // sum_i importance_i * evidence_i

  std::size_t size() const { return images.size(); }
};

struct Dataset {
  SyntheticSpec spec;
  std::vector<Tensor> templates;
  Split train;
  Split eval;
};

/// Evidence for each concept on one image: amplitude minus floor when present.
inline std::vector<double> evidence(const SyntheticSpec& spec, const std::vector<int>& presence,
                                    const std::vector<double>& amplitude) {
  std::vector<double> e(presence.size(), 0.0);
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (presence[i]) e[i] = amplitude[i] - spec.detection_floor;
  }
  return e;
}

namespace detail {

inline void generate_split(const SyntheticSpec& spec, const std::vector<Tensor>& templates, std::size_t count,
                           Rng& rng, Split& out) {
  const std::size_t H = spec.height, W = spec.width, k = spec.template_size, n = spec.num_concepts;
  const std::size_t gap = 2 * k - 1;
  const std::size_t span_r = H - k - 2 * spec.margin + 1, span_c = W - k - 2 * spec.margin + 1;
  std::vector<char> forced(n, 0);
  for (const std::string& p : spec.category_parts) {
    for (std::size_t i : spec.parts.at(p)) forced[i] = 1;
  }
  for (std::size_t s = 0; s < count; ++s) {
    Tensor img({H, W, 1});
    for (double& v : img.data) v = spec.noise_sigma * rng.normal();
    const bool category = rng.bernoulli(spec.category_fraction);
    std::vector<int> present(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const bool clutter = rng.bernoulli(spec.clutter_presence);
      present[i] = (category && forced[i]) || clutter;
    }
    std::vector<double> amp(n, 0.0);
    std::vector<std::pair<std::size_t, std::size_t>> placed;
    for (std::size_t i = 0; i < n; ++i) {
      if (!present[i]) continue;
      std::size_t r = 0, c = 0;
      bool ok = false;
      for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
        r = spec.margin + rng.index(span_r);
        c = spec.margin + rng.index(span_c);
        ok = std::all_of(placed.begin(), placed.end(), [&](const auto& q) {
          const std::size_t dr = r > q.first ? r - q.first : q.first - r;
          const std::size_t dc = c > q.second ? c - q.second : q.second - c;
          return dr >= gap || dc >= gap;
        });
      }
      if (!ok) {
        throw ConfigError("cannot place " + std::to_string(placed.size() + 1) + " non-overlapping " +
                          std::to_string(k) + "x" + std::to_string(k) + " patches (spacing " + std::to_string(gap) +
                          ") in a " + std::to_string(H) + "x" + std::to_string(W) + " image with margin " +
                          std::to_string(spec.margin));
      }
      placed.emplace_back(r, c);
      amp[i] = rng.uniform(spec.amplitude_min, spec.amplitude_max);
      for (std::size_t u = 0; u < k; ++u) {
        for (std::size_t v = 0; v < k; ++v) img.at(r + u, c + v, 0) += amp[i] * templates[i].data[u * k + v];
      }
    }
    int label = 1;
    std::vector<int> parts_present;
    for (const auto& [name, idx] : spec.parts) {
      const bool all = std::all_of(idx.begin(), idx.end(), [&](std::size_t i) { return present[i] != 0; });
      parts_present.push_back(all);
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (forced[i] && !present[i]) label = 0;
    }
    const std::vector<double> e = evidence(spec, present, amp);
    out.planted_score.push_back(dot_of(spec.importance, e));
    out.images.push_back(std::move(img));
    out.labels.push_back(label);
    out.presence.push_back(std::move(present));
    out.amplitude.push_back(std::move(amp));
    out.part_presence.push_back(std::move(parts_present));
  }
}

}  // namespace detail

/// Deterministic in spec.seed. Train and eval splits use separate streams.
inline Dataset generate_dataset(SyntheticSpec spec) {
  spec.resolve();
  spec.validate();
  Dataset d;
  d.templates = resolve_templates(spec);
  Rng train_rng(derive_seed(spec.seed, 101));
  Rng eval_rng(derive_seed(spec.seed, 102));
  detail::generate_split(spec, d.templates, spec.train_size, train_rng, d.train);
  detail::generate_split(spec, d.templates, spec.eval_size, eval_rng, d.eval);
  d.spec = std::move(spec);
  return d;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace detail {

/// Reads `key` into `out` when present; rejects unknown keys elsewhere.
template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("field '") + key + "': " + e.what());
    }
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(std::string("unknown field '") + key + "' in " + where);
    }
  }
}

}  // namespace detail

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"height", s.height},
          {"width", s.width},
          {"num_concepts", s.num_concepts},
          {"template_size", s.template_size},
          {"templates", s.templates},
          {"max_offpeak_correlation", s.max_offpeak_correlation},
          {"parts", s.parts},
          {"category_parts", s.category_parts},
          {"importance", s.importance},
          {"shortcut_concept", s.shortcut_concept},
          {"shortcut_multiplier", s.shortcut_multiplier},
          {"category_fraction", s.category_fraction},
          {"clutter_presence", s.clutter_presence},
          {"amplitude_min", s.amplitude_min},
          {"amplitude_max", s.amplitude_max},
          {"detection_floor", s.detection_floor},
          {"noise_sigma", s.noise_sigma},
          {"margin", s.margin},
          {"train_size", s.train_size},
          {"eval_size", s.eval_size},
          {"seed", s.seed}};
}

inline SyntheticSpec spec_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"height", "width", "num_concepts", "template_size", "templates", "max_offpeak_correlation",
                          "parts", "category_parts", "importance", "shortcut_concept", "shortcut_multiplier",
                          "category_fraction", "clutter_presence", "amplitude_min", "amplitude_max",
                          "detection_floor", "noise_sigma", "margin", "train_size", "eval_size", "seed"},
                         "data spec");
  SyntheticSpec s;
  detail::read_opt(j, "height", s.height);
  detail::read_opt(j, "width", s.width);
  detail::read_opt(j, "num_concepts", s.num_concepts);
  detail::read_opt(j, "template_size", s.template_size);
  detail::read_opt(j, "templates", s.templates);
  detail::read_opt(j, "max_offpeak_correlation", s.max_offpeak_correlation);
  detail::read_opt(j, "parts", s.parts);
  detail::read_opt(j, "category_parts", s.category_parts);
  detail::read_opt(j, "importance", s.importance);
  detail::read_opt(j, "shortcut_concept", s.shortcut_concept);
  detail::read_opt(j, "shortcut_multiplier", s.shortcut_multiplier);
  detail::read_opt(j, "category_fraction", s.category_fraction);
  detail::read_opt(j, "clutter_presence", s.clutter_presence);
  detail::read_opt(j, "amplitude_min", s.amplitude_min);
  detail::read_opt(j, "amplitude_max", s.amplitude_max);
  detail::read_opt(j, "detection_floor", s.detection_floor);
  detail::read_opt(j, "noise_sigma", s.noise_sigma);
  detail::read_opt(j, "margin", s.margin);
  detail::read_opt(j, "train_size", s.train_size);
  detail::read_opt(j, "eval_size", s.eval_size);
  detail::read_opt(j, "seed", s.seed);
  s.resolve();
  s.validate();
  return s;
}

inline nlohmann::json to_json(const Split& s) {
  nlohmann::json images = nlohmann::json::array();
  for (const Tensor& t : s.images) images.push_back(t.data);
  return {{"images", std::move(images)},     {"labels", s.labels},
          {"presence", s.presence},         {"amplitude", s.amplitude},
          {"part_presence", s.part_presence}, {"planted_score", s.planted_score}};
}

inline nlohmann::json to_json(const Dataset& d) {
  nlohmann::json ts = nlohmann::json::array();
  for (const Tensor& t : d.templates) ts.push_back(t.data);
  return {{"format_version", kFormatVersion}, {"kind", "dataset"}, {"spec", to_json(d.spec)},
          {"templates", std::move(ts)},      {"train", to_json(d.train)}, {"eval", to_json(d.eval)}};
}

inline Split split_from_json(const nlohmann::json& j, const SyntheticSpec& spec) {
  Split s;
  const Shape shape{spec.height, spec.width, 1};
  for (const auto& im : j.at("images")) s.images.emplace_back(shape, im.get<std::vector<double>>());
  s.labels = j.at("labels").get<std::vector<int>>();
  s.presence = j.at("presence").get<std::vector<std::vector<int>>>();
  s.amplitude = j.at("amplitude").get<std::vector<std::vector<double>>>();
  s.part_presence = j.at("part_presence").get<std::vector<std::vector<int>>>();
  s.planted_score = j.at("planted_score").get<std::vector<double>>();
  const std::size_t n = s.images.size();
  if (s.labels.size() != n || s.presence.size() != n || s.amplitude.size() != n || s.planted_score.size() != n) {
    throw ConfigError("dataset split arrays differ in length");
  }
  return s;
}

inline Dataset dataset_from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "dataset") throw ConfigError("not a dataset document");
  if (j.value("format_version", -1) != kFormatVersion) {
    throw ConfigError("dataset format_version " + j.value("format_version", nlohmann::json()).dump() +
                      " is not supported (expected " + std::to_string(kFormatVersion) + ")");
  }
  Dataset d;
  d.spec = spec_from_json(j.at("spec"));
  const std::size_t k = d.spec.template_size;
  for (const auto& t : j.at("templates")) d.templates.emplace_back(Shape{k, k}, t.get<std::vector<double>>());
  d.train = split_from_json(j.at("train"), d.spec);
  d.eval = split_from_json(j.at("eval"), d.spec);
  return d;
}

inline void save_dataset(const Dataset& d, const std::string& path) { write_text_file(path, to_json(d).dump() + "\n"); }

inline Dataset load_dataset(const std::string& path) { return dataset_from_json(read_json_file(path)); }

}  // namespace addex
