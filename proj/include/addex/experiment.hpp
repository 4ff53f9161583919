#pragma once

// Config-driven experiments: per replicate seed, generate data, build the
// performer, then train a baseline explainer (distillation only) and a
// prior-guided explainer from the same initialization, plus an optional
// sweep of prior-guided runs over random concept subsets. Reports are plain JSON and CSV.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "addex/checkpoint.hpp"
#include "addex/distill.hpp"
#include "addex/io.hpp"
#include "addex/metrics.hpp"
#include "addex/models.hpp"
#include "addex/pretrain.hpp"
#include "addex/synthetic.hpp"
#include "json.hpp"

namespace addex {

struct ExplainerConfig {
  std::vector<std::size_t> hidden{32};
  ExplainerInput input = ExplainerInput::kTopMap;
  bool positive = true;
};

struct ExperimentConfig {
  std::string name = "experiment";
  SyntheticSpec data;
  PerformerTopology topology;
  ConceptMode mode = ConceptMode::kCase1;
  DistillConfig distill;  // seed is replaced by the replicate seed
  ExplainerConfig explainer;
  std::vector<std::uint64_t> replicate_seeds{0, 1, 2, 3, 4};
  // Each replicate regenerates the dataset from its own seed.
  bool vary_data_seed = true;
  std::vector<std::size_t> sweep_sizes;
  std::string output_dir = "results";
  std::size_t parallel = 0;  // worker threads; 0 picks the hardware count
  bool save_checkpoints = false;

  void validate() const {
    if (replicate_seeds.empty()) throw ConfigError("replicate_seeds must list at least one seed");
    data.validate();
    distill.validate();
    if (distill.positive != explainer.positive) throw ConfigError("explainer.positive and distill positivity differ");
    if (mode == ConceptMode::kCase1 && data.num_concepts < 2) throw ConfigError("need at least 2 concepts");
    for (std::size_t k : sweep_sizes) {
      if (k < 1 || k > data.num_concepts) {
        throw ConfigError("sweep size " + std::to_string(k) + " must lie in [1, " + std::to_string(data.num_concepts) + "]");
      }
    }
  }
};

/// Case 1, cross-entropy prior on clamped weights, positive alpha, beta 10,
/// with a shortcut concept whose activation is amplified 8x.
inline ExperimentConfig preset_shortcut() {
  ExperimentConfig c;
  c.name = "shortcut";
  c.data.resolve();
  c.distill.beta = 10.0;
  c.distill.prior = PriorKind::kCrossEntropy;
  c.sweep_sizes = {2, 4, 8};
  c.output_dir = "results/shortcut";
  return c;
}

/// Case 2 heads on a shared trunk, L2 prior, unconstrained alpha, beta 0.2.
inline ExperimentConfig preset_attribute() {
  ExperimentConfig c;
  c.name = "attribute";
  c.data.shortcut_multiplier = 1.0;
  c.data.resolve();
  c.mode = ConceptMode::kCase2;
  c.distill.beta = 0.2;
  c.distill.prior = PriorKind::kL2;
  c.distill.positive = false;
  c.explainer.positive = false;
  c.output_dir = "results/attribute";
  return c;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const DistillConfig& d) {
  return {{"beta", d.beta},
          {"prior", to_string(d.prior)},
          {"epochs", d.epochs},
          {"batch_size", d.batch_size},
          {"learning_rate", d.learning_rate},
          {"optimizer", to_string(d.optimizer)},
          {"seed", d.seed}};
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"name", c.name},
          {"data", to_json(c.data)},
          {"topology",
           {{"activation_scale", c.topology.activation_scale}, {"min_accuracy_margin", c.topology.min_accuracy_margin}}},
          {"mode", to_string(c.mode)},
          {"distill", to_json(c.distill)},
          {"explainer", {{"hidden", c.explainer.hidden}, {"input", to_string(c.explainer.input)}, {"positive", c.explainer.positive}}},
          {"replicate_seeds", c.replicate_seeds},
          {"vary_data_seed", c.vary_data_seed},
          {"sweep_sizes", c.sweep_sizes},
          {"output_dir", c.output_dir},
          {"parallel", c.parallel},
          {"save_checkpoints", c.save_checkpoints}};
}

/// Missing fields keep their defaults; unknown fields are rejected.
inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  using detail::read_opt;
  detail::reject_unknown(j,
                         {"name", "data", "topology", "mode", "distill", "explainer", "replicate_seeds",
                          "vary_data_seed", "sweep_sizes", "output_dir", "parallel", "save_checkpoints"},
                         "experiment config");
  ExperimentConfig c;
  read_opt(j, "name", c.name);
  c.data = spec_from_json(j.value("data", nlohmann::json::object()));
  if (j.contains("topology")) {
    const auto& t = j.at("topology");
    detail::reject_unknown(t, {"activation_scale", "min_accuracy_margin"}, "topology");
    read_opt(t, "activation_scale", c.topology.activation_scale);
    read_opt(t, "min_accuracy_margin", c.topology.min_accuracy_margin);
  }
  if (j.contains("mode")) c.mode = concept_mode_from_string(j.at("mode").get<std::string>());
  if (j.contains("distill")) {
    const auto& d = j.at("distill");
    detail::reject_unknown(d, {"beta", "prior", "epochs", "batch_size", "learning_rate", "optimizer", "seed"}, "distill");
    read_opt(d, "beta", c.distill.beta);
    if (d.contains("prior")) c.distill.prior = prior_kind_from_string(d.at("prior").get<std::string>());
    read_opt(d, "epochs", c.distill.epochs);
    read_opt(d, "batch_size", c.distill.batch_size);
    read_opt(d, "learning_rate", c.distill.learning_rate);
    if (d.contains("optimizer")) c.distill.optimizer = optimizer_from_string(d.at("optimizer").get<std::string>());
    read_opt(d, "seed", c.distill.seed);
  }
  if (j.contains("explainer")) {
    const auto& e = j.at("explainer");
    detail::reject_unknown(e, {"hidden", "input", "positive"}, "explainer");
    read_opt(e, "hidden", c.explainer.hidden);
    if (e.contains("input")) c.explainer.input = explainer_input_from_string(e.at("input").get<std::string>());
    read_opt(e, "positive", c.explainer.positive);
  }
  c.distill.positive = c.explainer.positive;
  read_opt(j, "replicate_seeds", c.replicate_seeds);
  read_opt(j, "vary_data_seed", c.vary_data_seed);
  read_opt(j, "sweep_sizes", c.sweep_sizes);
  read_opt(j, "output_dir", c.output_dir);
  read_opt(j, "parallel", c.parallel);
  read_opt(j, "save_checkpoints", c.save_checkpoints);
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment(const std::string& path) { return experiment_from_json(read_json_file(path)); }

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct RunResult {
  std::string name;  // "baseline", "prior" or "sweep_<k>"
  std::vector<std::size_t> subset;
  MetricsReport metrics;
  TrainState state;
  ExplainerModel explainer;
};

struct ReplicateResult {
  std::uint64_t seed = 0;
  std::optional<std::string> error;  // set when a stage failed
  std::vector<HeadFit> fits;
  double performer_train_accuracy = 0.0;
  std::uint64_t frozen_checksum = 0;
  std::vector<RunResult> runs;  // baseline, prior, then sweep points

  const RunResult* run(const std::string& name) const {
    for (const RunResult& r : runs) {
      if (r.name == name) return &r;
    }
    return nullptr;
  }
};

/// Everything the explainer runs of one replicate share.
struct ReplicateSetup {
  Dataset data;
  PretrainResult model;
};

inline ReplicateSetup setup_replicate(const ExperimentConfig& cfg, std::uint64_t seed) {
  SyntheticSpec spec = cfg.data;
  if (cfg.vary_data_seed) spec.seed = seed;
  ReplicateSetup s{generate_dataset(spec), {}};
  s.model = pretrain_performer(s.data, cfg.topology, cfg.mode);
  return s;
}

inline std::uint64_t frozen_checksum(const ReplicateSetup& s) {
  std::uint64_t h = checksum(s.model.performer) ^ (checksum(s.model.bank) * 31u);
  for (const Tensor& im : s.data.train.images) h = checksum(im.data, h);
  return h;
}

/// Concepts kept in a sweep point of size k: a seeded random subset, sorted.
inline std::vector<std::size_t> sweep_subset(std::uint64_t seed, std::size_t n, std::size_t k) {
  Rng rng(derive_seed(seed, 300 + k));
  std::vector<std::size_t> perm = rng.permutation(n);
  perm.resize(k);
  std::sort(perm.begin(), perm.end());
  return perm;
}

/// One explainer run on a prepared replicate. The initialization depends only
/// on the seed, so runs that differ in their prior start from the same weights.
inline RunResult run_explainer(const ExperimentConfig& cfg, const ReplicateSetup& s, std::uint64_t seed,
                               const std::string& name, PriorKind prior, std::vector<std::size_t> subset = {}) {
  DistillConfig dc = cfg.distill;
  dc.seed = seed;
  dc.prior = prior;
  const PerformerModel& f = s.model.performer;
  const ConceptBank& bank = s.model.bank;
  if (subset.empty()) subset = all_concepts(bank.num_concepts);
  const std::size_t input_size =
      cfg.explainer.input == ExplainerInput::kTopMap ? f.input_shape[0] * f.input_shape[1] * f.num_channels()
                                                     : numel(f.input_shape);
  Rng init(derive_seed(seed, 1));
  RunResult r;
  r.name = name;
  r.subset = subset;
  r.explainer = make_explainer(input_size, subset.size(), cfg.explainer.hidden, cfg.explainer.positive,
                               cfg.explainer.input, init);
  const auto samples = prepare_samples(f, bank, s.data.train.images, r.explainer.input, dc.prior, dc.clamp_priors(), subset);
  r.state = train(r.explainer, samples, dc);
  r.metrics = evaluate(f, bank, r.explainer, s.data.eval.images, s.data.eval.labels, subset);
  return r;
}

inline ReplicateResult run_replicate(const ExperimentConfig& cfg, std::uint64_t seed, bool main_runs = true) {
  ReplicateResult out;
  out.seed = seed;
  std::string stage = "data generation";
  try {
    stage = "performer pretraining";
    const ReplicateSetup s = setup_replicate(cfg, seed);
    out.fits = s.model.fits;
    out.performer_train_accuracy = s.model.train_accuracy;
    out.frozen_checksum = frozen_checksum(s);
    if (main_runs) {
      stage = "baseline run";
      out.runs.push_back(run_explainer(cfg, s, seed, "baseline", PriorKind::kNone));
      stage = "prior run";
      out.runs.push_back(run_explainer(cfg, s, seed, "prior", cfg.distill.prior));
    }
    for (std::size_t k : cfg.sweep_sizes) {
      stage = "sweep " + std::to_string(k);
      out.runs.push_back(run_explainer(cfg, s, seed, "sweep_" + std::to_string(k), cfg.distill.prior,
                                       sweep_subset(seed, s.model.bank.num_concepts, k)));
    }
    if (frozen_checksum(s) != out.frozen_checksum) throw std::logic_error("frozen performer or data changed");
    if (cfg.save_checkpoints) {
      const std::filesystem::path dir = std::filesystem::path(cfg.output_dir) / ("replicate_" + std::to_string(seed));
      std::filesystem::create_directories(dir);
      for (const RunResult& r : out.runs) {
        save_checkpoint({cfg.mode, seed, s.model.performer, s.model.bank, r.explainer, r.subset},
                        (dir / (r.name + "_checkpoint.json")).string());
      }
    }
  } catch (const std::exception& e) {
    out.error = stage + ": " + e.what();
  }
  return out;
}

/// Runs every replicate, on up to cfg.parallel threads. Replicates share no
/// mutable state; results come back in seed-list order.
inline std::vector<ReplicateResult> run_experiment(const ExperimentConfig& cfg, bool main_runs = true) {
  cfg.validate();
  std::vector<ReplicateResult> results(cfg.replicate_seeds.size());
  std::size_t workers = cfg.parallel ? cfg.parallel : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, results.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < results.size(); i = next++) {
      results[i] = run_replicate(cfg, cfg.replicate_seeds[i], main_runs);
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);
    for (std::thread& t : pool) t.join();
  }
  return results;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Sum of part contributions, unassigned contributions and b must reproduce
/// the explainer score on every image.
inline void check_contribution_identity(const MetricsReport& m, double tolerance = 1e-9) {
  for (std::size_t k = 0; k < m.images.size(); ++k) {
    const ImageRecord& im = m.images[k];
    double total = im.unassigned + m.explainer_bias;
    for (const auto& entry : im.parts) total += entry.second;
    if (std::abs(total - im.explainer_score) > tolerance * std::max(1.0, std::abs(im.explainer_score))) {
      throw std::logic_error("contribution identity violated on image " + std::to_string(k));
    }
  }
}

inline nlohmann::json curves_json(const TrainState& s) {
  nlohmann::json rows = nlohmann::json::array();
  for (const EpochRecord& e : s.history) {
    rows.push_back({{"epoch", e.epoch},
                    {"L", e.distill},
                    {"prior_loss", e.prior},
                    {"lambda", e.lambda},
                    {"total", e.total},
                    {"skipped_priors", e.skipped_priors}});
  }
  return rows;
}

inline nlohmann::json to_json(const ReplicateResult& r, bool with_images = true) {
  nlohmann::json j{{"seed", r.seed}, {"error", r.error ? nlohmann::json(*r.error) : nlohmann::json(nullptr)}};
  nlohmann::json fits = nlohmann::json::array();
  for (const HeadFit& f : r.fits) {
    fits.push_back({{"name", f.name}, {"rmse", f.rmse}, {"accuracy", f.accuracy ? nlohmann::json(*f.accuracy) : nlohmann::json(nullptr)}});
  }
  j["pretrain"] = {{"train_accuracy", r.performer_train_accuracy}, {"fits", std::move(fits)}};
  j["frozen_checksum"] = r.frozen_checksum;
  nlohmann::json runs = nlohmann::json::object();
  for (const RunResult& run : r.runs) {
    runs[run.name] = {{"concepts", run.subset}, {"metrics", to_json(run.metrics, with_images)}, {"curves", curves_json(run.state)}};
  }
  j["runs"] = std::move(runs);
  const RunResult* base = r.run("baseline");
  const RunResult* prior = r.run("prior");
  if (base && prior) {
    auto err = [](const RunResult* x) {
      return x->metrics.contribution_error ? nlohmann::json(x->metrics.contribution_error->mean) : nlohmann::json(nullptr);
    };
    j["comparison"] = {{"entropy_baseline", base->metrics.mean_entropy},
                       {"entropy_prior", prior->metrics.mean_entropy},
                       {"contribution_error_baseline", err(base)},
                       {"contribution_error_prior", err(prior)}};
  }
  return j;
}

struct SummaryRow {
  std::string run;
  std::string metric;
  std::vector<double> values;
};

/// Mean and sample standard deviation (empty for a single value).
inline std::pair<double, std::optional<double>> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, std::nullopt};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

/// Collects per-run metric values across successful replicates, in a fixed order.
inline std::vector<SummaryRow> summarize(const std::vector<nlohmann::json>& replicates) {
  std::vector<SummaryRow> rows;
  auto add = [&](const std::string& run, const std::string& metric, double v) {
    for (SummaryRow& r : rows) {
      if (r.run == run && r.metric == metric) {
        r.values.push_back(v);
        return;
      }
    }
    rows.push_back({run, metric, {v}});
  };
  for (const nlohmann::json& rep : replicates) {
    if (!rep.at("error").is_null()) continue;
    for (const auto& [run, body] : rep.at("runs").items()) {
      const nlohmann::json& m = body.at("metrics");
      add(run, "num_concepts", m.at("num_concepts").get<double>());
      add(run, "mean_entropy", m.at("mean_entropy").get<double>());
      if (!m.at("contribution_error").is_null()) add(run, "contribution_error", m.at("contribution_error").at("mean").get<double>());
      add(run, "mean_deviation", m.at("mean_deviation").get<double>());
      add(run, "performer_accuracy", m.at("performer_accuracy").get<double>());
      add(run, "explainer_accuracy", m.at("explainer_accuracy").get<double>());
    }
  }
  return rows;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "run,metric,n,mean,std\n";
  for (const SummaryRow& r : rows) {
    const auto [m, s] = mean_std(r.values);
    out += r.run + ',' + r.metric + ',' + std::to_string(r.values.size()) + ',' + format_double(m) + ',' +
           (s ? format_double(*s) : std::string()) + '\n';
  }
  return out;
}

/// Writes, under `dir`:
///   report.json                 configuration, paired comparison, summary
///   summary.csv                 mean and sample std per run and metric
///   curves.csv                  replicate,run,epoch,L,prior_loss,lambda,total
///   contributions.csv           per-image alpha_i * y_i for every run
///   replicate_<seed>/report.json       full per-replicate report
///   replicate_<seed>/<run>_metrics.csv per-image metrics plus summary block
inline void emit_report(const ExperimentConfig& cfg, const std::vector<ReplicateResult>& results, const std::string& dir) {
  namespace fs = std::filesystem;
  if (results.empty()) throw std::invalid_argument("emit_report: no replicates to report");
  for (const ReplicateResult& r : results) {
    for (const RunResult& run : r.runs) check_contribution_identity(run.metrics);
  }
  fs::create_directories(dir);

  std::vector<nlohmann::json> reps;
  std::string curves = "replicate,run,epoch,L,prior_loss,lambda,total\n";
  std::string contrib = "replicate,run,image,label,score,explainer_score,bias,concept,contribution\n";
  for (const ReplicateResult& r : results) {
    const fs::path rdir = fs::path(dir) / ("replicate_" + std::to_string(r.seed));
    fs::create_directories(rdir);
    reps.push_back(to_json(r, false));
    write_text_file((rdir / "report.json").string(), to_json(r, true).dump(1) + "\n");
    const std::string seed = std::to_string(r.seed);
    for (const RunResult& run : r.runs) {
      write_text_file((rdir / (run.name + "_metrics.csv")).string(), to_csv(run.metrics));
      for (const EpochRecord& e : run.state.history) {
        curves += seed + ',' + run.name + ',' + std::to_string(e.epoch) + ',' + format_double(e.distill) + ',' +
                  format_double(e.prior) + ',' + format_double(e.lambda) + ',' + format_double(e.total) + '\n';
      }
      for (std::size_t k = 0; k < run.metrics.images.size(); ++k) {
        const ImageRecord& im = run.metrics.images[k];
        const std::string prefix = seed + ',' + run.name + ',' + std::to_string(k) + ',' + std::to_string(im.label) + ',' +
                                   format_double(im.score) + ',' + format_double(im.explainer_score) + ',' +
                                   format_double(run.metrics.explainer_bias) + ',';
        for (std::size_t i = 0; i < im.contributions.size(); ++i) {
          contrib += prefix + std::to_string(run.subset[i]) + ',' + format_double(im.contributions[i]) + '\n';
        }
      }
    }
  }
  const std::vector<SummaryRow> rows = summarize(reps);
  nlohmann::json summary = nlohmann::json::array();
  for (const SummaryRow& row : rows) {
    const auto [m, s] = mean_std(row.values);
    summary.push_back({{"run", row.run}, {"metric", row.metric}, {"n", row.values.size()}, {"mean", m},
                       {"std", s ? nlohmann::json(*s) : nlohmann::json(nullptr)}});
  }
  nlohmann::json top{{"config", to_json(cfg)}, {"replicates", reps}, {"summary", std::move(summary)}};
  write_text_file((fs::path(dir) / "report.json").string(), top.dump(1) + "\n");
  write_text_file((fs::path(dir) / "summary.csv").string(), summary_csv(rows));
  write_text_file((fs::path(dir) / "curves.csv").string(), curves);
  write_text_file((fs::path(dir) / "contributions.csv").string(), contrib);
}

/// Rebuilds summary.csv from the replicate_*/report.json files under `dir`.
inline std::vector<SummaryRow> summarize_directory(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::runtime_error("'" + dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const fs::path p = entry.path() / "report.json";
    if (entry.is_directory() && entry.path().filename().string().rfind("replicate_", 0) == 0 && fs::exists(p)) {
      files.push_back(p);
    }
  }
  if (files.empty()) throw std::runtime_error("no replicate_*/report.json files under '" + dir + "'");
  std::sort(files.begin(), files.end());
  std::vector<nlohmann::json> reps;
  for (const fs::path& p : files) reps.push_back(read_json_file(p.string()));
  return summarize(reps);
}

}  // namespace addex
