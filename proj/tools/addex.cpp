// Command-line front end: data generation, performer pretraining,
// distillation, evaluation, experiments and report summaries.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "addex/addex.hpp"

using namespace addex;
namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string output;
  std::optional<std::uint64_t> seed;
};

ExperimentConfig load_config(const std::string& path, const Overrides& o) {
  ExperimentConfig cfg = load_experiment(path);
  if (!o.output.empty()) cfg.output_dir = o.output;
  if (o.seed) cfg.replicate_seeds = {*o.seed};
  return cfg;
}

int gen_data(const std::string& spec_path, const std::string& out) {
  const Dataset d = generate_dataset(spec_from_json(read_json_file(spec_path)));
  save_dataset(d, out);
  std::cout << "wrote " << d.train.size() << " train and " << d.eval.size() << " eval images to " << out << "\n";
  return 0;
}

int pretrain(const std::string& path, const Overrides& o) {
  const ExperimentConfig cfg = load_config(path, o);
  const std::uint64_t seed = cfg.replicate_seeds.front();
  const ReplicateSetup s = setup_replicate(cfg, seed);
  const fs::path dir = fs::path(cfg.output_dir) / ("pretrain_seed" + std::to_string(seed));
  fs::create_directories(dir);
  save_checkpoint({cfg.mode, seed, s.model.performer, s.model.bank, std::nullopt, {}}, (dir / "checkpoint.json").string());
  nlohmann::json fits = nlohmann::json::array();
  for (const HeadFit& f : s.model.fits) {
    fits.push_back({{"name", f.name}, {"rmse", f.rmse}, {"accuracy", f.accuracy ? nlohmann::json(*f.accuracy) : nlohmann::json(nullptr)}});
  }
  const nlohmann::json report{{"seed", seed},
                              {"train_accuracy", s.model.train_accuracy},
                              {"majority_rate", s.model.majority_rate},
                              {"decision_threshold", json_number(s.model.performer.decision_threshold)},
                              {"fits", fits}};
  write_text_file((dir / "pretrain.json").string(), report.dump(1) + "\n");
  std::cout << "performer train accuracy " << format_double(s.model.train_accuracy) << " (majority "
            << format_double(s.model.majority_rate) << "); wrote " << dir.string() << "\n";
  return 0;
}

struct DistillFlags {
  std::optional<std::string> prior;
  std::optional<double> beta;
  std::optional<long> epochs;
};

int distill(const std::string& path, const Overrides& o, const DistillFlags& f) {
  ExperimentConfig cfg = load_config(path, o);
  if (f.prior) cfg.distill.prior = prior_kind_from_string(*f.prior);
  if (f.beta) cfg.distill.beta = *f.beta;
  if (f.epochs) cfg.distill.epochs = *f.epochs;
  cfg.validate();
  const std::uint64_t seed = cfg.replicate_seeds.front();
  const ReplicateSetup s = setup_replicate(cfg, seed);
  const std::string name = to_string(cfg.distill.prior);
  const RunResult r = run_explainer(cfg, s, seed, name, cfg.distill.prior);
  check_contribution_identity(r.metrics);

  const fs::path dir = fs::path(cfg.output_dir) / ("distill_" + name + "_seed" + std::to_string(seed));
  fs::create_directories(dir);
  save_checkpoint({cfg.mode, seed, s.model.performer, s.model.bank, r.explainer, r.subset}, (dir / "checkpoint.json").string());
  write_text_file((dir / "metrics.json").string(), to_json(r.metrics).dump(1) + "\n");
  write_text_file((dir / "metrics.csv").string(), to_csv(r.metrics));
  std::string curves = "epoch,L,prior_loss,lambda,total\n";
  for (const EpochRecord& e : r.state.history) {
    curves += std::to_string(e.epoch) + ',' + format_double(e.distill) + ',' + format_double(e.prior) + ',' +
              format_double(e.lambda) + ',' + format_double(e.total) + '\n';
  }
  write_text_file((dir / "curves.csv").string(), curves);

  const MetricsReport& m = r.metrics;
  std::cout << "prior " << name << ", beta " << format_double(cfg.distill.beta) << ", " << r.state.epoch << " epochs\n"
            << "  entropy " << format_double(m.mean_entropy) << "  contribution_error "
            << (m.contribution_error ? format_double(m.contribution_error->mean) : std::string("n/a")) << "  deviation "
            << format_double(m.mean_deviation) << "\n  accuracy performer " << format_double(m.performer_accuracy)
            << " explainer " << format_double(m.explainer_accuracy) << "\nwrote " << dir.string() << "\n";
  return 0;
}

int evaluate_checkpoint(const std::string& ckpt_path, const std::string& data_path, const std::string& split,
                        const std::string& out) {
  const Checkpoint c = load_checkpoint(ckpt_path);
  if (!c.explainer) throw std::runtime_error("checkpoint '" + ckpt_path + "' holds no explainer");
  const Dataset d = load_dataset(data_path);
  const Split& s = split == "train" ? d.train : d.eval;
  const MetricsReport m = evaluate(c.performer, c.bank, *c.explainer, s.images, s.labels, c.concept_subset);
  check_contribution_identity(m);
  const std::string text = to_json(m).dump(1) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text_file(out, text);
  }
  return 0;
}

int experiment(const std::string& path, const Overrides& o, bool sweep_only) {
  ExperimentConfig cfg = load_config(path, o);
  if (sweep_only && cfg.sweep_sizes.empty()) throw ConfigError("sweep needs a nonempty sweep_sizes list");
  const auto results = run_experiment(cfg, !sweep_only);
  const std::string dir = sweep_only && o.output.empty() ? (fs::path(cfg.output_dir) / "sweep").string() : cfg.output_dir;
  emit_report(cfg, results, dir);
  int failed = 0;
  for (const ReplicateResult& r : results) {
    if (!r.error) continue;
    ++failed;
    std::cerr << "replicate " << r.seed << " failed: " << *r.error << "\n";
  }
  std::cout << summary_csv(summarize_directory(dir)) << "wrote " << dir << "\n";
  return failed ? 3 : 0;
}

int report(const std::string& dir) {
  std::cout << summary_csv(summarize_directory(dir));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distill a frozen CNN into an additive concept explainer"};
  app.require_subcommand(1);

  std::string spec_path, out_path, config, ckpt, data, split = "eval", dir;
  Overrides over;
  std::uint64_t seed = 0;
  DistillFlags flags;
  std::string prior;
  double beta = 0.0;
  long epochs = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset from a spec file");
  gen->add_option("spec", spec_path, "Spec JSON")->required()->check(CLI::ExistingFile);
  gen->add_option("out", out_path, "Output dataset JSON")->required();

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("config", config, "Experiment config JSON")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--output", over.output, "Output directory (overrides the config)");
  };
  auto* pre = app.add_subcommand("pretrain", "Build the performer (and concept heads) and save a checkpoint");
  add_config(pre);
  auto* pre_seed = pre->add_option("--seed", seed, "Replicate seed (default: first in the config)");

  auto* dis = app.add_subcommand("distill", "Train one explainer and write checkpoint, metrics and curves");
  add_config(dis);
  auto* dis_seed = dis->add_option("--seed", seed, "Replicate seed (default: first in the config)");
  auto* dis_prior = dis->add_option("--prior", prior, "Prior loss")->check(CLI::IsMember({"ce", "l2", "none"}));
  auto* dis_beta = dis->add_option("--beta", beta, "Prior weight scale")->check(CLI::NonNegativeNumber);
  auto* dis_epochs = dis->add_option("--epochs", epochs, "Epoch count")->check(CLI::PositiveNumber);

  auto* eva = app.add_subcommand("evaluate", "Evaluate a checkpoint on a dataset file");
  eva->add_option("checkpoint", ckpt, "Checkpoint JSON")->required();
  eva->add_option("dataset", data, "Dataset JSON")->required();
  eva->add_option("--split", split, "Split to evaluate")->check(CLI::IsMember({"train", "eval"}));
  eva->add_option("-o,--output", out_path, "Write metrics JSON here instead of stdout");

  auto* swp = app.add_subcommand("sweep", "Run prior-guided explainers over random concept subsets");
  add_config(swp);
  auto* exp = app.add_subcommand("experiment", "Run baseline and prior-guided explainers for every replicate");
  add_config(exp);
  auto* rep = app.add_subcommand("report", "Summarize replicate_*/report.json files under a results directory");
  rep->add_option("dir", dir, "Results directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return gen_data(spec_path, out_path);
    if (pre->parsed()) {
      if (*pre_seed) over.seed = seed;
      return pretrain(config, over);
    }
    if (dis->parsed()) {
      if (*dis_seed) over.seed = seed;
      if (*dis_prior) flags.prior = prior;
      if (*dis_beta) flags.beta = beta;
      if (*dis_epochs) flags.epochs = epochs;
      return distill(config, over, flags);
    }
    if (eva->parsed()) return evaluate_checkpoint(ckpt, data, split, out_path);
    if (swp->parsed()) return experiment(config, over, true);
    if (exp->parsed()) return experiment(config, over, false);
    if (rep->parsed()) return report(dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
