#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "lsgan/pipeline.hpp"

namespace {

using namespace lsgan;
using namespace lsgan::pipeline;

enum Exit { ok = 0, generic = 1, config_error = 2, data_error = 3, diverged = 4 };

struct Options {
  std::string config;
  std::string dataset;
  std::string output;
  std::optional<std::size_t> nl;
  std::optional<int> rep;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<double> subsample;
  std::optional<int> epochs;
};

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (!o.dataset.empty()) c.dataset = o.dataset;
  if (!o.output.empty()) c.output_dir = o.output;
  if (o.seed) c.seed = *o.seed;
  if (o.workers) c.train.workers = *o.workers;
  if (o.subsample) c.subsample = *o.subsample;
  if (o.epochs) c.train.epochs = *o.epochs;
  validate(c);
  return c;
}

void train_cells(const ExperimentConfig& cfg, const Options& o) {
  const Prepared p = load_prepared(cfg, false);
  const auto nls = o.nl ? std::vector<std::size_t>{*o.nl} : cfg.n_labeled;
  for (auto n : nls) {
    if (std::find(cfg.n_labeled.begin(), cfg.n_labeled.end(), n) == cfg.n_labeled.end())
      throw ConfigError("--nl " + std::to_string(n) + " is not one of the configured labeled sizes");
    for (int r = 0; r < cfg.repetitions; ++r) {
      if (o.rep && *o.rep != r) continue;
      const auto out = cmd_train(cfg, p, n, r);
      std::cout << "trained nl=" << n << " rep=" << r << (out.resumed ? " (resumed at epoch " + std::to_string(out.start_epoch) + ")" : "")
                << ": " << out.result.ensemble.members.size() << " ensemble members\n";
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised Bayesian GAN fraud scoring on log-signature features"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--dataset", o.dataset, "BankSim CSV (overrides the config)");
  app.add_option("--output", o.output, "output directory (overrides the config)");
  app.add_option("--seed", o.seed, "global seed");
  app.add_option("--workers", o.workers, "worker threads for chains and feature encoding");
  app.add_option("--subsample", o.subsample, "fraction of customers to keep (desk-scale runs)");
  app.add_option("--epochs", o.epochs, "training epochs (overrides the config)");

  auto* prepare = app.add_subcommand("prepare", "ingest, split and encode log-signature features");
  auto* train = app.add_subcommand("train", "train posterior chains for (N_l, repetition) cells");
  train->add_option("--nl", o.nl, "labeled size (one of the configured values)");
  train->add_option("--rep", o.rep, "repetition index");
  auto* evaluate = app.add_subcommand("evaluate", "score the test split with every trained ensemble");
  auto* report = app.add_subcommand("report", "write metric tables and aggregates");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? Exit::ok : Exit::config_error;
  }

  try {
    const ExperimentConfig cfg = resolve(o);
    if (prepare->parsed()) {
      const auto s = cmd_prepare(cfg);
      std::cout << "records " << s.records << " (fraud " << s.fraud_records << "), customers " << s.customers
                << " (with fraud " << s.fraud_customers << "), samples " << s.samples
                << (s.cache_hit ? ", feature cache hit" : ", features encoded") << "\n";
    } else if (train->parsed()) {
      train_cells(cfg, o);
    } else if (evaluate->parsed()) {
      const Prepared p = load_prepared(cfg, false);
      const auto s = cmd_evaluate(cfg, p);
      std::cout << "evaluated " << s.rows.size() << " cells";
      if (!s.missing.empty()) {
        std::cout << "; missing:";
        for (const auto& m : s.missing) std::cout << " " << m;
      }
      std::cout << "\n";
    } else if (report->parsed()) {
      for (const auto& f : cmd_report(cfg)) std::cout << f << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return Exit::config_error;
  } catch (const DivergedChainError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return Exit::diverged;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return Exit::data_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return Exit::generic;
  }
  return Exit::ok;
}
