#pragma once

// Experiment driver: prepare -> train -> evaluate -> report.
//
// Layout under the output directory:
//   manifest.json                  run manifest (config, checksum, stages)
//   splits.json                    train/test ids and labeled subsets
//   cells/nl<N>_rep<r>/            one (N_l, repetition) cell
//     state.json, state.bin        resumable training state
//     trace.csv                    loss trace
//     metrics.json                 written by evaluate
//   report/*.csv                   written by report
// Encoded features live in the cache directory (LSGAN_CACHE_DIR, default
// <output>/cache) keyed by dataset checksum, degree, scheme and split seed.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsgan/data.hpp"
#include "lsgan/errors.hpp"
#include "lsgan/metrics.hpp"
#include "lsgan/nnet.hpp"
#include "lsgan/rng.hpp"
#include "lsgan/ssgan.hpp"

namespace lsgan::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kCodeVersion = "lsgan 0.1.0";
inline constexpr const char* kModelName = "logsig_bssgan";
inline constexpr const char* kCacheEnv = "LSGAN_CACHE_DIR";

struct ExperimentConfig {
  std::string dataset;
  std::string output_dir = "runs";
  double test_fraction = 0.1;
  std::vector<std::size_t> n_labeled{2595, 3893, 5190, 12973, 25946};
  int repetitions = 5;
  int degree = 4;
  double subsample = 1.0;
  std::size_t heldout_size = 2000;
  int checkpoint_every = 10;
  std::uint64_t seed = 0;
  gan::TrainConfig train;
  metrics::HeadConfig head;
};

// ---------------------------------------------------------------------------
// Config (JSON)

inline json config_to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  json tj{{"lr_g", t.lr_g},
          {"lr_d", t.lr_d},
          {"batch", t.batch},
          {"lambda", t.lambda},
          {"gp_weight", t.gp_weight},
          {"n_critic", t.n_critic},
          {"epochs", t.epochs},
          {"chains_g", t.chains_g},
          {"chains_d", t.chains_d},
          {"friction", t.friction},
          {"thin", t.thin},
          {"latent_dim", t.latent_dim},
          {"num_classes", t.num_classes},
          {"optimizer", t.optimizer == gan::OptimizerKind::adam ? "adam" : "sghmc"},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},
          {"disc_projection", t.disc_widths.projection},
          {"disc_residual_blocks", t.disc_widths.residual_blocks},
          {"disc_tail", t.disc_widths.tail}};
  tj["burn_in"] = t.burn_in ? json(*t.burn_in) : json(nullptr);
  tj["noise_scale"] = t.noise_scale ? json(*t.noise_scale) : json(nullptr);
  tj["prior_weight"] = t.prior_weight ? json(*t.prior_weight) : json(nullptr);
  return {{"dataset", c.dataset},
          {"output_dir", c.output_dir},
          {"test_fraction", c.test_fraction},
          {"n_labeled", c.n_labeled},
          {"repetitions", c.repetitions},
          {"degree", c.degree},
          {"subsample", c.subsample},
          {"heldout_size", c.heldout_size},
          {"checkpoint_every", c.checkpoint_every},
          {"seed", c.seed},
          {"train", tj},
          {"head",
           {{"k_percents", c.head.k_percents},
            {"recall_levels", c.head.recall_levels},
            {"alpha", c.head.alpha},
            {"tau", c.head.tau}}}};
}

namespace detail {

template <class T>
void take(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

template <class T>
void take_optional(const json& j, const char* key, std::optional<T>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  take(j, key, v);
  out = v;
}

inline void reject_unknown(const json& j, const json& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ConfigError("unknown config key '" + where + it.key() + "'");
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  const json defaults = config_to_json(c);
  detail::reject_unknown(j, defaults, "");
  detail::take(j, "dataset", c.dataset);
  detail::take(j, "output_dir", c.output_dir);
  detail::take(j, "test_fraction", c.test_fraction);
  detail::take(j, "n_labeled", c.n_labeled);
  detail::take(j, "repetitions", c.repetitions);
  detail::take(j, "degree", c.degree);
  detail::take(j, "subsample", c.subsample);
  detail::take(j, "heldout_size", c.heldout_size);
  detail::take(j, "checkpoint_every", c.checkpoint_every);
  detail::take(j, "seed", c.seed);
  if (j.contains("train")) {
    const json& t = j.at("train");
    detail::reject_unknown(t, defaults.at("train"), "train.");
    auto& tc = c.train;
    detail::take(t, "lr_g", tc.lr_g);
    detail::take(t, "lr_d", tc.lr_d);
    detail::take(t, "batch", tc.batch);
    detail::take(t, "lambda", tc.lambda);
    detail::take(t, "gp_weight", tc.gp_weight);
    detail::take(t, "n_critic", tc.n_critic);
    detail::take(t, "epochs", tc.epochs);
    detail::take(t, "chains_g", tc.chains_g);
    detail::take(t, "chains_d", tc.chains_d);
    detail::take(t, "friction", tc.friction);
    detail::take(t, "thin", tc.thin);
    detail::take(t, "latent_dim", tc.latent_dim);
    detail::take(t, "num_classes", tc.num_classes);
    detail::take(t, "adam_beta1", tc.adam_beta1);
    detail::take(t, "adam_beta2", tc.adam_beta2);
    detail::take(t, "adam_eps", tc.adam_eps);
    detail::take(t, "disc_projection", tc.disc_widths.projection);
    detail::take(t, "disc_residual_blocks", tc.disc_widths.residual_blocks);
    detail::take(t, "disc_tail", tc.disc_widths.tail);
    detail::take_optional(t, "burn_in", tc.burn_in);
    detail::take_optional(t, "noise_scale", tc.noise_scale);
    detail::take_optional(t, "prior_weight", tc.prior_weight);
    std::string opt = "adam";
    detail::take(t, "optimizer", opt);
    if (opt == "adam") tc.optimizer = gan::OptimizerKind::adam;
    else if (opt == "sghmc") tc.optimizer = gan::OptimizerKind::sghmc;
    else throw ConfigError("optimizer must be 'adam' or 'sghmc', got '" + opt + "'");
  }
  if (j.contains("head")) {
    const json& h = j.at("head");
    detail::reject_unknown(h, defaults.at("head"), "head.");
    detail::take(h, "k_percents", c.head.k_percents);
    detail::take(h, "recall_levels", c.head.recall_levels);
    detail::take(h, "alpha", c.head.alpha);
    detail::take(h, "tau", c.head.tau);
  }
  return c;
}

inline void validate(const ExperimentConfig& c) {
  if (c.dataset.empty()) throw ConfigError("dataset path is not set");
  if (!(c.test_fraction > 0 && c.test_fraction < 1)) throw ConfigError("test_fraction must lie in (0, 1)");
  if (c.n_labeled.empty()) throw ConfigError("n_labeled must list at least one size");
  if (c.repetitions < 1) throw ConfigError("repetitions must be >= 1");
  if (c.degree < 1) throw ConfigError("degree must be >= 1");
  if (!(c.subsample > 0 && c.subsample <= 1)) throw ConfigError("subsample must lie in (0, 1]");
  if (c.checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  c.train.validate();
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + fs::absolute(path).string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// N_l at desk scale: proportional to the kept customer fraction.
inline std::size_t scaled_n_labeled(std::size_t n, double subsample) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(n) * subsample)));
}

// ---------------------------------------------------------------------------
// Files

inline void write_atomic(const fs::path& path, const std::string& contents, bool binary = false) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, binary ? std::ios::binary : std::ios::out);
    out << contents;
    if (!out) throw DataError("could not write " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline fs::path cache_dir(const ExperimentConfig& c) {
  if (const char* env = std::getenv(kCacheEnv); env && *env) return env;
  return fs::path(c.output_dir) / "cache";
}

inline fs::path cell_dir(const ExperimentConfig& c, std::size_t n_labeled, int rep) {
  return fs::path(c.output_dir) / "cells" / ("nl" + std::to_string(n_labeled) + "_rep" + std::to_string(rep));
}

class RunManifest {
 public:
  explicit RunManifest(fs::path path) : path_(std::move(path)) {
    if (fs::exists(path_)) doc_ = json::parse(read_text(path_));
    if (!doc_.contains("stages")) doc_["stages"] = json::object();
    doc_["code_version"] = kCodeVersion;
  }

  json& doc() { return doc_; }

  void record_stage(const std::string& name, double seconds, const std::vector<std::string>& artifacts,
                    json extra = json::object()) {
    extra["seconds"] = seconds;
    extra["artifacts"] = artifacts;
    doc_["stages"][name] = std::move(extra);
    write_atomic(path_, doc_.dump(2) + "\n");
  }

 private:
  fs::path path_;
  json doc_;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// Prepare

struct Prepared {
  std::string checksum;
  std::vector<data::CustomerSeries> customers;
  std::vector<data::SampleRef> samples;
  data::Split split;
  data::Maxima maxima;
  data::Vocabulary vocab;
  Eigen::MatrixXf features;  // one column per sample
  bool cache_hit = false;
  std::size_t records = 0;
  std::size_t fraud_records = 0;
};

inline Prepared load_prepared(const ExperimentConfig& cfg, bool allow_encode = true) {
  Prepared p;
  p.checksum = data::file_checksum(cfg.dataset);
  const auto txs = data::ingest_file(cfg.dataset);
  p.records = txs.size();
  for (const auto& t : txs) p.fraud_records += t.fraud;
  p.customers = data::subsample_customers(data::group_customers(txs), cfg.subsample, cfg.seed);
  p.samples = data::enumerate_samples(p.customers);
  if (p.samples.empty()) throw DataError("dataset yields no samples (no customer has 5 transactions)");
  p.split = data::stratified_split(p.samples, cfg.test_fraction, cfg.seed);
  p.maxima = data::training_maxima(p.customers, p.samples, p.split.train);
  p.vocab = data::build_vocabulary(p.customers);
  const data::FeatureStoreKey key{p.checksum, cfg.degree, sig::kAugmentationSchemeVersion, cfg.seed, cfg.subsample};
  if (auto cached = data::read_feature_store(cache_dir(cfg), key)) {
    if (cached->cols() != static_cast<Eigen::Index>(p.samples.size()))
      throw DataError("cached feature store does not match the sample count");
    p.features = std::move(*cached);
    p.cache_hit = true;
  } else {
    if (!allow_encode) throw DataError("feature store missing; run 'prepare' first");
    p.features = data::encode_samples(p.customers, p.samples, p.maxima, cfg.degree, cfg.train.workers);
    data::write_feature_store(cache_dir(cfg), key, p.features, p.maxima);
  }
  return p;
}

inline std::vector<data::LabeledSubset> labeled_subsets(const ExperimentConfig& cfg, const Prepared& p) {
  std::vector<data::LabeledSubset> out;
  for (auto n : cfg.n_labeled)
    for (int r = 0; r < cfg.repetitions; ++r)
      out.push_back(data::choose_labeled(p.samples, p.split, scaled_n_labeled(n, cfg.subsample), r, cfg.seed));
  return out;
}

struct PrepareSummary {
  std::size_t records = 0;
  std::size_t fraud_records = 0;
  std::size_t customers = 0;
  std::size_t fraud_customers = 0;
  std::size_t samples = 0;
  bool cache_hit = false;
};

inline PrepareSummary cmd_prepare(const ExperimentConfig& cfg) {
  validate(cfg);
  Stopwatch sw;
  const Prepared p = load_prepared(cfg);
  const auto subsets = labeled_subsets(cfg, p);
  const fs::path out(cfg.output_dir);
  write_atomic(out / "splits.json", data::split_manifest(p.split, subsets, cfg.seed).dump() + "\n");
  PrepareSummary s;
  s.records = p.records;
  s.fraud_records = p.fraud_records;
  s.customers = p.customers.size();
  for (const auto& c : p.customers)
    s.fraud_customers += std::any_of(c.tx.begin(), c.tx.end(), [](const auto& t) { return t.fraud; });
  s.samples = p.samples.size();
  s.cache_hit = p.cache_hit;
  RunManifest m(out / "manifest.json");
  m.doc()["config"] = config_to_json(cfg);
  m.doc()["dataset_checksum"] = p.checksum;
  m.doc()["seeds"] = {{"global", cfg.seed},
                      {"scheme", "splitmix64 over (seed, stage, chain, epoch, ...) tags"}};
  const data::FeatureStoreKey key{p.checksum, cfg.degree, sig::kAugmentationSchemeVersion, cfg.seed, cfg.subsample};
  m.record_stage("prepare", sw.seconds(),
                 {(out / "splits.json").string(), (cache_dir(cfg) / (key.stem() + ".bin")).string(),
                  (cache_dir(cfg) / (key.stem() + ".json")).string()},
                 {{"cache_hit", p.cache_hit},
                  {"records", s.records},
                  {"fraud_records", s.fraud_records},
                  {"customers", s.customers},
                  {"fraud_customers", s.fraud_customers},
                  {"samples", s.samples},
                  {"pr_auc_convention", "average precision (step)"}});
  return s;
}

// ---------------------------------------------------------------------------
// Train

inline gan::FeatMatrix gather_columns(const Eigen::MatrixXf& m, const std::vector<std::size_t>& idx) {
  gan::FeatMatrix out(m.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(static_cast<Eigen::Index>(idx[i]));
  return out;
}

inline std::vector<int> classes_of(const Prepared& p, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  for (auto i : idx) out.push_back(p.samples[i].fraud ? 2 : 1);
  return out;
}

struct CellData {
  data::LabeledSubset subset;
  data::CategoryRates rates;
  gan::TrainData train;
  std::size_t unseen_categories = 0;
};

inline CellData build_cell(const ExperimentConfig& cfg, const Prepared& p, std::size_t n_labeled, int rep) {
  CellData c;
  c.subset = data::choose_labeled(p.samples, p.split, scaled_n_labeled(n_labeled, cfg.subsample), rep, cfg.seed);
  c.rates = data::category_rates(p.customers, p.samples, c.subset.labeled);
  auto codes = [&](const std::vector<std::size_t>& idx) {
    return data::condition_codes(p.customers, p.samples, idx, c.rates, p.vocab, &c.unseen_categories);
  };
  auto& t = c.train;
  t.cardinalities = p.vocab.cardinalities();
  t.real_feats = gather_columns(p.features, p.split.train);
  t.real_codes = codes(p.split.train);
  t.labeled_feats = gather_columns(p.features, c.subset.labeled);
  t.labeled_codes = codes(c.subset.labeled);
  t.labeled_classes = classes_of(p, c.subset.labeled);
  if (cfg.heldout_size > 0 && !c.subset.unlabeled.empty()) {
    std::vector<std::size_t> held = c.subset.unlabeled;
    auto eng = rng::stream(cfg.seed, {rng::unlabel_stage, n_labeled, static_cast<std::uint64_t>(rep), 99});
    std::shuffle(held.begin(), held.end(), eng);
    held.resize(std::min(held.size(), cfg.heldout_size));
    std::sort(held.begin(), held.end());
    t.val_feats = gather_columns(p.features, held);
    t.val_codes = codes(held);
    t.val_classes = classes_of(p, held);
  }
  return c;
}

// Training state on disk: state.json (epoch, optimizer steps, ensemble
// index, trace) and state.bin (every ParamSet in a fixed order).
inline void save_state(const fs::path& dir, const gan::Trainer& trainer, const gan::TrainState& st) {
  json j;
  j["epoch"] = st.epoch;
  j["chains"] = json::array();
  for (std::size_t i = 0; i < st.gens.size(); ++i) j["chains"].push_back({{"kind", "g"}, {"index", i}, {"adam_step", st.gens[i].adam.step}});
  for (std::size_t i = 0; i < st.discs.size(); ++i) j["chains"].push_back({{"kind", "d"}, {"index", i}, {"adam_step", st.discs[i].adam.step}});
  j["ensemble"] = json::array();
  for (const auto& m : st.ensemble.members) j["ensemble"].push_back({{"chain", m.chain}, {"epoch", m.epoch}});
  j["trace"] = json::array();
  for (const auto& r : st.trace) j["trace"].push_back({r.epoch, r.chain, r.term, r.value});
  j["generator_tensors"] = nn::param_manifest(trainer.generator().zero_params());
  j["critic_tensors"] = nn::param_manifest(trainer.discriminator().zero_params());

  std::ostringstream bin(std::ios::binary);
  auto chain_out = [&](const gan::Chain& c) {
    nn::write_params(c.params, bin);
    nn::write_params(c.velocity, bin);
    nn::write_params(c.adam.m, bin);
    nn::write_params(c.adam.v, bin);
  };
  for (const auto& c : st.gens) chain_out(c);
  for (const auto& c : st.discs) chain_out(c);
  for (const auto& m : st.ensemble.members) nn::write_params(m.params, bin);
  write_atomic(dir / "state.bin", bin.str(), true);
  write_atomic(dir / "state.json", j.dump() + "\n");
}

inline std::optional<gan::TrainState> load_state(const fs::path& dir, const gan::Trainer& trainer) {
  if (!fs::exists(dir / "state.json") || !fs::exists(dir / "state.bin")) return std::nullopt;
  const json j = json::parse(read_text(dir / "state.json"));
  const json gman = nn::param_manifest(trainer.generator().zero_params());
  const json dman = nn::param_manifest(trainer.discriminator().zero_params());
  if (j.at("generator_tensors") != gman || j.at("critic_tensors") != dman)
    throw DataError("checkpoint in " + dir.string() + " does not match the configured networks");
  std::ifstream bin(dir / "state.bin", std::ios::binary);
  gan::TrainState st;
  st.epoch = j.at("epoch").get<int>();
  st.ensemble.disc_spec = trainer.discriminator().spec();
  for (const auto& c : j.at("chains")) {
    const bool is_gen = c.at("kind") == "g";
    const json& man = is_gen ? gman : dman;
    gan::Chain ch;
    ch.params = nn::read_params(man, bin);
    ch.velocity = nn::read_params(man, bin);
    ch.adam.m = nn::read_params(man, bin);
    ch.adam.v = nn::read_params(man, bin);
    ch.adam.step = c.at("adam_step").get<long>();
    (is_gen ? st.gens : st.discs).push_back(std::move(ch));
  }
  for (const auto& m : j.at("ensemble"))
    st.ensemble.members.push_back({m.at("chain").get<int>(), m.at("epoch").get<int>(), nn::read_params(dman, bin)});
  for (const auto& r : j.at("trace"))
    st.trace.push_back({r[0].get<int>(), r[1].get<std::string>(), r[2].get<std::string>(), r[3].get<double>()});
  return st;
}

struct TrainOutcome {
  gan::TrainResult result;
  bool resumed = false;
  int start_epoch = 0;
};

// Trains one cell, resuming from its checkpoint when present. stop_after
// (if set) interrupts after that epoch, leaving a checkpoint behind.
inline TrainOutcome cmd_train(const ExperimentConfig& cfg, const Prepared& p, std::size_t n_labeled, int rep,
                              std::optional<int> stop_after = std::nullopt) {
  validate(cfg);
  Stopwatch sw;
  const CellData cell = build_cell(cfg, p, n_labeled, rep);
  if (cell.unseen_categories > 0)
    std::cerr << "warning: " << cell.unseen_categories
              << " transactions fall in categories absent from the labeled subset; assigned the lowest risk level\n";
  const gan::Trainer trainer(cell.train, cfg.train);
  const fs::path dir = cell_dir(cfg, n_labeled, rep);
  TrainOutcome out;
  gan::TrainState st;
  if (auto loaded = load_state(dir, trainer)) {
    st = std::move(*loaded);
    out.resumed = true;
  } else {
    st = trainer.initial_state();
  }
  out.start_epoch = st.epoch;
  const int until = stop_after ? std::min(*stop_after, cfg.train.epochs) : cfg.train.epochs;
  try {
    trainer.run(st, until, [&](const gan::TrainState& s) {
      if (s.epoch % cfg.checkpoint_every == 0 || s.epoch == until) save_state(dir, trainer, s);
    });
  } catch (const DivergedChainError&) {
    write_atomic(dir / "trace.csv", gan::format_trace(st.trace));
    throw;
  }
  if (st.epoch == until) save_state(dir, trainer, st);
  write_atomic(dir / "trace.csv", gan::format_trace(st.trace));
  out.result = trainer.finish(st);
  if (st.epoch >= cfg.train.epochs) {
    RunManifest m(fs::path(cfg.output_dir) / "manifest.json");
    m.record_stage("train:" + dir.filename().string(), sw.seconds(),
                   {(dir / "state.json").string(), (dir / "state.bin").string(), (dir / "trace.csv").string()},
                   {{"resumed_from_epoch", out.start_epoch},
                    {"noise_scale", trainer.noise_scale()},
                    {"prior_weight", trainer.prior_weight()},
                    {"ensemble_size", out.result.ensemble.members.size()}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluate and report

inline gan::PosteriorEnsemble load_ensemble(const ExperimentConfig& cfg, const Prepared& p, std::size_t n_labeled,
                                            int rep) {
  const CellData cell = build_cell(cfg, p, n_labeled, rep);
  const gan::Trainer trainer(cell.train, cfg.train);
  auto st = load_state(cell_dir(cfg, n_labeled, rep), trainer);
  if (!st || st->epoch < cfg.train.epochs)
    throw DataError("no finished checkpoint for cell nl" + std::to_string(n_labeled) + "_rep" + std::to_string(rep));
  return trainer.finish(std::move(*st)).ensemble;
}

inline metrics::Scored score_test_split(const ExperimentConfig& cfg, const Prepared& p, std::size_t n_labeled,
                                        int rep, const gan::PosteriorEnsemble& ens) {
  const CellData cell = build_cell(cfg, p, n_labeled, rep);
  const auto feats = gather_columns(p.features, p.split.test);
  const auto codes = data::condition_codes(p.customers, p.samples, p.split.test, cell.rates, p.vocab);
  const auto preds = gan::predict(ens, feats, codes, cfg.train.num_classes);
  metrics::Scored s;
  for (std::size_t k = 0; k < p.split.test.size(); ++k) {
    const auto& ref = p.samples[p.split.test[k]];
    const double amount = p.customers[static_cast<std::size_t>(ref.customer)].tx[static_cast<std::size_t>(ref.length - 1)].amount;
    s.push_back({preds[k].mean, ref.fraud, amount, preds[k].width()});
  }
  return s;
}

struct EvaluateSummary {
  std::vector<metrics::MetricRow> rows;
  std::vector<std::string> missing;
};

inline json row_to_json(const metrics::MetricRow& r) {
  json v = json::array();
  for (const auto& [k, x] : r.values) v.push_back({k, std::isnan(x) ? json(nullptr) : json(x)});
  return {{"model", r.model}, {"n_labeled", r.n_labeled}, {"repetition", r.repetition}, {"values", v}};
}

inline metrics::MetricRow row_from_json(const json& j) {
  metrics::MetricRow r{j.at("model").get<std::string>(), j.at("n_labeled").get<int>(), j.at("repetition").get<int>(), {}};
  for (const auto& kv : j.at("values"))
    r.values.emplace_back(kv[0].get<std::string>(), kv[1].is_null() ? metrics::kNaN : kv[1].get<double>());
  return r;
}

inline EvaluateSummary cmd_evaluate(const ExperimentConfig& cfg, const Prepared& p) {
  validate(cfg);
  Stopwatch sw;
  EvaluateSummary out;
  std::vector<std::string> artifacts;
  for (auto n : cfg.n_labeled)
    for (int r = 0; r < cfg.repetitions; ++r) {
      const fs::path dir = cell_dir(cfg, n, r);
      gan::PosteriorEnsemble ens;
      try {
        ens = load_ensemble(cfg, p, n, r);
      } catch (const DataError&) {
        out.missing.push_back(dir.filename().string());
        continue;
      }
      const auto scored = score_test_split(cfg, p, n, r, ens);
      auto row = metrics::evaluate_cell(kModelName, static_cast<int>(n), r, scored, cfg.head);
      write_atomic(dir / "metrics.json", row_to_json(row).dump(2) + "\n");
      artifacts.push_back((dir / "metrics.json").string());
      out.rows.push_back(std::move(row));
    }
  if (out.rows.empty()) {
    std::string list;
    for (const auto& m : out.missing) list += " " + m;
    throw DataError("no trained cells to evaluate; absent:" + list);
  }
  RunManifest m(fs::path(cfg.output_dir) / "manifest.json");
  m.record_stage("evaluate", sw.seconds(), artifacts, {{"missing_cells", out.missing}});
  return out;
}

inline std::vector<std::string> cmd_report(const ExperimentConfig& cfg) {
  Stopwatch sw;
  std::vector<metrics::MetricRow> rows;
  for (auto n : cfg.n_labeled)
    for (int r = 0; r < cfg.repetitions; ++r) {
      const fs::path f = cell_dir(cfg, n, r) / "metrics.json";
      if (fs::exists(f)) rows.push_back(row_from_json(json::parse(read_text(f))));
    }
  if (rows.empty()) throw DataError("no evaluated cells; run 'evaluate' first");
  const fs::path dir = fs::path(cfg.output_dir) / "report";
  std::vector<std::string> written;
  for (const auto& [family, body] : metrics::family_tables(rows)) {
    write_atomic(dir / (family + ".csv"), body);
    written.push_back((dir / (family + ".csv")).string());
  }
  const auto agg = metrics::aggregate(rows, cfg.repetitions);
  write_atomic(dir / "aggregate.csv", metrics::aggregate_table(agg));
  write_atomic(dir / "cost_curve.csv", metrics::cost_curve_table(agg));
  written.push_back((dir / "aggregate.csv").string());
  written.push_back((dir / "cost_curve.csv").string());
  RunManifest m(fs::path(cfg.output_dir) / "manifest.json");
  m.record_stage("report", sw.seconds(), written);
  return written;
}

}  // namespace lsgan::pipeline
