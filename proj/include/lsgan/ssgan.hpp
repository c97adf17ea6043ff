#pragma once

// Bayesian semi-supervised conditional WGAN on log-signature features.
//
// The critic D maps (features, condition) to K+1 raw scores, score 0 meaning
// "generated". Its loss is
//   L_unlabeled + lambda * L_labeled + gp_weight * GP,
// with L_unlabeled = mean T(D(real)) - mean T(D(fake)) for the fixed
// Lipschitz-1 head T. The generator minimizes mean T(D(fake)).
//
// Posterior sampling: several chains per network, each advanced by an
// SGHMC-style step on the energy  loss + prior_weight * (-log p(theta))
// with a Glorot-variance Gaussian prior. After burn-in, critic states are
// collected at a fixed stride into a posterior ensemble whose predictive
// distribution gives the posterior-mean fraud probability and a 90% interval.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lsgan/errors.hpp"
#include "lsgan/nnet.hpp"
#include "lsgan/rng.hpp"

namespace lsgan::gan {

using nn::CodeMatrix;
using nn::Matrix;
using nn::Network;
using nn::ParamSet;
using nn::Vector;
using FeatMatrix = Eigen::MatrixXf;  // stored features, one sample per column

enum class OptimizerKind { adam, sghmc };

struct TrainConfig {
  double lr_g = 1e-4;
  double lr_d = 5e-3;
  int batch = 2048;
  double lambda = 10.0;     // labeled-loss scale
  double gp_weight = 10.0;
  int n_critic = 5;
  int epochs = 1000;
  int chains_g = 4;
  int chains_d = 4;
  double friction = 0.1;
  std::optional<int> burn_in;       // default epochs / 2
  int thin = 10;
  std::uint64_t seed = 0;
  int latent_dim = 64;
  int num_classes = 2;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::optional<double> noise_scale;   // default 1/sqrt(N_train)
  std::optional<double> prior_weight;  // default 1/N_train
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  nn::DiscriminatorWidths disc_widths;
  int workers = 1;

  int effective_burn_in() const { return burn_in.value_or(epochs / 2); }

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0)) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(lr_g, "lr_g");
    positive(lr_d, "lr_d");
    positive(batch, "batch");
    if (lambda < 0) throw ConfigError("lambda must be non-negative");
    if (gp_weight < 0) throw ConfigError("gp_weight must be non-negative");
    if (n_critic < 1) throw ConfigError("n_critic must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    positive(chains_g, "chains_g");
    positive(chains_d, "chains_d");
    if (!(friction > 0 && friction <= 1)) throw ConfigError("friction must lie in (0, 1]");
    if (effective_burn_in() < 0) throw ConfigError("burn_in must be non-negative");
    positive(thin, "thin");
    positive(latent_dim, "latent_dim");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (noise_scale && *noise_scale < 0) throw ConfigError("noise_scale must be non-negative");
    if (prior_weight && *prior_weight < 0) throw ConfigError("prior_weight must be non-negative");
    positive(workers, "workers");
  }
};

// ---------------------------------------------------------------------------
// Prior

struct GlorotPrior {
  double gain = 1.0;

  double variance(int fan_in, int fan_out) const {
    return gain * gain * 2.0 / static_cast<double>(fan_in + fan_out);
  }
  double variance(const nn::ParamTensor& t) const { return variance(t.fan_in, t.fan_out); }

  ParamSet sample(const Network& net, rng::Engine& eng) const {
    ParamSet p = net.zero_params();
    for (auto& t : p.tensors) {
      const double sd = std::sqrt(variance(t));
      for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = sd * rng::normal(eng);
    }
    return p;
  }

  // -log p(theta) up to the normalizing constant.
  double neg_log_density(const ParamSet& p) const {
    double s = 0.0;
    for (const auto& t : p.tensors) s += t.value.squaredNorm() / (2.0 * variance(t));
    return s;
  }

  // grads += scale * d(-log p)/d theta = scale * theta / sigma^2
  void add_gradient(const ParamSet& p, ParamSet& grads, double scale) const {
    for (std::size_t i = 0; i < p.tensors.size(); ++i)
      grads.tensors[i].value += (scale / variance(p.tensors[i])) * p.tensors[i].value;
  }
};

// ---------------------------------------------------------------------------
// Loss terms. Score matrices are (K+1) x batch; labels are class indices 1..K.

inline void require_nonempty(Eigen::Index n, const char* what) {
  if (n == 0) throw UndefinedLossError(std::string(what) + " is undefined on an empty batch");
}

inline double labeled_loss(const Matrix& scores, const std::vector<int>& labels) {
  require_nonempty(scores.cols(), "labeled loss");
  if (static_cast<Eigen::Index>(labels.size()) != scores.cols()) throw ShapeError("label count mismatch");
  const Eigen::Index K = scores.rows() - 1;
  double total = 0.0;
  for (Eigen::Index b = 0; b < scores.cols(); ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 1 || y > K) throw ShapeError("label " + std::to_string(y) + " outside 1..K");
    auto s = scores.col(b).tail(K);
    const double mx = s.maxCoeff();
    const double lse = mx + std::log((s.array() - mx).exp().sum());
    total += lse - scores(y, b);
  }
  return total / static_cast<double>(scores.cols());
}

// d(labeled_loss)/d(scores); row 0 is always zero.
inline Matrix labeled_loss_grad(const Matrix& scores, const std::vector<int>& labels) {
  require_nonempty(scores.cols(), "labeled loss");
  const Eigen::Index K = scores.rows() - 1;
  Matrix g = Matrix::Zero(scores.rows(), scores.cols());
  g.bottomRows(K) = nn::restricted_softmax(scores);
  for (Eigen::Index b = 0; b < scores.cols(); ++b) g(labels[static_cast<std::size_t>(b)], b) -= 1.0;
  return g / static_cast<double>(scores.cols());
}

inline double unlabeled_loss(const Matrix& real_scores, const Matrix& fake_scores) {
  require_nonempty(real_scores.cols(), "unlabeled loss");
  require_nonempty(fake_scores.cols(), "unlabeled loss");
  if (real_scores.cols() != fake_scores.cols()) throw ShapeError("real and fake batch sizes differ");
  return nn::t_head_batch(real_scores).mean() - nn::t_head_batch(fake_scores).mean();
}

inline double generator_loss(const Matrix& fake_scores) {
  require_nonempty(fake_scores.cols(), "generator loss");
  return nn::t_head_batch(fake_scores).mean();
}

// Convex combination eps * real + (1 - eps) * fake, one eps per column.
inline Matrix interpolate(const Matrix& real, const Matrix& fake, const Vector& eps) {
  if (real.rows() != fake.rows() || real.cols() != fake.cols() || eps.size() != real.cols())
    throw ShapeError("interpolation shape mismatch");
  Matrix out(real.rows(), real.cols());
  for (Eigen::Index b = 0; b < real.cols(); ++b)
    out.col(b) = eps(b) * real.col(b) + (1.0 - eps(b)) * fake.col(b);
  return out;
}

// mean_b (| grad_feat T(D(x_hat_b)) | - 1)^2 over interpolates in
// log-signature space. scale * dGP/dtheta is added to grads when given.
inline double gradient_penalty(const Network& disc, const ParamSet& params, const Matrix& real,
                               const Matrix& fake, const CodeMatrix& codes, const Vector& eps,
                               ParamSet* grads = nullptr, double scale = 1.0) {
  const Matrix xhat = interpolate(real, fake, eps);
  const Vector head = nn::t_head_weights(disc.spec().output_dim());
  return disc.input_gradient_penalty(params, xhat, codes, head, grads, scale).penalty;
}

struct DiscriminatorLossParts {
  double unlabeled = 0.0;
  double labeled = 0.0;
  double penalty = 0.0;
  double total = 0.0;
};

struct CriticBatch {
  Matrix real;            // features of the unlabeled real minibatch
  CodeMatrix real_codes;
  Matrix labeled;         // labeled minibatch
  CodeMatrix labeled_codes;
  std::vector<int> labels;
  Matrix fake;            // generated features (same codes as real)
  Vector eps;             // interpolation weights, one per real column
};

// Full critic loss for one generated batch; when grads is given the
// gradient of `weight * total` is accumulated.
inline DiscriminatorLossParts discriminator_loss(const Network& disc, const ParamSet& params,
                                                 const CriticBatch& batch, double lambda,
                                                 double gp_weight, ParamSet* grads = nullptr,
                                                 double weight = 1.0) {
  const Vector head = nn::t_head_weights(disc.spec().output_dim());
  DiscriminatorLossParts parts;
  nn::Cache real_cache, fake_cache, lab_cache;
  const Matrix real_scores = disc.forward(params, batch.real, batch.real_codes, &real_cache);
  const Matrix fake_scores = disc.forward(params, batch.fake, batch.real_codes, &fake_cache);
  parts.unlabeled = unlabeled_loss(real_scores, fake_scores);
  const bool has_labeled = batch.labeled.cols() > 0 && lambda != 0.0;
  Matrix lab_scores;
  if (has_labeled) {
    lab_scores = disc.forward(params, batch.labeled, batch.labeled_codes, &lab_cache);
    parts.labeled = labeled_loss(lab_scores, batch.labels);
  }
  if (gp_weight != 0.0)
    parts.penalty = gradient_penalty(disc, params, batch.real, batch.fake, batch.real_codes, batch.eps,
                                     grads, weight * gp_weight);
  parts.total = parts.unlabeled + lambda * parts.labeled + gp_weight * parts.penalty;
  if (grads) {
    const double nr = static_cast<double>(batch.real.cols());
    disc.backward(params, real_cache, batch.real_codes, head.replicate(1, batch.real.cols()) * (weight / nr),
                  grads);
    disc.backward(params, fake_cache, batch.real_codes, head.replicate(1, batch.fake.cols()) * (-weight / nr),
                  grads);
    if (has_labeled)
      disc.backward(params, lab_cache, batch.labeled_codes,
                    labeled_loss_grad(lab_scores, batch.labels) * (weight * lambda), grads);
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Samplers. `grad` is the gradient of the log posterior (ascent direction).

inline void require_finite_grad(const ParamSet& grad) {
  if (!grad.all_finite()) throw DivergedChainError("non-finite gradient");
}

// nu <- (1 - alpha) nu + eta * grad + N(0, 2 alpha eta noise_scale^2);
// theta <- theta + nu.
inline void sghmc_step(ParamSet& params, const ParamSet& grad, ParamSet& velocity, double alpha,
                       double eta, double noise_scale, rng::Engine& eng) {
  params.require_same_layout(grad);
  params.require_same_layout(velocity);
  require_finite_grad(grad);
  const double sd = noise_scale * std::sqrt(2.0 * alpha * eta);
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    double* th = params.tensors[t].value.data();
    double* nu = velocity.tensors[t].value.data();
    const double* g = grad.tensors[t].value.data();
    const Eigen::Index n = params.tensors[t].value.size();
    for (Eigen::Index i = 0; i < n; ++i) {
      double v = (1.0 - alpha) * nu[i] + eta * g[i];
      if (sd > 0.0) v += sd * rng::normal(eng);
      nu[i] = v;
      th[i] = th[i] + v;
    }
  }
}

struct AdamState {
  ParamSet m;
  ParamSet v;
  long step = 0;

  static AdamState fresh(const ParamSet& like) { return {like.zeros_like(), like.zeros_like(), 0}; }
};

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive step on the log-posterior gradient with Gaussian noise of
// variance 2 alpha eta noise_scale^2 added to the parameter increment.
inline void adam_sghmc_step(ParamSet& params, const ParamSet& grad, AdamState& state, double eta,
                            double alpha, double noise_scale, rng::Engine& eng,
                            const AdamSettings& s = {}) {
  params.require_same_layout(grad);
  require_finite_grad(grad);
  state.step += 1;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  const double sd = noise_scale * std::sqrt(2.0 * alpha * eta);
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    double* th = params.tensors[t].value.data();
    double* m = state.m.tensors[t].value.data();
    double* v = state.v.tensors[t].value.data();
    const double* g = grad.tensors[t].value.data();
    const Eigen::Index n = params.tensors[t].value.size();
    for (Eigen::Index i = 0; i < n; ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * (g[i] * g[i]);
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      double delta = eta * mhat / (std::sqrt(vhat) + s.eps);
      if (sd > 0.0) delta += sd * rng::normal(eng);
      th[i] = th[i] + delta;
    }
  }
}

// ---------------------------------------------------------------------------
// Training

struct Chain {
  ParamSet params;
  ParamSet velocity;  // sghmc
  AdamState adam;     // adam
};

struct EnsembleMember {
  int chain = 0;
  int epoch = 0;
  ParamSet params;
};

struct PosteriorEnsemble {
  nn::NetSpec disc_spec;
  std::vector<EnsembleMember> members;
};

struct TraceRow {
  int epoch;
  std::string chain;
  std::string term;
  double value;
};

inline std::string format_trace(const std::vector<TraceRow>& rows) {
  std::ostringstream os;
  os << "epoch,chain,term,value\n";
  os << std::setprecision(17);
  for (const auto& r : rows) os << r.epoch << "," << r.chain << "," << r.term << "," << r.value << "\n";
  return os.str();
}

// Immutable prepared data for one (N_l, repetition) cell.
struct TrainData {
  FeatMatrix real_feats;     // all training samples (labels hidden or not)
  CodeMatrix real_codes;
  FeatMatrix labeled_feats;
  CodeMatrix labeled_codes;
  std::vector<int> labeled_classes;  // 1..K
  // Optional held-out labeled slice, evaluated once per epoch.
  FeatMatrix val_feats;
  CodeMatrix val_codes;
  std::vector<int> val_classes;
  std::vector<int> cardinalities;

  Eigen::Index feat_dim() const { return real_feats.rows(); }
  Eigen::Index size() const { return real_feats.cols(); }
};

struct TrainState {
  int epoch = 0;  // completed epochs
  std::vector<Chain> gens;
  std::vector<Chain> discs;
  PosteriorEnsemble ensemble;
  std::vector<TraceRow> trace;
};

struct TrainResult {
  PosteriorEnsemble ensemble;
  std::vector<ParamSet> generators;
  std::vector<TraceRow> trace;
};

class Trainer {
 public:
  Trainer(const TrainData& data, TrainConfig cfg) : data_(data), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (data_.size() == 0) throw DataError("training set is empty");
    if (data_.labeled_feats.cols() != static_cast<Eigen::Index>(data_.labeled_classes.size()))
      throw ShapeError("labeled feature/label count mismatch");
    const int l = static_cast<int>(data_.feat_dim());
    gen_ = Network(nn::generator_spec(cfg_.latent_dim, data_.cardinalities, l));
    disc_ = Network(nn::discriminator_spec(l, data_.cardinalities, cfg_.num_classes, cfg_.disc_widths));
    const double n = static_cast<double>(data_.size());
    noise_scale_ = cfg_.noise_scale.value_or(1.0 / std::sqrt(n));
    prior_weight_ = cfg_.prior_weight.value_or(1.0 / n);
  }

  const Network& generator() const { return gen_; }
  const Network& discriminator() const { return disc_; }
  const TrainConfig& config() const { return cfg_; }
  double noise_scale() const { return noise_scale_; }
  double prior_weight() const { return prior_weight_; }

  // Prior draws for every chain; also the ensemble when epochs == 0.
  TrainState initial_state() const {
    TrainState st;
    st.ensemble.disc_spec = disc_.spec();
    for (int j = 0; j < cfg_.chains_g; ++j) st.gens.push_back(new_chain(gen_, 0, j));
    for (int j = 0; j < cfg_.chains_d; ++j) st.discs.push_back(new_chain(disc_, 1, j));
    return st;
  }

  // Runs epochs state.epoch+1 .. until_epoch. `on_epoch` (optional) is
  // called after each completed epoch, e.g. for checkpointing.
  void run(TrainState& st, int until_epoch,
           const std::function<void(const TrainState&)>& on_epoch = {}) const {
    for (int e = st.epoch + 1; e <= std::min(until_epoch, cfg_.epochs); ++e) {
      run_epoch(st, e);
      st.epoch = e;
      if (on_epoch) on_epoch(st);
    }
  }

  TrainResult finish(TrainState st) const {
    if (st.ensemble.members.empty())
      for (std::size_t j = 0; j < st.discs.size(); ++j)
        st.ensemble.members.push_back({static_cast<int>(j), st.epoch, st.discs[j].params});
    TrainResult r;
    r.ensemble = std::move(st.ensemble);
    for (auto& g : st.gens) r.generators.push_back(std::move(g.params));
    r.trace = std::move(st.trace);
    return r;
  }

  TrainResult train() const {
    TrainState st = initial_state();
    run(st, cfg_.epochs);
    return finish(std::move(st));
  }

  // Fraud-class probability per sample under each chain, averaged.
  double heldout_cross_entropy(const std::vector<Chain>& discs) const {
    const Eigen::Index n = data_.val_feats.cols();
    Matrix mean_probs = Matrix::Zero(cfg_.num_classes, n);
    const Matrix x = data_.val_feats.cast<double>();
    for (const auto& c : discs) mean_probs += nn::restricted_softmax(disc_.forward(c.params, x, data_.val_codes));
    mean_probs /= static_cast<double>(discs.size());
    double ce = 0.0;
    for (Eigen::Index b = 0; b < n; ++b) {
      const double p = std::clamp(mean_probs(data_.val_classes[b] - 1, b), 1e-7, 1.0 - 1e-7);
      ce -= std::log(p);
    }
    return ce / static_cast<double>(n);
  }

 private:
  Chain new_chain(const Network& net, std::uint64_t kind, int j) const {
    rng::Engine eng = rng::stream(cfg_.seed, {rng::init_stage, kind, static_cast<std::uint64_t>(j)});
    Chain c;
    c.params = GlorotPrior{}.sample(net, eng);
    c.velocity = c.params.zeros_like();
    c.adam = AdamState::fresh(c.params);
    return c;
  }

  void step(Chain& c, ParamSet& energy_grad, double lr, rng::Engine& eng) const {
    GlorotPrior{}.add_gradient(c.params, energy_grad, prior_weight_);
    energy_grad.scale(-1.0);  // log-posterior gradient
    if (cfg_.optimizer == OptimizerKind::adam)
      adam_sghmc_step(c.params, energy_grad, c.adam, lr, cfg_.friction, noise_scale_, eng,
                      {cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps});
    else
      sghmc_step(c.params, energy_grad, c.velocity, cfg_.friction, lr, noise_scale_, eng);
  }

  Matrix gather(const FeatMatrix& m, const std::vector<Eigen::Index>& idx) const {
    Matrix out(m.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(idx[i]).cast<double>();
    return out;
  }
  CodeMatrix gather(const CodeMatrix& m, const std::vector<Eigen::Index>& idx) const {
    CodeMatrix out(m.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(idx[i]);
    return out;
  }

  Matrix latent(Eigen::Index n, rng::Engine& eng) const {
    Matrix z(cfg_.latent_dim, n);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng::normal(eng);
    return z;
  }

  std::vector<Eigen::Index> real_indices(Eigen::Index n, rng::Engine& eng) const {
    std::uniform_int_distribution<Eigen::Index> u(0, data_.size() - 1);
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (auto& i : idx) i = u(eng);
    return idx;
  }

  // Labeled minibatch for critic step `s` of chain j: all labeled samples
  // when they fit in one batch, otherwise consecutive slices of a per-cycle
  // permutation (sampling without replacement within each pass).
  std::vector<Eigen::Index> labeled_indices(int j, long s) const {
    const Eigen::Index nl = data_.labeled_feats.cols();
    std::vector<Eigen::Index> idx;
    if (nl == 0) return idx;
    if (nl <= cfg_.batch) {
      idx.resize(static_cast<std::size_t>(nl));
      std::iota(idx.begin(), idx.end(), Eigen::Index{0});
      return idx;
    }
    const long per_cycle = static_cast<long>(nl / cfg_.batch);
    const long cycle = s / per_cycle;
    const long offset = (s % per_cycle) * cfg_.batch;
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(nl));
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    rng::Engine eng = rng::stream(cfg_.seed, {rng::labeled_perm_stage, static_cast<std::uint64_t>(j),
                                              static_cast<std::uint64_t>(cycle)});
    std::shuffle(perm.begin(), perm.end(), eng);
    idx.assign(perm.begin() + offset, perm.begin() + offset + cfg_.batch);
    return idx;
  }

  void diverged(int epoch, const std::string& chain, const std::vector<TraceRow>& trace,
                const std::string& why) const {
    std::ostringstream os;
    os << "chain " << chain << " diverged at epoch " << epoch << ": " << why << "; recent trace:";
    const std::size_t start = trace.size() > 8 ? trace.size() - 8 : 0;
    for (std::size_t i = start; i < trace.size(); ++i)
      os << " [" << trace[i].epoch << " " << trace[i].chain << " " << trace[i].term << "=" << trace[i].value << "]";
    throw DivergedChainError(os.str());
  }

  template <class F>
  void for_chains(int n, F&& f) const {
    if (cfg_.workers <= 1 || n <= 1) {
      for (int j = 0; j < n; ++j) f(j);
      return;
    }
    std::vector<std::future<void>> jobs;
    for (int j = 0; j < n; ++j) jobs.push_back(std::async(std::launch::async, [&f, j] { f(j); }));
    for (auto& job : jobs) job.get();
  }

  void run_epoch(TrainState& st, int e) const {
    const Vector head = nn::t_head_weights(cfg_.num_classes + 1);
    const auto ue = static_cast<std::uint64_t>(e);
    const std::vector<Chain> disc_snapshot = st.discs;
    const int ng = cfg_.batch;

    // Generator chains against every critic chain.
    std::vector<double> gen_loss(st.gens.size());
    for_chains(static_cast<int>(st.gens.size()), [&](int j) {
      rng::Engine eng = rng::stream(cfg_.seed, {rng::generator_stage, static_cast<std::uint64_t>(j), ue});
      const Matrix z = latent(ng, eng);
      const CodeMatrix codes = gather(data_.real_codes, real_indices(ng, eng));
      Chain& g = st.gens[j];
      nn::Cache gcache;
      const Matrix fake = gen_.forward(g.params, z, codes, &gcache);
      Matrix dfake = Matrix::Zero(fake.rows(), fake.cols());
      double loss = 0.0;
      for (const auto& d : disc_snapshot) {
        nn::Cache dcache;
        const Matrix scores = disc_.forward(d.params, fake, codes, &dcache);
        loss += generator_loss(scores);
        dfake += disc_.backward(d.params, dcache, codes, head.replicate(1, ng) / static_cast<double>(ng), nullptr);
      }
      ParamSet grad = g.params.zeros_like();
      gen_.backward(g.params, gcache, codes, dfake, &grad);
      gen_loss[j] = loss;
      rng::Engine noise = rng::stream(cfg_.seed, {rng::noise_stage, 0, static_cast<std::uint64_t>(j), ue});
      if (std::isfinite(loss)) step(g, grad, cfg_.lr_g, noise);
    });
    for (std::size_t j = 0; j < st.gens.size(); ++j) {
      st.trace.push_back({e, "g" + std::to_string(j), "generator", gen_loss[j]});
      if (!std::isfinite(gen_loss[j]) || !st.gens[j].params.all_finite())
        diverged(e, "g" + std::to_string(j), st.trace, "non-finite generator loss or parameters");
    }

    // Critic chains, n_critic steps each, against every generator chain.
    std::vector<DiscriminatorLossParts> parts(st.discs.size());
    std::vector<std::string> failure(st.discs.size());
    for_chains(static_cast<int>(st.discs.size()), [&](int j) {
      Chain& d = st.discs[j];
      DiscriminatorLossParts acc;
      for (int i = 1; i <= cfg_.n_critic; ++i) {
        rng::Engine eng = rng::stream(cfg_.seed, {rng::critic_stage, static_cast<std::uint64_t>(j), ue,
                                                  static_cast<std::uint64_t>(i)});
        CriticBatch batch;
        const auto ridx = real_indices(cfg_.batch, eng);
        batch.real = gather(data_.real_feats, ridx);
        batch.real_codes = gather(data_.real_codes, ridx);
        const long s = static_cast<long>(e - 1) * cfg_.n_critic + (i - 1);
        const auto lidx = labeled_indices(j, s);
        batch.labeled = gather(data_.labeled_feats, lidx);
        batch.labeled_codes = gather(data_.labeled_codes, lidx);
        for (auto k : lidx) batch.labels.push_back(data_.labeled_classes[static_cast<std::size_t>(k)]);
        const Matrix z = latent(cfg_.batch, eng);
        batch.eps.resize(cfg_.batch);
        for (Eigen::Index b = 0; b < batch.eps.size(); ++b) batch.eps(b) = rng::uniform01(eng);

        ParamSet grad = d.params.zeros_like();
        DiscriminatorLossParts step_parts;
        for (const auto& g : st.gens) {
          batch.fake = gen_.forward(g.params, z, batch.real_codes);
          auto p = discriminator_loss(disc_, d.params, batch, cfg_.lambda, cfg_.gp_weight, &grad);
          step_parts.unlabeled += p.unlabeled;
          step_parts.labeled += p.labeled;
          step_parts.penalty += p.penalty;
          step_parts.total += p.total;
        }
        const double inv = 1.0 / static_cast<double>(cfg_.n_critic);
        acc.unlabeled += step_parts.unlabeled * inv;
        acc.labeled += step_parts.labeled * inv;
        acc.penalty += step_parts.penalty * inv;
        acc.total += step_parts.total * inv;
        if (!std::isfinite(step_parts.total) || !grad.all_finite()) {
          failure[j] = "non-finite critic loss or gradient at critic step " + std::to_string(i);
          break;
        }
        rng::Engine noise = rng::stream(cfg_.seed, {rng::noise_stage, 1, static_cast<std::uint64_t>(j), ue,
                                                    static_cast<std::uint64_t>(i)});
        step(d, grad, cfg_.lr_d, noise);
      }
      parts[j] = acc;
    });
    for (std::size_t j = 0; j < st.discs.size(); ++j) {
      const std::string name = "d" + std::to_string(j);
      st.trace.push_back({e, name, "unlabeled", parts[j].unlabeled});
      st.trace.push_back({e, name, "labeled", parts[j].labeled});
      st.trace.push_back({e, name, "penalty", parts[j].penalty});
      st.trace.push_back({e, name, "total", parts[j].total});
      if (!failure[j].empty()) diverged(e, name, st.trace, failure[j]);
      if (!st.discs[j].params.all_finite()) diverged(e, name, st.trace, "non-finite parameters");
    }
    if (data_.val_feats.cols() > 0)
      st.trace.push_back({e, "all", "heldout_ce", heldout_cross_entropy(st.discs)});

    const int burn = cfg_.effective_burn_in();
    if (e > burn && (e - burn) % cfg_.thin == 0)
      for (std::size_t j = 0; j < st.discs.size(); ++j)
        st.ensemble.members.push_back({static_cast<int>(j), e, st.discs[j].params});
  }

  const TrainData& data_;
  TrainConfig cfg_;
  Network gen_;
  Network disc_;
  double noise_scale_ = 0.0;
  double prior_weight_ = 0.0;
};

// ---------------------------------------------------------------------------
// Prediction

struct Prediction {
  double mean = 0.0;  // posterior-mean fraud probability
  double q05 = 0.0;
  double q95 = 0.0;
  double width() const { return q95 - q05; }
};

// Empirical quantile with linear interpolation between order statistics.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw EmptyEnsembleError("quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline Prediction summarize(std::vector<double> probs) {
  if (probs.empty()) throw EmptyEnsembleError("no ensemble members to summarize");
  Prediction p;
  p.mean = std::accumulate(probs.begin(), probs.end(), 0.0) / static_cast<double>(probs.size());
  std::sort(probs.begin(), probs.end());
  p.q05 = quantile_sorted(probs, 0.05);
  p.q95 = quantile_sorted(probs, 0.95);
  return p;
}

// Probability of class `target` (1..K) under every member: members x samples.
inline Matrix member_probabilities(const PosteriorEnsemble& ens, const FeatMatrix& feats,
                                   const CodeMatrix& codes, int target, Eigen::Index chunk = 4096) {
  if (ens.members.empty()) throw EmptyEnsembleError("posterior ensemble is empty");
  const Network disc(ens.disc_spec);
  const Eigen::Index n = feats.cols();
  Matrix probs(static_cast<Eigen::Index>(ens.members.size()), n);
  for (Eigen::Index start = 0; start < n; start += chunk) {
    const Eigen::Index len = std::min(chunk, n - start);
    const Matrix x = feats.middleCols(start, len).cast<double>();
    const CodeMatrix c = codes.middleCols(start, len);
    for (std::size_t m = 0; m < ens.members.size(); ++m) {
      const Matrix p = nn::restricted_softmax(disc.forward(ens.members[m].params, x, c));
      probs.block(static_cast<Eigen::Index>(m), start, 1, len) = p.row(target - 1);
    }
  }
  return probs;
}

inline std::vector<Prediction> predict(const PosteriorEnsemble& ens, const FeatMatrix& feats,
                                       const CodeMatrix& codes, int fraud_class = 2) {
  const Matrix probs = member_probabilities(ens, feats, codes, fraud_class);
  std::vector<Prediction> out;
  out.reserve(static_cast<std::size_t>(feats.cols()));
  for (Eigen::Index b = 0; b < probs.cols(); ++b) {
    std::vector<double> col(probs.col(b).data(), probs.col(b).data() + probs.rows());
    out.push_back(summarize(std::move(col)));
  }
  return out;
}

}  // namespace lsgan::gan
