#pragma once

// Dense network stack with explicit reverse-mode gradients.
//
// A network is: categorical embeddings (tanh applied to the looked-up
// column) concatenated below a "lead" input block (log-signature features or
// the latent vector), followed by a sequence of layers:
//
//   dense_tanh:    h = tanh(W a + b)
//   residual_tanh: h = a + tanh(W a + b)
//   tanh:          h = tanh(a)
//   linear:        h = W a + b
//
// Batches are column-major: one sample per column. Besides the usual
// parameter/input gradients, the stack supports the gradient of the
// input-gradient-norm penalty with respect to the parameters (reverse over
// reverse), which the gradient penalty of the critic needs.

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsgan/errors.hpp"

namespace lsgan::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using CodeMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;  // n_cat x batch

struct ParamTensor {
  std::string name;
  Matrix value;
  int fan_in = 0;
  int fan_out = 0;
};

// All weights of one network, in declaration order.
struct ParamSet {
  std::vector<ParamTensor> tensors;

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.value.size());
    return n;
  }

  ParamSet zeros_like() const {
    ParamSet z = *this;
    for (auto& t : z.tensors) t.value.setZero();
    return z;
  }

  bool same_layout(const ParamSet& o) const {
    if (tensors.size() != o.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].value.rows() != o.tensors[i].value.rows() ||
          tensors[i].value.cols() != o.tensors[i].value.cols())
        return false;
    return true;
  }

  void require_same_layout(const ParamSet& o) const {
    if (!same_layout(o)) throw ShapeError("parameter sets have different layouts");
  }

  // this += a * x
  void axpy(double a, const ParamSet& x) {
    require_same_layout(x);
    for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i].value += a * x.tensors[i].value;
  }

  void scale(double a) {
    for (auto& t : tensors) t.value *= a;
  }

  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.value.allFinite()) return false;
    return true;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& t : tensors) s += t.value.squaredNorm();
    return s;
  }

  // Flat view helpers for finite-difference tests and serialization.
  double& flat(std::size_t i) {
    for (auto& t : tensors) {
      const auto n = static_cast<std::size_t>(t.value.size());
      if (i < n) return t.value.data()[i];
      i -= n;
    }
    throw ShapeError("flat parameter index out of range");
  }
  double flat(std::size_t i) const { return const_cast<ParamSet*>(this)->flat(i); }
};

enum class LayerKind { dense_tanh, residual_tanh, tanh, linear };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::dense_tanh: return "dense_tanh";
    case LayerKind::residual_tanh: return "residual_tanh";
    case LayerKind::tanh: return "tanh";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind;
  int in = 0;
  int out = 0;

  bool has_params() const { return kind != LayerKind::tanh; }
  bool has_tanh() const { return kind != LayerKind::linear; }
};

struct NetSpec {
  int lead_dim = 0;
  std::vector<int> cardinalities;  // embedding output dim = cardinality
  std::vector<LayerSpec> layers;

  int embedding_dim() const {
    int s = 0;
    for (int c : cardinalities) s += c;
    return s;
  }
  int input_dim() const { return lead_dim + embedding_dim(); }
  int output_dim() const { return layers.empty() ? input_dim() : layers.back().out; }

  void validate() const {
    int width = input_dim();
    for (const auto& l : layers) {
      if (l.in != width)
        throw ShapeError(std::string("layer ") + to_string(l.kind) + " expects input " +
                         std::to_string(l.in) + ", got " + std::to_string(width));
      if ((l.kind == LayerKind::residual_tanh || l.kind == LayerKind::tanh) && l.in != l.out)
        throw ShapeError("residual/tanh layers must be square");
      width = l.out;
    }
  }
};

// Per-batch activations kept for the backward passes.
struct Cache {
  Matrix input;              // a_0
  std::vector<Matrix> act;   // act[k] = output of layer k
  std::vector<Matrix> tanh;  // tanh term of layer k (empty for linear)
};

class Network {
 public:
  Network() = default;
  explicit Network(NetSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    int idx = static_cast<int>(spec_.cardinalities.size());
    for (const auto& l : spec_.layers) {
      param_index_.push_back(l.has_params() ? idx : -1);
      if (l.has_params()) idx += 2;
    }
    tensor_count_ = idx;
  }

  const NetSpec& spec() const { return spec_; }

  // Zero-filled parameter set with the declared layout.
  ParamSet zero_params() const {
    ParamSet p;
    for (std::size_t c = 0; c < spec_.cardinalities.size(); ++c) {
      const int card = spec_.cardinalities[c];
      p.tensors.push_back({"embedding" + std::to_string(c), Matrix::Zero(card, card), card, card});
    }
    for (std::size_t k = 0; k < spec_.layers.size(); ++k) {
      const auto& l = spec_.layers[k];
      if (!l.has_params()) continue;
      const std::string base = "layer" + std::to_string(k) + "." + to_string(l.kind);
      p.tensors.push_back({base + ".weight", Matrix::Zero(l.out, l.in), l.in, l.out});
      p.tensors.push_back({base + ".bias", Matrix::Zero(l.out, 1), l.in, l.out});
    }
    return p;
  }

  void check_params(const ParamSet& p) const {
    if (static_cast<int>(p.tensors.size()) != tensor_count_)
      throw ShapeError("parameter set has " + std::to_string(p.tensors.size()) +
                       " tensors, network expects " + std::to_string(tensor_count_));
  }

  void check_inputs(const Matrix& lead, const CodeMatrix& codes) const {
    if (lead.rows() != spec_.lead_dim)
      throw ShapeError("lead input has " + std::to_string(lead.rows()) + " rows, expected " +
                       std::to_string(spec_.lead_dim));
    const auto ncat = static_cast<Eigen::Index>(spec_.cardinalities.size());
    if (codes.rows() != ncat || (ncat > 0 && codes.cols() != lead.cols()))
      throw ShapeError("condition codes must be " + std::to_string(ncat) + " x batch");
    for (Eigen::Index c = 0; c < ncat; ++c)
      for (Eigen::Index b = 0; b < codes.cols(); ++b) {
        const int v = codes(c, b);
        if (v < 0 || v >= spec_.cardinalities[c])
          throw InvalidConditionError("condition " + std::to_string(c) + " code " + std::to_string(v) +
                                      " outside [0, " + std::to_string(spec_.cardinalities[c]) + ")");
      }
  }

  Matrix forward(const ParamSet& p, const Matrix& lead, const CodeMatrix& codes,
                 Cache* cache = nullptr) const {
    check_params(p);
    check_inputs(lead, codes);
    const Eigen::Index B = lead.cols();
    Matrix a(spec_.input_dim(), B);
    a.topRows(spec_.lead_dim) = lead;
    int row = spec_.lead_dim;
    for (std::size_t c = 0; c < spec_.cardinalities.size(); ++c) {
      const int card = spec_.cardinalities[c];
      const Matrix& table = p.tensors[c].value;
      for (Eigen::Index b = 0; b < B; ++b)
        a.block(row, b, card, 1) = table.col(codes(c, b)).array().tanh();
      row += card;
    }
    if (cache) {
      cache->input = a;
      cache->act.assign(spec_.layers.size(), Matrix());
      cache->tanh.assign(spec_.layers.size(), Matrix());
    }
    for (std::size_t k = 0; k < spec_.layers.size(); ++k) {
      const auto& l = spec_.layers[k];
      Matrix h;
      Matrix t;
      switch (l.kind) {
        case LayerKind::linear:
          h = affine(p, k, a);
          break;
        case LayerKind::dense_tanh:
          h = affine(p, k, a).array().tanh();
          if (cache) t = h;
          break;
        case LayerKind::residual_tanh:
          t = affine(p, k, a).array().tanh();
          h = a + t;
          break;
        case LayerKind::tanh:
          h = a.array().tanh();
          if (cache) t = h;
          break;
      }
      if (cache) {
        cache->act[k] = h;
        cache->tanh[k] = std::move(t);
      }
      a = std::move(h);
    }
    return a;
  }

  // Reverse pass. out_adj is d(loss)/d(output); parameter gradients
  // (embedding tables included) are accumulated into grads when given.
  // Returns d(loss)/d(lead input).
  Matrix backward(const ParamSet& p, const Cache& cache, const CodeMatrix& codes,
                  const Matrix& out_adj, ParamSet* grads) const {
    Matrix delta = out_adj;
    for (std::size_t k = spec_.layers.size(); k-- > 0;) delta = backward_layer(p, cache, k, delta, grads);
    if (grads) accumulate_embeddings(*grads, cache, delta, &codes);
    return delta.topRows(spec_.lead_dim);
  }

  struct PenaltyResult {
    double penalty = 0.0;        // mean over batch of (|g| - 1)^2
    Vector grad_norms;           // |g| per sample
  };

  // Penalty on the gradient of head . output with respect to the lead input:
  //   P = mean_b (|d(head . f)/d lead_b| - 1)^2.
  // When grads is given, weight * dP/dtheta is accumulated into it.
  PenaltyResult input_gradient_penalty(const ParamSet& p, const Matrix& lead, const CodeMatrix& codes,
                                       const Vector& head, ParamSet* grads, double scale) const {
    Cache cache;
    forward(p, lead, codes, &cache);
    const Eigen::Index B = lead.cols();
    const std::size_t L = spec_.layers.size();
    if (head.size() != spec_.output_dim()) throw ShapeError("penalty head has wrong length");

    // First reverse pass, keeping the adjoint entering each layer from above.
    std::vector<Matrix> dh(L);
    std::vector<Matrix> dz(L);
    Matrix delta = head.replicate(1, B);
    for (std::size_t k = L; k-- > 0;) {
      dh[k] = delta;
      const auto& l = spec_.layers[k];
      if (l.has_tanh()) dz[k] = delta.array() * (1.0 - cache.tanh[k].array().square());
      switch (l.kind) {
        case LayerKind::linear: delta = weight(p, k).transpose() * delta; break;
        case LayerKind::dense_tanh: delta = weight(p, k).transpose() * dz[k]; break;
        case LayerKind::residual_tanh: delta = delta + weight(p, k).transpose() * dz[k]; break;
        case LayerKind::tanh: delta = dz[k]; break;
      }
    }
    const Matrix g = delta.topRows(spec_.lead_dim);

    PenaltyResult res;
    res.grad_norms = g.colwise().norm().transpose();
    res.penalty = (res.grad_norms.array() - 1.0).square().mean();
    if (!grads) return res;

    // Adjoint of the penalty with respect to g.
    Matrix rho = Matrix::Zero(spec_.input_dim(), B);
    for (Eigen::Index b = 0; b < B; ++b) {
      const double n = res.grad_norms(b);
      if (n > 0.0) rho.block(0, b, spec_.lead_dim, 1) = (2.0 / B) * (n - 1.0) / n * g.col(b);
    }

    // Reverse over the first reverse pass, bottom to top. inj[k] collects
    // the adjoint flowing into the forward tanh values of layer k.
    std::vector<Matrix> inj(L);
    for (std::size_t k = 0; k < L; ++k) {
      const auto& l = spec_.layers[k];
      switch (l.kind) {
        case LayerKind::linear: {
          accumulate_weight(grads, k, scale * dh[k], rho);
          rho = weight(p, k) * rho;
          break;
        }
        case LayerKind::dense_tanh: {
          Matrix rz = weight(p, k) * rho;
          accumulate_weight(grads, k, scale * dz[k], rho);
          inj[k] = -2.0 * rz.array() * dh[k].array() * cache.tanh[k].array();
          rho = rz.array() * (1.0 - cache.tanh[k].array().square());
          break;
        }
        case LayerKind::residual_tanh: {
          Matrix rz = weight(p, k) * rho;
          accumulate_weight(grads, k, scale * dz[k], rho);
          inj[k] = -2.0 * rz.array() * dh[k].array() * cache.tanh[k].array();
          rho = rho.array() + rz.array() * (1.0 - cache.tanh[k].array().square());
          break;
        }
        case LayerKind::tanh: {
          inj[k] = -2.0 * rho.array() * dh[k].array() * cache.tanh[k].array();
          rho = rho.array() * (1.0 - cache.tanh[k].array().square());
          break;
        }
      }
    }

    // Ordinary reverse pass driven by the injected adjoints.
    Matrix adj = Matrix::Zero(spec_.output_dim(), B);
    for (std::size_t k = L; k-- > 0;) {
      const auto& l = spec_.layers[k];
      const Matrix& a = layer_input(cache, k);
      switch (l.kind) {
        case LayerKind::linear:
          accumulate(grads, k, scale * adj, a);
          adj = weight(p, k).transpose() * adj;
          break;
        case LayerKind::dense_tanh: {
          Matrix az = (adj + inj[k]).array() * (1.0 - cache.tanh[k].array().square());
          accumulate(grads, k, scale * az, a);
          adj = weight(p, k).transpose() * az;
          break;
        }
        case LayerKind::residual_tanh: {
          Matrix az = (adj + inj[k]).array() * (1.0 - cache.tanh[k].array().square());
          accumulate(grads, k, scale * az, a);
          adj += weight(p, k).transpose() * az;
          break;
        }
        case LayerKind::tanh:
          adj = (adj + inj[k]).array() * (1.0 - cache.tanh[k].array().square());
          break;
      }
    }
    adj *= scale;
    accumulate_embeddings(*grads, cache, adj, &codes);
    return res;
  }

 private:
  const Matrix& weight(const ParamSet& p, std::size_t k) const {
    return p.tensors[static_cast<std::size_t>(param_index_[k])].value;
  }
  const Matrix& bias(const ParamSet& p, std::size_t k) const {
    return p.tensors[static_cast<std::size_t>(param_index_[k]) + 1].value;
  }
  Matrix affine(const ParamSet& p, std::size_t k, const Matrix& a) const {
    Matrix z = weight(p, k) * a;
    z.colwise() += bias(p, k).col(0);
    return z;
  }
  const Matrix& layer_input(const Cache& cache, std::size_t k) const {
    return k == 0 ? cache.input : cache.act[k - 1];
  }

  Matrix backward_layer(const ParamSet& p, const Cache& cache, std::size_t k, const Matrix& delta,
                        ParamSet* grads) const {
    const auto& l = spec_.layers[k];
    const Matrix& a = layer_input(cache, k);
    switch (l.kind) {
      case LayerKind::linear:
        accumulate(grads, k, delta, a);
        return weight(p, k).transpose() * delta;
      case LayerKind::dense_tanh: {
        Matrix dz = delta.array() * (1.0 - cache.tanh[k].array().square());
        accumulate(grads, k, dz, a);
        return weight(p, k).transpose() * dz;
      }
      case LayerKind::residual_tanh: {
        Matrix dz = delta.array() * (1.0 - cache.tanh[k].array().square());
        accumulate(grads, k, dz, a);
        return delta + weight(p, k).transpose() * dz;
      }
      case LayerKind::tanh:
        return delta.array() * (1.0 - cache.tanh[k].array().square());
    }
    return delta;
  }

  // dW += dz a^T, db += rowsum(dz)
  void accumulate(ParamSet* grads, std::size_t k, const Matrix& dz, const Matrix& a) const {
    if (!grads) return;
    const auto idx = static_cast<std::size_t>(param_index_[k]);
    grads->tensors[idx].value.noalias() += dz * a.transpose();
    grads->tensors[idx + 1].value.col(0) += dz.rowwise().sum();
  }
  void accumulate_weight(ParamSet* grads, std::size_t k, const Matrix& left, const Matrix& right) const {
    const auto idx = static_cast<std::size_t>(param_index_[k]);
    grads->tensors[idx].value.noalias() += left * right.transpose();
  }

  void accumulate_embeddings(ParamSet& grads, const Cache& cache, const Matrix& input_adj,
                             const CodeMatrix* codes) const {
    if (spec_.cardinalities.empty() || !codes) return;
    int row = spec_.lead_dim;
    for (std::size_t c = 0; c < spec_.cardinalities.size(); ++c) {
      const int card = spec_.cardinalities[c];
      Matrix& g = grads.tensors[c].value;
      for (Eigen::Index b = 0; b < input_adj.cols(); ++b) {
        auto e = cache.input.block(row, b, card, 1).array();
        g.col((*codes)(c, b)) += (input_adj.block(row, b, card, 1).array() * (1.0 - e.square())).matrix();
      }
      row += card;
    }
  }

  NetSpec spec_;
  std::vector<int> param_index_;
  int tensor_count_ = 0;
};

// ---------------------------------------------------------------------------
// Architectures

// Generator: [z; tanh(emb)] -> residual x blocks -> tanh -> linear(out_dim).
inline NetSpec generator_spec(int latent_dim, std::vector<int> cardinalities, int out_dim,
                              int residual_blocks = 2) {
  NetSpec s;
  s.lead_dim = latent_dim;
  s.cardinalities = std::move(cardinalities);
  const int w = s.input_dim();
  for (int i = 0; i < residual_blocks; ++i) s.layers.push_back({LayerKind::residual_tanh, w, w});
  s.layers.push_back({LayerKind::tanh, w, w});
  s.layers.push_back({LayerKind::linear, w, out_dim});
  return s;
}

struct DiscriminatorWidths {
  int projection = 128;
  int residual_blocks = 2;
  std::vector<int> tail{64, 32};
};

// Discriminator: [feat; tanh(emb)] -> dense_tanh(projection) -> residual
// blocks -> dense_tanh tail -> linear(K+1 raw scores). Score 0 is "generated".
inline NetSpec discriminator_spec(int feat_dim, std::vector<int> cardinalities, int num_classes,
                                  const DiscriminatorWidths& widths = {}) {
  NetSpec s;
  s.lead_dim = feat_dim;
  s.cardinalities = std::move(cardinalities);
  int w = s.input_dim();
  s.layers.push_back({LayerKind::dense_tanh, w, widths.projection});
  w = widths.projection;
  for (int i = 0; i < widths.residual_blocks; ++i) s.layers.push_back({LayerKind::residual_tanh, w, w});
  for (int t : widths.tail) {
    s.layers.push_back({LayerKind::dense_tanh, w, t});
    w = t;
  }
  s.layers.push_back({LayerKind::linear, w, num_classes + 1});
  return s;
}

// ---------------------------------------------------------------------------
// Heads

// R(x) = x + tanh(W x + b)
inline Vector residual_forward(const Vector& x, const Matrix& W, const Vector& b) {
  if (W.rows() != x.size() || W.cols() != x.size() || b.size() != x.size())
    throw ShapeError("residual layer shape mismatch");
  return x + (W * x + b).array().tanh().matrix();
}

// Fixed Lipschitz-1 readout: (1, -1, ..., -1) / sqrt(K+1).
inline Vector t_head_weights(int num_scores) {
  if (num_scores < 2) throw ShapeError("T head needs at least 2 scores");
  Vector w = Vector::Constant(num_scores, -1.0);
  w(0) = 1.0;
  return w / std::sqrt(static_cast<double>(num_scores));
}

inline double t_head(const Vector& scores) { return t_head_weights(static_cast<int>(scores.size())).dot(scores); }

// T applied to every column.
inline Vector t_head_batch(const Matrix& scores) {
  return (t_head_weights(static_cast<int>(scores.rows())).transpose() * scores).transpose();
}

// Softmax over classes 1..K, class 0 excluded. Rows of the result are
// classes 1..K.
inline Matrix restricted_softmax(const Matrix& scores) {
  if (scores.rows() < 2) throw ShapeError("restricted softmax needs K+1 >= 2 scores");
  const Eigen::Index K = scores.rows() - 1;
  Matrix out(K, scores.cols());
  for (Eigen::Index b = 0; b < scores.cols(); ++b) {
    auto s = scores.col(b).tail(K);
    const double mx = s.maxCoeff();
    Vector e = (s.array() - mx).exp();
    out.col(b) = e / e.sum();
  }
  return out;
}

inline Vector restricted_softmax(const Vector& scores) {
  return restricted_softmax(Matrix(scores)).col(0);
}

// ---------------------------------------------------------------------------
// Checkpoint format: JSON shape manifest + flat little-endian float64 stream.

inline nlohmann::json param_manifest(const ParamSet& p) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : p.tensors)
    tensors.push_back({{"name", t.name},
                       {"rows", t.value.rows()},
                       {"cols", t.value.cols()},
                       {"fan_in", t.fan_in},
                       {"fan_out", t.fan_out}});
  return {{"dtype", "float64"}, {"byte_order", "little"}, {"order", "column-major"}, {"tensors", tensors}};
}

namespace detail {
inline void write_f64(std::ostream& os, double v) {
  static_assert(sizeof(double) == 8);
  auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), 8);
}
inline double read_f64(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw DataError("parameter stream truncated");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}
}  // namespace detail

inline void write_params(const ParamSet& p, std::ostream& os) {
  for (const auto& t : p.tensors)
    for (Eigen::Index i = 0; i < t.value.size(); ++i) detail::write_f64(os, t.value.data()[i]);
}

inline ParamSet read_params(const nlohmann::json& manifest, std::istream& is) {
  ParamSet p;
  for (const auto& t : manifest.at("tensors")) {
    ParamTensor pt;
    pt.name = t.at("name").get<std::string>();
    pt.fan_in = t.value("fan_in", 0);
    pt.fan_out = t.value("fan_out", 0);
    pt.value.resize(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
    for (Eigen::Index i = 0; i < pt.value.size(); ++i) pt.value.data()[i] = detail::read_f64(is);
    p.tensors.push_back(std::move(pt));
  }
  return p;
}

// Writes <stem>.json and <stem>.bin.
inline void save_params(const ParamSet& p, const std::string& stem) {
  {
    std::ofstream js(stem + ".json");
    js << param_manifest(p).dump(2) << "\n";
    if (!js) throw DataError("cannot write " + stem + ".json");
  }
  std::ofstream bin(stem + ".bin", std::ios::binary);
  write_params(p, bin);
  if (!bin) throw DataError("cannot write " + stem + ".bin");
}

inline ParamSet load_params(const std::string& stem) {
  std::ifstream js(stem + ".json");
  if (!js) throw DataError("cannot open " + stem + ".json");
  const auto manifest = nlohmann::json::parse(js);
  std::ifstream bin(stem + ".bin", std::ios::binary);
  if (!bin) throw DataError("cannot open " + stem + ".bin");
  return read_params(manifest, bin);
}

}  // namespace lsgan::nn
