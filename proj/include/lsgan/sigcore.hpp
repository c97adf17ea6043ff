#pragma once

// Truncated path signatures and log-signatures of piecewise-linear paths.
//
// A path with D channels is lifted into the truncated tensor algebra
// T^M(R^D); level m holds D^m coefficients indexed by words over {0..D-1}
// written as base-D numbers (first letter most significant). The signature
// of a linear segment is the truncated tensor exponential of its increment,
// and Chen's identity glues segments together. Log-signature coordinates are
// the coefficients of the tensor logarithm at Lyndon-word indices.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lsgan/errors.hpp"

namespace lsgan::sig {

// Row-major list of points in R^dim. The tag keeps raw and augmented paths
// from being mixed up at call sites.
template <class Tag>
class BasicPath {
 public:
  BasicPath() = default;
  BasicPath(std::size_t dim, std::vector<double> values) : dim_(dim), values_(std::move(values)) {
    if (dim_ == 0) throw InvalidPathError("path channel count must be >= 1");
    if (values_.size() % dim_ != 0)
      throw ShapeError("path value count " + std::to_string(values_.size()) +
                       " is not a multiple of dim " + std::to_string(dim_));
  }

  static BasicPath from_points(const std::vector<std::vector<double>>& pts) {
    if (pts.empty()) throw InvalidPathError("path has no points");
    const std::size_t d = pts.front().size();
    std::vector<double> flat;
    flat.reserve(pts.size() * d);
    for (const auto& p : pts) {
      if (p.size() != d) throw ShapeError("ragged path points");
      flat.insert(flat.end(), p.begin(), p.end());
    }
    return BasicPath(d, std::move(flat));
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return dim_ == 0 ? 0 : values_.size() / dim_; }
  std::span<const double> point(std::size_t i) const {
    return {values_.data() + i * dim_, dim_};
  }
  double at(std::size_t i, std::size_t c) const { return values_[i * dim_ + c]; }
  const std::vector<double>& values() const { return values_; }

  void push_back(std::span<const double> p) {
    if (p.size() != dim_) throw ShapeError("point dimension mismatch");
    values_.insert(values_.end(), p.begin(), p.end());
  }

 private:
  std::size_t dim_ = 0;
  std::vector<double> values_;
};

struct RawTag {};
struct AugmentedTag {};
using RawPath = BasicPath<RawTag>;
using AugmentedPath = BasicPath<AugmentedTag>;

inline std::size_t ipow(std::size_t base, int exp) {
  std::size_t r = 1;
  for (int i = 0; i < exp; ++i) r *= base;
  return r;
}

// Truncated tensor-algebra element. levels[0] is the scalar term.
class TensorSeries {
 public:
  TensorSeries() = default;
  TensorSeries(std::size_t alphabet, int degree) : alphabet_(alphabet), degree_(degree) {
    if (degree < 1) throw InvalidDegreeError("truncation degree must be >= 1, got " + std::to_string(degree));
    if (alphabet < 1) throw ShapeError("alphabet size must be >= 1");
    levels_.resize(static_cast<std::size_t>(degree) + 1);
    for (int m = 0; m <= degree; ++m) levels_[m].assign(ipow(alphabet, m), 0.0);
  }

  static TensorSeries zero(std::size_t alphabet, int degree) { return {alphabet, degree}; }
  static TensorSeries identity(std::size_t alphabet, int degree) {
    TensorSeries t(alphabet, degree);
    t.levels_[0][0] = 1.0;
    return t;
  }

  std::size_t alphabet() const { return alphabet_; }
  int degree() const { return degree_; }
  std::vector<double>& level(int m) { return levels_[m]; }
  const std::vector<double>& level(int m) const { return levels_[m]; }
  double scalar() const { return levels_[0][0]; }

  // Coefficient of a word given as a list of letters.
  double coeff(std::span<const int> word) const {
    std::size_t idx = 0;
    for (int l : word) idx = idx * alphabet_ + static_cast<std::size_t>(l);
    return levels_[word.size()][idx];
  }

  bool same_shape(const TensorSeries& o) const {
    return alphabet_ == o.alphabet_ && degree_ == o.degree_;
  }

  TensorSeries& operator+=(const TensorSeries& o) {
    require_same_shape(o);
    for (int m = 0; m <= degree_; ++m)
      for (std::size_t i = 0; i < levels_[m].size(); ++i) levels_[m][i] += o.levels_[m][i];
    return *this;
  }
  TensorSeries& operator-=(const TensorSeries& o) {
    require_same_shape(o);
    for (int m = 0; m <= degree_; ++m)
      for (std::size_t i = 0; i < levels_[m].size(); ++i) levels_[m][i] -= o.levels_[m][i];
    return *this;
  }
  TensorSeries& operator*=(double s) {
    for (auto& l : levels_)
      for (auto& v : l) v *= s;
    return *this;
  }

  // Largest absolute coefficient difference, for tests and diagnostics.
  double max_abs_diff(const TensorSeries& o) const {
    require_same_shape(o);
    double r = 0.0;
    for (int m = 0; m <= degree_; ++m)
      for (std::size_t i = 0; i < levels_[m].size(); ++i)
        r = std::max(r, std::abs(levels_[m][i] - o.levels_[m][i]));
    return r;
  }

  void require_same_shape(const TensorSeries& o) const {
    if (!same_shape(o))
      throw ShapeError("tensor series shape mismatch: (D=" + std::to_string(alphabet_) + ", M=" +
                       std::to_string(degree_) + ") vs (D=" + std::to_string(o.alphabet_) +
                       ", M=" + std::to_string(o.degree_) + ")");
  }

 private:
  std::size_t alphabet_ = 0;
  int degree_ = 0;
  std::vector<std::vector<double>> levels_;
};

// ---------------------------------------------------------------------------
// Augmentations

constexpr int kAugmentationSchemeVersion = 1;

inline void require_valid(const RawPath& path) {
  if (path.size() < 2)
    throw InvalidPathError("path needs at least 2 points, got " + std::to_string(path.size()));
  for (double v : path.values())
    if (!std::isfinite(v)) throw InvalidPathError("path contains a non-finite value");
}

// Prepends t_i = i/(n-1).
inline RawPath time_augment(const RawPath& path) {
  require_valid(path);
  const std::size_t n = path.size(), d = path.dim();
  std::vector<double> out;
  out.reserve(n * (d + 1));
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(static_cast<double>(i) / static_cast<double>(n - 1));
    auto p = path.point(i);
    out.insert(out.end(), p.begin(), p.end());
  }
  return RawPath(d + 1, std::move(out));
}

// (p1,p1), (p2,p1), (p2,p2), ..., (pn,pn): lead half first, lag half second.
inline RawPath lead_lag(const RawPath& path) {
  require_valid(path);
  const std::size_t n = path.size(), d = path.dim();
  std::vector<double> out;
  out.reserve((2 * n - 1) * 2 * d);
  auto emit = [&](std::size_t lead, std::size_t lag) {
    auto a = path.point(lead);
    auto b = path.point(lag);
    out.insert(out.end(), a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
  };
  emit(0, 0);
  for (std::size_t i = 1; i < n; ++i) {
    emit(i, i - 1);
    emit(i, i);
  }
  return RawPath(2 * d, std::move(out));
}

// Appends a visibility channel (1 on every original point), prepends the
// first point with visibility 0, then appends (last point, 0) and the origin.
inline AugmentedPath invisibility_reset(const RawPath& path) {
  require_valid(path);
  const std::size_t n = path.size(), d = path.dim();
  std::vector<double> out;
  out.reserve((n + 3) * (d + 1));
  auto emit = [&](std::span<const double> p, double vis) {
    out.insert(out.end(), p.begin(), p.end());
    out.push_back(vis);
  };
  emit(path.point(0), 0.0);
  for (std::size_t i = 0; i < n; ++i) emit(path.point(i), 1.0);
  emit(path.point(n - 1), 0.0);
  out.insert(out.end(), d + 1, 0.0);
  return AugmentedPath(d + 1, std::move(out));
}

// time -> lead-lag -> invisibility-reset; d channels become 2d+3.
inline AugmentedPath augment(const RawPath& path) {
  return invisibility_reset(lead_lag(time_augment(path)));
}

inline std::size_t augmented_dim(std::size_t raw_dim) { return 2 * raw_dim + 3; }
inline std::size_t augmented_size(std::size_t raw_points) { return 2 * raw_points + 2; }

// ---------------------------------------------------------------------------
// Tensor algebra

// Truncated product: level m = sum_{i+j=m} a_i (x) b_j.
inline TensorSeries chen_product(const TensorSeries& a, const TensorSeries& b) {
  a.require_same_shape(b);
  const int M = a.degree();
  TensorSeries out(a.alphabet(), M);
  for (int m = 0; m <= M; ++m) {
    auto& dst = out.level(m);
    for (int i = 0; i <= m; ++i) {
      const auto& la = a.level(i);
      const auto& lb = b.level(m - i);
      const std::size_t nb = lb.size();
      for (std::size_t x = 0; x < la.size(); ++x) {
        const double ax = la[x];
        if (ax == 0.0) continue;
        double* row = dst.data() + x * nb;
        for (std::size_t y = 0; y < nb; ++y) row[y] += ax * lb[y];
      }
    }
  }
  return out;
}

inline void require_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw InvalidPathError(std::string(what) + " contains a non-finite value");
}

// exp of a single letter-series: level m = increment^{(x)m} / m!.
inline TensorSeries segment_signature(std::span<const double> increment, int degree) {
  if (degree < 1) throw InvalidDegreeError("truncation degree must be >= 1, got " + std::to_string(degree));
  require_finite(increment, "increment");
  const std::size_t D = increment.size();
  TensorSeries s = TensorSeries::identity(D, degree);
  for (int m = 1; m <= degree; ++m) {
    const auto& prev = s.level(m - 1);
    auto& cur = s.level(m);
    const double inv = 1.0 / m;
    for (std::size_t x = 0; x < prev.size(); ++x)
      for (std::size_t y = 0; y < D; ++y) cur[x * D + y] = prev[x] * increment[y] * inv;
  }
  return s;
}

// In-place s <- s (x) exp(increment), by Horner's rule per level:
// new_m = ((s_0 D/m + s_1) D/(m-1) + ... + s_{m-1}) D/1 + s_m.
// Levels are updated from the top down so lower levels are still old.
// scratch must hold at least D^M doubles twice.
inline void extend_by_segment(TensorSeries& s, std::span<const double> inc,
                              std::vector<double>& scratch) {
  const std::size_t D = s.alphabet();
  const int M = s.degree();
  const std::size_t top = ipow(D, M);
  if (scratch.size() < 2 * top) scratch.resize(2 * top);
  double* cur = scratch.data();
  double* nxt = scratch.data() + top;
  for (int m = M; m >= 1; --m) {
    // cur <- s_0 * inc / m  (level 1)
    const double s0 = s.level(0)[0];
    std::size_t len = D;
    for (std::size_t y = 0; y < D; ++y) cur[y] = s0 * inc[y] / m;
    for (int i = 1; i < m; ++i) {
      const auto& si = s.level(i);
      const double c = 1.0 / (m - i);
      for (std::size_t x = 0; x < len; ++x) {
        const double v = (cur[x] + si[x]) * c;
        double* row = nxt + x * D;
        for (std::size_t y = 0; y < D; ++y) row[y] = v * inc[y];
      }
      len *= D;
      std::swap(cur, nxt);
    }
    auto& sm = s.level(m);
    for (std::size_t x = 0; x < len; ++x) sm[x] += cur[x];
  }
}

inline TensorSeries path_signature(const AugmentedPath& path, int degree) {
  if (degree < 1) throw InvalidDegreeError("truncation degree must be >= 1, got " + std::to_string(degree));
  if (path.size() < 2)
    throw InvalidPathError("path needs at least 2 points, got " + std::to_string(path.size()));
  require_finite(path.values(), "path");
  const std::size_t D = path.dim();
  TensorSeries s = TensorSeries::identity(D, degree);
  std::vector<double> inc(D), scratch;
  for (std::size_t i = 1; i < path.size(); ++i) {
    auto a = path.point(i - 1);
    auto b = path.point(i);
    bool zero = true;
    for (std::size_t c = 0; c < D; ++c) {
      inc[c] = b[c] - a[c];
      zero = zero && inc[c] == 0.0;
    }
    if (zero) continue;
    extend_by_segment(s, inc, scratch);
  }
  return s;
}

// exp(x) for x with zero scalar term: 1 + x(1 + x/2(1 + x/3(...))).
inline TensorSeries tensor_exp(const TensorSeries& x) {
  const int M = x.degree();
  TensorSeries r = TensorSeries::identity(x.alphabet(), M);
  for (int n = M; n >= 1; --n) {
    r = chen_product(x, r);
    r *= 1.0 / n;
    r.level(0)[0] += 1.0;
  }
  return r;
}

// log(1+t) = sum_{n>=1} (-1)^{n-1} t^n / n, via r_M = 1/M, r_n = 1/n - t r_{n+1},
// log = t r_1.
inline TensorSeries tensor_log(const TensorSeries& s) {
  constexpr double tol = 1e-12;
  if (std::abs(s.scalar() - 1.0) > tol)
    throw InvalidGroupElementError("tensor_log needs scalar term 1, got " + std::to_string(s.scalar()));
  const int M = s.degree();
  TensorSeries t = s;
  t.level(0)[0] = 0.0;
  TensorSeries r = TensorSeries::zero(s.alphabet(), M);
  r.level(0)[0] = 1.0 / M;
  for (int n = M - 1; n >= 1; --n) {
    TensorSeries tr = chen_product(t, r);
    tr *= -1.0;
    tr.level(0)[0] += 1.0 / n;
    r = std::move(tr);
  }
  return chen_product(t, r);
}

// ---------------------------------------------------------------------------
// Lyndon words

using Word = std::vector<int>;

// Moebius function by trial division.
inline int moebius(int n) {
  int result = 1;
  for (int p = 2; p * p <= n; ++p) {
    if (n % p == 0) {
      n /= p;
      if (n % p == 0) return 0;
      result = -result;
    }
  }
  if (n > 1) result = -result;
  return result;
}

// Number of Lyndon words of exactly length k over an alphabet of size D.
inline std::size_t witt_count_level(std::size_t D, int k) {
  long long sum = 0;
  for (int e = 1; e <= k; ++e)
    if (k % e == 0) sum += moebius(e) * static_cast<long long>(ipow(D, k / e));
  return static_cast<std::size_t>(sum / k);
}

inline std::size_t witt_count(std::size_t D, int M) {
  std::size_t total = 0;
  for (int k = 1; k <= M; ++k) total += witt_count_level(D, k);
  return total;
}

class LyndonBasis {
 public:
  LyndonBasis() = default;
  LyndonBasis(std::size_t alphabet, int degree) : alphabet_(alphabet), degree_(degree) {
    if (degree < 1) throw InvalidDegreeError("basis degree must be >= 1");
    if (alphabet < 1) throw ShapeError("alphabet size must be >= 1");
    generate();
  }

  std::size_t alphabet() const { return alphabet_; }
  int degree() const { return degree_; }
  std::size_t size() const { return words_.size(); }
  const std::vector<Word>& words() const { return words_; }
  // Flat index of each word inside its tensor level.
  const std::vector<std::size_t>& level_index() const { return index_; }

 private:
  // Duval's algorithm yields all Lyndon words of length <= M in lexicographic
  // order; a stable sort by length then gives length-major order.
  void generate() {
    const int D = static_cast<int>(alphabet_);
    Word w{-1};
    while (!w.empty()) {
      ++w.back();
      if (w.back() >= D) {
        w.pop_back();
        continue;
      }
      words_.push_back(w);
      const std::size_t n = w.size();
      while (static_cast<int>(w.size()) < degree_) w.push_back(w[w.size() - n]);
      while (!w.empty() && w.back() == D - 1) w.pop_back();
    }
    std::stable_sort(words_.begin(), words_.end(),
                     [](const Word& a, const Word& b) { return a.size() < b.size(); });
    index_.reserve(words_.size());
    for (const auto& word : words_) {
      std::size_t idx = 0;
      for (int l : word) idx = idx * alphabet_ + static_cast<std::size_t>(l);
      index_.push_back(idx);
    }
  }

  std::size_t alphabet_ = 0;
  int degree_ = 0;
  std::vector<Word> words_;
  std::vector<std::size_t> index_;
};

struct LogSigVector {
  std::vector<double> coords;
  std::size_t alphabet = 0;
  int degree = 0;
};

inline LogSigVector lyndon_project(const TensorSeries& logtensor, const LyndonBasis& basis) {
  if (logtensor.alphabet() != basis.alphabet() || logtensor.degree() != basis.degree())
    throw ShapeError("log tensor (D=" + std::to_string(logtensor.alphabet()) + ", M=" +
                     std::to_string(logtensor.degree()) + ") does not match basis (D=" +
                     std::to_string(basis.alphabet()) + ", M=" + std::to_string(basis.degree()) + ")");
  LogSigVector out{std::vector<double>(basis.size()), basis.alphabet(), basis.degree()};
  const auto& words = basis.words();
  const auto& idx = basis.level_index();
  for (std::size_t i = 0; i < words.size(); ++i)
    out.coords[i] = logtensor.level(static_cast<int>(words[i].size()))[idx[i]];
  return out;
}

// Reusable encoder: holds the Lyndon basis for (2d+3, M).
class LogSigEncoder {
 public:
  LogSigEncoder(std::size_t raw_dim, int degree)
      : raw_dim_(raw_dim), degree_(degree), basis_(augmented_dim(raw_dim), degree) {}

  std::size_t raw_dim() const { return raw_dim_; }
  int degree() const { return degree_; }
  std::size_t length() const { return basis_.size(); }
  const LyndonBasis& basis() const { return basis_; }

  LogSigVector operator()(const RawPath& path) const {
    if (path.dim() != raw_dim_)
      throw ShapeError("encoder expects " + std::to_string(raw_dim_) + " channels, got " +
                       std::to_string(path.dim()));
    const AugmentedPath aug = augment(path);
    return lyndon_project(tensor_log(path_signature(aug, degree_)), basis_);
  }

 private:
  std::size_t raw_dim_;
  int degree_;
  LyndonBasis basis_;
};

// augment -> piecewise-linear signature -> log -> Lyndon coordinates.
inline LogSigVector encode(const RawPath& path, int degree) {
  require_valid(path);
  return LogSigEncoder(path.dim(), degree)(path);
}

}  // namespace lsgan::sig
