#pragma once

// Independent signature references used only by tests.
//
// quadrature_signature: iterated integrals of a piecewise-linear path by
// nested Gauss-Legendre quadrature, I_w(t) = int_0^t I_{w'}(u) dX^{last}(u).
// No tensor exponential and no Chen identity are involved.
//
// NaiveSeries: word -> coefficient maps with explicit truncated products,
// power-series exp/log and brute-force Lyndon filtering.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <vector>

namespace oracle {

using Word = std::vector<int>;
using Points = std::vector<std::vector<double>>;

class QuadratureSignature {
 public:
  explicit QuadratureSignature(Points pts) : pts_(std::move(pts)) {}

  // Iterated integral over the whole path.
  double operator()(const Word& w) const {
    return value(w, w.size(), static_cast<double>(pts_.size() - 1));
  }

 private:
  static constexpr std::array<double, 5> kNodes{-0.9061798459386640, -0.5384693101056831, 0.0,
                                                0.5384693101056831, 0.9061798459386640};
  static constexpr std::array<double, 5> kWeights{0.2369268850561891, 0.4786286704993665,
                                                  0.5688888888888889, 0.4786286704993665,
                                                  0.2369268850561891};

  double derivative(int seg, int channel) const {
    return pts_[seg + 1][channel] - pts_[seg][channel];
  }

  // Integral over [0, t] of the length-k prefix of w.
  double value(const Word& w, std::size_t k, double t) const {
    if (k == 0) return 1.0;
    const int letter = w[k - 1];
    double total = 0.0;
    const int last = static_cast<int>(pts_.size()) - 2;
    for (int s = 0; s <= last && s < t; ++s) {
      const double a = s;
      const double b = std::min<double>(s + 1, t);
      const double dx = derivative(s, letter);
      if (dx == 0.0) continue;
      const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
      double acc = 0.0;
      for (std::size_t q = 0; q < kNodes.size(); ++q)
        acc += kWeights[q] * value(w, k - 1, mid + half * kNodes[q]);
      total += acc * half * dx;
    }
    return total;
  }

  Points pts_;
};

struct NaiveSeries {
  int degree = 0;
  std::map<Word, double> c;

  static NaiveSeries one(int M) {
    NaiveSeries s{M, {}};
    s.c[Word{}] = 1.0;
    return s;
  }

  NaiveSeries operator*(const NaiveSeries& o) const {
    NaiveSeries r{degree, {}};
    for (const auto& [wa, va] : c)
      for (const auto& [wb, vb] : o.c) {
        if (static_cast<int>(wa.size() + wb.size()) > degree) continue;
        Word w = wa;
        w.insert(w.end(), wb.begin(), wb.end());
        r.c[w] += va * vb;
      }
    return r;
  }
  NaiveSeries operator+(const NaiveSeries& o) const {
    NaiveSeries r = *this;
    for (const auto& [w, v] : o.c) r.c[w] += v;
    return r;
  }
  NaiveSeries scaled(double s) const {
    NaiveSeries r = *this;
    for (auto& [w, v] : r.c) v *= s;
    return r;
  }
  double get(const Word& w) const {
    auto it = c.find(w);
    return it == c.end() ? 0.0 : it->second;
  }
};

inline NaiveSeries naive_exp_letters(const std::vector<double>& inc, int M) {
  NaiveSeries x{M, {}};
  for (int i = 0; i < static_cast<int>(inc.size()); ++i) x.c[Word{i}] = inc[i];
  NaiveSeries result = NaiveSeries::one(M);
  NaiveSeries power = NaiveSeries::one(M);
  double fact = 1.0;
  for (int n = 1; n <= M; ++n) {
    power = power * x;
    fact *= n;
    result = result + power.scaled(1.0 / fact);
  }
  return result;
}

inline NaiveSeries naive_signature(const Points& pts, int M) {
  NaiveSeries s = NaiveSeries::one(M);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    std::vector<double> inc(pts[i].size());
    for (std::size_t c = 0; c < inc.size(); ++c) inc[c] = pts[i][c] - pts[i - 1][c];
    s = s * naive_exp_letters(inc, M);
  }
  return s;
}

inline NaiveSeries naive_log(const NaiveSeries& s) {
  NaiveSeries t = s;
  t.c.erase(Word{});
  NaiveSeries result{s.degree, {}};
  NaiveSeries power = NaiveSeries::one(s.degree);
  for (int n = 1; n <= s.degree; ++n) {
    power = power * t;
    result = result + power.scaled((n % 2 == 1 ? 1.0 : -1.0) / n);
  }
  return result;
}

inline bool is_lyndon(const Word& w) {
  for (std::size_t r = 1; r < w.size(); ++r) {
    Word rot(w.begin() + r, w.end());
    rot.insert(rot.end(), w.begin(), w.begin() + r);
    if (!(w < rot)) return false;
  }
  return !w.empty();
}

// All Lyndon words of length <= M, length-major then lexicographic.
inline std::vector<Word> brute_lyndon(int D, int M) {
  std::vector<Word> out;
  for (int len = 1; len <= M; ++len) {
    Word w(len, 0);
    while (true) {
      if (is_lyndon(w)) out.push_back(w);
      int pos = len - 1;
      while (pos >= 0 && w[pos] == D - 1) w[pos--] = 0;
      if (pos < 0) break;
      ++w[pos];
    }
  }
  return out;
}

// Augmentation rewritten directly from its description.
inline Points naive_augment(const Points& raw) {
  const std::size_t n = raw.size();
  Points timed;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> p{static_cast<double>(i) / (n - 1)};
    p.insert(p.end(), raw[i].begin(), raw[i].end());
    timed.push_back(p);
  }
  Points ll;
  auto pair = [&](std::size_t a, std::size_t b) {
    std::vector<double> p = timed[a];
    p.insert(p.end(), timed[b].begin(), timed[b].end());
    p.push_back(1.0);
    ll.push_back(p);
  };
  pair(0, 0);
  for (std::size_t i = 1; i < n; ++i) {
    pair(i, i - 1);
    pair(i, i);
  }
  Points out;
  auto first = ll.front();
  first.back() = 0.0;
  out.push_back(first);
  out.insert(out.end(), ll.begin(), ll.end());
  auto last = ll.back();
  last.back() = 0.0;
  out.push_back(last);
  out.push_back(std::vector<double>(last.size(), 0.0));
  return out;
}

inline std::vector<double> naive_encode(const Points& raw, int M) {
  const Points aug = naive_augment(raw);
  const int D = static_cast<int>(aug.front().size());
  const NaiveSeries lg = naive_log(naive_signature(aug, M));
  std::vector<double> out;
  for (const auto& w : brute_lyndon(D, M)) out.push_back(lg.get(w));
  return out;
}

}  // namespace oracle
