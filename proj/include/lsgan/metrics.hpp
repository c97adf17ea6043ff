#pragma once

// Evaluation metrics for fraud scoring. Global metrics look at the whole test
// set; head metrics only at the top K% of transactions by fraud probability,
// which is what an investigation team can actually review.
//
// Conventions:
//  * ranking is a stable sort on (-f, original index);
//  * K is a percentage, the head holds ceil(K% * N) samples (at least 1);
//  * a sample is predicted fraudulent when f >= tau.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "lsgan/errors.hpp"

namespace lsgan::metrics {

struct ScoredSample {
  double f = 0.0;       // fraud probability
  bool fraud = false;   // true label
  double amount = 0.0;
  double u = 0.0;       // predictive interval width
};

using Scored = std::vector<ScoredSample>;

struct HeadConfig {
  std::vector<double> k_percents{0.1, 0.2, 0.5, 1.0};
  std::vector<double> recall_levels{0.5, 0.6, 0.7, 0.8};
  double alpha = 0.02;
  double tau = 0.5;
};

inline constexpr double kClip = 1e-7;
inline const double kNaN = std::numeric_limits<double>::quiet_NaN();

inline std::vector<std::size_t> ranking(const Scored& s) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a].f > s[b].f; });
  return order;
}

inline std::size_t positives(const Scored& s) {
  return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](const auto& x) { return x.fraud; }));
}

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline Confusion confusion(const Scored& s, double tau = 0.5) {
  Confusion c;
  for (const auto& x : s) {
    const bool pred = x.f >= tau;
    if (pred && x.fraud) ++c.tp;
    else if (pred) ++c.fp;
    else if (x.fraud) ++c.fn;
    else ++c.tn;
  }
  return c;
}

inline double f1_score(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t d = 2 * tp + fp + fn;
  return d == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(d);
}

inline double macro_f1(const Scored& s, double tau = 0.5) {
  const Confusion c = confusion(s, tau);
  return (f1_score(c.tp, c.fp, c.fn) + f1_score(c.tn, c.fn, c.fp)) / 2.0;
}

// Average precision: sum over ranked positives of (1/P) * precision at rank.
inline double pr_auc(const Scored& s) {
  const std::size_t P = positives(s);
  if (P == 0) return kNaN;
  const auto order = ranking(s);
  double area = 0.0;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (!s[order[i]].fraud) continue;
    ++tp;
    area += static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  return area / static_cast<double>(P);
}

// Same sweep, integrated over recall in [0, r]; the step crossing r is
// prorated.
inline double partial_pr_auc(const Scored& s, double r) {
  const std::size_t P = positives(s);
  if (P == 0) return kNaN;
  const auto order = ranking(s);
  const double step = 1.0 / static_cast<double>(P);
  double area = 0.0;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (!s[order[i]].fraud) continue;
    const double prev = static_cast<double>(tp) * step;
    if (prev >= r) break;
    ++tp;
    const double precision = static_cast<double>(tp) / static_cast<double>(i + 1);
    area += std::min(step, r - prev) * precision;
  }
  return area;
}

inline double cross_entropy(const Scored& s) {
  if (s.empty()) throw UndefinedLossError("cross-entropy of an empty set");
  double total = 0.0;
  for (const auto& x : s) {
    const double f = std::clamp(x.f, kClip, 1.0 - kClip);
    total += x.fraud ? std::log(f) : std::log(1.0 - f);
  }
  return -total / static_cast<double>(s.size());
}

inline std::size_t head_size(std::size_t n, double k_percent) {
  const double raw = k_percent * static_cast<double>(n) / 100.0;
  const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(n, 1));
}

struct HeadCounts {
  std::size_t flagged = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double missed_fraud_amount = 0.0;
  double flagged_legit_amount = 0.0;
};

inline HeadCounts head_counts(const Scored& s, double k_percent) {
  HeadCounts h;
  if (s.empty()) return h;
  const auto order = ranking(s);
  h.flagged = head_size(s.size(), k_percent);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& x = s[order[i]];
    const bool in_head = i < h.flagged;
    if (in_head && x.fraud) ++h.tp;
    else if (in_head) {
      ++h.fp;
      h.flagged_legit_amount += x.amount;
    } else if (x.fraud) {
      ++h.fn;
      h.missed_fraud_amount += x.amount;
    }
  }
  return h;
}

inline double precision_at_k(const Scored& s, double k_percent) {
  const auto h = head_counts(s, k_percent);
  return h.flagged == 0 ? kNaN : static_cast<double>(h.tp) / static_cast<double>(h.tp + h.fp);
}

inline double recall_at_k(const Scored& s, double k_percent) {
  const auto h = head_counts(s, k_percent);
  return h.tp + h.fn == 0 ? kNaN : static_cast<double>(h.tp) / static_cast<double>(h.tp + h.fn);
}

inline double expected_cost_at_k(const Scored& s, double k_percent, double alpha = 0.02) {
  const auto h = head_counts(s, k_percent);
  return h.missed_fraud_amount + alpha * h.flagged_legit_amount;
}

// Probability that a misclassified sample has a larger u than a correctly
// classified one (ties count one half), from average ranks.
inline double uncertainty_auroc(const Scored& s, double tau = 0.5) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a].u < s[b].u; });
  double rank_sum = 0.0;
  std::size_t n_err = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && s[order[j]].u == s[order[i]].u) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      const auto& x = s[order[k]];
      if ((x.f >= tau) != x.fraud) {
        rank_sum += avg_rank;
        ++n_err;
      }
    }
    i = j;
  }
  const std::size_t n_ok = s.size() - n_err;
  if (n_err == 0 || n_ok == 0) return kNaN;
  const double ne = static_cast<double>(n_err);
  return (rank_sum - ne * (ne + 1.0) / 2.0) / (ne * static_cast<double>(n_ok));
}

struct OutcomeWidths {
  std::optional<double> tp, fp, tn, fn;
};

inline OutcomeWidths interval_width_by_outcome(const Scored& s, double tau = 0.5) {
  double sum[4] = {0, 0, 0, 0};
  std::size_t cnt[4] = {0, 0, 0, 0};
  for (const auto& x : s) {
    const bool pred = x.f >= tau;
    const int cell = pred ? (x.fraud ? 0 : 1) : (x.fraud ? 3 : 2);
    sum[cell] += x.u;
    ++cnt[cell];
  }
  auto mean = [&](int c) -> std::optional<double> {
    if (cnt[c] == 0) return std::nullopt;
    return sum[c] / static_cast<double>(cnt[c]);
  };
  return {mean(0), mean(1), mean(2), mean(3)};
}

// ---------------------------------------------------------------------------
// Reports

struct MetricRow {
  std::string model;
  int n_labeled = 0;
  int repetition = 0;
  std::vector<std::pair<std::string, double>> values;  // (family:metric, value)
};

inline std::string fmt_key(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline MetricRow evaluate_cell(const std::string& model, int n_labeled, int repetition, const Scored& s,
                               const HeadConfig& cfg) {
  MetricRow row{model, n_labeled, repetition, {}};
  auto put = [&](const std::string& k, double v) { row.values.emplace_back(k, v); };
  put("global:macro_f1", macro_f1(s, cfg.tau));
  put("global:pr_auc", pr_auc(s));
  put("global:cross_entropy", cross_entropy(s));
  for (double k : cfg.k_percents) put("precision_at_k:K=" + fmt_key(k), precision_at_k(s, k));
  for (double k : cfg.k_percents) put("recall_at_k:K=" + fmt_key(k), recall_at_k(s, k));
  for (double r : cfg.recall_levels) put("partial_pr_auc:r=" + fmt_key(r), partial_pr_auc(s, r));
  for (double k : cfg.k_percents) put("cost_at_k:K=" + fmt_key(k), expected_cost_at_k(s, k, cfg.alpha));
  for (double k : cfg.k_percents)
    put("cost_at_k_thousands:K=" + fmt_key(k), expected_cost_at_k(s, k, cfg.alpha) / 1000.0);
  put("uncertainty:auroc", uncertainty_auroc(s, cfg.tau));
  const auto w = interval_width_by_outcome(s, cfg.tau);
  put("uncertainty:width_tp", w.tp.value_or(kNaN));
  put("uncertainty:width_fp", w.fp.value_or(kNaN));
  put("uncertainty:width_tn", w.tn.value_or(kNaN));
  put("uncertainty:width_fn", w.fn.value_or(kNaN));
  return row;
}

inline double mean_of(const std::vector<double>& xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

// Sample standard deviation (n - 1 denominator); NaN below two values.
inline double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return kNaN;
  const double m = mean_of(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

struct AggregateRow {
  std::string model;
  int n_labeled = 0;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;
  int repetitions = 0;
  bool incomplete = false;
};

inline std::vector<AggregateRow> aggregate(const std::vector<MetricRow>& rows, int expected_reps = 5) {
  std::map<std::tuple<std::string, int, std::string>, std::vector<double>> groups;
  std::vector<std::tuple<std::string, int, std::string>> order;
  for (const auto& r : rows)
    for (const auto& [k, v] : r.values) {
      auto key = std::make_tuple(r.model, r.n_labeled, k);
      if (!groups.count(key)) order.push_back(key);
      groups[key].push_back(v);
    }
  std::vector<AggregateRow> out;
  for (const auto& key : order) {
    const auto& xs = groups[key];
    AggregateRow a;
    std::tie(a.model, a.n_labeled, a.metric) = key;
    a.mean = mean_of(xs);
    a.std = std_of(xs);
    a.repetitions = static_cast<int>(xs.size());
    a.incomplete = a.repetitions != expected_reps;
    out.push_back(a);
  }
  return out;
}

inline std::string family_of(const std::string& key) { return key.substr(0, key.find(':')); }
inline std::string metric_of(const std::string& key) { return key.substr(key.find(':') + 1); }

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}

// One CSV body per metric family: rows are cells, columns metrics.
inline std::map<std::string, std::string> family_tables(const std::vector<MetricRow>& rows) {
  std::map<std::string, std::vector<std::string>> columns;
  for (const auto& r : rows)
    for (const auto& [k, v] : r.values) {
      auto& cols = columns[family_of(k)];
      if (std::find(cols.begin(), cols.end(), metric_of(k)) == cols.end()) cols.push_back(metric_of(k));
    }
  std::map<std::string, std::string> out;
  for (const auto& [family, cols] : columns) {
    std::ostringstream os;
    os << "model,n_labeled,repetition";
    for (const auto& c : cols) os << "," << c;
    os << "\n";
    for (const auto& r : rows) {
      os << r.model << "," << r.n_labeled << "," << r.repetition;
      for (const auto& c : cols) {
        double v = kNaN;
        for (const auto& [k, x] : r.values)
          if (family_of(k) == family && metric_of(k) == c) v = x;
        os << "," << csv_number(v);
      }
      os << "\n";
    }
    out[family] = os.str();
  }
  return out;
}

inline std::string aggregate_table(const std::vector<AggregateRow>& agg) {
  std::ostringstream os;
  os << "model,n_labeled,family,metric,mean,std,repetitions,incomplete\n";
  for (const auto& a : agg)
    os << a.model << "," << a.n_labeled << "," << family_of(a.metric) << "," << metric_of(a.metric) << ","
       << csv_number(a.mean) << "," << csv_number(a.std) << "," << a.repetitions << ","
       << (a.incomplete ? "true" : "false") << "\n";
  return os.str();
}

// Long format for cost-vs-N_l curves.
inline std::string cost_curve_table(const std::vector<AggregateRow>& agg) {
  std::ostringstream os;
  os << "model,n_labeled,K,cost_mean,cost_std,cost_thousands_mean,repetitions,incomplete\n";
  for (const auto& a : agg) {
    if (family_of(a.metric) != "cost_at_k") continue;
    const std::string k = metric_of(a.metric).substr(2);
    os << a.model << "," << a.n_labeled << "," << k << "," << csv_number(a.mean) << "," << csv_number(a.std)
       << "," << csv_number(a.mean / 1000.0) << "," << a.repetitions << "," << (a.incomplete ? "true" : "false")
       << "\n";
  }
  return os.str();
}

}  // namespace lsgan::metrics
