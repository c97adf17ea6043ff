#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lsgan/metrics.hpp"
#include "lsgan/nnet.hpp"
#include "lsgan/ssgan.hpp"
#include "oracles/metrics_oracle.hpp"

using namespace lsgan::metrics;

namespace {

Scored make(std::initializer_list<std::pair<double, bool>> xs) {
  Scored s;
  for (auto [f, y] : xs) s.push_back({f, y, 1.0, 0.0});
  return s;
}

Scored random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> size(1, 50);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::bernoulli_distribution coarse(0.5), pos(0.3);
  const int n = size(rng);
  const bool ties = coarse(rng);
  Scored s;
  for (int i = 0; i < n; ++i) {
    double f = u01(rng);
    if (ties) f = std::round(f * 5) / 5;
    double u = u01(rng);
    if (ties) u = std::round(u * 4) / 4;
    s.push_back({f, pos(rng), std::round(u01(rng) * 500 * 100) / 100, u});
  }
  return s;
}

bool same(double a, double b, double tol) {
  if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
  return std::abs(a - b) <= tol;
}

}  // namespace

TEST(MacroF1, ClosedForms) {
  EXPECT_DOUBLE_EQ(macro_f1(make({{0.9, true}, {0.1, false}, {0.7, true}})), 1.0);
  // all predicted negative, P = 2, N = 3
  Scored s = make({{0.1, true}, {0.2, true}, {0.1, false}, {0.3, false}, {0.0, false}});
  EXPECT_DOUBLE_EQ(macro_f1(s), (0.0 + 6.0 / 8.0) / 2.0);
}

TEST(MacroF1, EightSampleCase) {
  Scored s = make({{0.9, true}, {0.8, false}, {0.6, true}, {0.4, true},
                   {0.3, false}, {0.55, false}, {0.1, false}, {0.5, true}});
  // predicted fraud: 0.9 T, 0.8 F, 0.6 T, 0.55 F, 0.5 T -> tp 3, fp 2, fn 1, tn 2
  const double f_pos = 6.0 / 9.0, f_neg = 4.0 / 7.0;
  EXPECT_NEAR(macro_f1(s), (f_pos + f_neg) / 2, 1e-15);
  EXPECT_NEAR(macro_f1(s), oracle::macro_f1(s, 0.5), 1e-15);
}

TEST(PrAuc, PerfectRankingIsOne) {
  EXPECT_DOUBLE_EQ(pr_auc(make({{0.9, true}, {0.8, true}, {0.2, false}})), 1.0);
}

TEST(PrAuc, TenSampleCase) {
  Scored s = make({{0.95, true}, {0.9, false}, {0.85, true}, {0.7, false}, {0.6, false},
                   {0.5, true}, {0.4, false}, {0.3, false}, {0.2, true}, {0.1, false}});
  const double ap = (1.0 / 1 + 2.0 / 3 + 3.0 / 6 + 4.0 / 9) / 4;
  EXPECT_NEAR(pr_auc(s), ap, 1e-15);
  EXPECT_NEAR(pr_auc(s), oracle::pr_auc(s), 1e-12);
  // r = 0.5: first two positives fully
  EXPECT_NEAR(partial_pr_auc(s, 0.5), 0.25 * (1.0 + 2.0 / 3), 1e-15);
  EXPECT_NEAR(partial_pr_auc(s, 0.6), 0.25 * (1.0 + 2.0 / 3) + 0.1 * 0.5, 1e-15);
}

TEST(PrAuc, RandomScoresApproachPrevalence) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::bernoulli_distribution pos(0.1);
  Scored s;
  for (int i = 0; i < 100000; ++i) s.push_back({u(rng), pos(rng), 1.0, 0.0});
  EXPECT_NEAR(pr_auc(s), 0.1, 0.02);
}

TEST(PartialPrAuc, DegenerateAndPerfect) {
  Scored s = make({{0.9, true}, {0.7, false}, {0.6, true}, {0.2, false}});
  EXPECT_DOUBLE_EQ(partial_pr_auc(s, 1.0), pr_auc(s));
  Scored perfect = make({{0.9, true}, {0.8, true}, {0.7, true}, {0.2, false}});
  EXPECT_NEAR(partial_pr_auc(perfect, 0.7), 0.7, 1e-15);
}

TEST(CrossEntropy, ClosedForms) {
  EXPECT_NEAR(cross_entropy(make({{0.5, true}, {0.5, false}})), std::log(2.0), 1e-15);
  EXPECT_LE(cross_entropy(make({{1.0, true}, {0.0, false}})), 1e-6);
  Scored s = make({{0.9, true}, {0.2, false}, {0.6, false}, {0.3, true}, {0.99, true}});
  const double direct =
      -(std::log(0.9) + std::log(0.8) + std::log(0.4) + std::log(0.3) + std::log(0.99)) / 5;
  EXPECT_NEAR(cross_entropy(s), direct, 1e-15);
}

TEST(CrossEntropy, EqualsLabeledLossOnSameScores) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  lsgan::nn::Matrix scores(3, 30);
  for (Eigen::Index i = 0; i < scores.size(); ++i) scores.data()[i] = nd(rng);
  std::vector<int> labels;
  Scored s;
  const auto probs = lsgan::nn::restricted_softmax(scores);
  for (int b = 0; b < 30; ++b) {
    labels.push_back(b % 3 == 0 ? 2 : 1);
    s.push_back({probs(1, b), labels.back() == 2, 1.0, 0.0});
  }
  EXPECT_NEAR(cross_entropy(s), lsgan::gan::labeled_loss(scores, labels), 1e-12);
}

TEST(HeadMetrics, HandCountedThousandSampleCase) {
  Scored s;
  for (int i = 0; i < 1000; ++i) s.push_back({0.001 * (1000 - i) / 2, false, 10.0, 0.0});
  for (int i : {0, 1, 3, 4, 40, 200, 300, 500, 700, 999}) s[i].fraud = true;
  EXPECT_EQ(head_size(1000, 0.5), 5u);
  EXPECT_DOUBLE_EQ(precision_at_k(s, 0.5), 0.8);
  EXPECT_DOUBLE_EQ(recall_at_k(s, 0.5), 0.4);
}

TEST(HeadMetrics, AllPositivesInHead) {
  Scored s = make({{0.9, true}, {0.8, false}, {0.7, false}, {0.1, false}});
  EXPECT_DOUBLE_EQ(precision_at_k(s, 75.0), 1.0 / 3);
  EXPECT_DOUBLE_EQ(recall_at_k(s, 75.0), 1.0);
}

TEST(HeadMetrics, TinyHeadFlagsOne) {
  Scored s = make({{0.9, true}, {0.8, false}});
  EXPECT_EQ(head_size(2, 0.1), 1u);
  EXPECT_DOUBLE_EQ(precision_at_k(s, 0.1), 1.0);
}

TEST(ExpectedCost, DirectFormula) {
  Scored s{{0.9, false, 50.0, 0}, {0.1, true, 100.0, 0}, {0.05, false, 999.0, 0}};
  // N = 3, K = 10% -> flag 1: the false alert
  EXPECT_DOUBLE_EQ(expected_cost_at_k(s, 10.0, 0.02), 101.0);
  Scored p{{0.9, true, 70.0, 0}, {0.5, false, 5.0, 0}, {0.1, true, 30.0, 0}};
  EXPECT_DOUBLE_EQ(expected_cost_at_k(p, 10.0, 0.02), 30.0);
}

TEST(Uncertainty, AurocExtremes) {
  Scored s{{0.9, false, 1, 0.8}, {0.2, true, 1, 0.7}, {0.9, true, 1, 0.1}, {0.1, false, 1, 0.2}};
  EXPECT_DOUBLE_EQ(uncertainty_auroc(s), 1.0);
  for (auto& x : s) x.u = 0.3;
  EXPECT_DOUBLE_EQ(uncertainty_auroc(s), 0.5);
}

TEST(Uncertainty, WidthsByOutcome) {
  Scored one{{0.7, true, 1, 0.25}};
  auto w1 = interval_width_by_outcome(one);
  ASSERT_TRUE(w1.tp.has_value());
  EXPECT_DOUBLE_EQ(*w1.tp, 0.25);
  EXPECT_FALSE(w1.fp || w1.tn || w1.fn);

  Scored s{{0.9, true, 1, 0.1}, {0.8, true, 1, 0.3}, {0.7, false, 1, 0.5}, {0.6, false, 1, 0.7},
           {0.2, false, 1, 0.2}, {0.1, false, 1, 0.4}, {0.3, true, 1, 0.6}, {0.4, true, 1, 0.9}};
  auto w = interval_width_by_outcome(s);
  EXPECT_DOUBLE_EQ(*w.tp, 0.2);
  EXPECT_DOUBLE_EQ(*w.fp, 0.6);
  EXPECT_DOUBLE_EQ(*w.tn, 0.3);
  EXPECT_DOUBLE_EQ(*w.fn, 0.75);
}

TEST(Oracle, RandomInstancesMatchBruteForce) {
  std::mt19937_64 rng(2024);
  HeadConfig cfg;
  for (int t = 0; t < 200; ++t) {
    Scored s = random_instance(rng);
    ASSERT_EQ(macro_f1(s), oracle::macro_f1(s, 0.5)) << t;
    ASSERT_TRUE(same(pr_auc(s), oracle::pr_auc(s), 1e-12)) << t;
    ASSERT_TRUE(same(cross_entropy(s), oracle::cross_entropy(s), 1e-12)) << t;
    for (double r : cfg.recall_levels)
      ASSERT_TRUE(same(partial_pr_auc(s, r), oracle::partial_pr_auc(s, r), 1e-12)) << t;
    for (double k : {0.1, 0.2, 0.5, 1.0, 10.0, 33.0}) {
      const auto h = oracle::head_metrics(s, k);
      const auto c = head_counts(s, k);
      ASSERT_EQ(c.flagged, static_cast<std::size_t>(h.flagged)) << t;
      ASSERT_EQ(c.tp, static_cast<std::size_t>(h.tp)) << t;
      ASSERT_EQ(precision_at_k(s, k), h.tp / (h.tp + h.fp)) << t;
      ASSERT_TRUE(same(recall_at_k(s, k), h.tp / (h.tp + h.fn), 0)) << t;
      ASSERT_TRUE(same(expected_cost_at_k(s, k, 0.02), h.cost_missed + 0.02 * h.cost_alerts, 1e-9)) << t;
      // consistency identity
      const double P = static_cast<double>(positives(s));
      ASSERT_NEAR(precision_at_k(s, k) * c.flagged, c.tp, 1e-9);
      if (P > 0) ASSERT_NEAR(recall_at_k(s, k) * P, c.tp, 1e-9);
    }
    ASSERT_TRUE(same(uncertainty_auroc(s), oracle::uncertainty_auroc(s, 0.5), 1e-12)) << t;
  }
}

TEST(Properties, PartialAucMonotoneInRecall) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    Scored s = random_instance(rng);
    if (positives(s) == 0) continue;
    double prev = 0;
    for (double r = 0.05; r <= 1.0001; r += 0.05) {
      const double v = partial_pr_auc(s, r);
      ASSERT_GE(v, prev - 1e-15);
      prev = v;
    }
    ASSERT_NEAR(partial_pr_auc(s, 1.0), pr_auc(s), 1e-12);
  }
}

TEST(Properties, CostNonIncreasingInKWithoutAlertCost) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 50; ++t) {
    Scored s = random_instance(rng);
    double prev = INFINITY;
    for (double k = 1; k <= 100; k += 3) {
      const double c = expected_cost_at_k(s, k, 0.0);
      ASSERT_LE(c, prev + 1e-12);
      prev = c;
    }
  }
}

TEST(Properties, RankMetricsInvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(7);
  auto g = [](double f) { return f * f * f; };
  for (int t = 0; t < 50; ++t) {
    Scored s = random_instance(rng);
    Scored m = s;
    for (auto& x : m) x.f = g(x.f);
    const double tau = 0.5, gtau = g(0.5);
    EXPECT_EQ(macro_f1(s, tau), macro_f1(m, gtau));
    EXPECT_TRUE(same(pr_auc(s), pr_auc(m), 0));
    EXPECT_TRUE(same(partial_pr_auc(s, 0.6), partial_pr_auc(m, 0.6), 0));
    EXPECT_EQ(expected_cost_at_k(s, 20, 0.02), expected_cost_at_k(m, 20, 0.02));
    EXPECT_TRUE(same(uncertainty_auroc(s, tau), uncertainty_auroc(m, gtau), 0));
    bool interior = false;
    for (const auto& x : s) interior |= x.f > 0.01 && x.f < 0.99;
    if (interior) EXPECT_NE(cross_entropy(s), cross_entropy(m));
  }
}

TEST(Report, AggregateFlagsIncompleteAndUsesSampleStd) {
  std::vector<MetricRow> rows;
  for (int rep = 0; rep < 5; ++rep) rows.push_back({"ours", 100, rep, {{"global:pr_auc", 0.1 * rep}}});
  for (int rep = 0; rep < 4; ++rep) rows.push_back({"ours", 200, rep, {{"global:pr_auc", 0.5}}});
  auto agg = aggregate(rows, 5);
  ASSERT_EQ(agg.size(), 2u);
  EXPECT_FALSE(agg[0].incomplete);
  EXPECT_NEAR(agg[0].mean, 0.2, 1e-15);
  EXPECT_NEAR(agg[0].std, std::sqrt(0.025), 1e-15);
  EXPECT_TRUE(agg[1].incomplete);
}

TEST(Report, CostInThousandsMatchesRawCost) {
  Scored s{{0.9, false, 50.0, 0}, {0.1, true, 1234.5, 0}, {0.05, false, 999.0, 0}};
  auto row = evaluate_cell("ours", 10, 0, s, HeadConfig{});
  std::map<std::string, double> v(row.values.begin(), row.values.end());
  for (double k : HeadConfig{}.k_percents) {
    const auto key = fmt_key(k);
    EXPECT_DOUBLE_EQ(v["cost_at_k_thousands:K=" + key], v["cost_at_k:K=" + key] / 1000.0);
  }
  auto tables = family_tables({row});
  EXPECT_TRUE(tables.count("global"));
  EXPECT_TRUE(tables.count("cost_at_k"));
  EXPECT_NE(tables["precision_at_k"].find("K=0.5"), std::string::npos);
}
