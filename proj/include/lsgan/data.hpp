#pragma once

// BankSim ingestion and sample construction.
//
// Every customer with at least five transactions contributes one sample per
// transaction j >= 5: the path is the customer's history up to and including
// j, the label is the fraud flag of transaction j. Paths carry two channels,
// the step difference to the previous transaction and the amount, both
// divided by their maxima over the training split.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsgan/errors.hpp"
#include "lsgan/nnet.hpp"
#include "lsgan/rng.hpp"
#include "lsgan/sigcore.hpp"

namespace lsgan::data {

inline constexpr int kFirstPredictedTransaction = 5;
inline constexpr int kRiskBuckets = 5;

struct Transaction {
  long step = 0;
  std::string customer;
  std::string age;
  std::string gender;
  std::string category;
  double amount = 0.0;
  bool fraud = false;
  std::size_t line = 0;  // 1-based source line
};

struct CustomerSeries {
  std::string id;
  std::vector<Transaction> tx;
};

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  while (!s.empty() && ws(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && ws(static_cast<unsigned char>(s[i]))) ++i;
  return s.substr(i);
}

inline std::string unquote(std::string s) {
  s = trim(std::move(s));
  if (s.size() >= 2 && (s.front() == '\'' || s.front() == '"') && s.back() == s.front())
    s = s.substr(1, s.size() - 2);
  return s;
}

inline std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  char quote = 0;
  for (char c : line) {
    if (quote) {
      if (c == quote) quote = 0;
      cur += c;
    } else if (c == '\'' || c == '"') {
      quote = c;
      cur += c;
    } else if (c == ',') {
      out.push_back(unquote(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(unquote(cur));
  return out;
}

[[noreturn]] inline void row_error(std::size_t line, const std::string& column, const std::string& msg) {
  throw DataError("line " + std::to_string(line) + ", column '" + column + "': " + msg);
}

inline double parse_double(const std::string& s, std::size_t line, const std::string& col) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    row_error(line, col, "expected a number, got '" + s + "'");
  }
  if (used != s.size() || !std::isfinite(v)) row_error(line, col, "expected a number, got '" + s + "'");
  return v;
}

inline long parse_long(const std::string& s, std::size_t line, const std::string& col) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(s, &used);
  } catch (const std::exception&) {
    row_error(line, col, "expected an integer, got '" + s + "'");
  }
  if (used != s.size()) row_error(line, col, "expected an integer, got '" + s + "'");
  return v;
}

}  // namespace detail

inline const std::vector<std::string>& required_columns() {
  static const std::vector<std::string> cols{"step", "customer", "age", "gender", "category", "amount", "fraud"};
  return cols;
}

inline std::vector<Transaction> ingest(std::istream& in) {
  std::vector<Transaction> out;
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> col;
  std::size_t n_cols = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_row(line);
    if (col.empty()) {
      for (std::size_t i = 0; i < fields.size(); ++i) col[fields[i]] = i;
      for (const auto& c : required_columns())
        if (!col.count(c)) throw DataError("schema mismatch: header lacks column '" + c + "'");
      n_cols = fields.size();
      continue;
    }
    if (fields.size() != n_cols)
      throw DataError("line " + std::to_string(lineno) + ": expected " + std::to_string(n_cols) + " fields, got " +
                      std::to_string(fields.size()));
    Transaction t;
    t.line = lineno;
    t.step = detail::parse_long(fields[col["step"]], lineno, "step");
    t.customer = fields[col["customer"]];
    t.age = fields[col["age"]];
    t.gender = fields[col["gender"]];
    t.category = fields[col["category"]];
    t.amount = detail::parse_double(fields[col["amount"]], lineno, "amount");
    if (t.amount < 0) detail::row_error(lineno, "amount", "negative amount");
    const auto& f = fields[col["fraud"]];
    if (f != "0" && f != "1") detail::row_error(lineno, "fraud", "expected 0 or 1, got '" + f + "'");
    t.fraud = f == "1";
    if (t.customer.empty()) detail::row_error(lineno, "customer", "empty identifier");
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<Transaction> ingest_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("dataset not found: " + std::filesystem::absolute(path).string());
  return ingest(in);
}

inline bool missing_gender(const std::string& g) { return g == "U" || g.empty(); }

// Groups by customer (sorted by id), orders each history by step with ties
// kept in file order, and drops customers whose gender is unknown.
inline std::vector<CustomerSeries> group_customers(const std::vector<Transaction>& txs) {
  std::map<std::string, std::vector<Transaction>> by_id;
  for (const auto& t : txs) by_id[t.customer].push_back(t);
  std::vector<CustomerSeries> out;
  for (auto& [id, v] : by_id) {
    if (std::any_of(v.begin(), v.end(), [](const auto& t) { return missing_gender(t.gender); })) continue;
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.step < b.step; });
    out.push_back({id, std::move(v)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Samples

struct SampleRef {
  int customer = 0;  // index into the customer list
  int length = 0;    // prefix length j
  bool fraud = false;
};

inline std::vector<SampleRef> enumerate_samples(const std::vector<CustomerSeries>& customers) {
  std::vector<SampleRef> out;
  for (std::size_t c = 0; c < customers.size(); ++c)
    for (std::size_t j = kFirstPredictedTransaction; j <= customers[c].tx.size(); ++j)
      out.push_back({static_cast<int>(c), static_cast<int>(j), customers[c].tx[j - 1].fraud});
  return out;
}

inline double step_difference(const CustomerSeries& c, std::size_t i) {
  return i == 0 ? 0.0 : static_cast<double>(c.tx[i].step - c.tx[i - 1].step);
}

struct Maxima {
  double step_diff = 1.0;
  double amount = 1.0;
};

// Feature maxima over every transaction appearing in a training prefix.
inline Maxima training_maxima(const std::vector<CustomerSeries>& customers, const std::vector<SampleRef>& samples,
                              const std::vector<std::size_t>& train) {
  std::vector<int> longest(customers.size(), 0);
  for (auto i : train) longest[samples[i].customer] = std::max(longest[samples[i].customer], samples[i].length);
  double ms = 0.0, ma = 0.0;
  for (std::size_t c = 0; c < customers.size(); ++c)
    for (int i = 0; i < longest[c]; ++i) {
      ms = std::max(ms, step_difference(customers[c], static_cast<std::size_t>(i)));
      ma = std::max(ma, customers[c].tx[static_cast<std::size_t>(i)].amount);
    }
  return {ms > 0 ? ms : 1.0, ma > 0 ? ma : 1.0};
}

inline sig::RawPath sample_path(const CustomerSeries& c, int length, const Maxima& mx) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(length) * 2);
  for (int i = 0; i < length; ++i) {
    flat.push_back(step_difference(c, static_cast<std::size_t>(i)) / mx.step_diff);
    flat.push_back(c.tx[static_cast<std::size_t>(i)].amount / mx.amount);
  }
  return sig::RawPath(2, std::move(flat));
}

// ---------------------------------------------------------------------------
// Split and unlabeling

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

inline Split stratified_split(const std::vector<SampleRef>& samples, double test_fraction, std::uint64_t seed) {
  Split s;
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].fraud == (cls == 1)) idx.push_back(i);
    auto eng = rng::stream(seed, {rng::split_stage, static_cast<std::uint64_t>(cls)});
    std::shuffle(idx.begin(), idx.end(), eng);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
    s.test.insert(s.test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.train.insert(s.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

inline std::size_t labeled_fraud_count(std::size_t n_labeled, std::size_t train_fraud, std::size_t train_total) {
  const double want = static_cast<double>(n_labeled) * static_cast<double>(train_fraud) / static_cast<double>(train_total);
  return static_cast<std::size_t>(std::ceil(want - 1e-9));
}

struct LabeledSubset {
  std::size_t n_labeled = 0;
  int repetition = 0;
  std::vector<std::size_t> labeled;    // sample indices, sorted
  std::vector<std::size_t> unlabeled;  // the rest of the training split
};

inline LabeledSubset choose_labeled(const std::vector<SampleRef>& samples, const Split& split, std::size_t n_labeled,
                                    int repetition, std::uint64_t seed) {
  if (n_labeled >= split.train.size())
    throw DataError("N_l = " + std::to_string(n_labeled) + " must be below the training size " +
                    std::to_string(split.train.size()));
  std::vector<std::size_t> pos, neg;
  for (auto i : split.train) (samples[i].fraud ? pos : neg).push_back(i);
  const std::size_t n_pos = std::min(labeled_fraud_count(n_labeled, pos.size(), split.train.size()), pos.size());
  const std::size_t n_neg = n_labeled - n_pos;
  if (n_neg > neg.size()) throw DataError("not enough non-fraud training samples for N_l");
  LabeledSubset out;
  out.n_labeled = n_labeled;
  out.repetition = repetition;
  auto pick = [&](std::vector<std::size_t> v, std::size_t k, std::uint64_t cls) {
    auto eng = rng::stream(seed, {rng::unlabel_stage, n_labeled, static_cast<std::uint64_t>(repetition), cls});
    std::shuffle(v.begin(), v.end(), eng);
    out.labeled.insert(out.labeled.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k));
  };
  pick(pos, n_pos, 1);
  pick(neg, n_neg, 0);
  std::sort(out.labeled.begin(), out.labeled.end());
  std::set_difference(split.train.begin(), split.train.end(), out.labeled.begin(), out.labeled.end(),
                      std::back_inserter(out.unlabeled));
  return out;
}

// ---------------------------------------------------------------------------
// Conditioning: (age, gender, risk level)

using CategoryRates = std::map<std::string, double>;  // percent fraud

// Fraud rate per merchant category over the label transactions of the
// labeled samples.
inline CategoryRates category_rates(const std::vector<CustomerSeries>& customers,
                                    const std::vector<SampleRef>& samples,
                                    const std::vector<std::size_t>& labeled) {
  std::map<std::string, std::pair<double, double>> counts;
  for (auto i : labeled) {
    const auto& s = samples[i];
    const auto& t = customers[s.customer].tx[static_cast<std::size_t>(s.length - 1)];
    auto& c = counts[t.category];
    c.first += s.fraud ? 1.0 : 0.0;
    c.second += 1.0;
  }
  CategoryRates out;
  for (const auto& [k, c] : counts) out[k] = 100.0 * c.first / c.second;
  return out;
}

inline int risk_bucket(double percent) {
  if (percent <= 2.0) return 1;
  if (percent <= 10.0) return 2;
  if (percent <= 30.0) return 3;
  if (percent <= 50.0) return 4;
  return 5;
}

// Position-weighted mean of per-transaction buckets (weights 1..n),
// rounded half-up.
inline int weighted_risk(const std::vector<int>& buckets) {
  if (buckets.empty()) throw DataError("risk level of an empty prefix");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    num += static_cast<double>(i + 1) * buckets[i];
    den += static_cast<double>(i + 1);
  }
  return static_cast<int>(std::floor(num / den + 0.5));
}

inline int risk_level(const CustomerSeries& c, int length, const CategoryRates& rates,
                      std::size_t* unseen = nullptr) {
  std::vector<int> b;
  for (int i = 0; i < length; ++i) {
    const auto it = rates.find(c.tx[static_cast<std::size_t>(i)].category);
    if (it == rates.end()) {
      if (unseen) ++*unseen;
      b.push_back(1);
    } else {
      b.push_back(risk_bucket(it->second));
    }
  }
  return weighted_risk(b);
}

struct Vocabulary {
  std::vector<std::string> ages;
  std::vector<std::string> genders;

  std::vector<int> cardinalities() const {
    return {static_cast<int>(ages.size()), static_cast<int>(genders.size()), kRiskBuckets};
  }

  static int code(const std::vector<std::string>& v, const std::string& s) {
    auto it = std::lower_bound(v.begin(), v.end(), s);
    if (it == v.end() || *it != s) throw InvalidConditionError("unknown condition value '" + s + "'");
    return static_cast<int>(it - v.begin());
  }
};

inline Vocabulary build_vocabulary(const std::vector<CustomerSeries>& customers) {
  std::set<std::string> a, g;
  for (const auto& c : customers)
    for (const auto& t : c.tx) a.insert(t.age), g.insert(t.gender);
  return {{a.begin(), a.end()}, {g.begin(), g.end()}};
}

// Condition codes (age, gender, risk - 1) taken at the end of each prefix.
inline nn::CodeMatrix condition_codes(const std::vector<CustomerSeries>& customers,
                                      const std::vector<SampleRef>& samples, const std::vector<std::size_t>& which,
                                      const CategoryRates& rates, const Vocabulary& vocab,
                                      std::size_t* unseen = nullptr) {
  nn::CodeMatrix codes(3, static_cast<Eigen::Index>(which.size()));
  for (std::size_t k = 0; k < which.size(); ++k) {
    const auto& s = samples[which[k]];
    const auto& c = customers[s.customer];
    const auto& last = c.tx[static_cast<std::size_t>(s.length - 1)];
    const auto col = static_cast<Eigen::Index>(k);
    codes(0, col) = Vocabulary::code(vocab.ages, last.age);
    codes(1, col) = Vocabulary::code(vocab.genders, last.gender);
    codes(2, col) = risk_level(c, s.length, rates, unseen) - 1;
  }
  return codes;
}

// ---------------------------------------------------------------------------
// Subsampling

inline std::vector<CustomerSeries> subsample_customers(std::vector<CustomerSeries> customers, double fraction,
                                                       std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("subsample fraction must lie in (0, 1]");
  if (fraction == 1.0) return customers;
  std::vector<std::size_t> idx(customers.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto eng = rng::stream(seed, {rng::subsample_stage});
  std::shuffle(idx.begin(), idx.end(), eng);
  const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(idx.size()))));
  idx.resize(std::min(keep, idx.size()));
  std::sort(idx.begin(), idx.end());
  std::vector<CustomerSeries> out;
  for (auto i : idx) out.push_back(std::move(customers[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Feature store

inline std::uint64_t fnv1a64(const char* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("dataset not found: " + std::filesystem::absolute(path).string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a64(buf.data(), static_cast<std::size_t>(in.gcount()), h);
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// Log-signature features for the given samples, one column each.
inline Eigen::MatrixXf encode_samples(const std::vector<CustomerSeries>& customers,
                                      const std::vector<SampleRef>& samples, const Maxima& mx, int degree,
                                      int workers = 1) {
  const sig::LogSigEncoder enc(2, degree);
  Eigen::MatrixXf out(static_cast<Eigen::Index>(enc.length()), static_cast<Eigen::Index>(samples.size()));
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& s = samples[i];
      const auto v = enc(sample_path(customers[static_cast<std::size_t>(s.customer)], s.length, mx));
      for (std::size_t k = 0; k < v.coords.size(); ++k)
        out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = static_cast<float>(v.coords[k]);
    }
  };
  const std::size_t n = samples.size();
  const auto w = static_cast<std::size_t>(std::max(1, workers));
  if (w == 1 || n < 2) {
    work(0, n);
  } else {
    std::vector<std::future<void>> jobs;
    for (std::size_t t = 0; t < w; ++t)
      jobs.push_back(std::async(std::launch::async, work, n * t / w, n * (t + 1) / w));
    for (auto& j : jobs) j.get();
  }
  return out;
}

struct FeatureStoreKey {
  std::string dataset_checksum;
  int degree = 4;
  int scheme_version = sig::kAugmentationSchemeVersion;
  std::uint64_t split_seed = 0;
  double subsample = 1.0;

  nlohmann::json to_json() const {
    return {{"dataset_checksum", dataset_checksum}, {"degree", degree}, {"scheme_version", scheme_version},
            {"split_seed", split_seed}, {"subsample", subsample}};
  }
  std::string stem() const {
    const std::string s = to_json().dump();
    std::ostringstream os;
    os << "features-" << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(s.data(), s.size());
    return os.str();
  }
};

inline void write_feature_store(const std::filesystem::path& dir, const FeatureStoreKey& key,
                                const Eigen::MatrixXf& feats, const Maxima& mx) {
  std::filesystem::create_directories(dir);
  const auto stem = dir / key.stem();
  {
    std::ofstream bin(stem.string() + ".bin.tmp", std::ios::binary);
    for (Eigen::Index i = 0; i < feats.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(feats.data()[i]);
      char b[4];
      for (int k = 0; k < 4; ++k) b[k] = static_cast<char>((bits >> (8 * k)) & 0xff);
      bin.write(b, 4);
    }
    if (!bin) throw DataError("could not write feature store " + stem.string() + ".bin");
  }
  nlohmann::json m = key.to_json();
  m["rows"] = feats.rows();
  m["cols"] = feats.cols();
  m["dtype"] = "float32-le";
  m["layout"] = "column-major, one sample per column";
  m["maxima"] = {{"step_diff", mx.step_diff}, {"amount", mx.amount}};
  {
    std::ofstream js(stem.string() + ".json.tmp");
    js << m.dump(2) << "\n";
  }
  std::filesystem::rename(stem.string() + ".bin.tmp", stem.string() + ".bin");
  std::filesystem::rename(stem.string() + ".json.tmp", stem.string() + ".json");
}

inline std::optional<Eigen::MatrixXf> read_feature_store(const std::filesystem::path& dir,
                                                         const FeatureStoreKey& key) {
  const auto stem = dir / key.stem();
  std::ifstream js(stem.string() + ".json");
  if (!js) return std::nullopt;
  nlohmann::json m;
  try {
    js >> m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt feature-store manifest " + stem.string() + ".json: " + e.what());
  }
  if (m.at("dataset_checksum") != key.dataset_checksum)
    throw DataError("feature-store checksum drift for " + stem.string());
  const auto rows = m.at("rows").get<Eigen::Index>();
  const auto cols = m.at("cols").get<Eigen::Index>();
  Eigen::MatrixXf feats(rows, cols);
  std::ifstream bin(stem.string() + ".bin", std::ios::binary);
  for (Eigen::Index i = 0; i < feats.size(); ++i) {
    unsigned char b[4];
    if (!bin.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated feature store " + stem.string() + ".bin");
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(b[k]) << (8 * k);
    feats.data()[i] = std::bit_cast<float>(bits);
  }
  return feats;
}

inline nlohmann::json split_manifest(const Split& split, const std::vector<LabeledSubset>& subsets,
                                     std::uint64_t seed) {
  nlohmann::json j;
  j["seed"] = seed;
  j["train"] = split.train;
  j["test"] = split.test;
  j["labeled"] = nlohmann::json::array();
  for (const auto& s : subsets)
    j["labeled"].push_back({{"n_labeled", s.n_labeled}, {"repetition", s.repetition}, {"samples", s.labeled}});
  return j;
}

}  // namespace lsgan::data
