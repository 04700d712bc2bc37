#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "softreason/chain_parser.hpp"
#include "softreason/common.hpp"
#include "softreason/reasoner.hpp"

namespace softreason {

inline const std::vector<std::size_t>& default_cumulative_ks() {
  static const std::vector<std::size_t> ks{1, 3, 5, 10};
  return ks;
}

struct StepStats {
  std::size_t step = 0;
  double top1_prob = 0;
  TokenId top1_token = 0;
  double entropy = 0;
  std::map<std::size_t, double> cumulative;
};

inline std::pair<double, TokenId> step_top1(const Vec& q) {
  const auto i = argmax(q);
  return {q(i), static_cast<TokenId>(i)};
}

// Shannon entropy in nats; zero entries contribute nothing.
inline double step_entropy(const Vec& q) {
  double h = 0;
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (q(i) > 0) h -= q(i) * std::log(q(i));
  }
  return h;
}

inline std::map<std::size_t, double> cumulative_topk(const Vec& q, const std::vector<std::size_t>& ks) {
  std::vector<double> sorted(q.data(), q.data() + q.size());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  std::map<std::size_t, double> out;
  double cum = 0;
  std::size_t taken = 0;
  for (std::size_t k : ks) {
    while (taken < k && taken < sorted.size()) cum += sorted[taken++];
    out[k] = cum;
  }
  return out;
}

inline StepStats compute_step_stats(const Vec& q, std::size_t step,
                                    const std::vector<std::size_t>& ks = default_cumulative_ks()) {
  StepStats s;
  s.step = step;
  std::tie(s.top1_prob, s.top1_token) = step_top1(q);
  s.entropy = step_entropy(q);
  s.cumulative = cumulative_topk(q, ks);
  return s;
}

// Counts the argmax token of every recorded latent distribution, including the
// one that triggered termination. Sorted by descending count, then token id.
inline std::vector<std::pair<TokenId, std::size_t>> token_frequency(const std::vector<LatentTrace>& traces) {
  std::map<TokenId, std::size_t> counts;
  for (const auto& t : traces) {
    for (const auto& q : t.distributions) ++counts[static_cast<TokenId>(argmax(q))];
  }
  std::vector<std::pair<TokenId, std::size_t>> out(counts.begin(), counts.end());
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

// Streaming Pearson correlation (co-moment updates). Returns 0 when either
// series has zero variance.
inline double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw Error("pearson_r: length mismatch");
  double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(i + 1);
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    mx += dx / n;
    my += dy / n;
    sxx += dx * (x[i] - mx);
    syy += dy * (y[i] - my);
    sxy += dx * (y[i] - my);
  }
  if (sxx <= 0 || syy <= 0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Per-step averages over every trace that reached that step.
struct PooledStep {
  std::size_t step = 0;
  std::size_t count = 0;
  double mean_top1 = 0;
  double mean_entropy = 0;
  std::map<std::size_t, double> mean_cumulative;

  bool operator==(const PooledStep&) const = default;
};

struct BatchStats {
  std::vector<PooledStep> steps;
  std::size_t samples = 0;
  double mean_top1 = 0;
  double mean_entropy = 0;
  double pearson_r = 0;
  std::vector<std::pair<TokenId, std::size_t>> token_frequency;

  bool operator==(const BatchStats&) const = default;
};

inline BatchStats compute_batch_stats(const std::vector<LatentTrace>& traces,
                                      const std::vector<std::size_t>& ks = default_cumulative_ks()) {
  BatchStats b;
  std::vector<double> top1s, entropies;
  std::map<std::size_t, PooledStep> pooled;
  for (const auto& t : traces) {
    for (std::size_t j = 0; j < t.distributions.size(); ++j) {
      const StepStats s = compute_step_stats(t.distributions[j], j + 1, ks);
      top1s.push_back(s.top1_prob);
      entropies.push_back(s.entropy);
      PooledStep& p = pooled[j + 1];
      p.step = j + 1;
      ++p.count;
      p.mean_top1 += s.top1_prob;
      p.mean_entropy += s.entropy;
      for (const auto& [k, v] : s.cumulative) p.mean_cumulative[k] += v;
    }
  }
  for (auto& [step, p] : pooled) {
    const double n = static_cast<double>(p.count);
    p.mean_top1 /= n;
    p.mean_entropy /= n;
    for (auto& [k, v] : p.mean_cumulative) v /= n;
    b.steps.push_back(p);
  }
  b.samples = top1s.size();
  if (b.samples) {
    b.mean_top1 = std::accumulate(top1s.begin(), top1s.end(), 0.0) / static_cast<double>(b.samples);
    b.mean_entropy = std::accumulate(entropies.begin(), entropies.end(), 0.0) / static_cast<double>(b.samples);
    b.pearson_r = pearson_r(top1s, entropies);
  }
  b.token_frequency = token_frequency(traces);
  return b;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

enum class ReportFormat { Csv, Json };

inline double round6(double x) { return std::stod(format_fixed(x, 6)); }

inline std::string stats_to_csv(const BatchStats& b, const std::vector<std::size_t>& ks = default_cumulative_ks()) {
  std::string out = "step,count,mean_top1,mean_entropy";
  for (std::size_t k : ks) out += ",cum_top" + std::to_string(k);
  out += '\n';
  for (const auto& p : b.steps) {
    out += std::to_string(p.step) + "," + std::to_string(p.count) + "," + format_fixed(p.mean_top1, 6) + "," +
           format_fixed(p.mean_entropy, 6);
    for (std::size_t k : ks) {
      auto it = p.mean_cumulative.find(k);
      out += "," + format_fixed(it == p.mean_cumulative.end() ? 0.0 : it->second, 6);
    }
    out += '\n';
  }
  return out;
}

inline nlohmann::ordered_json stats_to_json(const BatchStats& b, const Vocabulary* vocab = nullptr) {
  nlohmann::ordered_json j;
  j["samples"] = b.samples;
  j["mean_top1"] = round6(b.mean_top1);
  j["mean_entropy"] = round6(b.mean_entropy);
  j["pearson_r"] = round6(b.pearson_r);
  nlohmann::ordered_json steps = nlohmann::ordered_json::array();
  for (const auto& p : b.steps) {
    nlohmann::ordered_json s;
    s["step"] = p.step;
    s["count"] = p.count;
    s["mean_top1"] = round6(p.mean_top1);
    s["mean_entropy"] = round6(p.mean_entropy);
    nlohmann::ordered_json cum = nlohmann::ordered_json::object();
    for (const auto& [k, v] : p.mean_cumulative) cum[std::to_string(k)] = round6(v);
    s["cumulative"] = std::move(cum);
    steps.push_back(std::move(s));
  }
  j["steps"] = std::move(steps);
  nlohmann::ordered_json freq = nlohmann::ordered_json::array();
  for (const auto& [id, n] : b.token_frequency) {
    nlohmann::ordered_json e;
    e["id"] = id;
    if (vocab) e["token"] = vocab->token(id);
    e["count"] = n;
    freq.push_back(std::move(e));
  }
  j["token_frequency"] = std::move(freq);
  return j;
}

inline BatchStats stats_from_json(const nlohmann::json& j) {
  BatchStats b;
  b.samples = j.at("samples").get<std::size_t>();
  b.mean_top1 = j.at("mean_top1").get<double>();
  b.mean_entropy = j.at("mean_entropy").get<double>();
  b.pearson_r = j.at("pearson_r").get<double>();
  for (const auto& s : j.at("steps")) {
    PooledStep p;
    p.step = s.at("step").get<std::size_t>();
    p.count = s.at("count").get<std::size_t>();
    p.mean_top1 = s.at("mean_top1").get<double>();
    p.mean_entropy = s.at("mean_entropy").get<double>();
    for (const auto& [k, v] : s.at("cumulative").items()) p.mean_cumulative[std::stoul(k)] = v.get<double>();
    b.steps.push_back(std::move(p));
  }
  for (const auto& e : j.at("token_frequency")) {
    b.token_frequency.emplace_back(e.at("id").get<TokenId>(), e.at("count").get<std::size_t>());
  }
  return b;
}

// Rounds every real to the 6 decimals used by the report files.
inline BatchStats rounded(BatchStats b) {
  b.mean_top1 = round6(b.mean_top1);
  b.mean_entropy = round6(b.mean_entropy);
  b.pearson_r = round6(b.pearson_r);
  for (auto& p : b.steps) {
    p.mean_top1 = round6(p.mean_top1);
    p.mean_entropy = round6(p.mean_entropy);
    for (auto& [k, v] : p.mean_cumulative) v = round6(v);
  }
  return b;
}

inline void emit_report(const BatchStats& b, const std::string& path, ReportFormat fmt,
                        const Vocabulary* vocab = nullptr) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write report: " + path);
  if (fmt == ReportFormat::Csv) {
    out << stats_to_csv(b);
  } else {
    out << stats_to_json(b, vocab).dump(1) << '\n';
  }
  if (!out) throw Error("write failed: " + path);
}

// One JSON object per trace with the top-10 entries of every latent distribution.
inline nlohmann::ordered_json trace_to_json(const LatentTrace& t, std::size_t index, const Vocabulary* vocab = nullptr,
                                            std::size_t top = 10) {
  nlohmann::ordered_json j;
  j["index"] = index;
  j["termination_step"] = t.termination_step;
  j["truncated"] = t.truncated;
  j["answer_ids"] = t.answer_ids;
  if (vocab) j["answer"] = detokenize(t.answer_ids, *vocab);
  nlohmann::ordered_json steps = nlohmann::ordered_json::array();
  for (std::size_t s = 0; s < t.distributions.size(); ++s) {
    const Vec& q = t.distributions[s];
    std::vector<Eigen::Index> order(static_cast<std::size_t>(q.size()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return q(a) > q(b); });
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (std::size_t r = 0; r < top && r < order.size(); ++r) {
      nlohmann::ordered_json e = nlohmann::ordered_json::array();
      e.push_back(order[r]);
      if (vocab) e.push_back(vocab->token(static_cast<TokenId>(order[r])));
      e.push_back(round6(q(order[r])));
      row.push_back(std::move(e));
    }
    nlohmann::ordered_json st;
    st["step"] = s + 1;
    st["top"] = std::move(row);
    steps.push_back(std::move(st));
  }
  j["steps"] = std::move(steps);
  return j;
}

}  // namespace softreason
