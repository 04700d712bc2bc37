#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "softreason/chain_parser.hpp"
#include "softreason/common.hpp"
#include "softreason/corpus.hpp"

namespace softreason {

// Temp, Gumbel and Mix are the rule-based constructions. Uniform and Random
// replace the rule-based scores and exist for ablations.
enum class PriorMethod { Temp, Gumbel, Mix, Uniform, Random };

inline std::string to_string(PriorMethod m) {
  switch (m) {
    case PriorMethod::Temp: return "temp";
    case PriorMethod::Gumbel: return "gumbel";
    case PriorMethod::Mix: return "mix";
    case PriorMethod::Uniform: return "uniform";
    case PriorMethod::Random: return "random";
  }
  return "?";
}

inline PriorMethod prior_method_from_string(const std::string& s) {
  if (s == "temp") return PriorMethod::Temp;
  if (s == "gumbel") return PriorMethod::Gumbel;
  if (s == "mix") return PriorMethod::Mix;
  if (s == "uniform") return PriorMethod::Uniform;
  if (s == "random") return PriorMethod::Random;
  throw Error("unknown prior method '" + s + "'");
}

struct PriorConfig {
  PriorMethod method = PriorMethod::Mix;
  double tau = 0.5;
  double beta_op = 2.0;
  double beta_res = 2.8;
  double lambda = 0.2;
  bool hard = false;
  std::uint64_t seed = 777;
  std::size_t k = 5;
  double delta = 1e-2;
};

inline void validate(const PriorConfig& c) {
  if (!(c.tau > 0)) throw Error("prior config: tau must be positive");
  if (!(c.beta_res > c.beta_op)) throw Error("prior config: beta_res must exceed beta_op");
  if (!(c.lambda >= 0 && c.lambda <= 1)) throw Error("prior config: lambda must be in [0, 1]");
  if (c.k < 1) throw Error("prior config: k must be at least 1");
  if (!(c.delta >= 0)) throw Error("prior config: delta must be nonnegative");
}

inline nlohmann::ordered_json to_json(const PriorConfig& c) {
  nlohmann::ordered_json j;
  j["method"] = to_string(c.method);
  j["tau"] = c.tau;
  j["beta_op"] = c.beta_op;
  j["beta_res"] = c.beta_res;
  j["lambda"] = c.lambda;
  j["hard"] = c.hard;
  j["seed"] = c.seed;
  j["k"] = c.k;
  j["delta"] = c.delta;
  return j;
}

inline PriorConfig prior_config_from_json(const nlohmann::json& j) {
  PriorConfig c;
  if (j.contains("method")) c.method = prior_method_from_string(j["method"].get<std::string>());
  c.tau = j.value("tau", c.tau);
  c.beta_op = j.value("beta_op", c.beta_op);
  c.beta_res = j.value("beta_res", c.beta_res);
  c.lambda = j.value("lambda", c.lambda);
  c.hard = j.value("hard", c.hard);
  c.seed = j.value("seed", c.seed);
  c.k = j.value("k", c.k);
  c.delta = j.value("delta", c.delta);
  return c;
}

// Tokens absent from a sparse map carry logit -inf / probability 0.
struct SparseEntry {
  TokenId id;
  double value;
  bool operator==(const SparseEntry&) const = default;
};

using SparseLogits = std::vector<SparseEntry>;  // ascending token id

struct SparsePrior {
  std::vector<SparseEntry> entries;  // ascending token id, probabilities
  std::size_t step_index = 0;

  double prob(TokenId id) const {
    for (const auto& e : entries) {
      if (e.id == id) return e.value;
    }
    return 0.0;
  }
  double total() const {
    double s = 0;
    for (const auto& e : entries) s += e.value;
    return s;
  }
};

struct FocusSet {
  std::size_t k = 0;
  double delta = 0;
  std::vector<TokenId> selected_ids;  // descending prior probability, ties by id
};

namespace detail {

inline void set_entry(std::vector<SparseEntry>& m, TokenId id, double value) {
  auto it = std::lower_bound(m.begin(), m.end(), id, [](const SparseEntry& e, TokenId x) { return e.id < x; });
  if (it != m.end() && it->id == id) {
    it->value = value;
  } else {
    m.insert(it, SparseEntry{id, value});
  }
}

inline void add_entry(std::vector<SparseEntry>& m, TokenId id, double value) {
  auto it = std::lower_bound(m.begin(), m.end(), id, [](const SparseEntry& e, TokenId x) { return e.id < x; });
  if (it != m.end() && it->id == id) {
    it->value += value;
  } else {
    m.insert(it, SparseEntry{id, value});
  }
}

inline std::vector<SparseEntry> stable_softmax(const SparseLogits& scores) {
  if (scores.empty()) throw Error("prior: empty support");
  double mx = scores.front().value;
  for (const auto& e : scores) mx = std::max(mx, e.value);
  std::vector<SparseEntry> out;
  out.reserve(scores.size());
  double z = 0;
  for (const auto& e : scores) {
    const double w = std::exp(e.value - mx);
    out.push_back({e.id, w});
    z += w;
  }
  for (auto& e : out) e.value /= z;
  return out;
}

}  // namespace detail

// Operational tokens get beta_op, result pieces beta_res. On overlap the result
// write wins.
inline SparseLogits init_step_logits(const ReasoningStep& step, const PriorConfig& cfg) {
  if (!(cfg.beta_res > cfg.beta_op)) throw Error("prior config: beta_res must exceed beta_op");
  SparseLogits logits;
  for (TokenId id : step.operational_ids) detail::set_entry(logits, id, cfg.beta_op);
  for (TokenId id : step.result_ids) detail::set_entry(logits, id, cfg.beta_res);
  return logits;
}

inline SparsePrior prior_temperature(const SparseLogits& logits, double tau) {
  if (!(tau > 0)) throw Error("prior_temperature: tau must be positive");
  SparseLogits scaled = logits;
  for (auto& e : scaled) e.value /= tau;
  return SparsePrior{detail::stable_softmax(scaled), 0};
}

// Gumbel-softmax with caller-supplied noise, one value per logit entry (in
// ascending id order). Passing all zeros reduces to prior_temperature.
inline SparsePrior prior_gumbel_with_noise(const SparseLogits& logits, double tau, std::span<const double> noise,
                                           bool hard) {
  if (!(tau > 0)) throw Error("prior_gumbel: tau must be positive");
  if (logits.empty()) throw Error("prior: empty support");
  if (noise.size() != logits.size()) throw Error("prior_gumbel: noise length mismatch");
  SparseLogits perturbed = logits;
  for (std::size_t i = 0; i < perturbed.size(); ++i) perturbed[i].value = (perturbed[i].value + noise[i]) / tau;
  if (hard) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < perturbed.size(); ++i) {
      if (perturbed[i].value > perturbed[best].value) best = i;
    }
    return SparsePrior{{SparseEntry{perturbed[best].id, 1.0}}, 0};
  }
  return SparsePrior{detail::stable_softmax(perturbed), 0};
}

inline double sample_gumbel(SplitMix64& rng) { return -std::log(-std::log(rng.uniform_open())); }

inline SparsePrior prior_gumbel(const SparseLogits& logits, double tau, SplitMix64& rng, bool hard) {
  std::vector<double> noise(logits.size());
  for (double& g : noise) g = sample_gumbel(rng);
  return prior_gumbel_with_noise(logits, tau, noise, hard);
}

// lambda * uniform(K) + (1 - lambda) * result indicator. Multi-piece results
// split the result mass evenly; overlapping tokens receive both terms.
inline SparsePrior prior_mixture(const ReasoningStep& step, double lambda) {
  if (!(lambda >= 0 && lambda <= 1)) throw Error("prior_mixture: lambda must be in [0, 1]");
  if (step.operational_ids.empty() || step.result_ids.empty()) throw Error("prior_mixture: invalid step");
  std::vector<SparseEntry> m;
  const double op_share = lambda / static_cast<double>(step.operational_ids.size());
  const double res_share = (1.0 - lambda) / static_cast<double>(step.result_ids.size());
  for (TokenId id : step.operational_ids) detail::add_entry(m, id, op_share);
  for (TokenId id : step.result_ids) detail::add_entry(m, id, res_share);
  std::erase_if(m, [](const SparseEntry& e) { return e.value == 0.0; });
  return SparsePrior{std::move(m), step.index};
}

// Ablation: every token of the step gets the same mass.
inline SparsePrior prior_uniform(const ReasoningStep& step) {
  std::vector<SparseEntry> m;
  for (TokenId id : step.operational_ids) detail::set_entry(m, id, 0.0);
  for (TokenId id : step.result_ids) detail::set_entry(m, id, 0.0);
  for (auto& e : m) e.value = 1.0 / static_cast<double>(m.size());
  return SparsePrior{std::move(m), step.index};
}

// Ablation: random importance scores in [0, beta_res] over the step's tokens.
inline SparsePrior prior_random(const ReasoningStep& step, const PriorConfig& cfg, SplitMix64& rng) {
  SparseLogits scores;
  for (TokenId id : step.operational_ids) detail::set_entry(scores, id, 0.0);
  for (TokenId id : step.result_ids) detail::set_entry(scores, id, 0.0);
  for (auto& e : scores) e.value = rng.uniform_open() * cfg.beta_res;
  return prior_temperature(scores, cfg.tau);
}

inline FocusSet select_focus(const SparsePrior& p, std::size_t k, double delta) {
  if (k < 1) throw Error("select_focus: k must be at least 1");
  if (!(delta >= 0)) throw Error("select_focus: delta must be nonnegative");
  std::vector<SparseEntry> sorted;
  for (const auto& e : p.entries) {
    if (e.value > delta) sorted.push_back(e);
  }
  std::sort(sorted.begin(), sorted.end(), [](const SparseEntry& a, const SparseEntry& b) {
    return a.value != b.value ? a.value > b.value : a.id < b.id;
  });
  FocusSet f{k, delta, {}};
  for (std::size_t i = 0; i < sorted.size() && i < k; ++i) f.selected_ids.push_back(sorted[i].id);
  return f;
}

inline SparsePrior build_step_prior(const ReasoningStep& step, const PriorConfig& cfg, std::size_t instance_index) {
  SplitMix64 rng(derive_seed(cfg.seed, {instance_index, step.index}));
  SparsePrior p;
  switch (cfg.method) {
    case PriorMethod::Temp: p = prior_temperature(init_step_logits(step, cfg), cfg.tau); break;
    case PriorMethod::Gumbel: p = prior_gumbel(init_step_logits(step, cfg), cfg.tau, rng, cfg.hard); break;
    case PriorMethod::Mix: p = prior_mixture(step, cfg.lambda); break;
    case PriorMethod::Uniform: p = prior_uniform(step); break;
    case PriorMethod::Random: p = prior_random(step, cfg, rng); break;
  }
  p.step_index = step.index;
  return p;
}

// Priors and focus sets for every step of one instance.
struct InstancePriors {
  std::size_t index = 0;
  PriorMethod method = PriorMethod::Mix;
  std::vector<SparsePrior> steps;
  std::vector<FocusSet> focus;
};

inline std::vector<SparsePrior> build_priors(const Instance& inst, const Vocabulary& v, const PriorConfig& cfg,
                                             std::size_t instance_index = 0) {
  validate(cfg);
  const auto texts = segment_chain(inst.chain);
  std::vector<SparsePrior> out;
  out.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    try {
      out.push_back(build_step_prior(extract_step_tokens(texts[i], v, i + 1), cfg, instance_index));
    } catch (const Error& e) {
      throw Error("step " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

inline InstancePriors build_instance_priors(const Instance& inst, const Vocabulary& v, const PriorConfig& cfg,
                                            std::size_t instance_index) {
  InstancePriors ip;
  ip.index = instance_index;
  ip.method = cfg.method;
  ip.steps = build_priors(inst, v, cfg, instance_index);
  for (const auto& p : ip.steps) ip.focus.push_back(select_focus(p, cfg.k, cfg.delta));
  return ip;
}

inline std::vector<InstancePriors> build_dataset_priors(const Dataset& d, const Vocabulary& v, const PriorConfig& cfg) {
  std::vector<InstancePriors> out;
  out.reserve(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    try {
      out.push_back(build_instance_priors(d.instances[i], v, cfg, i));
    } catch (const Error& e) {
      throw Error("instance " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

// priors.jsonl line:
// {"index":i,"method":"mix","steps":[[[id,"prob"],...],...],"focus":[[id,...],...]}
// Probabilities are decimal strings with 12 significant digits.
inline std::string priors_to_jsonl_line(const InstancePriors& ip) {
  nlohmann::ordered_json j;
  j["index"] = ip.index;
  j["method"] = to_string(ip.method);
  nlohmann::ordered_json steps = nlohmann::ordered_json::array();
  for (const auto& p : ip.steps) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (const auto& e : p.entries) row.push_back({e.id, format_significant(e.value, 12)});
    steps.push_back(std::move(row));
  }
  j["steps"] = std::move(steps);
  nlohmann::ordered_json focus = nlohmann::ordered_json::array();
  for (const auto& f : ip.focus) focus.push_back(f.selected_ids);
  j["focus"] = std::move(focus);
  return j.dump();
}

inline InstancePriors priors_from_json(const nlohmann::json& j) {
  InstancePriors ip;
  ip.index = j.at("index").get<std::size_t>();
  ip.method = prior_method_from_string(j.at("method").get<std::string>());
  std::size_t step_no = 0;
  for (const auto& row : j.at("steps")) {
    SparsePrior p;
    p.step_index = ++step_no;
    for (const auto& pair : row) {
      p.entries.push_back({pair.at(0).get<TokenId>(), std::stod(pair.at(1).get<std::string>())});
    }
    ip.steps.push_back(std::move(p));
  }
  for (const auto& row : j.at("focus")) {
    FocusSet f;
    f.selected_ids = row.get<std::vector<TokenId>>();
    ip.focus.push_back(std::move(f));
  }
  if (ip.focus.size() != ip.steps.size()) throw Error("priors: focus/steps length mismatch");
  return ip;
}

inline void save_priors(const std::vector<InstancePriors>& all, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write priors: " + path);
  for (const auto& ip : all) out << priors_to_jsonl_line(ip) << '\n';
  if (!out) throw Error("write failed: " + path);
}

inline std::vector<InstancePriors> load_priors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read priors: " + path);
  std::vector<InstancePriors> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(priors_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw Error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace softreason
