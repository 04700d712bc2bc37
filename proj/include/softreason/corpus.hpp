#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "softreason/common.hpp"
#include "softreason/segment.hpp"

namespace softreason {

// One (question, reasoning chain, answer) triple. The id views are filled by
// tokenize_instance once a vocabulary exists.
struct Instance {
  std::string question;
  std::string chain;
  std::string answer;
  std::vector<TokenId> question_ids;
  std::vector<TokenId> answer_ids;
  std::size_t step_count = 0;

  bool operator==(const Instance&) const = default;
};

struct Dataset {
  std::vector<Instance> instances;
  std::string provenance;

  std::size_t size() const { return instances.size(); }
  bool empty() const { return instances.empty(); }
};

inline Instance make_instance(std::string question, std::string chain, std::string answer) {
  Instance inst;
  inst.question = std::move(question);
  inst.chain = std::move(chain);
  inst.answer = std::move(answer);
  inst.step_count = segment_chain(inst.chain).size();
  if (split_whitespace(inst.answer).empty()) throw Error("instance has an empty answer");
  return inst;
}

// Instances without any `<<...>>` segment are rejected here rather than
// silently dropped.
inline Dataset parse_jsonl(std::istream& in, std::string provenance) {
  Dataset d;
  d.provenance = std::move(provenance);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = d.provenance + ":" + std::to_string(line_no);
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error("malformed JSON at line " + where + ": " + e.what());
    }
    if (!obj.is_object()) throw Error("line " + where + " is not a JSON object");
    auto field = [&](const char* name) {
      auto it = obj.find(name);
      if (it == obj.end()) throw Error("line " + where + ": missing field '" + name + "'");
      if (!it->is_string()) throw Error("line " + where + ": field '" + name + "' is not a string");
      return it->get<std::string>();
    };
    std::string q = field("question");
    std::string c = field("chain");
    std::string a = field("answer");
    try {
      d.instances.push_back(make_instance(std::move(q), std::move(c), std::move(a)));
    } catch (const Error& e) {
      throw Error("line " + where + ": " + e.what());
    }
  }
  return d;
}

inline Dataset load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read dataset file: " + path);
  return parse_jsonl(in, path);
}

inline std::string to_jsonl(const Dataset& d) {
  std::string out;
  for (const Instance& inst : d.instances) {
    nlohmann::ordered_json obj;
    obj["question"] = inst.question;
    obj["chain"] = inst.chain;
    obj["answer"] = inst.answer;
    out += obj.dump();
    out += '\n';
  }
  return out;
}

inline void save_jsonl(const Dataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset file: " + path);
  out << to_jsonl(d);
  if (!out) throw Error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Synthetic arithmetic chains
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::size_t count = 1000;
  int min_steps = 1;
  int max_steps = 2;
  std::int64_t operand_lo = 1;
  std::int64_t operand_hi = 9;
  std::string operators = "+-";
  std::uint64_t seed = 777;
};

inline constexpr std::int64_t kMaxMagnitude = 999;

inline nlohmann::ordered_json to_json(const SynthConfig& c) {
  nlohmann::ordered_json j;
  j["count"] = c.count;
  j["min_steps"] = c.min_steps;
  j["max_steps"] = c.max_steps;
  j["operand_lo"] = c.operand_lo;
  j["operand_hi"] = c.operand_hi;
  j["operators"] = c.operators;
  j["seed"] = c.seed;
  return j;
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.count = j.value("count", c.count);
  c.min_steps = j.value("min_steps", c.min_steps);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.operand_lo = j.value("operand_lo", c.operand_lo);
  c.operand_hi = j.value("operand_hi", c.operand_hi);
  c.operators = j.value("operators", c.operators);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline void validate(const SynthConfig& c) {
  if (c.count == 0) throw Error("synth config: count must be positive");
  if (c.max_steps < 1 || c.max_steps > 5) throw Error("synth config: max_steps must be in [1, 5]");
  if (c.min_steps < 1 || c.min_steps > c.max_steps) {
    throw Error("synth config: min_steps must be in [1, max_steps]");
  }
  if (c.operand_lo > c.operand_hi) throw Error("synth config: empty operand range");
  if (std::max(std::abs(c.operand_lo), std::abs(c.operand_hi)) > kMaxMagnitude) {
    throw Error("synth config: operands must have at most 3 digits");
  }
  if (c.operators.empty()) throw Error("synth config: no operators");
  for (char op : c.operators) {
    if (op != '+' && op != '-' && op != '*' && op != '/') {
      throw Error(std::string("synth config: unsupported operator '") + op + "'");
    }
  }
  if (c.operators.find('/') != std::string::npos && c.operand_lo == 0 && c.operand_hi == 0) {
    throw Error("synth config: division requested but operand range has no nonzero divisor");
  }
}

namespace detail {

inline std::int64_t apply_op(char op, std::int64_t a, std::int64_t b) {
  switch (op) {
    case '+': return a + b;
    case '-': return a - b;
    case '*': return a * b;
    default: return a / b;
  }
}

inline bool in_bounds(std::int64_t v) { return v >= -kMaxMagnitude && v <= kMaxMagnitude; }

// Right operands b that keep `left op b` exact and within three digits.
inline std::vector<std::int64_t> feasible_right(char op, std::int64_t left, const SynthConfig& c) {
  std::vector<std::int64_t> out;
  for (std::int64_t b = c.operand_lo; b <= c.operand_hi; ++b) {
    if (op == '/' && (b == 0 || left % b != 0)) continue;
    if (in_bounds(apply_op(op, left, b))) out.push_back(b);
  }
  return out;
}

inline std::string op_text(char op) { return std::string(1, op); }

}  // namespace detail

// Chains are evaluated left to right: each step consumes the previous result.
// Division steps are drawn backward (divisor and quotient first) so they are
// always exact.
inline Dataset gen_synthetic(const SynthConfig& cfg) {
  validate(cfg);
  Dataset d;
  d.provenance = "synthetic:" + to_json(cfg).dump();
  SplitMix64 rng(cfg.seed);
  constexpr int kMaxRetries = 1000;

  for (std::size_t n = 0; n < cfg.count; ++n) {
    bool built = false;
    for (int attempt = 0; attempt < kMaxRetries && !built; ++attempt) {
      const int steps = static_cast<int>(rng.uniform_int(cfg.min_steps, cfg.max_steps));
      std::string question, chain;
      std::int64_t acc = 0;
      bool ok = true;
      for (int s = 0; s < steps && ok; ++s) {
        char op = cfg.operators[rng.index(cfg.operators.size())];
        std::int64_t left = 0, right = 0;
        if (s == 0 && op == '/') {
          std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
          for (std::int64_t b = cfg.operand_lo; b <= cfg.operand_hi; ++b) {
            if (b == 0) continue;
            for (std::int64_t q = cfg.operand_lo; q <= cfg.operand_hi; ++q) {
              if (detail::in_bounds(b * q)) pairs.emplace_back(b, q);
            }
          }
          if (pairs.empty()) { ok = false; break; }
          auto [b, q] = pairs[rng.index(pairs.size())];
          left = b * q;
          right = b;
        } else {
          left = s == 0 ? rng.uniform_int(cfg.operand_lo, cfg.operand_hi) : acc;
          auto rights = detail::feasible_right(op, left, cfg);
          if (rights.empty()) { ok = false; break; }
          right = rights[rng.index(rights.size())];
        }
        const std::int64_t result = detail::apply_op(op, left, right);
        if (s == 0) {
          question = std::to_string(left) + " " + detail::op_text(op) + " " + std::to_string(right);
        } else {
          question += " then " + detail::op_text(op) + " " + std::to_string(right);
          chain += ' ';
        }
        chain += "<<" + std::to_string(left) + " " + detail::op_text(op) + " " + std::to_string(right) +
                 " = " + std::to_string(result) + ">>";
        acc = result;
      }
      if (!ok) continue;
      d.instances.push_back(make_instance(question, chain, std::to_string(acc)));
      built = true;
    }
    if (!built) throw Error("synth config infeasible: could not build an exact chain");
  }
  return d;
}

// Splits into (train, val, test). Part sizes are floor(n * fraction) for val and
// test; the remainder goes to train. Each part keeps the dataset's order.
struct Split {
  Dataset train, val, test;
  // Positions in the source dataset, parallel to each part's instances.
  std::vector<std::size_t> train_index, val_index, test_index;
};

inline Split split_dataset(const Dataset& d, double f_train, double f_val, double f_test, std::uint64_t seed) {
  if (d.empty()) throw Error("split_dataset: empty dataset");
  if (f_train < 0 || f_val < 0 || f_test < 0) throw Error("split_dataset: negative fraction");
  if (std::abs(f_train + f_val + f_test - 1.0) > 1e-9) throw Error("split_dataset: fractions must sum to 1");
  const std::size_t n = d.size();
  auto part = [n](double f) { return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9)); };
  const std::size_t n_val = part(f_val);
  const std::size_t n_test = part(f_test);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  SplitMix64 rng(seed);
  shuffle_in_place(order, rng);

  std::vector<int> label(n, 0);
  for (std::size_t i = 0; i < n_val; ++i) label[order[i]] = 1;
  for (std::size_t i = n_val; i < n_val + n_test; ++i) label[order[i]] = 2;

  Split s;
  s.train.provenance = d.provenance + "#train";
  s.val.provenance = d.provenance + "#val";
  s.test.provenance = d.provenance + "#test";
  for (std::size_t i = 0; i < n; ++i) {
    Dataset& target = label[i] == 0 ? s.train : label[i] == 1 ? s.val : s.test;
    auto& index = label[i] == 0 ? s.train_index : label[i] == 1 ? s.val_index : s.test_index;
    target.instances.push_back(d.instances[i]);
    index.push_back(i);
  }
  return s;
}

}  // namespace softreason
