#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "softreason/common.hpp"
#include "softreason/corpus.hpp"
#include "softreason/segment.hpp"

namespace softreason {

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kAnswerSep = 2;
inline constexpr TokenId kThinkEnd = 3;
inline constexpr std::size_t kCount = 4;
inline constexpr std::array<std::string_view, kCount> kSurface = {"<pad>", "<bos>", "<answer>", "</think>"};
}  // namespace special

// Whitespace vocabulary. Ids 0..3 are the reserved specials; the rest follow
// first-appearance order in the corpus.
class Vocabulary {
 public:
  Vocabulary() {
    for (std::string_view s : special::kSurface) add(std::string(s));
  }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < special::kCount) throw Error("vocabulary: missing special tokens");
    for (std::size_t i = 0; i < special::kCount; ++i) {
      if (tokens[i] != special::kSurface[i]) throw Error("vocabulary: special token mismatch at id " + std::to_string(i));
    }
    Vocabulary v;
    for (std::size_t i = special::kCount; i < tokens.size(); ++i) {
      if (is_reserved(tokens[i])) throw Error("vocabulary: reserved token '" + tokens[i] + "' listed twice");
      if (v.contains(tokens[i])) throw Error("vocabulary: duplicate token '" + tokens[i] + "'");
      v.add(tokens[i]);
    }
    return v;
  }

  static bool is_reserved(std::string_view s) {
    return std::find(special::kSurface.begin(), special::kSurface.end(), s) != special::kSurface.end();
  }

  std::size_t size() const { return id_to_token_.size(); }
  bool contains(const std::string& tok) const { return token_to_id_.count(tok) != 0; }

  TokenId id(const std::string& tok) const {
    auto it = token_to_id_.find(tok);
    if (it == token_to_id_.end()) throw Error("out-of-vocabulary token '" + tok + "'");
    return it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= size()) throw Error("token id out of range: " + std::to_string(id));
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return id_to_token_; }

  // Adds a non-special surface token if unseen.
  TokenId intern(const std::string& tok) {
    if (is_reserved(tok)) throw Error("reserved surface form '" + tok + "' found in corpus text");
    auto it = token_to_id_.find(tok);
    if (it != token_to_id_.end()) return it->second;
    return add(tok);
  }

  bool operator==(const Vocabulary& o) const { return id_to_token_ == o.id_to_token_; }

 private:
  TokenId add(std::string tok) {
    const TokenId id = static_cast<TokenId>(id_to_token_.size());
    token_to_id_.emplace(tok, id);
    id_to_token_.push_back(std::move(tok));
    return id;
  }

  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
};

inline Vocabulary build_vocab(const Dataset& d) {
  if (d.empty()) throw Error("build_vocab: empty dataset");
  Vocabulary v;
  for (const Instance& inst : d.instances) {
    for (const auto& t : split_whitespace(inst.question)) v.intern(t);
    for (const auto& step : segment_chain(inst.chain)) {
      for (const auto& t : split_whitespace(step)) v.intern(t);
    }
    for (const auto& t : split_whitespace(inst.answer)) v.intern(t);
  }
  return v;
}

inline std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& v) {
  std::vector<TokenId> ids;
  for (const auto& t : split_whitespace(std::string(text))) ids.push_back(v.id(t));
  return ids;
}

inline std::string detokenize(const std::vector<TokenId>& ids, const Vocabulary& v) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += v.token(ids[i]);
  }
  return out;
}

inline void tokenize_instance(Instance& inst, const Vocabulary& v) {
  inst.question_ids = tokenize(inst.question, v);
  inst.answer_ids = tokenize(inst.answer, v);
  if (inst.question_ids.empty()) throw Error("instance has an empty question");
  if (inst.answer_ids.empty()) throw Error("instance has an empty answer");
}

inline void tokenize_dataset(Dataset& d, const Vocabulary& v) {
  for (std::size_t i = 0; i < d.size(); ++i) {
    try {
      tokenize_instance(d.instances[i], v);
    } catch (const Error& e) {
      throw Error("instance " + std::to_string(i) + ": " + e.what());
    }
  }
}

// One `<<...>>` interior split around its `=`. Operational ids are distinct and
// kept in first-appearance order; `=` belongs to neither side.
struct ReasoningStep {
  std::string raw;
  std::vector<TokenId> operational_ids;
  std::vector<TokenId> result_ids;
  std::size_t index = 0;  // 1-based position in the chain
};

inline ReasoningStep extract_step_tokens(std::string_view step_text, const Vocabulary& v, std::size_t index) {
  const auto words = split_whitespace(std::string(step_text));
  const auto eq_count = std::count(words.begin(), words.end(), "=");
  if (eq_count == 0) throw Error("step " + std::to_string(index) + ": missing '=' in '" + std::string(step_text) + "'");
  if (eq_count > 1) throw Error("step " + std::to_string(index) + ": multiple '=' in '" + std::string(step_text) + "'");
  const auto eq = std::find(words.begin(), words.end(), "=");

  ReasoningStep step;
  step.raw = std::string(step_text);
  step.index = index;
  for (auto it = words.begin(); it != eq; ++it) {
    TokenId id = v.id(*it);
    if (std::find(step.operational_ids.begin(), step.operational_ids.end(), id) == step.operational_ids.end()) {
      step.operational_ids.push_back(id);
    }
  }
  for (auto it = eq + 1; it != words.end(); ++it) step.result_ids.push_back(v.id(*it));
  if (step.operational_ids.empty()) throw Error("step " + std::to_string(index) + ": empty left side");
  if (step.result_ids.empty()) throw Error("step " + std::to_string(index) + ": empty right side");
  return step;
}

inline std::vector<ReasoningStep> parse_chain(std::string_view chain, const Vocabulary& v) {
  const auto texts = segment_chain(chain);
  std::vector<ReasoningStep> steps;
  steps.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) steps.push_back(extract_step_tokens(texts[i], v, i + 1));
  return steps;
}

// vocab.json: {"tokens": [...], "specials": {"pad":0,"bos":1,"answer_sep":2,"think_end":3}}
inline nlohmann::ordered_json vocab_to_json(const Vocabulary& v) {
  nlohmann::ordered_json j;
  j["tokens"] = v.tokens();
  nlohmann::ordered_json sp;
  sp["pad"] = special::kPad;
  sp["bos"] = special::kBos;
  sp["answer_sep"] = special::kAnswerSep;
  sp["think_end"] = special::kThinkEnd;
  j["specials"] = sp;
  return j;
}

inline Vocabulary vocab_from_json(const nlohmann::json& j) {
  if (!j.contains("tokens") || !j["tokens"].is_array()) throw Error("vocab.json: missing 'tokens' array");
  if (j.contains("specials")) {
    const auto& sp = j["specials"];
    if (sp.value("pad", -1) != special::kPad || sp.value("bos", -1) != special::kBos ||
        sp.value("answer_sep", -1) != special::kAnswerSep || sp.value("think_end", -1) != special::kThinkEnd) {
      throw Error("vocab.json: unexpected special token ids");
    }
  }
  return Vocabulary::from_tokens(j["tokens"].get<std::vector<std::string>>());
}

inline void save_vocab(const Vocabulary& v, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocabulary: " + path);
  out << vocab_to_json(v).dump(1) << '\n';
}

inline Vocabulary load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read vocabulary: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("vocab.json: " + std::string(e.what()));
  }
  return vocab_from_json(j);
}

}  // namespace softreason
