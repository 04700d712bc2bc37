#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "softreason/common.hpp"

namespace softreason {

// Splits a reasoning chain into the interiors of its `<<...>>` segments, left to
// right. Text outside the delimiters is ignored.
inline std::vector<std::string> segment_chain(std::string_view chain) {
  std::vector<std::string> steps;
  std::size_t pos = 0;
  std::size_t open = std::string_view::npos;
  while (pos < chain.size()) {
    if (chain.compare(pos, 2, "<<") == 0) {
      if (open != std::string_view::npos) {
        throw Error("segment_chain: nested '<<' at offset " + std::to_string(pos));
      }
      open = pos + 2;
      pos += 2;
    } else if (chain.compare(pos, 2, ">>") == 0) {
      if (open == std::string_view::npos) {
        throw Error("segment_chain: unbalanced '>>' at offset " + std::to_string(pos));
      }
      steps.emplace_back(chain.substr(open, pos - open));
      open = std::string_view::npos;
      pos += 2;
    } else {
      ++pos;
    }
  }
  if (open != std::string_view::npos) {
    throw Error("segment_chain: unbalanced '<<' at offset " + std::to_string(open - 2));
  }
  if (steps.empty()) throw Error("segment_chain: chain has no '<<...>>' segments");
  return steps;
}

}  // namespace softreason
