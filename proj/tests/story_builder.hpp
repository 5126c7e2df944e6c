#pragma once

#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mneme/corpus.hpp"

// Hand-written story assembly for tests: each sentence is a pair of
// space-separated token and tag strings.
namespace testutil {

inline std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

inline mneme::AnnotatedNarrative story_of(
    const std::string& id,
    const std::vector<std::pair<std::string, std::string>>& sentences,
    std::vector<mneme::Mention> mentions) {
  mneme::AnnotatedNarrative n;
  n.story_id = id;
  for (const auto& [toks, tags] : sentences) {
    auto tv = split_ws(toks);
    auto gv = split_ws(tags);
    n.tokens.insert(n.tokens.end(), tv.begin(), tv.end());
    n.pos_tags.insert(n.pos_tags.end(), gv.begin(), gv.end());
    n.sentence_bounds.push_back(static_cast<long>(n.tokens.size()));
  }
  n.mentions = std::move(mentions);
  return n;
}

}  // namespace testutil
