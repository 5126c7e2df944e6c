#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mneme/errors.hpp"

// Annotated-narrative data model: stories arrive pre-tokenized with sentence
// boundaries, entity mention spans, and per-token POS tags. Entity ids are
// story-local and dense.

namespace mneme {

struct Mention {
  int entity_id = 0;
  long start = 0;
  long end = 0;  // exclusive
  bool operator==(const Mention&) const = default;
};

struct AnnotatedNarrative {
  std::string story_id;
  std::vector<std::string> tokens;
  // end-exclusive token offset of each sentence; strictly increasing, the
  // last entry equals tokens.size()
  std::vector<long> sentence_bounds;
  std::vector<Mention> mentions;
  std::vector<std::string> pos_tags;

  long num_tokens() const { return static_cast<long>(tokens.size()); }
  long num_sentences() const { return static_cast<long>(sentence_bounds.size()); }

  long sentence_of(long tok) const {
    auto it = std::upper_bound(sentence_bounds.begin(), sentence_bounds.end(), tok);
    return static_cast<long>(it - sentence_bounds.begin());
  }

  std::pair<long, long> sentence_span(long s) const {
    const long b = s == 0 ? 0 : sentence_bounds[static_cast<size_t>(s - 1)];
    return {b, sentence_bounds[static_cast<size_t>(s)]};
  }

  // dense-id count; 0 when the story has no mentions
  int num_entities() const {
    int m = -1;
    for (const auto& mn : mentions) m = std::max(m, mn.entity_id);
    return m + 1;
  }

  void validate() const {
    auto fail = [&](const std::string& field, const std::string& why) {
      throw input_error("story '" + story_id + "': " + field + ": " + why);
    };
    const long T = num_tokens();
    if (T == 0) fail("tokens", "empty story");
    if (pos_tags.size() != tokens.size())
      fail("pos_tags", "length " + std::to_string(pos_tags.size()) +
                           " != tokens length " + std::to_string(T));
    if (sentence_bounds.empty()) fail("sentence_bounds", "empty");
    long prev = 0;
    for (size_t i = 0; i < sentence_bounds.size(); ++i) {
      if (sentence_bounds[i] <= prev)
        fail("sentence_bounds", "offset " + std::to_string(sentence_bounds[i]) +
                                    " at index " + std::to_string(i) +
                                    " not strictly increasing");
      prev = sentence_bounds[i];
    }
    if (sentence_bounds.back() != T)
      fail("sentence_bounds", "last offset " + std::to_string(sentence_bounds.back()) +
                                  " != token count " + std::to_string(T));
    std::set<int> ids;
    for (const auto& m : mentions) {
      if (m.entity_id < 0) fail("mentions", "negative entity id");
      if (m.start < 0 || m.end > T || m.start >= m.end)
        fail("mentions", "span [" + std::to_string(m.start) + "," +
                             std::to_string(m.end) + ") out of range");
      if (sentence_of(m.start) != sentence_of(m.end - 1))
        fail("mentions", "span [" + std::to_string(m.start) + "," +
                             std::to_string(m.end) + ") crosses a sentence boundary");
      ids.insert(m.entity_id);
    }
    if (!ids.empty()) {
      int want = 0;
      for (int id : ids)
        if (id != want++)
          fail("mentions", "entity ids not dense: missing id " +
                               std::to_string(want - 1));
    }
  }
};

// ---------------------------------------------------------------------------
// vocabulary

class Vocab {
 public:
  static constexpr int PAD = 0, UNK = 1, BOS = 2, EOS = 3, SEP = 4, EOP = 5;
  static constexpr int num_specials = 6;

  static const std::array<const char*, num_specials>& special_surfaces() {
    static const std::array<const char*, num_specials> s = {
        "<PAD>", "<UNK>", "<BOS>", "<EOS>", "<SEP>", "<EOP>"};
    return s;
  }

  Vocab() {
    for (const char* s : special_surfaces()) push(s);
  }

  int add(const std::string& tok) {
    auto it = map_.find(tok);
    if (it != map_.end()) return it->second;
    return push(tok);
  }

  // UNK fallback lookup
  int id_of(const std::string& tok) const {
    auto it = map_.find(tok);
    return it == map_.end() ? UNK : it->second;
  }

  bool contains(const std::string& tok) const { return map_.count(tok) != 0; }

  const std::string& token_of(int id) const {
    if (id < 0 || id >= size())
      throw input_error("token id " + std::to_string(id) + " outside vocab of size " +
                        std::to_string(size()));
    return toks_[static_cast<size_t>(id)];
  }

  int size() const { return static_cast<int>(toks_.size()); }

  static Vocab build(const std::vector<AnnotatedNarrative>& corpus) {
    std::set<std::string> uniq;
    for (const auto& n : corpus)
      for (const auto& t : n.tokens) uniq.insert(t);
    Vocab v;
    for (const auto& t : uniq)  // std::set iterates lexicographically
      v.add(t);
    return v;
  }

  // one non-special token per line; line k holds id num_specials + k
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw input_error("cannot write vocab file " + path);
    for (int i = num_specials; i < size(); ++i) out << toks_[static_cast<size_t>(i)] << "\n";
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw input_error("cannot read vocab file " + path);
    Vocab v;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      v.add(line);
    }
    return v;
  }

 private:
  int push(const std::string& tok) {
    const int id = size();
    auto [it, fresh] = map_.emplace(tok, id);
    if (!fresh) throw contract_error("duplicate vocab token " + tok);
    toks_.push_back(tok);
    return id;
  }

  std::vector<std::string> toks_;
  std::unordered_map<std::string, int> map_;
};

// ---------------------------------------------------------------------------
// entity prompts

struct EntityPrompt {
  // canonical[j] = first-mention surface tokens of entity j
  std::vector<std::vector<std::string>> canonical;

  // SEP-joined token stream closed by EOP
  std::vector<std::string> render() const {
    std::vector<std::string> out;
    for (size_t j = 0; j < canonical.size(); ++j) {
      if (j) out.push_back(Vocab::special_surfaces()[Vocab::SEP]);
      out.insert(out.end(), canonical[j].begin(), canonical[j].end());
    }
    out.push_back(Vocab::special_surfaces()[Vocab::EOP]);
    return out;
  }

  bool operator==(const EntityPrompt&) const = default;
};

// First mention per entity, ordered by entity id. Shipped corpora assign ids
// in first-appearance order, so id order and appearance order coincide.
inline EntityPrompt build_entity_prompt(const AnnotatedNarrative& n) {
  const int E = n.num_entities();
  EntityPrompt p;
  p.canonical.resize(static_cast<size_t>(E));
  std::vector<long> first(static_cast<size_t>(E), -1);
  for (const auto& m : n.mentions) {
    auto& f = first[static_cast<size_t>(m.entity_id)];
    if (f < 0 || m.start < f) {
      f = m.start;
      auto& surf = p.canonical[static_cast<size_t>(m.entity_id)];
      surf.assign(n.tokens.begin() + m.start, n.tokens.begin() + m.end);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// tokenization

inline std::vector<int> tokenize(const std::vector<std::string>& toks,
                                 const Vocab& v) {
  std::vector<int> ids;
  ids.reserve(toks.size());
  for (const auto& t : toks) ids.push_back(v.id_of(t));
  return ids;
}

inline std::vector<std::string> detokenize(const std::vector<int>& ids,
                                           const Vocab& v) {
  std::vector<std::string> toks;
  toks.reserve(ids.size());
  for (int id : ids) toks.push_back(v.token_of(id));
  return toks;
}

inline std::string join_tokens(const std::vector<std::string>& toks) {
  std::string s;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) s += ' ';
    s += toks[i];
  }
  return s;
}

// ---------------------------------------------------------------------------
// JSONL serialization (canonical form: sorted keys, compact, LF)

inline nlohmann::json narrative_to_json(const AnnotatedNarrative& n) {
  nlohmann::json j;
  j["story_id"] = n.story_id;
  j["tokens"] = n.tokens;
  j["sentence_bounds"] = n.sentence_bounds;
  auto& ms = j["mentions"] = nlohmann::json::array();
  for (const auto& m : n.mentions)
    ms.push_back(nlohmann::json::array({m.entity_id, m.start, m.end}));
  j["pos_tags"] = n.pos_tags;
  return j;
}

inline AnnotatedNarrative narrative_from_json(const nlohmann::json& j) {
  AnnotatedNarrative n;
  n.story_id = j.at("story_id").get<std::string>();
  n.tokens = j.at("tokens").get<std::vector<std::string>>();
  n.sentence_bounds = j.at("sentence_bounds").get<std::vector<long>>();
  for (const auto& m : j.at("mentions")) {
    if (!m.is_array() || m.size() != 3)
      throw format_error("mention record must be [entity_id, start, end]");
    n.mentions.push_back(Mention{m[0].get<int>(), m[1].get<long>(), m[2].get<long>()});
  }
  n.pos_tags = j.at("pos_tags").get<std::vector<std::string>>();
  return n;
}

inline void save_jsonl(const std::vector<AnnotatedNarrative>& corpus,
                       const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw input_error("cannot write corpus file " + path);
  for (const auto& n : corpus) out << narrative_to_json(n).dump() << "\n";
}

inline std::vector<AnnotatedNarrative> load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("cannot read corpus file " + path);
  std::vector<AnnotatedNarrative> corpus;
  std::vector<long> bad_lines;
  std::string first_err;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      auto n = narrative_from_json(j);
      n.validate();
      corpus.push_back(std::move(n));
    } catch (const input_error&) {
      throw;  // validation failures carry story context already
    } catch (const std::exception& e) {
      bad_lines.push_back(lineno);
      if (first_err.empty()) first_err = e.what();
    }
  }
  if (!bad_lines.empty()) {
    std::string msg = path + ": malformed records on lines";
    for (long l : bad_lines) msg += " " + std::to_string(l);
    throw format_error(msg + " (first error: " + first_err + ")");
  }
  return corpus;
}

}  // namespace mneme
