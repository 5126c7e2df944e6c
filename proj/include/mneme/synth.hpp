#pragma once

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mneme/corpus.hpp"
#include "mneme/errors.hpp"
#include "mneme/rng.hpp"
#include "mneme/stopwords.hpp"

// Synthetic story generator. Stories are built from fixed-width sentence
// templates (8 tokens each), so sections, sentences, POS tags, and mention
// spans are exact by construction. Mention sections and attribute words are
// planned first; ground-truth metrics are then recovered by a deliberately
// naive scan over the emitted artifacts, independent of the metrics module.

namespace mneme {

struct SyntheticCorpusSpec {
  int num_stories = 50;
  int entities_min = 2;
  int entities_max = 4;
  int sections = 10;             // L
  int sentences_per_section = 4;
  int span_min = 3;              // first-to-last section distance
  int span_max = 9;
  double extra_mention_prob = 0.4;   // fill sections strictly inside the span
  double partial_mention_prob = 0.3; // later mentions use the first name only
  double co_mention_prob = 0.2;      // pair two same-section entities
  bool disjoint_attributes = true;
  int verbs_per_entity = 2;
  int adjs_per_entity = 2;
  uint64_t seed = 7;

  void validate() const;
  static SyntheticCorpusSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Ground truth emitted alongside each story. Null-valued metrics are
// undefined (no mentions, or zero attributes in scope).
struct StoryTruth {
  std::string story_id;
  std::optional<double> C, Cbar;
  std::vector<std::optional<double>> V;  // per entity id
  std::optional<double> V_mean;
  std::optional<double> U;
  int exact = 0, subset = 0;
  int unique_entities = 0;
  std::optional<double> mentions_per_entity;
};

struct SynthResult {
  std::vector<AnnotatedNarrative> corpus;
  std::vector<StoryTruth> truth;
};

namespace synth_detail {

constexpr int kSentWidth = 8;

inline const std::vector<std::string>& first_names() {
  static const std::vector<std::string> v = {
      "Alice", "Brandon", "Clara", "Derek", "Elena", "Felix", "Grace", "Hugo",
      "Iris",  "Jonas",   "Kara",  "Liam",  "Mona",  "Nathan", "Olga", "Pablo"};
  return v;
}
inline const std::vector<std::string>& surnames() {
  static const std::vector<std::string> v = {
      "Archer",  "Bennett", "Castillo", "Drummond", "Ellis",  "Fontaine",
      "Graves",  "Holloway", "Ivanov",  "Jennings", "Keller", "Lowell",
      "Mercer",  "Norwood", "Okafor",  "Pratt"};
  return v;
}
inline const std::vector<std::string>& verb_pool() {
  static const std::vector<std::string> v = {
      "ran",      "jumped",  "smiled",   "shouted", "wandered", "slept",
      "laughed",  "argued",  "painted",  "sailed",  "climbed",  "whistled",
      "stumbled", "danced",  "growled",  "marched", "sketched", "paused",
      "hummed",   "sprinted", "yawned",  "nodded",  "frowned",  "cheered"};
  return v;
}
inline const std::vector<std::string>& adj_pool() {
  static const std::vector<std::string> v = {
      "red",      "quiet",  "brave",   "dusty",  "golden",  "narrow",
      "cheerful", "bitter", "pale",    "sturdy", "gentle",  "fierce",
      "mossy",    "crooked", "shiny",  "somber", "lively",  "rusty",
      "velvet",   "stormy", "tidy",    "grim",   "mellow",  "bright"};
  return v;
}
inline const std::vector<std::string>& noun_pool() {
  static const std::vector<std::string> v = {
      "garden", "harbor", "lantern", "bridge", "meadow", "tower",
      "market", "orchard", "cellar", "valley", "mill",   "courtyard"};
  return v;
}
// filler-sentence adjectives stay disjoint from entity pools so disjoint
// attribute specs really yield V = 100
inline const std::vector<std::string>& filler_adjs() {
  static const std::vector<std::string> v = {"ancient",  "hollow", "frozen",
                                             "silent",   "crimson", "weathered"};
  return v;
}

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[static_cast<size_t>(rng.below(static_cast<uint64_t>(i)))]);
}

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[static_cast<size_t>(rng.below(static_cast<uint64_t>(v.size())))];
}

}  // namespace synth_detail

inline void SyntheticCorpusSpec::validate() const {
  auto bad = [](const std::string& why) { throw config_error("synthetic spec: " + why); };
  if (num_stories <= 0) bad("num_stories must be positive");
  if (entities_min < 1 || entities_min > entities_max) bad("bad entity range");
  if (entities_max > static_cast<int>(synth_detail::first_names().size()))
    bad("entities_max exceeds the name pool");
  if (sections < 1) bad("sections must be positive");
  if (sentences_per_section < entities_max)
    bad("sentences_per_section must be >= entities_max so every planned mention fits");
  if (span_min < 0 || span_min > span_max) bad("bad span range");
  if (span_max > sections - 1)
    bad("span_max " + std::to_string(span_max) + " exceeds sections-1 = " +
        std::to_string(sections - 1));
  for (double p : {extra_mention_prob, partial_mention_prob, co_mention_prob})
    if (p < 0.0 || p > 1.0) bad("probabilities must lie in [0,1]");
  if (verbs_per_entity < 1 || adjs_per_entity < 1) bad("attribute pools must be non-empty");
  if (disjoint_attributes) {
    if (verbs_per_entity * entities_max > static_cast<int>(synth_detail::verb_pool().size()))
      bad("disjoint verb pools exceed the master verb list");
    if (adjs_per_entity * entities_max > static_cast<int>(synth_detail::adj_pool().size()))
      bad("disjoint adjective pools exceed the master adjective list");
  }
}

inline SyntheticCorpusSpec SyntheticCorpusSpec::from_json(const nlohmann::json& j) {
  SyntheticCorpusSpec s;
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
  };
  get("num_stories", s.num_stories);
  get("entities_min", s.entities_min);
  get("entities_max", s.entities_max);
  get("sections", s.sections);
  get("sentences_per_section", s.sentences_per_section);
  get("span_min", s.span_min);
  get("span_max", s.span_max);
  get("extra_mention_prob", s.extra_mention_prob);
  get("partial_mention_prob", s.partial_mention_prob);
  get("co_mention_prob", s.co_mention_prob);
  get("disjoint_attributes", s.disjoint_attributes);
  get("verbs_per_entity", s.verbs_per_entity);
  get("adjs_per_entity", s.adjs_per_entity);
  get("seed", s.seed);
  s.validate();
  return s;
}

inline nlohmann::json SyntheticCorpusSpec::to_json() const {
  return nlohmann::json{{"num_stories", num_stories},
                        {"entities_min", entities_min},
                        {"entities_max", entities_max},
                        {"sections", sections},
                        {"sentences_per_section", sentences_per_section},
                        {"span_min", span_min},
                        {"span_max", span_max},
                        {"extra_mention_prob", extra_mention_prob},
                        {"partial_mention_prob", partial_mention_prob},
                        {"co_mention_prob", co_mention_prob},
                        {"disjoint_attributes", disjoint_attributes},
                        {"verbs_per_entity", verbs_per_entity},
                        {"adjs_per_entity", adjs_per_entity},
                        {"seed", seed}};
}

// ---------------------------------------------------------------------------
// naive reference metrics (used as ground truth; plain loops on purpose)

inline StoryTruth naive_story_truth(const AnnotatedNarrative& n, int L = 10,
                                    int top_k = 3) {
  StoryTruth out;
  out.story_id = n.story_id;
  const long T = n.num_tokens();
  const long sec_size = (T + L - 1) / L;
  const int E = n.num_entities();
  out.unique_entities = E;
  if (E > 0)
    out.mentions_per_entity =
        static_cast<double>(n.mentions.size()) / static_cast<double>(E);

  // per-entity mention sections and counts
  std::vector<std::vector<long>> sections(static_cast<size_t>(E));
  std::vector<long> first_start(static_cast<size_t>(E), -1);
  for (const auto& m : n.mentions) {
    sections[static_cast<size_t>(m.entity_id)].push_back(m.start / sec_size);
    auto& f = first_start[static_cast<size_t>(m.entity_id)];
    if (f < 0 || m.start < f) f = m.start;
  }

  if (E > 0) {
    // protagonists: top_k by count, ties by earliest first mention
    std::vector<int> order(static_cast<size_t>(E));
    for (int i = 0; i < E; ++i) order[static_cast<size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      const size_t sa = sections[static_cast<size_t>(a)].size();
      const size_t sb = sections[static_cast<size_t>(b)].size();
      if (sa != sb) return sa > sb;
      return first_start[static_cast<size_t>(a)] < first_start[static_cast<size_t>(b)];
    });
    const int P = std::min<int>(top_k, E);
    double span_sum = 0.0, distinct_sum = 0.0;
    for (int p = 0; p < P; ++p) {
      const auto& ss = sections[static_cast<size_t>(order[static_cast<size_t>(p)])];
      long lo = ss[0], hi = ss[0];
      std::set<long> uniq;
      for (long s : ss) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
        uniq.insert(s);
      }
      span_sum += static_cast<double>(hi - lo);
      distinct_sum += static_cast<double>(uniq.size());
    }
    out.C = span_sum / P;
    out.Cbar = distinct_sum / P;
  }

  // attribute sets: verbs/adjectives per sentence, lowercase surfaces
  const long S = n.num_sentences();
  std::vector<std::set<std::string>> attrs(static_cast<size_t>(S));
  for (long s = 0; s < S; ++s) {
    auto [b, e] = n.sentence_span(s);
    for (long t = b; t < e; ++t)
      if (n.pos_tags[static_cast<size_t>(t)] == "VERB" ||
          n.pos_tags[static_cast<size_t>(t)] == "ADJ")
        attrs[static_cast<size_t>(s)].insert(lowercase(n.tokens[static_cast<size_t>(t)]));
  }
  std::vector<std::set<int>> ents_in(static_cast<size_t>(S));
  for (const auto& m : n.mentions)
    ents_in[static_cast<size_t>(n.sentence_of(m.start))].insert(m.entity_id);

  out.V.assign(static_cast<size_t>(E), std::nullopt);
  double v_sum = 0.0;
  int v_count = 0;
  for (int i = 0; i < E; ++i) {
    std::set<std::string> own, others;
    for (long s = 0; s < S; ++s) {
      const auto& a = attrs[static_cast<size_t>(s)];
      if (ents_in[static_cast<size_t>(s)].count(i))
        own.insert(a.begin(), a.end());
      else
        others.insert(a.begin(), a.end());
    }
    if (own.empty()) continue;
    int uniq = 0;
    for (const auto& w : own)
      if (!others.count(w)) ++uniq;
    const double vi = 100.0 * uniq / static_cast<double>(own.size());
    out.V[static_cast<size_t>(i)] = vi;
    v_sum += vi;
    ++v_count;
  }
  if (v_count > 0) out.V_mean = v_sum / v_count;
  if (out.C.has_value())
    out.U = (*out.C / (static_cast<double>(L) * E)) * v_sum;

  // exact/subset match of the story text against its own prompt
  auto prompt = build_entity_prompt(n);
  std::vector<std::string> low(n.tokens.size());
  for (size_t i = 0; i < n.tokens.size(); ++i) low[i] = lowercase(n.tokens[i]);
  for (const auto& canon : prompt.canonical) {
    std::vector<std::string> want(canon.size());
    for (size_t i = 0; i < canon.size(); ++i) want[i] = lowercase(canon[i]);
    bool exact = false;
    for (size_t s = 0; s + want.size() <= low.size() && !exact; ++s) {
      bool all = true;
      for (size_t k = 0; k < want.size(); ++k)
        if (low[s + k] != want[k]) {
          all = false;
          break;
        }
      exact = all;
    }
    if (exact) ++out.exact;
    std::vector<std::string> content;
    for (const auto& w : want)
      if (!stopwords().count(w)) content.push_back(w);
    if (content.empty()) content = want;
    bool sub = false;
    for (const auto& w : content)
      if (std::find(low.begin(), low.end(), w) != low.end()) {
        sub = true;
        break;
      }
    if (sub) ++out.subset;
  }
  return out;
}

// ---------------------------------------------------------------------------
// generator

namespace synth_detail {

struct PlannedEntity {
  std::string first, last;
  std::vector<std::string> verbs, adjs;
  std::vector<int> present_sections;
  bool seen = false;  // first realization emits the full name
};

struct SentencePlan {
  std::vector<int> entities;  // empty = filler
};

}  // namespace synth_detail

inline AnnotatedNarrative synth_story(const SyntheticCorpusSpec& spec,
                                      const std::string& story_id, Rng rng) {
  using namespace synth_detail;
  const int L = spec.sections;
  const int S = spec.sentences_per_section;
  const int E = spec.entities_min +
                static_cast<int>(rng.below(static_cast<uint64_t>(
                    spec.entities_max - spec.entities_min + 1)));

  // names: distinct firsts and surnames, independently shuffled pairing
  std::vector<std::string> firsts = first_names(), lasts = surnames();
  shuffle(firsts, rng);
  shuffle(lasts, rng);
  std::vector<PlannedEntity> ents(static_cast<size_t>(E));
  for (int i = 0; i < E; ++i) {
    ents[static_cast<size_t>(i)].first = firsts[static_cast<size_t>(i)];
    ents[static_cast<size_t>(i)].last = lasts[static_cast<size_t>(i)];
  }

  // attribute pools
  std::vector<std::string> verbs = verb_pool(), adjs = adj_pool();
  shuffle(verbs, rng);
  shuffle(adjs, rng);
  for (int i = 0; i < E; ++i) {
    auto& en = ents[static_cast<size_t>(i)];
    if (spec.disjoint_attributes) {
      for (int k = 0; k < spec.verbs_per_entity; ++k)
        en.verbs.push_back(verbs[static_cast<size_t>(i * spec.verbs_per_entity + k)]);
      for (int k = 0; k < spec.adjs_per_entity; ++k)
        en.adjs.push_back(adjs[static_cast<size_t>(i * spec.adjs_per_entity + k)]);
    } else {
      // heavy overlap: everyone draws from the same small shared prefix
      const int shared_v = std::min<int>(spec.verbs_per_entity + 1,
                                         static_cast<int>(verbs.size()));
      const int shared_a = std::min<int>(spec.adjs_per_entity + 1,
                                         static_cast<int>(adjs.size()));
      for (int k = 0; k < spec.verbs_per_entity; ++k)
        en.verbs.push_back(verbs[rng.below(static_cast<uint64_t>(shared_v))]);
      for (int k = 0; k < spec.adjs_per_entity; ++k)
        en.adjs.push_back(adjs[rng.below(static_cast<uint64_t>(shared_a))]);
    }
  }

  // mention sections: endpoints from the span profile, extras inside
  for (auto& en : ents) {
    const int span = spec.span_min +
                     static_cast<int>(rng.below(static_cast<uint64_t>(
                         spec.span_max - spec.span_min + 1)));
    const int f = static_cast<int>(rng.below(static_cast<uint64_t>(L - span)));
    en.present_sections.push_back(f);
    for (int s = f + 1; s < f + span; ++s)
      if (rng.uniform() < spec.extra_mention_prob) en.present_sections.push_back(s);
    if (span > 0) en.present_sections.push_back(f + span);
  }

  // sentence plans per section: pair up co-mentions, pad with fillers
  std::vector<std::vector<SentencePlan>> plan(static_cast<size_t>(L));
  for (int sec = 0; sec < L; ++sec) {
    std::vector<int> here;
    for (int i = 0; i < E; ++i)
      for (int s : ents[static_cast<size_t>(i)].present_sections)
        if (s == sec) {
          here.push_back(i);
          break;
        }
    shuffle(here, rng);
    auto& slots = plan[static_cast<size_t>(sec)];
    for (size_t k = 0; k < here.size();) {
      SentencePlan sp;
      sp.entities.push_back(here[k]);
      if (k + 1 < here.size() && rng.uniform() < spec.co_mention_prob) {
        sp.entities.push_back(here[k + 1]);
        k += 2;
      } else {
        k += 1;
      }
      slots.push_back(sp);
    }
    while (static_cast<int>(slots.size()) < S) slots.push_back(SentencePlan{});
    shuffle(slots, rng);
  }

  // realization
  AnnotatedNarrative n;
  n.story_id = story_id;
  std::vector<Mention> provisional;
  auto emit = [&](const std::string& tok, const std::string& tag) {
    n.tokens.push_back(tok);
    n.pos_tags.push_back(tag);
  };
  auto emit_mention = [&](int ei, bool full) {
    auto& en = ents[static_cast<size_t>(ei)];
    const long b = n.num_tokens();
    emit(en.first, "OTHER");
    if (full) emit(en.last, "OTHER");
    provisional.push_back(Mention{ei, b, n.num_tokens()});
  };
  auto mention_form = [&](int ei) {
    auto& en = ents[static_cast<size_t>(ei)];
    const bool full = !en.seen || rng.uniform() >= spec.partial_mention_prob;
    en.seen = true;
    return full;
  };

  for (int sec = 0; sec < L; ++sec) {
    for (const auto& sp : plan[static_cast<size_t>(sec)]) {
      if (sp.entities.empty()) {
        emit("the", "DET");
        emit(pick(noun_pool(), rng), "NOUN");
        emit("was", "VERB");
        emit(pick(filler_adjs(), rng), "ADJ");
        emit("near", "OTHER");
        emit("the", "DET");
        emit(pick(noun_pool(), rng), "NOUN");
        emit(".", "PUNCT");
      } else if (sp.entities.size() == 1) {
        const int ei = sp.entities[0];
        auto& en = ents[static_cast<size_t>(ei)];
        const bool full = mention_form(ei);
        if (!full) emit("then", "OTHER");
        emit_mention(ei, full);
        emit(pick(en.verbs, rng), "VERB");
        emit("the", "DET");
        emit(pick(en.adjs, rng), "ADJ");
        emit(pick(noun_pool(), rng), "NOUN");
        emit(full ? "now" : "too", "OTHER");
        emit(".", "PUNCT");
      } else {
        const int e1 = sp.entities[0], e2 = sp.entities[1];
        const bool f1 = mention_form(e1), f2 = mention_form(e2);
        emit_mention(e1, f1);
        emit("and", "OTHER");
        emit_mention(e2, f2);
        auto& owner = ents[static_cast<size_t>(rng.uniform() < 0.5 ? e1 : e2)];
        emit(pick(owner.verbs, rng), "VERB");
        const int pad = 5 - (f1 ? 2 : 1) - (f2 ? 2 : 1);
        const std::vector<std::string> pads = {"all", "day", "long"};
        for (int k = 3 - pad; k < 3; ++k) emit(pads[static_cast<size_t>(k)], "OTHER");
        emit(".", "PUNCT");
      }
      n.sentence_bounds.push_back(n.num_tokens());
    }
  }

  // re-index entity ids by first-mention order so prompt order == id order
  std::vector<long> first_at(static_cast<size_t>(E), -1);
  for (const auto& m : provisional) {
    auto& f = first_at[static_cast<size_t>(m.entity_id)];
    if (f < 0 || m.start < f) f = m.start;
  }
  std::vector<int> by_first(static_cast<size_t>(E));
  for (int i = 0; i < E; ++i) by_first[static_cast<size_t>(i)] = i;
  std::sort(by_first.begin(), by_first.end(), [&](int a, int b) {
    return first_at[static_cast<size_t>(a)] < first_at[static_cast<size_t>(b)];
  });
  std::vector<int> new_id(static_cast<size_t>(E));
  for (int r = 0; r < E; ++r)
    new_id[static_cast<size_t>(by_first[static_cast<size_t>(r)])] = r;
  for (auto& m : provisional) m.entity_id = new_id[static_cast<size_t>(m.entity_id)];
  std::sort(provisional.begin(), provisional.end(),
            [](const Mention& a, const Mention& b) { return a.start < b.start; });
  n.mentions = std::move(provisional);
  n.validate();
  return n;
}

inline SynthResult synth_generate(const SyntheticCorpusSpec& spec) {
  spec.validate();
  SynthResult res;
  Rng root(spec.seed);
  Rng stream = root.fork(hash_label("synth"));
  for (int i = 0; i < spec.num_stories; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "synth-%03d", i);
    auto story = synth_story(spec, buf, stream.fork(static_cast<uint64_t>(i)));
    res.truth.push_back(naive_story_truth(story, spec.sections));
    res.corpus.push_back(std::move(story));
  }
  return res;
}

// ---------------------------------------------------------------------------
// degraded companion: simulated generations with known match ground truth

struct DegradedStory {
  std::string prompt_id;
  std::vector<std::string> tokens;
  int expected_exact = 0;
  int expected_subset = 0;
};

// Per entity: keep all mentions (exact+subset), strip surnames (subset only),
// or erase the entity entirely (neither).
inline DegradedStory degrade_for_match(const AnnotatedNarrative& n, Rng rng) {
  const int E = n.num_entities();
  std::vector<int> mode(static_cast<size_t>(E));
  DegradedStory out;
  out.prompt_id = n.story_id;
  for (int i = 0; i < E; ++i) {
    mode[static_cast<size_t>(i)] = static_cast<int>(rng.below(3));
    if (mode[static_cast<size_t>(i)] == 0) {
      ++out.expected_exact;
      ++out.expected_subset;
    } else if (mode[static_cast<size_t>(i)] == 1) {
      ++out.expected_subset;
    }
  }
  std::vector<std::string> toks = n.tokens;
  for (const auto& m : n.mentions) {
    const int md = mode[static_cast<size_t>(m.entity_id)];
    if (md == 0) continue;
    if (md == 1) {
      // keep the first token, blank any surname token
      for (long t = m.start + 1; t < m.end; ++t)
        toks[static_cast<size_t>(t)] = "himself";
    } else {
      for (long t = m.start; t < m.end; ++t)
        toks[static_cast<size_t>(t)] = "someone";
    }
  }
  out.tokens = std::move(toks);
  return out;
}

}  // namespace mneme
