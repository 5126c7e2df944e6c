#pragma once

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mneme/corpus.hpp"
#include "mneme/errors.hpp"
#include "mneme/stopwords.hpp"

// Coherence/consistency metric suite. All functions are pure over immutable
// narratives; undefined values (no mentions, no attributes, empty sections)
// are signaled with empty optionals and excluded from aggregates.

namespace mneme {

struct IndexedMention {
  long sentence = 0;
  long start = 0, end = 0;
  long section = 0;
};

struct EntityMentionIndex {
  int L = 10;
  long section_size = 1;  // ceil(T / L)
  std::vector<std::vector<IndexedMention>> per_entity;

  int num_entities() const { return static_cast<int>(per_entity.size()); }
  long total_mentions() const {
    long n = 0;
    for (const auto& v : per_entity) n += static_cast<long>(v.size());
    return n;
  }
};

inline EntityMentionIndex build_mention_index(const AnnotatedNarrative& n,
                                              int L = 10) {
  if (L < 1) throw config_error("mention index: sections must be positive");
  EntityMentionIndex idx;
  idx.L = L;
  idx.section_size = (n.num_tokens() + L - 1) / L;
  idx.per_entity.resize(static_cast<size_t>(n.num_entities()));
  for (const auto& m : n.mentions) {
    IndexedMention im;
    im.sentence = n.sentence_of(m.start);
    im.start = m.start;
    im.end = m.end;
    im.section = m.start / idx.section_size;
    idx.per_entity[static_cast<size_t>(m.entity_id)].push_back(im);
  }
  return idx;
}

// top_k most-mentioned entity ids; ties broken by earliest first mention
inline std::vector<int> protagonists(const EntityMentionIndex& idx, int top_k = 3) {
  std::vector<int> ids;
  for (int i = 0; i < idx.num_entities(); ++i)
    if (!idx.per_entity[static_cast<size_t>(i)].empty()) ids.push_back(i);
  auto first_start = [&](int i) {
    long f = idx.per_entity[static_cast<size_t>(i)][0].start;
    for (const auto& m : idx.per_entity[static_cast<size_t>(i)])
      f = std::min(f, m.start);
    return f;
  };
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
    const size_t ca = idx.per_entity[static_cast<size_t>(a)].size();
    const size_t cb = idx.per_entity[static_cast<size_t>(b)].size();
    if (ca != cb) return ca > cb;
    return first_start(a) < first_start(b);
  });
  if (static_cast<int>(ids.size()) > top_k) ids.resize(static_cast<size_t>(top_k));
  return ids;
}

// C: mean over protagonists of (last-mention section - first-mention section)
inline std::optional<double> coherence_max_span(const EntityMentionIndex& idx,
                                                int top_k = 3) {
  auto ps = protagonists(idx, top_k);
  if (ps.empty()) return std::nullopt;
  double sum = 0.0;
  for (int p : ps) {
    long lo = idx.per_entity[static_cast<size_t>(p)][0].section, hi = lo;
    for (const auto& m : idx.per_entity[static_cast<size_t>(p)]) {
      lo = std::min(lo, m.section);
      hi = std::max(hi, m.section);
    }
    sum += static_cast<double>(hi - lo);
  }
  return sum / static_cast<double>(ps.size());
}

// Cbar: mean over protagonists of the count of distinct mention sections
inline std::optional<double> coherence_avg_sections(const EntityMentionIndex& idx,
                                                    int top_k = 3) {
  auto ps = protagonists(idx, top_k);
  if (ps.empty()) return std::nullopt;
  double sum = 0.0;
  for (int p : ps) {
    std::set<long> secs;
    for (const auto& m : idx.per_entity[static_cast<size_t>(p)]) secs.insert(m.section);
    sum += static_cast<double>(secs.size());
  }
  return sum / static_cast<double>(ps.size());
}

struct ConsistencyV {
  std::vector<std::optional<double>> per_entity;
  std::optional<double> mean;  // over entities with attributes in scope
};

inline ConsistencyV consistency_V(const AnnotatedNarrative& n,
                                  const EntityMentionIndex& idx) {
  const long S = n.num_sentences();
  std::vector<std::set<std::string>> attrs(static_cast<size_t>(S));
  for (long s = 0; s < S; ++s) {
    auto [b, e] = n.sentence_span(s);
    for (long t = b; t < e; ++t) {
      const auto& tag = n.pos_tags[static_cast<size_t>(t)];
      if (tag == "VERB" || tag == "ADJ")
        attrs[static_cast<size_t>(s)].insert(lowercase(n.tokens[static_cast<size_t>(t)]));
    }
  }
  std::vector<std::set<long>> sentences_of(static_cast<size_t>(idx.num_entities()));
  for (int i = 0; i < idx.num_entities(); ++i)
    for (const auto& m : idx.per_entity[static_cast<size_t>(i)])
      sentences_of[static_cast<size_t>(i)].insert(m.sentence);

  ConsistencyV out;
  out.per_entity.assign(static_cast<size_t>(idx.num_entities()), std::nullopt);
  double sum = 0.0;
  int cnt = 0;
  for (int i = 0; i < idx.num_entities(); ++i) {
    std::set<std::string> own, others;
    for (long s = 0; s < S; ++s) {
      const auto& a = attrs[static_cast<size_t>(s)];
      if (sentences_of[static_cast<size_t>(i)].count(s))
        own.insert(a.begin(), a.end());
      else
        others.insert(a.begin(), a.end());
    }
    if (own.empty()) continue;
    long uniq = 0;
    for (const auto& w : own)
      if (!others.count(w)) ++uniq;
    const double vi = 100.0 * static_cast<double>(uniq) / static_cast<double>(own.size());
    out.per_entity[static_cast<size_t>(i)] = vi;
    sum += vi;
    ++cnt;
  }
  if (cnt > 0) out.mean = sum / cnt;
  return out;
}

// U = (C / (L * Z)) * sum of V_i, Z = entity count of the story
inline std::optional<double> consistency_U(std::optional<double> C,
                                           const std::vector<std::optional<double>>& V,
                                           int L, int Z) {
  if (!C.has_value() || Z <= 0) return std::nullopt;
  double sum = 0.0;
  for (const auto& v : V)
    if (v.has_value()) sum += *v;
  return (*C / (static_cast<double>(L) * Z)) * sum;
}

// ---------------------------------------------------------------------------
// gold-entity matching over generated token streams

struct MatchCounts {
  int exact = 0;
  int subset = 0;
};

inline MatchCounts match_gold(const std::vector<std::string>& generated,
                              const EntityPrompt& gold) {
  std::vector<std::string> low(generated.size());
  for (size_t i = 0; i < generated.size(); ++i) low[i] = lowercase(generated[i]);
  MatchCounts mc;
  for (const auto& canon : gold.canonical) {
    if (canon.empty()) continue;
    std::vector<std::string> want(canon.size());
    for (size_t i = 0; i < canon.size(); ++i) want[i] = lowercase(canon[i]);
    bool exact = false;
    for (size_t s = 0; s + want.size() <= low.size() && !exact; ++s) {
      bool all = true;
      for (size_t k = 0; k < want.size() && all; ++k)
        if (low[s + k] != want[k]) all = false;
      exact = all;
    }
    if (exact) ++mc.exact;
    // content tokens; all-stopword surfaces fall back to the full form so
    // exact <= subset holds even for pronoun-like entities
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
    if (sub) ++mc.subset;
  }
  return mc;
}

struct UsageStats {
  int unique_entities = 0;
  std::optional<double> mentions_per_entity;
};

inline UsageStats entity_usage_stats(const EntityMentionIndex& idx) {
  UsageStats u;
  u.unique_entities = idx.num_entities();
  if (u.unique_entities > 0)
    u.mentions_per_entity = static_cast<double>(idx.total_mentions()) /
                            static_cast<double>(u.unique_entities);
  return u;
}

// ---------------------------------------------------------------------------
// language-model uncertainty (pure part: consumes per-token NLLs)

struct Uncertainty {
  std::optional<double> perplexity;
  std::optional<double> nll_entity;
  std::optional<double> nll_rest;
  std::vector<std::optional<double>> nll_entity_per_section;
};

// nll[i] = teacher-forced -log p of narrative token i (prompt excluded).
inline Uncertainty uncertainty_from_nll(const std::vector<double>& nll,
                                        const EntityMentionIndex& idx) {
  Uncertainty u;
  const long T = static_cast<long>(nll.size());
  if (T == 0) return u;
  std::vector<bool> in_mention(static_cast<size_t>(T), false);
  for (const auto& ms : idx.per_entity)
    for (const auto& m : ms)
      for (long t = m.start; t < m.end && t < T; ++t)
        in_mention[static_cast<size_t>(t)] = true;

  double total = 0.0, ent = 0.0, rest = 0.0;
  long n_ent = 0, n_rest = 0;
  std::vector<double> sec_sum(static_cast<size_t>(idx.L), 0.0);
  std::vector<long> sec_cnt(static_cast<size_t>(idx.L), 0);
  for (long t = 0; t < T; ++t) {
    total += nll[static_cast<size_t>(t)];
    if (in_mention[static_cast<size_t>(t)]) {
      ent += nll[static_cast<size_t>(t)];
      ++n_ent;
      const long sec = std::min<long>(t / idx.section_size, idx.L - 1);
      sec_sum[static_cast<size_t>(sec)] += nll[static_cast<size_t>(t)];
      ++sec_cnt[static_cast<size_t>(sec)];
    } else {
      rest += nll[static_cast<size_t>(t)];
      ++n_rest;
    }
  }
  u.perplexity = std::exp(total / static_cast<double>(T));
  if (n_ent > 0) u.nll_entity = ent / static_cast<double>(n_ent);
  if (n_rest > 0) u.nll_rest = rest / static_cast<double>(n_rest);
  u.nll_entity_per_section.assign(static_cast<size_t>(idx.L), std::nullopt);
  for (int s = 0; s < idx.L; ++s)
    if (sec_cnt[static_cast<size_t>(s)] > 0)
      u.nll_entity_per_section[static_cast<size_t>(s)] =
          sec_sum[static_cast<size_t>(s)] / static_cast<double>(sec_cnt[static_cast<size_t>(s)]);
  return u;
}

// ---------------------------------------------------------------------------
// per-story report assembly

struct StoryMetrics {
  std::string story_id;
  std::optional<double> C, Cbar;
  std::vector<std::optional<double>> V;
  std::optional<double> V_mean, U;
  int exact = 0, subset = 0;
  std::optional<double> exact_frac, subset_frac;  // count / gold entity count
  int unique_entities = 0;
  std::optional<double> mentions_per_entity;
  Uncertainty lm;
};

// Full annotational metrics for one story; the match columns compare the
// story text against its own prompt.
inline StoryMetrics analyze_story(const AnnotatedNarrative& n, int L = 10,
                                  int top_k = 3) {
  auto idx = build_mention_index(n, L);
  StoryMetrics sm;
  sm.story_id = n.story_id;
  sm.C = coherence_max_span(idx, top_k);
  sm.Cbar = coherence_avg_sections(idx, top_k);
  auto v = consistency_V(n, idx);
  sm.V = v.per_entity;
  sm.V_mean = v.mean;
  sm.U = consistency_U(sm.C, sm.V, L, idx.num_entities());
  auto mc = match_gold(n.tokens, build_entity_prompt(n));
  sm.exact = mc.exact;
  sm.subset = mc.subset;
  if (idx.num_entities() > 0) {
    sm.exact_frac = static_cast<double>(mc.exact) / idx.num_entities();
    sm.subset_frac = static_cast<double>(mc.subset) / idx.num_entities();
  }
  auto us = entity_usage_stats(idx);
  sm.unique_entities = us.unique_entities;
  sm.mentions_per_entity = us.mentions_per_entity;
  return sm;
}

// Match-only metrics for a generated token stream against a gold prompt.
inline StoryMetrics analyze_generation(const std::string& prompt_id,
                                       const std::vector<std::string>& tokens,
                                       const EntityPrompt& gold) {
  StoryMetrics sm;
  sm.story_id = prompt_id;
  auto mc = match_gold(tokens, gold);
  sm.exact = mc.exact;
  sm.subset = mc.subset;
  const int Z = static_cast<int>(gold.canonical.size());
  sm.unique_entities = Z;
  if (Z > 0) {
    sm.exact_frac = static_cast<double>(mc.exact) / Z;
    sm.subset_frac = static_cast<double>(mc.subset) / Z;
  }
  return sm;
}

// Mean of the defined values per field; counts are averaged as well.
inline StoryMetrics aggregate_metrics(const std::vector<StoryMetrics>& all) {
  StoryMetrics agg;
  agg.story_id = "aggregate";
  auto mean_opt = [&](auto getter) -> std::optional<double> {
    double s = 0.0;
    long c = 0;
    for (const auto& m : all) {
      auto v = getter(m);
      if (v.has_value()) {
        s += *v;
        ++c;
      }
    }
    if (c == 0) return std::nullopt;
    return s / static_cast<double>(c);
  };
  agg.C = mean_opt([](const StoryMetrics& m) { return m.C; });
  agg.Cbar = mean_opt([](const StoryMetrics& m) { return m.Cbar; });
  agg.V_mean = mean_opt([](const StoryMetrics& m) { return m.V_mean; });
  agg.U = mean_opt([](const StoryMetrics& m) { return m.U; });
  agg.exact_frac = mean_opt([](const StoryMetrics& m) { return m.exact_frac; });
  agg.subset_frac = mean_opt([](const StoryMetrics& m) { return m.subset_frac; });
  agg.mentions_per_entity =
      mean_opt([](const StoryMetrics& m) { return m.mentions_per_entity; });
  agg.lm.perplexity = mean_opt([](const StoryMetrics& m) { return m.lm.perplexity; });
  agg.lm.nll_entity = mean_opt([](const StoryMetrics& m) { return m.lm.nll_entity; });
  agg.lm.nll_rest = mean_opt([](const StoryMetrics& m) { return m.lm.nll_rest; });
  long exact_sum = 0, subset_sum = 0, uniq_sum = 0;
  size_t L = 0;
  for (const auto& m : all) {
    exact_sum += m.exact;
    subset_sum += m.subset;
    uniq_sum += m.unique_entities;
    L = std::max(L, m.lm.nll_entity_per_section.size());
  }
  if (!all.empty()) {
    agg.exact = static_cast<int>(exact_sum);
    agg.subset = static_cast<int>(subset_sum);
    agg.unique_entities = static_cast<int>(uniq_sum);
  }
  agg.lm.nll_entity_per_section.assign(L, std::nullopt);
  for (size_t s = 0; s < L; ++s) {
    double sum = 0.0;
    long c = 0;
    for (const auto& m : all)
      if (s < m.lm.nll_entity_per_section.size() &&
          m.lm.nll_entity_per_section[s].has_value()) {
        sum += *m.lm.nll_entity_per_section[s];
        ++c;
      }
    if (c > 0) agg.lm.nll_entity_per_section[s] = sum / static_cast<double>(c);
  }
  return agg;
}

// ---------------------------------------------------------------------------
// serialization

inline nlohmann::json opt_json(const std::optional<double>& v) {
  if (!v.has_value()) return nullptr;
  return *v;
}

inline nlohmann::json story_metrics_to_json(const StoryMetrics& m) {
  nlohmann::json j;
  j["story_id"] = m.story_id;
  j["C"] = opt_json(m.C);
  j["Cbar"] = opt_json(m.Cbar);
  auto& vv = j["V"] = nlohmann::json::array();
  for (const auto& v : m.V) vv.push_back(opt_json(v));
  j["V_mean"] = opt_json(m.V_mean);
  j["U"] = opt_json(m.U);
  j["exact"] = m.exact;
  j["subset"] = m.subset;
  j["exact_frac"] = opt_json(m.exact_frac);
  j["subset_frac"] = opt_json(m.subset_frac);
  j["unique_entities"] = m.unique_entities;
  j["mentions_per_entity"] = opt_json(m.mentions_per_entity);
  j["perplexity"] = opt_json(m.lm.perplexity);
  j["nll_entity"] = opt_json(m.lm.nll_entity);
  j["nll_rest"] = opt_json(m.lm.nll_rest);
  auto& ps = j["nll_entity_per_section"] = nlohmann::json::array();
  for (const auto& v : m.lm.nll_entity_per_section) ps.push_back(opt_json(v));
  return j;
}

inline nlohmann::json metrics_report_json(const std::vector<StoryMetrics>& all) {
  nlohmann::json j;
  auto& st = j["stories"] = nlohmann::json::array();
  for (const auto& m : all) st.push_back(story_metrics_to_json(m));
  j["aggregate"] = story_metrics_to_json(aggregate_metrics(all));
  return j;
}

inline std::string csv_cell(const std::optional<double>& v) {
  if (!v.has_value()) return "";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", *v);
  return buf;
}

inline std::string metrics_report_csv(const std::vector<StoryMetrics>& all) {
  std::string out =
      "story_id,C,Cbar,V_mean,U,exact,subset,exact_frac,subset_frac,"
      "unique_entities,mentions_per_entity,perplexity,nll_entity,nll_rest\n";
  auto row = [&](const StoryMetrics& m) {
    out += m.story_id + "," + csv_cell(m.C) + "," + csv_cell(m.Cbar) + "," +
           csv_cell(m.V_mean) + "," + csv_cell(m.U) + "," +
           std::to_string(m.exact) + "," + std::to_string(m.subset) + "," +
           csv_cell(m.exact_frac) + "," + csv_cell(m.subset_frac) + "," +
           std::to_string(m.unique_entities) + "," +
           csv_cell(m.mentions_per_entity) + "," + csv_cell(m.lm.perplexity) +
           "," + csv_cell(m.lm.nll_entity) + "," + csv_cell(m.lm.nll_rest) + "\n";
  };
  for (const auto& m : all) row(m);
  row(aggregate_metrics(all));
  return out;
}

// plot-ready long format: one row per (story, section) with a defined value
inline std::string per_section_csv(const std::vector<StoryMetrics>& all) {
  std::string out = "story_id,section,nll_entity\n";
  for (const auto& m : all)
    for (size_t s = 0; s < m.lm.nll_entity_per_section.size(); ++s)
      if (m.lm.nll_entity_per_section[s].has_value())
        out += m.story_id + "," + std::to_string(s) + "," +
               csv_cell(m.lm.nll_entity_per_section[s]) + "\n";
  return out;
}

}  // namespace mneme
