#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "mneme/metrics.hpp"
#include "mneme/model.hpp"
#include "mneme/train.hpp"

// Teacher-forced evaluation: per-token NLL under the exact training layout,
// corpus pooling, cache-size sweeps and the per-section degradation tables.

namespace mneme {

// Per-token NLLs for one annotated story (narrative tokens only; the closing
// EOS term is dropped). Runs without gradients.
inline std::vector<double> story_token_nll(Model& m, const AnnotatedNarrative& story,
                                           const Vocab& vocab) {
  const bool grad_state = m.tape().grad_enabled;
  m.tape().grad_enabled = false;
  m.tape().rewind(m.base_mark());
  SequenceRun run = run_story(m, story, vocab, 0.0);
  m.tape().rewind(m.base_mark());
  m.tape().grad_enabled = grad_state;
  run.token_nll.resize(static_cast<size_t>(story.num_tokens()));
  return run.token_nll;
}

// lm_uncertainty for one story: perplexity, entity/rest NLL splits, and the
// per-section entity NLL curve.
inline Uncertainty lm_uncertainty(Model& m, const AnnotatedNarrative& story,
                                  const Vocab& vocab, int L = 10) {
  if (m.cfg.vocab_size != static_cast<int>(vocab.size()))
    throw input_error("model was built for a vocabulary of " +
                      std::to_string(m.cfg.vocab_size) + " tokens, corpus has " +
                      std::to_string(vocab.size()));
  return uncertainty_from_nll(story_token_nll(m, story, vocab),
                              build_mention_index(story, L));
}

// Corpus-pooled teacher-forced numbers at the current cache limit. Pooling is
// token-level: every mention token counts once regardless of story length.
struct CorpusEval {
  long cache_size = 0;
  long stories = 0;
  double perplexity = 0.0;  // exp of the pooled narrative-token NLL mean
  std::optional<double> nll_entity, nll_rest;
  std::vector<std::optional<double>> nll_entity_per_section;  // length L
};

inline CorpusEval eval_corpus(Model& m, const std::vector<AnnotatedNarrative>& corpus,
                              const Vocab& vocab, int L = 10) {
  if (corpus.empty()) throw input_error("eval_corpus: empty corpus");
  CorpusEval out;
  out.cache_size = m.effective_cache();
  out.stories = static_cast<long>(corpus.size());
  double total = 0.0, ent = 0.0, rest = 0.0;
  long n_total = 0, n_ent = 0, n_rest = 0;
  std::vector<double> sec_sum(static_cast<size_t>(L), 0.0);
  std::vector<long> sec_cnt(static_cast<size_t>(L), 0);
  for (const auto& story : corpus) {
    const std::vector<double> nll = story_token_nll(m, story, vocab);
    const auto idx = build_mention_index(story, L);
    const long T = story.num_tokens();
    std::vector<bool> in_mention(static_cast<size_t>(T), false);
    for (const auto& ms : idx.per_entity)
      for (const auto& mn : ms)
        for (long t = mn.start; t < mn.end; ++t) in_mention[static_cast<size_t>(t)] = true;
    for (long t = 0; t < T; ++t) {
      total += nll[static_cast<size_t>(t)];
      ++n_total;
      if (in_mention[static_cast<size_t>(t)]) {
        ent += nll[static_cast<size_t>(t)];
        ++n_ent;
        const long sec = std::min<long>(t / idx.section_size, L - 1);
        sec_sum[static_cast<size_t>(sec)] += nll[static_cast<size_t>(t)];
        ++sec_cnt[static_cast<size_t>(sec)];
      } else {
        rest += nll[static_cast<size_t>(t)];
        ++n_rest;
      }
    }
  }
  out.perplexity = std::exp(total / static_cast<double>(n_total));
  if (n_ent > 0) out.nll_entity = ent / static_cast<double>(n_ent);
  if (n_rest > 0) out.nll_rest = rest / static_cast<double>(n_rest);
  out.nll_entity_per_section.assign(static_cast<size_t>(L), std::nullopt);
  for (int s = 0; s < L; ++s)
    if (sec_cnt[static_cast<size_t>(s)] > 0)
      out.nll_entity_per_section[static_cast<size_t>(s)] =
          sec_sum[static_cast<size_t>(s)] / static_cast<double>(sec_cnt[static_cast<size_t>(s)]);
  return out;
}

// One variant's sweep: absolute per-section entity NLL at every cache size
// plus percentage degradation against the sweep maximum.
struct DegradationTable {
  std::string label;
  std::vector<long> cache_sizes;  // as given; baseline = max element
  long baseline = 0;
  std::vector<CorpusEval> evals;                                // per cache size
  std::vector<std::optional<double>> entity_pct;                // per cache size
  std::vector<std::vector<std::optional<double>>> section_pct;  // [sweep][L]
};

inline DegradationTable degradation_sweep(Model& m,
                                          const std::vector<AnnotatedNarrative>& corpus,
                                          const Vocab& vocab,
                                          const std::vector<long>& cache_sizes,
                                          int L = 10, const std::string& label = "") {
  if (cache_sizes.empty()) throw config_error("degradation sweep: empty cache list");
  DegradationTable t;
  t.label = label.empty() ? variant_name(m.cfg.variant) : label;
  t.cache_sizes = cache_sizes;
  t.baseline = *std::max_element(cache_sizes.begin(), cache_sizes.end());
  const long saved = m.cache_limit;
  m.cache_limit = t.baseline;
  CorpusEval base = eval_corpus(m, corpus, vocab, L);
  for (long cs : cache_sizes) {
    m.cache_limit = cs;
    CorpusEval e = cs == t.baseline ? base : eval_corpus(m, corpus, vocab, L);
    std::optional<double> ep;
    if (e.nll_entity && base.nll_entity && *base.nll_entity != 0.0)
      ep = (*e.nll_entity - *base.nll_entity) / *base.nll_entity;
    std::vector<std::optional<double>> sp(static_cast<size_t>(L));
    for (int s = 0; s < L; ++s) {
      const auto& a = e.nll_entity_per_section[static_cast<size_t>(s)];
      const auto& b = base.nll_entity_per_section[static_cast<size_t>(s)];
      if (a && b && *b != 0.0) sp[static_cast<size_t>(s)] = (*a - *b) / *b;
    }
    t.evals.push_back(std::move(e));
    t.entity_pct.push_back(ep);
    t.section_pct.push_back(std::move(sp));
  }
  m.cache_limit = saved;
  return t;
}

// Long-format CSV over one or more variants: absolute NLLs and the
// percentage-degradation columns, overall ("all") plus one row per section.
inline std::string degradation_csv(const std::vector<DegradationTable>& tables) {
  std::string out = "variant,cache_size,section,nll_entity,pct_degradation\n";
  char buf[160];
  auto cell = [](std::optional<double> v) -> std::string {
    if (!v) return "";
    char b[48];
    std::snprintf(b, sizeof b, "%.10g", *v);
    return b;
  };
  for (const auto& t : tables) {
    for (size_t i = 0; i < t.cache_sizes.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s,%ld,all,%s,%s\n", t.label.c_str(),
                    t.cache_sizes[i], cell(t.evals[i].nll_entity).c_str(),
                    cell(t.entity_pct[i]).c_str());
      out += buf;
      for (size_t s = 0; s < t.evals[i].nll_entity_per_section.size(); ++s) {
        std::snprintf(buf, sizeof buf, "%s,%ld,%zu,%s,%s\n", t.label.c_str(),
                      t.cache_sizes[i], s,
                      cell(t.evals[i].nll_entity_per_section[s]).c_str(),
                      cell(t.section_pct[i][s]).c_str());
        out += buf;
      }
    }
  }
  return out;
}

// Minimal line chart of per-section percentage degradation, one polyline per
// (variant, cache size) row. Plot-ready decoration only; the CSV is the
// interface.
inline std::string degradation_svg(const std::vector<DegradationTable>& tables) {
  const double W = 640, H = 400, ml = 60, mr = 160, mt = 24, mb = 40;
  double lo = 0.0, hi = 0.0;
  int L = 0;
  for (const auto& t : tables)
    for (const auto& row : t.section_pct)
      for (size_t s = 0; s < row.size(); ++s) {
        L = std::max(L, static_cast<int>(row.size()));
        if (row[s]) {
          lo = std::min(lo, *row[s]);
          hi = std::max(hi, *row[s]);
        }
      }
  if (hi == lo) hi = lo + 1.0;
  auto xof = [&](double s) { return ml + s / std::max(1, L - 1) * (W - ml - mr); };
  auto yof = [&](double v) { return mt + (hi - v) / (hi - lo) * (H - mt - mb); };
  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                           "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  std::string svg;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns='http://www.w3.org/2000/svg' width='%g' height='%g' "
                "font-family='sans-serif' font-size='11'>\n",
                W, H);
  svg += buf;
  std::snprintf(buf, sizeof buf,
                "<line x1='%g' y1='%g' x2='%g' y2='%g' stroke='black'/>\n", ml,
                yof(0.0), W - mr, yof(0.0));
  svg += buf;
  std::snprintf(buf, sizeof buf,
                "<line x1='%g' y1='%g' x2='%g' y2='%g' stroke='black'/>\n", ml, mt, ml,
                H - mb);
  svg += buf;
  std::snprintf(buf, sizeof buf,
                "<text x='%g' y='%g'>section</text><text x='8' y='%g'>pct</text>\n",
                (W - mr) / 2, H - 8, mt + 10.0);
  svg += buf;
  int color = 0;
  for (const auto& t : tables) {
    for (size_t i = 0; i < t.cache_sizes.size(); ++i) {
      std::string pts;
      for (size_t s = 0; s < t.section_pct[i].size(); ++s) {
        if (!t.section_pct[i][s]) continue;
        std::snprintf(buf, sizeof buf, "%g,%g ", xof(static_cast<double>(s)),
                      yof(*t.section_pct[i][s]));
        pts += buf;
      }
      const char* c = palette[color % 8];
      if (!pts.empty()) {
        std::snprintf(buf, sizeof buf,
                      "<polyline points='%s' fill='none' stroke='%s'/>\n", pts.c_str(),
                      c);
        svg += buf;
      }
      std::snprintf(buf, sizeof buf,
                    "<text x='%g' y='%g' fill='%s'>%s m=%ld</text>\n", W - mr + 8,
                    mt + 14.0 * (color + 1), c, t.label.c_str(), t.cache_sizes[i]);
      svg += buf;
      ++color;
    }
  }
  svg += "</svg>\n";
  return svg;
}

// Mean final-layer cross-attention mass on the gold slot, over narrative
// tokens whose sentence mentions exactly one entity. `ratio` normalizes each
// token's mass by the uniform baseline 1/Z of its story.
struct GoldSlotStats {
  double mean_mass = 0.0;
  double mean_ratio = 0.0;
  long tokens = 0;
};

inline GoldSlotStats gold_slot_attention(Model& m,
                                         const std::vector<AnnotatedNarrative>& corpus,
                                         const Vocab& vocab) {
  if (m.cfg.variant == Variant::Vanilla)
    throw contract_error("gold_slot_attention needs a memory variant");
  const bool grad_state = m.tape().grad_enabled;
  m.tape().grad_enabled = false;
  GoldSlotStats out;
  double mass = 0.0, ratio = 0.0;
  for (const auto& story : corpus) {
    m.tape().rewind(m.base_mark());
    SequenceRun run = run_story(m, story, vocab, 0.0, false, Rng(0), true);
    const int Z = run.memory.Z;
    const long T = story.num_tokens();
    std::vector<std::vector<int>> per_sentence(static_cast<size_t>(story.num_sentences()));
    for (const auto& mn : story.mentions) {
      auto& ids = per_sentence[static_cast<size_t>(story.sentence_of(mn.start))];
      if (std::find(ids.begin(), ids.end(), mn.entity_id) == ids.end())
        ids.push_back(mn.entity_id);
    }
    for (long t = 0; t < T; ++t) {
      const auto& ids = per_sentence[static_cast<size_t>(story.sentence_of(t))];
      if (ids.size() != 1) continue;
      const double a = run.cross_mass[t * Z + ids[0]];
      mass += a;
      ratio += a * static_cast<double>(Z);
      ++out.tokens;
    }
  }
  m.tape().rewind(m.base_mark());
  m.tape().grad_enabled = grad_state;
  if (out.tokens > 0) {
    out.mean_mass = mass / static_cast<double>(out.tokens);
    out.mean_ratio = ratio / static_cast<double>(out.tokens);
  }
  return out;
}

}  // namespace mneme
