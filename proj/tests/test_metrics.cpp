#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mneme/metrics.hpp"
#include "mneme/synth.hpp"
#include "story_builder.hpp"

using namespace mneme;
using testutil::story_of;

namespace {

// one 8-token sentence per section, L sections
AnnotatedNarrative section_story(int L, const std::vector<std::pair<int, int>>& mention_at) {
  std::vector<std::pair<std::string, std::string>> sents;
  for (int i = 0; i < L; ++i)
    sents.push_back({"the mill was silent near the tower .",
                     "DET NOUN VERB ADJ OTHER DET NOUN PUNCT"});
  std::vector<Mention> mentions;
  for (auto [entity, section] : mention_at) {
    sents[static_cast<size_t>(section)] = {
        "Alice Archer ran the red garden now .",
        "OTHER OTHER VERB DET ADJ NOUN OTHER PUNCT"};
  }
  for (auto [entity, section] : mention_at)
    mentions.push_back({entity, section * 8L, section * 8L + 2});
  auto n = story_of("sec", sents, std::move(mentions));
  return n;
}

}  // namespace

TEST_CASE("coherence hand cases") {
  // single-section entity -> C = 0
  auto solo = section_story(10, {{0, 3}});
  auto idx = build_mention_index(solo, 10);
  CHECK(*coherence_max_span(idx) == doctest::Approx(0.0));

  // first in section 2, last in section 7 -> C_i = 5
  auto spread = section_story(10, {{0, 2}, {0, 7}});
  idx = build_mention_index(spread, 10);
  CHECK(*coherence_max_span(idx) == doctest::Approx(5.0));

  // no mentions -> undefined
  auto none = section_story(10, {});
  idx = build_mention_index(none, 10);
  CHECK_FALSE(coherence_max_span(idx).has_value());
  CHECK_FALSE(coherence_avg_sections(idx).has_value());
}

TEST_CASE("coherence averages over protagonists") {
  // entity 0: sections 0..9 (span 9, 10 mentions), entity 1: 2..6 (span 4),
  // entity 2: 5..7 (span 2); C = (9+4+2)/3 = 5.0
  std::vector<std::pair<int, int>> at;
  for (int s = 0; s < 10; ++s) at.push_back({0, s});
  for (int s = 2; s <= 6; ++s) at.push_back({1, s});
  for (int s = 5; s <= 7; ++s) at.push_back({2, s});
  // distinct token offsets required: place each mention in its own sentence;
  // reuse sections via a 30-sentence story with 10 sections of 3 sentences
  std::vector<std::pair<std::string, std::string>> sents(
      30, {"the mill was silent near the tower .",
           "DET NOUN VERB ADJ OTHER DET NOUN PUNCT"});
  std::vector<Mention> mentions;
  std::vector<int> used(30, 0);
  for (auto [e, sec] : at) {
    int slot = sec * 3;
    while (used[static_cast<size_t>(slot)]) ++slot;
    used[static_cast<size_t>(slot)] = 1;
    sents[static_cast<size_t>(slot)] = {"Alice Archer ran the red garden now .",
                                        "OTHER OTHER VERB DET ADJ NOUN OTHER PUNCT"};
    mentions.push_back({e, slot * 8L, slot * 8L + 2});
  }
  auto n = story_of("spans", sents, std::move(mentions));
  n.validate();
  auto idx = build_mention_index(n, 10);
  // T = 240, section size 24 = 3 sentences
  CHECK(*coherence_max_span(idx, 3) == doctest::Approx(5.0));

  // Cbar with distinct-section counts {10, 5, 3} -> 6
  CHECK(*coherence_avg_sections(idx, 3) == doctest::Approx(6.0));
}

TEST_CASE("coherence avg-sections counts distinct sections only") {
  // mentions in sections {1, 1, 4} -> 2 distinct
  std::vector<std::pair<std::string, std::string>> sents(
      20, {"the mill was silent near the tower .",
           "DET NOUN VERB ADJ OTHER DET NOUN PUNCT"});
  // sections of 2 sentences; two mentions in section 1, one in section 4
  std::vector<Mention> mentions;
  for (int slot : {2, 3, 8}) {
    sents[static_cast<size_t>(slot)] = {"Alice Archer ran the red garden now .",
                                        "OTHER OTHER VERB DET ADJ NOUN OTHER PUNCT"};
    mentions.push_back({0, slot * 8L, slot * 8L + 2});
  }
  auto n = story_of("dup", sents, std::move(mentions));
  auto idx = build_mention_index(n, 10);
  CHECK(*coherence_avg_sections(idx) == doctest::Approx(2.0));
  // protagonist count {2,5,6} -> mean 4.333 is covered by the hand formula
  CHECK((2.0 + 5.0 + 6.0) / 3.0 == doctest::Approx(4.3333333333).epsilon(1e-9));
}

TEST_CASE("top-k protagonist selection with first-appearance tie-break") {
  std::vector<std::pair<std::string, std::string>> sents(
      8, {"the mill was silent near the tower .",
          "DET NOUN VERB ADJ OTHER DET NOUN PUNCT"});
  // entity 0: 1 mention (earliest), entities 1,2,3: later, counts 2,1,1
  std::vector<Mention> mentions;
  auto put = [&](int e, int slot) {
    sents[static_cast<size_t>(slot)] = {"Alice Archer ran the red garden now .",
                                        "OTHER OTHER VERB DET ADJ NOUN OTHER PUNCT"};
    mentions.push_back({e, slot * 8L, slot * 8L + 2});
  };
  put(0, 0);
  put(1, 1);
  put(1, 2);
  put(2, 3);
  put(3, 4);
  auto n = story_of("ties", sents, std::move(mentions));
  auto idx = build_mention_index(n, 10);
  auto ps = protagonists(idx, 3);
  REQUIRE(ps.size() == 3);
  CHECK(ps[0] == 1);  // most mentions
  CHECK(ps[1] == 0);  // tie at 1 mention: earliest first appearance
  CHECK(ps[2] == 2);
}

TEST_CASE("consistency V hand cases") {
  // own = {run, red}, others = {red} -> V = 50
  auto n = story_of(
      "v50",
      {{"Alice can run toward red doors yes .",
        "OTHER OTHER VERB OTHER ADJ NOUN OTHER PUNCT"},
       {"the door was red all day long .",
        "DET NOUN OTHER ADJ OTHER OTHER OTHER PUNCT"}},
      {{0, 0, 1}});
  n.validate();
  auto idx = build_mention_index(n, 10);
  auto v = consistency_V(n, idx);
  REQUIRE(v.per_entity[0].has_value());
  CHECK(*v.per_entity[0] == doctest::Approx(50.0));

  // single entity -> others empty -> V = 100
  auto solo = story_of("v100",
                       {{"Alice ran the red garden now too .",
                         "OTHER VERB DET ADJ NOUN OTHER OTHER PUNCT"}},
                       {{0, 0, 1}});
  idx = build_mention_index(solo, 10);
  CHECK(*consistency_V(solo, idx).per_entity[0] == doctest::Approx(100.0));

  // full overlap: every attribute of the co-mentioned pair also occurs in a
  // mention-free sentence -> V = 0 for both
  auto shared = story_of("v0",
                         {{"Alice and Hugo ran the red garden .",
                           "OTHER OTHER OTHER VERB DET ADJ NOUN PUNCT"},
                          {"others ran near red mills all day .",
                           "NOUN VERB OTHER ADJ NOUN OTHER OTHER PUNCT"}},
                         {{0, 0, 1}, {1, 2, 3}});
  shared.validate();
  idx = build_mention_index(shared, 10);
  auto vs = consistency_V(shared, idx);
  CHECK(*vs.per_entity[0] == doctest::Approx(0.0));
  CHECK(*vs.per_entity[1] == doctest::Approx(0.0));
  CHECK(*vs.mean == doctest::Approx(0.0));
}

TEST_CASE("V uses set semantics: attribute multiplicity is ignored") {
  auto a = story_of("mult1",
                    {{"Alice ran ran red red garden now .",
                      "OTHER VERB VERB ADJ ADJ NOUN OTHER PUNCT"}},
                    {{0, 0, 1}});
  auto b = story_of("mult2",
                    {{"Alice ran the red old garden now .",
                      "OTHER VERB DET ADJ OTHER NOUN OTHER PUNCT"}},
                    {{0, 0, 1}});
  auto va = consistency_V(a, build_mention_index(a, 10));
  auto vb = consistency_V(b, build_mention_index(b, 10));
  CHECK(*va.per_entity[0] == *vb.per_entity[0]);
}

TEST_CASE("consistency U exact formula and properties") {
  std::vector<std::optional<double>> V = {80.0, 60.0};
  CHECK(*consistency_U(5.0, V, 10, 2) == doctest::Approx(35.0));
  CHECK(*consistency_U(0.0, V, 10, 2) == doctest::Approx(0.0));
  std::vector<std::optional<double>> V2 = {160.0, 120.0};
  CHECK(*consistency_U(5.0, V2, 10, 2) == doctest::Approx(70.0));
  CHECK_FALSE(consistency_U(std::nullopt, V, 10, 2).has_value());
}

TEST_CASE("match hand cases") {
  EntityPrompt gold;
  gold.canonical = {{"Sheriff", "Bull", "Harper"}, {"Jenny"}};
  auto mc = match_gold({"only", "harper", "arrived"}, gold);
  CHECK(mc.exact == 0);
  CHECK(mc.subset == 1);

  auto verbatim = match_gold({"sheriff", "bull", "harper", "and", "jenny"}, gold);
  CHECK(verbatim.exact == 2);
  CHECK(verbatim.subset == 2);

  auto empty = match_gold({}, gold);
  CHECK(empty.exact == 0);
  CHECK(empty.subset == 0);

  // all-stopword surface falls back to the full form
  EntityPrompt pronoun;
  pronoun.canonical = {{"the", "it"}};
  auto fb = match_gold({"the", "it", "waited"}, pronoun);
  CHECK(fb.exact == 1);
  CHECK(fb.subset == 1);
  auto fb2 = match_gold({"nothing", "here"}, pronoun);
  CHECK(fb2.subset == 0);
}

TEST_CASE("usage stats") {
  std::vector<std::pair<std::string, std::string>> sents(
      12, {"the mill was silent near the tower .",
           "DET NOUN VERB ADJ OTHER DET NOUN PUNCT"});
  std::vector<Mention> mentions;
  int slot = 0;
  for (int e = 0; e < 4; ++e)
    for (int k = 0; k < 3; ++k) {
      mentions.push_back({e, slot * 8L, slot * 8L + 1});
      ++slot;
    }
  auto n = story_of("usage", sents, std::move(mentions));
  auto us = entity_usage_stats(build_mention_index(n, 10));
  CHECK(us.unique_entities == 4);
  CHECK(*us.mentions_per_entity == doctest::Approx(3.0));

  auto none = section_story(10, {});
  auto us0 = entity_usage_stats(build_mention_index(none, 10));
  CHECK(us0.unique_entities == 0);
  CHECK_FALSE(us0.mentions_per_entity.has_value());
}

TEST_CASE("uncertainty from per-token nll") {
  auto n = section_story(10, {{0, 2}, {0, 7}});
  auto idx = build_mention_index(n, 10);
  // uniform stub over vocab 64
  std::vector<double> nll(static_cast<size_t>(n.num_tokens()), std::log(64.0));
  auto u = uncertainty_from_nll(nll, idx);
  CHECK(*u.perplexity == doctest::Approx(64.0).epsilon(1e-12));
  CHECK(*u.nll_entity == doctest::Approx(std::log(64.0)));
  CHECK(*u.nll_rest == doctest::Approx(std::log(64.0)));
  CHECK(u.nll_entity_per_section[2].has_value());
  CHECK(u.nll_entity_per_section[7].has_value());
  CHECK_FALSE(u.nll_entity_per_section[0].has_value());

  // zero mention tokens: nll_entity undefined, perplexity defined
  auto none = section_story(10, {});
  auto u0 = uncertainty_from_nll(nll, build_mention_index(none, 10));
  CHECK(u0.perplexity.has_value());
  CHECK_FALSE(u0.nll_entity.has_value());

  // weighted hand case: mention tokens get 2.0, rest 0.5
  std::vector<double> mixed(static_cast<size_t>(n.num_tokens()), 0.5);
  long n_ent = 0;
  for (const auto& ms : idx.per_entity)
    for (const auto& m : ms)
      for (long t = m.start; t < m.end; ++t) {
        mixed[static_cast<size_t>(t)] = 2.0;
        ++n_ent;
      }
  auto um = uncertainty_from_nll(mixed, idx);
  const double T = static_cast<double>(n.num_tokens());
  const double total = 2.0 * n_ent + 0.5 * (T - n_ent);
  CHECK(*um.perplexity == doctest::Approx(std::exp(total / T)).epsilon(1e-12));
  CHECK(*um.nll_entity == doctest::Approx(2.0));
  CHECK(*um.nll_rest == doctest::Approx(0.5));
}

TEST_CASE("metric invariances: id permutation and duplicate mentions") {
  auto base = section_story(10, {{0, 2}, {0, 7}, {1, 4}});
  base.validate();
  auto idx = build_mention_index(base, 10);
  auto C0 = coherence_max_span(idx);
  auto B0 = coherence_avg_sections(idx);

  // swap entity ids 0 and 1
  auto swapped = base;
  for (auto& m : swapped.mentions) m.entity_id = 1 - m.entity_id;
  auto idx1 = build_mention_index(swapped, 10);
  CHECK(*coherence_max_span(idx1) == *C0);
  CHECK(*coherence_avg_sections(idx1) == *B0);

  // duplicate a mention inside an already-counted section
  auto dup = base;
  dup.mentions.push_back({0, 16, 17});  // same sentence as the section-2 mention
  auto idx2 = build_mention_index(dup, 10);
  CHECK(*coherence_max_span(idx2) == *C0);
  CHECK(*coherence_avg_sections(idx2) == *B0);
}

TEST_CASE("bounds invariants on randomized synthetic stories") {
  SyntheticCorpusSpec spec;
  spec.num_stories = 20;
  spec.seed = 21;
  auto res = synth_generate(spec);
  for (const auto& n : res.corpus) {
    auto m = analyze_story(n, spec.sections, 3);
    REQUIRE(m.C.has_value());
    CHECK(*m.C >= 0.0);
    CHECK(*m.C <= spec.sections - 1);
    CHECK(*m.Cbar >= 1.0);
    CHECK(*m.Cbar <= spec.sections);
    for (const auto& v : m.V)
      if (v.has_value()) {
        CHECK(*v >= 0.0);
        CHECK(*v <= 100.0);
      }
    CHECK(m.exact <= m.subset);
    CHECK(m.subset <= m.unique_entities);
  }
}

TEST_CASE("metrics equal the generator ground truth on seed-7 stories") {
  SyntheticCorpusSpec spec;
  spec.num_stories = 50;
  spec.seed = 7;
  auto res = synth_generate(spec);
  for (size_t i = 0; i < res.corpus.size(); ++i) {
    const auto& t = res.truth[i];
    auto m = analyze_story(res.corpus[i], spec.sections, 3);
    REQUIRE(m.C.has_value() == t.C.has_value());
    if (t.C) CHECK(*m.C == doctest::Approx(*t.C).epsilon(1e-9));
    if (t.Cbar) CHECK(*m.Cbar == doctest::Approx(*t.Cbar).epsilon(1e-9));
    REQUIRE(m.V.size() == t.V.size());
    for (size_t k = 0; k < t.V.size(); ++k) {
      REQUIRE(m.V[k].has_value() == t.V[k].has_value());
      if (t.V[k]) CHECK(*m.V[k] == doctest::Approx(*t.V[k]).epsilon(1e-9));
    }
    if (t.V_mean) CHECK(*m.V_mean == doctest::Approx(*t.V_mean).epsilon(1e-9));
    if (t.U) CHECK(*m.U == doctest::Approx(*t.U).epsilon(1e-9));
    CHECK(m.exact == t.exact);
    CHECK(m.subset == t.subset);
    CHECK(m.unique_entities == t.unique_entities);
    if (t.mentions_per_entity)
      CHECK(*m.mentions_per_entity ==
            doctest::Approx(*t.mentions_per_entity).epsilon(1e-9));
  }
}

TEST_CASE("degraded generations match their expected counts via match_gold") {
  SyntheticCorpusSpec spec;
  spec.num_stories = 15;
  spec.seed = 33;
  auto res = synth_generate(spec);
  Rng rng(5);
  for (const auto& n : res.corpus) {
    auto d = degrade_for_match(n, rng.fork(hash_label(n.story_id.c_str())));
    auto mc = match_gold(d.tokens, build_entity_prompt(n));
    CHECK(mc.exact == d.expected_exact);
    CHECK(mc.subset == d.expected_subset);
  }
}

TEST_CASE("report serialization carries null for undefined metrics") {
  auto none = section_story(10, {});
  auto m = analyze_story(none, 10, 3);
  auto j = story_metrics_to_json(m);
  CHECK(j["C"].is_null());
  CHECK(j["mentions_per_entity"].is_null());
  CHECK(j["exact"] == 0);

  auto csv = metrics_report_csv({m});
  CHECK(csv.find("sec,,") != std::string::npos);  // empty cells for undefined

  auto report = metrics_report_json({m, m});
  CHECK(report["stories"].size() == 2);
  CHECK(report.contains("aggregate"));
}
