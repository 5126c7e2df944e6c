#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "mneme/corpus.hpp"
#include "story_builder.hpp"

using mneme::AnnotatedNarrative;
using mneme::join_tokens;
using mneme::load_jsonl;
using mneme::Mention;
using mneme::save_jsonl;
using mneme::Vocab;
using testutil::story_of;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

AnnotatedNarrative sample_story() {
  return story_of("s1",
                  {{"Sarah King ran fast .", "OTHER OTHER VERB ADJ PUNCT"},
                   {"Todd slept near Sarah .", "OTHER VERB OTHER OTHER PUNCT"},
                   {"the red door creaked .", "DET ADJ NOUN VERB PUNCT"}},
                  {{0, 0, 2}, {1, 5, 6}, {0, 8, 9}});
}

}  // namespace

TEST_CASE("validation accepts a well-formed story and locates sentences") {
  auto n = sample_story();
  n.validate();
  CHECK(n.num_tokens() == 15);
  CHECK(n.num_sentences() == 3);
  CHECK(n.num_entities() == 2);
  CHECK(n.sentence_of(0) == 0);
  CHECK(n.sentence_of(4) == 0);
  CHECK(n.sentence_of(5) == 1);
  CHECK(n.sentence_of(14) == 2);
  auto [b, e] = n.sentence_span(1);
  CHECK(b == 5);
  CHECK(e == 10);
}

TEST_CASE("validation failures carry the story id and field") {
  auto bad_tags = sample_story();
  bad_tags.pos_tags.pop_back();
  CHECK_THROWS_WITH_AS(bad_tags.validate(),
                       doctest::Contains("story 's1': pos_tags"),
                       mneme::input_error);

  auto cross = sample_story();
  cross.mentions.push_back({1, 4, 6});  // spans sentences 0 and 1
  CHECK_THROWS_WITH_AS(cross.validate(), doctest::Contains("crosses"),
                       mneme::input_error);

  auto sparse = sample_story();
  for (auto& m : sparse.mentions) m.entity_id *= 2;  // ids {0, 2}
  CHECK_THROWS_WITH_AS(sparse.validate(), doctest::Contains("dense"),
                       mneme::input_error);

  auto bounds = sample_story();
  bounds.sentence_bounds.back() = 14;
  CHECK_THROWS_AS(bounds.validate(), mneme::input_error);
}

TEST_CASE("vocab reserves specials at fixed low ids") {
  Vocab v;
  CHECK(v.size() == 6);
  CHECK(v.id_of("<PAD>") == Vocab::PAD);
  CHECK(v.id_of("<UNK>") == Vocab::UNK);
  CHECK(v.id_of("<BOS>") == Vocab::BOS);
  CHECK(v.id_of("<EOS>") == Vocab::EOS);
  CHECK(v.id_of("<SEP>") == Vocab::SEP);
  CHECK(v.id_of("<EOP>") == Vocab::EOP);
  CHECK(v.id_of("missing") == Vocab::UNK);
}

TEST_CASE("vocab build sorts tokens and round-trips through a file") {
  std::vector<AnnotatedNarrative> corpus{sample_story()};
  auto v = Vocab::build(corpus);
  // lexicographic ordering right after the specials
  CHECK(v.token_of(Vocab::num_specials) == ".");
  CHECK(v.id_of("Sarah") < v.id_of("Todd"));
  CHECK(v.id_of("King") < v.id_of("creaked"));  // uppercase sorts first

  const std::string path = "vocab_test.txt";
  v.save(path);
  auto v2 = Vocab::load(path);
  REQUIRE(v2.size() == v.size());
  for (int i = 0; i < v.size(); ++i) CHECK(v2.token_of(i) == v.token_of(i));
  std::remove(path.c_str());
}

TEST_CASE("entity prompt uses first mentions in id order") {
  auto n = sample_story();
  auto p = build_entity_prompt(n);
  REQUIRE(p.canonical.size() == 2);
  CHECK(p.canonical[0] == std::vector<std::string>{"Sarah", "King"});
  CHECK(p.canonical[1] == std::vector<std::string>{"Todd"});
  CHECK(p.render() ==
        std::vector<std::string>{"Sarah", "King", "<SEP>", "Todd", "<EOP>"});

  // a lone entity renders without separators
  auto solo = story_of("solo", {{"Sarah King ran .", "OTHER OTHER VERB PUNCT"}},
                       {{0, 0, 2}});
  CHECK(build_entity_prompt(solo).render() ==
        std::vector<std::string>{"Sarah", "King", "<EOP>"});

  // repeated identical mentions keep a single canonical copy
  auto rep = story_of("rep",
                      {{"Todd ran .", "OTHER VERB PUNCT"},
                       {"Todd slept .", "OTHER VERB PUNCT"}},
                      {{0, 0, 1}, {0, 3, 4}});
  CHECK(build_entity_prompt(rep).canonical ==
        std::vector<std::vector<std::string>>{{"Todd"}});
}

TEST_CASE("tokenize round-trips in-vocab text and falls back to UNK") {
  std::vector<AnnotatedNarrative> corpus{sample_story()};
  auto v = Vocab::build(corpus);
  auto ids = tokenize(sample_story().tokens, v);
  auto back = detokenize(ids, v);
  CHECK(back == sample_story().tokens);

  auto unk = tokenize({"Sarah", "zebra"}, v);
  CHECK(unk[0] == v.id_of("Sarah"));
  CHECK(unk[1] == Vocab::UNK);
  CHECK(join_tokens({"a", "b", "c"}) == "a b c");
}

TEST_CASE("jsonl round-trip is byte-identical after canonical form") {
  std::vector<AnnotatedNarrative> corpus{sample_story()};
  corpus.push_back(story_of("s2", {{"Jenny waved .", "OTHER VERB PUNCT"}},
                            {{0, 0, 1}}));
  const std::string p1 = "corpus_a.jsonl", p2 = "corpus_b.jsonl";
  save_jsonl(corpus, p1);
  auto loaded = load_jsonl(p1);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].tokens == corpus[0].tokens);
  CHECK(loaded[0].mentions == corpus[0].mentions);
  save_jsonl(loaded, p2);
  CHECK(slurp(p1) == slurp(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("malformed jsonl reports offending line numbers") {
  const std::string path = "corpus_bad.jsonl";
  {
    std::ofstream out(path, std::ios::binary);
    out << narrative_to_json(sample_story()).dump() << "\n";
    out << "{not json\n";
    out << narrative_to_json(sample_story()).dump() << "\n";
    out << "{\"story_id\": \"x\"}\n";  // missing fields
  }
  CHECK_THROWS_WITH_AS(load_jsonl(path), doctest::Contains("lines 2 4"),
                       mneme::format_error);
  std::remove(path.c_str());
}

TEST_CASE("invalid but well-formed records raise input errors with context") {
  const std::string path = "corpus_invalid.jsonl";
  auto n = sample_story();
  n.mentions[0].end = 99;
  {
    std::ofstream out(path, std::ios::binary);
    out << narrative_to_json(n).dump() << "\n";
  }
  CHECK_THROWS_WITH_AS(load_jsonl(path), doctest::Contains("story 's1'"),
                       mneme::input_error);
  std::remove(path.c_str());
}
