#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "mneme/corpus.hpp"
#include "mneme/model.hpp"
#include "mneme/rng.hpp"

// Autoregressive sampling with nucleus truncation. Each new token runs the
// in-progress chunk against the cache frozen at the chunk start, so the
// sampled-from logits are the same values a full-chunk teacher-forced pass
// produces; memory updates reuse the training update rule at every chunk
// boundary.

namespace mneme {

struct GenerateConfig {
  double nucleus_p = 0.8;
  double temperature = 1.0;
  int max_tokens = 1000;
  int samples_per_prompt = 5;
  uint64_t seed = 7;
  bool greedy = false;  // argmax instead of sampling

  void validate() const {
    auto bad = [](const std::string& w) { throw config_error("generate config: " + w); };
    if (!(nucleus_p > 0.0 && nucleus_p <= 1.0)) bad("nucleus_p must be in (0,1]");
    if (temperature <= 0.0) bad("temperature must be positive");
    if (max_tokens < 1) bad("max_tokens must be >= 1");
    if (samples_per_prompt < 1) bad("samples_per_prompt must be >= 1");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"nucleus_p", nucleus_p},   {"temperature", temperature},
                          {"max_tokens", max_tokens}, {"samples_per_prompt", samples_per_prompt},
                          {"seed", seed},             {"greedy", greedy}};
  }

  static GenerateConfig from_json(const nlohmann::json& j) {
    GenerateConfig c;
    auto get = [&](const char* k, auto& f) {
      if (j.contains(k)) f = j.at(k).get<std::decay_t<decltype(f)>>();
    };
    get("nucleus_p", c.nucleus_p);
    get("temperature", c.temperature);
    get("max_tokens", c.max_tokens);
    get("samples_per_prompt", c.samples_per_prompt);
    get("seed", c.seed);
    get("greedy", c.greedy);
    c.validate();
    return c;
  }
};

// The smallest highest-probability set with cumulative mass >= p, renormalized.
// Ties sort by lower token id. Returned pairs are (token id, probability).
inline std::vector<std::pair<int, double>> nucleus_distribution(const double* logits,
                                                                long V, double p,
                                                                double temperature) {
  std::vector<double> probs(static_cast<size_t>(V));
  double mx = logits[0] / temperature;
  for (long j = 1; j < V; ++j) mx = std::max(mx, logits[j] / temperature);
  double sum = 0.0;
  for (long j = 0; j < V; ++j) {
    probs[static_cast<size_t>(j)] = std::exp(logits[j] / temperature - mx);
    sum += probs[static_cast<size_t>(j)];
  }
  for (auto& q : probs) q /= sum;

  std::vector<int> order(static_cast<size_t>(V));
  for (long j = 0; j < V; ++j) order[static_cast<size_t>(j)] = static_cast<int>(j);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (probs[static_cast<size_t>(a)] != probs[static_cast<size_t>(b)])
      return probs[static_cast<size_t>(a)] > probs[static_cast<size_t>(b)];
    return a < b;
  });

  // the >= p comparison gets a whisker of slack so that masses which are
  // exactly on the boundary up to softmax rounding close the set
  std::vector<std::pair<int, double>> nucleus;
  double cum = 0.0;
  for (int id : order) {
    nucleus.emplace_back(id, probs[static_cast<size_t>(id)]);
    cum += probs[static_cast<size_t>(id)];
    if (cum >= p - 1e-9) break;
  }
  for (auto& [id, q] : nucleus) q /= cum;
  return nucleus;
}

inline int nucleus_sample(const double* logits, long V, double p, double temperature,
                          Rng& rng) {
  auto nucleus = nucleus_distribution(logits, V, p, temperature);
  const double u = rng.uniform();
  double acc = 0.0;
  for (const auto& [id, q] : nucleus) {
    acc += q;
    if (u < acc) return id;
  }
  return nucleus.back().first;
}

inline int greedy_pick(const double* logits, long V) {
  int best = 0;
  for (long j = 1; j < V; ++j)
    if (logits[j] > logits[best]) best = static_cast<int>(j);
  return best;
}

struct GeneratedStory {
  std::string prompt_id;
  int sample_index = 0;
  std::vector<int> token_ids;
  std::string text;
};

// One sampled continuation. `rng` must already be forked per (prompt, sample).
// When `record_rows` is set, every sampled-from logits row is appended to
// *rows (replay verification).
inline std::vector<int> generate_tokens(Model& m, const PromptLayout& prompt,
                                        const GenerateConfig& gc, Rng rng,
                                        std::vector<Eigen::ArrayXd>* rows = nullptr,
                                        bool ablate_memory_init = false,
                                        Rng mi_rng = Rng(0)) {
  gc.validate();
  const long P = static_cast<long>(prompt.ids.size());
  if (P + 1 > m.cfg.seq_len)
    throw input_error("prompt of " + std::to_string(P) +
                      " tokens does not fit seq_len " + std::to_string(m.cfg.seq_len));
  const bool memory_variant = m.cfg.variant != Variant::Vanilla;
  const bool grad_state = m.tape().grad_enabled;
  m.tape().grad_enabled = false;
  m.tape().rewind(m.base_mark());

  RecurrenceCache cache = m.make_cache();
  EntityMemoryState mem;
  Eigen::ArrayXd row;  // logits the next token is sampled from

  std::vector<Tensor> prompt_hidden;
  for (long b = 0; b < P; b += m.cfg.chunk_size) {
    const long e = std::min(P, b + m.cfg.chunk_size);
    std::vector<int> chunk(prompt.ids.begin() + b, prompt.ids.begin() + e);
    ChunkResult r = m.forward_chunk(chunk, cache, nullptr, true);
    if (e == P) {
      const long V = r.logits.cols();
      row = r.logits.value().segment((e - b - 1) * V, V).eval();
    }
    prompt_hidden.push_back(r.final_hidden);
  }
  if (memory_variant) {
    if (ablate_memory_init) {
      mem = m.init_memory_random(static_cast<int>(prompt.groups.size()), mi_rng);
    } else {
      Tensor ph = prompt_hidden.size() == 1 ? prompt_hidden[0]
                                            : concat_many(prompt_hidden, 0);
      mem = m.init_memory(ph, prompt.groups);
    }
  }

  const size_t mark = m.tape().mark();
  const long V = m.cfg.vocab_size;
  std::vector<int> out, pending;
  while (static_cast<int>(out.size()) < gc.max_tokens) {
    if (rows) rows->push_back(row);
    const int tok = gc.greedy ? greedy_pick(row.data(), V)
                              : nucleus_sample(row.data(), V, gc.nucleus_p,
                                               gc.temperature, rng);
    if (tok == Vocab::EOS) break;
    out.push_back(tok);
    pending.push_back(tok);

    m.tape().rewind(mark);
    if (memory_variant) m.reanchor_memory(mem);
    const bool boundary = static_cast<int>(pending.size()) == m.cfg.chunk_size;
    ChunkResult r = m.forward_chunk(pending, cache, memory_variant ? &mem : nullptr,
                                    boundary);
    row = r.logits.value().segment((static_cast<long>(pending.size()) - 1) * V, V).eval();
    if (boundary) {
      if (m.cfg.variant == Variant::Dynamic)
        m.update_memory(mem, r.final_hidden, r.cross.back());
      pending.clear();
    }
  }
  m.tape().rewind(m.base_mark());
  m.tape().grad_enabled = grad_state;
  return out;
}

// All samples for a set of prompts, seeded per (prompt id, sample index).
inline std::vector<GeneratedStory> generate_stories(
    Model& m, const std::vector<std::pair<std::string, EntityPrompt>>& prompts,
    const Vocab& vocab, const GenerateConfig& gc, bool ablate_memory_init = false) {
  gc.validate();
  std::vector<GeneratedStory> out;
  Rng root(gc.seed);
  for (const auto& [id, prompt] : prompts) {
    PromptLayout layout = layout_prompt(prompt, vocab);
    Rng per_prompt = root.fork(hash_label(id.c_str()));
    for (int s = 0; s < gc.samples_per_prompt; ++s) {
      GeneratedStory g;
      g.prompt_id = id;
      g.sample_index = s;
      g.token_ids = generate_tokens(m, layout, gc,
                                    per_prompt.fork(static_cast<uint64_t>(s)), nullptr,
                                    ablate_memory_init,
                                    per_prompt.fork(hash_label("mi")).fork(
                                        static_cast<uint64_t>(s)));
      g.text = join_tokens(detokenize(g.token_ids, vocab));
      out.push_back(std::move(g));
    }
  }
  return out;
}

inline nlohmann::json generated_to_json(const GeneratedStory& g) {
  return nlohmann::json{{"prompt_id", g.prompt_id},
                        {"sample_index", g.sample_index},
                        {"token_ids", g.token_ids},
                        {"text", g.text}};
}

inline GeneratedStory generated_from_json(const nlohmann::json& j) {
  GeneratedStory g;
  g.prompt_id = j.at("prompt_id").get<std::string>();
  g.sample_index = j.at("sample_index").get<int>();
  g.token_ids = j.at("token_ids").get<std::vector<int>>();
  g.text = j.at("text").get<std::string>();
  return g;
}

inline void save_generations_jsonl(const std::vector<GeneratedStory>& gens,
                                   const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw input_error("cannot open '" + path + "' for writing");
  for (const auto& g : gens) os << generated_to_json(g).dump() << "\n";
}

inline std::vector<GeneratedStory> load_generations_jsonl(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw input_error("cannot open '" + path + "'");
  std::vector<GeneratedStory> out;
  std::string line;
  long line_no = 0;
  std::vector<long> bad;
  std::string first_err;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(generated_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      bad.push_back(line_no);
      if (first_err.empty()) first_err = e.what();
    }
  }
  if (!bad.empty()) {
    std::string msg = "malformed records on lines";
    for (long l : bad) msg += " " + std::to_string(l);
    throw format_error(msg + " (first error: " + first_err + ")");
  }
  return out;
}

}  // namespace mneme
