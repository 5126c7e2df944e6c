#include <CLI11.hpp>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "mneme/checkpoint.hpp"
#include "mneme/eval.hpp"
#include "mneme/experiment.hpp"
#include "mneme/generate.hpp"
#include "mneme/metrics.hpp"
#include "mneme/synth.hpp"
#include "mneme/train.hpp"

// Subcommand front end. Machine-readable artifacts go to files; progress and
// summaries go to stderr. Exit codes: 0 success, 2 usage/config, 3 data,
// 4 numeric failure.

namespace fs = std::filesystem;
using namespace mneme;

namespace {

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("cannot read config file " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config file " + path + " is not valid JSON: " + e.what());
  }
}

void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw input_error("cannot write " + path);
  out << body;
}

void ensure_parent_dirs(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw input_error("cannot create directory " + dir + ": " + ec.message());
}

nlohmann::json vocab_to_json(const Vocab& v) {
  std::vector<std::string> toks;
  for (int i = Vocab::num_specials; i < v.size(); ++i) toks.push_back(v.token_of(i));
  return toks;
}

Vocab vocab_from_json(const nlohmann::json& j) {
  Vocab v;
  for (const auto& t : j) v.add(t.get<std::string>());
  return v;
}

Vocab vocab_of_checkpoint(const LoadedModel& lm, const std::string& path) {
  if (!lm.extra.contains("vocab"))
    throw format_error("checkpoint " + path + " carries no vocabulary");
  return vocab_from_json(lm.extra.at("vocab"));
}

void reject_nan(double v, const std::string& what) {
  if (!std::isfinite(v)) throw numeric_error(what + " is not finite");
}

// split a generation's text back into tokens for the match metrics
std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

nlohmann::json eval_to_json(const CorpusEval& e) {
  nlohmann::json j;
  j["cache_size"] = e.cache_size;
  j["stories"] = e.stories;
  j["perplexity"] = e.perplexity;
  j["nll_entity"] = e.nll_entity ? nlohmann::json(*e.nll_entity) : nlohmann::json();
  j["nll_rest"] = e.nll_rest ? nlohmann::json(*e.nll_rest) : nlohmann::json();
  auto& per = j["nll_entity_per_section"] = nlohmann::json::array();
  for (const auto& s : e.nll_entity_per_section)
    per.push_back(s ? nlohmann::json(*s) : nlohmann::json());
  return j;
}

nlohmann::json truth_to_json(const StoryTruth& t) {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json();
  };
  nlohmann::json j;
  j["story_id"] = t.story_id;
  j["C"] = opt(t.C);
  j["Cbar"] = opt(t.Cbar);
  auto& vj = j["V"] = nlohmann::json::array();
  for (const auto& v : t.V) vj.push_back(opt(v));
  j["V_mean"] = opt(t.V_mean);
  j["U"] = opt(t.U);
  j["exact"] = t.exact;
  j["subset"] = t.subset;
  j["unique_entities"] = t.unique_entities;
  j["mentions_per_entity"] = opt(t.mentions_per_entity);
  return j;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config, corpus, out;
  long seed = -1;
  std::string variant;
};

int cmd_train(const TrainArgs& a) {
  nlohmann::json cfg = read_json_file(a.config);
  auto corpus = load_jsonl(a.corpus);
  if (corpus.empty()) throw input_error("corpus " + a.corpus + " is empty");
  Vocab vocab = Vocab::build(corpus);

  if (!cfg.contains("vocab_size")) cfg["vocab_size"] = vocab.size();
  if (!a.variant.empty()) cfg["variant"] = a.variant;
  ModelConfig mc = ModelConfig::from_json(cfg);
  if (mc.vocab_size < vocab.size())
    throw config_error("vocab_size " + std::to_string(mc.vocab_size) +
                       " is smaller than the corpus vocabulary (" +
                       std::to_string(vocab.size()) + ")");
  TrainConfig tc = TrainConfig::from_json(cfg);
  if (a.seed >= 0) tc.seed = static_cast<uint64_t>(a.seed);

  ensure_parent_dirs(a.out);
  std::cerr << "[train] " << variant_name(mc.variant) << ", " << corpus.size()
            << " stories, vocab " << vocab.size() << ", " << tc.steps
            << " steps\n";

  Model m(mc, tc.seed);
  auto trace = train_loop(m, corpus, vocab, tc);
  for (const auto& r : trace) {
    reject_nan(r.nll, "training nll at step " + std::to_string(r.step));
    reject_nan(r.total, "training loss at step " + std::to_string(r.step));
  }

  std::ofstream tf((fs::path(a.out) / "trace.csv").string(), std::ios::binary);
  write_trace_csv(tf, trace);
  tf.close();

  nlohmann::json extra;
  extra["vocab"] = vocab_to_json(vocab);
  extra["train"] = tc.to_json();
  save_checkpoint(m, (fs::path(a.out) / "model.mneme").string(), extra);

  std::cerr << "[train] nll " << trace.front().nll << " -> " << trace.back().nll
            << "; wrote " << a.out << "/model.mneme and trace.csv\n";
  return 0;
}

// ---------------------------------------------------------------------------
// generate

struct GenArgs {
  std::string checkpoint, prompts, out;
  GenerateConfig gc;
  long seed = -1;
  bool ablate_memory_init = false;
};

int cmd_generate(const GenArgs& a) {
  LoadedModel lm = load_checkpoint(a.checkpoint);
  Vocab vocab = vocab_of_checkpoint(lm, a.checkpoint);
  auto corpus = load_jsonl(a.prompts);
  if (corpus.empty()) throw input_error("prompt corpus " + a.prompts + " is empty");

  GenerateConfig gc = a.gc;
  if (a.seed >= 0) gc.seed = static_cast<uint64_t>(a.seed);
  gc.validate();

  std::vector<std::pair<std::string, EntityPrompt>> prompts;
  for (const auto& n : corpus) prompts.emplace_back(n.story_id, build_entity_prompt(n));

  std::cerr << "[generate] " << prompts.size() << " prompts x "
            << gc.samples_per_prompt << " samples, p=" << gc.nucleus_p
            << ", T=" << gc.temperature << "\n";
  auto gens = generate_stories(lm.model, prompts, vocab, gc, a.ablate_memory_init);
  if (!a.out.empty() && fs::path(a.out).has_parent_path())
    ensure_parent_dirs(fs::path(a.out).parent_path().string());
  save_generations_jsonl(gens, a.out);
  std::cerr << "[generate] wrote " << gens.size() << " stories to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
  std::string stories, gold, out, checkpoint;
  int sections = 10;
  int protagonists = 3;
};

// annotated corpus records have token/sentence structure; generation records
// carry prompt ids and sampled token ids
bool looks_like_generations(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("cannot read " + path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      return j.contains("token_ids") && j.contains("prompt_id");
    } catch (const nlohmann::json::exception&) {
      return false;  // let the real loader produce the diagnostic
    }
  }
  throw input_error(path + " is empty");
}

int cmd_analyze(const AnalyzeArgs& a) {
  ensure_parent_dirs(a.out);
  std::vector<StoryMetrics> rows;

  if (looks_like_generations(a.stories)) {
    if (a.gold.empty())
      throw config_error("analyzing generations needs --gold with the prompt corpus");
    auto gens = load_generations_jsonl(a.stories);
    auto gold = load_jsonl(a.gold);
    std::unordered_map<std::string, EntityPrompt> gold_prompts;
    for (const auto& n : gold) gold_prompts.emplace(n.story_id, build_entity_prompt(n));
    for (const auto& g : gens) {
      auto it = gold_prompts.find(g.prompt_id);
      if (it == gold_prompts.end())
        throw input_error("generation references unknown prompt '" + g.prompt_id + "'");
      rows.push_back(analyze_generation(
          g.prompt_id + "#" + std::to_string(g.sample_index),
          split_ws(g.text), it->second));
    }
    std::cerr << "[analyze] " << rows.size() << " generations against "
              << gold_prompts.size() << " gold prompts\n";
  } else {
    auto corpus = load_jsonl(a.stories);
    std::optional<LoadedModel> lm;
    std::optional<Vocab> vocab;
    if (!a.checkpoint.empty()) {
      lm.emplace(load_checkpoint(a.checkpoint));
      vocab.emplace(vocab_of_checkpoint(*lm, a.checkpoint));
    }
    for (const auto& n : corpus) {
      StoryMetrics sm = analyze_story(n, a.sections, a.protagonists);
      if (lm) sm.lm = lm_uncertainty(lm->model, n, *vocab, a.sections);
      rows.push_back(std::move(sm));
    }
    std::cerr << "[analyze] " << rows.size() << " annotated stories\n";
  }

  write_text_file((fs::path(a.out) / "metrics.json").string(),
                  metrics_report_json(rows).dump(2) + "\n");
  write_text_file((fs::path(a.out) / "metrics.csv").string(),
                  metrics_report_csv(rows));
  write_text_file((fs::path(a.out) / "per_section.csv").string(),
                  per_section_csv(rows));
  std::cerr << "[analyze] wrote metrics.json, metrics.csv, per_section.csv to "
            << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval-lm

struct EvalArgs {
  std::string checkpoint, corpus, out;
  long cache_size = -1;
  int sections = 10;
};

int cmd_eval_lm(const EvalArgs& a) {
  LoadedModel lm = load_checkpoint(a.checkpoint);
  Vocab vocab = vocab_of_checkpoint(lm, a.checkpoint);
  auto corpus = load_jsonl(a.corpus);
  lm.model.cache_limit = a.cache_size;
  CorpusEval ev = eval_corpus(lm.model, corpus, vocab, a.sections);
  reject_nan(ev.perplexity, "perplexity");
  if (!a.out.empty() && fs::path(a.out).has_parent_path())
    ensure_parent_dirs(fs::path(a.out).parent_path().string());
  write_text_file(a.out, eval_to_json(ev).dump(2) + "\n");
  std::cerr << "[eval-lm] cache " << ev.cache_size << ": ppl " << ev.perplexity;
  if (ev.nll_entity) std::cerr << ", entity nll " << *ev.nll_entity;
  std::cerr << "; wrote " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string config, out;
  long seed = -1;
};

int cmd_synth(const SynthArgs& a) {
  SyntheticCorpusSpec spec = SyntheticCorpusSpec::from_json(read_json_file(a.config));
  if (a.seed >= 0) spec.seed = static_cast<uint64_t>(a.seed);
  SynthResult res = synth_generate(spec);
  ensure_parent_dirs(a.out);
  save_jsonl(res.corpus, (fs::path(a.out) / "corpus.jsonl").string());
  nlohmann::json truth = nlohmann::json::array();
  for (const auto& t : res.truth) truth.push_back(truth_to_json(t));
  write_text_file((fs::path(a.out) / "truth.json").string(), truth.dump(2) + "\n");
  std::cerr << "[synth] wrote " << res.corpus.size() << " stories to " << a.out
            << "/corpus.jsonl (+ truth.json)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// degradation study

struct DegArgs {
  std::string config, out;
};

int cmd_degradation(const DegArgs& a) {
  ExperimentPlan plan = ExperimentPlan::from_json(read_json_file(a.config));
  auto corpus = load_jsonl(plan.corpus);
  StudyResult res = run_degradation_study(plan, corpus, &std::cerr);
  write_study_artifacts(res, a.out, plan.svg);
  std::cerr << "[degradation] wrote degradation.csv"
            << (plan.svg ? ", degradation.svg" : "") << ", summary.json to "
            << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"entity-memory narrative language model workbench"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  train->add_option("--config", ta.config, "flat JSON with model + training keys")
      ->required();
  train->add_option("--corpus", ta.corpus, "annotated corpus JSONL")->required();
  train->add_option("--out", ta.out, "output directory")->required();
  train->add_option("--seed", ta.seed, "override the config seed");
  train->add_option("--variant", ta.variant, "vanilla | static | dynamic");

  GenArgs ga;
  auto* gen = app.add_subcommand("generate", "sample stories from entity prompts");
  gen->add_option("--checkpoint", ga.checkpoint, "trained model file")->required();
  gen->add_option("--prompts", ga.prompts, "corpus JSONL supplying the prompts")
      ->required();
  gen->add_option("--out", ga.out, "generations JSONL path")->required();
  gen->add_option("--nucleus-p", ga.gc.nucleus_p, "top-p cutoff");
  gen->add_option("--temperature", ga.gc.temperature, "softmax temperature");
  gen->add_option("--max-tokens", ga.gc.max_tokens, "length cap per sample");
  gen->add_option("--samples", ga.gc.samples_per_prompt, "samples per prompt");
  gen->add_option("--seed", ga.seed, "sampling seed");
  gen->add_flag("--greedy", ga.gc.greedy, "argmax decoding instead of sampling");
  gen->add_flag("--ablate-memory-init", ga.ablate_memory_init,
                "random memory slots (no-MI ablation)");

  AnalyzeArgs aa;
  auto* ana = app.add_subcommand(
      "analyze", "metrics for an annotated corpus or a generations file");
  ana->add_option("--stories", aa.stories, "corpus JSONL or generations JSONL")
      ->required();
  ana->add_option("--gold", aa.gold, "gold corpus (required for generations)");
  ana->add_option("--out", aa.out, "output directory")->required();
  ana->add_option("--checkpoint", aa.checkpoint,
                  "add teacher-forced uncertainty columns (annotated input only)");
  ana->add_option("--sections", aa.sections, "narrative sections L");
  ana->add_option("--protagonists", aa.protagonists, "top-k protagonists");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval-lm", "teacher-forced corpus evaluation");
  ev->add_option("--checkpoint", ea.checkpoint, "trained model file")->required();
  ev->add_option("--corpus", ea.corpus, "annotated corpus JSONL")->required();
  ev->add_option("--out", ea.out, "output JSON path")->required();
  ev->add_option("--cache-size", ea.cache_size,
                 "recurrence cache override (-1 keeps the build size)");
  ev->add_option("--sections", ea.sections, "narrative sections L");

  SynthArgs sa;
  auto* sy = app.add_subcommand("synth", "emit a synthetic corpus + ground truth");
  sy->add_option("--config", sa.config, "synthetic corpus spec JSON")->required();
  sy->add_option("--out", sa.out, "output directory")->required();
  sy->add_option("--seed", sa.seed, "override the spec seed");

  DegArgs da;
  auto* dg = app.add_subcommand(
      "degradation", "train the variant grid and sweep cache sizes");
  dg->add_option("--config", da.config, "experiment plan JSON")->required();
  dg->add_option("--out", da.out, "output directory")->required();

  try {
    app.parse(argc, argv);
    if (*train) return cmd_train(ta);
    if (*gen) return cmd_generate(ga);
    if (*ana) return cmd_analyze(aa);
    if (*ev) return cmd_eval_lm(ea);
    if (*sy) return cmd_synth(sa);
    if (*dg) return cmd_degradation(da);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const contract_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const numeric_error& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const input_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const format_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const shape_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
