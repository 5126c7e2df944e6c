#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mneme/eval.hpp"
#include "mneme/train.hpp"

// Cache-degradation study: train matched variants across seeds on one corpus,
// sweep the recurrence cache on a held-out tail, and aggregate the tightest
// cache's entity-NLL degradation per variant.

namespace mneme {

// Worker count for embarrassingly parallel jobs: hardware concurrency, capped
// by the MNEME_THREADS environment variable and by the job count.
inline int worker_cap(size_t jobs) {
  long cap = static_cast<long>(std::thread::hardware_concurrency());
  if (cap < 1) cap = 1;
  if (const char* env = std::getenv("MNEME_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || v < 1)
      throw config_error("MNEME_THREADS must be a positive integer");
    cap = v;
  }
  return static_cast<int>(std::min<long>(cap, static_cast<long>(jobs)));
}

// Run fn(0..jobs-1) over a capped worker pool. Exceptions in workers are
// rethrown on the caller thread (first one wins).
inline void parallel_for_jobs(size_t jobs, const std::function<void(size_t)>& fn) {
  const int workers = worker_cap(jobs);
  if (workers <= 1) {
    for (size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const size_t i = next.fetch_add(1);
        if (i >= jobs) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

struct ExperimentPlan {
  std::vector<std::string> variants;
  std::vector<long> cache_sizes = {500, 100, 50, 10};
  std::vector<uint64_t> seeds = {1, 2, 3};
  std::string corpus;
  double val_fraction = 0.2;
  int sections = 10;
  bool svg = true;
  nlohmann::json model;  // flat model keys (vocab_size filled from the corpus)
  nlohmann::json train;  // flat train keys (seed overridden per run)

  static ExperimentPlan from_json(const nlohmann::json& j) {
    ExperimentPlan p;
    p.variants = j.at("variants").get<std::vector<std::string>>();
    if (j.contains("cache_sizes"))
      p.cache_sizes = j.at("cache_sizes").get<std::vector<long>>();
    if (j.contains("seeds")) p.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    p.corpus = j.at("corpus").get<std::string>();
    if (j.contains("val_fraction")) p.val_fraction = j.at("val_fraction").get<double>();
    if (j.contains("sections")) p.sections = j.at("sections").get<int>();
    if (j.contains("svg")) p.svg = j.at("svg").get<bool>();
    p.model = j.value("model", nlohmann::json::object());
    p.train = j.value("train", nlohmann::json::object());
    if (p.variants.empty()) throw config_error("experiment plan: empty variant list");
    if (p.cache_sizes.empty()) throw config_error("experiment plan: empty cache sweep");
    if (p.seeds.empty()) throw config_error("experiment plan: empty seed list");
    for (const auto& v : p.variants) variant_of(v);  // validates the names
    if (p.val_fraction <= 0.0 || p.val_fraction >= 1.0)
      throw config_error("experiment plan: val_fraction must be inside (0,1)");
    return p;
  }
};

struct StudyResult {
  std::vector<DegradationTable> tables;  // variants x seeds, seed fastest
  nlohmann::json summary;
};

// Train every (variant, seed) pair on the corpus head and sweep the cache on
// the tail. The summary records each variant's percentage entity-NLL
// degradation at the tightest cache, per seed and meaned over seeds.
inline StudyResult run_degradation_study(const ExperimentPlan& plan,
                                         const std::vector<AnnotatedNarrative>& corpus,
                                         std::ostream* progress = nullptr) {
  if (corpus.size() < 5) throw input_error("degradation study needs >= 5 stories");
  Vocab vocab = Vocab::build(corpus);

  const size_t val_n = std::max<size_t>(
      1, static_cast<size_t>(plan.val_fraction * static_cast<double>(corpus.size())));
  std::vector<AnnotatedNarrative> train_set(corpus.begin(), corpus.end() - val_n);
  std::vector<AnnotatedNarrative> val_set(corpus.end() - val_n, corpus.end());

  nlohmann::json mj = plan.model;
  if (!mj.contains("vocab_size")) mj["vocab_size"] = vocab.size();

  struct Job {
    std::string variant;
    uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& v : plan.variants)
    for (uint64_t s : plan.seeds) jobs.push_back({v, s});

  StudyResult out;
  out.tables.resize(jobs.size());

  if (progress)
    *progress << "[degradation] " << jobs.size() << " runs ("
              << plan.variants.size() << " variants x " << plan.seeds.size()
              << " seeds), train " << train_set.size() << " / val "
              << val_set.size() << ", workers " << worker_cap(jobs.size())
              << "\n";

  std::mutex log_mu;
  parallel_for_jobs(jobs.size(), [&](size_t i) {
    nlohmann::json mjv = mj;
    mjv["variant"] = jobs[i].variant;
    ModelConfig mc = ModelConfig::from_json(mjv);
    TrainConfig tc = TrainConfig::from_json(plan.train);
    tc.seed = jobs[i].seed;
    Model m(mc, tc.seed);
    auto trace = train_loop(m, train_set, vocab, tc);
    if (!std::isfinite(trace.back().total))
      throw numeric_error(jobs[i].variant + " final loss is not finite");
    out.tables[i] =
        degradation_sweep(m, val_set, vocab, plan.cache_sizes, plan.sections,
                          jobs[i].variant + "-s" + std::to_string(jobs[i].seed));
    if (progress) {
      std::lock_guard<std::mutex> lk(log_mu);
      *progress << "[degradation] " << out.tables[i].label << " done (train nll "
                << trace.back().nll << ")\n";
    }
  });

  const long tight =
      *std::min_element(plan.cache_sizes.begin(), plan.cache_sizes.end());
  size_t tight_idx = 0;
  for (size_t k = 0; k < plan.cache_sizes.size(); ++k)
    if (plan.cache_sizes[k] == tight) tight_idx = k;

  nlohmann::json summary;
  summary["cache_sizes"] = plan.cache_sizes;
  summary["seeds"] = plan.seeds;
  summary["baseline"] = out.tables.front().baseline;
  summary["tightest"] = tight;
  auto& per = summary["variants"] = nlohmann::json::object();
  size_t ji = 0;
  for (const auto& v : plan.variants) {
    double sum = 0.0;
    long cnt = 0;
    nlohmann::json per_seed = nlohmann::json::array();
    for (size_t s = 0; s < plan.seeds.size(); ++s, ++ji) {
      const auto& pct = out.tables[ji].entity_pct[tight_idx];
      per_seed.push_back(pct ? nlohmann::json(*pct) : nlohmann::json());
      if (pct) {
        sum += *pct;
        ++cnt;
      }
    }
    nlohmann::json row;
    row["entity_pct_at_tightest"] = per_seed;
    row["mean_entity_pct_at_tightest"] =
        cnt ? nlohmann::json(sum / static_cast<double>(cnt)) : nlohmann::json();
    per[v] = row;
  }
  out.summary = std::move(summary);
  return out;
}

// Write degradation.csv, summary.json and (optionally) degradation.svg into
// dir, creating it if needed.
inline void write_study_artifacts(const StudyResult& res, const std::string& dir,
                                  bool svg) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw input_error("cannot create directory " + dir + ": " + ec.message());
  auto put = [&](const char* name, const std::string& body) {
    const std::string path = (std::filesystem::path(dir) / name).string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw input_error("cannot write " + path);
    out << body;
  };
  put("degradation.csv", degradation_csv(res.tables));
  if (svg) put("degradation.svg", degradation_svg(res.tables));
  put("summary.json", res.summary.dump(2) + "\n");
}

}  // namespace mneme
