#pragma once

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <ostream>
#include <string>
#include <vector>

#include "mneme/corpus.hpp"
#include "mneme/model.hpp"
#include "mneme/rng.hpp"

// Objective assembly and the chunked training loop. A sequence is laid out as
// [BOS, prompt, EOP, narrative, EOS]; the loss covers only the narrative
// predictions (the last prompt position predicts the first narrative token)
// plus the closing EOS, and the cross-attention regularizer covers exactly the
// narrative positions.

namespace mneme {

struct TrainConfig {
  double lambda = 1.0;
  double learning_rate = 1e-3;
  std::string optimizer = "adam";
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int steps = 1000;
  int batch_size = 1;
  uint64_t seed = 7;
  bool ablate_memory_init = false;       // no-MI: random slots
  bool ablate_entity_supervision = false;  // no-ES: regularizer off
  double gradient_clip_norm = 1.0;

  void validate() const {
    auto bad = [](const std::string& w) { throw config_error("train config: " + w); };
    if (lambda < 0.0) bad("lambda must be >= 0");
    if (learning_rate <= 0.0) bad("learning_rate must be positive");
    if (optimizer != "adam" && optimizer != "sgd") bad("optimizer must be adam or sgd");
    if (steps < 1) bad("steps must be > 0");
    if (batch_size < 1) bad("batch_size must be > 0");
    if (gradient_clip_norm <= 0.0) bad("gradient_clip_norm must be positive");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"lambda", lambda},
                          {"learning_rate", learning_rate},
                          {"optimizer", optimizer},
                          {"adam_beta1", adam_beta1},
                          {"adam_beta2", adam_beta2},
                          {"adam_eps", adam_eps},
                          {"steps", steps},
                          {"batch_size", batch_size},
                          {"seed", seed},
                          {"ablate_memory_init", ablate_memory_init},
                          {"ablate_entity_supervision", ablate_entity_supervision},
                          {"gradient_clip_norm", gradient_clip_norm}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    auto get = [&](const char* k, auto& f) {
      if (j.contains(k)) f = j.at(k).get<std::decay_t<decltype(f)>>();
    };
    get("lambda", c.lambda);
    get("learning_rate", c.learning_rate);
    get("optimizer", c.optimizer);
    get("adam_beta1", c.adam_beta1);
    get("adam_beta2", c.adam_beta2);
    get("adam_eps", c.adam_eps);
    get("steps", c.steps);
    get("batch_size", c.batch_size);
    get("seed", c.seed);
    get("ablate_memory_init", c.ablate_memory_init);
    get("ablate_entity_supervision", c.ablate_entity_supervision);
    get("gradient_clip_norm", c.gradient_clip_norm);
    c.validate();
    return c;
  }
};

// Per narrative token: a sparse distribution over the Z memory slots. Tokens
// share their sentence's mention set uniformly; mention-free sentences target
// the non-entity slot. Rows sum to exactly 1: the last supported slot takes
// the remainder.
struct EntityTargets {
  int Z = 0;
  long T = 0;
  std::vector<double> rows;  // T x Z row-major

  std::vector<double> slice(long begin, long end) const {
    return {rows.begin() + begin * Z, rows.begin() + end * Z};
  }
};

inline EntityTargets build_entity_targets(const AnnotatedNarrative& n, int Z) {
  const long T = n.num_tokens();
  const long S = n.num_sentences();
  std::vector<std::vector<int>> per_sentence(static_cast<size_t>(S));
  for (const auto& m : n.mentions) {
    if (m.entity_id >= Z - 1)
      throw input_error("story '" + n.story_id + "': entity id " +
                        std::to_string(m.entity_id) + " collides with the " +
                        std::to_string(Z) + "-slot layout (non-entity slot is last)");
    auto& ids = per_sentence[static_cast<size_t>(n.sentence_of(m.start))];
    if (std::find(ids.begin(), ids.end(), m.entity_id) == ids.end())
      ids.push_back(m.entity_id);
  }
  EntityTargets q;
  q.Z = Z;
  q.T = T;
  q.rows.assign(static_cast<size_t>(T * Z), 0.0);
  for (long i = 0; i < T; ++i) {
    auto ids = per_sentence[static_cast<size_t>(n.sentence_of(i))];
    double* row = q.rows.data() + i * Z;
    if (ids.empty()) {
      row[Z - 1] = 1.0;
      continue;
    }
    std::sort(ids.begin(), ids.end());
    const double share = 1.0 / static_cast<double>(ids.size());
    double acc = 0.0;
    for (size_t k = 0; k + 1 < ids.size(); ++k) {
      row[ids[k]] = share;
      acc += share;
    }
    row[ids.back()] = 1.0 - acc;
  }
  return q;
}

// Mean over tokens, layers, and heads of KL(q || a).
inline Tensor regularization_loss(const std::vector<Tensor>& cross_per_layer,
                                  const EntityTargets& q) {
  if (cross_per_layer.empty()) throw contract_error("regularization_loss: no layers");
  Tensor sum = kl_vs_sparse_rows(cross_per_layer[0], q.rows, q.T);
  long rows = cross_per_layer[0].numel() / q.Z;
  for (size_t l = 1; l < cross_per_layer.size(); ++l) {
    sum = add(sum, kl_vs_sparse_rows(cross_per_layer[l], q.rows, q.T));
    rows += cross_per_layer[l].numel() / q.Z;
  }
  return scale(sum, 1.0 / static_cast<double>(rows));
}

// NLL mean plus the weighted regularizer; the all-in-one form used by tests.
inline Tensor total_loss(Tensor logits, const std::vector<int>& targets,
                         const std::vector<Tensor>& cross_per_layer,
                         const EntityTargets& q, double lambda) {
  Tensor nll = cross_entropy_nll(logits, targets, Reduction::Mean);
  if (lambda == 0.0 || cross_per_layer.empty()) return nll;
  return add(nll, scale(regularization_loss(cross_per_layer, q), lambda));
}

struct SequenceRun {
  Tensor loss;                    // scalar: nll_mean + lambda * kl_mean
  double nll_sum = 0.0;           // value snapshots for traces
  double kl_sum = 0.0;
  long nll_terms = 0;
  long kl_terms = 0;              // token-position rows summed over layers*heads
  std::vector<double> token_nll;  // one entry per narrative token, then EOS
  std::vector<Eigen::ArrayXd> logit_rows;  // on request: row per prediction
  Eigen::ArrayXd cross_mass;      // on request: [T x Z] final-layer head-mean
  EntityMemoryState memory;
  RecurrenceCache cache;

  double nll_mean() const {
    return nll_terms ? nll_sum / static_cast<double>(nll_terms) : 0.0;
  }
  double kl_mean() const {
    return kl_terms ? kl_sum / static_cast<double>(kl_terms) : 0.0;
  }
};

struct RunOptions {
  double lambda = 0.0;
  const EntityTargets* targets = nullptr;  // required when lambda > 0
  bool ablate_memory_init = false;
  Rng mi_rng = Rng(0);
  bool want_rows = false;   // keep a copy of every prediction's logits row
  bool want_cross = false;  // keep final-layer cross-attention mass per token
};

// Teacher-forced pass over [BOS, prompt, narrative, EOS]: prompt chunks run
// the vanilla path, memory initializes from the prompt hidden states, then
// narrative chunks accumulate NLL (+ the KL regularizer) with dynamic memory
// updates at every chunk boundary. The single walk shared by training,
// evaluation, and generation replay.
inline SequenceRun run_sequence(Model& m, const PromptLayout& prompt,
                                const std::vector<int>& narrative_ids,
                                const RunOptions& opt = {}) {
  const bool memory_variant = m.cfg.variant != Variant::Vanilla;
  std::vector<int> stream = narrative_ids;
  stream.push_back(Vocab::EOS);
  const long T = static_cast<long>(narrative_ids.size());
  const long P = static_cast<long>(prompt.ids.size());
  if (T < 1) throw input_error("run_sequence: empty narrative");
  if (P + T + 1 > m.cfg.seq_len)
    throw input_error("prompt + narrative is " + std::to_string(P + T + 1) +
                      " tokens, seq_len is " + std::to_string(m.cfg.seq_len));

  SequenceRun out;
  out.cache = m.make_cache();
  auto log_probs = [](const Tensor& logits, long row, int target) {
    const long V = logits.cols();
    const double* p = logits.value().data() + row * V;
    double mx = p[0];
    for (long j = 1; j < V; ++j) mx = std::max(mx, p[j]);
    double s = 0.0;
    for (long j = 0; j < V; ++j) s += std::exp(p[j] - mx);
    return -(p[target] - mx - std::log(s));
  };
  auto keep_row = [&](const Tensor& logits, long row) {
    const long V = logits.cols();
    out.logit_rows.push_back(logits.value().segment(row * V, V).eval());
  };

  // prompt pass: no cross-attention, collect hidden states for the slots
  std::vector<Tensor> prompt_hidden;
  Tensor first_pred_logits;
  for (long b = 0; b < P; b += m.cfg.chunk_size) {
    const long e = std::min(P, b + m.cfg.chunk_size);
    std::vector<int> chunk(prompt.ids.begin() + b, prompt.ids.begin() + e);
    ChunkResult r = m.forward_chunk(chunk, out.cache, nullptr, true);
    prompt_hidden.push_back(r.final_hidden);
    if (e == P) first_pred_logits = slice_rows(r.logits, e - b - 1, e - b);
  }
  Tensor nll = cross_entropy_nll(first_pred_logits, {stream[0]}, Reduction::Sum);
  out.token_nll.push_back(log_probs(first_pred_logits, 0, stream[0]));
  if (opt.want_rows) keep_row(first_pred_logits, 0);
  out.nll_terms = 1;

  if (memory_variant) {
    if (opt.ablate_memory_init) {
      Rng mi = opt.mi_rng;
      out.memory = m.init_memory_random(static_cast<int>(prompt.groups.size()), mi);
    } else {
      Tensor ph = prompt_hidden.size() == 1 ? prompt_hidden[0]
                                            : concat_many(prompt_hidden, 0);
      out.memory = m.init_memory(ph, prompt.groups);
    }
  }

  const bool use_kl = memory_variant && opt.lambda > 0.0;
  if (use_kl) {
    if (!opt.targets) throw contract_error("run_sequence: lambda > 0 without targets");
    if (opt.targets->T != T || opt.targets->Z != out.memory.Z)
      throw shape_error("run_sequence: entity targets do not match the narrative");
  }
  if (opt.want_cross && memory_variant)
    out.cross_mass = Eigen::ArrayXd::Zero(T * out.memory.Z);

  Tensor kl;
  for (long b = 0; b < T; b += m.cfg.chunk_size) {
    const long e = std::min(T, b + m.cfg.chunk_size);
    std::vector<int> chunk(stream.begin() + b, stream.begin() + e);
    ChunkResult r = m.forward_chunk(chunk, out.cache,
                                    memory_variant ? &out.memory : nullptr, true);
    std::vector<int> next(stream.begin() + b + 1, stream.begin() + e + 1);
    nll = add(nll, cross_entropy_nll(r.logits, next, Reduction::Sum));
    for (long i = b; i < e; ++i) {
      out.token_nll.push_back(log_probs(r.logits, i - b, stream[i + 1]));
      if (opt.want_rows) keep_row(r.logits, i - b);
    }
    out.nll_terms += e - b;
    if (use_kl) {
      const long Tc = e - b;
      std::vector<double> q = opt.targets->slice(b, e);
      for (const Tensor& a : r.cross) {
        kl = kl.valid() ? add(kl, kl_vs_sparse_rows(a, q, Tc))
                        : kl_vs_sparse_rows(a, q, Tc);
        out.kl_terms += a.numel() / out.memory.Z;
      }
    }
    if (opt.want_cross && memory_variant) {
      const Tensor& a = r.cross.back();  // [H x Tc x Z]
      const long H = a.dim(0), Tc = a.dim(1), Z = a.dim(2);
      const auto& av = a.value();
      for (long h = 0; h < H; ++h)
        for (long i = 0; i < Tc; ++i)
          for (long z = 0; z < Z; ++z)
            out.cross_mass[(b + i) * Z + z] += av[(h * Tc + i) * Z + z] / static_cast<double>(H);
    }
    if (m.cfg.variant == Variant::Dynamic)
      m.update_memory(out.memory, r.final_hidden, r.cross.back());
  }

  out.nll_sum = nll.item();
  out.loss = scale(nll, 1.0 / static_cast<double>(out.nll_terms));
  if (use_kl && kl.valid()) {
    out.kl_sum = kl.item();
    out.loss = add(out.loss, scale(kl, opt.lambda / static_cast<double>(out.kl_terms)));
  }
  return out;
}

// Story wrapper: prompt from first mentions, targets from sentence mention
// sets (only when the regularizer is active).
inline SequenceRun run_story(Model& m, const AnnotatedNarrative& story,
                             const Vocab& vocab, double lambda,
                             bool ablate_memory_init = false, Rng mi_rng = Rng(0),
                             bool want_cross = false) {
  PromptLayout prompt = layout_prompt(build_entity_prompt(story), vocab);
  RunOptions opt;
  opt.lambda = lambda;
  opt.ablate_memory_init = ablate_memory_init;
  opt.mi_rng = mi_rng;
  opt.want_cross = want_cross;
  EntityTargets targets;
  const int Z = static_cast<int>(prompt.groups.size()) + 1;
  if (m.cfg.variant != Variant::Vanilla && lambda > 0.0) {
    targets = build_entity_targets(story, Z);
    opt.targets = &targets;
  }
  return run_sequence(m, prompt, tokenize(story.tokens, vocab), opt);
}

// Adam/SGD over the model's named leaves with global-norm clipping.
class Optimizer {
 public:
  Optimizer(Model& m, const TrainConfig& tc) : m_(m), tc_(tc) {
    if (tc_.optimizer == "adam") {
      state_m_.resize(m_.params().size());
      state_v_.resize(m_.params().size());
      for (size_t i = 0; i < m_.params().size(); ++i) {
        const long n = m_.params()[i].second.numel();
        state_m_[i] = Eigen::ArrayXd::Zero(n);
        state_v_[i] = Eigen::ArrayXd::Zero(n);
      }
    }
  }

  void zero_grad() {
    for (auto& [name, t] : m_.params())
      if (t.grad().size() > 0) t.grad().setZero();
  }

  // scales accumulated gradients by 1/scale_div, clips, applies the update
  void step(double scale_div = 1.0) {
    ++t_;
    double sq = 0.0;
    for (auto& [name, t] : m_.params()) {
      if (t.grad().size() == 0) continue;
      if (scale_div != 1.0) t.grad() /= scale_div;
      sq += (t.grad() * t.grad()).sum();
    }
    const double norm = std::sqrt(sq);
    const double clip = tc_.gradient_clip_norm;
    const double factor = norm > clip ? clip / norm : 1.0;
    const double b1 = tc_.adam_beta1, b2 = tc_.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, t_), bc2 = 1.0 - std::pow(b2, t_);
    for (size_t i = 0; i < m_.params().size(); ++i) {
      auto& t = m_.params()[i].second;
      if (t.grad().size() == 0) continue;
      Eigen::ArrayXd g = t.grad() * factor;
      if (tc_.optimizer == "sgd") {
        t.value() -= tc_.learning_rate * g;
      } else {
        auto& mm = state_m_[i];
        auto& vv = state_v_[i];
        mm = b1 * mm + (1.0 - b1) * g;
        vv = b2 * vv + (1.0 - b2) * g * g;
        t.value() -= tc_.learning_rate * (mm / bc1) / ((vv / bc2).sqrt() + tc_.adam_eps);
      }
    }
  }

 private:
  Model& m_;
  TrainConfig tc_;
  long t_ = 0;
  std::vector<Eigen::ArrayXd> state_m_, state_v_;
};

struct TraceRow {
  long step = 0;
  double nll = 0.0, kl = 0.0, total = 0.0;
};

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
  os << "step,nll,kl,total\n";
  char line[128];
  for (const auto& r : trace) {
    std::snprintf(line, sizeof line, "%ld,%.10g,%.10g,%.10g\n", r.step, r.nll, r.kl,
                  r.total);
    os << line;
  }
}

// Sequential batches sampled with the seeded order stream; one optimizer step
// per batch. Deterministic: same config + seed reproduce the trace and the
// final weights bit-exactly.
inline std::vector<TraceRow> train_loop(Model& m, const std::vector<AnnotatedNarrative>& corpus,
                                        const Vocab& vocab, const TrainConfig& tc) {
  tc.validate();
  if (corpus.empty()) throw input_error("train_loop: empty corpus");
  const double lambda_eff = tc.ablate_entity_supervision ? 0.0 : tc.lambda;
  Rng order = Rng(tc.seed).fork(hash_label("order"));
  Rng mi_root = Rng(tc.seed).fork(hash_label("memory_init"));
  uint64_t visit = 0;
  Optimizer opt(m, tc);
  std::vector<TraceRow> trace;
  trace.reserve(static_cast<size_t>(tc.steps));

  for (int step = 1; step <= tc.steps; ++step) {
    opt.zero_grad();
    double nll_sum = 0.0, kl_sum = 0.0;
    long nll_terms = 0, kl_terms = 0;
    for (int b = 0; b < tc.batch_size; ++b) {
      const auto& story = corpus[static_cast<size_t>(order.below(corpus.size()))];
      m.tape().rewind(m.base_mark());
      SequenceRun run = run_story(m, story, vocab, lambda_eff,
                                  tc.ablate_memory_init, mi_root.fork(visit++));
      m.tape().backward(run.loss);
      nll_sum += run.nll_sum;
      kl_sum += run.kl_sum;
      nll_terms += run.nll_terms;
      kl_terms += run.kl_terms;
    }
    opt.step(static_cast<double>(tc.batch_size));
    TraceRow row;
    row.step = step;
    row.nll = nll_sum / static_cast<double>(nll_terms);
    row.kl = kl_terms ? kl_sum / static_cast<double>(kl_terms) : 0.0;
    row.total = row.nll + lambda_eff * row.kl;
    trace.push_back(row);
  }
  m.tape().rewind(m.base_mark());
  return trace;
}

}  // namespace mneme
