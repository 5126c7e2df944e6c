#pragma once

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mneme/corpus.hpp"
#include "mneme/errors.hpp"
#include "mneme/rng.hpp"
#include "mneme/tensor.hpp"

// The three LM variants: a recurrence-cache transformer (vanilla), plus
// static and dynamic entity-memory versions. Layers are pre-norm; the
// cross-attention read runs in parallel with self-attention on the same
// normalized layer input and a per-dimension sigmoid gate merges the two
// streams before the feed-forward sublayer.

namespace mneme {

using Tensor = TensorT<double>;
using Tape = TapeT<double>;

enum class Variant { Vanilla, Static, Dynamic };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Vanilla: return "vanilla";
    case Variant::Static: return "static";
    case Variant::Dynamic: return "dynamic";
  }
  return "?";
}

inline Variant variant_of(const std::string& s) {
  if (s == "vanilla") return Variant::Vanilla;
  if (s == "static") return Variant::Static;
  if (s == "dynamic") return Variant::Dynamic;
  throw config_error("unknown variant '" + s + "'");
}

struct ModelConfig {
  Variant variant = Variant::Dynamic;
  int num_layers = 2;
  int self_heads = 2;
  int cross_heads = 4;
  int hidden_dim = 64;
  int memory_dim = 64;  // must equal hidden_dim (Eq. 6 mixes h_j and V_j)
  int vocab_size = 0;
  int seq_len = 512;
  int cache_size = 500;
  int chunk_size = 64;
  double tau = 0.1;
  int max_entities = 8;  // Z_max, slots including the non-entity slot
  int ff_mult = 4;
  // A gradient-check switch: keep the full graph through memory init and
  // updates instead of detaching at chunk boundaries.
  bool backprop_through_memory = false;

  void validate() const {
    auto bad = [](const std::string& w) { throw config_error("model config: " + w); };
    if (num_layers < 1) bad("num_layers must be >= 1");
    if (hidden_dim < 1 || vocab_size < 1) bad("hidden_dim and vocab_size must be positive");
    if (hidden_dim % self_heads != 0) bad("hidden_dim not divisible by self_heads");
    if (hidden_dim % cross_heads != 0) bad("hidden_dim not divisible by cross_heads");
    if (memory_dim != hidden_dim)
      bad("memory_dim must equal hidden_dim: the update rule mixes slot values "
          "with hidden states componentwise");
    if (chunk_size < 1 || chunk_size > seq_len) bad("need 1 <= chunk_size <= seq_len");
    if (cache_size < 0) bad("cache_size must be >= 0");
    if (tau <= 0.0) bad("tau must be positive");
    if (max_entities < 2) bad("max_entities must be >= 2 (one entity + the non-entity slot)");
    if (ff_mult < 1) bad("ff_mult must be >= 1");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"variant", variant_name(variant)},
                          {"num_layers", num_layers},
                          {"self_heads", self_heads},
                          {"cross_heads", cross_heads},
                          {"hidden_dim", hidden_dim},
                          {"memory_dim", memory_dim},
                          {"vocab_size", vocab_size},
                          {"seq_len", seq_len},
                          {"cache_size", cache_size},
                          {"chunk_size", chunk_size},
                          {"tau", tau},
                          {"max_entities", max_entities},
                          {"ff_mult", ff_mult},
                          {"backprop_through_memory", backprop_through_memory}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    if (j.contains("variant")) c.variant = variant_of(j.at("variant").get<std::string>());
    auto get = [&](const char* k, auto& f) {
      if (j.contains(k)) f = j.at(k).get<std::decay_t<decltype(f)>>();
    };
    get("num_layers", c.num_layers);
    get("self_heads", c.self_heads);
    get("cross_heads", c.cross_heads);
    get("hidden_dim", c.hidden_dim);
    get("memory_dim", c.memory_dim);
    get("vocab_size", c.vocab_size);
    get("seq_len", c.seq_len);
    get("cache_size", c.cache_size);
    get("chunk_size", c.chunk_size);
    get("tau", c.tau);
    get("max_entities", c.max_entities);
    get("ff_mult", c.ff_mult);
    get("backprop_through_memory", c.backprop_through_memory);
    c.validate();
    return c;
  }
};

// Per-layer store of the raw layer-input states of up to cache_size prior
// tokens. Contents are constants: gradients never flow into the cache.
struct RecurrenceCache {
  long len = 0;
  std::vector<Eigen::ArrayXd> layers;  // each flat [len x d_h]
};

// Z slots of static key + dynamic value. Raw arrays are the source of truth
// across tape rewinds; the tensor handles are transient per tape region.
struct EntityMemoryState {
  int Z = 0;
  Eigen::ArrayXd keys_raw, values_raw;  // flat [Z x d]
  Tensor keys, values;

  bool initialized() const { return Z > 0; }
};

struct ChunkResult {
  Tensor logits;                // [T x V]
  Tensor final_hidden;          // [T x d_h]
  std::vector<Tensor> cross;    // per layer [H x T x Z] (memory variants)
  std::vector<Tensor> gates;    // per layer [T x d_h] (memory variants)
};

class Model {
 public:
  ModelConfig cfg;
  // Diagnostic switch: shifts every gate pre-activation by -1e9 so g == 0
  // exactly and memory variants collapse onto the vanilla path.
  bool gate_closed = false;
  // Runtime cache budget for evaluation sweeps; -1 means cfg.cache_size.
  // Parameter shapes (relative-bias table) stay as constructed.
  long cache_limit = -1;

  // never above cfg.cache_size: the relative-bias table is sized at build time
  long effective_cache() const {
    return cache_limit >= 0 ? std::min<long>(cache_limit, cfg.cache_size)
                            : cfg.cache_size;
  }

  Model(ModelConfig config, uint64_t seed) : cfg(std::move(config)) {
    cfg.validate();
    Rng init_root = Rng(seed).fork(hash_label("init"));
    const int d = cfg.hidden_dim;
    const long R = cfg.cache_size + cfg.chunk_size;  // relative-distance table

    add_weight("emb", {cfg.vocab_size, d}, init_root);
    for (int l = 0; l < cfg.num_layers; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      add_ones(p + "ln1.g", {d});
      add_zeros(p + "ln1.b", {d});
      add_weight(p + "attn.wq", {d, d}, init_root);
      add_weight(p + "attn.wk", {d, d}, init_root);
      add_weight(p + "attn.wv", {d, d}, init_root);
      add_weight(p + "attn.wo", {d, d}, init_root);
      add_zeros(p + "attn.relbias", {cfg.self_heads, R});
      if (cfg.variant != Variant::Vanilla) {
        add_weight(p + "cross.wq", {d, d}, init_root);
        add_weight(p + "cross.wk", {d, d}, init_root);
        add_weight(p + "cross.wm", {d, d}, init_root);
        add_weight(p + "cross.we", {d, d}, init_root);
        add_weight(p + "gate.w", {2 * d, d}, init_root);
        add_zeros(p + "gate.b", {d});
      }
      add_ones(p + "ln2.g", {d});
      add_zeros(p + "ln2.b", {d});
      add_weight(p + "ff.w1", {d, cfg.ff_mult * d}, init_root);
      add_zeros(p + "ff.b1", {cfg.ff_mult * d});
      add_weight(p + "ff.w2", {cfg.ff_mult * d, d}, init_root);
      add_zeros(p + "ff.b2", {d});
    }
    add_ones("final_ln.g", {d});
    add_zeros("final_ln.b", {d});
    add_weight("out.w", {d, cfg.vocab_size}, init_root);
    add_zeros("out.b", {cfg.vocab_size});
    if (cfg.variant != Variant::Vanilla) add_weight("memory.default_slot", {1, d}, init_root);
    if (cfg.variant == Variant::Dynamic) {
      add_weight("update.w", {2 * d, d}, init_root);
      add_zeros("update.b", {d});
    }
    base_mark_ = tape().mark();
  }

  Tape& tape() { return *tape_ptr_; }
  std::vector<std::pair<std::string, Tensor>>& params() { return params_; }
  size_t base_mark() const { return base_mark_; }

  Tensor param(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end())
      throw contract_error("no parameter named '" + name + "'");
    return params_[static_cast<size_t>(it->second)].second;
  }
  bool has_param(const std::string& name) const { return by_name_.count(name) != 0; }

  RecurrenceCache make_cache() const {
    RecurrenceCache c;
    c.layers.assign(static_cast<size_t>(cfg.num_layers), Eigen::ArrayXd());
    return c;
  }

  // -------------------------------------------------------------------------
  // forward

  ChunkResult forward_chunk(const std::vector<int>& tokens, RecurrenceCache& cache,
                            EntityMemoryState* mem, bool advance_cache) {
    const long T = static_cast<long>(tokens.size());
    const int d = cfg.hidden_dim;
    if (T < 1 || T > cfg.chunk_size)
      throw input_error("forward_chunk: got " + std::to_string(T) +
                        " tokens, chunk budget is " + std::to_string(cfg.chunk_size));
    if (static_cast<long>(cache.layers.size()) != cfg.num_layers)
      throw contract_error("cache layer count does not match the model");
    const bool use_memory = cfg.variant != Variant::Vanilla && mem != nullptr;
    if (use_memory && !mem->initialized())
      throw contract_error("memory passed to forward_chunk before initialization");

    const long cl = cache.len;
    const long K = cl + T;
    Tensor mask = causal_mask(T, K, cl);

    Tensor x = gather_rows(param("emb"), tokens);
    ChunkResult out;
    std::vector<Eigen::ArrayXd> chunk_inputs(static_cast<size_t>(cfg.num_layers));

    for (int l = 0; l < cfg.num_layers; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      chunk_inputs[static_cast<size_t>(l)] = x.value();

      Tensor full_in = x;
      if (cl > 0) {
        Tensor cache_const =
            tape().constant({cl, d}, cache.layers[static_cast<size_t>(l)]);
        full_in = concat(cache_const, x, 0);
      }
      Tensor ln_full = layer_norm(full_in, param(p + "ln1.g"), param(p + "ln1.b"));
      Tensor ln_chunk = cl > 0 ? slice_rows(ln_full, cl, K) : ln_full;

      Tensor h_sa = self_attention(ln_chunk, ln_full, mask, cl, p);

      Tensor merged = h_sa;
      if (use_memory) {
        auto [e, a] = cross_attend(ln_chunk, *mem, l);
        out.cross.push_back(a);
        auto [mix, g] = gate_combine(h_sa, e, l);
        out.gates.push_back(g);
        merged = mix;
      }
      Tensor x2 = add(x, merged);

      Tensor ln2 = layer_norm(x2, param(p + "ln2.g"), param(p + "ln2.b"));
      Tensor ff1 = gelu(add_rowvec(matmul(ln2, param(p + "ff.w1")), param(p + "ff.b1")));
      Tensor ff2 = add_rowvec(matmul(ff1, param(p + "ff.w2")), param(p + "ff.b2"));
      x = add(x2, ff2);
    }

    out.final_hidden = layer_norm(x, param("final_ln.g"), param("final_ln.b"));
    out.logits = add_rowvec(matmul(out.final_hidden, param("out.w")), param("out.b"));

    const long budget = effective_cache();
    if (advance_cache && budget > 0) {
      for (int l = 0; l < cfg.num_layers; ++l) {
        auto& stored = cache.layers[static_cast<size_t>(l)];
        const auto& fresh = chunk_inputs[static_cast<size_t>(l)];
        Eigen::ArrayXd merged_rows(stored.size() + fresh.size());
        if (stored.size() > 0) merged_rows << stored, fresh;
        else merged_rows = fresh;
        const long total = cl + T;
        const long keep = std::min<long>(total, budget);
        stored = merged_rows.segment((total - keep) * d, keep * d).eval();
      }
      cache.len = std::min<long>(cl + T, budget);
    }
    return out;
  }

  // -------------------------------------------------------------------------
  // memory lifecycle

  // Slot j <- mean of the prompt pass's final hidden rows in group j; the
  // non-entity slot averages the remaining prompt positions (separators,
  // markers) and falls back to a learned vector when none exist.
  EntityMemoryState init_memory(Tensor prompt_hidden,
                                const std::vector<std::pair<long, long>>& groups) {
    if (cfg.variant == Variant::Vanilla)
      throw contract_error("init_memory called on the vanilla variant");
    const long P = prompt_hidden.rows();
    const int d = cfg.hidden_dim;
    const int Z = static_cast<int>(groups.size()) + 1;
    if (Z > cfg.max_entities)
      throw input_error("prompt has " + std::to_string(groups.size()) +
                        " entities; max_entities allows " +
                        std::to_string(cfg.max_entities - 1));
    std::vector<bool> grouped(static_cast<size_t>(P), false);
    std::vector<Tensor> slots;
    for (const auto& [b, e] : groups) {
      if (b < 0 || e > P || b >= e)
        throw input_error("empty or out-of-range entity group [" +
                          std::to_string(b) + "," + std::to_string(e) + ")");
      std::vector<int> idx;
      for (long t = b; t < e; ++t) {
        idx.push_back(static_cast<int>(t));
        grouped[static_cast<size_t>(t)] = true;
      }
      slots.push_back(reshape(mean_over_axis(gather_rows(prompt_hidden, idx), 0), {1, d}));
    }
    std::vector<int> rest;
    for (long t = 0; t < P; ++t)
      if (!grouped[static_cast<size_t>(t)]) rest.push_back(static_cast<int>(t));
    if (!rest.empty())
      slots.push_back(reshape(mean_over_axis(gather_rows(prompt_hidden, rest), 0), {1, d}));
    else
      slots.push_back(param("memory.default_slot"));

    Tensor stacked = slots.size() == 1 ? slots[0] : concat_many(slots, 0);
    EntityMemoryState mem;
    mem.Z = Z;
    if (cfg.backprop_through_memory) {
      mem.keys = stacked;
      mem.values = stacked;
    } else {
      mem.keys = detach(stacked);
      mem.values = mem.keys;
    }
    sync_raw(mem);
    return mem;
  }

  // no-MI ablation: random slots, keys = values
  EntityMemoryState init_memory_random(int num_entities, Rng rng) {
    if (cfg.variant == Variant::Vanilla)
      throw contract_error("init_memory_random called on the vanilla variant");
    const int Z = num_entities + 1;
    if (Z > cfg.max_entities) throw input_error("too many entities for max_entities");
    const int d = cfg.hidden_dim;
    Eigen::ArrayXd raw(static_cast<long>(Z) * d);
    for (long i = 0; i < raw.size(); ++i) raw[i] = rng.normal();
    EntityMemoryState mem;
    mem.Z = Z;
    mem.keys = tape().constant({Z, d}, raw);
    mem.values = mem.keys;
    sync_raw(mem);
    return mem;
  }

  // Eqs. 4-6: slot read strength from the final layer's attention, token
  // softmax at temperature tau, per-dimension write gate, convex write.
  void update_memory(EntityMemoryState& mem, Tensor final_hidden, Tensor cross_last) {
    if (cfg.variant != Variant::Dynamic)
      throw contract_error("update_memory is only valid for the dynamic variant");
    if (!mem.initialized()) throw contract_error("update_memory before init");
    const int Z = mem.Z;
    const long T = final_hidden.rows();
    if (cross_last.rank() != 3 || cross_last.dim(1) != T || cross_last.dim(2) != Z)
      throw shape_error("update_memory: cross weights must be [H x T x Z]");

    Tensor a = cross_last, fh = final_hidden, values_in = mem.values;
    if (!cfg.backprop_through_memory) {
      a = detach(a);
      fh = detach(fh);
      values_in = detach(values_in);
    }
    Tensor s = max_over_axis(a, 0);                      // [T x Z], max over heads
    Tensor P = softmax(scale(s, 1.0 / cfg.tau), 0);      // over the token axis
    Tensor hslots = matmul(transpose(P), fh);            // [Z x d]
    Tensor w = max_over_axis(s, 0);                      // [Z], max over tokens too

    Tensor g = sigmoid(add_rowvec(matmul(concat(hslots, values_in, 1), param("update.w")),
                                  param("update.b")));   // [Z x d]
    Tensor lerp = add(values_in, scale_rows(mul(g, sub(hslots, values_in)), w));
    // clamp to the componentwise [V, h] envelope; floating-point lerp can
    // overshoot by 1 ulp otherwise
    Tensor lo = minimum(values_in, hslots);
    Tensor hi = maximum(values_in, hslots);
    mem.values = minimum(maximum(lerp, lo), hi);
    sync_raw(mem);
  }

  // rebuild tensor handles from raw snapshots after a tape rewind
  void reanchor_memory(EntityMemoryState& mem) {
    mem.keys = tape().constant({mem.Z, cfg.hidden_dim}, mem.keys_raw);
    mem.values = tape().constant({mem.Z, cfg.hidden_dim}, mem.values_raw);
  }

  // Eqs. 1-2: scores against static keys, aggregation over dynamic values.
  // Returns the entity-aware representation e [T x d_h] and the attention
  // weights a [H x T x Z].
  std::pair<Tensor, Tensor> cross_attend(Tensor ln_chunk, const EntityMemoryState& mem,
                                         int layer) {
    if (!mem.initialized()) throw contract_error("cross_attend before memory init");
    const std::string p = "l" + std::to_string(layer) + ".";
    const int d = cfg.hidden_dim;
    const int H = cfg.cross_heads;
    const int dc = d / H;
    const long T = ln_chunk.rows();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.memory_dim));
    Tensor Q = matmul(ln_chunk, param(p + "cross.wq"));
    Tensor Kp = matmul(mem.keys, param(p + "cross.wk"));
    Tensor Vp = matmul(mem.values, param(p + "cross.wm"));
    std::vector<Tensor> heads, weights;
    for (int h = 0; h < H; ++h) {
      Tensor Qh = slice(Q, 1, h * dc, (h + 1) * dc);
      Tensor Kh = slice(Kp, 1, h * dc, (h + 1) * dc);
      Tensor Vh = slice(Vp, 1, h * dc, (h + 1) * dc);
      Tensor a = softmax(scale(matmul(Qh, transpose(Kh)), inv_sqrt), 1);  // [T x Z]
      weights.push_back(reshape(a, {1, T, static_cast<long>(mem.Z)}));
      heads.push_back(matmul(a, Vh));
    }
    Tensor cat = heads.size() == 1 ? heads[0] : concat_many(heads, 1);
    Tensor e = matmul(cat, param(p + "cross.we"));
    Tensor a_all = weights.size() == 1 ? weights[0] : concat_many(weights, 0);
    return {e, a_all};
  }

  // Eq. 3: g = sigmoid(W_R [h; e] + b), h' = (1-g) h + g e, written as
  // h + g (e - h) so a closed gate reproduces h bit-exactly.
  std::pair<Tensor, Tensor> gate_combine(Tensor h, Tensor e, int layer) {
    const std::string p = "l" + std::to_string(layer) + ".";
    Tensor pre = add_rowvec(matmul(concat(h, e, 1), param(p + "gate.w")),
                            param(p + "gate.b"));
    if (gate_closed) {
      Eigen::ArrayXd shift = Eigen::ArrayXd::Constant(pre.numel(), -1e9);
      pre = add(pre, tape().constant(pre.shape(), shift));
    }
    Tensor g = sigmoid(pre);
    return {add(h, mul(g, sub(e, h))), g};
  }

 private:
  std::unique_ptr<Tape> tape_ptr_ = std::make_unique<Tape>();
  std::vector<std::pair<std::string, Tensor>> params_;
  std::unordered_map<std::string, int> by_name_;
  size_t base_mark_ = 0;

  void sync_raw(EntityMemoryState& mem) {
    mem.keys_raw = mem.keys.value();
    mem.values_raw = mem.values.value();
  }

  void register_param(const std::string& name, Tensor t) {
    by_name_[name] = static_cast<int>(params_.size());
    params_.emplace_back(name, t);
  }
  void add_weight(const std::string& name, const Shape& shape, const Rng& root) {
    Rng stream = root.fork(hash_label(name.c_str()));
    Eigen::ArrayXd a(numel_of(shape));
    for (long i = 0; i < a.size(); ++i) a[i] = 0.02 * stream.normal();
    register_param(name, tape().leaf(shape, a, true));
  }
  void add_zeros(const std::string& name, const Shape& shape) {
    register_param(name, tape().zeros(shape, true));
  }
  void add_ones(const std::string& name, const Shape& shape) {
    register_param(name, tape().leaf(shape, Eigen::ArrayXd::Ones(numel_of(shape)), true));
  }

  Tensor causal_mask(long T, long K, long cl) {
    Eigen::ArrayXd m(T * K);
    for (long i = 0; i < T; ++i)
      for (long j = 0; j < K; ++j)
        m[i * K + j] = j <= cl + i ? 0.0 : -1e30;
    return tape().constant({T, K}, m);
  }

  Tensor self_attention(Tensor ln_chunk, Tensor ln_full, Tensor mask, long cl,
                        const std::string& p) {
    const int d = cfg.hidden_dim;
    const int H = cfg.self_heads;
    const int ds = d / H;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(ds));
    Tensor Q = matmul(ln_chunk, param(p + "attn.wq"));
    Tensor Kp = matmul(ln_full, param(p + "attn.wk"));
    Tensor Vp = matmul(ln_full, param(p + "attn.wv"));
    Tensor rel = param(p + "attn.relbias");  // [H x R]
    const long R = rel.dim(1);
    std::vector<Tensor> heads;
    for (int h = 0; h < H; ++h) {
      Tensor Qh = slice(Q, 1, h * ds, (h + 1) * ds);
      Tensor Kh = slice(Kp, 1, h * ds, (h + 1) * ds);
      Tensor Vh = slice(Vp, 1, h * ds, (h + 1) * ds);
      Tensor scores = scale(matmul(Qh, transpose(Kh)), inv_sqrt);
      scores = add(scores, mask);
      Tensor bias_row = reshape(slice(rel, 0, h, h + 1), {R});
      scores = add_rel_bias(scores, bias_row, cl);
      Tensor att = softmax(scores, 1);
      heads.push_back(matmul(att, Vh));
    }
    Tensor cat = heads.size() == 1 ? heads[0] : concat_many(heads, 1);
    return matmul(cat, param(p + "attn.wo"));
  }

};

// Prompt rendering against a vocab: [BOS, e0.., SEP, e1.., ..., EOP] with the
// token index range of each entity group.
struct PromptLayout {
  std::vector<int> ids;
  std::vector<std::pair<long, long>> groups;
};

inline PromptLayout layout_prompt(const EntityPrompt& prompt, const Vocab& vocab) {
  PromptLayout out;
  out.ids.push_back(Vocab::BOS);
  for (size_t j = 0; j < prompt.canonical.size(); ++j) {
    if (j) out.ids.push_back(Vocab::SEP);
    const long b = static_cast<long>(out.ids.size());
    for (const auto& tok : prompt.canonical[j]) out.ids.push_back(vocab.id_of(tok));
    out.groups.emplace_back(b, static_cast<long>(out.ids.size()));
  }
  out.ids.push_back(Vocab::EOP);
  return out;
}

}  // namespace mneme
