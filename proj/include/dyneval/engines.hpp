#pragma once

// Static, overlapping-window and streaming (KV cache) evaluation of a token
// stream, with online AdamW updates and optional reset at document starts.
//
// A BOS token is fed once before the first token of a segment, so record k
// predicts tokens[k] from BOS or tokens[k - 1]. Without resets the whole
// stream is one segment; with resets every document is its own segment.

#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dyneval/corpus.hpp"
#include "dyneval/errors.hpp"
#include "dyneval/json_enum.hpp"
#include "dyneval/model.hpp"
#include "dyneval/optimizer.hpp"

namespace dyneval {

enum class Strategy { static_eval, overlapping, txl_stream };
enum class ResetPolicy { none, at_document_boundary };

DYNEVAL_JSON_ENUM(Strategy, {{Strategy::static_eval, "static"},
                                        {Strategy::overlapping, "overlapping"},
                                        {Strategy::txl_stream, "txl_stream"}})
DYNEVAL_JSON_ENUM(ResetPolicy, {{ResetPolicy::none, "none"},
                                           {ResetPolicy::at_document_boundary, "at_document_boundary"}})

struct EngineConfig {
  Strategy strategy = Strategy::txl_stream;
  int window = 64;     // overlapping: tokens per invocation
  int overlap = 32;    // overlapping: tokens reused from the previous window
  int increment = 32;  // static / txl: new tokens per step
  int update_frequency = 1;
  ResetPolicy reset_policy = ResetPolicy::none;
  double online_lr = 1e-3;
  double weight_decay = 0.0;
  double clip_norm = 0.0;
  bool carry_cache = true;           // txl: false clears the cache before each increment
  bool accumulate_skipped = false;   // sum skipped increments' grads into the next update

  bool dynamic() const { return strategy != Strategy::static_eval; }

  void validate(const ModelConfig& model) const {
    if (update_frequency < 1) {
      throw ConfigError("engine: update_frequency must be >= 1, got " + std::to_string(update_frequency));
    }
    if (!(online_lr >= 0)) throw ConfigError("engine: online_lr must be >= 0");
    if (!(weight_decay >= 0)) throw ConfigError("engine: weight_decay must be >= 0");
    if (strategy == Strategy::overlapping) {
      if (overlap < 0 || overlap >= window) {
        throw ConfigError("engine: overlapping needs 0 <= overlap < window, got overlap " + std::to_string(overlap) +
                          ", window " + std::to_string(window));
      }
      if (window > model.context_length) {
        throw ConfigError("engine: window " + std::to_string(window) + " exceeds context length " +
                          std::to_string(model.context_length));
      }
    } else if (increment < 1 || increment > model.context_length) {
      throw ConfigError("engine: increment must be in [1, " + std::to_string(model.context_length) + "], got " +
                        std::to_string(increment));
    }
  }
};

inline void to_json(nlohmann::json& j, const EngineConfig& e) {
  j = nlohmann::json{{"strategy", e.strategy},
                     {"window", e.window},
                     {"overlap", e.overlap},
                     {"increment", e.increment},
                     {"update_frequency", e.update_frequency},
                     {"reset_policy", e.reset_policy},
                     {"online_lr", e.online_lr},
                     {"weight_decay", e.weight_decay},
                     {"clip_norm", e.clip_norm},
                     {"carry_cache", e.carry_cache},
                     {"accumulate_skipped", e.accumulate_skipped}};
}

inline void from_json(const nlohmann::json& j, EngineConfig& e) {
  const EngineConfig d;
  e.strategy = j.value("strategy", d.strategy);
  e.window = j.value("window", d.window);
  e.overlap = j.value("overlap", d.overlap);
  e.increment = j.value("increment", d.increment);
  e.update_frequency = j.value("update_frequency", d.update_frequency);
  e.reset_policy = j.value("reset_policy", d.reset_policy);
  e.online_lr = j.value("online_lr", d.online_lr);
  e.weight_decay = j.value("weight_decay", d.weight_decay);
  e.clip_norm = j.value("clip_norm", d.clip_norm);
  e.carry_cache = j.value("carry_cache", d.carry_cache);
  e.accumulate_skipped = j.value("accumulate_skipped", d.accumulate_skipped);
}

struct EvalRecord {
  std::size_t pos = 0;
  int doc = 0;
  double nll = 0;
  double flops = 0;  // cumulative, after this token's increment
  bool updated = false;

  bool operator==(const EvalRecord&) const = default;
};

inline void to_json(nlohmann::json& j, const EvalRecord& r) {
  j = nlohmann::json{{"pos", r.pos}, {"doc", r.doc}, {"nll", r.nll}, {"flops", r.flops}, {"updated", r.updated}};
}

inline void from_json(const nlohmann::json& j, EvalRecord& r) {
  r.pos = j.at("pos").get<std::size_t>();
  r.doc = j.at("doc").get<int>();
  r.nll = j.at("nll").get<double>();
  r.flops = j.at("flops").get<double>();
  r.updated = j.at("updated").get<bool>();
}

// One model invocation.
struct IncrementLog {
  std::size_t first = 0;   // stream position of the first encoded token
  std::size_t length = 0;  // tokens encoded
  std::size_t attended = 0;
  bool backward = false;
  bool updated = false;
};

struct EvalCounters {
  std::size_t token_encodings = 0;
  std::size_t forward_passes = 0;
  std::size_t backward_passes = 0;
  std::size_t updates = 0;
  std::size_t skipped_updates = 0;
  std::size_t resets = 0;
};

struct EvalRun {
  std::vector<EvalRecord> records;
  std::vector<IncrementLog> increments;
  EvalCounters counters;
  ModelConfig model;
  double trainable_params = 0;     // charged per update
  double extra_matmul_params = 0;  // adapter matrices in the forward pass
  Params<float> final_params;
};

struct EngineHooks {
  // Called right after a reset, with the restored parameters.
  std::function<void(std::size_t pos, const Params<float>&)> on_reset;
  // Called once per invocation with its first encoded position and length.
  std::function<void(std::size_t first, std::size_t length)> on_invoke;
};

// Invocation ranges [begin, end) for a segment of n tokens: windows advance by
// window - overlap until one reaches the end. A segment shorter than the
// window is a single truncated window.
inline std::vector<std::pair<std::size_t, std::size_t>> overlapping_windows(std::size_t n, std::size_t window,
                                                                            std::size_t overlap) {
  if (overlap >= window) throw ConfigError("overlapping_windows: overlap must be < window");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = 0; s < n; s += window - overlap) {
    out.emplace_back(s, std::min(n, s + window));
    if (s + window >= n) break;
  }
  return out;
}

inline double adapter_matmul_params(const Params<float>& p) {
  double n = 0;
  for (const auto& [name, t] : p.named_adapters()) n += static_cast<double>(t.size());
  return n;
}

namespace detail {

class RunState {
 public:
  RunState(const Params<float>& params, const EngineConfig& cfg)
      : cfg_(cfg),
        params_(params.clone()),
        trainable_(params_.trainable()),
        opt_(trainable_, {.lr = cfg.online_lr, .weight_decay = cfg.weight_decay, .clip_norm = cfg.clip_norm}),
        snapshot_state_(opt_.state()) {
    for (const auto& t : trainable_) snapshot_.push_back(t.data());
    fwd_extra_ = adapter_matmul_params(params_);
  }

  Params<float>& params() { return params_; }
  double extra() const { return fwd_extra_; }
  double trainable_count() const { return static_cast<double>(opt_.num_params()); }

  void restore() {
    for (std::size_t i = 0; i < trainable_.size(); ++i) {
      trainable_[i].data() = snapshot_[i];
      trainable_[i].drop_grad();
    }
    opt_.load_state(snapshot_state_);
  }

  struct Outcome {
    std::vector<float> nll;
    bool backward = false;
    bool updated = false;
  };

  // Forward over `inputs` predicting `targets`; backward and update as the
  // throttle decides for increment `index`.
  Outcome step(std::span<const int> inputs, std::span<const int> targets, KVCache<float>* cache,
               std::int64_t index, EvalCounters& counters) {
    Outcome out;
    ThrottleDecision d;
    if (cfg_.dynamic() && !trainable_.empty()) d = throttled_update(index, cfg_.update_frequency, cfg_.accumulate_skipped);
    Tape<float> tape(d.compute_grad);
    if (d.compute_grad && !cfg_.accumulate_skipped) opt_.zero_grad();
    const Tensor<float> logits = forward(tape, params_, inputs, cache);
    const Tensor<float> nll = softmax_cross_entropy(tape, logits, targets);
    ++counters.forward_passes;
    counters.token_encodings += inputs.size();
    out.nll = nll.data();
    if (d.compute_grad) {
      tape.backward(mean(tape, nll));
      out.backward = true;
      ++counters.backward_passes;
    }
    if (d.do_update) {
      if (cfg_.accumulate_skipped) opt_.scale_grads(1.0f / static_cast<float>(cfg_.update_frequency));
      out.updated = opt_.step();
      out.updated ? ++counters.updates : ++counters.skipped_updates;
      opt_.zero_grad();
    }
    return out;
  }

 private:
  EngineConfig cfg_;
  Params<float> params_;
  std::vector<Tensor<float>> trainable_;
  AdamW<float> opt_;
  std::vector<std::vector<float>> snapshot_;
  AdamWState<float> snapshot_state_;
  double fwd_extra_ = 0;
};

inline std::vector<std::pair<std::size_t, std::size_t>> segments(const CorpusStream& s, ResetPolicy policy) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (s.empty()) return out;
  if (policy == ResetPolicy::none || s.num_docs() == 0) {
    out.emplace_back(0, s.size());
  } else {
    for (std::size_t d = 0; d < s.num_docs(); ++d) out.emplace_back(s.doc_begin(d), s.doc_end(d));
  }
  return out;
}

// Inputs for a segment: BOS, then the segment's tokens shifted by one.
inline std::vector<int> segment_inputs(const CorpusStream& s, std::size_t begin, std::size_t end) {
  std::vector<int> in;
  in.reserve(end - begin);
  in.push_back(s.bos_id);
  for (std::size_t k = begin + 1; k < end; ++k) in.push_back(s.tokens[k - 1]);
  return in;
}

}  // namespace detail

// Runs the configured strategy over the stream. Parameters are cloned, so
// `params` is never modified; the adapted weights come back in final_params.
inline EvalRun evaluate(const Params<float>& params, const CorpusStream& stream, const EngineConfig& cfg,
                        const EngineHooks& hooks = {}) {
  cfg.validate(params.config);
  if (stream.bos_id < 0 || stream.bos_id >= params.config.vocab_size || stream.vocab_size > params.config.vocab_size) {
    throw ConfigError("engine: stream vocabulary (" + std::to_string(stream.vocab_size) +
                      ") does not fit the model vocabulary (" + std::to_string(params.config.vocab_size) + ")");
  }
  detail::RunState state(params, cfg);
  EvalRun run;
  run.model = params.config;
  run.extra_matmul_params = state.extra();
  run.trainable_params = cfg.dynamic() ? state.trainable_count() : 0.0;
  run.records.reserve(stream.size());

  const std::size_t context = static_cast<std::size_t>(params.config.context_length);
  KVCache<float> cache(params.config);
  double flops = 0;

  auto account = [&](std::size_t first, std::size_t length, std::size_t attended, const detail::RunState::Outcome& o) {
    const double fwd = count_flops_forward(run.model, length, attended, run.extra_matmul_params);
    flops += fwd;
    if (o.backward) flops += 2.0 * fwd;
    if (o.updated) flops += 10.0 * run.trainable_params;
    run.increments.push_back({first, length, attended, o.backward, o.updated});
    if (hooks.on_invoke) hooks.on_invoke(first, length);
  };
  auto record = [&](std::size_t pos, float nll, bool updated) {
    run.records.push_back({pos, stream.doc_ids.empty() ? 0 : stream.doc_ids[pos], static_cast<double>(nll), flops,
                           updated});
  };

  const auto segs = detail::segments(stream, cfg.reset_policy);
  for (std::size_t si = 0; si < segs.size(); ++si) {
    const auto [begin, end] = segs[si];
    if (si > 0 && cfg.reset_policy == ResetPolicy::at_document_boundary) {
      if (cfg.dynamic()) state.restore();
      cache.clear();
      ++run.counters.resets;
      if (hooks.on_reset) hooks.on_reset(begin, state.params());
    }
    const std::vector<int> inputs = detail::segment_inputs(stream, begin, end);
    const std::span<const int> in(inputs);
    const std::span<const int> tg(stream.tokens.data() + begin, end - begin);
    std::int64_t index = 0;

    if (cfg.strategy == Strategy::overlapping) {
      std::size_t recorded = 0;  // segment-relative: everything before is recorded
      for (const auto& [a, b] : overlapping_windows(end - begin, cfg.window, cfg.overlap)) {
        const auto o = state.step(in.subspan(a, b - a), tg.subspan(a, b - a), nullptr, index++, run.counters);
        account(begin + a, b - a, b - a, o);
        for (std::size_t k = std::max(a, recorded); k < b; ++k) record(begin + k, o.nll[k - a], o.updated);
        recorded = std::max(recorded, b);
      }
      continue;
    }

    const std::size_t inc = static_cast<std::size_t>(cfg.increment);
    for (std::size_t a = 0; a < end - begin; a += inc) {
      const std::size_t b = std::min(end - begin, a + inc);
      if (!cfg.carry_cache) cache.clear();
      const std::size_t attended = std::min(context, cache.length() + (b - a));
      const auto o = state.step(in.subspan(a, b - a), tg.subspan(a, b - a), &cache, index++, run.counters);
      account(begin + a, b - a, attended, o);
      for (std::size_t k = a; k < b; ++k) record(begin + k, o.nll[k - a], o.updated);
    }
  }
  run.final_params = std::move(state.params());
  return run;
}

inline EvalRun evaluate_static(const Params<float>& params, const CorpusStream& stream, EngineConfig cfg) {
  cfg.strategy = Strategy::static_eval;
  return evaluate(params, stream, cfg);
}

inline EvalRun evaluate_overlapping(const Params<float>& params, const CorpusStream& stream, EngineConfig cfg) {
  cfg.strategy = Strategy::overlapping;
  return evaluate(params, stream, cfg);
}

inline EvalRun evaluate_txl_stream(const Params<float>& params, const CorpusStream& stream, EngineConfig cfg) {
  cfg.strategy = Strategy::txl_stream;
  return evaluate(params, stream, cfg);
}

// One JSON object per line: {pos, doc, nll, flops, updated}.
inline void write_records_jsonl(std::ostream& os, std::span<const EvalRecord> records) {
  for (const auto& r : records) os << nlohmann::json(r).dump() << '\n';
}

inline std::vector<EvalRecord> read_records_jsonl(std::istream& is) {
  std::vector<EvalRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<EvalRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("records: line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dyneval
