#pragma once

// Experiment pipeline behind the command-line tool: a JSON run config, and
// pretrain / finetune / eval / sweep / stats / export steps that read inputs,
// run the library and write artifacts. Every artifact embeds the resolved
// config.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dyneval/adapters.hpp"
#include "dyneval/checkpoint.hpp"
#include "dyneval/corpus.hpp"
#include "dyneval/engines.hpp"
#include "dyneval/json_enum.hpp"
#include "dyneval/metrics.hpp"
#include "dyneval/tokenizer.hpp"
#include "dyneval/training.hpp"

namespace dyneval {

namespace fs = std::filesystem;

enum class AdapterKind { none, lora, freeze };

DYNEVAL_JSON_ENUM(AdapterKind,
                             {{AdapterKind::none, "none"}, {AdapterKind::lora, "lora"}, {AdapterKind::freeze, "freeze"}})

struct AdapterSpec {
  AdapterKind kind = AdapterKind::none;
  LoraSpec lora{};
  FreezeMask mask{};
};

inline void to_json(nlohmann::json& j, const AdapterSpec& a) {
  j = nlohmann::json{{"kind", a.kind}};
  if (a.kind == AdapterKind::lora) j.update(nlohmann::json(a.lora));
  if (a.kind == AdapterKind::freeze) j.update(nlohmann::json(a.mask));
}

inline void from_json(const nlohmann::json& j, AdapterSpec& a) {
  a.kind = j.value("kind", AdapterKind::none);
  if (a.kind == AdapterKind::lora) a.lora = j.get<LoraSpec>();
  if (a.kind == AdapterKind::freeze) a.mask = j.get<FreezeMask>();
}

inline Params<float> apply_adapter(const Params<float>& base, const AdapterSpec& a) {
  switch (a.kind) {
    case AdapterKind::lora: return attach_lora(base, a.lora);
    case AdapterKind::freeze: return apply_freeze_mask(base, a.mask);
    case AdapterKind::none: break;
  }
  return base.clone();
}

// Resolved configuration. `json` is the full document after defaults and
// overrides; the typed fields are parsed from it by load_run_config().
struct RunConfig {
  nlohmann::json json;
  fs::path base_dir = ".";  // relative paths resolve against this

  std::uint64_t seed = 0;
  fs::path out_dir = "out";
  TrainConfig pretrain;
  FinetuneConfig finetune;
  EngineConfig engine;
  std::vector<double> online_lrs;
  AdapterSpec adapter;

  fs::path path(const std::string& key) const {
    const fs::path p = json.at(key).get<std::string>();
    return p.is_absolute() ? p : base_dir / p;
  }
  bool has(const std::string& key) const { return json.contains(key) && !json.at(key).is_null(); }
};

// Stage seeds are left out so they follow the top-level seed unless set.
inline nlohmann::json default_run_config() {
  nlohmann::json pre = TrainConfig{}, fine = FinetuneConfig{};
  pre.erase("seed");
  fine.erase("seed");
  fine.erase("amount");
  return {
      {"seed", 0},
      {"out_dir", "out"},
      {"model", {{"preset", "tiny"}, {"context_length", 64}}},
      {"tokenizer", {{"kind", "byte"}}},
      {"corpora", nlohmann::json::object()},
      {"pretrain", pre},
      {"finetune", fine},
      {"finetune_amount", 0},
      {"engine", EngineConfig{}},
      {"online_lrs", nlohmann::json::array()},
      {"adapter", {{"kind", "none"}}},
  };
}

// Sets a dotted key ("engine.online_lr") to a JSON value; text that does not
// parse as JSON is taken as a string.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (node->is_null()) *node = nlohmann::json::object();
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

namespace detail {

inline void check_path(const RunConfig& c, const nlohmann::json& src, const std::string& what) {
  if (!src.contains("manifest")) return;
  fs::path p = src.at("manifest").get<std::string>();
  if (!p.is_absolute()) p = c.base_dir / p;
  if (!fs::exists(p)) throw ConfigError(what + ": manifest " + p.string() + " does not exist");
}

}  // namespace detail

inline ModelConfig model_config(const RunConfig& c, int vocab_size) {
  const auto& m = c.json.at("model");
  ModelConfig mc;
  if (m.contains("preset")) {
    mc = model_preset(m.at("preset").get<std::string>(), vocab_size, m.value("context_length", 64));
    for (const char* k : {"num_blocks", "d_model", "num_heads", "kv_size", "ffn_mult"})
      if (m.contains(k)) {
        nlohmann::json j = mc;
        j[k] = m.at(k);
        mc = j.get<ModelConfig>();
      }
  } else {
    nlohmann::json j = m;
    j["vocab_size"] = vocab_size;
    mc = j.get<ModelConfig>();
  }
  mc.vocab_size = vocab_size;
  mc.seed = m.value("seed", c.seed);
  mc.validate();
  return mc;
}

// Parses and validates. Throws ConfigError for anything wrong, before any
// compute happens.
inline RunConfig load_run_config(nlohmann::json doc, const fs::path& base_dir,
                                 const std::vector<std::string>& overrides = {},
                                 std::optional<std::uint64_t> seed = std::nullopt,
                                 std::optional<fs::path> out_dir = std::nullopt) {
  nlohmann::json merged = default_run_config();
  merged.merge_patch(doc);
  for (const auto& o : overrides) apply_override(merged, o);
  if (seed) merged["seed"] = *seed;
  if (out_dir) merged["out_dir"] = fs::absolute(*out_dir).string();

  RunConfig c;
  c.base_dir = base_dir;
  try {
    c.seed = merged.at("seed").get<std::uint64_t>();
    c.out_dir = merged.at("out_dir").get<std::string>();
    if (c.out_dir.is_relative()) c.out_dir = base_dir / c.out_dir;
    c.pretrain = merged.at("pretrain").get<TrainConfig>();
    if (!merged.at("pretrain").contains("seed")) c.pretrain.seed = c.seed;
    c.finetune = merged.at("finetune").get<FinetuneConfig>();
    c.finetune.amount = merged.at("finetune_amount").get<std::size_t>();
    if (!merged.at("finetune").contains("seed")) c.finetune.seed = c.seed;
    c.engine = merged.at("engine").get<EngineConfig>();
    c.online_lrs = merged.at("online_lrs").get<std::vector<double>>();
    c.adapter = merged.at("adapter").get<AdapterSpec>();
    if (!merged.at("tokenizer").is_object() || !merged.at("model").is_object()) {
      throw ConfigError("config: tokenizer and model must be objects");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!merged.at("corpora").is_object()) throw ConfigError("config: corpora must be an object");
  c.json = merged;
  for (const auto& [name, src] : merged.at("corpora").items()) {
    if (!src.is_object() || (src.contains("manifest") == src.contains("synthetic"))) {
      throw ConfigError("config: corpora." + name + " needs exactly one of manifest / synthetic");
    }
    detail::check_path(c, src, "corpora." + name);
    if (src.contains("synthetic")) {
      try {
        synthetic_from_json(src.at("synthetic"));
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: corpora." + name + ".synthetic: " + e.what());
      }
    }
  }
  c.pretrain.schedule.validate();
  for (double lr : c.online_lrs)
    if (!(lr >= 0)) throw ConfigError("config: online_lrs must be >= 0");
  if (c.adapter.kind == AdapterKind::lora && c.adapter.lora.rank < 1) throw ConfigError("config: LoRA rank must be >= 1");
  return c;
}

inline RunConfig load_run_config_file(const fs::path& file, const std::vector<std::string>& overrides = {},
                                      std::optional<std::uint64_t> seed = std::nullopt,
                                      std::optional<fs::path> out_dir = std::nullopt) {
  std::ifstream is(file);
  if (!is) throw ConfigError("config: cannot read " + file.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + file.string() + ": " + e.what());
  }
  return load_run_config(std::move(doc), file.parent_path(), overrides, seed, out_dir);
}

// Tokenizer from config; BPE trains on the pretraining manifest.
inline Tokenizer make_tokenizer(const RunConfig& c) {
  const auto& t = c.json.at("tokenizer");
  const std::string kind = t.value("kind", "byte");
  if (kind == "byte") return Tokenizer::byte_level();
  if (kind == "symbol") return Tokenizer::symbols(t.at("alphabet").get<int>());
  if (kind == "bpe") {
    const auto& src = c.json.at("corpora").at("pretrain");
    if (!src.contains("manifest")) throw ConfigError("tokenizer: BPE needs a pretrain manifest to train on");
    fs::path m = src.at("manifest").get<std::string>();
    if (!m.is_absolute()) m = c.base_dir / m;
    std::vector<std::string> texts;
    for (const auto& f : read_manifest(m)) texts.push_back(read_text_file(f));
    return Tokenizer::train_bpe(texts, t.value("vocab_size", 512));
  }
  throw ConfigError("tokenizer: unknown kind '" + kind + "'");
}

inline CorpusStream load_source(const RunConfig& c, const std::string& name, const Tokenizer& tok) {
  const auto& corpora = c.json.at("corpora");
  if (!corpora.contains(name)) throw ConfigError("config: corpora." + name + " is required for this command");
  const auto& src = corpora.at(name);
  if (src.contains("synthetic")) {
    const auto spec = synthetic_from_json(src.at("synthetic"));
    if (tok.kind() != Tokenizer::Kind::symbol || tok.vocab_size() != spec.alphabet + 1) {
      throw ConfigError("config: corpora." + name + " is synthetic over " + std::to_string(spec.alphabet) +
                        " symbols; tokenizer must be {kind: symbol, alphabet: " + std::to_string(spec.alphabet) + "}");
    }
    return synthesize_stream(spec);
  }
  fs::path m = src.at("manifest").get<std::string>();
  if (!m.is_absolute()) m = c.base_dir / m;
  return load_corpus(m, tok);
}

// Entropy floor of a synthetic source, if it is one.
inline std::optional<double> source_entropy_floor(const RunConfig& c, const std::string& name) {
  const auto& corpora = c.json.at("corpora");
  if (!corpora.contains(name) || !corpora.at(name).contains("synthetic")) return std::nullopt;
  return entropy_floor(synthetic_from_json(corpora.at(name).at("synthetic")));
}

inline int worker_count() {
  const char* env = std::getenv("DYNEVAL_WORKERS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) throw ConfigError("DYNEVAL_WORKERS must be an integer in [1, 1024]");
  return static_cast<int>(n);
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. Each call must only
// touch its own state.
template <class F>
void parallel_for(std::size_t n, int workers, F&& fn) {
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n);
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < w; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  for (auto& th : pool) th.join();
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IngestionError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IngestionError("cannot read " + path.string());
  return nlohmann::json::parse(is);
}

// Checkpoint plus the tokenizer it was trained with.
struct Model {
  Params<float> params;
  Tokenizer tokenizer;
  nlohmann::json meta;
};

inline Model load_model(const RunConfig& c, std::optional<fs::path> checkpoint = std::nullopt) {
  if (!checkpoint && !c.has("checkpoint")) throw ConfigError("config: checkpoint is required for this command");
  if (checkpoint && !fs::exists(*checkpoint)) throw ConfigError("config: checkpoint " + checkpoint->string() + " does not exist");
  for (const char* key : {"checkpoint", "lora_checkpoint"})
    if (c.has(key) && !fs::exists(c.path(key))) {
      throw ConfigError(std::string("config: ") + key + " " + c.path(key).string() + " does not exist");
    }
  auto loaded = load_checkpoint(checkpoint ? *checkpoint : c.path("checkpoint"));
  Tokenizer tok = loaded.meta.contains("tokenizer") ? Tokenizer::from_json(loaded.meta.at("tokenizer")) : make_tokenizer(c);
  if (tok.vocab_size() != loaded.params.config.vocab_size) {
    throw ConfigError("checkpoint vocabulary " + std::to_string(loaded.params.config.vocab_size) +
                      " does not match tokenizer " + tok.id());
  }
  // The context length is an evaluation knob: relative positions make the
  // weights usable at any window.
  const auto& m = c.json.at("model");
  if (m.contains("context_length")) loaded.params.config.context_length = m.at("context_length").get<int>();
  return {std::move(loaded.params), std::move(tok), std::move(loaded.meta)};
}

// ---------------------------------------------------------------- pretrain

struct PretrainOutcome {
  fs::path checkpoint;
  TrainResult result;
  nlohmann::json summary;
};

inline PretrainOutcome cmd_pretrain(const RunConfig& c) {
  const Tokenizer tok = make_tokenizer(c);
  const auto train = load_source(c, "pretrain", tok);
  const auto valid = c.json.at("corpora").contains("pretrain_valid") ? load_source(c, "pretrain_valid", tok)
                                                                       : empty_stream(tok);
  Params<float> init = init_model<float>(model_config(c, tok.vocab_size()));
  TrainConfig tc = c.pretrain;
  if (c.json.at("pretrain").contains("resume_from")) {
    fs::path r = c.json.at("pretrain").at("resume_from").get<std::string>();
    if (!r.is_absolute()) r = c.base_dir / r;
    auto loaded = load_checkpoint(r);
    if (loaded.params.config != init.config) throw ConfigError("pretrain: resume checkpoint has a different model config");
    init = std::move(loaded.params);
    tc.start_step = loaded.meta.value("train_step", std::int64_t{0});
  }

  fs::create_directories(c.out_dir);
  std::ofstream log(c.out_dir / "pretrain_log.jsonl", tc.start_step > 0 ? std::ios::app : std::ios::trunc);
  auto res = pretrain(init, train.tokens, valid.tokens, tc, [&](const TrainLogEntry& e) {
    log << nlohmann::json(e).dump() << '\n';
  });

  const fs::path ckpt = c.out_dir / "pretrain.ckpt";
  nlohmann::json meta{{"train_step", res.step}, {"tokenizer", tok.to_json()}, {"config", c.json}};
  save_checkpoint(ckpt, res.params, meta);
  nlohmann::json summary{{"checkpoint", ckpt.string()},
                         {"steps", res.step},
                         {"diverged", res.diverged},
                         {"train_tokens", train.size()},
                         {"config", c.json}};
  if (!res.log.empty()) {
    summary["initial_train_nll"] = res.log.front().train_nll;
    summary["final_train_nll"] = res.log.back().train_nll;
    for (auto it = res.log.rbegin(); it != res.log.rend(); ++it)
      if (it->valid_nll) {
        summary["final_valid_nll"] = *it->valid_nll;
        break;
      }
  }
  write_json(c.out_dir / "pretrain_summary.json", summary);
  return {ckpt, std::move(res), std::move(summary)};
}

// ---------------------------------------------------------------- finetune

struct FinetuneOutcome {
  fs::path checkpoint;
  FinetuneResult result;
  nlohmann::json summary;
};

inline FinetuneResult finetune_model(const RunConfig& c, const Model& m, std::size_t amount) {
  FinetuneConfig fc = c.finetune;
  fc.amount = amount;
  if (amount == 0) return finetune(m.params, {}, {}, fc);
  const auto train = load_source(c, "finetune", m.tokenizer);
  const auto valid = load_source(c, "finetune_valid", m.tokenizer);
  return finetune(m.params, train.tokens, valid.tokens, fc);
}

inline FinetuneOutcome cmd_finetune(const RunConfig& c) {
  Model m = load_model(c);
  auto res = finetune_model(c, m, c.finetune.amount);
  const fs::path ckpt = c.out_dir / "finetune.ckpt";
  nlohmann::json meta = m.meta;
  meta["tokenizer"] = m.tokenizer.to_json();
  meta["finetune"] = {{"amount", c.finetune.amount}, {"improved", res.improved}, {"best_lr", res.best_lr}};
  meta["config"] = c.json;
  save_checkpoint(ckpt, res.params, meta);
  nlohmann::json summary{{"checkpoint", ckpt.string()},         {"finetune_amount", c.finetune.amount},
                         {"improved", res.improved},            {"base_valid_nll", res.base_valid_nll},
                         {"best_valid_nll", res.best_valid_nll}, {"best_lr", res.best_lr},
                         {"steps", res.steps},                  {"lr_sweep", res.sweep},
                         {"config", c.json}};
  write_json(c.out_dir / "finetune_summary.json", summary);
  return {ckpt, std::move(res), std::move(summary)};
}

// ---------------------------------------------------------------- eval

struct EvalOutcome {
  EvalRun run;
  double best_lr = 0;
  nlohmann::json lr_sweep = nlohmann::json::array();
};

// Runs the engine once per online LR (or once for static) and keeps the
// lowest mean nll.
inline EvalOutcome evaluate_best_lr(const Params<float>& params, const CorpusStream& stream, EngineConfig e,
                                    const std::vector<double>& lrs) {
  std::vector<double> grid = lrs;
  if (grid.empty() || !e.dynamic()) grid = {e.online_lr};
  EvalOutcome best;
  double best_nll = std::numeric_limits<double>::infinity();
  for (double lr : grid) {
    e.online_lr = lr;
    EvalRun run = evaluate(params, stream, e);
    const double m = run.records.empty() ? 0.0 : mean_nll(run.records);
    best.lr_sweep.push_back({{"online_lr", lr}, {"mean_nll", m}});
    if (m < best_nll || best_nll == std::numeric_limits<double>::infinity()) {
      best_nll = m;
      best.best_lr = lr;
      best.run = std::move(run);
    }
  }
  return best;
}

inline nlohmann::json run_summary(const EvalRun& run, const EngineConfig& e) {
  nlohmann::json s{{"tokens", run.records.size()},
                   {"total_nats", total_nll(run.records)},
                   {"flops_total", flops_total(run, FlopsMode::with_backward_and_update)},
                   {"flops_forward", flops_total(run, FlopsMode::forward_only)},
                   {"trainable_params", run.trainable_params},
                   {"engine", e},
                   {"counters",
                    {{"token_encodings", run.counters.token_encodings},
                     {"forward_passes", run.counters.forward_passes},
                     {"backward_passes", run.counters.backward_passes},
                     {"updates", run.counters.updates},
                     {"skipped_updates", run.counters.skipped_updates},
                     {"resets", run.counters.resets}}}};
  s["mean_nll"] = run.records.empty() ? nlohmann::json(nullptr) : nlohmann::json(mean_nll(run.records));
  return s;
}

struct EvalCommandOutcome {
  EvalOutcome outcome;
  nlohmann::json summary;
};

inline EvalCommandOutcome cmd_eval(const RunConfig& c) {
  Model m = load_model(c);
  c.engine.validate(m.params.config);
  const Params<float> params = apply_adapter(m.params, c.adapter);
  const auto stream = load_source(c, "eval", m.tokenizer);
  auto out = evaluate_best_lr(params, stream, c.engine, c.online_lrs);

  fs::create_directories(c.out_dir);
  {
    std::ofstream os(c.out_dir / "records.jsonl");
    write_records_jsonl(os, out.run.records);
  }
  write_json(c.out_dir / "records.config.json", c.json);
  EngineConfig used = c.engine;
  used.online_lr = out.best_lr;
  nlohmann::json summary = run_summary(out.run, used);
  summary["best_lr"] = out.best_lr;
  summary["lr_sweep"] = out.lr_sweep;
  summary["doc_boundaries"] = stream.doc_boundaries;
  if (const auto floor = source_entropy_floor(c, "eval")) summary["entropy_floor"] = *floor;
  summary["config"] = c.json;
  write_json(c.out_dir / "summary.json", summary);
  return {std::move(out), std::move(summary)};
}

// ---------------------------------------------------------------- sweep

// One grid point. Unset axes fall back to the run config.
struct SweepRun {
  nlohmann::json label;
  EngineConfig engine;
  int context_length = 0;
  std::size_t finetune_amount = 0;
  std::string preset;  // key into `checkpoints`; empty means `checkpoint`
  AdapterSpec adapter;
};

inline std::vector<SweepRun> expand_grid(const RunConfig& c, int default_context) {
  const nlohmann::json axes = c.json.value("sweep", nlohmann::json::object());
  auto axis = [&](const char* key, nlohmann::json fallback) {
    if (!axes.contains(key)) return nlohmann::json::array({fallback});
    const auto& v = axes.at(key);
    if (!v.is_array() || v.empty()) throw ConfigError(std::string("sweep.") + key + " must be a non-empty array");
    return v;
  };
  const auto strategies = axis("strategy", c.engine.strategy);
  const auto contexts = axis("context_length", default_context);
  const auto freqs = axis("update_frequency", c.engine.update_frequency);
  const auto incs = axis("increment", c.engine.increment);
  const auto amounts = axis("finetune_amount", c.finetune.amount);
  const auto ranks = axis("lora_rank", nullptr);
  const auto masks = axis("freeze_blocks", nullptr);
  const auto presets = axis("preset", nullptr);

  std::vector<SweepRun> runs;
  for (const auto& preset : presets)
  for (const auto& amount : amounts)
    for (const auto& ctx : contexts)
      for (const auto& strat : strategies)
        for (const auto& inc : incs)
          for (const auto& freq : freqs)
            for (const auto& rank : ranks)
              for (const auto& mask : masks) {
                SweepRun r;
                r.engine = c.engine;
                r.engine.strategy = strat.get<Strategy>();
                r.engine.increment = inc.get<int>();
                r.engine.update_frequency = freq.get<int>();
                r.context_length = ctx.get<int>();
                r.finetune_amount = amount.get<std::size_t>();
                if (!preset.is_null()) r.preset = preset.get<std::string>();
                r.adapter = c.adapter;
                if (!rank.is_null()) r.adapter = {AdapterKind::lora, LoraSpec{rank.get<int>(), rank.get<double>(), c.seed}, {}};
                if (!mask.is_null()) r.adapter = {AdapterKind::freeze, {}, FreezeMask{mask.get<std::set<int>>(), false}};
                const bool is_static = !r.engine.dynamic();
                // Static runs do not depend on update or adapter axes.
                if (is_static && (freq != freqs.front() || rank != ranks.front() || mask != masks.front())) continue;
                r.label = {{"strategy", r.engine.strategy},
                           {"context", r.context_length},
                           {"preset", r.preset.empty() ? c.json.at("model").value("preset", "custom") : r.preset},
                           {"finetune_amount", r.finetune_amount},
                           {"update_frequency", is_static ? nlohmann::json(nullptr) : nlohmann::json(freq)},
                           {"increment", r.engine.increment},
                           {"rank", is_static || rank.is_null() ? nlohmann::json(nullptr) : rank},
                           {"blocks", is_static || mask.is_null() ? nlohmann::json(nullptr) : mask}};
                runs.push_back(std::move(r));
              }
  return runs;
}

struct SweepOutcome {
  std::vector<ParetoPoint> cloud;
  std::vector<ParetoPoint> front;
  nlohmann::json failures = nlohmann::json::array();
  nlohmann::json summary;
};

// Finetunes once per (checkpoint, amount), then runs every grid point in
// parallel across DYNEVAL_WORKERS threads. A failing run is recorded and
// skipped.
inline SweepOutcome cmd_sweep(const RunConfig& c) {
  const int workers = worker_count();
  std::map<std::string, Model> models;
  models.emplace("", load_model(c));
  const auto runs = expand_grid(c, models.at("").params.config.context_length);
  for (const auto& r : runs) {
    if (!models.count(r.preset)) {
      const auto& table = c.json.value("checkpoints", nlohmann::json::object());
      if (!table.contains(r.preset)) throw ConfigError("config: checkpoints." + r.preset + " is required by sweep.preset");
      fs::path p = table.at(r.preset).get<std::string>();
      models.emplace(r.preset, load_model(c, p.is_absolute() ? p : c.base_dir / p));
    }
    const Model& m = models.at(r.preset);
    if (m.tokenizer.id() != models.at("").tokenizer.id()) {
      throw ConfigError("config: checkpoints." + r.preset + " uses a different tokenizer");
    }
    ModelConfig mc = m.params.config;
    mc.context_length = r.context_length;
    r.engine.validate(mc);
  }
  const auto stream = load_source(c, "eval", models.at("").tokenizer);

  std::map<std::pair<std::string, std::size_t>, Params<float>> tuned;
  for (const auto& r : runs) {
    const auto key = std::pair(r.preset, r.finetune_amount);
    if (!tuned.count(key)) tuned.emplace(key, finetune_model(c, models.at(r.preset), r.finetune_amount).params);
  }

  std::vector<std::optional<ParetoPoint>> points(runs.size());
  std::vector<std::string> errors(runs.size());
  nlohmann::json details = nlohmann::json::array();
  std::vector<nlohmann::json> run_details(runs.size());
  parallel_for(runs.size(), workers, [&](std::size_t i) {
    const auto& r = runs[i];
    try {
      Params<float> p = apply_adapter(tuned.at(std::pair(r.preset, r.finetune_amount)), r.adapter);
      p.config.context_length = r.context_length;
      auto out = evaluate_best_lr(p, stream, r.engine, c.online_lrs);
      auto label = r.label;
      label["online_lr"] = r.engine.dynamic() ? nlohmann::json(out.best_lr) : nlohmann::json(nullptr);
      points[i] = ParetoPoint{flops_total(out.run, FlopsMode::with_backward_and_update), mean_nll(out.run.records), label};
      run_details[i] = {{"label", label}, {"lr_sweep", out.lr_sweep}, {"trainable_params", out.run.trainable_params}};
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  SweepOutcome out;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (points[i]) {
      out.cloud.push_back(*points[i]);
      details.push_back(run_details[i]);
    } else {
      out.failures.push_back({{"label", runs[i].label}, {"error", errors[i]}});
    }
  }
  out.front = pareto_front(out.cloud);
  out.summary = {{"cloud", out.cloud}, {"front", out.front}, {"failures", out.failures},
                 {"runs", details},    {"config", c.json}};
  if (const auto floor = source_entropy_floor(c, "eval")) out.summary["entropy_floor"] = *floor;
  write_json(c.out_dir / "sweep.json", out.summary);
  write_json(c.out_dir / "cloud.json", out.cloud);
  write_json(c.out_dir / "front.json", out.front);
  return out;
}

// ---------------------------------------------------------------- stats

inline nlohmann::json cmd_stats(const RunConfig& c) {
  const Tokenizer tok = make_tokenizer(c);
  const int context = c.json.at("model").value("context_length", 64);
  const auto& corpora = c.json.at("corpora");
  std::optional<CorpusStream> reference;
  if (corpora.contains("pretrain")) reference = load_source(c, "pretrain", tok);
  nlohmann::json out{{"config", c.json}, {"tokenizer", tok.id()}, {"corpora", nlohmann::json::object()}};
  for (const auto& [name, src] : corpora.items()) {
    const auto s = name == "pretrain" && reference ? *reference : load_source(c, name, tok);
    nlohmann::json j = corpus_stats(s, static_cast<std::size_t>(context), reference ? &*reference : nullptr);
    if (const auto floor = source_entropy_floor(c, name)) j["entropy_rate"] = *floor;
    out["corpora"][name] = j;
  }
  write_json(c.out_dir / "stats.json", out);
  return out;
}

// ---------------------------------------------------------------- export

// Folds adapters into the base weights: from a full checkpoint that carries
// adapters, or from `checkpoint` plus a LoRA-only `lora_checkpoint`.
inline fs::path cmd_export_lora_merged(const RunConfig& c) {
  Model m = load_model(c);
  Params<float> adapted = c.has("lora_checkpoint") ? load_lora_checkpoint(c.path("lora_checkpoint"), m.params)
                                                   : std::move(m.params);
  if (!adapted.lora) throw ConfigError("export-lora-merged: no adapters in checkpoint and no lora_checkpoint given");
  const Params<float> merged = merge_lora(adapted);
  nlohmann::json meta = m.meta;
  meta["tokenizer"] = m.tokenizer.to_json();
  meta["merged_from_lora"] = *adapted.lora;
  meta["config"] = c.json;
  const fs::path out = c.out_dir / "merged.ckpt";
  save_checkpoint(out, merged, meta);
  return out;
}

}  // namespace dyneval
