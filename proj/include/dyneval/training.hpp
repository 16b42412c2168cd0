#pragma once

// Offline training loops: pretraining from init with warmup + cosine, and
// finetuning on a fixed pool of segments with early stopping and an LR sweep.

#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyneval/corpus.hpp"
#include "dyneval/model.hpp"
#include "dyneval/optimizer.hpp"

namespace dyneval {

struct TrainConfig {
  ScheduleConfig schedule{ScheduleKind::warmup_cosine, 100, 1000, 3e-3};
  std::int64_t steps = 1000;
  std::int64_t start_step = 0;  // resume point; the schedule continues from here
  int batch_size = 8;
  int segment_length = 0;  // 0: model context length
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::int64_t eval_every = 100;
  std::size_t eval_tokens = 4096;  // validation budget per evaluation
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = nlohmann::json{{"schedule", t.schedule},         {"steps", t.steps},
                     {"start_step", t.start_step},     {"batch_size", t.batch_size},
                     {"segment_length", t.segment_length}, {"weight_decay", t.weight_decay},
                     {"clip_norm", t.clip_norm},       {"eval_every", t.eval_every},
                     {"eval_tokens", t.eval_tokens},   {"seed", t.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  const TrainConfig d;
  t.schedule = j.value("schedule", d.schedule);
  t.steps = j.value("steps", d.steps);
  t.start_step = j.value("start_step", d.start_step);
  t.batch_size = j.value("batch_size", d.batch_size);
  t.segment_length = j.value("segment_length", d.segment_length);
  t.weight_decay = j.value("weight_decay", d.weight_decay);
  t.clip_norm = j.value("clip_norm", d.clip_norm);
  t.eval_every = j.value("eval_every", d.eval_every);
  t.eval_tokens = j.value("eval_tokens", d.eval_tokens);
  t.seed = j.value("seed", d.seed);
}

struct TrainLogEntry {
  std::int64_t step = 0;
  double lr = 0;
  double train_nll = 0;
  std::optional<double> valid_nll;
};

inline void to_json(nlohmann::json& j, const TrainLogEntry& e) {
  j = nlohmann::json{{"step", e.step}, {"lr", e.lr}, {"train_nll", e.train_nll}};
  j["valid_nll"] = e.valid_nll ? nlohmann::json(*e.valid_nll) : nlohmann::json(nullptr);
}

struct TrainResult {
  Params<float> params;
  std::int64_t step = 0;  // steps completed, counting from zero across resumes
  std::vector<TrainLogEntry> log;
  bool diverged = false;
};

// Patience-style stopping on a sequence of validation losses: stop once
// `patience` consecutive evaluations fail to improve on the best so far.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience = 1) : patience_(patience) {}

  // Returns true when training should stop.
  bool update(double valid) {
    ++seen_;
    if (valid < best_) {
      best_ = valid;
      best_index_ = seen_ - 1;
      bad_ = 0;
      return false;
    }
    return ++bad_ >= patience_;
  }

  double best() const { return best_; }
  std::size_t best_index() const { return best_index_; }
  std::size_t evaluations() const { return seen_; }

 private:
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_index_ = 0;
  std::size_t seen_ = 0;
  int bad_ = 0;
};

// Mean next-token nll over consecutive, non-overlapping chunks of the
// context length. Each chunk starts without context; at most `max_tokens`
// targets are scored.
inline double validation_nll(const Params<float>& p, std::span<const int> tokens, std::size_t max_tokens) {
  const std::size_t context = static_cast<std::size_t>(p.config.context_length);
  if (tokens.size() < 2) throw UsageError("validation_nll: need at least 2 tokens");
  const std::size_t usable = std::min(tokens.size() - 1, max_tokens);
  double total = 0;
  Tape<float> off(false);
  for (std::size_t s = 0; s < usable; s += context) {
    const std::size_t len = std::min(context, usable - s);
    const auto nll = softmax_cross_entropy(off, forward(off, p, tokens.subspan(s, len)), tokens.subspan(s + 1, len));
    for (float v : nll.data()) total += v;
  }
  return total / static_cast<double>(usable);
}

namespace detail {

// One optimizer step on a batch of (len + 1)-token segments. Returns the batch
// mean nll; non-finite means the update was skipped.
inline double train_step(const Params<float>& p, AdamW<float>& opt, const std::vector<std::vector<int>>& batch) {
  opt.zero_grad();
  Tape<float> tape(true);
  std::optional<Tensor<float>> total;
  for (const auto& seg : batch) {
    const std::span<const int> s(seg);
    const std::size_t len = s.size() - 1;
    const auto nll = softmax_cross_entropy(tape, forward(tape, p, s.first(len)), s.subspan(1, len));
    const auto m = mean(tape, nll);
    total = total ? add(tape, *total, m) : m;
  }
  const auto loss = scale(tape, *total, 1.0f / static_cast<float>(batch.size()));
  const double value = loss.item();
  if (!std::isfinite(value)) return value;
  tape.backward(loss);
  opt.step();
  return value;
}

}  // namespace detail

using TrainObserver = std::function<void(const TrainLogEntry&)>;

// Trains every trainable tensor of `init` on random segments of `train`.
// Validation on `valid` runs every eval_every steps and at the end. A
// non-finite training loss stops the run and returns the parameters from the
// last finite validation point.
inline TrainResult pretrain(const Params<float>& init, std::span<const int> train, std::span<const int> valid,
                            const TrainConfig& cfg, const TrainObserver& observe = {}) {
  cfg.schedule.validate();
  if (cfg.steps < 0 || cfg.start_step < 0) throw ConfigError("train: step counts must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  const int seg = cfg.segment_length > 0 ? cfg.segment_length : init.config.context_length;
  if (seg > init.config.context_length) throw ConfigError("train: segment_length exceeds context length");

  TrainResult res{init.clone(), cfg.start_step, {}, false};
  Params<float> last_good = res.params.clone();
  if (cfg.steps == 0) return res;

  AdamW<float> opt(res.params.trainable(), {.lr = 0.0, .weight_decay = cfg.weight_decay, .clip_norm = cfg.clip_norm});
  SegmentSampler sampler(train, static_cast<std::size_t>(seg) + 1, static_cast<std::size_t>(cfg.batch_size),
                         cfg.seed ^ static_cast<std::uint64_t>(cfg.start_step) * 0x9e3779b97f4a7c15ULL);
  const std::int64_t end = cfg.start_step + cfg.steps;
  for (std::int64_t step = cfg.start_step; step < end; ++step) {
    TrainLogEntry e{step + 1, lr_at(step, cfg.schedule), 0.0, std::nullopt};
    opt.hyper().lr = e.lr;
    e.train_nll = detail::train_step(res.params, opt, sampler.next_batch());
    if (!std::isfinite(e.train_nll)) {
      res.log.push_back(e);
      if (observe) observe(e);
      res.diverged = true;
      res.params = std::move(last_good);
      return res;
    }
    res.step = step + 1;
    const bool eval_now = (cfg.eval_every > 0 && res.step % cfg.eval_every == 0) || res.step == end;
    if (eval_now) {
      if (!valid.empty()) e.valid_nll = validation_nll(res.params, valid, cfg.eval_tokens);
      if (!e.valid_nll || std::isfinite(*e.valid_nll)) last_good = res.params.clone();
    }
    res.log.push_back(e);
    if (observe) observe(e);
  }
  return res;
}

struct FinetuneConfig {
  std::size_t amount = 0;  // number of distinct segments in the finetune pool
  std::vector<double> max_lrs{1e-3, 3e-3};
  int batch_size = 8;
  int segment_length = 0;  // 0: model context length
  double epochs = 2.0;     // cosine decay completes after this many passes over the pool
  double warmup_fraction = 0.1;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::int64_t eval_every = 25;
  std::size_t eval_tokens = 4096;
  int patience = 1;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const FinetuneConfig& f) {
  j = nlohmann::json{{"amount", f.amount},         {"max_lrs", f.max_lrs},
                     {"batch_size", f.batch_size}, {"segment_length", f.segment_length},
                     {"epochs", f.epochs},         {"warmup_fraction", f.warmup_fraction},
                     {"weight_decay", f.weight_decay}, {"clip_norm", f.clip_norm},
                     {"eval_every", f.eval_every}, {"eval_tokens", f.eval_tokens},
                     {"patience", f.patience},     {"seed", f.seed}};
}

inline void from_json(const nlohmann::json& j, FinetuneConfig& f) {
  const FinetuneConfig d;
  f.amount = j.value("amount", d.amount);
  f.max_lrs = j.value("max_lrs", d.max_lrs);
  f.batch_size = j.value("batch_size", d.batch_size);
  f.segment_length = j.value("segment_length", d.segment_length);
  f.epochs = j.value("epochs", d.epochs);
  f.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
  f.weight_decay = j.value("weight_decay", d.weight_decay);
  f.clip_norm = j.value("clip_norm", d.clip_norm);
  f.eval_every = j.value("eval_every", d.eval_every);
  f.eval_tokens = j.value("eval_tokens", d.eval_tokens);
  f.patience = j.value("patience", d.patience);
  f.seed = j.value("seed", d.seed);
}

struct FinetuneResult {
  Params<float> params;
  bool improved = false;  // false: the base parameters were returned
  double base_valid_nll = 0;
  double best_valid_nll = 0;
  double best_lr = 0;
  std::int64_t steps = 0;
  nlohmann::json sweep = nlohmann::json::array();  // per-LR outcome
};

// Finetunes on `amount` consecutive segments from the start of `train`,
// sampled i.i.d. with replacement. For each max LR: warmup then cosine decay
// over `epochs` passes, validation every eval_every steps, stop after
// `patience` evaluations without improvement, keep the best validation point.
// The best LR wins; if nothing beats the base model, the base comes back.
inline FinetuneResult finetune(const Params<float>& base, std::span<const int> train, std::span<const int> valid,
                               const FinetuneConfig& cfg) {
  FinetuneResult out{base.clone(), false, 0, 0, 0, 0, nlohmann::json::array()};
  if (cfg.amount == 0) return out;
  if (cfg.batch_size < 1) throw ConfigError("finetune: batch_size must be >= 1");
  if (cfg.max_lrs.empty()) throw ConfigError("finetune: max_lrs is empty");
  if (cfg.patience < 1) throw ConfigError("finetune: patience must be >= 1");
  const std::size_t seg = cfg.segment_length > 0 ? cfg.segment_length : base.config.context_length;
  const std::size_t pool_tokens = cfg.amount * seg + 1;
  if (train.size() < pool_tokens) {
    throw ConfigError("finetune: " + std::to_string(cfg.amount) + " segments need " + std::to_string(pool_tokens) +
                      " tokens, corpus has " + std::to_string(train.size()));
  }
  const auto pool = train.first(pool_tokens);

  out.base_valid_nll = validation_nll(base, valid, cfg.eval_tokens);
  out.best_valid_nll = out.base_valid_nll;
  const auto total_steps = static_cast<std::int64_t>(
      std::ceil(cfg.epochs * static_cast<double>(cfg.amount) / static_cast<double>(cfg.batch_size)));
  const auto warmup = static_cast<std::int64_t>(cfg.warmup_fraction * static_cast<double>(total_steps));

  for (double max_lr : cfg.max_lrs) {
    const ScheduleConfig sched{ScheduleKind::warmup_cosine, warmup, total_steps, max_lr};
    Params<float> p = base.clone();
    Params<float> best = base.clone();
    AdamW<float> opt(p.trainable(), {.lr = 0.0, .weight_decay = cfg.weight_decay, .clip_norm = cfg.clip_norm});
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, cfg.amount - 1);
    EarlyStopping stopper(cfg.patience);
    double best_valid = std::numeric_limits<double>::infinity();
    std::int64_t step = 0;
    bool diverged = false;
    while (step < total_steps) {
      std::vector<std::vector<int>> batch;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const std::size_t s = pick(rng) * seg;
        batch.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(s),
                           pool.begin() + static_cast<std::ptrdiff_t>(s + seg + 1));
      }
      opt.hyper().lr = lr_at(step, sched);
      if (!std::isfinite(detail::train_step(p, opt, batch))) {
        diverged = true;
        break;
      }
      ++step;
      if (step % std::max<std::int64_t>(cfg.eval_every, 1) == 0 || step == total_steps) {
        const double v = validation_nll(p, valid, cfg.eval_tokens);
        if (v < best_valid) {
          best_valid = v;
          best = p.clone();
        }
        if (stopper.update(v)) break;
      }
    }
    out.sweep.push_back({{"max_lr", max_lr}, {"steps", step}, {"best_valid_nll", best_valid}, {"diverged", diverged}});
    if (best_valid < out.best_valid_nll) {
      out.best_valid_nll = best_valid;
      out.best_lr = max_lr;
      out.params = std::move(best);
      out.improved = true;
      out.steps = step;
    }
  }
  if (!out.improved) std::cerr << "warning: finetune: validation never improved; returning the base model\n";
  return out;
}

}  // namespace dyneval
