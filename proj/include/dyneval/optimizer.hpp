#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyneval/errors.hpp"
#include "dyneval/json_enum.hpp"
#include "dyneval/tensor.hpp"

namespace dyneval {

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 0.0;  // global-norm clip; 0 disables
};

template <class T>
struct AdamWState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;
};

// AdamW with bias correction and decoupled weight decay over a fixed list of
// trainable tensors. Frozen tensors are never handed to the optimizer, so
// they carry no moments.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, AdamWHyper hyper) : params_(std::move(params)), hyper_(hyper) {
    for (const auto& p : params_) {
      state_.m.emplace_back(p.size(), T(0));
      state_.v.emplace_back(p.size(), T(0));
    }
  }

  AdamWHyper& hyper() { return hyper_; }
  const AdamWHyper& hyper() const { return hyper_; }
  const AdamWState<T>& state() const { return state_; }
  void load_state(const AdamWState<T>& s) { state_ = s; }
  std::int64_t skipped_updates() const { return skipped_; }
  std::size_t num_tensors() const { return params_.size(); }
  const std::vector<Tensor<T>>& params() const { return params_; }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // Multiplies every gradient by `factor` (used to average accumulated grads).
  void scale_grads(T factor) {
    for (auto& p : params_)
      if (p.has_grad())
        for (auto& g : p.grad()) g *= factor;
  }

  // Applies one update from the tensors' current grads. A non-finite gradient
  // anywhere skips the whole update and returns false; step is unchanged.
  bool step() {
    double sq = 0;
    for (auto& p : params_) {
      if (!p.has_grad()) continue;
      for (T g : p.grad()) {
        if (!std::isfinite(g)) {
          ++skipped_;
          return false;
        }
        sq += static_cast<double>(g) * static_cast<double>(g);
      }
    }
    double clip = 1.0;
    if (hyper_.clip_norm > 0) {
      const double norm = std::sqrt(sq);
      if (norm > hyper_.clip_norm) clip = hyper_.clip_norm / norm;
    }
    ++state_.step;
    const double t = static_cast<double>(state_.step);
    const double bc1 = 1.0 - std::pow(hyper_.beta1, t);
    const double bc2 = 1.0 - std::pow(hyper_.beta2, t);
    const double decay = 1.0 - hyper_.lr * hyper_.weight_decay;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto& m = state_.m[i];
      auto& v = state_.v[i];
      auto& w = p.data();
      const bool has = p.has_grad();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double g = has ? static_cast<double>(p.grad()[k]) * clip : 0.0;
        const double mk = hyper_.beta1 * static_cast<double>(m[k]) + (1.0 - hyper_.beta1) * g;
        const double vk = hyper_.beta2 * static_cast<double>(v[k]) + (1.0 - hyper_.beta2) * g * g;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double mhat = mk / bc1;
        const double vhat = vk / bc2;
        double theta = static_cast<double>(w[k]) * decay;
        theta -= hyper_.lr * mhat / (std::sqrt(vhat) + hyper_.eps);
        w[k] = static_cast<T>(theta);
      }
    }
    return true;
  }

 private:
  std::vector<Tensor<T>> params_;
  AdamWHyper hyper_;
  AdamWState<T> state_;
  std::int64_t skipped_ = 0;
};

enum class ScheduleKind { constant, warmup_cosine };

DYNEVAL_JSON_ENUM(ScheduleKind, {{ScheduleKind::constant, "constant"},
                                            {ScheduleKind::warmup_cosine, "warmup_cosine"}})

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::constant;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 0;
  double max_lr = 1e-3;

  void validate() const {
    if (kind == ScheduleKind::warmup_cosine) {
      if (warmup_steps < 0 || total_steps < 0) throw ConfigError("schedule: step counts must be >= 0");
      if (warmup_steps > total_steps) throw ConfigError("schedule: warmup_steps exceeds total_steps");
    }
    if (!(max_lr >= 0)) throw ConfigError("schedule: max_lr must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const ScheduleConfig& s) {
  j = nlohmann::json{
      {"kind", s.kind}, {"warmup_steps", s.warmup_steps}, {"total_steps", s.total_steps}, {"max_lr", s.max_lr}};
}

inline void from_json(const nlohmann::json& j, ScheduleConfig& s) {
  s.kind = j.value("kind", ScheduleKind::constant);
  s.warmup_steps = j.value("warmup_steps", std::int64_t{0});
  s.total_steps = j.value("total_steps", std::int64_t{0});
  s.max_lr = j.value("max_lr", 1e-3);
}

// constant: max_lr. warmup_cosine: linear 0 -> max_lr over warmup_steps, then
// cosine max_lr -> 0 at total_steps, 0 afterwards.
inline double lr_at(std::int64_t step, const ScheduleConfig& s) {
  if (s.kind == ScheduleKind::constant) return s.max_lr;
  if (step < s.warmup_steps) return s.max_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step >= s.total_steps) return step == s.warmup_steps ? s.max_lr : 0.0;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.max_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct ThrottleDecision {
  bool compute_grad = false;
  bool do_update = false;
};

// Update on every nth increment (index mod n == n - 1). Skipped increments are
// forward-only unless `accumulate` asks for their gradients to be summed into
// the next update.
inline ThrottleDecision throttled_update(std::int64_t increment_index, int n, bool accumulate = false) {
  if (n <= 0) throw ConfigError("update frequency must be >= 1, got " + std::to_string(n));
  const bool update = increment_index % n == n - 1;
  return {update || accumulate, update};
}

}  // namespace dyneval
