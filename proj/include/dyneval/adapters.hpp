#pragma once

// Restricting what online adaptation may change: low-rank adapters on the
// two MLP matrices of every block, or a block-subset freeze mask.

#include <algorithm>
#include <random>
#include <set>
#include <string>

#include <json.hpp>

#include "dyneval/model.hpp"

namespace dyneval {

// Blocks listed here (and optionally the embedding/unembedding/final norm)
// stay trainable; everything else is frozen.
struct FreezeMask {
  std::set<int> blocks;
  bool embeddings = false;
};

inline void to_json(nlohmann::json& j, const FreezeMask& m) {
  j = nlohmann::json{{"blocks", m.blocks}, {"embeddings", m.embeddings}};
}

inline void from_json(const nlohmann::json& j, FreezeMask& m) {
  m.blocks = j.value("blocks", std::set<int>{});
  m.embeddings = j.value("embeddings", false);
}

// num_blocks * 2 * r * (d_model + ffn_mult * d_model).
inline std::size_t lora_trainable_count(const ModelConfig& c, int rank) {
  return static_cast<std::size_t>(c.num_blocks) * 2 * static_cast<std::size_t>(rank) *
         static_cast<std::size_t>(c.d_model + c.ffn_width());
}

template <class T>
void set_all_trainable(Params<T>& p, bool on) {
  for (auto& [name, t] : p.named_all()) t.set_requires_grad(on);
}

// Returns a deep copy with LoRA pairs on W1 and W2 of every block. Base weights
// are frozen; A ~ Normal(0, 0.02^2), B = 0, so outputs are unchanged.
template <class T>
Params<T> attach_lora(const Params<T>& base, const LoraSpec& spec) {
  if (base.lora) throw ConfigError("attach_lora: adapters already attached");
  if (spec.rank < 1) throw ConfigError("attach_lora: rank must be >= 1");
  const int limit = std::min(base.config.d_model, base.config.ffn_width());
  if (spec.rank > limit) {
    throw ConfigError("attach_lora: rank " + std::to_string(spec.rank) + " exceeds min(f_in, f_out) = " +
                      std::to_string(limit));
  }
  Params<T> p = base.clone();
  set_all_trainable(p, false);
  p.lora = spec;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const std::size_t r = spec.rank;
  auto pair_for = [&](const Tensor<T>& w) {
    const std::size_t fin = w.dim(0), fout = w.dim(1);
    std::vector<T> a(fin * r);
    for (auto& x : a) x = static_cast<T>(normal(rng));
    return LoraPair<T>{Tensor<T>::from_values({fin, r}, std::move(a), true), Tensor<T>::zeros({r, fout}, true)};
  };
  for (auto& b : p.blocks) {
    b.lora_w1 = pair_for(b.w1);
    b.lora_w2 = pair_for(b.w2);
  }
  return p;
}

// Folds W += (alpha / r) * A * B into the base weights and drops the adapters.
template <class T>
Params<T> merge_lora(const Params<T>& adapted) {
  Params<T> p = adapted.clone();
  if (!p.lora) return p;
  const T s = static_cast<T>(p.lora->scaling());
  Tape<T> off(false);
  auto fold = [&](Tensor<T>& w, const LoraPair<T>& pair) {
    const Tensor<T> delta = matmul(off, pair.a, pair.b);
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] += s * delta.data()[i];
  };
  for (auto& b : p.blocks) {
    if (b.lora_w1) fold(b.w1, *b.lora_w1);
    if (b.lora_w2) fold(b.w2, *b.lora_w2);
    b.lora_w1.reset();
    b.lora_w2.reset();
  }
  p.lora.reset();
  set_all_trainable(p, true);
  return p;
}

// Returns a deep copy where only the masked blocks' base tensors are trainable.
template <class T>
Params<T> apply_freeze_mask(const Params<T>& base, const FreezeMask& mask) {
  if (mask.blocks.empty() && !mask.embeddings) {
    throw ConfigError("apply_freeze_mask: empty mask leaves nothing to train");
  }
  for (int idx : mask.blocks) {
    if (idx < 0 || idx >= base.config.num_blocks) {
      throw ConfigError("apply_freeze_mask: block index " + std::to_string(idx) + " outside [0, " +
                        std::to_string(base.config.num_blocks) + ")");
    }
  }
  Params<T> p = base.clone();
  set_all_trainable(p, false);
  for (int idx : mask.blocks) {
    auto& b = p.blocks[static_cast<std::size_t>(idx)];
    for (Tensor<T>* t : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias, &b.w1,
                         &b.b1, &b.w2, &b.b2})
      t->set_requires_grad(true);
  }
  if (mask.embeddings) {
    for (Tensor<T>* t : {&p.tok_emb, &p.lnf_gain, &p.lnf_bias, &p.unembed}) t->set_requires_grad(true);
  }
  return p;
}

}  // namespace dyneval
