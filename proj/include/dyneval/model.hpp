#pragma once

// Decoder-only transformer: pre-LN blocks, GeLU MLP, per-head linear distance
// bias on attention logits, untied embedding/unembedding. The forward pass
// optionally streams through a KVCache so each token is encoded once.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dyneval/errors.hpp"
#include "dyneval/tensor.hpp"

namespace dyneval {

struct ModelConfig {
  int num_blocks = 2;
  int d_model = 64;
  int num_heads = 4;
  int kv_size = 16;
  int ffn_mult = 4;
  int vocab_size = 257;
  int context_length = 64;
  std::uint64_t seed = 0;

  int attn_width() const { return num_heads * kv_size; }
  int ffn_width() const { return ffn_mult * d_model; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(std::string("model: ") + name + " must be positive");
    };
    positive(num_blocks, "num_blocks");
    positive(d_model, "d_model");
    positive(num_heads, "num_heads");
    positive(kv_size, "kv_size");
    positive(ffn_mult, "ffn_mult");
    positive(vocab_size, "vocab_size");
    positive(context_length, "context_length");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Desk-scale presets mirroring a three-size sweep.
inline ModelConfig model_preset(std::string_view name, int vocab_size, int context_length) {
  ModelConfig c;
  if (name == "tiny") {
    c.num_blocks = 2, c.d_model = 64, c.num_heads = 4, c.kv_size = 16;
  } else if (name == "small") {
    c.num_blocks = 4, c.d_model = 128, c.num_heads = 4, c.kv_size = 32;
  } else if (name == "base") {
    c.num_blocks = 6, c.d_model = 256, c.num_heads = 8, c.kv_size = 32;
  } else {
    throw ConfigError("model: unknown preset '" + std::string(name) + "'");
  }
  c.ffn_mult = 4;
  c.vocab_size = vocab_size;
  c.context_length = context_length;
  return c;
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"num_blocks", c.num_blocks}, {"d_model", c.d_model},       {"num_heads", c.num_heads},
                     {"kv_size", c.kv_size},       {"ffn_mult", c.ffn_mult},     {"vocab_size", c.vocab_size},
                     {"context_length", c.context_length}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.num_blocks = j.at("num_blocks").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.kv_size = j.at("kv_size").get<int>();
  c.ffn_mult = j.at("ffn_mult").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.context_length = j.at("context_length").get<int>();
  c.seed = j.value("seed", std::uint64_t{0});
}

// Low-rank adapter settings; effective update scale is alpha / rank.
struct LoraSpec {
  int rank = 8;
  double alpha = 8.0;
  std::uint64_t seed = 0;

  double scaling() const { return alpha / rank; }
  bool operator==(const LoraSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const LoraSpec& s) {
  j = nlohmann::json{{"rank", s.rank}, {"alpha", s.alpha}, {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, LoraSpec& s) {
  s.rank = j.at("rank").get<int>();
  s.alpha = j.value("alpha", static_cast<double>(s.rank));
  s.seed = j.value("seed", std::uint64_t{0});
}

template <class T>
struct LoraPair {
  Tensor<T> a;  // [f_in x r]
  Tensor<T> b;  // [r x f_out], zero at attach time
};

template <class T>
struct BlockParams {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> w1, b1, w2, b2;
  std::optional<LoraPair<T>> lora_w1, lora_w2;
};

template <class T>
using NamedTensor = std::pair<std::string, Tensor<T>>;

template <class T>
struct Params {
  ModelConfig config;
  Tensor<T> tok_emb;  // [vocab x d]
  std::vector<BlockParams<T>> blocks;
  Tensor<T> lnf_gain, lnf_bias;
  Tensor<T> unembed;  // [d x vocab]
  std::optional<LoraSpec> lora;

  // Base weights in canonical checkpoint order.
  std::vector<NamedTensor<T>> named_base() const {
    std::vector<NamedTensor<T>> out;
    out.emplace_back("tok_emb", tok_emb);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      out.emplace_back(p + "ln1.gain", b.ln1_gain);
      out.emplace_back(p + "ln1.bias", b.ln1_bias);
      out.emplace_back(p + "attn.wq", b.wq);
      out.emplace_back(p + "attn.wk", b.wk);
      out.emplace_back(p + "attn.wv", b.wv);
      out.emplace_back(p + "attn.wo", b.wo);
      out.emplace_back(p + "ln2.gain", b.ln2_gain);
      out.emplace_back(p + "ln2.bias", b.ln2_bias);
      out.emplace_back(p + "mlp.w1", b.w1);
      out.emplace_back(p + "mlp.b1", b.b1);
      out.emplace_back(p + "mlp.w2", b.w2);
      out.emplace_back(p + "mlp.b2", b.b2);
    }
    out.emplace_back("lnf.gain", lnf_gain);
    out.emplace_back("lnf.bias", lnf_bias);
    out.emplace_back("unembed", unembed);
    return out;
  }

  std::vector<NamedTensor<T>> named_adapters() const {
    std::vector<NamedTensor<T>> out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "blocks." + std::to_string(i) + ".mlp.";
      if (const auto& l = blocks[i].lora_w1) {
        out.emplace_back(p + "w1.lora_a", l->a);
        out.emplace_back(p + "w1.lora_b", l->b);
      }
      if (const auto& l = blocks[i].lora_w2) {
        out.emplace_back(p + "w2.lora_a", l->a);
        out.emplace_back(p + "w2.lora_b", l->b);
      }
    }
    return out;
  }

  std::vector<NamedTensor<T>> named_all() const {
    auto out = named_base();
    for (auto& nt : named_adapters()) out.push_back(std::move(nt));
    return out;
  }

  std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, t] : named_all())
      if (t.requires_grad()) out.push_back(t);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& t : trainable()) n += t.size();
    return n;
  }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_all()) n += t.size();
    return n;
  }

  // Deep copy (values and trainable flags, no grads) converted to U.
  template <class U = T>
  Params<U> clone_as() const {
    auto cp = [](const Tensor<T>& t) {
      std::vector<U> v(t.data().begin(), t.data().end());
      return Tensor<U>::from_values(t.shape(), std::move(v), t.requires_grad());
    };
    Params<U> out;
    out.config = config;
    out.lora = lora;
    out.tok_emb = cp(tok_emb);
    for (const auto& b : blocks) {
      BlockParams<U> nb{cp(b.ln1_gain), cp(b.ln1_bias), cp(b.wq),       cp(b.wk),       cp(b.wv),
                        cp(b.wo),       cp(b.ln2_gain), cp(b.ln2_bias), cp(b.w1),       cp(b.b1),
                        cp(b.w2),       cp(b.b2),       std::nullopt,   std::nullopt};
      if (b.lora_w1) nb.lora_w1 = LoraPair<U>{cp(b.lora_w1->a), cp(b.lora_w1->b)};
      if (b.lora_w2) nb.lora_w2 = LoraPair<U>{cp(b.lora_w2->a), cp(b.lora_w2->b)};
      out.blocks.push_back(std::move(nb));
    }
    out.lnf_gain = cp(lnf_gain);
    out.lnf_bias = cp(lnf_bias);
    out.unembed = cp(unembed);
    return out;
  }

  Params clone() const { return clone_as<T>(); }
};

// Closed-form parameter count for a config (no adapters).
inline std::size_t count_params(const ModelConfig& c) {
  const std::size_t d = c.d_model, hk = c.attn_width(), f = c.ffn_width(), v = c.vocab_size;
  const std::size_t per_block = 2 * d + 3 * d * hk + hk * d + 2 * d + d * f + f + f * d + d;
  return v * d + c.num_blocks * per_block + 2 * d + d * v;
}

// Weight-matrix entries touched per token in a forward pass.
inline double matmul_params_per_token(const ModelConfig& c) {
  const double d = c.d_model, hk = c.attn_width(), f = c.ffn_width(), v = c.vocab_size;
  return c.num_blocks * (4.0 * d * hk + 2.0 * d * f) + d * v;
}

// Forward FLOPs for `new_tokens` tokens each attending to `attended` keys:
// new_tokens * (2 * P_matmul + 4 * blocks * heads * kv * attended).
// `extra_matmul_params` adds adapter matrices to P_matmul.
inline double count_flops_forward(const ModelConfig& c, std::size_t new_tokens, std::size_t attended,
                                  double extra_matmul_params = 0.0) {
  const double p = matmul_params_per_token(c) + extra_matmul_params;
  const double attn = 4.0 * c.num_blocks * c.num_heads * c.kv_size * static_cast<double>(attended);
  return static_cast<double>(new_tokens) * (2.0 * p + attn);
}

template <class T>
Params<T> init_model(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const double residual_scale = 1.0 / std::sqrt(2.0 * config.num_blocks);
  auto gaussian = [&](Shape shape, double factor) {
    std::vector<T> v(shape_size(shape));
    for (auto& x : v) x = static_cast<T>(normal(rng) * factor);
    return Tensor<T>::from_values(std::move(shape), std::move(v), true);
  };
  auto constant = [](std::size_t n, T value) { return Tensor<T>::full({n}, value, true); };

  const std::size_t d = config.d_model, hk = config.attn_width(), f = config.ffn_width(),
                    v = config.vocab_size;
  Params<T> p;
  p.config = config;
  p.tok_emb = gaussian({v, d}, 1.0);
  for (int i = 0; i < config.num_blocks; ++i) {
    BlockParams<T> b;
    b.ln1_gain = constant(d, T(1));
    b.ln1_bias = constant(d, T(0));
    b.wq = gaussian({d, hk}, 1.0);
    b.wk = gaussian({d, hk}, 1.0);
    b.wv = gaussian({d, hk}, 1.0);
    b.wo = gaussian({hk, d}, residual_scale);
    b.ln2_gain = constant(d, T(1));
    b.ln2_bias = constant(d, T(0));
    b.w1 = gaussian({d, f}, 1.0);
    b.b1 = constant(f, T(0));
    b.w2 = gaussian({f, d}, residual_scale);
    b.b2 = constant(d, T(0));
    p.blocks.push_back(std::move(b));
  }
  p.lnf_gain = constant(d, T(1));
  p.lnf_bias = constant(d, T(0));
  p.unembed = gaussian({d, v}, 1.0);
  return p;
}

// Per-layer ring of past keys/values, bounded by the context length.
template <class T>
class KVCache {
 public:
  explicit KVCache(const ModelConfig& config)
      : capacity_(static_cast<std::size_t>(config.context_length)),
        width_(static_cast<std::size_t>(config.attn_width())),
        keys_(config.num_blocks),
        values_(config.num_blocks) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t width() const { return width_; }
  std::size_t num_layers() const { return keys_.size(); }
  std::size_t length(std::size_t layer = 0) const { return keys_.at(layer).size() / width_; }
  std::uint64_t absolute_offset() const { return absolute_offset_; }

  const std::vector<T>& keys(std::size_t layer) const { return keys_.at(layer); }
  const std::vector<T>& values(std::size_t layer) const { return values_.at(layer); }

  // Appends `rows` entries to one layer, evicting the oldest beyond capacity.
  void append(std::size_t layer, std::span<const T> k, std::span<const T> v) {
    auto& kb = keys_.at(layer);
    auto& vb = values_.at(layer);
    kb.insert(kb.end(), k.begin(), k.end());
    vb.insert(vb.end(), v.begin(), v.end());
    const std::size_t limit = capacity_ * width_;
    if (kb.size() > limit) {
      const auto drop = static_cast<std::ptrdiff_t>(kb.size() - limit);
      kb.erase(kb.begin(), kb.begin() + drop);
      vb.erase(vb.begin(), vb.begin() + drop);
    }
  }

  void advance(std::size_t tokens) { absolute_offset_ += tokens; }

  // Drops all entries; the absolute offset keeps counting consumed tokens.
  void clear() {
    for (auto& k : keys_) k.clear();
    for (auto& v : values_) v.clear();
  }

 private:
  std::size_t capacity_;
  std::size_t width_;
  std::vector<std::vector<T>> keys_;
  std::vector<std::vector<T>> values_;
  std::uint64_t absolute_offset_ = 0;
};

// Slope for head h (0-based) of H: 2^(-8 (h + 1) / H).
inline double head_slope(std::size_t head, std::size_t heads) {
  return std::exp2(-8.0 * static_cast<double>(head + 1) / static_cast<double>(heads));
}

// Additive attention bias [H x L x S] for L queries after `cached` keys.
// A query attends to keys at distance 0..context-1 behind it; the bias is
// -slope_h * distance, so only relative positions matter.
template <class T>
Tensor<T> distance_bias(std::size_t heads, std::size_t len, std::size_t cached, std::size_t context) {
  const std::size_t keys = cached + len;
  std::vector<T> b(heads * len * keys);
  constexpr T kNegInf = -std::numeric_limits<T>::infinity();
  for (std::size_t h = 0; h < heads; ++h) {
    const T slope = static_cast<T>(head_slope(h, heads));
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t qpos = cached + i;
      T* row = b.data() + (h * len + i) * keys;
      for (std::size_t j = 0; j < keys; ++j) {
        if (j > qpos || qpos - j >= context) {
          row[j] = kNegInf;
        } else {
          row[j] = -slope * static_cast<T>(qpos - j);
        }
      }
    }
  }
  return Tensor<T>::from_values({heads, len, keys}, std::move(b));
}

// Logits [L x vocab] for `tokens`. With a cache, the segment attends to the
// cached keys/values and then appends its own (detached) keys/values.
template <class T>
Tensor<T> forward(Tape<T>& tape, const Params<T>& p, std::span<const int> tokens, KVCache<T>* cache = nullptr) {
  const ModelConfig& c = p.config;
  const std::size_t len = tokens.size();
  if (len == 0) throw DimensionError("forward: empty token segment");
  const std::size_t context = static_cast<std::size_t>(c.context_length);
  if (cache == nullptr && len > context) {
    throw WindowError("forward: segment of " + std::to_string(len) + " tokens exceeds context length " +
                      std::to_string(context) + " without a KV cache");
  }
  for (std::size_t i = 0; i < len; ++i) {
    if (tokens[i] < 0 || tokens[i] >= c.vocab_size) {
      throw IndexError("forward: token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                       " outside vocabulary of " + std::to_string(c.vocab_size));
    }
  }
  const std::size_t heads = c.num_heads;
  const std::size_t width = c.attn_width();
  const std::size_t cached = cache ? cache->length() : 0;
  const Tensor<T> bias = distance_bias<T>(heads, len, cached, context);
  constexpr T kEps = T(1e-5);

  Tensor<T> x = embedding(tape, p.tok_emb, tokens);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const auto& b = p.blocks[l];
    const Tensor<T> h = layer_norm(tape, x, b.ln1_gain, b.ln1_bias, kEps);
    const Tensor<T> q = matmul(tape, h, b.wq);
    const Tensor<T> k = matmul(tape, h, b.wk);
    const Tensor<T> v = matmul(tape, h, b.wv);
    Tensor<T> keys = k, vals = v;
    if (cached > 0) {
      const auto ck = Tensor<T>::from_values({cached, width}, cache->keys(l));
      const auto cv = Tensor<T>::from_values({cached, width}, cache->values(l));
      keys = concat_rows(tape, ck, k);
      vals = concat_rows(tape, cv, v);
    }
    const Tensor<T> a = attention(tape, q, keys, vals, bias, heads);
    x = add(tape, x, matmul(tape, a, b.wo));

    const Tensor<T> h2 = layer_norm(tape, x, b.ln2_gain, b.ln2_bias, kEps);
    Tensor<T> u = add_rowwise(tape, matmul(tape, h2, b.w1), b.b1);
    if (b.lora_w1) {
      const T s = static_cast<T>(p.lora->scaling());
      u = add(tape, u, scale(tape, matmul(tape, matmul(tape, h2, b.lora_w1->a), b.lora_w1->b), s));
    }
    const Tensor<T> g = gelu(tape, u);
    Tensor<T> m = add_rowwise(tape, matmul(tape, g, b.w2), b.b2);
    if (b.lora_w2) {
      const T s = static_cast<T>(p.lora->scaling());
      m = add(tape, m, scale(tape, matmul(tape, matmul(tape, g, b.lora_w2->a), b.lora_w2->b), s));
    }
    x = add(tape, x, m);

    if (cache) cache->append(l, k.values(), v.values());
  }
  if (cache) cache->advance(len);
  const Tensor<T> out = layer_norm(tape, x, p.lnf_gain, p.lnf_bias, kEps);
  return matmul(tape, out, p.unembed);
}

}  // namespace dyneval
