#pragma once

// Tokenizers. Every tokenizer reserves its last id as BOS, which the
// evaluation engines prepend once at stream start.
//   byte:   ids 0..255 are raw bytes, BOS = 256.
//   bpe:    byte ids plus greedy pair merges, BOS = last id.
//   symbol: ids 0..K-1 for a K-letter synthetic alphabet, BOS = K.

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dyneval/errors.hpp"

namespace dyneval {

class Tokenizer {
 public:
  enum class Kind { byte, bpe, symbol };

  static Tokenizer byte_level() {
    Tokenizer t;
    t.kind_ = Kind::byte;
    t.init_bytes();
    return t;
  }

  static Tokenizer symbols(int alphabet) {
    if (alphabet < 2) throw ConfigError("tokenizer: symbol alphabet must have at least 2 letters");
    Tokenizer t;
    t.kind_ = Kind::symbol;
    t.alphabet_ = alphabet;
    return t;
  }

  // Learns merges over the given documents until the vocabulary (including
  // BOS) reaches `vocab_size` or no pair occurs twice. Ties break toward the
  // smaller (left, right) id pair, so training is deterministic.
  static Tokenizer train_bpe(std::span<const std::string> texts, int vocab_size) {
    if (vocab_size < 257) throw ConfigError("tokenizer: BPE vocab_size must be >= 257");
    Tokenizer t;
    t.kind_ = Kind::bpe;
    t.init_bytes();
    std::vector<std::vector<int>> seqs;
    for (const auto& text : texts) seqs.push_back(to_bytes(text));
    while (static_cast<int>(t.pieces_.size()) + 1 < vocab_size) {
      std::map<std::pair<int, int>, std::size_t> counts;
      for (const auto& s : seqs)
        for (std::size_t i = 0; i + 1 < s.size(); ++i) ++counts[{s[i], s[i + 1]}];
      std::pair<int, int> best{-1, -1};
      std::size_t best_count = 1;
      for (const auto& [pair, n] : counts) {
        if (n > best_count) best = pair, best_count = n;
      }
      if (best.first < 0) break;
      const int id = static_cast<int>(t.pieces_.size());
      t.merges_.push_back(best);
      t.pieces_.push_back(t.pieces_[best.first] + t.pieces_[best.second]);
      for (auto& s : seqs) s = apply_merge(s, best, id);
    }
    return t;
  }

  Kind kind() const { return kind_; }
  int vocab_size() const { return kind_ == Kind::symbol ? alphabet_ + 1 : static_cast<int>(pieces_.size()) + 1; }
  int bos_id() const { return vocab_size() - 1; }
  std::size_t num_merges() const { return merges_.size(); }

  std::string id() const {
    switch (kind_) {
      case Kind::byte: return "byte";
      case Kind::bpe: return "bpe-" + std::to_string(vocab_size());
      case Kind::symbol: return "symbol-" + std::to_string(alphabet_);
    }
    return "unknown";
  }

  std::vector<int> encode(std::string_view text) const {
    if (kind_ == Kind::symbol) throw UsageError("tokenizer: symbol tokenizer has no text encoding");
    std::vector<int> ids = to_bytes(text);
    for (std::size_t r = 0; r < merges_.size(); ++r) ids = apply_merge(ids, merges_[r], static_cast<int>(256 + r));
    return ids;
  }

  std::string decode(std::span<const int> ids) const {
    if (kind_ == Kind::symbol) throw UsageError("tokenizer: symbol tokenizer has no text decoding");
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const int id = ids[i];
      if (id == bos_id()) continue;
      if (id < 0 || id >= static_cast<int>(pieces_.size())) {
        throw IndexError("tokenizer: id " + std::to_string(id) + " at position " + std::to_string(i) +
                         " outside vocabulary");
      }
      out += pieces_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", kind_ == Kind::byte ? "byte" : kind_ == Kind::bpe ? "bpe" : "symbol"}};
    if (kind_ == Kind::symbol) j["alphabet"] = alphabet_;
    if (kind_ == Kind::bpe) j["merges"] = merges_;
    return j;
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "byte") return byte_level();
    if (kind == "symbol") return symbols(j.at("alphabet").get<int>());
    if (kind == "bpe") {
      Tokenizer t;
      t.kind_ = Kind::bpe;
      t.init_bytes();
      for (const auto& m : j.at("merges")) {
        const auto pair = m.get<std::pair<int, int>>();
        const int n = static_cast<int>(t.pieces_.size());
        if (pair.first < 0 || pair.second < 0 || pair.first >= n || pair.second >= n) {
          throw FormatError("tokenizer: merge references unknown id");
        }
        t.merges_.push_back(pair);
        t.pieces_.push_back(t.pieces_[pair.first] + t.pieces_[pair.second]);
      }
      return t;
    }
    throw ConfigError("tokenizer: unknown kind '" + kind + "'");
  }

 private:
  Tokenizer() = default;

  void init_bytes() {
    pieces_.clear();
    for (int b = 0; b < 256; ++b) pieces_.emplace_back(1, static_cast<char>(b));
  }

  static std::vector<int> to_bytes(std::string_view text) {
    std::vector<int> ids(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) ids[i] = static_cast<unsigned char>(text[i]);
    return ids;
  }

  static std::vector<int> apply_merge(const std::vector<int>& s, std::pair<int, int> pair, int id) {
    std::vector<int> out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i + 1 < s.size() && s[i] == pair.first && s[i + 1] == pair.second) {
        out.push_back(id);
        ++i;
      } else {
        out.push_back(s[i]);
      }
    }
    return out;
  }

  Kind kind_ = Kind::byte;
  int alphabet_ = 0;
  std::vector<std::string> pieces_;
  std::vector<std::pair<int, int>> merges_;
};

}  // namespace dyneval
