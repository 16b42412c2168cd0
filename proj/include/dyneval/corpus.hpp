#pragma once

// Ordered document collections concatenated into one token stream with
// boundary markers, synthetic Markov-chain "books", segment sampling for
// finetuning, and corpus statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyneval/errors.hpp"
#include "dyneval/tokenizer.hpp"

namespace dyneval {

struct CorpusStream {
  std::vector<int> tokens;
  std::vector<std::size_t> doc_boundaries;  // start position of each document
  std::vector<int> doc_ids;                 // per-token document index
  std::string tokenizer_id;
  int vocab_size = 0;
  int bos_id = -1;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
  std::size_t num_docs() const { return doc_boundaries.size(); }

  std::size_t doc_begin(std::size_t d) const { return doc_boundaries.at(d); }
  std::size_t doc_end(std::size_t d) const {
    return d + 1 < doc_boundaries.size() ? doc_boundaries[d + 1] : tokens.size();
  }
  std::size_t doc_length(std::size_t d) const { return doc_end(d) - doc_begin(d); }

  // Appends one document; empty documents are ignored.
  void append_document(std::span<const int> doc) {
    if (doc.empty()) return;
    const int id = static_cast<int>(doc_boundaries.size());
    doc_boundaries.push_back(tokens.size());
    tokens.insert(tokens.end(), doc.begin(), doc.end());
    doc_ids.insert(doc_ids.end(), doc.size(), id);
  }

  // Documents [first, first + count) as a new stream with ids renumbered from 0.
  CorpusStream slice_docs(std::size_t first, std::size_t count) const {
    CorpusStream out{{}, {}, {}, tokenizer_id, vocab_size, bos_id};
    for (std::size_t d = first; d < std::min(num_docs(), first + count); ++d) {
      out.append_document(std::span<const int>(tokens.data() + doc_begin(d), doc_length(d)));
    }
    return out;
  }

  // Tokens [begin, end) with boundaries clipped to the range.
  CorpusStream slice_tokens(std::size_t begin, std::size_t end) const {
    CorpusStream out{{}, {}, {}, tokenizer_id, vocab_size, bos_id};
    end = std::min(end, size());
    for (std::size_t d = 0; d < num_docs(); ++d) {
      const std::size_t b = std::max(begin, doc_begin(d)), e = std::min(end, doc_end(d));
      if (b < e) out.append_document(std::span<const int>(tokens.data() + b, e - b));
    }
    return out;
  }

  void validate() const {
    if (tokens.empty()) {
      if (!doc_boundaries.empty() || !doc_ids.empty()) throw FormatError("corpus: boundaries on an empty stream");
      return;
    }
    if (doc_boundaries.empty() || doc_boundaries.front() != 0) throw FormatError("corpus: first boundary must be 0");
    for (std::size_t i = 1; i < doc_boundaries.size(); ++i) {
      if (doc_boundaries[i] <= doc_boundaries[i - 1]) throw FormatError("corpus: boundaries not strictly increasing");
    }
    if (doc_boundaries.back() >= tokens.size()) throw FormatError("corpus: boundary past end of stream");
    if (doc_ids.size() != tokens.size()) throw FormatError("corpus: doc_ids length differs from token count");
    for (std::size_t d = 0; d < num_docs(); ++d)
      for (std::size_t i = doc_begin(d); i < doc_end(d); ++i)
        if (doc_ids[i] != static_cast<int>(d)) throw FormatError("corpus: doc_ids inconsistent with boundaries");
    for (int t : tokens)
      if (t < 0 || t >= vocab_size || t == bos_id) throw FormatError("corpus: token outside vocabulary");
  }
};

inline CorpusStream empty_stream(const Tokenizer& tok) {
  return CorpusStream{{}, {}, {}, tok.id(), tok.vocab_size(), tok.bos_id()};
}

// Newline-separated paths, relative to the manifest's directory. Blank lines
// and lines starting with '#' are ignored.
inline std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw IngestionError("corpus: cannot read manifest " + manifest.string());
  std::vector<std::filesystem::path> files;
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::filesystem::path p(line);
    files.push_back(p.is_absolute() ? p : manifest.parent_path() / p);
  }
  return files;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("corpus: cannot read document " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Tokenizes the manifest's files in order and concatenates them.
inline CorpusStream load_corpus(const std::filesystem::path& manifest, const Tokenizer& tok,
                                std::vector<std::string>* warnings = nullptr) {
  CorpusStream out = empty_stream(tok);
  for (const auto& file : read_manifest(manifest)) {
    const std::string text = read_text_file(file);
    if (text.empty()) {
      const std::string msg = "corpus: skipping empty document " + file.string();
      if (warnings) warnings->push_back(msg);
      std::cerr << "warning: " << msg << '\n';
      continue;
    }
    out.append_document(tok.encode(text));
  }
  return out;
}

using TransitionMatrix = std::vector<std::vector<double>>;

struct MarkovRegime {
  TransitionMatrix transition;
  std::size_t length = 0;
};

struct SyntheticSpec {
  int alphabet = 16;
  std::vector<MarkovRegime> regimes;
  std::uint64_t seed = 0;

  void validate() const {
    if (alphabet < 2) throw ConfigError("synthetic: alphabet must have at least 2 letters");
    if (regimes.empty()) throw ConfigError("synthetic: no regimes");
    for (const auto& r : regimes) {
      if (r.transition.size() != static_cast<std::size_t>(alphabet)) {
        throw ConfigError("synthetic: transition matrix must be alphabet x alphabet");
      }
      for (const auto& row : r.transition) {
        if (row.size() != static_cast<std::size_t>(alphabet)) throw ConfigError("synthetic: ragged transition row");
        double s = 0;
        for (double p : row) {
          if (!(p >= 0)) throw ConfigError("synthetic: negative transition probability");
          s += p;
        }
        if (std::abs(s - 1.0) > 1e-9) throw ConfigError("synthetic: transition row does not sum to 1");
      }
    }
  }
};

// Each row puts Dirichlet(1) mass on `branching` random successors, mixed with
// `smoothing` of uniform mass so every transition has non-zero probability.
inline TransitionMatrix random_transition_matrix(int alphabet, int branching, std::uint64_t seed,
                                                 double smoothing = 0.01) {
  if (branching < 1 || branching > alphabet) throw ConfigError("synthetic: branching must be in [1, alphabet]");
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> expo(1.0);
  TransitionMatrix m(alphabet, std::vector<double>(alphabet, 0.0));
  std::vector<int> perm(alphabet);
  for (auto& row : m) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    double total = 0;
    std::vector<double> w(branching);
    for (auto& x : w) total += (x = expo(rng));
    for (int k = 0; k < branching; ++k) row[perm[k]] = (1.0 - smoothing) * w[k] / total;
    for (auto& p : row) p += smoothing / alphabet;
    const double s = std::accumulate(row.begin(), row.end(), 0.0);
    for (auto& p : row) p /= s;
  }
  return m;
}

inline std::vector<double> stationary_distribution(const TransitionMatrix& m) {
  const std::size_t n = m.size();
  std::vector<double> pi(n, 1.0 / n), next(n);
  for (int it = 0; it < 100000; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) next[j] += pi[i] * m[i][j];
    double diff = 0;
    for (std::size_t j = 0; j < n; ++j) diff += std::abs(next[j] - pi[j]);
    pi.swap(next);
    if (diff < 1e-15) break;
  }
  return pi;
}

// H = -sum_i pi_i sum_j P_ij ln P_ij, in nats per token.
inline double entropy_rate(const TransitionMatrix& m) {
  const auto pi = stationary_distribution(m);
  double h = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (double p : m[i])
      if (p > 0) h -= pi[i] * p * std::log(p);
  return h;
}

// Length-weighted entropy rate over a spec's regimes.
inline double entropy_floor(const SyntheticSpec& spec) {
  double total = 0, weighted = 0;
  for (const auto& r : spec.regimes) {
    weighted += static_cast<double>(r.length) * entropy_rate(r.transition);
    total += static_cast<double>(r.length);
  }
  return total > 0 ? weighted / total : 0.0;
}

// One document per regime; each regime restarts the chain from a uniform state.
inline CorpusStream synthesize_stream(const SyntheticSpec& spec) {
  spec.validate();
  const Tokenizer tok = Tokenizer::symbols(spec.alphabet);
  CorpusStream out = empty_stream(tok);
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> first(0, spec.alphabet - 1);
  for (const auto& regime : spec.regimes) {
    std::vector<std::discrete_distribution<int>> rows;
    for (const auto& row : regime.transition) rows.emplace_back(row.begin(), row.end());
    std::vector<int> doc(regime.length);
    int state = first(rng);
    for (auto& t : doc) {
      t = state;
      state = rows[static_cast<std::size_t>(state)](rng);
    }
    out.append_document(doc);
  }
  return out;
}

inline void to_json(nlohmann::json& j, const MarkovRegime& r) {
  j = nlohmann::json{{"transition", r.transition}, {"length", r.length}};
}

// A regime is either an explicit "transition" matrix or a generated one:
// {"length": N, "chain_seed": s, "branching": b, "smoothing": eps}.
inline MarkovRegime regime_from_json(const nlohmann::json& j, int alphabet) {
  MarkovRegime r;
  r.length = j.at("length").get<std::size_t>();
  if (j.contains("transition")) {
    r.transition = j.at("transition").get<TransitionMatrix>();
  } else {
    r.transition = random_transition_matrix(alphabet, j.value("branching", 3), j.at("chain_seed").get<std::uint64_t>(),
                                            j.value("smoothing", 0.01));
  }
  return r;
}

inline SyntheticSpec synthetic_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.alphabet = j.value("alphabet", 16);
  s.seed = j.value("seed", std::uint64_t{0});
  for (const auto& r : j.at("regimes")) s.regimes.push_back(regime_from_json(r, s.alphabet));
  s.validate();
  return s;
}

// i.i.d. fixed-length segments with uniformly random starts.
class SegmentSampler {
 public:
  SegmentSampler(std::span<const int> corpus, std::size_t segment_length, std::size_t batch_size, std::uint64_t seed)
      : corpus_(corpus), segment_length_(segment_length), batch_size_(batch_size), rng_(seed) {
    if (segment_length == 0 || batch_size == 0) throw ConfigError("sampler: segment length and batch size must be > 0");
    if (corpus.size() <= segment_length) {
      throw ConfigError("sampler: corpus of " + std::to_string(corpus.size()) + " tokens is not longer than segment length " +
                        std::to_string(segment_length));
    }
  }

  std::size_t num_valid_starts() const { return corpus_.size() - segment_length_ + 1; }

  std::size_t next_start() {
    std::uniform_int_distribution<std::size_t> pick(0, num_valid_starts() - 1);
    return pick(rng_);
  }

  std::vector<std::vector<int>> next_batch() {
    std::vector<std::vector<int>> batch;
    for (std::size_t b = 0; b < batch_size_; ++b) {
      const std::size_t s = next_start();
      batch.emplace_back(corpus_.begin() + static_cast<std::ptrdiff_t>(s),
                         corpus_.begin() + static_cast<std::ptrdiff_t>(s + segment_length_));
    }
    return batch;
  }

 private:
  std::span<const int> corpus_;
  std::size_t segment_length_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
};

struct CorpusStats {
  std::size_t num_docs = 0;
  std::size_t total_tokens = 0;
  std::vector<double> bin_edges;  // log-spaced, size = bins + 1
  std::vector<std::size_t> bin_counts;
  std::vector<int> token_order;  // ids by decreasing reference frequency
  std::vector<double> sorted_frequencies;
  std::size_t context_length = 0;
  double fraction_exceeding_context = 0.0;
};

inline void to_json(nlohmann::json& j, const CorpusStats& s) {
  j = nlohmann::json{{"num_docs", s.num_docs},
                     {"total_tokens", s.total_tokens},
                     {"bin_edges", s.bin_edges},
                     {"bin_counts", s.bin_counts},
                     {"token_order", s.token_order},
                     {"sorted_frequencies", s.sorted_frequencies},
                     {"context_length", s.context_length},
                     {"fraction_exceeding_context", s.fraction_exceeding_context}};
}

inline std::vector<std::size_t> token_counts(const CorpusStream& s) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(s.vocab_size, 1)), 0);
  for (int t : s.tokens) ++counts[static_cast<std::size_t>(t)];
  return counts;
}

// Document-length histogram over log-spaced bins (ceil(cbrt(n)) bins unless
// given), plus token frequencies ordered by decreasing frequency in
// `reference` (the stream itself when null) so two corpora share one axis.
inline CorpusStats corpus_stats(const CorpusStream& s, std::size_t context_length,
                                const CorpusStream* reference = nullptr, std::optional<int> bins = std::nullopt) {
  CorpusStats st;
  st.num_docs = s.num_docs();
  st.total_tokens = s.size();
  st.context_length = context_length;
  if (st.num_docs > 0) {
    std::vector<std::size_t> lengths;
    for (std::size_t d = 0; d < s.num_docs(); ++d) lengths.push_back(s.doc_length(d));
    const double lo = static_cast<double>(*std::min_element(lengths.begin(), lengths.end()));
    const double hi = static_cast<double>(*std::max_element(lengths.begin(), lengths.end()));
    const int nb = bins.value_or(std::max(1, static_cast<int>(std::ceil(std::cbrt(static_cast<double>(lengths.size())) - 1e-9))));
    const double llo = std::log(lo), lhi = std::log(std::max(hi, lo + 1.0));
    for (int b = 0; b <= nb; ++b) st.bin_edges.push_back(std::exp(llo + (lhi - llo) * b / nb));
    st.bin_edges.front() = lo;
    st.bin_edges.back() = std::max(hi, lo + 1.0);
    st.bin_counts.assign(static_cast<std::size_t>(nb), 0);
    std::size_t exceeding = 0;
    for (std::size_t len : lengths) {
      const double x = static_cast<double>(len);
      auto it = std::upper_bound(st.bin_edges.begin(), st.bin_edges.end(), x);
      std::size_t b = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, (it - st.bin_edges.begin()) - 1));
      b = std::min(b, st.bin_counts.size() - 1);
      ++st.bin_counts[b];
      exceeding += len > context_length;
    }
    st.fraction_exceeding_context = static_cast<double>(exceeding) / static_cast<double>(lengths.size());
  }
  const auto counts = token_counts(s);
  const auto ref_counts = reference ? token_counts(*reference) : counts;
  const std::size_t vocab = std::max(counts.size(), ref_counts.size());
  st.token_order.resize(vocab);
  std::iota(st.token_order.begin(), st.token_order.end(), 0);
  auto ref_at = [&](int id) { return static_cast<std::size_t>(id) < ref_counts.size() ? ref_counts[id] : 0; };
  std::stable_sort(st.token_order.begin(), st.token_order.end(), [&](int a, int b) { return ref_at(a) > ref_at(b); });
  for (int id : st.token_order) {
    const std::size_t c = static_cast<std::size_t>(id) < counts.size() ? counts[id] : 0;
    st.sorted_frequencies.push_back(s.size() ? static_cast<double>(c) / static_cast<double>(s.size()) : 0.0);
  }
  return st;
}

}  // namespace dyneval
