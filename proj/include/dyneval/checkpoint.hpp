#pragma once

// Binary checkpoint container.
//
//   u64 LE   header length N
//   N bytes  JSON header: {"format", "version", "kind": "full"|"lora",
//            "model": ModelConfig, "lora": LoraSpec?, "tensors": [{name, shape}],
//            "meta": {...}}
//   f32 LE   tensor values, in header order
//   u64 LE   FNV-1a 64 checksum of every preceding byte
//
// Full checkpoints store base weights in canonical order (plus adapters when
// attached). LoRA checkpoints store only the A/B tensors.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyneval/adapters.hpp"
#include "dyneval/errors.hpp"
#include "dyneval/model.hpp"

namespace dyneval {

inline constexpr const char* kCheckpointFormat = "dyneval-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

inline float get_f32(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

inline std::vector<std::uint8_t> encode(const nlohmann::json& header, const std::vector<NamedTensor<float>>& tensors) {
  const std::string text = header.dump();
  std::vector<std::uint8_t> out;
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : tensors)
    for (float v : t.data()) put_f32(out, v);
  put_u64(out, fnv1a64(out));
  return out;
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IngestionError("checkpoint: cannot open " + tmp.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IngestionError("checkpoint: short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct RawCheckpoint {
  nlohmann::json header;
  std::vector<std::uint8_t> bytes;
  std::size_t payload_offset = 0;
};

inline RawCheckpoint read_raw(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("checkpoint: cannot open " + path.string());
  RawCheckpoint raw;
  raw.bytes.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
  const auto& b = raw.bytes;
  if (b.size() < 16) throw FormatError("checkpoint: " + path.string() + " is truncated");
  const std::uint64_t stored = get_u64(b.data() + b.size() - 8);
  const std::vector<std::uint8_t> body(b.begin(), b.end() - 8);
  if (fnv1a64(body) != stored) throw FormatError("checkpoint: checksum mismatch in " + path.string());
  const std::uint64_t n = get_u64(b.data());
  if (8 + n > body.size()) throw FormatError("checkpoint: header length out of range in " + path.string());
  raw.header = nlohmann::json::parse(b.begin() + 8, b.begin() + 8 + static_cast<std::ptrdiff_t>(n));
  if (raw.header.value("format", "") != kCheckpointFormat) {
    throw FormatError("checkpoint: " + path.string() + " is not a " + kCheckpointFormat + " file");
  }
  raw.payload_offset = 8 + n;
  return raw;
}

// Copies tensors named in the header into `targets` (matched by name, shapes checked).
inline void fill_tensors(const RawCheckpoint& raw, const std::vector<NamedTensor<float>>& targets) {
  const auto& entries = raw.header.at("tensors");
  if (entries.size() != targets.size()) {
    throw FormatError("checkpoint: expected " + std::to_string(targets.size()) + " tensors, header lists " +
                      std::to_string(entries.size()));
  }
  std::size_t offset = raw.payload_offset;
  const std::size_t end = raw.bytes.size() - 8;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& [name, t] = targets[i];
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != name || e.at("shape").get<Shape>() != t.shape()) {
      throw FormatError("checkpoint: tensor " + std::to_string(i) + " is " + e.dump() + ", expected " + name + " " +
                        shape_str(t.shape()));
    }
    if (offset + 4 * t.size() > end) throw FormatError("checkpoint: payload truncated at " + name);
    auto dst = t;  // shared handle
    for (std::size_t k = 0; k < t.size(); ++k) dst.data()[k] = get_f32(raw.bytes.data() + offset + 4 * k);
    offset += 4 * t.size();
  }
  if (offset != end) throw FormatError("checkpoint: trailing bytes after tensors");
}

inline nlohmann::json tensor_index(const std::vector<NamedTensor<float>>& tensors) {
  nlohmann::json idx = nlohmann::json::array();
  for (const auto& [name, t] : tensors) idx.push_back({{"name", name}, {"shape", t.shape()}});
  return idx;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Params<float>& p,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  const auto tensors = p.named_all();
  nlohmann::json header{{"format", kCheckpointFormat}, {"version", kCheckpointVersion}, {"kind", "full"},
                        {"model", p.config},          {"tensors", detail::tensor_index(tensors)},
                        {"meta", meta}};
  if (p.lora) header["lora"] = *p.lora;
  detail::write_file(path, detail::encode(header, tensors));
}

inline void save_lora_checkpoint(const std::filesystem::path& path, const Params<float>& p,
                                 const nlohmann::json& meta = nlohmann::json::object()) {
  if (!p.lora) throw UsageError("save_lora_checkpoint: no adapters attached");
  const auto tensors = p.named_adapters();
  nlohmann::json header{{"format", kCheckpointFormat}, {"version", kCheckpointVersion}, {"kind", "lora"},
                        {"model", p.config},          {"lora", *p.lora},
                        {"tensors", detail::tensor_index(tensors)}, {"meta", meta}};
  detail::write_file(path, detail::encode(header, tensors));
}

struct LoadedCheckpoint {
  Params<float> params;
  nlohmann::json meta;
};

// Loads a full checkpoint; all tensors come back trainable unless adapters are
// present, in which case only the adapters are.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto raw = detail::read_raw(path);
  if (raw.header.at("kind") != "full") throw FormatError("checkpoint: " + path.string() + " is not a full checkpoint");
  ModelConfig config = raw.header.at("model").get<ModelConfig>();
  config.validate();
  Params<float> p = init_model<float>(config);
  if (raw.header.contains("lora")) p = attach_lora(p, raw.header.at("lora").get<LoraSpec>());
  detail::fill_tensors(raw, p.named_all());
  return {std::move(p), raw.header.value("meta", nlohmann::json::object())};
}

// Attaches the adapters stored in a LoRA-only checkpoint onto `base`.
inline Params<float> load_lora_checkpoint(const std::filesystem::path& path, const Params<float>& base) {
  const auto raw = detail::read_raw(path);
  if (raw.header.at("kind") != "lora") throw FormatError("checkpoint: " + path.string() + " is not a LoRA checkpoint");
  if (raw.header.at("model").get<ModelConfig>() != base.config) {
    throw FormatError("checkpoint: LoRA adapters in " + path.string() + " were built for a different model config");
  }
  Params<float> p = attach_lora(base, raw.header.at("lora").get<LoraSpec>());
  detail::fill_tensors(raw, p.named_adapters());
  return p;
}

}  // namespace dyneval
