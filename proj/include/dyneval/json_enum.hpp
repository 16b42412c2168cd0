#pragma once

// Like NLOHMANN_JSON_SERIALIZE_ENUM, but an unknown name is a ConfigError
// instead of silently becoming the first enumerator.

#include <json.hpp>

#include "dyneval/errors.hpp"

#define DYNEVAL_JSON_ENUM(ENUM_TYPE, ...)                                                              \
  inline void to_json(nlohmann::json& j, const ENUM_TYPE& e) {                                         \
    static const std::pair<ENUM_TYPE, const char*> m[] = __VA_ARGS__;                                  \
    for (const auto& [v, name] : m)                                                                    \
      if (v == e) {                                                                                    \
        j = name;                                                                                      \
        return;                                                                                        \
      }                                                                                                \
    j = nullptr;                                                                                       \
  }                                                                                                    \
  inline void from_json(const nlohmann::json& j, ENUM_TYPE& e) {                                       \
    static const std::pair<ENUM_TYPE, const char*> m[] = __VA_ARGS__;                                  \
    std::string names;                                                                                 \
    for (const auto& [v, name] : m) {                                                                  \
      if (j.is_string() && j.get_ref<const std::string&>() == name) {                                  \
        e = v;                                                                                         \
        return;                                                                                        \
      }                                                                                                \
      names += names.empty() ? name : std::string(", ") + name;                                        \
    }                                                                                                  \
    throw dyneval::ConfigError(std::string(#ENUM_TYPE) + ": unknown value " + j.dump() + " (expected " + \
                               names + ")");                                                           \
  }
