#pragma once

#include <stdexcept>
#include <string>

namespace dyneval {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Token id or target outside the vocabulary.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Sequence longer than the attention window with no cache to stream through.
class WindowError : public std::length_error {
 public:
  using std::length_error::length_error;
};

// API misuse, e.g. backward() on a non-scalar.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid configuration detected before any compute starts.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Missing or unreadable input files.
class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Corrupt checkpoint, mismatched record streams and similar data problems.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dyneval
