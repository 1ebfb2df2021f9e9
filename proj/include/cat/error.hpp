#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cat {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value violates a documented precondition (probabilities, ranges, config).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API contract (non-scalar backward root, batch too small).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unsupported input file. Carries the byte offset where parsing stopped.
class IngestionError : public Error {
 public:
  IngestionError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Binary container (feature dump, checkpoint) is corrupt or does not match.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Enumeration would exceed the brute-force budget.
class SizeError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace cat
