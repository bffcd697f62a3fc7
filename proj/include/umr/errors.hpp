#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace umr {

/// Operand shapes do not agree.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// NaN / non-finite value where finite input is required.
struct NumericDomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// A documented precondition was violated by the caller.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

struct LengthError : std::length_error {
  using std::length_error::length_error;
};

struct ConfigurationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shard gather / all-reduce inputs are inconsistent.
struct AggregationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LookupError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// Malformed persisted file. `offset()` is the byte position where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Persisted file carries a format version this build cannot read.
class VersionError : public FormatError {
 public:
  VersionError(unsigned found, unsigned expected, std::size_t offset)
      : FormatError("unsupported format version " + std::to_string(found) + ", expected " +
                        std::to_string(expected),
                    offset) {}
};

}  // namespace umr
