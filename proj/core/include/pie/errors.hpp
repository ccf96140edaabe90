#pragma once

#include <stdexcept>
#include <string>

namespace pie {

// Invalid or inconsistent configuration (bad dimensions, unknown enum value,
// missing field). CLI maps this to a nonzero exit naming the field.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Tensor/sequence dimension mismatches at call boundaries.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// A call was made with arguments that make the requested operation undefined
// (empty sample sets, missing metric operands, out-of-range ids).
struct ArgumentError : std::runtime_error {
  explicit ArgumentError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed input files; messages carry record ids / line numbers and fields.
struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

// Dataset generation cannot satisfy its preconditions (e.g. vocabulary too
// small to draw the required distinct role tokens).
struct GenerationError : std::runtime_error {
  explicit GenerationError(const std::string& what) : std::runtime_error(what) {}
};

// Core/boundary partitioning is impossible for the given budget.
struct PartitionError : std::runtime_error {
  explicit PartitionError(const std::string& what) : std::runtime_error(what) {}
};

// Remote explainer/auditor call failed after retries.
struct ClientError : std::runtime_error {
  explicit ClientError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pie
