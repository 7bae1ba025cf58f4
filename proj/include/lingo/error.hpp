#pragma once

#include <stdexcept>
#include <string>

namespace lingo {

// Base of every error raised by the framework. `kind()` is a stable
// machine-readable tag used by the CLI error JSON.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  [[nodiscard]] const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("shape_error", m) {}
};

struct DegenerateVectorError : Error {
  explicit DegenerateVectorError(const std::string& m) : Error("degenerate_vector", m) {}
};

struct LabelError : Error {
  explicit LabelError(const std::string& m) : Error("label_error", m) {}
};

struct ProtocolError : Error {
  explicit ProtocolError(const std::string& m) : Error("protocol_error", m) {}
};

struct LookupError : Error {
  explicit LookupError(const std::string& m) : Error("lookup_error", m) {}
};

struct RankError : Error {
  explicit RankError(const std::string& m) : Error("rank_error", m) {}
};

struct MetricError : Error {
  explicit MetricError(const std::string& m) : Error("metric_error", m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config_error", m) {}
};

struct ComparisonError : Error {
  explicit ComparisonError(const std::string& m) : Error("comparison_error", m) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io_error", m) {}
};

// Parse failures carry the 1-based line number of the offending line.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& m)
      : Error("parse_error", "line " + std::to_string(line) + ": " + m), line_(line) {}

  [[nodiscard]] std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace lingo
