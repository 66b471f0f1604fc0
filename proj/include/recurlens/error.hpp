#pragma once

#include <stdexcept>
#include <string>

namespace recurlens {

/// Broad failure classes. The CLI maps each one to its own exit code.
enum class ErrorCategory {
  Dimension = 2,
  Config = 3,
  Input = 4,
  Numeric = 5,
  Contract = 6,
  Parse = 7,
  Io = 8,
  NoSamples = 9,
};

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Dimension: return "dimension";
    case ErrorCategory::Config: return "config";
    case ErrorCategory::Input: return "input";
    case ErrorCategory::Numeric: return "numeric";
    case ErrorCategory::Contract: return "contract";
    case ErrorCategory::Parse: return "parse";
    case ErrorCategory::Io: return "io";
    case ErrorCategory::NoSamples: return "no-samples";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(std::string(category_name(category)) + " error: " + what),
        category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ErrorCategory::Dimension, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::Config, what) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorCategory::Input, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorCategory::Numeric, what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(ErrorCategory::Contract, what) {}
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(ErrorCategory::Parse, "line " + std::to_string(line) + ": " + what), line_(line) {}
  /// For inputs without lines, such as binary files; line() is 0.
  explicit ParseError(const std::string& what) : Error(ErrorCategory::Parse, what), line_(0) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCategory::Io, what) {}
};

class NoSamplesError : public Error {
 public:
  explicit NoSamplesError(const std::string& what) : Error(ErrorCategory::NoSamples, what) {}
};

}  // namespace recurlens
