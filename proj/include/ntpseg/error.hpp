#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ntpseg {

// Base for every error raised by the library. `kind()` is a stable
// machine-readable tag; the CLI prints it as the first field of its error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

// Input violates a documented precondition (shape, range, divisibility).
class InvalidInput : public Error {
 public:
  explicit InvalidInput(const std::string& what) : Error("invalid_input", what) {}
};

// Token outside the range its block allows, or a token count mismatch.
class MalformedToken : public Error {
 public:
  explicit MalformedToken(const std::string& what) : Error("malformed_token", what) {}
};

class MalformedDocument : public Error {
 public:
  explicit MalformedDocument(const std::string& what)
      : Error("malformed_document", what) {}
};

// Grammar violation while parsing a document; `position()` is the offending index.
class ParseError : public Error {
 public:
  ParseError(std::size_t position, const std::string& what)
      : Error("parse_error", what + " at index " + std::to_string(position)),
        position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class LoadError : public Error {
 public:
  explicit LoadError(const std::string& what) : Error("load_error", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config_error", what) {}
};

// Raised when a training step yields a non-finite loss.
class TrainingAborted : public Error {
 public:
  explicit TrainingAborted(const std::string& what) : Error("training_aborted", what) {}
};

}  // namespace ntpseg
