#pragma once

#include <stdexcept>
#include <string>

namespace dialclip {

// Base for every error raised by the library. The CLI reports ConfigError
// as a usage problem (exit 1) and everything else as a runtime failure (2).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

// Requested length exceeds what the input can provide (pooling, truncation).
struct LengthError : ShapeError {
  using ShapeError::ShapeError;
};

struct NumericError : Error {
  using Error::Error;
};

// Caller violated a documented precondition.
struct ContractError : Error {
  using Error::Error;
};

struct InputError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct StateError : Error {
  using Error::Error;
};

struct ParseError : Error {
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Checkpoint loading failures. Each failure mode has its own type so callers
// can tell a stale file from a damaged one.
struct LoadError : Error {
  using Error::Error;
};
struct CorruptManifestError : LoadError {
  using LoadError::LoadError;
};
struct VersionError : LoadError {
  using LoadError::LoadError;
};
struct TruncationError : LoadError {
  using LoadError::LoadError;
};

}  // namespace dialclip
