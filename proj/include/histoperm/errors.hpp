#pragma once

#include <stdexcept>
#include <string>

namespace histoperm {

/// Base class for every error raised by the library. The exit code is the one
/// the command-line tool reports when the error escapes a command.
class Error : public std::runtime_error {
 public:
  Error(const std::string& what, int exit_code) : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

/// Bad user input: unknown names, invalid configuration values.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, 1) {}
};

/// Filesystem and on-disk format problems.
class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what, 2) {}
};

/// On-disk data whose size or structure disagrees with its manifest.
class IntegrityError : public IoError {
 public:
  explicit IntegrityError(const std::string& what) : IoError(what) {}
};

/// Non-finite values in a loss or update.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, 3) {}
};

/// Violated preconditions on shapes, lengths and ranges.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(what, 4) {}
};

class DimensionError : public ContractError {
 public:
  explicit DimensionError(const std::string& what) : ContractError(what) {}
};

}  // namespace histoperm
