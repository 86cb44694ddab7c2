#pragma once

#include <stdexcept>
#include <string>

namespace skd {

// Exit-code contract used by the CLI: 2 config/input, 3 dependency, 4 numeric.
class Error : public std::runtime_error {
 public:
  Error(std::string msg, int exit_code)
      : std::runtime_error(std::move(msg)), exit_code_(exit_code) {}
  int exit_code() const { return exit_code_; }

 private:
  int exit_code_;
};

// Bad arguments, bad config, precondition violations, malformed input files.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::string msg) : Error(std::move(msg), 2) {}
};

// A stage was asked to run before its upstream artifacts exist, or the cache
// on disk was produced under a different config hash.
class DependencyError : public Error {
 public:
  explicit DependencyError(std::string msg) : Error(std::move(msg), 3) {}
};

// Non-finite value encountered in numeric code.
class NumericError : public Error {
 public:
  explicit NumericError(std::string msg) : Error(std::move(msg), 4) {}
};

}  // namespace skd
