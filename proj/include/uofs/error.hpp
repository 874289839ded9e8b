#pragma once

#include <stdexcept>
#include <string>

namespace uofs {

// Runtime failure: bad data, non-finite loss, I/O problems. CLI exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or parameter combination. CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A stage was invoked before the artifact it consumes exists. CLI exit code 2.
class DependencyError : public Error {
 public:
  DependencyError(const std::string& what, std::string prerequisite)
      : Error(what), prerequisite_(std::move(prerequisite)) {}
  const std::string& prerequisite() const { return prerequisite_; }

 private:
  std::string prerequisite_;
};

}  // namespace uofs
