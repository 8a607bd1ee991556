#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace icm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid record stream or dataset invariant violation. line is 1-based, 0 when
// the problem is not tied to a single line (e.g. a dangling partner).
class DatasetError : public Error {
 public:
  explicit DatasetError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

// Backend query failed after exhausting retries (or could not be retried).
class BackendError : public Error {
 public:
  BackendError(const std::string& what, std::string endpoint)
      : Error(what + " [endpoint: " + endpoint + "]"), endpoint_(std::move(endpoint)) {}
  const std::string& endpoint() const noexcept { return endpoint_; }

 private:
  std::string endpoint_;
};

class AuthError : public BackendError {
 public:
  using BackendError::BackendError;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace icm
