#pragma once

#include <stdexcept>
#include <string>

namespace dbc {

// Base of every error thrown by the toolkit. The exit code is what the CLI
// reports when the error escapes a subcommand.
class Error : public std::runtime_error {
 public:
  Error(const std::string& what, int exit_code) : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what, 2) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what, 4) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error("domain error: " + what, 4) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error("state error: " + what, 4) {}
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int layer = -1)
      : Error("training error: " + what, 4), layer_(layer) {}
  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

class SamplingError : public Error {
 public:
  SamplingError(const std::string& what, int tau)
      : Error("sampling error at tau=" + std::to_string(tau) + ": " + what, 4), tau_(tau) {}
  int tau() const noexcept { return tau_; }

 private:
  int tau_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("I/O error: " + what, 3) {}
};

class CorruptionError : public Error {
 public:
  explicit CorruptionError(const std::string& what) : Error("corrupt file: " + what, 3) {}
};

}  // namespace dbc
