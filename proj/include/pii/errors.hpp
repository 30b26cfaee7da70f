#pragma once

#include <stdexcept>
#include <string>

namespace pii {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// exit codes: DivergenceError -> 1, everything else here -> 2.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(msg), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

// Invalid argument value for an operation (bad resolution, bad weight, ...).
class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& msg) : Error("parameter", msg) {}
};

// Tensor shapes disagree with the operation contract.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape", msg) {}
};

// The requested combination is not supported by the given model
// (e.g. feature-statistics regularization on a model without stored
// batch-norm statistics).
class CapabilityError : public Error {
 public:
  explicit CapabilityError(const std::string& msg) : Error("capability", msg) {}
};

// Invalid or inconsistent configuration (files, flags, field values).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};

// A required local dataset or weights file is missing or malformed.
class IngestionError : public Error {
 public:
  explicit IngestionError(const std::string& msg) : Error("ingestion", msg) {}
};

// File I/O failure (write/read of images, sidecars, weights).
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io", msg) {}
};

// Optimization produced a non-finite loss or gradient.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& msg, int stage, int iteration)
      : Error("divergence", msg + " at stage " + std::to_string(stage) + ", iteration " +
                                std::to_string(iteration)),
        stage_(stage),
        iteration_(iteration) {}
  int stage() const { return stage_; }
  int iteration() const { return iteration_; }

 private:
  int stage_;
  int iteration_;
};

}  // namespace pii
