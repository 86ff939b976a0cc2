#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace metalth {

/// Broad failure category. The CLI maps each category onto an exit code.
enum class ErrorKind {
  Config,      // invalid configuration or unknown flag
  Dimension,   // tensor shape mismatch
  Label,       // class label outside [0, C)
  Usage,       // API misuse, e.g. backward on a non-scalar
  Divergence,  // non-finite loss during training or adaptation
  Pipeline,    // stage-tag violation
  Alignment,   // mask / params / threshold not aligned
  Io,          // filesystem failure
  Checkpoint,  // corrupted or incompatible checkpoint
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ErrorKind::Dimension, what) {}
};

class LabelError : public Error {
 public:
  explicit LabelError(const std::string& what) : Error(ErrorKind::Label, what) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::Usage, what) {}
};

class PipelineError : public Error {
 public:
  explicit PipelineError(const std::string& what) : Error(ErrorKind::Pipeline, what) {}
};

class AlignmentError : public Error {
 public:
  explicit AlignmentError(const std::string& what) : Error(ErrorKind::Alignment, what) {}
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(ErrorKind::Io, path + ": " + what), path_(path) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Raised when a loss or parameter becomes NaN/Inf. `step` is the inner
/// step or meta-iteration index at which it was detected.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : Error(ErrorKind::Divergence, what + " (step " + std::to_string(step) + ")"),
        step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace metalth
