#pragma once

#include <stdexcept>
#include <string>

namespace smlp {

// Base for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor rank/extent violations (dimension mismatches, bad axes).
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

// Invalid model/router/training configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

// Corpus, task-file, and other input-data problems.
class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error("data error: " + msg) {}
};

// Checkpoint and other file I/O failures (truncation, checksum, version).
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

// Runtime training failures (divergence, stale tape misuse).
class TrainError : public Error {
 public:
  explicit TrainError(const std::string& msg) : Error("train error: " + msg) {}
};

}  // namespace smlp
