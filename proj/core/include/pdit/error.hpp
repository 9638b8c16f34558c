#pragma once

#include <stdexcept>
#include <string>

namespace pdit {

/// Base for every error raised by the library. The CLI maps subclasses onto
/// process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad shapes, out-of-range ids, malformed arguments.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Invalid or unreadable configuration (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced during a forward or backward pass (exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or trace that fails magic/CRC/structure validation (exit code 4).
class CorruptArtifact : public Error {
 public:
  using Error::Error;
};

/// Environment contract violation, e.g. stepping a finished episode.
class EnvError : public Error {
 public:
  using Error::Error;
};

}  // namespace pdit
