#pragma once

#include <stdexcept>
#include <string>

namespace scalegrpo {

// Precondition violated by a caller-supplied argument.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite loss, overflowing exponent, or similar.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operation invoked on an object that is not ready for it (e.g. missing advantages).
class InvalidState : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Remote reward could not be obtained; the training iteration must be aborted.
class RewardUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Remote scorer answered with something that does not follow the wire schema.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Configuration document rejected; message names the offending path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint file unreadable or of an unknown format version.
class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& what, bool unknown_version = false)
      : std::runtime_error(what), unknown_version_(unknown_version) {}
  bool unknown_version() const noexcept { return unknown_version_; }

 private:
  bool unknown_version_;
};

}  // namespace scalegrpo
