#pragma once

#include <stdexcept>
#include <string>

namespace robomamba {

// Base of every error raised by the library. The CLI maps subclasses onto
// exit codes, so new failure kinds should derive from one of these.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents that do not conform to an operation's signature.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, optimizer blow-ups and domain violations.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed datasets, manifests, configs and file contents.
class DataError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures (missing file, unwritable path).
class IoError : public Error {
 public:
  using Error::Error;
};

enum class CheckpointErrorCode {
  io,
  bad_magic,
  bad_version,
  truncated,
  bad_dtype,
  bad_config,
  mismatch,
};

const char* to_string(CheckpointErrorCode code);

class CheckpointError : public DataError {
 public:
  CheckpointError(CheckpointErrorCode code, const std::string& what)
      : DataError(std::string(to_string(code)) + ": " + what), code_(code) {}

  CheckpointErrorCode code() const noexcept { return code_; }

 private:
  CheckpointErrorCode code_;
};

}  // namespace robomamba
