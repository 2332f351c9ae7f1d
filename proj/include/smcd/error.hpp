#pragma once

#include <stdexcept>
#include <string>

namespace smcd {

// Every failure surfaced by the library derives from Error. kind() is the
// machine-readable class printed by the CLI, exit_code() the process status.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept = 0;
  virtual int exit_code() const noexcept = 0;
};

// Bad user-facing input: malformed JSON, schema violations.
class ValidationError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "validation_error"; }
  int exit_code() const noexcept override { return 2; }
};

// Inconsistent or out-of-range configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config_error"; }
  int exit_code() const noexcept override { return 3; }
};

// Tensor shapes that do not line up (including checkpoint vs config).
class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape_error"; }
  int exit_code() const noexcept override { return 3; }
};

// A training stage was requested without the checkpoint of the stage before.
class PrerequisiteError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "prerequisite_error"; }
  int exit_code() const noexcept override { return 3; }
};

// Violated preconditions on library calls.
class ContractViolation : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "contract_violation"; }
  int exit_code() const noexcept override { return 3; }
};

// Loss or activations went non-finite during training.
class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric_error"; }
  int exit_code() const noexcept override { return 3; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io_error"; }
  int exit_code() const noexcept override { return 4; }
};

#define SMCD_REQUIRE(cond, ErrorType, msg)   \
  do {                                        \
    if (!(cond)) throw ErrorType(msg);        \
  } while (0)

}  // namespace smcd
