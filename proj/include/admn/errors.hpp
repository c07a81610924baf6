#pragma once

#include <stdexcept>
#include <string>

namespace admn {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or undersized spatial inputs.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition (non-scalar loss, wrong mask length, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Layer budget that cannot be met exactly.
class BudgetError : public Error {
 public:
  using Error::Error;
};

// Index or value outside its admissible range.
class RangeError : public Error {
 public:
  using Error::Error;
};

// NaN or infinity produced by a forward op.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A runtime invariant (frozen parameters, exact budget) was violated.
class InvariantError : public Error {
 public:
  using Error::Error;
};

// Malformed or unreadable artifact on disk.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A required input artifact (dataset, checkpoint) does not exist.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace admn
