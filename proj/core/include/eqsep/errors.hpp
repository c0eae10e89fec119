#pragma once

#include <stdexcept>
#include <string>

namespace eqsep {

// Two roots: problems with inputs the caller supplied (bad files, bad shapes,
// bad configs) and numerical failures discovered while computing. The CLI
// maps them to exit codes 1 and 2 respectively.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UserError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// --- user errors -----------------------------------------------------------
class DimensionError : public UserError { using UserError::UserError; };
class FormatError : public UserError { using UserError::UserError; };
class LengthError : public UserError { using UserError::UserError; };
class LabelError : public UserError { using UserError::UserError; };
class SamplingError : public UserError { using UserError::UserError; };
class IndexError : public UserError { using UserError::UserError; };
class ConfigError : public UserError { using UserError::UserError; };
class IoError : public UserError { using UserError::UserError; };
class IntegrityError : public UserError { using UserError::UserError; };
class TransportError : public UserError { using UserError::UserError; };

// --- numerical errors ------------------------------------------------------
// Zero variance, fewer than two classes, no between-class signal, a
// batch-norm batch of one.
class DegenerateError : public NumericalError { using NumericalError::NumericalError; };
// log of a non-positive value, or division by a zero profile entry.
class DomainError : public NumericalError { using NumericalError::NumericalError; };
// Not enough points for a fit.
class InsufficientPointsError : public NumericalError { using NumericalError::NumericalError; };
// NaN/Inf encountered during training.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, int epoch)
      : NumericalError(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};
// Every grid point of a learning-rate sweep failed.
class SweepError : public NumericalError { using NumericalError::NumericalError; };

/// Call inside a catch block: rethrows the in-flight eqsep error as the same
/// type with `prefix` prepended to its message. Other exceptions pass through.
[[noreturn]] void rethrow_with_context(const std::string& prefix);

}  // namespace eqsep
