#pragma once

#include <stdexcept>
#include <string>

namespace pixcon {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A forward operation produced NaN or Inf from finite inputs.
class NumericDomainError : public Error {
 public:
  using Error::Error;
};

/// A caller-side precondition was violated (invalid argument value).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// An internal contract between modules was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Every pixel was IGNORE, so there is nothing to build a bag or loss from.
class EmptyError : public Error {
 public:
  using Error::Error;
};

/// The batch contrastive loss found no anchor with at least one positive.
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (bad magic, header, truncated data).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Dataset manifest references files that do not exist.
class ManifestError : public Error {
 public:
  using Error::Error;
};

/// Optimizer received a non-finite gradient.
class NonFiniteGradientError : public Error {
 public:
  using Error::Error;
};

}  // namespace pixcon
