#pragma once

#include <stdexcept>
#include <string>

namespace unifin {

/// Shape or dimension disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A documented precondition was violated by the caller.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Index outside the valid range (labels, token ids, node ids).
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// NaN or Inf produced or consumed at an op boundary.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input collection had no elements where at least one was required.
class EmptyInputError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Metric is undefined for the given input (e.g. AUC with a single class).
class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Serialized input carries an unsupported or malformed schema.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace unifin
