#pragma once

#include <stdexcept>
#include <string>

namespace trace {

// Error taxonomy used across the library. The CLI maps these onto exit
// codes: UsageError/ParamError -> 2, FormatError -> 3, NumericalError -> 4.

// Operand shapes are incompatible (messages name both shapes).
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// A scalar argument is outside its valid range (temperature <= 0, ...).
class ParamError : public std::invalid_argument {
 public:
  explicit ParamError(const std::string& what) : std::invalid_argument(what) {}
};

// The caller violated an API contract (non-scalar loss, empty pool, ...).
class UsageError : public std::invalid_argument {
 public:
  explicit UsageError(const std::string& what) : std::invalid_argument(what) {}
};

// Numerically degenerate input (near-zero vector fed to normalize, ...).
class DegenerateInputError : public std::domain_error {
 public:
  explicit DegenerateInputError(const std::string& what) : std::domain_error(what) {}
};

// A file or stream does not conform to its documented format.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// A computation produced non-finite values or failed a numerical check.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace trace
