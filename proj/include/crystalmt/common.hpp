#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace crystalmt {

inline constexpr const char* kVersion = "0.1.0";

// Root of the library's exception hierarchy. Callers that don't care about
// the kind can catch this one.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor/parameter shape mismatches. Messages name both shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by a numeric op; message names the op.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed input documents (structure JSON, targets.csv, configs, ...).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Invalid argument values or violated call contracts.
class ValueError : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failures.
class IoError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace crystalmt
