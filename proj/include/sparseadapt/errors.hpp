#pragma once

#include <stdexcept>
#include <string>

namespace sparseadapt {

/// Shape disagreement between operands. Messages always carry both shapes.
class DimensionError : public std::runtime_error {
public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid argument, config key, or precondition violation.
class InputError : public std::runtime_error {
public:
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite value produced where finite math is required.
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// File read/write failure, bad magic, version mismatch.
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sparseadapt
