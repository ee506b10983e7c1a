#pragma once

#include <stdexcept>
#include <string>

namespace attex {

// Error taxonomy used across the library. The CLI maps ConfigError/PathError
// to exit code 2 and everything else to exit code 3.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

class PathError : public std::runtime_error {
 public:
  explicit PathError(const std::string& msg) : std::runtime_error("path error: " + msg) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

}  // namespace attex
