// Error taxonomy shared across the library. The CLI maps these to exit
// codes: ConfigError -> 2, DataError -> 3, anything else -> 1.
#pragma once

#include <stdexcept>
#include <string>

namespace uasr {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace uasr
