#pragma once

#include <stdexcept>
#include <string>

namespace dahcrf {

// Configuration problems (bad config file, invalid field combinations).
// The CLI maps these to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Data problems (unparseable corpus lines, missing files, label mismatches).
// The CLI maps these to exit code 3.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape violations; the message names the offending shapes.
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

}  // namespace dahcrf
