#pragma once

#include <stdexcept>
#include <string>

namespace istdkd {

// Error taxonomy. Each class maps to a process exit code in tools/main.cpp:
// config -> 2, data/io/state/shape/domain -> 3, numeric -> 4.

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};

struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& m) : std::runtime_error(m) {}
};

struct StateError : std::runtime_error {
  explicit StateError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

struct ProviderError : std::runtime_error {
  explicit ProviderError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace istdkd
