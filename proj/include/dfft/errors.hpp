#pragma once

#include <stdexcept>
#include <string>

namespace dfft {

// Shape/stride violations detected at op boundaries.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

// A tensor axis fails a divisibility or size constraint; message names the axis.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

// Invalid configuration values (head counts, window sizes, k, schedule, ...).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Invalid runtime values (degenerate boxes, non-finite inputs, ...).
struct ValueError : std::runtime_error {
  explicit ValueError(const std::string& msg) : std::runtime_error("value error: " + msg) {}
};

// Parameter store misuse: duplicate names, missing lookups, mutation after freeze.
struct StoreError : std::runtime_error {
  explicit StoreError(const std::string& msg) : std::runtime_error("param store error: " + msg) {}
};

// File system failures.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

// Malformed config files, annotation files or checkpoints.
struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& msg) : std::runtime_error("parse error: " + msg) {}
};

}  // namespace dfft
