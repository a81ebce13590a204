#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace protofed {

// Base for every error raised by the library. The CLI maps subclasses onto
// exit codes: validation problems (config, data, format) exit 1, everything
// else exits 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid shapes, extents, or configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent training data (bad labels, empty classes).
class DataError : public Error {
 public:
  using Error::Error;
};

// Corrupted or mismatched parameter exchange between clients and server.
class ProtocolError : public Error {
 public:
  ProtocolError(const std::string& what, std::size_t offset = 0)
      : Error(what), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Malformed file content; carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Non-finite values or failed numeric checks at runtime.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace protofed
