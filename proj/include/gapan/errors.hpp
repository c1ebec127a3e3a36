#pragma once

#include <stdexcept>
#include <string>

namespace gapan {

// Base of every error raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct ArgumentError : Error {
  using Error::Error;
};

// Zero-norm embedding handed to a similarity computation.
struct DegenerateEmbeddingError : Error {
  using Error::Error;
};

// Malformed feature or checkpoint file; carries the byte offset of the fault.
struct FormatError : Error {
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset(offset) {}
  std::size_t offset;
};

struct DatasetError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace gapan
