#pragma once

#include <stdexcept>

namespace etide {

/// File could not be opened, read, or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File contents violate the expected format (bad magic, truncation, bad values).
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace etide
