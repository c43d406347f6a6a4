#pragma once

#include <stdexcept>
#include <string>

namespace mmseg {

/// Base of every error the library throws. `exit_code()` is the CLI status it maps to.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return 2; }
};

class UsageError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 1; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 3; }
};

class IoError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrc {
  bad_magic,
  truncated,
  unknown_dtype,
  version_mismatch,
  name_collision,
  trailing_data,
  invalid_content,
  config_mismatch,
};

inline const char* to_string(FormatErrc code) {
  switch (code) {
    case FormatErrc::bad_magic: return "bad magic";
    case FormatErrc::truncated: return "truncated payload";
    case FormatErrc::unknown_dtype: return "unknown dtype";
    case FormatErrc::version_mismatch: return "version mismatch";
    case FormatErrc::name_collision: return "name collision";
    case FormatErrc::trailing_data: return "trailing data";
    case FormatErrc::invalid_content: return "invalid content";
    case FormatErrc::config_mismatch: return "checkpoint/config mismatch";
  }
  return "format error";
}

class FormatError : public Error {
 public:
  FormatError(FormatErrc code, const std::string& detail)
      : Error(std::string(to_string(code)) + ": " + detail), code_(code) {}
  FormatErrc code() const { return code_; }

 private:
  FormatErrc code_;
};

}  // namespace mmseg
