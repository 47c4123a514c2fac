#pragma once

#include <stdexcept>
#include <string>

namespace nmt {

// Process exit codes used by the command-line tool.
enum class ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string &what) : std::runtime_error(what) {}
  virtual ExitCode exit_code() const { return ExitCode::kUsage; }
};

// Caller misuse: bad arguments, unknown language, wrong protocol.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed or incomplete configuration file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor extents that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Problems with input files: missing paths, misalignment, bad UTF-8.
class DataError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kData; }
};

class AlignmentError : public DataError {
 public:
  using DataError::DataError;
};

class EncodingError : public DataError {
 public:
  using DataError::DataError;
};

// NaN/inf showing up where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kNumeric; }
};

}  // namespace nmt
