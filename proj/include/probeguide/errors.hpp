#pragma once

#include <stdexcept>
#include <string>

namespace probeguide {

/// Invalid or inconsistent configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unreadable, missing or inconsistent data (CLI exit code 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or parameters during training (CLI exit code 4).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingFileError : public DataError {
 public:
  explicit MissingFileError(const std::string& what) : DataError("missing file: " + what) {}
};

class MalformedPoseTableError : public DataError {
 public:
  explicit MalformedPoseTableError(const std::string& what) : DataError("malformed pose table: " + what) {}
};

class DanglingAnnotationError : public DataError {
 public:
  explicit DanglingAnnotationError(const std::string& what) : DataError("dangling annotation: " + what) {}
};

class MalformedMetadataError : public DataError {
 public:
  explicit MalformedMetadataError(const std::string& what) : DataError("malformed metadata: " + what) {}
};

class MalformedReportError : public DataError {
 public:
  explicit MalformedReportError(const std::string& what) : DataError("malformed report: " + what) {}
};

}  // namespace probeguide
