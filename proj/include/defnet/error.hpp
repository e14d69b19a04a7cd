#pragma once

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>

namespace defnet {

// Exit codes of the command line tool map 1:1 onto these.
enum class ErrorCode : int {
  kInvalidArgument = 2,
  kShapeMismatch = 3,
  kNonFinite = 4,
  kMalformedFile = 5,
  kVersionMismatch = 6,
  kMissingFile = 7,
  kSchemaViolation = 8,
  kUnknownFlag = 9,
  kIo = 10,
  kGeometry = 11,
  kCheckFailed = 12,
};

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kMalformedFile: return "malformed_file";
    case ErrorCode::kVersionMismatch: return "version_mismatch";
    case ErrorCode::kMissingFile: return "missing_file";
    case ErrorCode::kSchemaViolation: return "schema_violation";
    case ErrorCode::kUnknownFlag: return "unknown_flag";
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kGeometry: return "geometry";
    case ErrorCode::kCheckFailed: return "check_failed";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

/// Non-fatal diagnostics go through a replaceable sink (stderr by default).
inline std::function<void(const std::string&)>& warning_sink() {
  static std::function<void(const std::string&)> sink = [](const std::string& m) {
    std::cerr << "warning: " << m << '\n';
  };
  return sink;
}

inline void warn(const std::string& message) { warning_sink()(message); }

}  // namespace defnet
