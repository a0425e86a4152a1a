#ifndef CRVKIT_ERROR_HPP
#define CRVKIT_ERROR_HPP

#include <stdexcept>
#include <string>

namespace crvkit {

enum class ErrorCode {
  InvalidInput,
  NotPSD,
  NotPD,
  ConfigError,
  DataError,
  Underdetermined,
  CollinearFocal,
  ClusterIdentification,
  ShortcutInvalid,
  DegenerateVariance,
  DegreesOfFreedomTooSmall,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidInput: return "InvalidInput";
    case ErrorCode::NotPSD: return "NotPSD";
    case ErrorCode::NotPD: return "NotPD";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::DataError: return "DataError";
    case ErrorCode::Underdetermined: return "Underdetermined";
    case ErrorCode::CollinearFocal: return "CollinearFocal";
    case ErrorCode::ClusterIdentification: return "ClusterIdentification";
    case ErrorCode::ShortcutInvalid: return "ShortcutInvalid";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::DegreesOfFreedomTooSmall: return "DegreesOfFreedomTooSmall";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// CLI exit codes: 0 ok, 2 config, 3 data, 4 numerical failure.
inline int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::ConfigError: return 2;
    case ErrorCode::DataError: return 3;
    default: return 4;
  }
}

}  // namespace crvkit

#endif
