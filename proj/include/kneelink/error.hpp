#ifndef KNEELINK_ERROR_HPP
#define KNEELINK_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace kneelink {

// Machine-readable failure categories shared by every module and surfaced
// verbatim by the control API.
enum class ErrorCode {
  DegenerateOrientation,
  Timing,
  Input,
  Usage,
  InsufficientData,
  Configuration,
  Framing,
  Conformance,
  State,
  Export,
  Shutdown,
  NotFound,
};

inline std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::DegenerateOrientation: return "degenerate_orientation";
    case ErrorCode::Timing: return "timing_error";
    case ErrorCode::Input: return "input_error";
    case ErrorCode::Usage: return "usage_error";
    case ErrorCode::InsufficientData: return "insufficient_data";
    case ErrorCode::Configuration: return "configuration_error";
    case ErrorCode::Framing: return "framing_error";
    case ErrorCode::Conformance: return "conformance_error";
    case ErrorCode::State: return "state_error";
    case ErrorCode::Export: return "export_error";
    case ErrorCode::Shutdown: return "shutdown_error";
    case ErrorCode::NotFound: return "not_found";
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

}  // namespace kneelink

#endif  // KNEELINK_ERROR_HPP
