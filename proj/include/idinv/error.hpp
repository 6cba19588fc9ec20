#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace idinv {

enum class ErrorKind {
  kInvalidArgument,
  kDegenerateMask,
  kTrainingFailure,
  kInversionFailure,
  kMetricFailure,
  kNotFound,
  kCorruption,
  kUnsupportedVersion,
  kDecode,
};

inline const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid-argument";
    case ErrorKind::kDegenerateMask: return "degenerate-mask";
    case ErrorKind::kTrainingFailure: return "training-failure";
    case ErrorKind::kInversionFailure: return "inversion-failure";
    case ErrorKind::kMetricFailure: return "metric-failure";
    case ErrorKind::kNotFound: return "not-found";
    case ErrorKind::kCorruption: return "corruption";
    case ErrorKind::kUnsupportedVersion: return "unsupported-version";
    case ErrorKind::kDecode: return "decode-error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message), kind_(kind), message_(message) {}

  ErrorKind kind() const { return kind_; }
  /// what() without the kind prefix.
  const std::string& message() const { return message_; }

 private:
  ErrorKind kind_;
  std::string message_;
};

/// Raised by optimisation loops; carries the step at which the loss went non-finite.
class StepFailure : public Error {
 public:
  StepFailure(ErrorKind kind, long step, const std::string& message, std::vector<double> tail = {})
      : Error(kind, message + " (step " + std::to_string(step) + ")"), step_(step), tail_(std::move(tail)) {}

  long step() const { return step_; }
  /// Last objective values recorded before the failure, oldest first.
  const std::vector<double>& tail() const { return tail_; }

 private:
  long step_;
  std::vector<double> tail_;
};

#define IDINV_REQUIRE(cond, msg)                                          \
  do {                                                                    \
    if (!(cond)) throw ::idinv::Error(::idinv::ErrorKind::kInvalidArgument, (msg)); \
  } while (0)

}  // namespace idinv
