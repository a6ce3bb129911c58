#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lrtp {

enum class ErrorCode {
  kShape,
  kRank,
  kInput,
  kParameter,
  kPlan,
  kCollective,
  kPartition,
  kCapacity,
  kPayload,
  kLookup,
  kReplay,
  kConfig,
  kReconciliation,
  kIo,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + " error: " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kRank: return "rank";
    case ErrorCode::kInput: return "input";
    case ErrorCode::kParameter: return "parameter";
    case ErrorCode::kPlan: return "plan";
    case ErrorCode::kCollective: return "collective";
    case ErrorCode::kPartition: return "partition";
    case ErrorCode::kCapacity: return "capacity";
    case ErrorCode::kPayload: return "payload";
    case ErrorCode::kLookup: return "lookup";
    case ErrorCode::kReplay: return "replay";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kReconciliation: return "reconciliation";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

}  // namespace lrtp
