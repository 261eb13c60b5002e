#pragma once

#include <stdexcept>
#include <string>

namespace cntlora {

enum class ErrorCode {
  ShapeMismatch,
  NonFinite,
  IterationLimit,
  NotSquare,
  BadConfig,
  Io,
  BadMagic,
  VersionMismatch,
  TruncatedFile,
  RankTooLarge,
  MissingActivations,
  BudgetInfeasible,
  Diverged,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::IterationLimit: return "IterationLimit";
    case ErrorCode::NotSquare: return "NotSquare";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::Io: return "Io";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::RankTooLarge: return "RankTooLarge";
    case ErrorCode::MissingActivations: return "MissingActivations";
    case ErrorCode::BudgetInfeasible: return "BudgetInfeasible";
    case ErrorCode::Diverged: return "Diverged";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cntlora
