#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pairguard {

enum class ErrorCode {
  ZeroNorm,
  BadMagic,
  TruncatedPayload,
  LabelCountMismatch,
  DimMismatch,
  RowCountMismatch,
  SingularSystem,
  NotNormalized,
  DegenerateSVD,
  NotARotation,
  ShapeMismatch,
  BadGeometry,
  ImpostorAbsent,
  UnknownIdentity,
  EmptyGallery,
  EmptyScores,
  BadTarget,
  UnknownTarget,
  InvalidArgument,
  ConfigError,
  IoError,
  ReproMismatch,
};

inline constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::ZeroNorm: return "ZeroNorm";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::LabelCountMismatch: return "LabelCountMismatch";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::RowCountMismatch: return "RowCountMismatch";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::NotNormalized: return "NotNormalized";
    case ErrorCode::DegenerateSVD: return "DegenerateSVD";
    case ErrorCode::NotARotation: return "NotARotation";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::BadGeometry: return "BadGeometry";
    case ErrorCode::ImpostorAbsent: return "ImpostorAbsent";
    case ErrorCode::UnknownIdentity: return "UnknownIdentity";
    case ErrorCode::EmptyGallery: return "EmptyGallery";
    case ErrorCode::EmptyScores: return "EmptyScores";
    case ErrorCode::BadTarget: return "BadTarget";
    case ErrorCode::UnknownTarget: return "UnknownTarget";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ReproMismatch: return "ReproMismatch";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI's JSON error line) can dispatch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace pairguard
