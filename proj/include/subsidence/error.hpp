#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace subsidence {

/// Error categories surfaced by every module. The CLI maps each category to
/// a stable exit code and prints the category name on stderr.
enum class ErrorCode {
  // climate_indices
  EmptySeries,
  InvalidSeries,
  ReferencePeriodNotCovered,
  DegenerateSample,
  NonConvergence,
  MissingStandardizer,
  IncompleteYear,
  // ingest
  MissingCell,
  IncompleteCoverage,
  SchemaError,
  DuplicateKey,
  InvariantViolation,
  // glm_engine / zero_inflated
  SingularDesign,
  BadResponse,
  DimensionMismatch,
  PowerOutOfRange,
  QuasiLikelihoodOnly,
  InvalidParam,
  BoundaryEstimate,
  // poisson_forest
  NoValidSplit,
  // cost_models
  ModelIncompatible,
  MissingModel,
  // validation
  InsufficientHistory,
  UnassignedTown,
  KeyMismatch,
  NoValidationFold,
  // synthetic
  InvalidConfig,
  // plumbing
  IoError,
  UsageError,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::EmptySeries: return "EmptySeries";
    case ErrorCode::InvalidSeries: return "InvalidSeries";
    case ErrorCode::ReferencePeriodNotCovered: return "ReferencePeriodNotCovered";
    case ErrorCode::DegenerateSample: return "DegenerateSample";
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::MissingStandardizer: return "MissingStandardizer";
    case ErrorCode::IncompleteYear: return "IncompleteYear";
    case ErrorCode::MissingCell: return "MissingCell";
    case ErrorCode::IncompleteCoverage: return "IncompleteCoverage";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::DuplicateKey: return "DuplicateKey";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::SingularDesign: return "SingularDesign";
    case ErrorCode::BadResponse: return "BadResponse";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::PowerOutOfRange: return "PowerOutOfRange";
    case ErrorCode::QuasiLikelihoodOnly: return "QuasiLikelihoodOnly";
    case ErrorCode::InvalidParam: return "InvalidParam";
    case ErrorCode::BoundaryEstimate: return "BoundaryEstimate";
    case ErrorCode::NoValidSplit: return "NoValidSplit";
    case ErrorCode::ModelIncompatible: return "ModelIncompatible";
    case ErrorCode::MissingModel: return "MissingModel";
    case ErrorCode::InsufficientHistory: return "InsufficientHistory";
    case ErrorCode::UnassignedTown: return "UnassignedTown";
    case ErrorCode::KeyMismatch: return "KeyMismatch";
    case ErrorCode::NoValidationFold: return "NoValidationFold";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::UsageError: return "UsageError";
  }
  return "Unknown";
}

/// Coarse error classes reported by the command-line front end.
enum class ErrorCategory { Usage, Schema, Data, Numerical, Io };

constexpr ErrorCategory category(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::UsageError: return ErrorCategory::Usage;
    case ErrorCode::SchemaError:
    case ErrorCode::DuplicateKey:
    case ErrorCode::MissingCell:
    case ErrorCode::IncompleteCoverage:
    case ErrorCode::InvalidConfig:
    case ErrorCode::ModelIncompatible: return ErrorCategory::Schema;
    case ErrorCode::NonConvergence:
    case ErrorCode::SingularDesign:
    case ErrorCode::BoundaryEstimate:
    case ErrorCode::DegenerateSample:
    case ErrorCode::NoValidSplit:
    case ErrorCode::MissingStandardizer: return ErrorCategory::Numerical;
    case ErrorCode::IoError: return ErrorCategory::Io;
    default: return ErrorCategory::Data;
  }
}

constexpr std::string_view to_string(ErrorCategory c) noexcept {
  switch (c) {
    case ErrorCategory::Usage: return "usage";
    case ErrorCategory::Schema: return "schema";
    case ErrorCategory::Data: return "data";
    case ErrorCategory::Numerical: return "numerical";
    case ErrorCategory::Io: return "io";
  }
  return "unknown";
}

/// Process exit status: usage 2, schema 3, data 4, numerical 5, io 6.
constexpr int exit_code(ErrorCategory c) noexcept { return 2 + static_cast<int>(c); }

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) fail(code, what);
}

}  // namespace subsidence
