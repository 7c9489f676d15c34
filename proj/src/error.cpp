#include "bedkit/error.hpp"

namespace bedkit {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kNotSymmetric: return "NotSymmetric";
    case ErrorCode::kNotPDAfterMaxJitter: return "NotPDAfterMaxJitter";
    case ErrorCode::kSingularBlock: return "SingularBlock";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kSingularSystem: return "SingularSystem";
    case ErrorCode::kAllWeightsZero: return "AllWeightsZero";
    case ErrorCode::kDegenerateWeights: return "DegenerateWeights";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kAllZero: return "AllZero";
    case ErrorCode::kTooFewReplicates: return "TooFewReplicates";
    case ErrorCode::kInsufficientInnerSamples: return "InsufficientInnerSamples";
    case ErrorCode::kInvalidBudget: return "InvalidBudget";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace bedkit
