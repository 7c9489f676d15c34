#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bedkit {

enum class ErrorCode {
  kNotSymmetric,
  kNotPDAfterMaxJitter,
  kSingularBlock,
  kEmptyInput,
  kDimensionMismatch,
  kSingularSystem,
  kAllWeightsZero,
  kDegenerateWeights,
  kInvalidConfig,
  kAllZero,
  kTooFewReplicates,
  kInsufficientInnerSamples,
  kInvalidBudget,
  kIoError,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), message_(what) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }
  /// The text without the code prefix.
  [[nodiscard]] const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

}  // namespace bedkit
