#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace clipin {

enum class ErrorCode {
  ShapeMismatch,
  ZeroNormRow,
  NotScalar,
  NonFiniteValue,
  NonFiniteLoss,
  TokenOutOfRange,
  PadOnlySequence,
  BatchTooSmall,
  NonPositiveTau,
  MissingComponent,
  OutOfRangePixels,
  MalformedRecord,
  EmptyDataset,
  DegenerateClass,
  EmptyPrompts,
  SingleClass,
  NoPositives,
  InvalidConfig,
  Io,
};

std::string_view to_string(ErrorCode code);

// Every failure the library reports carries one of the codes above so callers
// and tests can branch on the kind without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace clipin
