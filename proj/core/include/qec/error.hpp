#pragma once

#include <stdexcept>
#include <string>

namespace qec {

enum class ErrorCode {
  EmptyInput,
  AllZeroWeights,
  DegenerateSpectrum,
  NonOrthonormalInput,
  ShapeMismatch,
  AllZeroActivations,
  DegeneratePatch,
  DegenerateTangent,
  InsufficientPoints,
  ParseError,
  EmptyGeometry,
  ZeroArea,
  TooManyRequested,
  BadTarget,
  ZeroNormVector,
  InvalidArgument,
  IoError,
  NonFiniteLoss,
};

const char* to_string(ErrorCode code);

/// Library-wide exception. `code()` lets callers branch without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace qec
