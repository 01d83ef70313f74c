#include "qec/error.hpp"

namespace qec {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::AllZeroWeights: return "AllZeroWeights";
    case ErrorCode::DegenerateSpectrum: return "DegenerateSpectrum";
    case ErrorCode::NonOrthonormalInput: return "NonOrthonormalInput";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::AllZeroActivations: return "AllZeroActivations";
    case ErrorCode::DegeneratePatch: return "DegeneratePatch";
    case ErrorCode::DegenerateTangent: return "DegenerateTangent";
    case ErrorCode::InsufficientPoints: return "InsufficientPoints";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::EmptyGeometry: return "EmptyGeometry";
    case ErrorCode::ZeroArea: return "ZeroArea";
    case ErrorCode::TooManyRequested: return "TooManyRequested";
    case ErrorCode::BadTarget: return "BadTarget";
    case ErrorCode::ZeroNormVector: return "ZeroNormVector";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
  }
  return "Unknown";
}

}  // namespace qec
