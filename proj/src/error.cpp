#include "atomo/error.hpp"

namespace atomo {

std::string_view kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid-argument";
    case ErrorKind::kConfig: return "config-error";
    case ErrorKind::kIo: return "io-error";
    case ErrorKind::kData: return "data-error";
    case ErrorKind::kAssembly: return "assembly-error";
    case ErrorKind::kStability: return "stability-error";
    case ErrorKind::kDivergence: return "divergence-error";
    case ErrorKind::kSingularPair: return "singular-pair";
    case ErrorKind::kUnderflow: return "underflow-error";
    case ErrorKind::kFit: return "fit-error";
    case ErrorKind::kBasis: return "basis-error";
    case ErrorKind::kCalibration: return "calibration-failure";
  }
  return "error";
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument:
    case ErrorKind::kConfig:
      return 2;
    case ErrorKind::kIo:
    case ErrorKind::kData:
      return 3;
    default:
      return 4;
  }
}

}  // namespace atomo
