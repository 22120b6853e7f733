#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace physs {

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  Unsupported,
  OrderExceedsSmoothness,
  InsufficientDerivativeOrders,
  DuplicateSpatialLocation,
  GramNotPSD,
  InnovationNotPSD,
  SitePrecisionNotPSD,
  SingularGram,
  QuadratureOverflow,
  NonFiniteLikelihood,
  OracleTooLarge,
  QueryOutsideSpatialModel,
  Diverged,
  MalformedRow,
  NonGriddableData,
  SingularPoint,
  ZeroVariancePrediction,
  Config,
  Io,
};

std::string_view error_code_name(ErrorCode code) noexcept;

// Every failure in the library is reported through this type; the C API maps
// the code onto its status enum.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace physs
