#include "physs/linalg.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <sstream>

namespace physs {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::Unsupported: return "Unsupported";
    case ErrorCode::OrderExceedsSmoothness: return "OrderExceedsSmoothness";
    case ErrorCode::InsufficientDerivativeOrders: return "InsufficientDerivativeOrders";
    case ErrorCode::DuplicateSpatialLocation: return "DuplicateSpatialLocation";
    case ErrorCode::GramNotPSD: return "GramNotPSD";
    case ErrorCode::InnovationNotPSD: return "InnovationNotPSD";
    case ErrorCode::SitePrecisionNotPSD: return "SitePrecisionNotPSD";
    case ErrorCode::SingularGram: return "SingularGram";
    case ErrorCode::QuadratureOverflow: return "QuadratureOverflow";
    case ErrorCode::NonFiniteLikelihood: return "NonFiniteLikelihood";
    case ErrorCode::OracleTooLarge: return "OracleTooLarge";
    case ErrorCode::QueryOutsideSpatialModel: return "QueryOutsideSpatialModel";
    case ErrorCode::Diverged: return "Diverged";
    case ErrorCode::MalformedRow: return "MalformedRow";
    case ErrorCode::NonGriddableData: return "NonGriddableData";
    case ErrorCode::SingularPoint: return "SingularPoint";
    case ErrorCode::ZeroVariancePrediction: return "ZeroVariancePrediction";
    case ErrorCode::Config: return "Config";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

Eigen::LLT<Matrix> robust_cholesky(const Matrix& m, double jitter, ErrorCode code, int attempts) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() == Eigen::Success) return llt;
  const double scale = std::max(1.0, m.diagonal().cwiseAbs().maxCoeff());
  double eps = jitter * scale;
  for (int i = 0; i < attempts; ++i, eps *= 10.0) {
    Matrix shifted = m;
    shifted.diagonal().array() += eps;
    llt.compute(shifted);
    if (llt.info() == Eigen::Success) return llt;
  }
  std::ostringstream msg;
  msg << "Cholesky factorization failed for a " << m.rows() << "x" << m.cols()
      << " matrix after jitter up to " << eps / 10.0;
  throw Error(code, msg.str());
}

double log_det(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

Matrix psd_factor(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()));
  Vector ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal();
}

double min_eigenvalue(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

Matrix expm(const Matrix& m) { return m.exp(); }

Matrix take(const Matrix& m, const IndexList& rows, const IndexList& cols) {
  Matrix out(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j)
    for (std::size_t i = 0; i < rows.size(); ++i) out(i, j) = m(rows[i], cols[j]);
  return out;
}

Vector take(const Vector& v, const IndexList& idx) {
  Vector out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(i) = v(idx[i]);
  return out;
}

}  // namespace physs
