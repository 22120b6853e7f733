#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <vector>

#include "physs/error.hpp"

namespace physs {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;
using IndexList = std::vector<Index>;

inline void symmetrize(Matrix& m) { m = 0.5 * (m + m.transpose()).eval(); }

/// Cholesky factor of a symmetric matrix, retrying with growing diagonal
/// jitter (starting at `jitter`, x10 per attempt, at most `attempts` times).
/// Throws Error(code) when every attempt fails.
Eigen::LLT<Matrix> robust_cholesky(const Matrix& m, double jitter, ErrorCode code,
                                   int attempts = 6);

/// log|M| from a Cholesky factorization.
double log_det(const Eigen::LLT<Matrix>& llt);

/// Symmetric square root factor L with L L^T = M, negative eigenvalues clipped.
Matrix psd_factor(const Matrix& m);

/// Smallest eigenvalue of a symmetric matrix.
double min_eigenvalue(const Matrix& m);

/// Matrix exponential (scaling and squaring, Pade 13).
Matrix expm(const Matrix& m);

/// Gathers rows/cols of `m` listed in `idx`.
Matrix take(const Matrix& m, const IndexList& rows, const IndexList& cols);
Vector take(const Vector& v, const IndexList& idx);

constexpr double kLog2Pi = 1.8378770664093454836;

}  // namespace physs
