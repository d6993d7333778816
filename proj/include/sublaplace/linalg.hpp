#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <span>
#include <vector>

namespace sublaplace {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Cholesky factorization with diagonal jitter escalation. On failure a jitter
// of 1e-10 * mean(diag) is added and multiplied by 10 until it exceeds
// 1e-4 * mean(diag), after which NumericError is thrown. `context` is included
// in the error message.
struct JitteredCholesky {
  Eigen::LLT<Matrix> llt;
  double jitter = 0.0;
};

JitteredCholesky cholesky_with_jitter(const Matrix& a, const char* context = "matrix");

// Gathers the listed columns of `m` into a dense column-major block.
Matrix gather_columns(const RowMatrix& m, std::span<const Index> cols);

Vector gather(const Vector& v, std::span<const Index> idx);

}  // namespace sublaplace
