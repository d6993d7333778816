#include "sublaplace/linalg.hpp"

#include <string>

#include "sublaplace/error.hpp"

namespace sublaplace {

JitteredCholesky cholesky_with_jitter(const Matrix& a, const char* context) {
  JitteredCholesky out;
  out.llt.compute(a);
  if (out.llt.info() == Eigen::Success) return out;

  const Index n = a.rows();
  double mean_diag = n > 0 ? a.diagonal().mean() : 1.0;
  if (!(mean_diag > 0.0)) mean_diag = 1.0;
  for (double rel = 1e-10; rel <= 1e-4 * (1.0 + 1e-12); rel *= 10.0) {
    Matrix shifted = a;
    shifted.diagonal().array() += rel * mean_diag;
    out.llt.compute(shifted);
    if (out.llt.info() == Eigen::Success) {
      out.jitter = rel * mean_diag;
      return out;
    }
  }
  throw NumericError(std::string("Cholesky factorization of ") + context +
                     " failed after jitter escalation to 1e-4");
}

Matrix gather_columns(const RowMatrix& m, std::span<const Index> cols) {
  Matrix out(m.rows(), static_cast<Index>(cols.size()));
  for (Index r = 0; r < m.rows(); ++r) {
    const double* row = m.row(r).data();
    for (std::size_t c = 0; c < cols.size(); ++c) out(r, static_cast<Index>(c)) = row[cols[c]];
  }
  return out;
}

Vector gather(const Vector& v, std::span<const Index> idx) {
  Vector out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Index>(i)] = v[idx[i]];
  return out;
}

}  // namespace sublaplace
