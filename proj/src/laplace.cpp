#include "sublaplace/laplace.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sublaplace/error.hpp"

namespace sublaplace {

void LaplaceSystem::validate() const {
  if (prior_diag.size() != jacobian.cols()) throw ShapeError("prior_diag length must equal parameter count");
  if ((prior_diag.array() <= 0.0).any()) throw PreconditionError("prior_diag entries must be positive");
  if (!(noise_var > 0.0)) throw PreconditionError("noise variance must be positive");
}

LaplaceSystem system_from_gradients(RowMatrix gradients, const Vector& outputs, Likelihood likelihood,
                                    double noise_var, Vector prior_diag) {
  for (Index n = 0; n < gradients.rows(); ++n)
    if (!gradients.row(n).allFinite())
      throw NumericError("non-finite gradient at data point " + std::to_string(n));
  if (likelihood == Likelihood::Regression) {
    gradients /= std::sqrt(noise_var);
  } else {
    if (outputs.size() != gradients.rows()) throw ShapeError("need one network output per gradient row");
    for (Index n = 0; n < gradients.rows(); ++n) {
      const double p = sigmoid(outputs[n]);
      gradients.row(n) *= std::sqrt(p * (1.0 - p));
    }
  }
  LaplaceSystem sys{std::move(gradients), std::move(prior_diag), noise_var, likelihood};
  sys.validate();
  return sys;
}

LaplaceSystem build_system(const Mlp& model, const Matrix& x, Likelihood likelihood, double noise_var,
                           Vector prior_diag) {
  if (x.rows() == 0) throw PreconditionError("cannot build a Laplace system from an empty dataset");
  Vector outputs;
  if (likelihood == Likelihood::BinaryClassification) outputs = model.forward_batch(x);
  return system_from_gradients(jacobian(model, x), outputs, likelihood, noise_var, std::move(prior_diag));
}

Vector diag_precision(const LaplaceSystem& sys) {
  return sys.jacobian.colwise().squaredNorm().transpose() + sys.prior_diag;
}

Matrix dense_precision(const LaplaceSystem& sys) {
  Matrix omega = sys.jacobian.transpose() * sys.jacobian;
  omega.diagonal() += sys.prior_diag;
  return omega;
}

void validate_indices(std::span<const Index> indices, Index p) {
  if (indices.empty()) throw SelectionError("subset is empty");
  std::vector<char> seen(static_cast<std::size_t>(p), 0);
  for (Index i : indices) {
    if (i < 0 || i >= p) throw SelectionError("subset index " + std::to_string(i) + " out of range");
    if (seen[static_cast<std::size_t>(i)]) throw SelectionError("duplicate subset index " + std::to_string(i));
    seen[static_cast<std::size_t>(i)] = 1;
  }
}

namespace {

Matrix gram_plus_diag(const Matrix& cols, const Vector& diag) {
  const Index k = cols.cols();
  Matrix m = Matrix::Zero(k, k);
  m.selfadjointView<Eigen::Lower>().rankUpdate(cols.transpose());
  m.triangularView<Eigen::StrictlyUpper>() = m.transpose();
  m.diagonal() += diag;
  return m;
}

}  // namespace

Matrix subset_precision(const LaplaceSystem& sys, std::span<const Index> indices) {
  if (static_cast<Index>(indices.size()) > kMaxSubsetSize)
    throw CapacityError("subset of size " + std::to_string(indices.size()) + " exceeds the limit of " +
                        std::to_string(kMaxSubsetSize));
  validate_indices(indices, sys.num_params());
  return gram_plus_diag(gather_columns(sys.jacobian, indices), gather(sys.prior_diag, indices));
}

FullPosterior::FullPosterior(const LaplaceSystem& sys) : sys_(&sys) {
  sys.validate();
  prior_inv_ = sys.prior_diag.cwiseInverse();
  const RowMatrix scaled = sys.jacobian * prior_inv_.cwiseSqrt().asDiagonal();
  const Index n = sys.num_rows();
  Matrix kernel = Matrix::Identity(n, n);
  kernel.selfadjointView<Eigen::Lower>().rankUpdate(scaled);
  kernel.triangularView<Eigen::StrictlyUpper>() = kernel.transpose();
  kernel_ = cholesky_with_jitter(kernel, "the N x N Woodbury kernel");
}

PredictiveVariance FullPosterior::variance(const Vector& g) const {
  if (g.size() != sys_->num_params()) throw ShapeError("gradient length must equal parameter count");
  const Vector gt = prior_inv_.cwiseProduct(g);
  double epi = g.dot(gt);
  if (sys_->num_rows() > 0) {
    const Vector u = sys_->jacobian * gt;
    epi -= u.dot(kernel_.llt.solve(u));
  }
  epi = std::max(epi, 0.0);
  const double total = sys_->likelihood == Likelihood::Regression ? sys_->noise_var + epi : epi;
  return {epi, total};
}

SubsetPosterior::SubsetPosterior(std::vector<Index> indices, const Matrix& weighted_columns,
                                 const Vector& prior_sub, double noise_var, Likelihood likelihood)
    : indices_(std::move(indices)), noise_var_(noise_var), likelihood_(likelihood) {
  const Index k = static_cast<Index>(indices_.size());
  if (k > kMaxSubsetSize) throw CapacityError("subset exceeds the materialization limit");
  if (weighted_columns.cols() != k || prior_sub.size() != k)
    throw ShapeError("subset columns and prior must match the index count");
  precision_ = gram_plus_diag(weighted_columns, prior_sub);
  chol_ = cholesky_with_jitter(precision_, "the sub-network precision");
}

SubsetPosterior SubsetPosterior::from_system(const LaplaceSystem& sys, std::span<const Index> indices) {
  sys.validate();
  if (static_cast<Index>(indices.size()) > kMaxSubsetSize)
    throw CapacityError("subset of size " + std::to_string(indices.size()) + " exceeds the limit of " +
                        std::to_string(kMaxSubsetSize));
  validate_indices(indices, sys.num_params());
  return SubsetPosterior(std::vector<Index>(indices.begin(), indices.end()), gather_columns(sys.jacobian, indices),
                         gather(sys.prior_diag, indices), sys.noise_var, sys.likelihood);
}

PredictiveVariance SubsetPosterior::variance_restricted(const Vector& g_sub) const {
  if (g_sub.size() != static_cast<Index>(indices_.size())) throw ShapeError("restricted gradient has wrong length");
  const double epi = std::max(g_sub.dot(chol_.llt.solve(g_sub)), 0.0);
  const double total = likelihood_ == Likelihood::Regression ? noise_var_ + epi : epi;
  return {epi, total};
}

PredictiveVariance SubsetPosterior::variance(const Vector& g) const {
  return variance_restricted(gather(g, indices_));
}

PredictiveVariance full_predictive_variance(const LaplaceSystem& sys, const Vector& g) {
  return FullPosterior(sys).variance(g);
}

PredictiveVariance subset_predictive_variance(const LaplaceSystem& sys, std::span<const Index> indices,
                                              const Vector& g) {
  return SubsetPosterior::from_system(sys, indices).variance(g);
}

double plugin_noise_var(const Mlp& model, const Dataset& heldout, double floor) {
  if (heldout.size() == 0) throw PreconditionError("held-out set is empty");
  const Vector f = model.forward_batch(heldout.x);
  return std::max((f - heldout.y).squaredNorm() / static_cast<double>(heldout.size()), floor);
}

}  // namespace sublaplace
