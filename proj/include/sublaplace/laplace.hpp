#pragma once

#include <span>
#include <vector>

#include "sublaplace/data.hpp"
#include "sublaplace/linalg.hpp"
#include "sublaplace/net.hpp"

namespace sublaplace {

enum class Likelihood { Regression, BinaryClassification };

// Gauss-Newton Laplace precision held implicitly as Omega = J^T J + diag(prior_diag).
// For Regression row n of J is g(x_n) / sigma0; for BinaryClassification it is
// sqrt(p_n (1 - p_n)) g(x_n) with p_n = sigmoid(f(x_n)).
struct LaplaceSystem {
  RowMatrix jacobian;
  Vector prior_diag;
  double noise_var = 1.0;
  Likelihood likelihood = Likelihood::Regression;

  Index num_params() const { return jacobian.cols(); }
  Index num_rows() const { return jacobian.rows(); }
  void validate() const;
};

struct PredictiveVariance {
  double epistemic = 0.0;  // g^T Omega^{-1} g (or its sub-network surrogate)
  double total = 0.0;      // noise_var + epistemic for Regression, epistemic for classification
};

// Largest subset whose k x k precision block is materialized.
inline constexpr Index kMaxSubsetSize = 20000;

// Applies the likelihood-specific row weights to raw per-sample gradients.
// `outputs` (network values at the samples) is only read for classification.
LaplaceSystem system_from_gradients(RowMatrix gradients, const Vector& outputs, Likelihood likelihood,
                                    double noise_var, Vector prior_diag);

LaplaceSystem build_system(const Mlp& model, const Matrix& x, Likelihood likelihood, double noise_var,
                           Vector prior_diag);

inline Vector default_prior(Index p, double alpha = 1.0) { return Vector::Constant(p, alpha); }

// diag(Omega) without forming Omega.
Vector diag_precision(const LaplaceSystem& sys);

// Dense p x p Omega; for small systems and test oracles.
Matrix dense_precision(const LaplaceSystem& sys);

// Omega restricted to `indices` (symmetric by construction).
Matrix subset_precision(const LaplaceSystem& sys, std::span<const Index> indices);

// Throws SelectionError on an empty list, duplicates or out-of-range entries.
void validate_indices(std::span<const Index> indices, Index p);

// Woodbury form of the full posterior: factorizes the N x N kernel
// I + J V^{-1} J^T once, then answers variance queries in O(Np + N^2).
// The system must outlive the posterior.
class FullPosterior {
 public:
  explicit FullPosterior(const LaplaceSystem& sys);
  PredictiveVariance variance(const Vector& g) const;

 private:
  const LaplaceSystem* sys_;
  Vector prior_inv_;
  JitteredCholesky kernel_;
};

// Sub-network posterior: Omega_SS factorized once. Equivalent to applying
// the pseudoinverse of the zero-padded [Omega_SS]^0.
class SubsetPosterior {
 public:
  // `weighted_columns` is J restricted to `indices` (N x k, rows already weighted).
  SubsetPosterior(std::vector<Index> indices, const Matrix& weighted_columns, const Vector& prior_sub,
                  double noise_var, Likelihood likelihood);
  static SubsetPosterior from_system(const LaplaceSystem& sys, std::span<const Index> indices);

  // `g` is the full-length gradient.
  PredictiveVariance variance(const Vector& g) const;
  PredictiveVariance variance_restricted(const Vector& g_sub) const;

  const std::vector<Index>& indices() const noexcept { return indices_; }
  const Matrix& precision() const noexcept { return precision_; }
  double noise_var() const noexcept { return noise_var_; }

 private:
  std::vector<Index> indices_;
  Matrix precision_;
  JitteredCholesky chol_;
  double noise_var_;
  Likelihood likelihood_;
};

PredictiveVariance full_predictive_variance(const LaplaceSystem& sys, const Vector& g);
PredictiveVariance subset_predictive_variance(const LaplaceSystem& sys, std::span<const Index> indices,
                                              const Vector& g);

// Residual mean squared error of `model` on held-out data, floored at `floor`.
double plugin_noise_var(const Mlp& model, const Dataset& heldout, double floor = 1e-3);

}  // namespace sublaplace
