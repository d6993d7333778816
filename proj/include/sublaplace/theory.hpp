#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sublaplace/linalg.hpp"

namespace sublaplace {

// Population quantities behind the idealized predictive variance.
struct IpvInstance {
  Matrix lambda;     // p x p symmetric PSD second moment of the gradients
  Vector prior_diag; // diagonal of V, positive
  double noise_var = 1.0;
  double n = 1.0;    // training-set size N

  Index dim() const { return lambda.rows(); }
  void validate() const;
};

// (sigma0^2 / N) tr((Lambda_SS + (sigma0^2 / N) V_SS)^{-1} Lambda_SS)
double ipv(const IpvInstance& inst, std::span<const Index> subset);
double ipv_full(const IpvInstance& inst);
// ipv_full - ipv(S); throws NumericError if this is negative beyond 1e-10.
double dis(const IpvInstance& inst, std::span<const Index> subset);

// Classification form with a supplied weighted cross moment:
// (1/N) tr((LambdaC_SS + V_SS / N)^{-1} M_SS).
struct ClassificationIpvInstance {
  Matrix lambda_c;
  Matrix cross_moment;
  Vector prior_diag;
  double n = 1.0;

  Index dim() const { return lambda_c.rows(); }
};

double ipv_classification(const ClassificationIpvInstance& inst, std::span<const Index> subset);

// Empirical estimator: LambdaC = mean_i u_i g_i g_i^T over (gradients, weights)
// and M = the same average over the evaluation sample. Passing the same
// sample twice gives the canonical M = LambdaC instance.
ClassificationIpvInstance classification_instance(const Matrix& ref_gradients, const Vector& ref_weights,
                                                  const Matrix& eval_gradients, const Vector& eval_weights,
                                                  Vector prior_diag, double n);

// Lambda = D + a I + b 11^T with D_ii = 1 + diag_spread * U(0,1); V = prior_scale * I.
struct CpiParams {
  Index p = 6;
  std::uint64_t seed = 0;
  double diag_spread = 1.0;
  double a = 0.0;
  double b = 1.0;
  double prior_scale = 1.0;
  double noise_var = 1.0;
  double n = 1.0;
};

IpvInstance make_cpi_instance(const CpiParams& params);

// Ratio condition the dominance construction targets.
enum class RatioCondition {
  TopVersusBottom,  // Lambda_{m_k} / Lambda_{m_{p-k+1}} > (1+eps)/(1-eps)
  TopVersusNext,    // Lambda_{m_k} / Lambda_{m_{k+1}} > (1+eps)/(1-eps)
};

struct DominanceParams {
  Index p = 8;
  double epsilon = 0.15;
  double ratio_margin = 0.1;  // diagonal gaps exceed the threshold by this relative margin
  Index k = 2;
  RatioCondition condition = RatioCondition::TopVersusNext;
  std::uint64_t seed = 0;
  double prior_scale = 1.0;
  double noise_var = 1.0;
  double n = 1.0;
};

IpvInstance make_dd_instance(const DominanceParams& params);

// Independent audit: every row's off-diagonal absolute sum is strictly below
// epsilon times its diagonal.
bool is_diagonally_dominant(const Matrix& lambda, double epsilon);

// m_1..m_p: indices sorted by descending diagonal (ties to the lower index).
std::vector<Index> diagonal_ranking(const Matrix& lambda);

using IpvEvaluator = std::function<double(const IpvInstance&, std::span<const Index>)>;

struct TheoremReport {
  std::string theorem;
  bool passed = true;
  double worst_margin = 0.0;  // smallest slack over all checked inequalities
  std::uint64_t checks = 0;
  std::uint64_t violations = 0;
  std::string detail;         // offending subsets on failure
  std::optional<std::uint64_t> seed;
};

nlohmann::ordered_json to_json(const TheoremReport& r);

inline constexpr double kTheoryTolerance = 1e-10;

// All nested pairs S subset-of S' over the non-empty power set.
TheoremReport verify_theorem1(const IpvInstance& inst, Index max_p = 10, const IpvEvaluator& eval = {});

// Top-k diagonal subset attains the maximum IPV and the bottom-k subset the
// minimum, over all size-k subsets. Requires a C_PI instance with V = cI.
TheoremReport verify_theorem2(const IpvInstance& inst, Index k, const IpvEvaluator& eval = {});

// Dis(top-k) <= Dis(bottom-k); when the next-rank ratio condition also holds,
// Dis(top-k) <= Dis(S) for every size-k S disjoint from the top-k set.
// Throws PreconditionError when the instance is not epsilon-dominant or the
// top-versus-bottom ratio condition fails.
TheoremReport verify_theorem3(const IpvInstance& inst, Index k, double epsilon, const IpvEvaluator& eval = {});

// Finite-sample shadow of the ranking argument: draws N gradients from
// N(0, diag(lambda_diag)), forms the mean squared gradient, and checks that its
// top-k set equals the top-k set of lambda_diag.
bool ranking_recovered(const Vector& lambda_diag, Index k, Index n, std::uint64_t seed);

// Enumeration helpers (p <= 20).
std::vector<Index> subset_from_mask(std::uint32_t mask);

}  // namespace sublaplace
