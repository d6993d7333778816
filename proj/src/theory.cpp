#include "sublaplace/theory.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "sublaplace/error.hpp"
#include "sublaplace/rng.hpp"
#include "sublaplace/select.hpp"

namespace sublaplace {

void IpvInstance::validate() const {
  const Index p = lambda.rows();
  if (lambda.cols() != p || prior_diag.size() != p) throw ShapeError("IPV instance dimensions disagree");
  if ((prior_diag.array() <= 0.0).any()) throw PreconditionError("prior_diag must be positive");
  if (!(noise_var > 0.0) || !(n > 0.0)) throw PreconditionError("noise_var and N must be positive");
  const double scale = std::max(1.0, lambda.cwiseAbs().maxCoeff());
  if ((lambda - lambda.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw PreconditionError("Lambda is not symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> es(lambda, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-10 * scale) throw PreconditionError("Lambda is not positive semi-definite");
}

namespace {

Matrix principal(const Matrix& m, std::span<const Index> s) {
  const Index k = static_cast<Index>(s.size());
  Matrix out(k, k);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < k; ++j) out(i, j) = m(s[static_cast<std::size_t>(i)], s[static_cast<std::size_t>(j)]);
  return out;
}

// tr((A + c diag(v))^{-1} B) for principal blocks A, B.
double trace_form(const Matrix& a_ss, const Matrix& b_ss, const Vector& v_s, double c) {
  Matrix shifted = a_ss;
  shifted.diagonal() += c * v_s;
  const JitteredCholesky chol = cholesky_with_jitter(shifted, "Lambda_SS + (sigma0^2/N) V_SS");
  return chol.llt.solve(b_ss).trace();
}

}  // namespace

double ipv(const IpvInstance& inst, std::span<const Index> subset) {
  validate_indices(subset, inst.dim());
  const double c = inst.noise_var / inst.n;
  const Matrix l_ss = principal(inst.lambda, subset);
  return c * trace_form(l_ss, l_ss, gather(inst.prior_diag, subset), c);
}

double ipv_full(const IpvInstance& inst) {
  std::vector<Index> all(static_cast<std::size_t>(inst.dim()));
  std::iota(all.begin(), all.end(), Index{0});
  return ipv(inst, all);
}

double dis(const IpvInstance& inst, std::span<const Index> subset) {
  const double d = ipv_full(inst) - ipv(inst, subset);
  if (d < -kTheoryTolerance) throw NumericError("negative discrepancy " + std::to_string(d));
  return std::max(d, 0.0);
}

double ipv_classification(const ClassificationIpvInstance& inst, std::span<const Index> subset) {
  const Index p = inst.dim();
  if (inst.cross_moment.rows() != p || inst.prior_diag.size() != p) throw ShapeError("instance dimensions disagree");
  validate_indices(subset, p);
  const double c = 1.0 / inst.n;
  return c * trace_form(principal(inst.lambda_c, subset), principal(inst.cross_moment, subset),
                        gather(inst.prior_diag, subset), c);
}

ClassificationIpvInstance classification_instance(const Matrix& ref_gradients, const Vector& ref_weights,
                                                  const Matrix& eval_gradients, const Vector& eval_weights,
                                                  Vector prior_diag, double n) {
  auto weighted_moment = [](const Matrix& g, const Vector& u) {
    if (g.rows() != u.size() || g.rows() == 0) throw ShapeError("need one weight per gradient row");
    const Matrix scaled = u.cwiseSqrt().asDiagonal() * g;
    return Matrix(scaled.transpose() * scaled / static_cast<double>(g.rows()));
  };
  return {weighted_moment(ref_gradients, ref_weights), weighted_moment(eval_gradients, eval_weights),
          std::move(prior_diag), n};
}

IpvInstance make_cpi_instance(const CpiParams& params) {
  if (params.p < 2) throw PreconditionError("C_PI instances need p >= 2");
  if (params.a < 0.0 || params.b < 0.0 || params.diag_spread < 0.0)
    throw PreconditionError("a, b and diag_spread must be nonnegative");
  Rng rng(derive_seed(params.seed, {0xc91}));
  const Index p = params.p;
  Matrix lambda = Matrix::Constant(p, p, params.b);
  for (Index i = 0; i < p; ++i) lambda(i, i) = 1.0 + params.diag_spread * rng.uniform() + params.a + params.b;
  return {lambda, Vector::Constant(p, params.prior_scale), params.noise_var, params.n};
}

IpvInstance make_dd_instance(const DominanceParams& params) {
  const Index p = params.p;
  const Index k = params.k;
  const double eps = params.epsilon;
  if (!(eps > 0.0 && eps < 1.0)) throw ConstructionError("epsilon must lie in (0, 1)");
  if (params.ratio_margin < 0.0) throw ConstructionError("ratio_margin must be nonnegative");
  if (k < 1) throw ConstructionError("k must be positive");
  if (params.condition == RatioCondition::TopVersusNext && k >= p)
    throw ConstructionError("next-rank ratio condition needs k < p");
  if (params.condition == RatioCondition::TopVersusBottom && 2 * k > p)
    throw ConstructionError("top-versus-bottom ratio condition needs 2k <= p");

  const double r = (1.0 + eps) / (1.0 - eps) * (1.0 + params.ratio_margin);
  Rng rng(derive_seed(params.seed, {0xdd}));
  // Diagonal values by rank, then scattered over a random permutation.
  std::vector<double> by_rank(static_cast<std::size_t>(p));
  for (Index j = 0; j < p; ++j) {
    double v;
    if (j < k) {
      v = rng.uniform(2.0 * r, 3.0 * r);
    } else if (params.condition == RatioCondition::TopVersusBottom && j < p - k) {
      v = rng.uniform(2.0, 2.0 * r);
    } else {
      v = rng.uniform(1.0, 2.0);
    }
    by_rank[static_cast<std::size_t>(j)] = v;
  }
  std::vector<Index> perm(static_cast<std::size_t>(p));
  std::iota(perm.begin(), perm.end(), Index{0});
  rng.shuffle(perm);
  Matrix lambda = Matrix::Zero(p, p);
  for (Index j = 0; j < p; ++j) lambda(perm[static_cast<std::size_t>(j)], perm[static_cast<std::size_t>(j)]) = by_rank[static_cast<std::size_t>(j)];
  const double budget = 0.9 * eps / static_cast<double>(std::max<Index>(p - 1, 1));
  for (Index i = 0; i < p; ++i)
    for (Index j = i + 1; j < p; ++j) {
      const double e = rng.uniform(-1.0, 1.0) * budget * std::min(lambda(i, i), lambda(j, j));
      lambda(i, j) = e;
      lambda(j, i) = e;
    }
  return {lambda, Vector::Constant(p, params.prior_scale), params.noise_var, params.n};
}

bool is_diagonally_dominant(const Matrix& lambda, double epsilon) {
  for (Index i = 0; i < lambda.rows(); ++i) {
    double off = 0.0;
    for (Index j = 0; j < lambda.cols(); ++j)
      if (j != i) off += std::abs(lambda(i, j));
    if (!(epsilon * lambda(i, i) > off)) return false;
  }
  return true;
}

std::vector<Index> diagonal_ranking(const Matrix& lambda) {
  std::vector<Index> order(static_cast<std::size_t>(lambda.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return lambda(a, a) > lambda(b, b); });
  return order;
}

std::vector<Index> subset_from_mask(std::uint32_t mask) {
  std::vector<Index> s;
  for (Index i = 0; mask; ++i, mask >>= 1)
    if (mask & 1u) s.push_back(i);
  return s;
}

namespace {

std::uint32_t mask_of(std::span<const Index> s) {
  std::uint32_t m = 0;
  for (Index i : s) m |= 1u << i;
  return m;
}

std::string describe(std::span<const Index> s) {
  std::ostringstream os;
  os << '{';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << '}';
  return os.str();
}

std::vector<double> all_subset_ipv(const IpvInstance& inst, const IpvEvaluator& eval) {
  const Index p = inst.dim();
  std::vector<double> values(std::size_t{1} << p, 0.0);
  for (std::uint32_t m = 1; m < (1u << p); ++m) {
    const std::vector<Index> s = subset_from_mask(m);
    values[m] = eval ? eval(inst, s) : ipv(inst, s);
  }
  return values;
}

double tolerance_for(double value) { return kTheoryTolerance * std::max(1.0, std::abs(value)); }

}  // namespace

nlohmann::ordered_json to_json(const TheoremReport& r) {
  nlohmann::ordered_json j;
  j["theorem"] = r.theorem;
  if (r.seed) j["seed"] = *r.seed;
  j["passed"] = r.passed;
  j["worst_margin"] = r.worst_margin;
  j["checks"] = r.checks;
  j["violations"] = r.violations;
  j["detail"] = r.detail;
  return j;
}

TheoremReport verify_theorem1(const IpvInstance& inst, Index max_p, const IpvEvaluator& eval) {
  inst.validate();
  const Index p = inst.dim();
  if (p > max_p || p > 20) throw PreconditionError("theorem 1 enumeration limited to p <= " + std::to_string(max_p));
  const std::vector<double> values = all_subset_ipv(inst, eval);
  TheoremReport rep;
  rep.theorem = "theorem1";
  rep.worst_margin = std::numeric_limits<double>::infinity();
  for (std::uint32_t big = 1; big < (1u << p); ++big) {
    for (std::uint32_t small = (big - 1) & big; small; small = (small - 1) & big) {
      const double margin = values[big] - values[small];
      ++rep.checks;
      if (margin < rep.worst_margin) rep.worst_margin = margin;
      if (margin < -kTheoryTolerance) {
        if (rep.violations == 0)
          rep.detail = "IPV" + describe(subset_from_mask(small)) + " > IPV" + describe(subset_from_mask(big)) +
                       " by " + std::to_string(-margin);
        ++rep.violations;
      }
    }
  }
  rep.passed = rep.violations == 0;
  return rep;
}

TheoremReport verify_theorem2(const IpvInstance& inst, Index k, const IpvEvaluator& eval) {
  inst.validate();
  const Index p = inst.dim();
  if (p > 12) throw PreconditionError("theorem 2 enumeration limited to p <= 12");
  if (k < 1 || k > p) throw PreconditionError("k out of range");
  if ((inst.prior_diag.array() != inst.prior_diag[0]).any()) throw PreconditionError("theorem 2 requires V = cI");
  double off = std::numeric_limits<double>::quiet_NaN();
  for (Index i = 0; i < p; ++i)
    for (Index j = 0; j < p; ++j) {
      if (i == j) continue;
      if (std::isnan(off)) off = inst.lambda(i, j);
      if (std::abs(inst.lambda(i, j) - off) > 1e-12 * std::max(1.0, std::abs(off)) || off < -1e-12)
        throw PreconditionError("instance is not of the form D + aI + b11^T with b >= 0");
    }

  const std::vector<Index> rank = diagonal_ranking(inst.lambda);
  std::vector<Index> top(rank.begin(), rank.begin() + k);
  std::vector<Index> bottom(rank.end() - k, rank.end());
  const auto f = [&](std::span<const Index> s) { return eval ? eval(inst, s) : ipv(inst, s); };
  const double ipv_top = f(top);
  const double ipv_bottom = f(bottom);

  TheoremReport rep;
  rep.theorem = "theorem2";
  rep.worst_margin = std::numeric_limits<double>::infinity();
  for (std::uint32_t m = 1; m < (1u << p); ++m) {
    if (std::popcount(m) != k) continue;
    const std::vector<Index> s = subset_from_mask(m);
    const double v = f(s);
    const double up = ipv_top - v;      // top-k attains the maximum
    const double down = v - ipv_bottom; // bottom-k attains the minimum
    rep.checks += 2;
    rep.worst_margin = std::min({rep.worst_margin, up, down});
    if (up < -tolerance_for(v) || down < -tolerance_for(v)) {
      if (rep.violations == 0)
        rep.detail = "subset " + describe(s) + " IPV " + std::to_string(v) + " outside [" +
                     std::to_string(ipv_bottom) + ", " + std::to_string(ipv_top) + "]";
      ++rep.violations;
    }
  }
  rep.passed = rep.violations == 0;
  return rep;
}

TheoremReport verify_theorem3(const IpvInstance& inst, Index k, double epsilon, const IpvEvaluator& eval) {
  inst.validate();
  const Index p = inst.dim();
  if (p > 12) throw PreconditionError("theorem 3 enumeration limited to p <= 12");
  if (k < 1 || 2 * k > p) throw PreconditionError("theorem 3 needs 1 <= k <= p/2");
  if ((inst.prior_diag.array() != inst.prior_diag[0]).any()) throw PreconditionError("theorem 3 requires V = cI");
  if (!is_diagonally_dominant(inst.lambda, epsilon))
    throw PreconditionError("Lambda is not epsilon-diagonally dominant");
  const std::vector<Index> rank = diagonal_ranking(inst.lambda);
  const double threshold = (1.0 + epsilon) / (1.0 - epsilon);
  auto diag_at = [&](Index j) { return inst.lambda(rank[static_cast<std::size_t>(j)], rank[static_cast<std::size_t>(j)]); };
  if (!(diag_at(k - 1) / diag_at(p - k) > threshold))
    throw PreconditionError("ratio condition Lambda_{m_k} / Lambda_{m_{p-k+1}} > (1+eps)/(1-eps) fails");
  const bool strong = diag_at(k - 1) / diag_at(k) > threshold;

  const auto f = [&](std::span<const Index> s) { return eval ? eval(inst, s) : ipv(inst, s); };
  std::vector<Index> all(static_cast<std::size_t>(p));
  std::iota(all.begin(), all.end(), Index{0});
  const double full = f(all);
  std::vector<Index> top(rank.begin(), rank.begin() + k);
  std::vector<Index> bottom(rank.end() - k, rank.end());
  const double dis_top = full - f(top);
  const double dis_bottom = full - f(bottom);

  TheoremReport rep;
  rep.theorem = strong ? "theorem3_strong" : "theorem3";
  rep.checks = 1;
  rep.worst_margin = dis_bottom - dis_top;
  if (rep.worst_margin < -tolerance_for(dis_top)) {
    rep.violations = 1;
    rep.detail = "Dis(top-k) " + std::to_string(dis_top) + " > Dis(bottom-k) " + std::to_string(dis_bottom);
  }
  if (strong) {
    const std::uint32_t top_mask = mask_of(top);
    for (std::uint32_t m = 1; m < (1u << p); ++m) {
      if (std::popcount(m) != k || (m & top_mask)) continue;
      const std::vector<Index> s = subset_from_mask(m);
      const double margin = (full - f(s)) - dis_top;
      ++rep.checks;
      rep.worst_margin = std::min(rep.worst_margin, margin);
      if (margin < -tolerance_for(dis_top)) {
        if (rep.violations == 0)
          rep.detail = "disjoint subset " + describe(s) + " beats the top-k set by " + std::to_string(-margin);
        ++rep.violations;
      }
    }
  }
  rep.passed = rep.violations == 0;
  return rep;
}

bool ranking_recovered(const Vector& lambda_diag, Index k, Index n, std::uint64_t seed) {
  const Index p = lambda_diag.size();
  Rng rng(derive_seed(seed, {0x7a2c}));
  Matrix g(n, p);
  const Vector sd = lambda_diag.cwiseSqrt();
  for (Index r = 0; r < n; ++r)
    for (Index c = 0; c < p; ++c) g(r, c) = sd[c] * rng.normal();
  const SubsetSelection picked = select_gradient_laplace(gradient_summary_from_rows(g), k);
  return picked.indices == top_k_indices(lambda_diag, k);
}

}  // namespace sublaplace
