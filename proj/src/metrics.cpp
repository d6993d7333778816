#include "sublaplace/metrics.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "sublaplace/error.hpp"

namespace sublaplace {

double z_for_level(double level) {
  if (!(level > 0.0 && level < 1.0)) throw PreconditionError("coverage level must lie in (0, 1)");
  if (level == 0.95) return 1.96;
  return boost::math::quantile(boost::math::normal(), 0.5 + 0.5 * level);
}

TestPoints prepare_test_points(const Mlp& model, const Matrix& x) {
  if (x.rows() == 0) throw PreconditionError("no test points");
  return {jacobian(model, x), model.forward_batch(x)};
}

double select_std(const PredictiveVariance& v, VarianceForm form) {
  return std::sqrt(form == VarianceForm::Total ? v.total : v.epistemic);
}

namespace {

Vector row_of(const RowMatrix& m, Index i) { return m.row(i).transpose(); }

template <typename F>
auto annotate(Index i, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError("test point " + std::to_string(i) + ": " + e.what());
  }
}

}  // namespace

Vector full_stds(const FullPosterior& full, const TestPoints& pts, VarianceForm form) {
  Vector out(pts.gradients.rows());
  for (Index i = 0; i < out.size(); ++i)
    out[i] = annotate(i, [&] { return select_std(full.variance(row_of(pts.gradients, i)), form); });
  return out;
}

std::vector<WassersteinRecord> wasserstein_records(const LaplaceSystem& sys, const Vector& sigma_full,
                                                   const SubsetSelection& sel, const TestPoints& pts,
                                                   VarianceForm form) {
  if (sigma_full.size() != pts.gradients.rows()) throw ShapeError("need one full std per test point");
  const SubsetPosterior sub = SubsetPosterior::from_system(sys, sel.indices);
  std::vector<WassersteinRecord> out;
  out.reserve(static_cast<std::size_t>(pts.gradients.rows()));
  for (Index i = 0; i < pts.gradients.rows(); ++i) {
    out.push_back(annotate(i, [&] {
      const double sf = sigma_full[i];
      const double sm = select_std(sub.variance(row_of(pts.gradients, i)), form);
      return WassersteinRecord{i, sf, sm, w2_gap(sf, sm)};
    }));
  }
  return out;
}

std::pair<double, double> mean_stderr(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n == 0) return {0.0, 0.0};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  if (n < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n))};
}

std::vector<SweepRow> wasserstein_sweep(const LaplaceSystem& sys, std::span<const SubsetSelection> selections,
                                        const Matrix& test_x, const Mlp& model, VarianceForm form) {
  if (selections.empty()) throw PreconditionError("no selections to evaluate");
  const TestPoints pts = prepare_test_points(model, test_x);
  const Vector sigma_full = full_stds(FullPosterior(sys), pts, form);
  std::vector<SweepRow> rows;
  for (const SubsetSelection& sel : selections) {
    std::vector<double> w;
    for (const WassersteinRecord& r : wasserstein_records(sys, sigma_full, sel, pts, form)) w.push_back(r.w2);
    const auto [m, se] = mean_stderr(w);
    rows.push_back({to_string(sel.method), sel.k, "w2", m, se});
  }
  return rows;
}

std::vector<CoverageRecord> coverage_records(const LaplaceSystem& sys, const SubsetSelection& sel,
                                             const TestPoints& pts, const Vector& oracle_values, double level,
                                             VarianceForm form) {
  if (oracle_values.size() != pts.map_values.size()) throw ShapeError("need one oracle value per test point");
  const double z = z_for_level(level);
  const SubsetPosterior sub = SubsetPosterior::from_system(sys, sel.indices);
  std::vector<CoverageRecord> out;
  for (Index i = 0; i < pts.gradients.rows(); ++i) {
    const double s = annotate(i, [&] { return select_std(sub.variance(row_of(pts.gradients, i)), form); });
    out.push_back({i, oracle_values[i], pts.map_values[i], s,
                   interval_covers(oracle_values[i], pts.map_values[i], s, z)});
  }
  return out;
}

std::vector<CoverageRecord> full_coverage_records(const FullPosterior& full, const TestPoints& pts,
                                                  const Vector& oracle_values, double level, VarianceForm form) {
  if (oracle_values.size() != pts.map_values.size()) throw ShapeError("need one oracle value per test point");
  const double z = z_for_level(level);
  std::vector<CoverageRecord> out;
  for (Index i = 0; i < pts.gradients.rows(); ++i) {
    const double s = annotate(i, [&] { return select_std(full.variance(row_of(pts.gradients, i)), form); });
    out.push_back({i, oracle_values[i], pts.map_values[i], s,
                   interval_covers(oracle_values[i], pts.map_values[i], s, z)});
  }
  return out;
}

Vector evaluate_oracle(const Oracle& oracle, const Matrix& x) {
  Vector out(x.rows());
  for (Index i = 0; i < x.rows(); ++i) out[i] = oracle(x.row(i).transpose());
  return out;
}

std::vector<SweepRow> coverage_sweep(const LaplaceSystem& sys, std::span<const SubsetSelection> selections,
                                     const Matrix& test_x, const Mlp& model, const Oracle& oracle, double level,
                                     VarianceForm form) {
  if (selections.empty()) throw PreconditionError("no selections to evaluate");
  const TestPoints pts = prepare_test_points(model, test_x);
  const Vector truth = evaluate_oracle(oracle, test_x);
  std::vector<SweepRow> rows;
  for (const SubsetSelection& sel : selections) {
    std::vector<double> hit;
    for (const CoverageRecord& r : coverage_records(sys, sel, pts, truth, level, form))
      hit.push_back(r.covered ? 1.0 : 0.0);
    const auto [m, se] = mean_stderr(hit);
    rows.push_back({to_string(sel.method), sel.k, "coverage", m, se});
  }
  return rows;
}

double quantile_type7(std::vector<double> values, double q) {
  if (values.empty()) throw PreconditionError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - std::floor(h)) * (values[hi] - values[lo]);
}

namespace {

void check_members(std::span<const Mlp> models) {
  if (models.size() < 2) throw PreconditionError("an ensemble needs at least two members");
}

std::vector<double> member_predictions(std::span<const Mlp> models, const Eigen::Ref<const Vector>& x) {
  std::vector<double> preds;
  preds.reserve(models.size());
  for (const Mlp& m : models) preds.push_back(m.forward(x));
  return preds;
}

}  // namespace

std::pair<double, double> ensemble_interval(std::span<const Mlp> models, const Eigen::Ref<const Vector>& x) {
  check_members(models);
  const std::vector<double> preds = member_predictions(models, x);
  return {quantile_type7(preds, 0.025), quantile_type7(preds, 0.975)};
}

double ensemble_interval_coverage(std::span<const Mlp> models, const Matrix& test_x, const Vector& oracle_values) {
  check_members(models);
  Index hits = 0;
  for (Index i = 0; i < test_x.rows(); ++i) {
    const auto [lo, hi] = ensemble_interval(models, test_x.row(i).transpose());
    if (oracle_values[i] >= lo && oracle_values[i] <= hi) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(test_x.rows());
}

double ensemble_variance_coverage(std::span<const Mlp> models, const Matrix& test_x, const Vector& oracle_values,
                                  double level) {
  check_members(models);
  if (oracle_values.size() != test_x.rows()) throw ShapeError("need one oracle value per test point");
  const double z = z_for_level(level);
  Index hits = 0;
  for (Index i = 0; i < test_x.rows(); ++i) {
    const std::vector<double> preds = member_predictions(models, test_x.row(i).transpose());
    double mean = 0.0;
    for (double v : preds) mean += v;
    mean /= static_cast<double>(preds.size());
    double ss = 0.0;
    for (double v : preds) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(preds.size() - 1));
    if (interval_covers(oracle_values[i], mean, sd, z)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(test_x.rows());
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows, const std::string& seed,
                     const std::string& header_comment) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  out << "method,k,seed,metric,value,stderr\n";
  for (const SweepRow& r : rows)
    out << r.method << ',' << r.k << ',' << seed << ',' << r.metric << ',' << format_double(r.value) << ','
        << format_double(r.stderr_) << "\n";
}

}  // namespace sublaplace
