#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sublaplace/laplace.hpp"
#include "sublaplace/net.hpp"
#include "sublaplace/select.hpp"

namespace sublaplace {

// Which predictive variance a metric reads. Total adds the noise variance for
// regression; classification never has a noise term.
enum class VarianceForm { Total, Epistemic };

using Oracle = std::function<double(const Eigen::Ref<const Vector>&)>;

struct WassersteinRecord {
  Index test_index = 0;
  double sigma_full = 0.0;
  double sigma_method = 0.0;
  double w2 = 0.0;
};

struct CoverageRecord {
  Index test_index = 0;
  double oracle_value = 0.0;
  double map_value = 0.0;
  double sigma_method = 0.0;
  bool covered = false;
};

// One aggregated row of a sweep table.
struct SweepRow {
  std::string method;
  Index k = 0;
  std::string metric;
  double value = 0.0;
  double stderr_ = 0.0;  // standard error over test points
};

// W2 between N(m, s1^2) and N(m, s2^2).
inline double w2_gap(double s1, double s2) { return s1 > s2 ? s1 - s2 : s2 - s1; }

// Two-sided standard normal critical value; exactly 1.96 at level 0.95.
double z_for_level(double level);

inline bool interval_covers(double oracle_value, double center, double sigma, double z) {
  const double gap = oracle_value > center ? oracle_value - center : center - oracle_value;
  return gap <= z * sigma;
}

// Per-test-point gradients and MAP outputs, computed once per model.
struct TestPoints {
  RowMatrix gradients;  // n x p
  Vector map_values;    // n
};

TestPoints prepare_test_points(const Mlp& model, const Matrix& x);

double select_std(const PredictiveVariance& v, VarianceForm form);

// Full-Laplace predictive std at every test point.
Vector full_stds(const FullPosterior& full, const TestPoints& pts, VarianceForm form);

std::vector<WassersteinRecord> wasserstein_records(const LaplaceSystem& sys, const Vector& sigma_full,
                                                   const SubsetSelection& sel, const TestPoints& pts,
                                                   VarianceForm form = VarianceForm::Total);

std::vector<SweepRow> wasserstein_sweep(const LaplaceSystem& sys, std::span<const SubsetSelection> selections,
                                        const Matrix& test_x, const Mlp& model,
                                        VarianceForm form = VarianceForm::Total);

std::vector<CoverageRecord> coverage_records(const LaplaceSystem& sys, const SubsetSelection& sel,
                                             const TestPoints& pts, const Vector& oracle_values, double level,
                                             VarianceForm form);

// Coverage of the full (non-sub-network) Laplace interval.
std::vector<CoverageRecord> full_coverage_records(const FullPosterior& full, const TestPoints& pts,
                                                  const Vector& oracle_values, double level, VarianceForm form);

std::vector<SweepRow> coverage_sweep(const LaplaceSystem& sys, std::span<const SubsetSelection> selections,
                                     const Matrix& test_x, const Mlp& model, const Oracle& oracle,
                                     double level = 0.95, VarianceForm form = VarianceForm::Epistemic);

Vector evaluate_oracle(const Oracle& oracle, const Matrix& x);

// Linear interpolation between order statistics (type 7).
double quantile_type7(std::vector<double> values, double q);

std::pair<double, double> ensemble_interval(std::span<const Mlp> models, const Eigen::Ref<const Vector>& x);

// Empirical coverage of the 2.5% / 97.5% quantile intervals.
double ensemble_interval_coverage(std::span<const Mlp> models, const Matrix& test_x, const Vector& oracle_values);

// Coverage of mean +- z * (unbiased cross-member std).
double ensemble_variance_coverage(std::span<const Mlp> models, const Matrix& test_x, const Vector& oracle_values,
                                  double level = 0.95);

// Mean and standard error (sample std / sqrt(n)).
std::pair<double, double> mean_stderr(std::span<const double> values);

// CSV with columns method,k,seed,metric,value,stderr. `seed` is written as given
// so aggregate tables can use "all".
void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows, const std::string& seed,
                     const std::string& header_comment);
std::string format_double(double v);

}  // namespace sublaplace
