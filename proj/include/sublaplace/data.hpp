#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sublaplace/linalg.hpp"

namespace sublaplace {

enum class Task { Regression, Binary };

struct Standardizer {
  Vector feature_mean;
  Vector feature_std;
  double target_mean = 0.0;
  double target_std = 1.0;
  bool target_scaled = false;
  std::vector<Index> clamped_columns;  // zero-variance columns whose std was set to 1

  Matrix transform(const Matrix& x) const;
  Matrix inverse_transform(const Matrix& z) const;
  Vector transform_target(const Vector& y) const;
  Vector inverse_transform_target(const Vector& t) const;
};

struct Dataset {
  Matrix x;  // n x d
  Vector y;  // n
  Task task = Task::Regression;
  std::optional<Standardizer> standardizer;

  Index size() const { return x.rows(); }
  Index dim() const { return x.cols(); }
  Dataset subset(std::span<const Index> rows) const;
  void validate() const;
};

struct CsvOptions {
  std::string target;     // column name (requires header) or zero-based index
  char delimiter = ',';   // ' ' means any run of whitespace
  Task task = Task::Regression;
};

// Header row is detected automatically: the first row is a header when any
// of its cells fails to parse as a number.
Dataset load_csv(const std::filesystem::path& path, const CsvOptions& options);
Dataset parse_csv(const std::string& text, const CsvOptions& options, const std::string& source = "<memory>");

struct Split {
  Dataset train;
  Dataset test;
  std::vector<Index> train_rows;
  std::vector<Index> test_rows;
  std::vector<std::string> warnings;
};

// Seeded shuffle split; the standardizer is fit on the training partition and
// applied to both. Binary targets are left untouched.
Split split_standardize(const Dataset& ds, double test_fraction, std::uint64_t seed);

enum class Generator { SmoothSine, PlantedMlp };

struct SyntheticSpec {
  Generator generator = Generator::SmoothSine;
  Index n_train = 1000;
  Index n_test = 200;
  Index input_dim = 8;
  double noise_std = 0.1;
  Task task = Task::Regression;
  std::uint64_t seed = 0;
};

struct SyntheticData {
  Dataset train;
  Dataset test;
  // Noise-free generating function (log-odds for Binary tasks).
  std::function<double(const Eigen::Ref<const Vector>&)> oracle;
};

// Inputs ~ N(0, I_d) conditioned on ||x|| <= 6. Regression targets are
// h(x) + noise_std * N(0,1); Binary targets are Bernoulli(sigmoid(h(x))).
SyntheticData make_synthetic(const SyntheticSpec& spec);

// Writes the dataset as comma-separated text (features then target, with a
// header) plus a JSON sidecar `<path>.meta.json` with the seed and
// standardizer constants.
void write_dataset(const Dataset& ds, const std::filesystem::path& path, std::uint64_t seed);

double sigmoid(double f);

}  // namespace sublaplace
