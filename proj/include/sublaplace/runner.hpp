#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sublaplace/bandit.hpp"
#include "sublaplace/data.hpp"
#include "sublaplace/metrics.hpp"
#include "sublaplace/select.hpp"
#include "sublaplace/theory.hpp"
#include "sublaplace/train.hpp"

namespace sublaplace {

enum class ExperimentKind { Wasserstein, Coverage, Theory, Bandit };

std::string to_string(ExperimentKind k);

// A method name with its k grid. The grid is empty for methods whose subset
// size is fixed (neural_linear, map).
struct MethodSpec {
  std::string name;
  std::vector<Index> k;
};

struct CsvSource {
  std::filesystem::path path;
  CsvOptions options;
  double test_fraction = 0.2;
};

struct TheorySpec {
  int theorem1_instances = 100;
  Index theorem1_p = 6;
  int theorem2_instances = 50;
  std::vector<Index> theorem2_p = {6, 8, 10};
  std::vector<Index> theorem2_k = {2, 3};
  int theorem3_instances = 50;
  Index theorem3_p = 8;
  std::vector<Index> theorem3_k = {2, 3};
  double theorem3_epsilon = 0.15;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Wasserstein;
  std::optional<SyntheticSpec> synthetic;
  std::optional<CsvSource> csv;
  std::vector<Index> hidden = {50, 50};
  TrainConfig train;
  double prior_precision = 1.0;
  std::vector<MethodSpec> methods;
  PoolPolicy pool = PoolPolicy::Standard;
  Index test_points = 200;
  VarianceForm variance = VarianceForm::Total;
  double level = 0.95;
  int ensemble_members = 0;
  Index reference_width = 200;
  TheorySpec theory;
  WheelConfig wheel;
  AgentConfig agent;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir = "results";

  nlohmann::ordered_json raw;  // as parsed, used for hashing
  std::filesystem::path base_dir;
};

// Unknown keys at any level, type mismatches and out-of-range values raise
// ConfigError. Relative data paths resolve against `base_dir`.
ExperimentConfig parse_config(const nlohmann::ordered_json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

// "0,1,2" or "0-4" or mixtures such as "0-2,7".
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

struct RunOptions {
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<std::filesystem::path> output_dir;
  int jobs = 1;
  // Replaces the IPV evaluator inside the theorem checks (mutation testing).
  IpvEvaluator ipv_hook;
};

struct RunOutcome {
  int exit_code = 0;
  std::vector<std::filesystem::path> files;
  nlohmann::ordered_json summary;
};

// FNV-1a of the canonical config JSON (seed list applied, output_dir removed),
// as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

RunOutcome cmd_wasserstein(ExperimentConfig cfg, const RunOptions& opts = {});
RunOutcome cmd_coverage(ExperimentConfig cfg, const RunOptions& opts = {});
RunOutcome cmd_theory(ExperimentConfig cfg, const RunOptions& opts = {});
RunOutcome cmd_bandit(ExperimentConfig cfg, const RunOptions& opts = {});
RunOutcome run_experiment(ExperimentConfig cfg, const RunOptions& opts = {});

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitFalsified = 4;

// Maps the exception currently being handled onto a process exit code.
int exit_code_for_current_exception();

}  // namespace sublaplace
