// Command-line entry point: one subcommand per experiment.
#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "sublaplace/error.hpp"
#include "sublaplace/runner.hpp"

namespace sl = sublaplace;

int main(int argc, char** argv) {
  CLI::App app{"Sub-network Laplace experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string seeds;
  std::string out_dir;
  int jobs = 1;

  for (const char* name : {"wasserstein", "coverage", "theory", "bandit"}) {
    CLI::App* sub = app.add_subcommand(name, std::string("run the ") + name + " experiment");
    sub->add_option("--config", config_path, "JSON experiment config")->required();
    sub->add_option("--seeds", seeds, "seed list override, e.g. 0-4 or 1,3,5");
    sub->add_option("--out", out_dir, "output directory override");
    sub->add_option("--jobs", jobs, "worker threads across seeds")->check(CLI::PositiveNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : sl::kExitConfig;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    sl::ExperimentConfig cfg = sl::load_config(config_path);
    if (sl::to_string(cfg.kind) != command)
      throw sl::ConfigError("config describes a '" + sl::to_string(cfg.kind) + "' experiment, not '" + command + "'");
    sl::RunOptions opts;
    if (!seeds.empty()) opts.seeds = sl::parse_seed_list(seeds);
    if (!out_dir.empty()) opts.output_dir = out_dir;
    opts.jobs = jobs;
    const sl::RunOutcome outcome = sl::run_experiment(std::move(cfg), opts);
    for (const auto& f : outcome.files) std::cout << f.string() << "\n";
    if (outcome.exit_code == sl::kExitFalsified) std::cerr << "theory check falsified: " << outcome.summary.dump() << "\n";
    return outcome.exit_code;
  } catch (const std::exception& e) {
    const int rc = sl::exit_code_for_current_exception();
    std::cerr << "error: " << e.what() << "\n";
    return rc;
  }
}
