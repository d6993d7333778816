#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sublaplace/laplace.hpp"
#include "sublaplace/net.hpp"
#include "sublaplace/rng.hpp"
#include "sublaplace/select.hpp"
#include "sublaplace/train.hpp"

namespace sublaplace {

using Context = Eigen::Vector2d;

inline constexpr int kNumArms = 5;
inline constexpr Index kInputDim = 2 + kNumArms;

struct WheelConfig {
  double delta = 0.95;
  double mu_center = 1.0;
  double mu_high = 50.0;
  double reward_std = 0.01;
  double inner_center_bonus = 0.0;  // extra mean of arm 0 inside the inner disk
  long horizon = 2000;
  std::uint64_t seed = 0;

  void validate() const;
};

// Arm q in 1..4 owns the quadrant with sign pattern (+,+), (-,+), (-,-), (+,-);
// coordinates equal to 0 count as positive.
int quadrant_of(const Context& x);
double arm_mean(const WheelConfig& cfg, const Context& x, int arm);
double optimal_mean(const WheelConfig& cfg, const Context& x);

// Uniform on the unit disk by rejection from the square.
Context sample_disk(Rng& rng);

struct StepResult {
  Context context;
  double reward = 0.0;
  double mean = 0.0;
  double optimal_mean = 0.0;
};

// Contexts are keyed by (seed, round) and rewards by (seed, round, arm), so
// every agent on the same seed faces the same counterfactual reward streams.
class WheelEnvironment {
 public:
  explicit WheelEnvironment(WheelConfig cfg);
  const WheelConfig& config() const noexcept { return cfg_; }
  Context context(long round) const;
  double reward(long round, int arm, const Context& x) const;
  StepResult step(long round, int arm) const;

 private:
  WheelConfig cfg_;
};

StepResult wheel_step(const WheelConfig& cfg, long round, int arm);

struct BanditRound {
  long round = 0;
  Context context = Context::Zero();
  int arm = 0;
  double reward = 0.0;
  double instant_regret = 0.0;
  double cum_regret = 0.0;
};

struct BanditTrace {
  std::vector<BanditRound> rounds;
  double final_regret() const { return rounds.empty() ? 0.0 : rounds.back().cum_regret; }
};

class BanditPolicy {
 public:
  virtual ~BanditPolicy() = default;
  virtual int choose(long round, const Context& x) = 0;
  virtual void observe(long round, const Context& x, int arm, double reward) = 0;
};

// Plays the arm with the largest true mean (ties to the lowest arm).
class OraclePolicy : public BanditPolicy {
 public:
  explicit OraclePolicy(WheelConfig cfg) : cfg_(cfg) {}
  int choose(long round, const Context& x) override;
  void observe(long, const Context&, int, double) override {}

 private:
  WheelConfig cfg_;
};

BanditTrace run_episode(const WheelConfig& cfg, BanditPolicy& policy);

enum class AgentPosterior { GradientLaplace, GreedyLaplace, SubnetDiagonal, LastK, NeuralLinear, MAP };

std::string to_string(AgentPosterior p);
AgentPosterior parse_agent_posterior(const std::string& name);

struct AgentConfig {
  AgentPosterior posterior = AgentPosterior::GradientLaplace;
  Index k = 500;
  int warm_pulls_per_arm = 3;
  int interact_steps = 20;
  int sgd_updates = 100;
  int replay_batch = 512;
  double lr = 3e-3;
  double grad_clip = 1.0;
  int residual_window = 200;
  double prior_precision = 1.0;
  std::vector<Index> hidden = {100, 100};
  PoolPolicy pool = PoolPolicy::Standard;
  std::uint64_t seed = 0;

  void validate() const;
};

// Network input for (context, arm): the context followed by a one-hot arm code.
Vector arm_input(const Context& x, int arm);

// Neural Thompson sampling with a sub-network Laplace posterior over the
// replay buffer. Training phases run before rounds W, W + I, W + 2I, ... where
// W is the warm-start length and I the interaction-step count; each phase
// re-fits the network, re-estimates the noise variance and re-selects the
// subset.
class ThompsonAgent : public BanditPolicy {
 public:
  explicit ThompsonAgent(AgentConfig cfg);

  int choose(long round, const Context& x) override;
  void observe(long round, const Context& x, int arm, double reward) override;

  // Runs the SGD updates and refreshes the posterior.
  void train_phase(long round);
  // Rebuilds noise estimate, subset and Omega_SS from the current model and
  // replay buffer without training.
  void refresh_posterior();

  // sigma0^2 + g_S^T Omega_SS^{-1} g_S for the given arm (sigma0^2 alone before
  // any posterior exists).
  double thompson_variance(const Context& x, int arm) const;
  double predicted_mean(const Context& x, int arm) const;

  const Mlp& model() const noexcept { return model_; }
  // Replaces the network (same architecture); the posterior is left untouched
  // until the next refresh.
  void set_model(Mlp model);
  const AgentConfig& config() const noexcept { return cfg_; }
  Matrix replay_inputs() const;
  Vector replay_rewards() const;
  double noise_var() const noexcept { return noise_var_; }
  const std::vector<Index>& subset() const;
  long training_phases() const noexcept { return phases_; }
  long warm_rounds() const noexcept { return static_cast<long>(warm_arms_.size()); }

 private:
  double estimate_noise_var() const;
  std::vector<Index> choose_subset(const BatchTape& tape, const Matrix& x) const;

  AgentConfig cfg_;
  Mlp model_;
  Optimizer optimizer_;
  Rng rng_;
  std::vector<int> warm_arms_;
  std::vector<double> inputs_;  // row-major, kInputDim per entry
  std::vector<double> rewards_;
  double noise_var_ = 1.0;
  std::optional<SubsetPosterior> posterior_;
  long phases_ = 0;
};

struct BanditResult {
  std::vector<std::uint64_t> seeds;
  std::vector<BanditTrace> traces;
  std::vector<double> final_regrets;
  double mean = 0.0;
  double stderr_ = 0.0;
};

// Wheel seed = s and agent seed derived from s, for every s in `seeds`.
BanditResult run_bandit(const WheelConfig& wheel, const AgentConfig& agent, std::span<const std::uint64_t> seeds);
BanditTrace run_bandit_seed(const WheelConfig& wheel, const AgentConfig& agent, std::uint64_t seed);

// Columns round,x1,x2,arm,reward,instant_regret,cum_regret.
void write_trace_csv(const std::filesystem::path& path, const BanditTrace& trace, const std::string& header_comment);

}  // namespace sublaplace
