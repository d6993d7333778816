#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "sublaplace/bandit.hpp"
#include "sublaplace/error.hpp"

using namespace sublaplace;

namespace {

AgentConfig small_agent(AgentPosterior post, Index k = 20) {
  AgentConfig a;
  a.posterior = post;
  a.k = k;
  a.hidden = {8, 8};
  a.sgd_updates = 20;
  a.replay_batch = 32;
  return a;
}

class FixedArms : public BanditPolicy {
 public:
  explicit FixedArms(int shift) : shift_(shift) {}
  int choose(long round, const Context&) override { return static_cast<int>((round + shift_) % kNumArms); }
  void observe(long, const Context&, int, double) override {}

 private:
  int shift_;
};

}  // namespace

TEST_CASE("quadrant table") {
  CHECK(quadrant_of({0.5, 0.5}) == 1);
  CHECK(quadrant_of({-0.5, 0.5}) == 2);
  CHECK(quadrant_of({-0.5, -0.5}) == 3);
  CHECK(quadrant_of({0.5, -0.5}) == 4);
  CHECK(quadrant_of({0.0, 0.0}) == 1);
  CHECK(quadrant_of({0.0, -0.2}) == 4);
  CHECK(quadrant_of({-0.2, 0.0}) == 2);
}

TEST_CASE("arm means on and off the rim") {
  const WheelConfig cfg;
  const Context rim(0.97 / std::sqrt(2.0), 0.97 / std::sqrt(2.0));
  CHECK(arm_mean(cfg, rim, 1) == 50.0);
  CHECK(arm_mean(cfg, rim, 2) == 1.0);
  CHECK(arm_mean(cfg, rim, 0) == 1.0);
  CHECK(optimal_mean(cfg, rim) == 50.0);
  const Context inner(0.3, -0.1);
  for (int a = 0; a < kNumArms; ++a) CHECK(arm_mean(cfg, inner, a) == 1.0);
  CHECK(optimal_mean(cfg, inner) == 1.0);
  CHECK_THROWS_AS(arm_mean(cfg, inner, 5), ProtocolError);
  CHECK_THROWS_AS(arm_mean(cfg, inner, -1), ProtocolError);
  WheelConfig bonus;
  bonus.inner_center_bonus = 0.2;
  CHECK(arm_mean(bonus, inner, 0) == doctest::Approx(1.2));
  CHECK(arm_mean(bonus, rim, 0) == 1.0);
}

TEST_CASE("reward noise around the arm mean") {
  WheelConfig cfg;
  const WheelEnvironment env(cfg);
  const Context rim(0.97 / std::sqrt(2.0), 0.97 / std::sqrt(2.0));
  double s = 0.0, s2 = 0.0;
  const int n = 20000;
  for (long r = 0; r < n; ++r) {
    const double v = env.reward(r, 1, rim);
    s += v;
    s2 += v * v;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  CHECK(std::abs(mean - 50.0) < 4.0 * 0.01 / std::sqrt(n));
  CHECK(std::abs(std::sqrt(var) - 0.01) < 0.0005);
}

TEST_CASE("high-reward area fraction") {
  Rng rng(17);
  const int n = 200000;
  int hits = 0;
  for (int i = 0; i < n; ++i) hits += sample_disk(rng).norm() > 0.95;
  const double p = 1.0 - 0.95 * 0.95;
  CHECK(std::abs(static_cast<double>(hits) / n - p) < 3.0 * std::sqrt(p * (1 - p) / n));
}

TEST_CASE("oracle policy has zero regret") {
  WheelConfig cfg;
  cfg.horizon = 3000;
  OraclePolicy oracle(cfg);
  const BanditTrace t = run_episode(cfg, oracle);
  CHECK(t.rounds.size() == 3000);
  CHECK(t.final_regret() == 0.0);
}

TEST_CASE("regret is nonnegative and accumulates") {
  WheelConfig cfg;
  cfg.horizon = 2000;
  FixedArms p(0);
  const BanditTrace t = run_episode(cfg, p);
  double prev = 0.0;
  for (const auto& r : t.rounds) {
    CHECK(r.instant_regret >= 0.0);
    CHECK(r.cum_regret >= prev);
    prev = r.cum_regret;
  }
  CHECK(t.final_regret() > 0.0);
}

TEST_CASE("rewards are keyed by round and arm") {
  WheelConfig cfg;
  cfg.horizon = 500;
  cfg.seed = 4;
  FixedArms a(0), b(2);
  const BanditTrace ta = run_episode(cfg, a), tb = run_episode(cfg, b);
  const WheelEnvironment env(cfg);
  for (long r = 0; r < cfg.horizon; ++r) {
    const auto& ra = ta.rounds[static_cast<std::size_t>(r)];
    const auto& rb = tb.rounds[static_cast<std::size_t>(r)];
    CHECK(ra.context == rb.context);
    CHECK(ra.reward == env.step(r, ra.arm).reward);
    CHECK(rb.reward == env.reward(r, rb.arm, rb.context));
  }
  CHECK(wheel_step(cfg, 7, 3).reward == env.step(7, 3).reward);
}

TEST_CASE("default agent network size") {
  const ThompsonAgent agent{AgentConfig{}};
  CHECK(agent.model().num_params() == 11001);
  CHECK(agent.model().input_dim() == 7);
  CHECK(arm_input({0.1, -0.2}, 3) == (Vector(7) << 0.1, -0.2, 0, 0, 0, 1, 0).finished());
}

TEST_CASE("warm start only") {
  WheelConfig cfg;
  cfg.horizon = 15;
  ThompsonAgent agent(small_agent(AgentPosterior::GradientLaplace));
  const BanditTrace t = run_episode(cfg, agent);
  CHECK(t.rounds.size() == 15);
  CHECK(agent.training_phases() == 0);
  std::vector<int> pulls(kNumArms, 0);
  for (const auto& r : t.rounds) ++pulls[static_cast<std::size_t>(r.arm)];
  for (int c : pulls) CHECK(c == 3);
}

TEST_CASE("training phases follow the interaction schedule") {
  WheelConfig cfg;
  cfg.horizon = 56;
  ThompsonAgent agent(small_agent(AgentPosterior::GradientLaplace));
  run_episode(cfg, agent);
  CHECK(agent.training_phases() == 3);  // before rounds 15, 35 and 55
  CHECK(agent.subset().size() == 20);
  CHECK(agent.noise_var() >= 1e-6);
}

TEST_CASE("map agent plays the argmax of the means") {
  AgentConfig cfg = small_agent(AgentPosterior::MAP);
  cfg.hidden = {1};
  ThompsonAgent agent(cfg);
  // hidden = relu(4 * [arm == 4]), output = hidden + 1.
  Vector th = Vector::Zero(agent.model().num_params());
  th[2 + 4] = 4.0;
  th[8] = 1.0;
  th[9] = 1.0;
  agent.set_model(agent.model().with_theta(th));
  const Context x(0.2, 0.1);
  for (int a = 0; a < 4; ++a) CHECK(agent.predicted_mean(x, a) == 1.0);
  CHECK(agent.predicted_mean(x, 4) == 5.0);
  CHECK(agent.choose(agent.warm_rounds() + 1, x) == 4);
  // All means tied: lowest arm wins.
  agent.set_model(agent.model().with_theta(Vector::Zero(th.size())));
  CHECK(agent.choose(agent.warm_rounds() + 1, x) == 0);
}

TEST_CASE("non-finite outputs abort with the round") {
  ThompsonAgent agent(small_agent(AgentPosterior::MAP));
  Vector th = agent.model().theta();
  th[th.size() - 1] = std::nan("");
  agent.set_model(agent.model().with_theta(th));
  try {
    agent.choose(16, Context(0.1, 0.1));
    FAIL("expected an agent fault");
  } catch (const AgentFault& e) {
    CHECK(e.round() == 16);
  }
}

TEST_CASE("full subset equals the full posterior on a frozen snapshot") {
  AgentConfig cfg = small_agent(AgentPosterior::GradientLaplace, 145);
  WheelConfig wheel;
  wheel.horizon = 60;
  ThompsonAgent agent(cfg);
  REQUIRE(agent.model().num_params() == 145);
  run_episode(wheel, agent);
  agent.refresh_posterior();
  REQUIRE(agent.subset().size() == 145);
  const LaplaceSystem sys = build_system(agent.model(), agent.replay_inputs(), Likelihood::Regression,
                                         agent.noise_var(), default_prior(145, cfg.prior_precision));
  const FullPosterior full(sys);
  for (int i = 0; i < 20; ++i) {
    const Context x(std::cos(i * 0.7) * 0.9, std::sin(i * 0.7) * 0.9);
    for (int a = 0; a < kNumArms; ++a) {
      const double ref = full.variance(agent.model().param_gradient(arm_input(x, a))).total;
      CHECK(std::abs(agent.thompson_variance(x, a) - ref) <= 1e-8 * std::max(1.0, ref));
    }
  }
}

TEST_CASE("seeded runs are reproducible") {
  WheelConfig wheel;
  wheel.horizon = 80;
  for (AgentPosterior p : {AgentPosterior::GradientLaplace, AgentPosterior::GreedyLaplace,
                           AgentPosterior::SubnetDiagonal, AgentPosterior::LastK, AgentPosterior::NeuralLinear,
                           AgentPosterior::MAP}) {
    const AgentConfig cfg = small_agent(p);
    const BanditTrace a = run_bandit_seed(wheel, cfg, 3), b = run_bandit_seed(wheel, cfg, 3);
    REQUIRE(a.rounds.size() == b.rounds.size());
    for (std::size_t i = 0; i < a.rounds.size(); ++i) {
      CHECK(a.rounds[i].arm == b.rounds[i].arm);
      CHECK(a.rounds[i].reward == b.rounds[i].reward);
    }
    CHECK(parse_agent_posterior(to_string(p)) == p);
  }
}

TEST_CASE("summary over seeds and trace export") {
  WheelConfig wheel;
  wheel.horizon = 40;
  const std::vector<std::uint64_t> seeds = {0, 1, 2};
  const BanditResult res = run_bandit(wheel, small_agent(AgentPosterior::MAP), seeds);
  CHECK(res.final_regrets.size() == 3);
  const double mean = std::accumulate(res.final_regrets.begin(), res.final_regrets.end(), 0.0) / 3.0;
  CHECK(res.mean == doctest::Approx(mean));
  const auto path = std::filesystem::temp_directory_path() / "sl_trace.csv";
  write_trace_csv(path, res.traces[0], "config_hash=x seed=0");
  std::ifstream in(path);
  std::string first, header;
  std::getline(in, first);
  std::getline(in, header);
  CHECK(first == "# config_hash=x seed=0");
  CHECK(header == "round,x1,x2,arm,reward,instant_regret,cum_regret");
  std::filesystem::remove(path);
  WheelConfig short_wheel;
  short_wheel.horizon = 10;
  CHECK_THROWS_AS(run_bandit_seed(short_wheel, small_agent(AgentPosterior::MAP), 0), ConfigError);
}
