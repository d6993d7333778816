#include "sublaplace/bandit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "sublaplace/error.hpp"
#include "sublaplace/metrics.hpp"

namespace sublaplace {

void WheelConfig::validate() const {
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("wheel delta must lie in (0, 1)");
  if (!(mu_high > mu_center)) throw ConfigError("wheel mu_high must exceed mu_center");
  if (!(reward_std > 0.0)) throw ConfigError("wheel reward_std must be positive");
  if (horizon < 1) throw ConfigError("wheel horizon must be positive");
}

int quadrant_of(const Context& x) {
  const bool right = x[0] >= 0.0, up = x[1] >= 0.0;
  if (right && up) return 1;
  if (!right && up) return 2;
  if (!right) return 3;
  return 4;
}

namespace {

void check_arm(int arm) {
  if (arm < 0 || arm >= kNumArms) throw ProtocolError("invalid arm " + std::to_string(arm));
}

}  // namespace

double arm_mean(const WheelConfig& cfg, const Context& x, int arm) {
  check_arm(arm);
  const bool outer = x.norm() > cfg.delta;
  if (arm == 0) return cfg.mu_center + (outer ? 0.0 : cfg.inner_center_bonus);
  return outer && arm == quadrant_of(x) ? cfg.mu_high : cfg.mu_center;
}

double optimal_mean(const WheelConfig& cfg, const Context& x) {
  double best = arm_mean(cfg, x, 0);
  for (int a = 1; a < kNumArms; ++a) best = std::max(best, arm_mean(cfg, x, a));
  return best;
}

Context sample_disk(Rng& rng) {
  for (;;) {
    const Context x(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
    if (x.squaredNorm() <= 1.0) return x;
  }
}

WheelEnvironment::WheelEnvironment(WheelConfig cfg) : cfg_(cfg) { cfg_.validate(); }

Context WheelEnvironment::context(long round) const {
  Rng rng(derive_seed(cfg_.seed, {0xc0de, static_cast<std::uint64_t>(round)}));
  return sample_disk(rng);
}

double WheelEnvironment::reward(long round, int arm, const Context& x) const {
  const double mean = arm_mean(cfg_, x, arm);
  Rng rng(derive_seed(cfg_.seed, {0x5eed, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(arm)}));
  return rng.normal(mean, cfg_.reward_std);
}

StepResult WheelEnvironment::step(long round, int arm) const {
  check_arm(arm);
  const Context x = context(round);
  return {x, reward(round, arm, x), arm_mean(cfg_, x, arm), optimal_mean(cfg_, x)};
}

StepResult wheel_step(const WheelConfig& cfg, long round, int arm) { return WheelEnvironment(cfg).step(round, arm); }

int OraclePolicy::choose(long, const Context& x) {
  int best = 0;
  for (int a = 1; a < kNumArms; ++a)
    if (arm_mean(cfg_, x, a) > arm_mean(cfg_, x, best)) best = a;
  return best;
}

BanditTrace run_episode(const WheelConfig& cfg, BanditPolicy& policy) {
  const WheelEnvironment env(cfg);
  BanditTrace trace;
  trace.rounds.reserve(static_cast<std::size_t>(cfg.horizon));
  double cum = 0.0;
  for (long r = 0; r < cfg.horizon; ++r) {
    const Context x = env.context(r);
    const int arm = policy.choose(r, x);
    check_arm(arm);
    const double reward = env.reward(r, arm, x);
    const double regret = std::max(optimal_mean(cfg, x) - arm_mean(cfg, x, arm), 0.0);
    cum += regret;
    policy.observe(r, x, arm, reward);
    trace.rounds.push_back({r, x, arm, reward, regret, cum});
  }
  return trace;
}

std::string to_string(AgentPosterior p) {
  switch (p) {
    case AgentPosterior::GradientLaplace: return "gradient_laplace";
    case AgentPosterior::GreedyLaplace: return "greedy_laplace";
    case AgentPosterior::SubnetDiagonal: return "subnet_diagonal";
    case AgentPosterior::LastK: return "last_k";
    case AgentPosterior::NeuralLinear: return "neural_linear";
    case AgentPosterior::MAP: return "map";
  }
  return "unknown";
}

AgentPosterior parse_agent_posterior(const std::string& name) {
  for (AgentPosterior p : {AgentPosterior::GradientLaplace, AgentPosterior::GreedyLaplace,
                           AgentPosterior::SubnetDiagonal, AgentPosterior::LastK, AgentPosterior::NeuralLinear,
                           AgentPosterior::MAP})
    if (to_string(p) == name) return p;
  throw ConfigError("unknown bandit posterior '" + name + "'");
}

void AgentConfig::validate() const {
  if (k < 1) throw ConfigError("agent k must be positive");
  if (warm_pulls_per_arm < 0 || interact_steps < 1 || sgd_updates < 0 || replay_batch < 1)
    throw ConfigError("agent schedule values must be positive");
  if (!(lr > 0.0) || !(grad_clip > 0.0) || !(prior_precision > 0.0))
    throw ConfigError("agent lr, grad_clip and prior_precision must be positive");
  if (residual_window < 1) throw ConfigError("agent residual_window must be positive");
  if (hidden.empty()) throw ConfigError("agent needs at least one hidden layer");
}

Vector arm_input(const Context& x, int arm) {
  check_arm(arm);
  Vector in = Vector::Zero(kInputDim);
  in[0] = x[0];
  in[1] = x[1];
  in[2 + arm] = 1.0;
  return in;
}

namespace {

std::vector<Index> agent_widths(const AgentConfig& cfg) {
  std::vector<Index> w{kInputDim};
  w.insert(w.end(), cfg.hidden.begin(), cfg.hidden.end());
  w.push_back(1);
  return w;
}

Mlp agent_network(const AgentConfig& cfg) {
  cfg.validate();
  const std::vector<Index> widths = agent_widths(cfg);
  Mlp m = Mlp::initialize(widths, derive_seed(cfg.seed, {0x4e7}));
  if (cfg.hidden == std::vector<Index>{100, 100} && m.num_params() != 11001)
    throw ShapeError("wheel network must have 11001 parameters");
  return m;
}

TrainConfig agent_train_config(const AgentConfig& cfg) {
  TrainConfig t;
  t.optimizer = OptimizerKind::Adam;
  t.learning_rate = cfg.lr;
  t.grad_clip = cfg.grad_clip;
  t.seed = cfg.seed;
  return t;
}

}  // namespace

ThompsonAgent::ThompsonAgent(AgentConfig cfg)
    : cfg_(std::move(cfg)),
      model_(agent_network(cfg_)),
      optimizer_(agent_train_config(cfg_), model_.num_params()),
      rng_(derive_seed(cfg_.seed, {0xa6e})) {
  for (int a = 0; a < kNumArms; ++a)
    for (int j = 0; j < cfg_.warm_pulls_per_arm; ++j) warm_arms_.push_back(a);
  rng_.shuffle(warm_arms_);
}

Matrix ThompsonAgent::replay_inputs() const {
  const Index n = static_cast<Index>(rewards_.size());
  return Eigen::Map<const RowMatrix>(inputs_.data(), n, kInputDim);
}

Vector ThompsonAgent::replay_rewards() const {
  return Eigen::Map<const Vector>(rewards_.data(), static_cast<Index>(rewards_.size()));
}

const std::vector<Index>& ThompsonAgent::subset() const {
  static const std::vector<Index> empty;
  return posterior_ ? posterior_->indices() : empty;
}

void ThompsonAgent::set_model(Mlp model) {
  if (model.layers() != model_.layers()) throw ShapeError("replacement network has a different architecture");
  model_ = std::move(model);
}

double ThompsonAgent::predicted_mean(const Context& x, int arm) const { return model_.forward(arm_input(x, arm)); }

double ThompsonAgent::thompson_variance(const Context& x, int arm) const {
  if (!posterior_) return noise_var_;
  return posterior_->variance(model_.param_gradient(arm_input(x, arm))).total;
}

int ThompsonAgent::choose(long round, const Context& x) {
  if (round < warm_rounds()) return warm_arms_[static_cast<std::size_t>(round)];
  if ((round - warm_rounds()) % cfg_.interact_steps == 0) train_phase(round);

  const bool sample = cfg_.posterior != AgentPosterior::MAP;
  int best = 0;
  double best_value = -std::numeric_limits<double>::infinity();
  Vector g(model_.num_params());
  for (int a = 0; a < kNumArms; ++a) {
    const double f = model_.param_gradient(arm_input(x, a), g);
    if (!std::isfinite(f)) throw AgentFault(round, "non-finite network output for arm " + std::to_string(a));
    double value = f;
    if (sample) {
      const double var = posterior_ ? posterior_->variance(g).total : noise_var_;
      value += std::sqrt(var) * rng_.normal();
    }
    if (value > best_value) {
      best_value = value;
      best = a;
    }
  }
  return best;
}

void ThompsonAgent::observe(long, const Context& x, int arm, double reward) {
  const Vector in = arm_input(x, arm);
  inputs_.insert(inputs_.end(), in.data(), in.data() + kInputDim);
  rewards_.push_back(reward);
}

void ThompsonAgent::train_phase(long round) {
  if (rewards_.empty()) throw AgentFault(round, "training requested with an empty replay buffer");
  const Matrix x = replay_inputs();
  const Vector y = replay_rewards();
  const Index n = x.rows();
  Vector theta = model_.theta();
  Vector grad;
  std::vector<Index> batch(static_cast<std::size_t>(cfg_.replay_batch));
  for (int u = 0; u < cfg_.sgd_updates; ++u) {
    for (Index& b : batch) b = static_cast<Index>(rng_.below(static_cast<std::uint64_t>(n)));
    const Mlp current = model_.with_theta(theta);
    const double loss = batch_loss_gradient(current, x, y, batch, Loss::MSE, grad);
    if (!std::isfinite(loss)) throw AgentFault(round, "non-finite training loss");
    optimizer_.step(theta, grad, cfg_.lr);
  }
  if (!theta.allFinite()) throw AgentFault(round, "non-finite parameters after training");
  model_ = model_.with_theta(std::move(theta));
  ++phases_;
  try {
    refresh_posterior();
  } catch (const NumericError& e) {
    throw AgentFault(round, e.what());
  }
}

double ThompsonAgent::estimate_noise_var() const {
  const Index n = static_cast<Index>(rewards_.size());
  const Index w = std::min<Index>(n, cfg_.residual_window);
  if (w == 0) return 1.0;
  const Matrix x = replay_inputs().bottomRows(w);
  const Vector r = model_.forward_batch(x) - replay_rewards().tail(w);
  const double mean = r.mean();
  return std::max((r.array() - mean).square().mean(), 1e-6);
}

std::vector<Index> ThompsonAgent::choose_subset(const BatchTape& tape, const Matrix&) const {
  const Index p = model_.num_params();
  const Index k = std::min(cfg_.k, p);
  switch (cfg_.posterior) {
    case AgentPosterior::GradientLaplace:
      return top_k_indices(mean_squared_gradient(model_, tape), k);
    case AgentPosterior::SubnetDiagonal: {
      const double n = static_cast<double>(tape.outputs.size());
      const Vector diag = (n / noise_var_) * mean_squared_gradient(model_, tape).array() + cfg_.prior_precision;
      return bottom_k_indices(diag, k);
    }
    case AgentPosterior::GreedyLaplace: {
      const Vector tilde = mean_squared_gradient(model_, tape);
      const std::vector<Index> pool = top_k_indices(tilde, pool_size(cfg_.pool, k, p));
      const Matrix cols = jacobian_columns(model_, tape, pool) / std::sqrt(noise_var_);
      Matrix omega = cols.transpose() * cols;
      omega.diagonal().array() += cfg_.prior_precision;
      std::vector<Index> picked = greedy_schur_select(std::move(omega), pool, k);
      std::sort(picked.begin(), picked.end());
      return picked;
    }
    case AgentPosterior::LastK:
      return select_last_k(model_, k).indices;
    case AgentPosterior::NeuralLinear:
      return select_neural_linear(model_).indices;
    case AgentPosterior::MAP:
      break;
  }
  return {};
}

void ThompsonAgent::refresh_posterior() {
  noise_var_ = estimate_noise_var();
  if (cfg_.posterior == AgentPosterior::MAP || rewards_.empty()) {
    posterior_.reset();
    return;
  }
  const Matrix x = replay_inputs();
  const BatchTape tape = model_.tape(x);
  std::vector<Index> s = choose_subset(tape, x);
  const Matrix cols = jacobian_columns(model_, tape, s) / std::sqrt(noise_var_);
  const Vector prior = Vector::Constant(static_cast<Index>(s.size()), cfg_.prior_precision);
  posterior_.emplace(std::move(s), cols, prior, noise_var_, Likelihood::Regression);
}

BanditTrace run_bandit_seed(const WheelConfig& wheel, const AgentConfig& agent, std::uint64_t seed) {
  WheelConfig w = wheel;
  w.seed = seed;
  AgentConfig a = agent;
  a.seed = derive_seed(seed, {0xa9e7});
  if (w.horizon < static_cast<long>(a.warm_pulls_per_arm) * kNumArms)
    throw ConfigError("horizon shorter than the warm start");
  ThompsonAgent policy(a);
  return run_episode(w, policy);
}

BanditResult run_bandit(const WheelConfig& wheel, const AgentConfig& agent, std::span<const std::uint64_t> seeds) {
  BanditResult res;
  for (std::uint64_t s : seeds) {
    res.seeds.push_back(s);
    res.traces.push_back(run_bandit_seed(wheel, agent, s));
    res.final_regrets.push_back(res.traces.back().final_regret());
  }
  std::tie(res.mean, res.stderr_) = mean_stderr(res.final_regrets);
  return res;
}

void write_trace_csv(const std::filesystem::path& path, const BanditTrace& trace, const std::string& header_comment) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  out << "round,x1,x2,arm,reward,instant_regret,cum_regret\n";
  for (const BanditRound& r : trace.rounds)
    out << r.round << ',' << format_double(r.context[0]) << ',' << format_double(r.context[1]) << ',' << r.arm << ','
        << format_double(r.reward) << ',' << format_double(r.instant_regret) << ',' << format_double(r.cum_regret)
        << "\n";
}

}  // namespace sublaplace
