#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "sublaplace/data.hpp"
#include "sublaplace/net.hpp"

namespace sublaplace {

enum class Loss { MSE, BCE };
enum class OptimizerKind { Adam, SgdMomentum };
enum class LrSchedule { Constant, CosineAnneal };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  int epochs = 100;
  int batch_size = 32;
  LrSchedule lr_schedule = LrSchedule::Constant;
  // Same L2 mechanism as the prior precision, expressed per sample: the
  // objective gains 0.5 * weight_decay * |theta|^2.
  double weight_decay = 0.0;
  std::optional<double> grad_clip;
  std::uint64_t seed = 0;
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

// Learning rate at the start of `epoch` (0-based). Cosine annealing decays to
// 0 at epoch == epochs.
double scheduled_lr(const TrainConfig& cfg, int epoch);

// Stateful first-order optimizer (Adam or heavy-ball SGD).
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, Index num_params);
  void step(Vector& theta, Vector grad, double lr);
  long steps() const noexcept { return t_; }

 private:
  TrainConfig cfg_;
  Vector m_;
  Vector v_;
  long t_ = 0;
};

// Per-sample losses: MSE is 0.5 * (f - y)^2, BCE is softplus(f) - y * f.
double sample_loss(Loss loss, double f, double y);

// Mean loss over the listed rows and its gradient (no penalty term).
double batch_loss_gradient(const Mlp& model, const Matrix& x, const Vector& y, std::span<const Index> rows,
                           Loss loss, Vector& grad);

// Mini-batch training of the penalized objective
//   mean_n loss_n + 0.5 * (prior_precision / N + weight_decay) * |theta|^2,
// i.e. the negative log posterior divided by N. Deterministic given cfg.seed.
Mlp train_map(const Mlp& init, const Dataset& data, Loss loss, const TrainConfig& cfg, double prior_precision);

// B >= 2 members, each initialised and trained on its own bootstrap resample
// with seeds derived from cfg.seed.
std::vector<Mlp> ensemble_train(const Dataset& data, int members, std::span<const Index> widths, Loss loss,
                                const TrainConfig& cfg, double prior_precision);

}  // namespace sublaplace
