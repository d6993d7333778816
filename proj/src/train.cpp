#include "sublaplace/train.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "sublaplace/error.hpp"
#include "sublaplace/rng.hpp"

namespace sublaplace {

double scheduled_lr(const TrainConfig& cfg, int epoch) {
  if (cfg.lr_schedule == LrSchedule::Constant) return cfg.learning_rate;
  const double frac = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  return 0.5 * cfg.learning_rate * (1.0 + std::cos(std::numbers::pi * frac));
}

Optimizer::Optimizer(const TrainConfig& cfg, Index num_params)
    : cfg_(cfg), m_(Vector::Zero(num_params)), v_(Vector::Zero(num_params)) {}

void Optimizer::step(Vector& theta, Vector grad, double lr) {
  if (cfg_.grad_clip) {
    const double norm = grad.norm();
    if (norm > *cfg_.grad_clip) grad *= *cfg_.grad_clip / norm;
  }
  ++t_;
  if (cfg_.optimizer == OptimizerKind::SgdMomentum) {
    m_ = cfg_.momentum * m_ + grad;
    theta -= lr * m_;
    return;
  }
  const double b1 = cfg_.adam_beta1;
  const double b2 = cfg_.adam_beta2;
  m_ = b1 * m_ + (1.0 - b1) * grad;
  v_ = b2 * v_ + (1.0 - b2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  theta.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.adam_eps);
}

double sample_loss(Loss loss, double f, double y) {
  if (loss == Loss::MSE) return 0.5 * (f - y) * (f - y);
  // softplus(f) - y f, stable for large |f|
  const double sp = f > 0 ? f + std::log1p(std::exp(-f)) : std::log1p(std::exp(f));
  return sp - y * f;
}

double batch_loss_gradient(const Mlp& model, const Matrix& x, const Vector& y, std::span<const Index> rows,
                           Loss loss, Vector& grad) {
  const Index b = static_cast<Index>(rows.size());
  Matrix xb(b, x.cols());
  Vector yb(b);
  for (Index i = 0; i < b; ++i) {
    xb.row(i) = x.row(rows[static_cast<std::size_t>(i)]);
    yb[i] = y[rows[static_cast<std::size_t>(i)]];
  }
  double total = 0.0;
  grad = model.weighted_gradient(xb, [&](const Vector& f) {
    Vector w(b);
    for (Index i = 0; i < b; ++i) {
      total += sample_loss(loss, f[i], yb[i]);
      const double r = loss == Loss::MSE ? f[i] - yb[i] : sigmoid(f[i]) - yb[i];
      w[i] = r / static_cast<double>(b);
    }
    return w;
  });
  return total / static_cast<double>(b);
}

Mlp train_map(const Mlp& init, const Dataset& data, Loss loss, const TrainConfig& cfg, double prior_precision) {
  if (data.size() == 0) throw PreconditionError("training set is empty");
  if (data.dim() != init.input_dim()) throw ShapeError("dataset dimension does not match network input");
  if (loss == Loss::BCE) {
    for (Index i = 0; i < data.size(); ++i)
      if (data.y[i] != 0.0 && data.y[i] != 1.0) throw PreconditionError("BCE targets must be 0 or 1");
  }
  if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0.0))
    throw PreconditionError("invalid training configuration");
  if (prior_precision < 0.0 || cfg.weight_decay < 0.0) throw PreconditionError("penalties must be nonnegative");

  const Index n = data.size();
  const double l2 = prior_precision / static_cast<double>(n) + cfg.weight_decay;
  Vector theta = init.theta();
  Optimizer opt(cfg, theta.size());
  Rng rng(derive_seed(cfg.seed, {0x7a1}));
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Vector grad;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = scheduled_lr(cfg, epoch);
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - start);
      const Mlp current = init.with_theta(theta);
      const double batch = batch_loss_gradient(current, data.x, data.y,
                                               std::span<const Index>(order).subspan(start, len), loss, grad);
      const double penalty = 0.5 * l2 * theta.squaredNorm();
      if (!std::isfinite(batch + penalty)) throw DivergenceError(epoch, "non-finite loss");
      epoch_loss += (batch + penalty) * static_cast<double>(len);
      if (l2 > 0.0) grad += l2 * theta;
      opt.step(theta, grad, lr);
    }
    if (!std::isfinite(epoch_loss) || !theta.allFinite()) throw DivergenceError(epoch, "non-finite parameters");
  }
  return init.with_theta(std::move(theta));
}

std::vector<Mlp> ensemble_train(const Dataset& data, int members, std::span<const Index> widths, Loss loss,
                                const TrainConfig& cfg, double prior_precision) {
  if (members < 2) throw PreconditionError("an ensemble needs at least two members");
  std::vector<Mlp> out;
  out.reserve(static_cast<std::size_t>(members));
  const Index n = data.size();
  for (int b = 0; b < members; ++b) {
    Rng boot(derive_seed(cfg.seed, {0xb007, static_cast<std::uint64_t>(b)}));
    std::vector<Index> rows(static_cast<std::size_t>(n));
    for (Index& r : rows) r = static_cast<Index>(boot.below(static_cast<std::uint64_t>(n)));
    TrainConfig member_cfg = cfg;
    member_cfg.seed = derive_seed(cfg.seed, {0xe5e, static_cast<std::uint64_t>(b)});
    const Mlp init = Mlp::initialize(widths, member_cfg.seed);
    out.push_back(train_map(init, data.subset(rows), loss, member_cfg, prior_precision));
  }
  return out;
}

}  // namespace sublaplace
