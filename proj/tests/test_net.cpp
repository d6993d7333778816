#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "sublaplace/error.hpp"
#include "sublaplace/net.hpp"
#include "sublaplace/train.hpp"

using namespace sublaplace;

namespace {

Mlp affine(double w, double b) {
  Vector th(2);
  th << w, b;
  return Mlp({{1, 1, Activation::Identity}}, th);
}

Mlp random_net(std::uint64_t seed, std::vector<Index> widths) {
  Mlp m = Mlp::initialize(widths, seed);
  std::mt19937_64 gen(seed + 99);
  std::normal_distribution<double> nd(0.0, 0.3);
  Vector th = m.theta();
  for (Index i = 0; i < th.size(); ++i) th[i] += nd(gen);  // non-zero biases too
  return m.with_theta(th);
}

}  // namespace

TEST_CASE("affine layer forward and gradient") {
  const Mlp m = affine(2.0, 1.0);
  Vector x(1);
  x << 3.0;
  CHECK(m.forward(x) == 7.0);
  const Vector g = m.param_gradient(x);
  CHECK(g[0] == 3.0);
  CHECK(g[1] == 1.0);
}

TEST_CASE("zero parameters give zero output") {
  Mlp m = Mlp::initialize({4, 6, 5, 1}, 3);
  m = m.with_theta(Vector::Zero(m.num_params()));
  CHECK(m.forward(Vector::Ones(4)) == 0.0);
}

TEST_CASE("two-layer forward matches a loop implementation") {
  const Mlp m = random_net(11, {3, 4, 1});
  std::mt19937_64 gen(5);
  for (int t = 0; t < 10; ++t) {
    const Vector x = oracle::random_matrix(gen, 3, 1);
    CHECK(m.forward(x) == doctest::Approx(oracle::forward(m, x)).epsilon(1e-14));
  }
}

TEST_CASE("relu at exactly zero has zero subgradient") {
  // 1 -> 1 (ReLU) -> 1 with the hidden pre-activation pinned at 0.
  Vector th(4);
  th << 1.0, 0.0, 2.0, 0.5;
  const Mlp m({{1, 1, Activation::ReLU}, {1, 1, Activation::Identity}}, th);
  const Vector g = m.param_gradient(Vector::Zero(1));
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 0.0);  // hidden activation is 0
  CHECK(g[3] == 1.0);
}

TEST_CASE("input dimension mismatch is a shape error") {
  const Mlp m = Mlp::initialize({3, 2, 1}, 0);
  CHECK_THROWS_AS(m.forward(Vector::Ones(2)), ShapeError);
  CHECK_THROWS_AS(m.param_gradient(Vector::Ones(4)), ShapeError);
  CHECK_THROWS_AS(m.forward_batch(Matrix::Ones(2, 5)), ShapeError);
}

TEST_CASE("gradient agrees with central differences") {
  std::mt19937_64 gen(123);
  const std::vector<std::vector<Index>> shapes = {{2, 5, 1}, {4, 8, 6, 1}, {3, 10, 10, 10, 1}, {1, 1}};
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    const Mlp m = random_net(40 + s, shapes[s]);
    for (int t = 0; t < 3; ++t) {
      const Vector x = oracle::random_matrix(gen, shapes[s][0], 1);
      std::vector<double> z;
      oracle::forward(m, x, &z);
      bool near_kink = false;
      for (double v : z) near_kink |= std::abs(v) < 1e-8;
      if (near_kink) continue;
      const Vector g = m.param_gradient(x);
      const Vector fd = oracle::central_difference(m, x, 1e-5);
      const double rel = (g - fd).lpNorm<Eigen::Infinity>() / std::max(fd.lpNorm<Eigen::Infinity>(), 1e-12);
      CHECK(rel <= 1e-5);
    }
  }
}

TEST_CASE("flattened layout: zeroing a layer slice") {
  const Mlp m = random_net(7, {3, 4, 2, 1});
  const Vector x = Vector::LinSpaced(3, -1.0, 1.5);
  for (std::size_t l = 0; l < m.layers().size(); ++l) {
    Vector th = m.theta();
    const Index w_end = m.bias_offset(l);
    for (Index i = m.layer_offset(l); i < w_end; ++i) th[i] = 0.0;
    // Structured view: locate() must agree that every zeroed entry is a weight of layer l.
    for (Index i = m.layer_offset(l); i < w_end; ++i) {
      const ParamLocation loc = m.locate(i);
      CHECK(loc.layer == l);
      CHECK(loc.col >= 0);
      CHECK(i - m.layer_offset(l) == loc.row * m.layers()[l].in_dim + loc.col);
    }
    const Mlp z = m.with_theta(th);
    CHECK(z.forward(x) == doctest::Approx(oracle::forward(z, x)).epsilon(1e-14));
  }
  CHECK(m.locate(m.bias_offset(0)).col == -1);
}

TEST_CASE("batched paths agree with single-sample gradients") {
  const Mlp m = random_net(3, {4, 6, 5, 1});
  std::mt19937_64 gen(9);
  const Matrix x = oracle::random_matrix(gen, 7, 4);
  const RowMatrix jac = jacobian(m, x);
  const Vector out = m.forward_batch(x);
  Vector msq = Vector::Zero(m.num_params());
  for (Index i = 0; i < x.rows(); ++i) {
    const Vector g = m.param_gradient(x.row(i).transpose());
    CHECK((jac.row(i).transpose() - g).norm() < 1e-12);
    CHECK(out[i] == doctest::Approx(m.forward(x.row(i).transpose())));
    msq += g.cwiseProduct(g);
  }
  msq /= 7.0;
  CHECK((mean_squared_gradient(m, x) - msq).norm() < 1e-12);
  const std::vector<Index> cols = {0, 5, 17, m.num_params() - 1};
  const Matrix jc = jacobian_columns(m, x, cols);
  for (std::size_t c = 0; c < cols.size(); ++c)
    CHECK((jc.col(static_cast<Index>(c)) - jac.col(cols[c])).norm() < 1e-12);
}

TEST_CASE("checkpoint round trip is lossless") {
  const Mlp m = random_net(21, {5, 7, 3, 1});
  const Mlp back = deserialize_model(serialize_model(m));
  CHECK(back.layers() == m.layers());
  CHECK(back.seed() == m.seed());
  CHECK((back.theta().array() == m.theta().array()).all());
  const auto path = std::filesystem::temp_directory_path() / "sublaplace_ckpt_test.txt";
  save_model(m, path);
  CHECK((load_model(path).theta().array() == m.theta().array()).all());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(deserialize_model("garbage"), IngestError);
}

TEST_CASE("training a single affine unit reaches the minimizer") {
  Dataset d;
  d.x = Matrix::Ones(1, 1);
  d.y = Vector::Constant(1, 2.0);
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::SgdMomentum;
  cfg.learning_rate = 0.05;
  cfg.epochs = 2000;
  cfg.batch_size = 1;
  const Mlp fit = train_map(affine(0.0, 0.0), d, Loss::MSE, cfg, 0.0);
  CHECK(std::abs(fit.forward(Vector::Ones(1)) - 2.0) < 1e-3);
}

TEST_CASE("training is bitwise deterministic") {
  Dataset d;
  std::mt19937_64 gen(4);
  d.x = oracle::random_matrix(gen, 64, 3);
  d.y = d.x.col(0).array().sin();
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 8;
  cfg.seed = 77;
  const Mlp init = Mlp::initialize({3, 16, 1}, 1);
  const Mlp a = train_map(init, d, Loss::MSE, cfg, 1.0);
  const Mlp b = train_map(init, d, Loss::MSE, cfg, 1.0);
  CHECK((a.theta().array() == b.theta().array()).all());
  cfg.seed = 78;
  CHECK((train_map(init, d, Loss::MSE, cfg, 1.0).theta().array() != a.theta().array()).any());
}

TEST_CASE("divergence is reported with its epoch") {
  Dataset d;
  d.x = Matrix::Ones(1, 1);
  d.y = Vector::Constant(1, 2.0);
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::SgdMomentum;
  cfg.learning_rate = 1e200;
  cfg.epochs = 10;
  cfg.batch_size = 1;
  CHECK_THROWS_AS(train_map(affine(0.0, 0.0), d, Loss::MSE, cfg, 0.0), DivergenceError);
}

TEST_CASE("ensembles need two members and differ between members") {
  Dataset d;
  std::mt19937_64 gen(8);
  d.x = oracle::random_matrix(gen, 40, 2);
  d.y = d.x.col(1);
  TrainConfig cfg;
  cfg.epochs = 2;
  const std::vector<Index> widths = {2, 8, 1};
  CHECK_THROWS_AS(ensemble_train(d, 1, widths, Loss::MSE, cfg, 1.0), PreconditionError);
  const auto members = ensemble_train(d, 2, widths, Loss::MSE, cfg, 1.0);
  REQUIRE(members.size() == 2);
  CHECK((members[0].theta().array() != members[1].theta().array()).any());
}

TEST_CASE("cosine schedule reaches zero at the last epoch") {
  TrainConfig cfg;
  cfg.lr_schedule = LrSchedule::CosineAnneal;
  cfg.epochs = 10;
  CHECK(scheduled_lr(cfg, 0) == doctest::Approx(cfg.learning_rate));
  CHECK(scheduled_lr(cfg, 10) == doctest::Approx(0.0));
  CHECK(scheduled_lr(cfg, 5) == doctest::Approx(cfg.learning_rate / 2));
}
