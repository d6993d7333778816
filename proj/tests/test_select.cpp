#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "oracles.hpp"
#include "sublaplace/error.hpp"
#include "sublaplace/select.hpp"

using namespace sublaplace;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

using Ids = std::vector<Index>;

}  // namespace

TEST_CASE("mean squared gradient summary") {
  Matrix one(1, 2);
  one << 3, -2;
  CHECK(gradient_summary_from_rows(one).tilde_g == vec({9, 4}));
  Matrix two(2, 2);
  two << 1, 0, 0, 1;
  CHECK(gradient_summary_from_rows(two).tilde_g == vec({0.5, 0.5}));
  const Mlp m = Mlp::initialize({3, 4, 1}, 2);
  std::mt19937_64 gen(1);
  const Matrix ref = oracle::random_matrix(gen, 9, 3);
  Matrix rows(9, m.num_params());
  for (Index i = 0; i < 9; ++i) rows.row(i) = m.param_gradient(ref.row(i).transpose()).transpose();
  CHECK((gradient_summary(m, ref).tilde_g - gradient_summary_from_rows(rows).tilde_g).norm() < 1e-13);
}

TEST_CASE("gradient-laplace keeps the largest entries") {
  CHECK(select_gradient_laplace({vec({3, 1, 5, 2})}, 2).indices == Ids{0, 2});
  CHECK(select_gradient_laplace({vec({7, 7, 7, 7, 7})}, 3).indices == Ids{0, 1, 2});
  CHECK(select_gradient_laplace({vec({3, 1, 5, 2})}, 4).indices == Ids{0, 1, 2, 3});
  CHECK_THROWS_AS(select_gradient_laplace({vec({3, 1})}, 3), SelectionError);
  CHECK_THROWS_AS(select_gradient_laplace({vec({3, 1})}, 0), SelectionError);
}

TEST_CASE("subnet diagonal keeps the smallest entries") {
  CHECK(select_subnet_diagonal(vec({3, 1, 5, 2}), 2).indices == Ids{1, 3});
  CHECK(select_subnet_diagonal(vec({4, 4, 4}), 2).indices == Ids{0, 1});
}

TEST_CASE("last-k and neural-linear follow the flattening order") {
  const Mlp ten = Mlp::initialize({1, 3, 1}, 0);
  REQUIRE(ten.num_params() == 10);
  CHECK(select_last_k(ten, 3).indices == Ids{7, 8, 9});
  CHECK(select_last_k(ten, 10).indices.size() == 10);
  CHECK(select_neural_linear(Mlp::initialize({7, 100, 100, 1}, 0)).k == 101);
  CHECK(select_neural_linear(Mlp::initialize({12, 64, 1}, 0)).k == 65);
  const Mlp single = Mlp::initialize({5, 1}, 0);
  CHECK(select_neural_linear(single).k == single.num_params());
}

TEST_CASE("greedy two-by-two schur step") {
  Matrix om(2, 2);
  om << 4, 2, 2, 3;
  const Ids pool = {0, 1};
  Matrix seen;
  GreedyTrace trace;
  trace.on_step = [&](Index, Index, const Matrix& m, std::span<const Index>) { seen = m; };
  CHECK(greedy_schur_select(om, pool, 1, trace) == Ids{0});
  REQUIRE(seen.rows() == 1);
  CHECK(seen(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("every greedy step matches the dense conditional precision") {
  std::mt19937_64 gen(41);
  for (int t = 0; t < 8; ++t) {
    const Index n = 4 + 2 * t;  // up to 18; the oracle checks pools up to 16 below
    if (n > 16) break;
    Matrix om = oracle::random_psd(gen, n, n / 2);
    om.diagonal().array() += 0.5;
    Ids pool(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = 100 + 3 * i;
    std::map<Index, Index> local;
    for (Index i = 0; i < n; ++i) local[pool[static_cast<std::size_t>(i)]] = i;
    Ids taken;
    double worst = 0.0;
    GreedyTrace trace;
    trace.on_step = [&](Index step, Index sel, const Matrix& m, std::span<const Index> rem) {
      taken.push_back(local.at(sel));
      CHECK(static_cast<Index>(taken.size()) == step);
      Ids rest;
      for (Index g : rem) rest.push_back(local.at(g));
      const Matrix ref = oracle::conditional_precision(om, taken, rest);
      worst = std::max(worst, (ref - m).cwiseAbs().maxCoeff());
      if (m.rows() > 0) CHECK(Eigen::LLT<Matrix>(m).info() == Eigen::Success);
    };
    const Ids chosen = greedy_schur_select(om, pool, n - 1, trace);
    CHECK(worst <= 1e-9);
    Index top = 0;
    om.diagonal().maxCoeff(&top);
    CHECK(chosen.front() == pool[static_cast<std::size_t>(top)]);
  }
}

TEST_CASE("greedy work is bounded by k times pool squared") {
  std::mt19937_64 gen(2);
  const Index n = 64;
  Matrix om = oracle::random_psd(gen, n, n);
  om.diagonal().array() += 1.0;
  Ids pool(n);
  std::iota(pool.begin(), pool.end(), Index{0});
  for (Index k : {1, 8, 32, 63}) {
    std::uint64_t ops = 0;
    std::vector<std::uint64_t> per_step;
    GreedyTrace trace;
    trace.entry_updates = &ops;
    trace.on_step = [&](Index, Index, const Matrix&, std::span<const Index>) { per_step.push_back(ops); };
    greedy_schur_select(om, pool, k, trace);
    CHECK(ops <= static_cast<std::uint64_t>(k * n * n));
    std::uint64_t prev = 0;
    for (std::size_t t = 0; t < per_step.size(); ++t) {
      const auto rem = static_cast<std::uint64_t>(n - static_cast<Index>(t) - 1);
      CHECK(per_step[t] - prev <= rem * rem);
      prev = per_step[t];
    }
  }
}

TEST_CASE("greedy over a system uses the top-2k pool") {
  std::mt19937_64 gen(6);
  const Index p = 30;
  RowMatrix g = oracle::random_matrix(gen, 10, p);
  const LaplaceSystem sys = system_from_gradients(g, Vector::Zero(10), Likelihood::Regression, 1.0, default_prior(p));
  const GradientSummary s = gradient_summary_from_rows(sys.jacobian);
  const SubsetSelection sel = select_greedy_laplace(sys, s, 5);
  const Ids pool = top_k_indices(s.tilde_g, 10);
  for (Index i : sel.indices) CHECK(std::binary_search(pool.begin(), pool.end(), i));
  const Ids sorted = sel.sorted();
  CHECK(sorted.size() == 5);
  CHECK(std::is_sorted(sorted.begin(), sorted.end()));
  CHECK(pool_size(PoolPolicy::Standard, 20, 30) == 30);
  CHECK(pool_size(PoolPolicy::Extended, 5, 30) == 29);
  CHECK(pool_size(PoolPolicy::Extended, 5, 3000) == 1010);
  const SubsetSelection again = select_greedy_laplace(sys, s, 5);
  CHECK(again.indices == sel.indices);
}

TEST_CASE("gradient-laplace and subnet diagonal pick disjoint sets") {
  std::mt19937_64 gen(13);
  for (int t = 0; t < 20; ++t) {
    const Index p = 40, k = 1 + t % 20;
    RowMatrix g = oracle::random_matrix(gen, 30, p);
    const LaplaceSystem sys =
        system_from_gradients(g, Vector::Zero(30), Likelihood::Regression, 0.5, default_prior(p, 2.0));
    const GradientSummary s = gradient_summary_from_rows(sys.jacobian);
    Vector sorted = s.tilde_g;
    std::sort(sorted.data(), sorted.data() + p);
    if (sorted[k - 1] == sorted[p - k]) continue;
    const Ids a = select_gradient_laplace(s, k).indices;
    const Ids b = select_subnet_diagonal(diag_precision(sys), k).indices;
    Ids both;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
    CHECK(both.empty());
  }
}

TEST_CASE("selection file round trip") {
  const auto path = std::filesystem::temp_directory_path() / "sl_sel.txt";
  SubsetSelection sel{{9, 2, 5}, SelectionMethod::GreedyLaplace, 3};
  write_selection(path, sel, 17, PoolPolicy::Extended);
  const SubsetSelection back = read_selection(path, 10);
  CHECK(back.indices == sel.indices);
  CHECK(back.method == SelectionMethod::GreedyLaplace);
  CHECK_THROWS_AS(read_selection(path, 5), SelectionError);
  std::filesystem::remove(path);
  CHECK(parse_selection_method(to_string(SelectionMethod::SubnetDiagonal)) == SelectionMethod::SubnetDiagonal);
}
