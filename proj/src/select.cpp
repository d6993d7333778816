#include "sublaplace/select.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "sublaplace/error.hpp"

namespace sublaplace {

std::string to_string(SelectionMethod m) {
  switch (m) {
    case SelectionMethod::GradientLaplace: return "gradient_laplace";
    case SelectionMethod::GreedyLaplace: return "greedy_laplace";
    case SelectionMethod::SubnetDiagonal: return "subnet_diagonal";
    case SelectionMethod::LastK: return "last_k";
    case SelectionMethod::NeuralLinear: return "neural_linear";
    case SelectionMethod::Explicit: return "explicit";
  }
  return "unknown";
}

SelectionMethod parse_selection_method(const std::string& name) {
  for (SelectionMethod m : {SelectionMethod::GradientLaplace, SelectionMethod::GreedyLaplace,
                            SelectionMethod::SubnetDiagonal, SelectionMethod::LastK, SelectionMethod::NeuralLinear,
                            SelectionMethod::Explicit})
    if (to_string(m) == name) return m;
  throw SelectionError("unknown selection method '" + name + "'");
}

std::vector<Index> SubsetSelection::sorted() const {
  std::vector<Index> out = indices;
  std::sort(out.begin(), out.end());
  return out;
}

SubsetSelection SubsetSelection::make_explicit(std::vector<Index> indices, Index p) {
  validate_indices(indices, p);
  std::sort(indices.begin(), indices.end());
  const Index k = static_cast<Index>(indices.size());
  return {std::move(indices), SelectionMethod::Explicit, k};
}

GradientSummary gradient_summary(const Mlp& model, const Matrix& reference) {
  if (reference.rows() == 0) throw PreconditionError("reference set is empty");
  return {mean_squared_gradient(model, reference)};
}

GradientSummary gradient_summary_from_rows(const Matrix& gradients) {
  if (gradients.rows() == 0) throw PreconditionError("reference set is empty");
  return {gradients.colwise().squaredNorm().transpose() / static_cast<double>(gradients.rows())};
}

namespace {

void check_k(Index k, Index p) {
  if (k < 1 || k > p)
    throw SelectionError("subset size k=" + std::to_string(k) + " must lie in [1, " + std::to_string(p) + "]");
}

template <typename Better>
std::vector<Index> extreme_k(const Vector& score, Index k, Better better) {
  check_k(k, score.size());
  std::vector<Index> order(static_cast<std::size_t>(score.size()));
  std::iota(order.begin(), order.end(), Index{0});
  auto cmp = [&](Index a, Index b) {
    if (score[a] != score[b]) return better(score[a], score[b]);
    return a < b;
  };
  std::partial_sort(order.begin(), order.begin() + k, order.end(), cmp);
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace

std::vector<Index> top_k_indices(const Vector& score, Index k) {
  return extreme_k(score, k, [](double a, double b) { return a > b; });
}

std::vector<Index> bottom_k_indices(const Vector& score, Index k) {
  return extreme_k(score, k, [](double a, double b) { return a < b; });
}

SubsetSelection select_gradient_laplace(const GradientSummary& summary, Index k) {
  return {top_k_indices(summary.tilde_g, k), SelectionMethod::GradientLaplace, k};
}

SubsetSelection select_subnet_diagonal(const Vector& diag, Index k) {
  return {bottom_k_indices(diag, k), SelectionMethod::SubnetDiagonal, k};
}

SubsetSelection select_last_k(const Mlp& model, Index k) {
  const Index p = model.num_params();
  check_k(k, p);
  std::vector<Index> idx(static_cast<std::size_t>(k));
  std::iota(idx.begin(), idx.end(), p - k);
  return {std::move(idx), SelectionMethod::LastK, k};
}

SubsetSelection select_neural_linear(const Mlp& model) {
  const std::size_t last = model.layers().size() - 1;
  const Index begin = model.layer_offset(last);
  const Index k = model.num_params() - begin;
  std::vector<Index> idx(static_cast<std::size_t>(k));
  std::iota(idx.begin(), idx.end(), begin);
  return {std::move(idx), SelectionMethod::NeuralLinear, k};
}

std::string to_string(PoolPolicy p) { return p == PoolPolicy::Standard ? "standard" : "extended"; }

Index pool_size(PoolPolicy policy, Index k, Index p) {
  check_k(k, p);
  if (policy == PoolPolicy::Standard) return std::min(2 * k, p);
  return std::max(k, std::min({2 * k + 1000, p - 1, Index{30000}}));
}

std::vector<Index> greedy_schur_select(Matrix m, std::span<const Index> pool, Index k, const GreedyTrace& trace) {
  const Index n = m.rows();
  if (m.cols() != n || static_cast<Index>(pool.size()) != n) throw ShapeError("pool matrix and pool size differ");
  check_k(k, n);
  std::vector<Index> perm(pool.begin(), pool.end());
  std::vector<Index> selected;
  selected.reserve(static_cast<std::size_t>(k));
  Index active = n;
  for (Index step = 1; step <= k; ++step) {
    Index q = 0;
    for (Index i = 1; i < active; ++i) {
      const double di = m(i, i), dq = m(q, q);
      if (di > dq || (di == dq && perm[static_cast<std::size_t>(i)] < perm[static_cast<std::size_t>(q)])) q = i;
    }
    const double pivot = m(q, q);
    if (!(pivot > 1e-12))
      throw NumericError("degenerate pivot " + std::to_string(pivot) + " at greedy step " + std::to_string(step));
    selected.push_back(perm[static_cast<std::size_t>(q)]);

    const Index last = active - 1;
    if (q != last) {
      m.row(q).head(active).swap(m.row(last).head(active));
      m.col(q).head(active).swap(m.col(last).head(active));
      std::swap(perm[static_cast<std::size_t>(q)], perm[static_cast<std::size_t>(last)]);
    }
    const Vector c = m.col(last).head(last);
    m.topLeftCorner(last, last).noalias() -= (c * c.transpose()) / pivot;
    if (trace.entry_updates) *trace.entry_updates += static_cast<std::uint64_t>(last * last);
    active = last;
    if (trace.on_step)
      trace.on_step(step, selected.back(), m.topLeftCorner(active, active),
                    std::span<const Index>(perm.data(), static_cast<std::size_t>(active)));
  }
  return selected;
}

SubsetSelection select_greedy_laplace(const LaplaceSystem& sys, const GradientSummary& summary, Index k,
                                      PoolPolicy policy, const GreedyTrace& trace) {
  const Index p = sys.num_params();
  if (summary.tilde_g.size() != p) throw ShapeError("gradient summary length must equal parameter count");
  const Index pool_n = pool_size(policy, k, p);
  const std::vector<Index> pool = top_k_indices(summary.tilde_g, pool_n);
  Matrix omega = subset_precision(sys, pool);
  std::vector<Index> chosen = greedy_schur_select(std::move(omega), pool, k, trace);
  return {std::move(chosen), SelectionMethod::GreedyLaplace, k};
}

void write_selection(const std::filesystem::path& path, const SubsetSelection& sel, std::uint64_t seed,
                     PoolPolicy policy) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write selection file " + path.string());
  out << "# method: " << to_string(sel.method) << "\n";
  out << "# k: " << sel.k << "\n";
  out << "# seed: " << seed << "\n";
  out << "# pool: " << to_string(policy) << "\n";
  for (Index i : sel.indices) out << i << "\n";
}

SubsetSelection read_selection(const std::filesystem::path& path, Index p) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot read selection file " + path.string());
  SubsetSelection sel;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string key = "# method: ";
      if (line.rfind(key, 0) == 0) sel.method = parse_selection_method(line.substr(key.size()));
      continue;
    }
    std::istringstream is(line);
    Index v = 0;
    if (!(is >> v)) throw IngestError("selection file: bad index line '" + line + "'");
    sel.indices.push_back(v);
  }
  validate_indices(sel.indices, p);
  sel.k = static_cast<Index>(sel.indices.size());
  return sel;
}

}  // namespace sublaplace
