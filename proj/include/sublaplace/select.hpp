#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sublaplace/laplace.hpp"
#include "sublaplace/linalg.hpp"
#include "sublaplace/net.hpp"

namespace sublaplace {

enum class SelectionMethod { GradientLaplace, GreedyLaplace, SubnetDiagonal, LastK, NeuralLinear, Explicit };

std::string to_string(SelectionMethod m);
SelectionMethod parse_selection_method(const std::string& name);

struct SubsetSelection {
  std::vector<Index> indices;  // ascending, except GreedyLaplace (selection order)
  SelectionMethod method = SelectionMethod::Explicit;
  Index k = 0;

  std::vector<Index> sorted() const;
  static SubsetSelection make_explicit(std::vector<Index> indices, Index p);
};

struct GradientSummary {
  Vector tilde_g;  // componentwise mean squared gradient
};

GradientSummary gradient_summary(const Mlp& model, const Matrix& reference);
// Same statistic from rows of an explicit gradient matrix.
GradientSummary gradient_summary_from_rows(const Matrix& gradients);

SubsetSelection select_gradient_laplace(const GradientSummary& summary, Index k);
// `diag` is diag(Omega) (see diag_precision); keeps the k smallest entries.
SubsetSelection select_subnet_diagonal(const Vector& diag, Index k);
SubsetSelection select_last_k(const Mlp& model, Index k);
SubsetSelection select_neural_linear(const Mlp& model);

// Indices of the k largest (or smallest) entries; ties go to the lower index.
// Returned ascending.
std::vector<Index> top_k_indices(const Vector& score, Index k);
std::vector<Index> bottom_k_indices(const Vector& score, Index k);

enum class PoolPolicy {
  Standard,  // min(2k, p)
  Extended,  // min(2k + 1000, p - 1, 30000), floored at k
};

std::string to_string(PoolPolicy p);
Index pool_size(PoolPolicy policy, Index k, Index p);

struct GreedyTrace {
  // Invoked after each Schur update with the step number (1-based), the global
  // index just selected and the updated matrix over the remaining pool
  // entries, whose global indices are given in `remaining`.
  std::function<void(Index step, Index selected, const Matrix& updated, std::span<const Index> remaining)> on_step;
  // Accumulates the number of matrix entries touched by the Schur updates.
  std::uint64_t* entry_updates = nullptr;
};

// Greedy selection on an explicit pool precision. `pool` holds the global
// index of each row. Picks the largest current diagonal (ties to the lower
// global index), then replaces the matrix by the Schur complement of the
// pivot. Returns global indices in selection order.
std::vector<Index> greedy_schur_select(Matrix pool_precision, std::span<const Index> pool, Index k,
                                       const GreedyTrace& trace = {});

SubsetSelection select_greedy_laplace(const LaplaceSystem& sys, const GradientSummary& summary, Index k,
                                      PoolPolicy policy = PoolPolicy::Standard, const GreedyTrace& trace = {});

// One global index per line, preceded by '#' header lines recording method,
// k, seed and pool policy.
void write_selection(const std::filesystem::path& path, const SubsetSelection& sel, std::uint64_t seed,
                     PoolPolicy policy);
SubsetSelection read_selection(const std::filesystem::path& path, Index p);

}  // namespace sublaplace
