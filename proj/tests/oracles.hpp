// Independent reference implementations used as test oracles. Nothing here
// calls into the library's numerical routines beyond reading model layouts.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "sublaplace/laplace.hpp"
#include "sublaplace/net.hpp"

namespace oracle {

using sublaplace::Index;
using sublaplace::Matrix;
using sublaplace::Vector;

// Plain loop forward pass straight from the frozen layout. Records every
// pre-activation when `preacts` is given.
inline double forward(const sublaplace::Mlp& m, const Vector& x, std::vector<double>* preacts = nullptr) {
  std::vector<double> a(x.data(), x.data() + x.size());
  const Vector& th = m.theta();
  Index off = 0;
  for (const auto& l : m.layers()) {
    std::vector<double> z(static_cast<std::size_t>(l.out_dim));
    for (Index o = 0; o < l.out_dim; ++o) {
      double s = 0.0;
      for (Index i = 0; i < l.in_dim; ++i) s += th[off + o * l.in_dim + i] * a[static_cast<std::size_t>(i)];
      s += th[off + l.in_dim * l.out_dim + o];
      z[static_cast<std::size_t>(o)] = s;
      if (preacts) preacts->push_back(s);
    }
    if (l.activation == sublaplace::Activation::ReLU)
      for (double& v : z) v = v > 0.0 ? v : 0.0;
    a = std::move(z);
    off += l.num_params();
  }
  return a[0];
}

inline Vector central_difference(const sublaplace::Mlp& m, const Vector& x, double h) {
  Vector g(m.num_params());
  for (Index j = 0; j < m.num_params(); ++j) {
    Vector tp = m.theta(), tm = m.theta();
    tp[j] += h;
    tm[j] -= h;
    g[j] = (forward(m.with_theta(tp), x) - forward(m.with_theta(tm), x)) / (2.0 * h);
  }
  return g;
}

inline Matrix random_matrix(std::mt19937_64& gen, Index r, Index c, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = nd(gen);
  return m;
}

// Dense precision assembled from raw gradients, independent of the library.
inline Matrix dense_omega(const Matrix& raw_grads, double noise_var, const Vector& prior) {
  Matrix om = raw_grads.transpose() * raw_grads / noise_var;
  om.diagonal() += prior;
  return om;
}

// g^T Omega^{-1} g by a full-pivot LU solve.
inline double quad_inverse(const Matrix& omega, const Vector& g) {
  return g.dot(omega.fullPivLu().solve(g));
}

// g^T ([Omega_SS]^0)^+ g with the zero-padded matrix and a dense pseudoinverse
// built from the complete orthogonal decomposition.
inline double quad_padded_pinv(const Matrix& omega, const std::vector<Index>& s, const Vector& g) {
  const Index p = omega.rows();
  Matrix padded = Matrix::Zero(p, p);
  for (Index a : s)
    for (Index b : s) padded(a, b) = omega(a, b);
  const Matrix pinv = padded.completeOrthogonalDecomposition().pseudoInverse();
  return g.dot(pinv * g);
}

// Dense Schur complement: conditional precision of `rest` after removing `taken`.
inline Matrix conditional_precision(const Matrix& m, const std::vector<Index>& taken, const std::vector<Index>& rest) {
  const auto sub = [&](const std::vector<Index>& r, const std::vector<Index>& c) {
    Matrix out(static_cast<Index>(r.size()), static_cast<Index>(c.size()));
    for (std::size_t i = 0; i < r.size(); ++i)
      for (std::size_t j = 0; j < c.size(); ++j) out(static_cast<Index>(i), static_cast<Index>(j)) = m(r[i], c[j]);
    return out;
  };
  const Matrix arr = sub(rest, rest);
  if (taken.empty()) return arr;
  return arr - sub(rest, taken) * sub(taken, taken).inverse() * sub(taken, rest);
}

inline Matrix random_psd(std::mt19937_64& gen, Index p, Index rank) {
  const Matrix a = random_matrix(gen, p, rank);
  return a * a.transpose();
}

}  // namespace oracle
