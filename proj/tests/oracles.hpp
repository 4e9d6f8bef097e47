#pragma once

// Independent reference computations used only by the tests. They favour
// explicit inverses, determinants and brute-force loops over speed.

#include "tlmma/tlmma.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace oracle {

using tlmma::Index;
using tlmma::Matrix;
using tlmma::Vector;

inline Matrix random_matrix(Index r, Index c, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> z;
  Matrix m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = z(g);
  return m;
}

inline Matrix filter(const Matrix& w, double rho) {
  return Matrix::Identity(w.rows(), w.cols()) - rho * w;
}

inline Vector mean_by_inverse(const Matrix& w, double rho, const Matrix& x, const Vector& beta) {
  return filter(w, rho).inverse() * (x * beta);
}

inline Matrix annihilator(const Matrix& x) {
  return Matrix::Identity(x.rows(), x.rows()) - x * (x.transpose() * x).inverse() * x.transpose();
}

/// Full Gaussian log-likelihood (constants dropped) maximised over beta and
/// sigma2 by their closed forms at fixed rho, written without the profile.
inline double profiled_loglik(double rho, const Matrix& x, const Vector& y, const Matrix& w) {
  const double n = static_cast<double>(y.size());
  const Matrix s = filter(w, rho);
  const Vector sy = s * y;
  const Vector beta = (x.transpose() * x).ldlt().solve(x.transpose() * sy);
  const Vector e = sy - x * beta;
  const double sigma2 = e.squaredNorm() / n;
  const double full = -0.5 * n * std::log(2.0 * M_PI * sigma2) - e.squaredNorm() / (2.0 * sigma2) +
                      std::log(std::abs(s.determinant()));
  // Remove the constants so that the value is comparable with the concentrated form.
  return full + 0.5 * n * std::log(2.0 * M_PI / n) + 0.5 * n;
}

/// argmax of the concentrated likelihood over a uniform grid.
inline double grid_argmax(const tlmma::Dataset& d, double lo, double hi, double step) {
  const Matrix a = annihilator(d.X);
  const double n = static_cast<double>(d.n());
  double best = -std::numeric_limits<double>::infinity(), arg = lo;
  const Matrix& w = d.W.dense();
  const Vector wy = w * d.y;
  Eigen::EigenSolver<Matrix> ev(w, false);
  for (double r = lo; r <= hi + 1e-12; r += step) {
    const Vector asy = a * (d.y - r * wy);
    double ld = 0.0;
    for (Index i = 0; i < ev.eigenvalues().size(); ++i) ld += std::log(std::abs(1.0 - r * ev.eigenvalues()(i)));
    const double v = -0.5 * n * std::log(asy.squaredNorm()) + ld;
    if (v > best) {
      best = v;
      arg = r;
    }
  }
  return arg;
}

/// Two-stage regression: first stage fitted values of Z on H, second stage
/// least squares of y on the fitted columns.
inline Vector two_stage(const Matrix& x, const Vector& y, const Matrix& w) {
  const Index n = x.rows(), p = x.cols();
  Matrix h(n, 2 * p);
  h << x, w * x;
  Matrix z(n, p + 1);
  z << x, w * y;
  const Matrix zhat = h * h.colPivHouseholderQr().solve(z);
  return zhat.colPivHouseholderQr().solve(y);
}

/// Grid search on the 3-simplex.
inline double simplex_grid_min(const Matrix& q, const Vector& d, int steps) {
  double best = std::numeric_limits<double>::infinity();
  Vector w(3);
  for (int a = 0; a <= steps; ++a)
    for (int b = 0; a + b <= steps; ++b) {
      w << double(a) / steps, double(b) / steps, double(steps - a - b) / steps;
      best = std::min(best, w.dot(q * w) + d.dot(w));
    }
  return best;
}

/// Uniform random point on the simplex.
inline Vector simplex_point(Index m, std::mt19937_64& g) {
  std::exponential_distribution<double> e(1.0);
  Vector w(m);
  for (Index i = 0; i < m; ++i) w(i) = e(g);
  return w / w.sum();
}

inline Matrix permutation(Index n, std::uint64_t seed) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 g(seed);
  std::shuffle(idx.begin(), idx.end(), g);
  Matrix p = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) p(i, idx[static_cast<std::size_t>(i)]) = 1.0;
  return p;
}

inline tlmma::Dataset permute(const tlmma::Dataset& d, const Matrix& p) {
  tlmma::Matrix w = p * d.W.dense() * p.transpose();
  return {p * d.X, p * d.y,
          d.W.normalized() ? tlmma::WeightMatrix::from_dense(std::move(w), true)
                           : tlmma::WeightMatrix::from_dense(std::move(w))};
}

}  // namespace oracle
