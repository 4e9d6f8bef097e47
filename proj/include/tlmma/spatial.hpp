#pragma once

// Dense spatial weight matrices and the spatial filter S(rho) = I - rho W.

#include "tlmma/types.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace tlmma {

enum class GridDirection { horizontal, vertical };

// Closed interval of admissible spatial effect parameters.
struct RhoInterval {
  double lower = -0.999;
  double upper = 0.999;

  bool contains(double rho) const { return rho >= lower && rho <= upper; }
};

inline constexpr double kNormalizedRhoBound = 0.999;

/// Immutable dense n x n spatial weight matrix with zero diagonal.
///
/// Copies are cheap handles onto shared storage. The eigenvalues needed by
/// the likelihood are computed on first use (thread-safe) and cached.
class WeightMatrix {
 public:
  WeightMatrix() = default;

  /// Validates and wraps `entries`. When `normalized` is set, every non-zero
  /// row must sum to one within 1e-12.
  static WeightMatrix from_dense(Matrix entries, bool normalized = false) {
    validate(entries, normalized);
    auto impl = std::make_shared<Impl>();
    impl->entries = std::move(entries);
    impl->normalized = normalized;
    return WeightMatrix(std::move(impl));
  }

  Index size() const { return impl_ ? impl_->entries.rows() : 0; }
  const Matrix& dense() const { return impl_->entries; }
  bool normalized() const { return impl_->normalized; }
  double operator()(Index i, Index j) const { return impl_->entries(i, j); }

  bool is_symmetric(double tol = 0.0) const {
    const Matrix& w = dense();
    return (w - w.transpose()).cwiseAbs().maxCoeff() <= tol;
  }

  /// Eigenvalues of W (complex in general, real when W is symmetric or a
  /// row-normalized symmetric matrix).
  const std::vector<std::complex<double>>& eigenvalues() const {
    std::call_once(impl_->spectrum_once, [this] { impl_->spectrum = compute_spectrum(); });
    return impl_->spectrum;
  }

  bool has_real_spectrum() const {
    for (const auto& l : eigenvalues())
      if (std::abs(l.imag()) > 1e-10) return false;
    return true;
  }

  /// (-0.999, 0.999) for row-normalized matrices; otherwise the reciprocal
  /// extreme eigenvalues shrunk by the same factor.
  RhoInterval admissible_interval() const {
    if (normalized()) return {-kNormalizedRhoBound, kNormalizedRhoBound};
    const auto& spec = eigenvalues();
    double lmin = 0.0, lmax = 0.0, radius = 0.0;
    for (const auto& l : spec) {
      lmin = std::min(lmin, l.real());
      lmax = std::max(lmax, l.real());
      radius = std::max(radius, std::abs(l));
    }
    if (radius < 1e-14) return {-kNormalizedRhoBound, kNormalizedRhoBound};
    if (!has_real_spectrum())
      return {-kNormalizedRhoBound / radius, kNormalizedRhoBound / radius};
    RhoInterval out;
    out.upper = lmax > 1e-14 ? kNormalizedRhoBound / lmax : kNormalizedRhoBound / radius;
    out.lower = lmin < -1e-14 ? kNormalizedRhoBound / lmin : -kNormalizedRhoBound / radius;
    return out;
  }

  /// Row sums of the raw symmetric matrix this one was normalized from, if any.
  const std::optional<Vector>& symmetric_source_row_sums() const { return impl_->sym_row_sums; }

 private:
  struct Impl {
    Matrix entries;
    bool normalized = false;
    std::optional<Vector> sym_row_sums;
    mutable std::once_flag spectrum_once;
    mutable std::vector<std::complex<double>> spectrum;
  };

  explicit WeightMatrix(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static void validate(const Matrix& w, bool normalized) {
    if (w.rows() != w.cols() || w.rows() == 0)
      throw InvalidArgument("weight matrix must be square and non-empty, got " +
                            std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
    for (Index i = 0; i < w.rows(); ++i) {
      if (w(i, i) != 0.0)
        throw InvalidArgument("weight matrix diagonal entry " + std::to_string(i + 1) +
                              " is non-zero");
      double sum = 0.0;
      for (Index j = 0; j < w.cols(); ++j) {
        const double v = w(i, j);
        if (!std::isfinite(v))
          throw InvalidArgument("weight matrix entry (" + std::to_string(i + 1) + "," +
                                std::to_string(j + 1) + ") is not finite");
        if (v < 0.0)
          throw InvalidArgument("weight matrix entry (" + std::to_string(i + 1) + "," +
                                std::to_string(j + 1) + ") is negative");
        sum += v;
      }
      if (normalized && sum != 0.0 && std::abs(sum - 1.0) > 1e-12)
        throw InvalidArgument("row " + std::to_string(i + 1) +
                              " of a normalized weight matrix does not sum to 1");
    }
  }

  std::vector<std::complex<double>> compute_spectrum() const {
    const Matrix& w = impl_->entries;
    const Index n = w.rows();
    std::vector<std::complex<double>> out(static_cast<std::size_t>(n));
    auto from_symmetric = [&](const Matrix& m) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
      for (Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = {es.eigenvalues()(i), 0.0};
    };
    if (is_symmetric()) {
      from_symmetric(w);
    } else if (impl_->sym_row_sums) {
      // W = D^{-1} A with A symmetric, so W is similar to D^{-1/2} A D^{-1/2}.
      const Vector& d = *impl_->sym_row_sums;
      Vector s = d.cwiseSqrt();
      Matrix m = s.asDiagonal() * w * s.cwiseInverse().unaryExpr([](double v) {
        return std::isfinite(v) ? v : 0.0;
      }).asDiagonal();
      from_symmetric(0.5 * (m + m.transpose()));
    } else {
      Eigen::EigenSolver<Matrix> es(w, false);
      for (Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = es.eigenvalues()(i);
    }
    return out;
  }

  friend WeightMatrix row_normalize(const WeightMatrix& w);

  std::shared_ptr<Impl> impl_;
};

inline Index grid_side(Index n) {
  const auto m = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(n))));
  if (n <= 0 || m * m != n || m < 2)
    throw InvalidArgument("grid size " + std::to_string(n) +
                          " is not a perfect square (need n = m^2 with m >= 2)");
  return m;
}

/// Rook-style grid links along one axis of an m x m grid, units placed row-major.
inline WeightMatrix build_grid_weights(Index n, GridDirection direction) {
  const Index m = grid_side(n);
  Matrix w = Matrix::Zero(n, n);
  for (Index r = 0; r < m; ++r) {
    for (Index c = 0; c < m; ++c) {
      const Index i = r * m + c;
      if (direction == GridDirection::horizontal && c + 1 < m) {
        w(i, i + 1) = w(i + 1, i) = 1.0;
      } else if (direction == GridDirection::vertical && r + 1 < m) {
        w(i, i + m) = w(i + m, i) = 1.0;
      }
    }
  }
  return WeightMatrix::from_dense(std::move(w));
}

/// Divides each row with positive sum by its sum. All-zero rows (isolated
/// units) stay zero.
inline WeightMatrix row_normalize(const WeightMatrix& w) {
  const Matrix& a = w.dense();
  Vector sums = a.rowwise().sum();
  Matrix out = a;
  for (Index i = 0; i < out.rows(); ++i)
    if (sums(i) > 0.0) out.row(i) /= sums(i);
  // Exact unit row sums are not guaranteed by the division; tolerate 1e-12.
  WeightMatrix result = WeightMatrix::from_dense(std::move(out), true);
  if (w.normalized()) {
    result.impl_->sym_row_sums = w.impl_->sym_row_sums;
  } else if (w.is_symmetric()) {
    result.impl_->sym_row_sums = std::move(sums);
  }
  return result;
}

struct Edge {
  Index from = 0;  // 1-based
  Index to = 0;    // 1-based
  double weight = 1.0;
};

enum class EdgeMode { symmetric, directed };

/// Builds a raw weight matrix from 1-based edges. Symmetric mode mirrors
/// every edge; a repeated pair keeps the last weight.
inline WeightMatrix weights_from_edge_list(Index n, const std::vector<Edge>& edges,
                                           EdgeMode mode = EdgeMode::symmetric) {
  if (n <= 0) throw InvalidArgument("number of spatial units must be positive");
  Matrix w = Matrix::Zero(n, n);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const Edge& edge = edges[e];
    if (edge.from < 1 || edge.from > n || edge.to < 1 || edge.to > n) {
      std::ostringstream msg;
      msg << "edge " << e + 1 << " (" << edge.from << "," << edge.to
          << ") has an index out of range 1.." << n;
      throw InvalidArgument(msg.str());
    }
    if (edge.from == edge.to)
      throw InvalidArgument("edge " + std::to_string(e + 1) + " is a self-loop on unit " +
                            std::to_string(edge.from));
    if (!std::isfinite(edge.weight) || edge.weight < 0.0)
      throw InvalidArgument("edge " + std::to_string(e + 1) + " has an invalid weight");
    w(edge.from - 1, edge.to - 1) = edge.weight;
    if (mode == EdgeMode::symmetric) w(edge.to - 1, edge.from - 1) = edge.weight;
  }
  return WeightMatrix::from_dense(std::move(w));
}

struct FilterOptions {
  double rcond_floor = 1e-12;
  bool enforce_interval = true;
};

/// S(rho) = I - rho W together with its LU factorization.
class SpatialFilter {
 public:
  SpatialFilter(WeightMatrix w, double rho, const FilterOptions& opts = {})
      : w_(std::move(w)), rho_(rho) {
    if (!std::isfinite(rho)) throw SingularFilterError(rho, "spatial parameter is not finite");
    if (opts.enforce_interval) {
      const RhoInterval iv = w_.admissible_interval();
      if (!iv.contains(rho)) {
        std::ostringstream msg;
        msg << "rho = " << rho << " outside admissible interval [" << iv.lower << ", "
            << iv.upper << "]";
        throw SingularFilterError(rho, msg.str());
      }
    }
    const Index n = w_.size();
    s_ = Matrix::Identity(n, n) - rho * w_.dense();
    lu_.compute(s_);
    rcond_ = lu_.rcond();
    if (!(rcond_ > opts.rcond_floor)) {
      std::ostringstream msg;
      msg << "I - rho W is numerically singular at rho = " << rho << " (rcond " << rcond_ << ")";
      throw SingularFilterError(rho, msg.str());
    }
  }

  double rho() const { return rho_; }
  const WeightMatrix& weights() const { return w_; }
  const Matrix& matrix() const { return s_; }
  Index size() const { return s_.rows(); }
  /// Reciprocal condition estimate; the invertibility certificate.
  double rcond() const { return rcond_; }

  template <typename Rhs>
  Matrix solve(const Eigen::MatrixBase<Rhs>& b) const {
    return lu_.solve(b);
  }
  template <typename Rhs>
  Matrix solve_transpose(const Eigen::MatrixBase<Rhs>& b) const {
    return lu_.transpose().solve(b);
  }
  Matrix inverse() const { return lu_.inverse(); }

  const Eigen::PartialPivLU<Matrix>& lu() const { return lu_; }

 private:
  WeightMatrix w_;
  double rho_;
  Matrix s_;
  Eigen::PartialPivLU<Matrix> lu_;
  double rcond_ = 0.0;
};

inline SpatialFilter spatial_filter(const WeightMatrix& w, double rho,
                                    const FilterOptions& opts = {}) {
  return SpatialFilter(w, rho, opts);
}

/// mu = S^{-1} X beta, obtained by solving S mu = X beta.
inline Vector reduced_form_mean(const SpatialFilter& filter, const Matrix& x, const Vector& beta) {
  if (x.rows() != filter.size() || x.cols() != beta.size())
    throw InvalidArgument("reduced_form_mean: shape mismatch");
  return filter.solve(x * beta);
}

/// log|det S| from the LU pivots.
inline double log_det_filter(const SpatialFilter& filter) {
  const Matrix& lu = filter.lu().matrixLU();
  double acc = 0.0;
  for (Index i = 0; i < lu.rows(); ++i) {
    const double u = std::abs(lu(i, i));
    if (u == 0.0) throw SingularFilterError(filter.rho(), "zero determinant");
    acc += std::log(u);
  }
  return acc;
}

// Quantities of I - rho W that only depend on the spectrum of W.
struct SpectralTerms {
  double log_det = 0.0;     // log|det(I - rho W)|
  double trace_sw = 0.0;    // tr(S^{-1} W)
  double trace_sw2 = 0.0;   // tr(S^{-1} W S^{-1} W)
};

inline SpectralTerms spectral_terms(const WeightMatrix& w, double rho) {
  SpectralTerms out;
  for (const auto& l : w.eigenvalues()) {
    const std::complex<double> d = 1.0 - rho * l;
    out.log_det += std::log(std::abs(d));
    const std::complex<double> r = l / d;
    out.trace_sw += r.real();
    out.trace_sw2 += (r * r).real();
  }
  return out;
}

}  // namespace tlmma
