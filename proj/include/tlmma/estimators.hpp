#pragma once

// SAR estimation: concentrated maximum likelihood and two-stage least squares.

#include "tlmma/spatial.hpp"
#include "tlmma/types.hpp"

#include <boost/math/tools/minima.hpp>
#include <boost/math/tools/roots.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace tlmma {

/// Design matrix, response and the (usually row-normalized) weight matrix of
/// one population. Row i of X and y belongs to spatial unit i of W.
struct Dataset {
  Matrix X;
  Vector y;
  WeightMatrix W;

  Index n() const { return y.size(); }
  Index p() const { return X.cols(); }

  void validate() const {
    if (X.rows() != y.size())
      throw InvalidArgument("dataset: X has " + std::to_string(X.rows()) + " rows but y has " +
                            std::to_string(y.size()) + " entries");
    if (W.size() != y.size())
      throw InvalidArgument("dataset: weight matrix is " + std::to_string(W.size()) + "x" +
                            std::to_string(W.size()) + " but there are " +
                            std::to_string(y.size()) + " observations");
    if (p() < 1 || n() <= p())
      throw InvalidArgument("dataset: need n > p >= 1 (n = " + std::to_string(n()) +
                            ", p = " + std::to_string(p()) + ")");
    if (!X.allFinite() || !y.allFinite()) throw InvalidArgument("dataset: non-finite entries");
  }
};

struct SarFit {
  Vector beta;
  double rho = 0.0;
  double sigma2 = 0.0;
  Method method = Method::mle;
  bool inadmissible_rho = false;  // 2SLS estimate outside the admissible interval
  bool interpolating = false;     // exact fit, sigma2 == 0
  bool at_boundary = false;       // MLE maximum on the edge of the search interval
  double score_residual = 0.0;    // MLE first-order condition at rho
  std::vector<std::string> warnings;

  /// delta = (beta', rho)'.
  Vector delta() const {
    Vector d(beta.size() + 1);
    d << beta, rho;
    return d;
  }
};

namespace detail {

inline Eigen::ColPivHouseholderQR<Matrix> checked_design_qr(const Matrix& x) {
  Eigen::ColPivHouseholderQR<Matrix> qr(x);
  qr.setThreshold(1e-10);
  if (qr.rank() < x.cols())
    throw NumericalError("design matrix X does not have full column rank (rank " +
                         std::to_string(qr.rank()) + " < " + std::to_string(x.cols()) + ")");
  return qr;
}

// v - X (X'X)^{-1} X' v
template <typename Qr>
Vector annihilate(const Qr& qr, const Matrix& x, const Vector& v) {
  return v - x * qr.solve(v);
}

inline bool is_exact_zero_residual(double rss, const Vector& y) {
  return rss <= 1e-24 * std::max(y.squaredNorm(), std::numeric_limits<double>::min());
}

// O(n) evaluation of the concentrated likelihood and its score once the
// spectrum of W is known.
class ProfileLikelihood {
 public:
  explicit ProfileLikelihood(const Dataset& data)
      : data_(data), qr_(checked_design_qr(data.X)), n_(static_cast<double>(data.n())) {
    wy_ = data.W.dense() * data.y;
    ay_ = annihilate(qr_, data.X, data.y);
    awy_ = annihilate(qr_, data.X, wy_);
  }

  double rss(double rho) const { return (ay_ - rho * awy_).squaredNorm(); }

  double value(double rho) const {
    const double r = rss(rho);
    if (is_exact_zero_residual(r, data_.y)) return std::numeric_limits<double>::infinity();
    return -0.5 * n_ * std::log(r) + spectral_terms(data_.W, rho).log_det;
  }

  // n y'W'A S y - tr(S^{-1}W) ||A S y||^2 (the likelihood derivative times ||ASy||^2).
  double score(double rho) const {
    const Vector asy = ay_ - rho * awy_;
    return n_ * awy_.dot(asy) - spectral_terms(data_.W, rho).trace_sw * asy.squaredNorm();
  }

  const Vector& ay() const { return ay_; }
  const Vector& awy() const { return awy_; }
  const Vector& wy() const { return wy_; }
  const Eigen::ColPivHouseholderQR<Matrix>& qr() const { return qr_; }

 private:
  const Dataset& data_;
  Eigen::ColPivHouseholderQR<Matrix> qr_;
  double n_;
  Vector wy_, ay_, awy_;
};

}  // namespace detail

/// -(n/2) log ||A S(rho) y||^2 + log|S(rho)|, with A = I - X (X'X)^{-1} X'.
/// Returns +infinity when the residual vanishes (exact interpolation).
inline double concentrated_loglik(double rho, const Dataset& data) {
  data.validate();
  const auto qr = detail::checked_design_qr(data.X);
  const SpatialFilter filter(data.W, rho);
  const Vector asy = detail::annihilate(qr, data.X, filter.matrix() * data.y);
  const double rss = asy.squaredNorm();
  if (detail::is_exact_zero_residual(rss, data.y)) return std::numeric_limits<double>::infinity();
  return -0.5 * static_cast<double>(data.n()) * std::log(rss) + log_det_filter(filter);
}

/// Likelihood score scaled by ||A S y||^2, computed with dense factorizations:
/// n y'W'A(I - rho W)y - tr(S^{-1}W) ||A S y||^2.
inline double mle_score(double rho, const Dataset& data) {
  const auto qr = detail::checked_design_qr(data.X);
  const SpatialFilter filter(data.W, rho, {.enforce_interval = false});
  const Vector wy = data.W.dense() * data.y;
  const Vector asy = detail::annihilate(qr, data.X, filter.matrix() * data.y);
  const double tr = filter.solve(data.W.dense()).trace();
  const Vector awy = detail::annihilate(qr, data.X, wy);
  return static_cast<double>(data.n()) * awy.dot(asy) - tr * asy.squaredNorm();
}

struct MleOptions {
  int grid_points = 50;
  double rho_tolerance = 1e-10;
};

/// Concentrated maximum likelihood. rho is located by a grid pre-scan over
/// the admissible interval, then refined by bracketing the score root (or a
/// Brent search when the maximum sits on the interval edge).
inline SarFit fit_mle(const Dataset& data, const MleOptions& opts = {}) {
  data.validate();
  const detail::ProfileLikelihood prof(data);
  const RhoInterval iv = data.W.admissible_interval();
  const double n = static_cast<double>(data.n());

  SarFit fit;
  fit.method = Method::mle;

  auto finish = [&](double rho) {
    fit.rho = rho;
    fit.beta = prof.qr().solve(Vector(data.y - rho * prof.wy()));
    fit.sigma2 = fit.interpolating ? 0.0 : prof.rss(rho) / n;
    fit.score_residual = fit.interpolating ? 0.0 : prof.score(rho);
    return fit;
  };

  // Noiseless data: the residual quadratic in rho has an exact zero.
  if (prof.awy().squaredNorm() > 0.0) {
    const double rho_q = prof.ay().dot(prof.awy()) / prof.awy().squaredNorm();
    if (iv.contains(rho_q) && detail::is_exact_zero_residual(prof.rss(rho_q), data.y)) {
      fit.interpolating = true;
      fit.warnings.push_back("data are interpolated exactly; sigma2 set to 0");
      return finish(rho_q);
    }
  }

  const int m = std::max(opts.grid_points, 3);
  std::vector<double> grid(static_cast<std::size_t>(m)), vals(grid.size());
  int best = -1;
  for (int i = 0; i < m; ++i) {
    grid[i] = iv.lower + (iv.upper - iv.lower) * i / (m - 1);
    vals[i] = prof.value(grid[i]);
    if (std::isfinite(vals[i]) && (best < 0 || vals[i] > vals[best])) best = i;
  }
  if (best < 0) throw NumericalError("fit_mle: likelihood is non-finite on the entire grid");

  const double a = grid[std::max(best - 1, 0)];
  const double b = grid[std::min(best + 1, m - 1)];
  double rho = grid[best];
  const double sa = prof.score(a), sb = prof.score(b);
  bool refined = false;
  if (sa > 0.0 && sb < 0.0) {
    std::uintmax_t iters = 200;
    const double tol = std::min(opts.rho_tolerance, 1e-10) * 1e-2;
    auto root = boost::math::tools::toms748_solve(
        [&](double r) { return prof.score(r); }, a, b, sa, sb,
        [tol](double lo, double hi) { return hi - lo <= tol; }, iters);
    const double cand = 0.5 * (root.first + root.second);
    if (prof.value(cand) >= vals[best]) {
      rho = cand;
      refined = true;
    }
  }
  if (!refined) {
    std::uintmax_t iters = 500;
    auto res = boost::math::tools::brent_find_minima(
        [&](double r) { return -prof.value(r); }, a, b, std::numeric_limits<double>::digits / 2,
        iters);
    if (-res.second >= vals[best]) rho = res.first;
    if (rho - iv.lower < 1e-6 || iv.upper - rho < 1e-6) {
      fit.at_boundary = true;
      fit.warnings.push_back("likelihood maximum on the boundary of the admissible interval");
    }
  }
  return finish(rho);
}

/// Instruments H = (X, WX) and an orthonormal basis of their column space.
class InstrumentSet {
 public:
  InstrumentSet(Matrix h, Matrix basis) : h_(std::move(h)), basis_(std::move(basis)) {}

  const Matrix& H() const { return h_; }
  const Matrix& basis() const { return basis_; }
  Index n() const { return h_.rows(); }
  Index q() const { return h_.cols(); }

  /// Q v with Q = H (H'H)^{-1} H'.
  template <typename Derived>
  Matrix project(const Eigen::MatrixBase<Derived>& v) const {
    return basis_ * (basis_.transpose() * v);
  }

  /// Explicit n x n projector; intended for n <= 256.
  Matrix projector() const { return basis_ * basis_.transpose(); }

 private:
  Matrix h_;
  Matrix basis_;
};

inline InstrumentSet build_instruments(const Dataset& data) {
  data.validate();
  const Index n = data.n(), p = data.p();
  Matrix h(n, 2 * p);
  h << data.X, data.W.dense() * data.X;

  // Greedy Gram-Schmidt (twice) to name columns that add nothing new.
  std::vector<std::string> dependent;
  Matrix kept(n, 0);
  for (Index j = 0; j < h.cols(); ++j) {
    Vector v = h.col(j);
    const double norm0 = v.norm();
    for (int pass = 0; pass < 2 && kept.cols() > 0; ++pass) v -= kept * (kept.transpose() * v);
    if (norm0 == 0.0 || v.norm() <= 1e-10 * norm0) {
      dependent.push_back((j < p ? "x" : "Wx") + std::to_string(j % p + 1));
      continue;
    }
    kept.conservativeResize(Eigen::NoChange, kept.cols() + 1);
    kept.col(kept.cols() - 1) = v / v.norm();
  }
  if (!dependent.empty()) {
    std::string names;
    for (const auto& s : dependent) names += (names.empty() ? "" : ", ") + s;
    throw NumericalError("instrument matrix (X, WX) is rank deficient; dependent columns: " +
                         names);
  }
  Eigen::HouseholderQR<Matrix> qr(h);
  Matrix basis = qr.householderQ() * Matrix::Identity(n, h.cols());
  return InstrumentSet(std::move(h), std::move(basis));
}

/// delta = (Z'QZ)^{-1} Z'Q y with Z = (X, Wy). An estimate of rho outside the
/// admissible interval is returned flagged, not clamped.
inline SarFit fit_2sls(const Dataset& data, const InstrumentSet& inst) {
  data.validate();
  if (inst.n() != data.n()) throw InvalidArgument("fit_2sls: instrument rows do not match data");
  const Index n = data.n(), p = data.p();
  Matrix z(n, p + 1);
  const Vector wy = data.W.dense() * data.y;
  z << data.X, wy;
  const Matrix bz = inst.basis().transpose() * z;  // q x (p+1)
  Eigen::ColPivHouseholderQR<Matrix> rank_check(bz);
  rank_check.setThreshold(1e-10);
  if (rank_check.rank() < p + 1) throw NumericalError("fit_2sls: Z'QZ is singular");
  const Matrix m = bz.transpose() * bz;
  const Vector rhs = bz.transpose() * (inst.basis().transpose() * data.y);
  const Vector delta = m.ldlt().solve(rhs);

  SarFit fit;
  fit.method = Method::tsls;
  fit.beta = delta.head(p);
  fit.rho = delta(p);
  const Vector resid = data.y - fit.rho * wy - data.X * fit.beta;
  fit.sigma2 = resid.squaredNorm() / static_cast<double>(n);
  if (detail::is_exact_zero_residual(resid.squaredNorm(), data.y)) {
    fit.interpolating = true;
    fit.sigma2 = 0.0;
  }
  if (!data.W.admissible_interval().contains(fit.rho)) {
    fit.inadmissible_rho = true;
    fit.warnings.push_back("inadmissible-rho: 2SLS estimate " + std::to_string(fit.rho) +
                           " lies outside the admissible interval");
  }
  return fit;
}

inline SarFit fit_2sls(const Dataset& data) { return fit_2sls(data, build_instruments(data)); }

inline SarFit fit_sar(const Dataset& data, Method method) {
  return method == Method::mle ? fit_mle(data) : fit_2sls(data);
}

/// MLE: ||A S(rho) y||^2 / n.  2SLS: ||y - rho W y - X beta||^2 / n.
inline double residual_variance(const SarFit& fit, const Dataset& data) {
  if (fit.beta.size() != data.p() || data.X.rows() != data.y.size() ||
      data.W.size() != data.y.size())
    throw InvalidArgument("residual_variance: fit and data shapes differ");
  const double n = static_cast<double>(data.n());
  const Vector sy = data.y - fit.rho * (data.W.dense() * data.y);
  if (fit.method == Method::mle) {
    const auto qr = detail::checked_design_qr(data.X);
    return detail::annihilate(qr, data.X, sy).squaredNorm() / n;
  }
  return (sy - data.X * fit.beta).squaredNorm() / n;
}

/// S(rho_hat)^{-1} X beta_hat on the dataset's own weight matrix.
inline Vector fitted_mean(const SarFit& fit, const Dataset& data) {
  const SpatialFilter filter(data.W, fit.rho, {.enforce_interval = false});
  return reduced_form_mean(filter, data.X, fit.beta);
}

}  // namespace tlmma
