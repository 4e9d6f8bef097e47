#pragma once

// Prediction Jacobian d mu_hat / d y' of the target fit and the Mallows
// covariance penalty tr{J Omega_hat}.
//
// For both estimators the Jacobian has the form
//
//   J = S^{-1} ( u g' + X B ),   u = W S^{-1} X beta_hat,
//
// where g = d rho_hat / d y and B = d beta_hat / d y' is the *total*
// derivative of beta_hat (including the path through rho_hat).

#include "tlmma/estimators.hpp"
#include "tlmma/spatial.hpp"
#include "tlmma/types.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>

namespace tlmma {

inline constexpr Index kExplicitJacobianMaxN = 256;

struct JacobianFactors {
  Method method = Method::mle;
  SpatialFilter filter;  // S_hat = I - rho_hat W
  Matrix X;
  Vector drho_dy;   // g, length n
  Matrix dbeta_dy;  // B, p x n
  Vector spill;     // u = W S^{-1} X beta_hat
};

struct JacobianTrace {
  double rank_one = 0.0;  // g' S^{-1} u
  double linear = 0.0;    // tr(S^{-1} X B)
  double total() const { return rank_one + linear; }
};

struct PenaltyReport {
  double trace_J = 0.0;
  double trace_JOmega = 0.0;
  Matrix omega_hat;
  Method method = Method::mle;
};

enum class PenaltyPath { automatic, explicit_jacobian, structured };

/// sigma2 S^{-1} S^{-T}.
inline Matrix omega_hat(const SarFit& fit, const WeightMatrix& w) {
  const SpatialFilter filter(w, fit.rho, {.enforce_interval = false});
  const Matrix sinv = filter.inverse();
  Matrix out = fit.sigma2 * (sinv * sinv.transpose());
  return 0.5 * (out + out.transpose());
}

/// Implicit-function gradient of the MLE rho_hat with respect to y.
inline Vector drho_dy_mle(const SarFit& fit, const Dataset& data) {
  if (fit.method != Method::mle) throw InvalidArgument("drho_dy_mle: fit is not an MLE fit");
  data.validate();
  const double n = static_cast<double>(data.n());
  const double ysq = data.y.squaredNorm();
  if (fit.interpolating || fit.sigma2 <= 0.0)
    throw NumericalError("degenerate score curvature: residual variance is zero");

  const Matrix& w = data.W.dense();
  const auto qr = detail::checked_design_qr(data.X);
  const SpatialFilter filter(data.W, fit.rho, {.enforce_interval = false});
  const Vector wy = w * data.y;
  const Vector ay = detail::annihilate(qr, data.X, data.y);
  const Vector awy = detail::annihilate(qr, data.X, wy);
  const Vector asy = ay - fit.rho * awy;
  const double rss = asy.squaredNorm();

  const Matrix sinv_w = filter.solve(w);
  const double tr1 = sinv_w.trace();
  const double tr2 = (sinv_w.cwiseProduct(sinv_w.transpose())).sum();

  const double score = n * awy.dot(asy) - tr1 * rss;
  const double foc_tol = 1e-6 * n * std::max(n, ysq);
  if (std::abs(score) > foc_tol) {
    std::ostringstream msg;
    msg << "drho_dy_mle: first-order condition fails at rho = " << fit.rho << " (score " << score
        << ", tolerance " << foc_tol << ")";
    throw NumericalError(msg.str());
  }

  // d(score)/dy
  const Vector wawy = w.transpose() * awy;
  const Vector sasy = asy - fit.rho * (w.transpose() * asy);
  const Vector num =
      n * (w.transpose() * ay + awy - 2.0 * fit.rho * wawy) - 2.0 * tr1 * sasy;
  // -d(score)/drho
  const double den = n * awy.squaredNorm() + tr2 * rss - 2.0 * tr1 * awy.dot(asy);
  if (!(std::abs(den) > 1e-10 * n * ysq))
    throw NumericalError("degenerate score curvature at rho = " + std::to_string(fit.rho));
  return num / den;
}

inline JacobianFactors jacobian_factors_mle(const SarFit& fit, const Dataset& data) {
  JacobianFactors f{Method::mle, SpatialFilter(data.W, fit.rho, {.enforce_interval = false}),
                    data.X, drho_dy_mle(fit, data), {}, {}};
  const auto qr = detail::checked_design_qr(data.X);
  const Vector wy = data.W.dense() * data.y;
  const Matrix c = qr.solve(f.filter.matrix());  // (X'X)^{-1} X' S
  f.dbeta_dy = c - qr.solve(wy) * f.drho_dy.transpose();
  f.spill = data.W.dense() * f.filter.solve(data.X * fit.beta);
  return f;
}

/// Full derivative of (beta_hat', rho_hat)' with respect to y', (p+1) x n.
inline Matrix ddelta_dy_2sls(const SarFit& fit, const Dataset& data, const InstrumentSet& inst) {
  if (fit.method != Method::tsls) throw InvalidArgument("ddelta_dy_2sls: fit is not a 2SLS fit");
  data.validate();
  const Index n = data.n(), p = data.p();
  const Matrix& w = data.W.dense();
  const Vector wy = w * data.y;
  Matrix z(n, p + 1);
  z << data.X, wy;
  const Matrix qz = inst.project(z);
  const Matrix m = z.transpose() * qz;  // Z'QZ
  Eigen::ColPivHouseholderQR<Matrix> mqr(m);
  if (mqr.rank() < p + 1) throw NumericalError("ddelta_dy_2sls: Z'QZ is singular");

  const Matrix qx = qz.leftCols(p);
  const Vector qwy = qz.col(p);
  const Vector qy = inst.project(data.y);

  Matrix r(p + 1, n);
  r.topRows(p) = qx.transpose() - fit.rho * (qx.transpose() * w);
  const Vector lag_arg = qy - qx * fit.beta - 2.0 * fit.rho * qwy;
  r.row(p) = qwy.transpose() + lag_arg.transpose() * w;
  return mqr.solve(r);
}

inline JacobianFactors jacobian_factors_2sls(const SarFit& fit, const Dataset& data,
                                             const InstrumentSet& inst) {
  const Matrix dd = ddelta_dy_2sls(fit, data, inst);
  const Index p = data.p();
  JacobianFactors f{Method::tsls, SpatialFilter(data.W, fit.rho, {.enforce_interval = false}),
                    data.X, dd.row(p).transpose(), dd.topRows(p), {}};
  f.spill = data.W.dense() * f.filter.solve(data.X * fit.beta);
  return f;
}

inline JacobianFactors jacobian_factors(const SarFit& fit, const Dataset& data) {
  if (fit.method == Method::mle) return jacobian_factors_mle(fit, data);
  return jacobian_factors_2sls(fit, data, build_instruments(data));
}

/// tr(J) split into the rank-one rho term and the beta term.
inline JacobianTrace jacobian_trace(const JacobianFactors& f) {
  JacobianTrace t;
  t.rank_one = f.drho_dy.dot(f.filter.solve(f.spill).col(0));
  t.linear = (f.dbeta_dy * f.filter.solve(f.X)).trace();
  return t;
}

/// tr(P_hat) + (d rho/d y') (d P_hat / d rho) y with P_hat = S^{-1} P S.
inline double jacobian_trace_mle(const SarFit& fit, const Dataset& data) {
  const Vector g = drho_dy_mle(fit, data);
  const auto qr = detail::checked_design_qr(data.X);
  const SpatialFilter filter(data.W, fit.rho, {.enforce_interval = false});
  const Matrix& w = data.W.dense();
  const double tr_p = (qr.solve(filter.matrix()) * filter.solve(data.X)).trace();
  // (S^{-1} W S^{-1} P S - S^{-1} P W) y; note P S y = X beta_hat.
  const Vector xb = data.X * qr.solve(filter.matrix() * data.y);
  const Vector pwy = data.X * qr.solve(Vector(w * data.y));
  const Vector dp_y = filter.solve(w * filter.solve(xb) - pwy);
  return tr_p + g.dot(dp_y);
}

inline double jacobian_trace_2sls(const SarFit& fit, const Dataset& data,
                                  const InstrumentSet& inst) {
  return jacobian_trace(jacobian_factors_2sls(fit, data, inst)).total();
}

/// n x n Jacobian S^{-1}(u g' + X B).
inline Matrix explicit_jacobian(const JacobianFactors& f) {
  if (f.X.rows() > kExplicitJacobianMaxN)
    throw InvalidArgument("explicit_jacobian: n exceeds " + std::to_string(kExplicitJacobianMaxN));
  return f.filter.solve(f.spill * f.drho_dy.transpose() + f.X * f.dbeta_dy);
}

/// tr(J Omega) for an arbitrary symmetric n x n Omega.
inline double trace_J_omega(const JacobianFactors& f, const Matrix& omega) {
  const Vector sinv_u = f.filter.solve(f.spill);
  const Matrix sinv_x = f.filter.solve(f.X);
  return f.drho_dy.dot(omega * sinv_u) + (f.dbeta_dy * (omega * sinv_x)).trace();
}

/// tr(J Omega_hat) with Omega_hat = sigma2 S^{-1} S^{-T}, without forming J.
inline double trace_J_omega_structured(const JacobianFactors& f, double sigma2) {
  // S^{-1} S^{-T} S^{-1} v
  auto chain = [&](const Matrix& v) {
    return Matrix(f.filter.solve(f.filter.solve_transpose(f.filter.solve(v))));
  };
  const Vector cu = chain(f.spill);
  const Matrix cx = chain(f.X);
  return sigma2 * (f.drho_dy.dot(cu) + (f.dbeta_dy * cx).trace());
}

inline PenaltyReport penalty(const SarFit& fit, const JacobianFactors& f, const WeightMatrix& w,
                             PenaltyPath path = PenaltyPath::automatic) {
  PenaltyReport rep;
  rep.method = fit.method;
  rep.omega_hat = omega_hat(fit, w);
  rep.trace_J = jacobian_trace(f).total();
  const Index n = f.X.rows();
  if (path == PenaltyPath::automatic)
    path = n <= kExplicitJacobianMaxN ? PenaltyPath::explicit_jacobian : PenaltyPath::structured;
  if (path == PenaltyPath::explicit_jacobian) {
    rep.trace_JOmega = explicit_jacobian(f).cwiseProduct(rep.omega_hat.transpose()).sum();
  } else {
    rep.trace_JOmega = trace_J_omega_structured(f, fit.sigma2);
  }
  if (!std::isfinite(rep.trace_J) || !std::isfinite(rep.trace_JOmega))
    throw NumericalError("penalty: non-finite trace");
  return rep;
}

inline PenaltyReport penalty(const SarFit& fit, const Dataset& data,
                             PenaltyPath path = PenaltyPath::automatic) {
  return penalty(fit, jacobian_factors(fit, data), data.W, path);
}

using RefitMean = std::function<Vector(const Dataset&)>;

/// Refits with the given method and returns S(rho_hat)^{-1} X beta_hat.
inline RefitMean refit_mean(Method method) {
  return [method](const Dataset& d) { return fitted_mean(fit_sar(d, method), d); };
}

/// Central finite-difference trace of d mu_hat / d y' with full refits,
/// h_i = step_scale (1 + |y_i|).
inline double jacobian_trace_fd(const RefitMean& refit, const Dataset& data,
                                double step_scale = 1e-5) {
  if (data.n() > kExplicitJacobianMaxN)
    throw InvalidArgument("jacobian_trace_fd: n exceeds " + std::to_string(kExplicitJacobianMaxN));
  double acc = 0.0;
  Dataset pert = data;
  for (Index i = 0; i < data.n(); ++i) {
    const double h = step_scale * (1.0 + std::abs(data.y(i)));
    double up = 0.0, down = 0.0;
    try {
      pert.y(i) = data.y(i) + h;
      up = refit(pert)(i);
      pert.y(i) = data.y(i) - h;
      down = refit(pert)(i);
    } catch (const Error& e) {
      throw NumericalError("jacobian_trace_fd: refit failed at coordinate " +
                           std::to_string(i + 1) + ": " + e.what());
    }
    pert.y(i) = data.y(i);
    acc += (up - down) / (2.0 * h);
  }
  return acc;
}

}  // namespace tlmma
