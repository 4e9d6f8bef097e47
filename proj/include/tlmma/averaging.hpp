#pragma once

// Candidate predictions on the target region, the Mallows-type criterion
// C(w) = w' D'D w + d' w, and its minimization over the probability simplex.

#include "tlmma/estimators.hpp"
#include "tlmma/influence.hpp"
#include "tlmma/spatial.hpp"
#include "tlmma/types.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace tlmma {

struct DroppedCandidate {
  Index index = 0;
  std::string reason;
};

/// Fitted candidates (index 0 is the target) and their mean predictions
/// (I - rho_k W0)^{-1} X0 beta_k. Only retained candidates own a column.
struct CandidateSet {
  std::vector<SarFit> fits;
  Dataset target;
  Matrix predictions;           // n0 x retained.size()
  std::vector<Index> retained;  // column -> candidate index
  std::vector<double> rcond;    // invertibility certificate per column
  std::vector<DroppedCandidate> dropped;

  Index candidate_count() const { return static_cast<Index>(fits.size()); }
  Index columns() const { return static_cast<Index>(retained.size()); }
};

inline CandidateSet candidate_predictions(std::vector<SarFit> fits, const Dataset& target) {
  if (fits.empty()) throw InvalidArgument("candidate_predictions: no candidate fits");
  target.validate();
  CandidateSet out;
  out.target = target;
  const Index n0 = target.n();
  const RhoInterval iv = target.W.admissible_interval();
  std::vector<Vector> cols;
  for (std::size_t k = 0; k < fits.size(); ++k) {
    const SarFit& f = fits[k];
    if (f.beta.size() != target.p())
      throw InvalidArgument("candidate " + std::to_string(k) + " has " +
                            std::to_string(f.beta.size()) + " coefficients, target has " +
                            std::to_string(target.p()));
    std::string reason;
    if (f.inadmissible_rho) {
      reason = "inadmissible-rho";
    } else if (!iv.contains(f.rho)) {
      reason = "rho outside the admissible interval of W0";
    } else {
      try {
        const SpatialFilter filter(target.W, f.rho);
        Vector mu = reduced_form_mean(filter, target.X, f.beta);
        if (!mu.allFinite()) {
          reason = "non-finite prediction";
        } else {
          cols.push_back(std::move(mu));
          out.retained.push_back(static_cast<Index>(k));
          out.rcond.push_back(filter.rcond());
        }
      } catch (const SingularFilterError& e) {
        reason = std::string("singular filter on W0: ") + e.what();
      }
    }
    if (!reason.empty()) {
      if (k == 0) throw Error("target candidate dropped (" + reason + "); transfer is undefined");
      out.dropped.push_back({static_cast<Index>(k), reason});
    }
  }
  out.predictions.resize(n0, static_cast<Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.predictions.col(static_cast<Index>(j)) = cols[j];
  out.fits = std::move(fits);
  return out;
}

struct CriterionProblem {
  Matrix D;  // n0 x m, column j = y0 - mu_hat of candidate retained[j]
  Matrix Q;  // D'D
  Vector d;  // 2 tr{J Omega_hat} at the target column, zero elsewhere
  std::vector<Index> retained;
  Index candidate_count = 0;
  double trace_JOmega = 0.0;

  Index columns() const { return Q.rows(); }
};

inline CriterionProblem assemble_criterion(const CandidateSet& cands, const PenaltyReport& pen) {
  if (cands.predictions.rows() != cands.target.n())
    throw InvalidArgument("assemble_criterion: prediction rows do not match the target");
  if (cands.retained.empty() || cands.retained.front() != 0)
    throw InvalidArgument("assemble_criterion: target candidate missing");
  if (pen.omega_hat.rows() != 0 && pen.omega_hat.rows() != cands.target.n())
    throw InvalidArgument("assemble_criterion: penalty dimension does not match the target");
  CriterionProblem prob;
  prob.D = (-cands.predictions).colwise() + cands.target.y;
  prob.Q = prob.D.transpose() * prob.D;
  prob.Q = 0.5 * (prob.Q + prob.Q.transpose());
  prob.d = Vector::Zero(prob.Q.rows());
  prob.d(0) = 2.0 * pen.trace_JOmega;
  prob.retained = cands.retained;
  prob.candidate_count = cands.candidate_count();
  prob.trace_JOmega = pen.trace_JOmega;
  return prob;
}

namespace detail {

inline void require_simplex(const Vector& w, Index m, const char* who) {
  if (w.size() != m)
    throw InvalidArgument(std::string(who) + ": weight vector has " + std::to_string(w.size()) +
                          " entries, expected " + std::to_string(m));
  if (w.minCoeff() < -1e-12 || std::abs(w.sum() - 1.0) > 1e-10)
    throw InvalidArgument(std::string(who) + ": weights are not on the simplex");
}

// Euclidean projection onto {w >= 0, sum w = 1} (sort-based).
inline Vector project_simplex(const Vector& v) {
  const Index m = v.size();
  std::vector<double> u(v.data(), v.data() + m);
  std::sort(u.begin(), u.end(), std::greater<>());
  double cum = 0.0, theta = 0.0;
  for (Index j = 0; j < m; ++j) {
    cum += u[static_cast<std::size_t>(j)];
    const double t = (cum - 1.0) / static_cast<double>(j + 1);
    if (u[static_cast<std::size_t>(j)] - t > 0.0) theta = t;
  }
  return (v.array() - theta).max(0.0).matrix();
}

}  // namespace detail

inline double evaluate_criterion(const CriterionProblem& prob, const Vector& omega) {
  detail::require_simplex(omega, prob.columns(), "evaluate_criterion");
  return omega.dot(prob.Q * omega) + prob.d.dot(omega);
}

struct QpOptions {
  double tolerance = 1e-8;
  int max_iterations = 500000;
};

struct SimplexQpResult {
  Vector weights;
  double value = 0.0;
  double kkt_residual = 0.0;
  int iterations = 0;
};

class QpNotConverged : public NumericalError {
 public:
  QpNotConverged(const std::string& what, SimplexQpResult best)
      : NumericalError(what), best_(std::move(best)) {}
  const SimplexQpResult& best() const { return best_; }

 private:
  SimplexQpResult best_;
};

/// Minimizes w'Qw + d'w over the probability simplex.
///
/// Accelerated projected gradient with adaptive restart, cold-started at the
/// uniform vector, followed by an equality-constrained solve on the detected
/// support. The KKT residual is ||w - P(w - grad/L)||_inf with L the gradient
/// Lipschitz constant of the recentred problem.
inline SimplexQpResult solve_simplex_qp(const Matrix& q, const Vector& d,
                                        const QpOptions& opts = {}) {
  const Index m = q.rows();
  if (m == 0 || q.cols() != m || d.size() != m)
    throw InvalidArgument("solve_simplex_qp: inconsistent problem dimensions");
  if (!q.allFinite() || !d.allFinite()) throw InvalidArgument("solve_simplex_qp: non-finite data");
  auto objective = [&](const Vector& w) { return w.dot(q * w) + d.dot(w); };
  if (m == 1) return {Vector::Ones(1), objective(Vector::Ones(1)), 0.0, 0};

  // On the simplex w'(a1' + 1a')w = 2a'w, so recentring on column 0 gives the
  // same minimizer with the common-noise direction removed from the Hessian.
  const Vector a = q.col(0);
  Matrix qc = q;
  qc.colwise() -= a;
  qc.rowwise() -= a.transpose();
  qc.array() += q(0, 0);
  qc = 0.5 * (qc + qc.transpose());
  const Vector dc = d + 2.0 * a;

  const Eigen::SelfAdjointEigenSolver<Matrix> es(qc, Eigen::EigenvaluesOnly);
  const double lmax = std::max(es.eigenvalues().maxCoeff(), 0.0);
  const double lip = 2.0 * lmax;

  auto grad = [&](const Vector& w) { return Vector(2.0 * qc * w + dc); };
  auto cobj = [&](const Vector& w) { return w.dot(qc * w) + dc.dot(w); };
  const double step_l = lip > 0.0 ? lip : 1.0;
  auto residual = [&](const Vector& w) {
    return (w - detail::project_simplex(w - grad(w) / step_l)).cwiseAbs().maxCoeff();
  };

  SimplexQpResult res;
  Vector w = Vector::Constant(m, 1.0 / static_cast<double>(m));
  if (lip <= 0.0) {
    // Linear objective on the simplex: best vertex.
    Index best;
    dc.minCoeff(&best);
    w.setZero();
    w(best) = 1.0;
  } else {
    Vector y = w;
    double t = 1.0;
    int it = 0;
    for (; it < opts.max_iterations; ++it) {
      const Vector w_next = detail::project_simplex(y - grad(y) / lip);
      // Gradient-based restart keeps the iteration monotone in practice.
      if ((y - w_next).dot(w_next - w) > 0.0) {
        t = 1.0;
        y = w;
        continue;
      }
      const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      y = w_next + ((t - 1.0) / t_next) * (w_next - w);
      w = w_next;
      t = t_next;
      if ((it & 15) == 0 && residual(w) < 0.01 * opts.tolerance) break;
    }
    res.iterations = it;
  }

  // Polish on the support: 2 Qc_S w_S + dc_S = lambda 1, 1'w_S = 1.
  {
    std::vector<Index> sup;
    for (Index i = 0; i < m; ++i)
      if (w(i) > 1e-9) sup.push_back(i);
    const Index s = static_cast<Index>(sup.size());
    Matrix kkt = Matrix::Zero(s + 1, s + 1);
    Vector rhs(s + 1);
    for (Index i = 0; i < s; ++i) {
      for (Index j = 0; j < s; ++j) kkt(i, j) = 2.0 * qc(sup[i], sup[j]);
      kkt(i, s) = -1.0;
      kkt(s, i) = 1.0;
      rhs(i) = -dc(sup[i]);
    }
    rhs(s) = 1.0;
    const Vector sol = kkt.completeOrthogonalDecomposition().solve(rhs);
    Vector cand = Vector::Zero(m);
    for (Index i = 0; i < s; ++i) cand(sup[i]) = sol(i);
    if (cand.allFinite() && cand.minCoeff() >= 0.0 && std::abs(cand.sum() - 1.0) < 1e-12 &&
        cobj(cand) <= cobj(w) + 1e-14 * (1.0 + std::abs(cobj(w))) && residual(cand) <= residual(w))
      w = cand;
  }

  w = w.cwiseMax(0.0);
  w /= w.sum();
  res.weights = w;
  res.value = objective(w);
  res.kkt_residual = residual(w);
  if (!(res.kkt_residual < opts.tolerance)) {
    std::ostringstream msg;
    msg << "solve_simplex_qp: KKT residual " << res.kkt_residual << " above tolerance "
        << opts.tolerance << " after " << res.iterations << " iterations";
    throw QpNotConverged(msg.str(), res);
  }
  return res;
}

struct AveragingSolution {
  Vector weights;         // length K+1; dropped candidates carry 0
  Vector column_weights;  // length = retained columns
  std::vector<Index> retained;
  std::vector<DroppedCandidate> dropped;
  double criterion_value = 0.0;
  double kkt_residual = 0.0;
  int iterations = 0;
};

inline AveragingSolution solve_simplex_qp(const CriterionProblem& prob, const QpOptions& opts = {}) {
  const SimplexQpResult r = solve_simplex_qp(prob.Q, prob.d, opts);
  AveragingSolution sol;
  sol.column_weights = r.weights;
  sol.weights = Vector::Zero(prob.candidate_count);
  for (std::size_t j = 0; j < prob.retained.size(); ++j)
    sol.weights(prob.retained[j]) = r.weights(static_cast<Index>(j));
  sol.retained = prob.retained;
  sol.criterion_value = r.value;
  sol.kkt_residual = r.kkt_residual;
  sol.iterations = r.iterations;
  return sol;
}

inline AveragingSolution solve_simplex_qp(const CriterionProblem& prob, const CandidateSet& cands,
                                          const QpOptions& opts = {}) {
  AveragingSolution sol = solve_simplex_qp(prob, opts);
  sol.dropped = cands.dropped;
  return sol;
}

/// mu_hat(w) = sum_k w_k mu_hat^(k) on the target region, w over columns.
inline Vector averaged_prediction(const CandidateSet& cands, const Vector& column_weights) {
  if (column_weights.size() != cands.columns())
    throw InvalidArgument("averaged_prediction: weight length mismatch");
  return cands.predictions * column_weights;
}

/// ||y0 - mu_hat(w)||^2 + 2 w_0 tr{J Omega} for a supplied (true) Omega.
inline double criterion_known_omega(const CandidateSet& cands, const JacobianFactors& factors,
                                    const Matrix& omega_true, const Vector& omega) {
  detail::require_simplex(omega, cands.columns(), "criterion_known_omega");
  const Index n0 = cands.target.n();
  if (omega_true.rows() != n0 || omega_true.cols() != n0)
    throw InvalidArgument("criterion_known_omega: Omega has the wrong dimension");
  if ((omega_true - omega_true.transpose()).cwiseAbs().maxCoeff() >
      1e-9 * (1.0 + omega_true.cwiseAbs().maxCoeff()))
    throw InvalidArgument("criterion_known_omega: Omega is not symmetric");
  const double fit = (cands.target.y - averaged_prediction(cands, omega)).squaredNorm();
  if (omega(0) == 0.0) return fit;
  return fit + 2.0 * omega(0) * trace_J_omega(factors, omega_true);
}

/// Out-of-sample prediction on the same region: sum_k w_k (I - rho_k W0)^{-1} X_new beta_k.
inline Vector tlmma_predict(const AveragingSolution& sol, const std::vector<SarFit>& fits,
                            const Matrix& x_new, const WeightMatrix& w0) {
  if (x_new.rows() != w0.size())
    throw InvalidArgument("tlmma_predict: X_new has " + std::to_string(x_new.rows()) +
                          " rows but the target region has " + std::to_string(w0.size()) +
                          " units (predictions must be for the same region)");
  if (sol.weights.size() != static_cast<Index>(fits.size()))
    throw InvalidArgument("tlmma_predict: weight vector does not match the candidate list");
  Vector out = Vector::Zero(x_new.rows());
  for (std::size_t k = 0; k < fits.size(); ++k) {
    const double wk = sol.weights(static_cast<Index>(k));
    if (wk == 0.0) continue;
    if (fits[k].beta.size() != x_new.cols())
      throw InvalidArgument("tlmma_predict: X_new column count does not match the fits");
    const SpatialFilter filter(w0, fits[k].rho);
    out += wk * reduced_form_mean(filter, x_new, fits[k].beta);
  }
  return out;
}

/// Total weight on the candidates in `informative` (candidate indices).
inline double nu_hat(const AveragingSolution& sol, const std::vector<Index>& informative) {
  double acc = 0.0;
  for (Index k : informative) {
    if (k < 0 || k >= sol.weights.size())
      throw InvalidArgument("nu_hat: candidate index " + std::to_string(k) + " out of range");
    acc += sol.weights(k);
  }
  return acc;
}

/// End-to-end TLMMA-SAR on K+1 datasets (index 0 = target), one method.
struct TlmmaResult {
  CandidateSet candidates;
  PenaltyReport penalty;
  JacobianFactors factors;
  CriterionProblem problem;
  AveragingSolution solution;

  const std::vector<SarFit>& fits() const { return candidates.fits; }
};

inline TlmmaResult run_tlmma(std::vector<SarFit> fits, const Dataset& target,
                             const QpOptions& qp = {}, PenaltyPath path = PenaltyPath::automatic) {
  for (const auto& f : fits)
    if (f.method != fits.front().method)
      throw InvalidArgument("run_tlmma: all candidates must share one estimation method");
  JacobianFactors factors = jacobian_factors(fits.front(), target);
  PenaltyReport pen = penalty(fits.front(), factors, target.W, path);
  CandidateSet cands = candidate_predictions(std::move(fits), target);
  CriterionProblem prob = assemble_criterion(cands, pen);
  AveragingSolution sol = solve_simplex_qp(prob, cands, qp);
  return {std::move(cands), std::move(pen), std::move(factors), std::move(prob), std::move(sol)};
}

inline TlmmaResult run_tlmma(const std::vector<Dataset>& data, Method method,
                             const QpOptions& qp = {}) {
  if (data.empty()) throw InvalidArgument("run_tlmma: no datasets");
  std::vector<SarFit> fits;
  fits.reserve(data.size());
  for (const auto& d : data) fits.push_back(fit_sar(d, method));
  return run_tlmma(std::move(fits), data.front(), qp);
}

}  // namespace tlmma
