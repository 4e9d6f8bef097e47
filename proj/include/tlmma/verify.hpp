#pragma once

// Self-verification suites run by `tlmma verify` and the acceptance binary.

#include "tlmma/averaging.hpp"
#include "tlmma/estimators.hpp"
#include "tlmma/influence.hpp"
#include "tlmma/simulation.hpp"

#include <cmath>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace tlmma::verify {

struct Check {
  std::string suite;
  std::string name;
  bool passed = false;
  double value = 0.0;      // measured
  double reference = 0.0;  // oracle
  double error = 0.0;      // |value - reference| in the metric of the check
  double tolerance = 0.0;
  std::string detail;
};

struct Options {
  bool quick = false;
  std::uint64_t seed = 20240101;
  double trace_perturbation = 0.0;  // relative fault injected into analytic traces
  int unbiasedness_draws = 0;           // 0: 300 quick, 2000 otherwise
};

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"jacobian", "qp", "unbiasedness", "identity"};
  return names;
}

inline Check make_check(std::string suite, std::string name, double value, double reference,
                        double error, double tolerance, std::string detail = {}) {
  return {std::move(suite), std::move(name), std::isfinite(error) && error <= tolerance,
          value,           reference,        error,
          tolerance,       std::move(detail)};
}

/// Seeded SAR instance on a horizontal grid.
inline Dataset sar_instance(Index n, Index p, double rho, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  PopulationParameters truth;
  truth.rho = rho;
  truth.beta = target_beta(p, p);
  return generate_sar(n, p, truth, GridDirection::horizontal, rng).data;
}

// ---------------------------------------------------------------------------

/// Analytic tr(J) against central finite differences with full refits.
inline std::vector<Check> jacobian_suite(const Options& opt) {
  const std::vector<Index> sizes{25, 36, 49};
  const int instances = opt.quick ? 6 : 20;
  std::vector<Check> out;
  for (int i = 0; i < instances; ++i) {
    const Index n = sizes[static_cast<std::size_t>(i) % sizes.size()];
    const Index p = 2 + (i / 3) % 2;
    const Dataset data = sar_instance(n, p, 0.4, child_seed(opt.seed, 100 + i));
    for (Method m : {Method::mle, Method::tsls}) {
      const double tol = m == Method::mle ? 1e-3 : 1e-4;
      const std::string name = std::string(to_string(m)) + " n=" + std::to_string(n) +
                               " p=" + std::to_string(p) + " #" + std::to_string(i);
      try {
        const SarFit fit = fit_sar(data, m);
        const double analytic =
            jacobian_trace(jacobian_factors(fit, data)).total() * (1.0 + opt.trace_perturbation);
        const double fd = jacobian_trace_fd(refit_mean(m), data);
        out.push_back(make_check("jacobian", name, analytic, fd,
                                 std::abs(analytic - fd) / std::abs(fd), tol));
      } catch (const Error& e) {
        out.push_back({"jacobian", name, false, 0, 0, 0, tol, e.what()});
      }
    }
  }
  return out;
}

/// Exhaustive simplex grid for three weights at step 1/steps.
inline double grid_minimum_3(const Matrix& q, const Vector& d, int steps) {
  double best = std::numeric_limits<double>::infinity();
  const double h = 1.0 / steps;
  for (int a = 0; a <= steps; ++a) {
    for (int b = 0; a + b <= steps; ++b) {
      const double w0 = a * h, w1 = b * h, w2 = 1.0 - w0 - w1;
      const double v = q(0, 0) * w0 * w0 + q(1, 1) * w1 * w1 + q(2, 2) * w2 * w2 +
                       2.0 * (q(0, 1) * w0 * w1 + q(0, 2) * w0 * w2 + q(1, 2) * w1 * w2) +
                       d(0) * w0 + d(1) * w1 + d(2) * w2;
      best = std::min(best, v);
    }
  }
  return best;
}

/// Random PSD matrices of rank 1..3 with spectral norm one and d ~ U(-1, 1).
inline std::pair<Matrix, Vector> random_qp_instance(Rng& rng) {
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Index rank = 1 + static_cast<Index>(rng() % 3);
  Matrix a(rank, 3);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = z(rng);
  Matrix q = a.transpose() * a;
  q /= Eigen::SelfAdjointEigenSolver<Matrix>(q).eigenvalues().maxCoeff();
  Vector d(3);
  for (Index i = 0; i < 3; ++i) d(i) = u(rng);
  return {q, d};
}

inline std::vector<Check> qp_suite(const Options& opt) {
  std::vector<Check> out;
  struct Analytic {
    const char* name;
    Matrix q;
    Vector d;
    Vector w;
    double value;
  };
  std::vector<Analytic> cases;
  cases.push_back({"Q=I", Matrix::Identity(2, 2), Vector::Zero(2), Vector::Constant(2, 0.5), 0.5});
  {
    Matrix q = Matrix::Zero(2, 2);
    q.diagonal() << 1.0, 2.0;
    Vector w(2);
    w << 2.0 / 3.0, 1.0 / 3.0;
    cases.push_back({"Q=diag(1,2)", q, Vector::Zero(2), w, 2.0 / 3.0});
  }
  {
    Vector d(2), w(2);
    d << -4.0, 0.0;
    w << 1.0, 0.0;
    cases.push_back({"Q=I d=(-4,0)", Matrix::Identity(2, 2), d, w, -3.0});
  }
  for (const auto& c : cases) {
    try {
      const SimplexQpResult r = solve_simplex_qp(c.q, c.d);
      const double err = std::max((r.weights - c.w).cwiseAbs().maxCoeff(), std::abs(r.value - c.value));
      out.push_back(make_check("qp", c.name, r.value, c.value, err, 1e-8));
    } catch (const Error& e) {
      out.push_back({"qp", c.name, false, 0, 0, 0, 1e-8, e.what()});
    }
  }

  Rng rng = make_rng(child_seed(opt.seed, 0x9B));
  const int instances = opt.quick ? 10 : 50;
  const int steps = 1000;
  for (int i = 0; i < instances; ++i) {
    const auto [q, d] = random_qp_instance(rng);
    const std::string name = "random PSD #" + std::to_string(i);
    try {
      const SimplexQpResult r = solve_simplex_qp(q, d);
      const double grid = grid_minimum_3(q, d, steps);
      Check c = make_check("qp", name, r.value, grid, std::abs(r.value - grid), 1e-6);
      // The grid contains feasible points only, so the solver may not lose to it.
      if (r.value > grid + 1e-12) {
        c.passed = false;
        c.detail = "solver worse than grid";
      }
      out.push_back(c);
    } catch (const Error& e) {
      out.push_back({"qp", name, false, 0, 0, 0, 1e-6, e.what()});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

struct RiskMonteCarlo {
  Method method = Method::mle;
  std::vector<Vector> omegas;
  std::vector<double> mean_criterion;  // mean C(w)
  std::vector<double> mean_risk;       // mean L(w) + tr(Omega0)
  std::vector<double> std_error;       // of the paired difference
  int draws = 0;
  int failed = 0;
};

/// Monte Carlo over error draws with X, W0 and the two source fits held fixed.
inline RiskMonteCarlo risk_monte_carlo(Method method, int draws, std::uint64_t seed) {
  const Index n0 = 64, p = 3;
  const double rho0 = 0.4;
  RiskMonteCarlo res;
  res.method = method;
  res.draws = draws;
  Vector w(3);
  res.omegas.push_back(Vector::Unit(3, 0));
  res.omegas.push_back(Vector::Constant(3, 1.0 / 3.0));
  w << 0.7, 0.2, 0.1;
  res.omegas.push_back(w);

  const WeightMatrix w0 = normalized_grid(n0, GridDirection::horizontal);
  Rng xrng = make_rng(child_seed(seed, 1));
  const Matrix x = standard_normal_matrix(n0, p, xrng);
  const Vector beta0 = target_beta(p, p);
  const SpatialFilter s0(w0, rho0);
  const Vector mu0 = reduced_form_mean(s0, x, beta0);
  const Matrix s0inv = s0.inverse();
  Matrix omega0 = s0inv * s0inv.transpose();
  omega0 = 0.5 * (omega0 + omega0.transpose());
  const double tr_omega0 = omega0.trace();

  std::vector<SarFit> sources;
  for (int k = 1; k <= 2; ++k) {
    PopulationParameters par;
    par.rho = k == 1 ? rho0 : rho0 - 0.2;
    par.beta = beta0.array() + (k == 1 ? 0.0 : 0.5);
    Rng srng = make_rng(child_seed(seed, 10 + static_cast<std::uint64_t>(k)));
    sources.push_back(fit_sar(generate_sar(n0, p, par, GridDirection::horizontal, srng).data, method));
  }

  const std::size_t nw = res.omegas.size();
  std::vector<double> sum_c(nw, 0.0), sum_r(nw, 0.0), sum_d(nw, 0.0), sum_d2(nw, 0.0);
  int ok = 0;
  Rng erng = make_rng(child_seed(seed, 2));
  for (int r = 0; r < draws; ++r) {
    const Vector eps = standard_normal_matrix(n0, 1, erng).col(0);
    Dataset data{x, mu0 + s0.solve(eps), w0};
    try {
      std::vector<SarFit> fits{fit_sar(data, method)};
      fits.insert(fits.end(), sources.begin(), sources.end());
      const JacobianFactors f = jacobian_factors(fits.front(), data);
      const CandidateSet cands = candidate_predictions(fits, data);
      if (cands.columns() != 3) throw Error("candidate dropped");
      for (std::size_t j = 0; j < nw; ++j) {
        const double c = criterion_known_omega(cands, f, omega0, res.omegas[j]);
        const double loss = (averaged_prediction(cands, res.omegas[j]) - mu0).squaredNorm();
        const double diff = c - loss - tr_omega0;
        sum_c[j] += c;
        sum_r[j] += loss + tr_omega0;
        sum_d[j] += diff;
        sum_d2[j] += diff * diff;
      }
      ++ok;
    } catch (const Error&) {
      ++res.failed;
    }
  }
  for (std::size_t j = 0; j < nw; ++j) {
    const double m = ok > 0 ? sum_d[j] / ok : 0.0;
    const double var = ok > 1 ? (sum_d2[j] - ok * m * m) / (ok - 1) : 0.0;
    res.mean_criterion.push_back(ok > 0 ? sum_c[j] / ok : 0.0);
    res.mean_risk.push_back(ok > 0 ? sum_r[j] / ok : 0.0);
    res.std_error.push_back(std::sqrt(std::max(var, 0.0) / std::max(ok, 1)));
  }
  return res;
}

inline std::vector<Check> unbiasedness_suite(const Options& opt) {
  const int draws = opt.unbiasedness_draws > 0 ? opt.unbiasedness_draws : (opt.quick ? 300 : 2000);
  const char* labels[] = {"e0", "uniform", "(0.7,0.2,0.1)"};
  std::vector<Check> out;
  for (Method m : {Method::mle, Method::tsls}) {
    const RiskMonteCarlo r = risk_monte_carlo(m, draws, child_seed(opt.seed, 0x7E1));
    for (std::size_t j = 0; j < r.omegas.size(); ++j) {
      const double gap = std::abs(r.mean_criterion[j] - r.mean_risk[j]);
      Check c = make_check("unbiasedness", std::string(to_string(m)) + " w=" + labels[j],
                           r.mean_criterion[j], r.mean_risk[j], gap, 3.0 * r.std_error[j],
                           std::to_string(draws - r.failed) + " draws");
      if (r.failed > 0) {
        c.passed = false;
        c.detail += ", " + std::to_string(r.failed) + " failed";
      }
      out.push_back(c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Quadratic form against direct evaluation on random simplex points.
inline std::vector<Check> identity_suite(const Options& opt) {
  std::vector<Check> out;
  const int instances = opt.quick ? 2 : 4;
  for (int i = 0; i < instances; ++i) {
    SimulationConfig cfg;
    cfg.n0 = 64;
    cfg.n_source = 36;
    cfg.K = 3;
    cfg.p = 3;
    cfg.s = 2;
    cfg.H = 2;
    cfg.informative_count = 1;
    cfg.method = i % 2 == 0 ? Method::mle : Method::tsls;
    const std::uint64_t seed = child_seed(opt.seed, 0x1D + static_cast<std::uint64_t>(i));
    const std::string name =
        std::string(to_string(cfg.method)) + " instance #" + std::to_string(i);
    try {
      std::vector<Dataset> data;
      for (Index k = 0; k <= cfg.K; ++k) {
        Rng rng = make_rng(child_seed(seed, static_cast<std::uint64_t>(k)));
        data.push_back(generate_population(cfg, k, rng).data);
      }
      const TlmmaResult tl = run_tlmma(data, cfg.method);
      const CandidateSet& c = tl.candidates;
      Rng wrng = make_rng(child_seed(seed, 0xFF));
      std::exponential_distribution<double> ex(1.0);
      double worst = 0.0;
      for (int t = 0; t < 100; ++t) {
        Vector w(c.columns());
        for (Index j = 0; j < w.size(); ++j) w(j) = ex(wrng);
        w /= w.sum();
        const double quad = evaluate_criterion(tl.problem, w);
        const double direct = (c.target.y - c.predictions * w).squaredNorm() +
                              2.0 * w(0) * tl.penalty.trace_JOmega;
        worst = std::max(worst, std::abs(quad - direct) / std::max(1.0, std::abs(direct)));
      }
      out.push_back(make_check("identity", name, worst, 0.0, worst, 1e-8, "100 points"));
    } catch (const Error& e) {
      out.push_back({"identity", name, false, 0, 0, 0, 1e-8, e.what()});
    }
  }
  return out;
}

inline std::vector<Check> run_suite(const std::string& suite, const Options& opt) {
  if (suite == "jacobian") return jacobian_suite(opt);
  if (suite == "qp") return qp_suite(opt);
  if (suite == "unbiasedness") return unbiasedness_suite(opt);
  if (suite == "identity") return identity_suite(opt);
  throw InvalidArgument("unknown verify suite '" + suite + "'");
}

inline void print_table(std::ostream& os, const std::vector<Check>& checks) {
  for (const auto& c : checks) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-4s %-9s %-28s value=%-14.8g oracle=%-14.8g err=%-10.3g tol=%.3g",
                  c.passed ? "PASS" : "FAIL", c.suite.c_str(), c.name.c_str(), c.value,
                  c.reference, c.error, c.tolerance);
    os << buf;
    if (!c.detail.empty()) os << "  (" << c.detail << ")";
    os << '\n';
  }
}

}  // namespace tlmma::verify
