#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace tlmma;

namespace {

std::vector<Dataset> populations(Index k_sources, Method m, std::uint64_t seed) {
  SimulationConfig cfg;
  cfg.n0 = 49;
  cfg.n_source = 36;
  cfg.K = k_sources;
  cfg.p = 3;
  cfg.s = 2;
  cfg.H = 2;
  cfg.informative_count = std::min<Index>(k_sources, 1);
  cfg.method = m;
  std::vector<Dataset> out;
  for (Index k = 0; k <= k_sources; ++k) {
    Rng rng = make_rng(child_seed(seed, static_cast<std::uint64_t>(k)));
    out.push_back(generate_population(cfg, k, rng).data);
  }
  return out;
}

std::vector<SarFit> fit_all(const std::vector<Dataset>& d, Method m) {
  std::vector<SarFit> f;
  for (const auto& x : d) f.push_back(fit_sar(x, m));
  return f;
}

double direct_criterion(const CandidateSet& c, double trace_jomega, const Vector& w) {
  Vector mu = Vector::Zero(c.target.n());
  for (Index j = 0; j < w.size(); ++j) mu += w(j) * c.predictions.col(j);
  double fit = 0.0;
  for (Index i = 0; i < mu.size(); ++i) fit += (c.target.y(i) - mu(i)) * (c.target.y(i) - mu(i));
  return fit + 2.0 * w(0) * trace_jomega;
}

}  // namespace

TEST(CandidatePredictions, TargetOnly) {
  const auto data = populations(0, Method::mle, 1);
  const auto fits = fit_all(data, Method::mle);
  const CandidateSet c = candidate_predictions(fits, data.front());
  ASSERT_EQ(c.columns(), 1);
  EXPECT_LE((c.predictions.col(0) - fitted_mean(fits.front(), data.front())).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CandidatePredictions, ColumnsMatchExplicitInverse) {
  const auto data = populations(3, Method::tsls, 2);
  const auto fits = fit_all(data, Method::tsls);
  const CandidateSet c = candidate_predictions(fits, data.front());
  for (Index j = 0; j < c.columns(); ++j) {
    const SarFit& f = fits[static_cast<std::size_t>(c.retained[static_cast<std::size_t>(j)])];
    const Vector mu = oracle::mean_by_inverse(data.front().W.dense(), f.rho, data.front().X, f.beta);
    EXPECT_LE((c.predictions.col(j) - mu).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(CandidatePredictions, InadmissibleSourceIsDropped) {
  const auto data = populations(2, Method::tsls, 3);
  auto fits = fit_all(data, Method::tsls);
  fits[1].inadmissible_rho = true;
  fits[2].rho = 1.2;
  const CandidateSet c = candidate_predictions(fits, data.front());
  EXPECT_EQ(c.columns(), 1);
  ASSERT_EQ(c.dropped.size(), 2u);
  EXPECT_EQ(c.dropped[0].index, 1);
  EXPECT_EQ(c.dropped[0].reason, "inadmissible-rho");
  EXPECT_EQ(c.dropped[1].index, 2);
  fits[0].inadmissible_rho = true;
  EXPECT_THROW(candidate_predictions(fits, data.front()), Error);
}

TEST(Criterion, QuadraticFormMatchesDirectEvaluation) {
  std::mt19937_64 g(4);
  for (Method m : {Method::mle, Method::tsls}) {
    const auto data = populations(4, m, 5);
    const TlmmaResult tl = run_tlmma(data, m);
    for (int t = 0; t < 100; ++t) {
      const Vector w = oracle::simplex_point(tl.problem.columns(), g);
      const double direct = direct_criterion(tl.candidates, tl.penalty.trace_JOmega, w);
      EXPECT_LE(std::abs(evaluate_criterion(tl.problem, w) - direct), 1e-8 * std::abs(direct));
    }
  }
}

TEST(Criterion, Vertices) {
  const auto data = populations(3, Method::mle, 6);
  const TlmmaResult tl = run_tlmma(data, Method::mle);
  const CandidateSet& c = tl.candidates;
  for (Index j = 0; j < c.columns(); ++j) {
    const Vector e = Vector::Unit(c.columns(), j);
    double expected = (c.target.y - c.predictions.col(j)).squaredNorm();
    if (j == 0) expected += 2.0 * tl.penalty.trace_JOmega;
    EXPECT_NEAR(evaluate_criterion(tl.problem, e), expected, 1e-9 * expected);
  }
  EXPECT_THROW(evaluate_criterion(tl.problem, Vector::Constant(c.columns(), 0.5)), InvalidArgument);
}

TEST(Criterion, OmegaScalingOnlyMovesD0) {
  const auto data = populations(2, Method::tsls, 7);
  const TlmmaResult tl = run_tlmma(data, Method::tsls);
  PenaltyReport scaled = tl.penalty;
  scaled.trace_JOmega *= 3.0;
  scaled.omega_hat *= 3.0;
  const CriterionProblem p = assemble_criterion(tl.candidates, scaled);
  EXPECT_EQ(p.Q, tl.problem.Q);
  EXPECT_NEAR(p.d(0), 3.0 * tl.problem.d(0), 1e-12 * std::abs(p.d(0)));
  for (Index j = 1; j < p.d.size(); ++j) EXPECT_EQ(p.d(j), 0.0);
}

TEST(SimplexQp, AnalyticCases) {
  {
    const auto r = solve_simplex_qp(Matrix::Identity(2, 2), Vector::Zero(2));
    EXPECT_NEAR(r.weights(0), 0.5, 1e-8);
    EXPECT_NEAR(r.weights(1), 0.5, 1e-8);
    EXPECT_NEAR(r.value, 0.5, 1e-8);
  }
  {
    Matrix q = Matrix::Zero(2, 2);
    q.diagonal() << 1.0, 2.0;
    const auto r = solve_simplex_qp(q, Vector::Zero(2));
    EXPECT_NEAR(r.weights(0), 2.0 / 3.0, 1e-8);
    EXPECT_NEAR(r.weights(1), 1.0 / 3.0, 1e-8);
    EXPECT_NEAR(r.value, 2.0 / 3.0, 1e-8);
  }
  {
    Vector d(2);
    d << -4.0, 0.0;
    const auto r = solve_simplex_qp(Matrix::Identity(2, 2), d);
    EXPECT_NEAR(r.weights(0), 1.0, 1e-8);
    EXPECT_NEAR(r.weights(1), 0.0, 1e-8);
    EXPECT_NEAR(r.value, -3.0, 1e-8);
  }
}

TEST(SimplexQp, MatchesGridOnRandomPsdInstances) {
  std::mt19937_64 g(8);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    Matrix a(1 + i % 3, 3);
    for (Index k = 0; k < a.size(); ++k) a.data()[k] = z(g);
    Matrix q = a.transpose() * a;
    q /= q.norm();
    Vector d(3);
    for (Index k = 0; k < 3; ++k) d(k) = u(g);
    const auto r = solve_simplex_qp(q, d);
    const double grid = oracle::simplex_grid_min(q, d, 1000);
    EXPECT_NEAR(r.value, grid, 1e-6) << "instance " << i;
    EXPECT_LE(r.value, grid + 1e-12);
    EXPECT_NEAR(r.weights.sum(), 1.0, 1e-10);
    EXPECT_GE(r.weights.minCoeff(), 0.0);
    EXPECT_LT(r.kkt_residual, 1e-8);
  }
}

TEST(SimplexQp, DuplicatedColumnsMatchDeduplicatedOptimum) {
  const auto data = populations(2, Method::mle, 9);
  auto fits = fit_all(data, Method::mle);
  const TlmmaResult base = run_tlmma(fits, data.front());
  fits.push_back(fits[1]);
  fits.push_back(fits[2]);
  fits.push_back(fits[2]);
  const TlmmaResult dup = run_tlmma(fits, data.front());
  EXPECT_NEAR(dup.solution.criterion_value, base.solution.criterion_value,
              1e-8 * std::max(1.0, std::abs(base.solution.criterion_value)));
  EXPECT_LT(dup.solution.kkt_residual, 1e-8);
}

TEST(SimplexQp, DuplicatedSourceSplitsWeight) {
  const auto data = populations(2, Method::tsls, 10);
  auto fits = fit_all(data, Method::tsls);
  const TlmmaResult base = run_tlmma(fits, data.front());
  fits.push_back(fits[1]);
  const TlmmaResult dup = run_tlmma(fits, data.front());
  EXPECT_NEAR(dup.solution.criterion_value, base.solution.criterion_value,
              1e-8 * std::max(1.0, std::abs(base.solution.criterion_value)));
  EXPECT_NEAR(dup.solution.weights(1) + dup.solution.weights(3), base.solution.weights(1), 1e-4);
}

TEST(SimplexQp, NoWorseThanAnyVertex) {
  for (std::uint64_t seed : {11, 12, 13}) {
    const auto data = populations(5, Method::mle, seed);
    const TlmmaResult tl = run_tlmma(data, Method::mle);
    for (Index j = 0; j < tl.problem.columns(); ++j)
      EXPECT_LE(tl.solution.criterion_value,
                evaluate_criterion(tl.problem, Vector::Unit(tl.problem.columns(), j)) + 1e-8);
  }
}

TEST(SimplexQp, IterationCapCarriesBestIterate) {
  Matrix q(3, 3);
  q << 2, 0.5, 0, 0.5, 1, 0.2, 0, 0.2, 3;
  Vector d(3);
  d << 0.1, -0.3, 0.2;
  try {
    solve_simplex_qp(q, d, {.tolerance = 0.0, .max_iterations = 3});
    FAIL();
  } catch (const QpNotConverged& e) {
    EXPECT_EQ(e.best().weights.size(), 3);
    EXPECT_NEAR(e.best().weights.sum(), 1.0, 1e-12);
    EXPECT_NE(std::string(e.what()).find("KKT residual"), std::string::npos);
  }
}

TEST(KnownOmega, SubstitutionAndZeroTargetWeight) {
  const auto data = populations(2, Method::mle, 14);
  const TlmmaResult tl = run_tlmma(data, Method::mle);
  std::mt19937_64 g(15);
  for (int t = 0; t < 10; ++t) {
    const Vector w = oracle::simplex_point(3, g);
    EXPECT_NEAR(criterion_known_omega(tl.candidates, tl.factors, tl.penalty.omega_hat, w),
                evaluate_criterion(tl.problem, w), 1e-8 * evaluate_criterion(tl.problem, w));
  }
  Vector w(3);
  w << 0.0, 0.4, 0.6;
  const double fit = (tl.candidates.target.y - tl.candidates.predictions * w).squaredNorm();
  EXPECT_EQ(criterion_known_omega(tl.candidates, tl.factors, Matrix::Identity(49, 49), w), fit);
  Matrix asym = Matrix::Identity(49, 49);
  asym(0, 1) = 1.0;
  EXPECT_THROW(criterion_known_omega(tl.candidates, tl.factors, asym, Vector::Unit(3, 0)), InvalidArgument);
}

TEST(Predict, SubstitutionCases) {
  const auto data = populations(3, Method::tsls, 16);
  const TlmmaResult tl = run_tlmma(data, Method::tsls);
  const Dataset& t = data.front();
  const Vector in_sample = averaged_prediction(tl.candidates, tl.solution.column_weights);
  EXPECT_LE((tlmma_predict(tl.solution, tl.fits(), t.X, t.W) - in_sample).cwiseAbs().maxCoeff(), 1e-10);
  AveragingSolution e0 = tl.solution;
  e0.weights.setZero();
  e0.weights(0) = 1.0;
  EXPECT_LE((tlmma_predict(e0, tl.fits(), t.X, t.W) - fitted_mean(tl.fits().front(), t)).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(Predict, ResummationOracle) {
  const auto data = populations(4, Method::mle, 17);
  const TlmmaResult tl = run_tlmma(data, Method::mle);
  const Dataset& t = data.front();
  const Matrix x_new = oracle::random_matrix(49, 3, 18);
  Vector expected = Vector::Zero(49);
  for (std::size_t k = 0; k < tl.fits().size(); ++k) {
    const double wk = tl.solution.weights(static_cast<Index>(k));
    if (wk == 0.0) continue;
    const Vector mu = oracle::mean_by_inverse(t.W.dense(), tl.fits()[k].rho, x_new, tl.fits()[k].beta);
    for (Index i = 0; i < 49; ++i) expected(i) += wk * mu(i);
  }
  EXPECT_LE((tlmma_predict(tl.solution, tl.fits(), x_new, t.W) - expected).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Predict, RejectsOtherRegion) {
  const auto data = populations(1, Method::mle, 19);
  const TlmmaResult tl = run_tlmma(data, Method::mle);
  try {
    tlmma_predict(tl.solution, tl.fits(), Matrix::Zero(36, 3), data.front().W);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("same region"), std::string::npos);
  }
}

TEST(NuHat, Sets) {
  AveragingSolution s;
  s.weights = Vector(4);
  s.weights << 0.1, 0.2, 0.3, 0.4;
  EXPECT_NEAR(nu_hat(s, {0, 1, 2, 3}), 1.0, 1e-10);
  EXPECT_EQ(nu_hat(s, {}), 0.0);
  EXPECT_NEAR(nu_hat(s, {0, 3}), 0.5, 1e-15);
  EXPECT_THROW(nu_hat(s, {4}), InvalidArgument);
}

TEST(RunTlmma, MixedMethodsRejected) {
  const auto data = populations(1, Method::mle, 20);
  std::vector<SarFit> fits{fit_mle(data[0]), fit_2sls(data[1])};
  EXPECT_THROW(run_tlmma(fits, data.front()), InvalidArgument);
}
