#pragma once

// Seeded Monte Carlo harness: grid-based SAR data-generating processes, the
// three specification scenarios, MSE metrics, baselines and the
// weight-consistency experiment.

#include "tlmma/averaging.hpp"
#include "tlmma/estimators.hpp"
#include "tlmma/spatial.hpp"
#include "tlmma/types.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace tlmma {

enum class Scenario { all_correct, source_partial_misspec, target_and_source_misspec };

inline std::string_view to_string(Scenario s) {
  switch (s) {
    case Scenario::all_correct: return "all_correct";
    case Scenario::source_partial_misspec: return "source_partial_misspec";
    case Scenario::target_and_source_misspec: return "target_and_source_misspec";
  }
  return "?";
}

inline Scenario parse_scenario(std::string_view s) {
  if (s == "all_correct" || s == "i" || s == "1") return Scenario::all_correct;
  if (s == "source_partial_misspec" || s == "ii" || s == "2") return Scenario::source_partial_misspec;
  if (s == "target_and_source_misspec" || s == "iii" || s == "3")
    return Scenario::target_and_source_misspec;
  throw InvalidArgument("unknown scenario '" + std::string(s) + "'");
}

struct SimulationConfig {
  Index n0 = 256;
  Index K = 20;
  Index n_source = 100;
  std::vector<Index> source_sizes;  // overrides n_source when non-empty (length K)
  Index p = 20;
  Index s = 3;
  Index H = 5;
  double rho0 = 0.4;
  Index informative_count = 10;     // A = {1, ..., informative_count} unless `informative` is set
  std::vector<Index> informative;
  Scenario scenario = Scenario::all_correct;
  Method method = Method::tsls;
  int replications = 100;
  std::uint64_t base_seed = 20240101;
  double shift_informative = 0.05;
  double shift_noninformative = 2.0;
  int threads = 0;  // 0: hardware concurrency

  Index source_size(Index k) const {
    return source_sizes.empty() ? n_source : source_sizes.at(static_cast<std::size_t>(k - 1));
  }

  std::vector<Index> informative_set() const {
    if (!informative.empty()) return informative;
    std::vector<Index> a(static_cast<std::size_t>(informative_count));
    std::iota(a.begin(), a.end(), Index{1});
    return a;
  }

  bool is_informative(Index k) const {
    const auto a = informative_set();
    return std::find(a.begin(), a.end(), k) != a.end();
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw InvalidArgument("simulation config: " + m); };
    if (K < 0) fail("K must be non-negative");
    if (p < 1 || s < 0 || s > p) fail("need 0 <= s <= p and p >= 1");
    if (H < 0 || H > p) fail("need 0 <= H <= p");
    if (replications < 1) fail("replications must be >= 1");
    if (!source_sizes.empty() && static_cast<Index>(source_sizes.size()) != K)
      fail("source_sizes must list K sizes");
    grid_side(n0);
    for (Index k = 1; k <= K; ++k) grid_side(source_size(k));
    if (informative.empty() && (informative_count < 0 || informative_count > K))
      fail("informative count must lie in 0..K");
    for (Index k : informative)
      if (k < 1 || k > K) fail("informative index " + std::to_string(k) + " outside 1..K");
    if (n0 <= p) fail("n0 must exceed p");
  }
};

// Seed mixing (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t child_seed(std::uint64_t parent, std::uint64_t stream) {
  return mix_seed(parent ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  return Rng(seq);
}

/// Row-normalized grid weights, memoized per (n, direction). The returned
/// matrices are immutable, so sharing them across threads is safe.
inline WeightMatrix normalized_grid(Index n, GridDirection dir) {
  static std::mutex mu;
  static std::map<std::pair<Index, int>, WeightMatrix> cache;
  const std::pair<Index, int> key{n, static_cast<int>(dir)};
  {
    std::lock_guard lock(mu);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  WeightMatrix w = row_normalize(build_grid_weights(n, dir));
  std::lock_guard lock(mu);
  return cache.emplace(key, std::move(w)).first->second;
}

inline Matrix standard_normal_matrix(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> nd;
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = nd(rng);
  return m;
}

struct PopulationParameters {
  double rho = 0.0;
  Vector beta;
  std::vector<Index> shifted;  // 0-based coordinates of beta that were perturbed
};

inline Vector target_beta(Index p, Index s) {
  Vector b = Vector::Zero(p);
  b.head(s).setOnes();
  return b;
}

/// k = 0: (rho0, (1_s, 0_{p-s})). Informative sources keep rho0 and shift H
/// random coordinates by -0.05; the others flip rho and shift p/2 coordinates by -2.
inline PopulationParameters make_parameters(const SimulationConfig& cfg, Index k, Rng& rng) {
  PopulationParameters out;
  out.beta = target_beta(cfg.p, cfg.s);
  out.rho = cfg.rho0;
  if (k == 0) return out;
  const bool informative = cfg.is_informative(k);
  const Index count = informative ? cfg.H : cfg.p / 2;
  const double shift = informative ? cfg.shift_informative : cfg.shift_noninformative;
  if (!informative) out.rho = -cfg.rho0;
  std::vector<Index> idx(static_cast<std::size_t>(cfg.p));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  for (Index j : idx) out.beta(j) -= shift;
  out.shifted = std::move(idx);
  return out;
}

struct GeneratedPopulation {
  Dataset data;  // always carries the assumed (horizontal) weights
  PopulationParameters truth;
  GridDirection dgp_direction = GridDirection::horizontal;
};

/// X ~ N(0, I_p) rows, eps ~ N(0, noise_scale^2), y = (I - rho W_gen)^{-1}(X beta + eps).
inline GeneratedPopulation generate_sar(Index n, Index p, const PopulationParameters& truth,
                                        GridDirection dgp, Rng& rng, double noise_scale = 1.0) {
  GeneratedPopulation out;
  out.truth = truth;
  out.dgp_direction = dgp;
  const WeightMatrix w_fit = normalized_grid(n, GridDirection::horizontal);
  const WeightMatrix w_gen = normalized_grid(n, dgp);
  out.data.X = standard_normal_matrix(n, p, rng);
  Vector eps = standard_normal_matrix(n, 1, rng).col(0) * noise_scale;
  const SpatialFilter filter(w_gen, truth.rho);
  out.data.y = filter.solve(out.data.X * truth.beta + eps);
  out.data.W = w_fit;
  return out;
}

inline bool is_misspecified(const SimulationConfig& cfg, Index k) {
  switch (cfg.scenario) {
    case Scenario::all_correct: return false;
    case Scenario::source_partial_misspec: return k > 0 && k % 2 == 0;
    case Scenario::target_and_source_misspec: return k == 0 || k % 2 == 0;
  }
  return false;
}

inline GeneratedPopulation generate_population(const SimulationConfig& cfg, Index k, Rng& rng,
                                               double noise_scale = 1.0) {
  const Index n = k == 0 ? cfg.n0 : cfg.source_size(k);
  grid_side(n);
  PopulationParameters truth = make_parameters(cfg, k, rng);
  const GridDirection dgp =
      is_misspecified(cfg, k) ? GridDirection::vertical : GridDirection::horizontal;
  return generate_sar(n, cfg.p, truth, dgp, rng, noise_scale);
}

inline double mse_delta(const Vector& delta_tilde, const Vector& delta_true) {
  if (delta_tilde.size() != delta_true.size()) throw InvalidArgument("mse_delta: dimension mismatch");
  return (delta_tilde - delta_true).squaredNorm();
}

inline double mse_mu(const Vector& mu_hat, const Vector& mu_true, Index n0) {
  if (mu_hat.size() != mu_true.size() || mu_hat.size() != n0)
    throw InvalidArgument("mse_mu: dimension mismatch");
  return (mu_hat - mu_true).squaredNorm() / static_cast<double>(n0);
}

struct MethodMetrics {
  std::string name;  // tlmma | target_only | uniform
  double mse_delta = 0.0;
  double mse_mu = 0.0;
};

struct ReplicationResult {
  Index replication = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string failure;
  std::vector<MethodMetrics> methods;
  Vector weights;
  double nu_hat = 0.0;
  double criterion_value = 0.0;        // C_hat(w_hat)
  double criterion_target_only = 0.0;  // C_hat(e_0)
  double kkt_residual = 0.0;
  std::size_t dropped = 0;

  const MethodMetrics& metrics(std::string_view name) const {
    for (const auto& m : methods)
      if (m.name == name) return m;
    throw InvalidArgument("no metrics for method " + std::string(name));
  }
};

inline constexpr std::uint64_t kXNewStream = 0xA11CE;

inline ReplicationResult run_replication(const SimulationConfig& cfg, std::uint64_t seed,
                                         Index replication = 0) {
  cfg.validate();
  ReplicationResult res;
  res.replication = replication;
  res.seed = seed;
  try {
    std::vector<GeneratedPopulation> pops;
    pops.reserve(static_cast<std::size_t>(cfg.K + 1));
    for (Index k = 0; k <= cfg.K; ++k) {
      Rng rng = make_rng(child_seed(seed, static_cast<std::uint64_t>(k)));
      pops.push_back(generate_population(cfg, k, rng));
    }
    std::vector<SarFit> fits;
    for (Index k = 0; k <= cfg.K; ++k) {
      try {
        fits.push_back(fit_sar(pops[static_cast<std::size_t>(k)].data, cfg.method));
      } catch (const Error& e) {
        throw Error("fit of candidate " + std::to_string(k) + " failed: " + e.what());
      }
    }
    const Dataset& target = pops.front().data;
    const TlmmaResult tl = run_tlmma(fits, target);
    const AveragingSolution& sol = tl.solution;

    Rng xrng = make_rng(child_seed(seed, kXNewStream));
    const Matrix x_new = standard_normal_matrix(cfg.n0, cfg.p, xrng);
    const Vector beta0 = target_beta(cfg.p, cfg.s);
    Vector delta0(cfg.p + 1);
    delta0 << beta0, cfg.rho0;
    const WeightMatrix& w0 = target.W;
    const WeightMatrix w_true = normalized_grid(cfg.n0, pops.front().dgp_direction);
    const Vector mu_true = reduced_form_mean(SpatialFilter(w_true, cfg.rho0), x_new, beta0);

    Vector delta_tl = Vector::Zero(cfg.p + 1);
    for (Index k = 0; k <= cfg.K; ++k) delta_tl += sol.weights(k) * fits[static_cast<std::size_t>(k)].delta();
    const Vector mu_tl = tlmma_predict(sol, fits, x_new, w0);
    res.methods.push_back({"tlmma", mse_delta(delta_tl, delta0), mse_mu(mu_tl, mu_true, cfg.n0)});

    AveragingSolution e0 = sol;
    e0.weights.setZero();
    e0.weights(0) = 1.0;
    const Vector mu_t = tlmma_predict(e0, fits, x_new, w0);
    res.methods.push_back({"target_only", mse_delta(fits.front().delta(), delta0),
                           mse_mu(mu_t, mu_true, cfg.n0)});

    AveragingSolution uni = sol;
    uni.weights.setZero();
    Vector delta_u = Vector::Zero(cfg.p + 1);
    const double share = 1.0 / static_cast<double>(sol.retained.size());
    for (Index k : sol.retained) {
      uni.weights(k) = share;
      delta_u += share * fits[static_cast<std::size_t>(k)].delta();
    }
    const Vector mu_u = tlmma_predict(uni, fits, x_new, w0);
    res.methods.push_back({"uniform", mse_delta(delta_u, delta0), mse_mu(mu_u, mu_true, cfg.n0)});

    res.weights = sol.weights;
    std::vector<Index> inf_set{0};
    for (Index k : cfg.informative_set()) inf_set.push_back(k);
    res.nu_hat = nu_hat(sol, inf_set);
    res.criterion_value = sol.criterion_value;
    Vector e0c = Vector::Zero(tl.problem.columns());
    e0c(0) = 1.0;
    res.criterion_target_only = evaluate_criterion(tl.problem, e0c);
    res.kkt_residual = sol.kkt_residual;
    res.dropped = sol.dropped.size();
    res.ok = true;
  } catch (const Error& e) {
    res.ok = false;
    res.failure = e.what();
    res.methods.clear();
  }
  return res;
}

inline std::uint64_t replication_seed(std::uint64_t base_seed, Index r) {
  return child_seed(mix_seed(base_seed), static_cast<std::uint64_t>(r) + 1);
}

/// Runs fn(i) for i in [0, count) on `threads` workers (0: hardware
/// concurrency). fn must write only to its own slot.
template <typename Fn>
void parallel_for(Index count, int threads, Fn&& fn) {
  int t = threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  t = static_cast<int>(std::min<Index>(t, std::max<Index>(count, 1)));
  if (t <= 1) {
    for (Index i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(t));
  for (int w = 0; w < t; ++w)
    pool.emplace_back([&] {
      for (Index i = next++; i < count; i = next++) fn(i);
    });
}

struct SummaryStats {
  double mean = 0.0, median = 0.0, q25 = 0.0, q75 = 0.0, min = 0.0, max = 0.0;
  std::size_t count = 0;
};

/// Linear-interpolation quantile (Hyndman-Fan type 7) of sorted data.
inline double quantile_sorted(const std::vector<double>& v, double prob) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double h = (static_cast<double>(v.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline SummaryStats summarize(std::vector<double> v) {
  SummaryStats s;
  s.count = v.size();
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  s.median = quantile_sorted(v, 0.5);
  s.q25 = quantile_sorted(v, 0.25);
  s.q75 = quantile_sorted(v, 0.75);
  s.min = v.front();
  s.max = v.back();
  return s;
}

struct MethodSummary {
  std::string name;
  SummaryStats mse_delta;
  SummaryStats mse_mu;
};

struct SimulationReport {
  SimulationConfig config;
  std::vector<ReplicationResult> replications;  // ordered by replication index
  std::vector<MethodSummary> methods;
  Vector mean_weights;
  double mean_nu_hat = 0.0;
  std::size_t succeeded = 0;
  std::size_t failed = 0;
};

inline SimulationReport aggregate(const SimulationConfig& cfg,
                                  std::vector<ReplicationResult> reps) {
  SimulationReport rep;
  rep.config = cfg;
  rep.mean_weights = Vector::Zero(cfg.K + 1);
  std::vector<std::string> names;
  for (const auto& r : reps) {
    if (!r.ok) {
      ++rep.failed;
      continue;
    }
    ++rep.succeeded;
    rep.mean_weights += r.weights;
    rep.mean_nu_hat += r.nu_hat;
    if (names.empty())
      for (const auto& m : r.methods) names.push_back(m.name);
  }
  if (rep.succeeded == 0) throw Error("simulation: all replications failed");
  rep.mean_weights /= static_cast<double>(rep.succeeded);
  rep.mean_nu_hat /= static_cast<double>(rep.succeeded);
  for (const auto& name : names) {
    std::vector<double> md, mm;
    for (const auto& r : reps) {
      if (!r.ok) continue;
      md.push_back(r.metrics(name).mse_delta);
      mm.push_back(r.metrics(name).mse_mu);
    }
    rep.methods.push_back({name, summarize(std::move(md)), summarize(std::move(mm))});
  }
  rep.replications = std::move(reps);
  return rep;
}

inline SimulationReport run_experiment(const SimulationConfig& cfg) {
  cfg.validate();
  std::vector<ReplicationResult> reps(static_cast<std::size_t>(cfg.replications));
  parallel_for(cfg.replications, cfg.threads, [&](Index r) {
    reps[static_cast<std::size_t>(r)] = run_replication(cfg, replication_seed(cfg.base_seed, r), r);
  });
  return aggregate(cfg, std::move(reps));
}

struct WeightConsistencyConfig {
  std::vector<Index> sizes{100, 225, 400, 625, 900, 1024};
  Method method = Method::mle;
  int replications = 100;
  std::uint64_t base_seed = 20240101;
  Index p = 20;
  Index s = 3;
  double rho0 = 0.4;
  Index K = 6;
  Index informative_sources = 3;  // sources 1..3 share the target parameters
  double offset = 0.1;            // added to every coordinate of delta otherwise
  int threads = 0;
};

struct WeightTableRow {
  Index n = 0;
  double nu_hat = 0.0;
  Vector weights;  // averaged, length K+1
  std::size_t succeeded = 0;
  std::size_t failed = 0;
  std::vector<double> nu_hat_per_replication;
};

/// One replication of the weight-consistency design at a common size n;
/// returns the solution weights.
inline Vector weight_consistency_replication(const WeightConsistencyConfig& cfg, Index n,
                                             std::uint64_t seed) {
  std::vector<Dataset> data;
  for (Index k = 0; k <= cfg.K; ++k) {
    PopulationParameters par;
    par.beta = target_beta(cfg.p, cfg.s);
    par.rho = cfg.rho0;
    if (k > cfg.informative_sources) {
      par.beta.array() += cfg.offset;
      par.rho += cfg.offset;
    }
    Rng rng = make_rng(child_seed(seed, static_cast<std::uint64_t>(k)));
    data.push_back(generate_sar(n, cfg.p, par, GridDirection::horizontal, rng).data);
  }
  return run_tlmma(data, cfg.method).solution.weights;
}

inline std::vector<WeightTableRow> weight_consistency_experiment(const WeightConsistencyConfig& cfg) {
  if (cfg.replications < 1) throw InvalidArgument("weight consistency: replications must be >= 1");
  std::vector<WeightTableRow> rows;
  for (Index n : cfg.sizes) {
    grid_side(n);
    std::vector<std::optional<Vector>> ws(static_cast<std::size_t>(cfg.replications));
    parallel_for(cfg.replications, cfg.threads, [&](Index r) {
      const std::uint64_t seed =
          child_seed(replication_seed(cfg.base_seed, r), static_cast<std::uint64_t>(n));
      try {
        ws[static_cast<std::size_t>(r)] = weight_consistency_replication(cfg, n, seed);
      } catch (const Error&) {
        ws[static_cast<std::size_t>(r)].reset();
      }
    });
    WeightTableRow row;
    row.n = n;
    row.weights = Vector::Zero(cfg.K + 1);
    for (const auto& w : ws) {
      if (!w) {
        ++row.failed;
        continue;
      }
      ++row.succeeded;
      row.weights += *w;
      const double nu = w->head(cfg.informative_sources + 1).sum();
      row.nu_hat_per_replication.push_back(nu);
      row.nu_hat += nu;
    }
    if (row.succeeded == 0) throw Error("weight consistency: all replications failed at n = " + std::to_string(n));
    row.weights /= static_cast<double>(row.succeeded);
    row.nu_hat /= static_cast<double>(row.succeeded);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace tlmma
