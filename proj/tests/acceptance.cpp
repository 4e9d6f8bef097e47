// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails. `--full` extends the weight table to n = 1024.

#include "tlmma/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <unistd.h>

using namespace tlmma;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double max_error(const std::vector<verify::Check>& checks, const std::string& prefix = {}) {
  double m = 0.0;
  for (const auto& c : checks)
    if (c.name.starts_with(prefix)) m = std::max(m, c.error);
  return m;
}

Outcome from_checks(const std::vector<verify::Check>& checks, const std::string& detail) {
  std::size_t failed = 0;
  for (const auto& c : checks)
    if (!c.passed) ++failed;
  std::ostringstream s;
  s << checks.size() - failed << "/" << checks.size() << " checks; " << detail;
  return {failed == 0 && !checks.empty(), s.str()};
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome jacobian() {
  const auto checks = verify::jacobian_suite({});
  return from_checks(checks, "max rel err mle " + fmt("%.2e", max_error(checks, "mle")) + ", 2sls " +
                                 fmt("%.2e", max_error(checks, "2sls")));
}

Outcome unbiasedness() {
  const auto checks = verify::unbiasedness_suite({});
  double worst = 0.0;
  for (const auto& c : checks) worst = std::max(worst, c.error / c.tolerance);
  return from_checks(checks, "worst |C - L - tr| / 3SE = " + fmt("%.3f", worst));
}

Outcome qp() {
  const auto checks = verify::qp_suite({});
  return from_checks(checks, "max objective gap " + fmt("%.2e", max_error(checks)));
}

Outcome identity() {
  const auto checks = verify::identity_suite({});
  return from_checks(checks, "max rel err " + fmt("%.2e", max_error(checks)));
}

Outcome recovery() {
  const Index n = 400, p = 5;
  PopulationParameters truth;
  truth.rho = 0.4;
  truth.beta = Vector::LinSpaced(p, 1.0, -1.0);
  std::ostringstream s;
  bool ok = true;
  for (Method m : {Method::mle, Method::tsls}) {
    double rho_err = 0.0, beta_err = 0.0;
    for (int r = 0; r < 100; ++r) {
      Rng rng = make_rng(child_seed(0x5EC0, static_cast<std::uint64_t>(r)));
      const SarFit f = fit_sar(generate_sar(n, p, truth, GridDirection::horizontal, rng).data, m);
      rho_err += std::abs(f.rho - 0.4) / 100.0;
      beta_err += (f.beta - truth.beta).norm() / std::sqrt(static_cast<double>(p)) / 100.0;
    }
    Rng rng = make_rng(0x5EC1);
    const SarFit exact = fit_sar(generate_sar(n, p, truth, GridDirection::horizontal, rng, 0.0).data, m);
    const double exact_err = std::max(std::abs(exact.rho - 0.4), (exact.beta - truth.beta).cwiseAbs().maxCoeff());
    const double exact_tol = m == Method::mle ? 1e-6 : 1e-8;
    ok = ok && rho_err < 0.05 && beta_err < 0.1 && exact_err <= exact_tol;
    s << to_string(m) << ": mean|rho err| " << fmt("%.4f", rho_err) << ", mean beta err/sqrt(p) "
      << fmt("%.4f", beta_err) << ", noiseless err " << fmt("%.1e", exact_err) << "; ";
  }
  return {ok, s.str()};
}

Outcome weight_table(bool full) {
  struct Reference {
    Method method;
    std::vector<double> nu;
  };
  const std::vector<Reference> refs{{Method::mle, {0.8024, 0.8713, 0.9235}}, {Method::tsls, {0.8185, 0.8851, 0.9326}}};
  std::ostringstream s;
  bool ok = true;
  for (const auto& ref : refs) {
    WeightConsistencyConfig cfg;
    cfg.method = ref.method;
    cfg.sizes = {100, 225, 400};
    if (full) cfg.sizes.push_back(1024);
    const auto rows = weight_consistency_experiment(cfg);
    int inversions = 0;
    s << to_string(ref.method) << ":";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      s << " n=" << rows[i].n << " " << fmt("%.4f", rows[i].nu_hat);
      if (i < ref.nu.size()) {
        s << " (" << fmt("%+.4f", rows[i].nu_hat - ref.nu[i]) << ")";
        ok = ok && std::abs(rows[i].nu_hat - ref.nu[i]) <= 0.05;
      }
      ok = ok && rows[i].failed == 0;
      if (i > 0 && rows[i].nu_hat < rows[i - 1].nu_hat) {
        ++inversions;
        ok = ok && rows[i - 1].nu_hat - rows[i].nu_hat <= 0.01;
      }
    }
    ok = ok && inversions <= 1;
    s << "; ";
  }
  return {ok, s.str()};
}

Outcome anti_negative_transfer() {
  std::ostringstream s;
  bool ok = true;
  for (Method m : {Method::tsls, Method::mle}) {
    for (Index a : {5, 20}) {
      SimulationConfig cfg;
      cfg.scenario = Scenario::all_correct;
      cfg.method = m;
      cfg.n0 = 144;
      cfg.n_source = 64;
      cfg.K = 10;
      cfg.p = 10;
      cfg.informative_count = std::min<Index>(a, cfg.K);
      cfg.replications = 50;
      const SimulationReport rep = run_experiment(cfg);
      double tl = 0.0, t0 = 0.0;
      for (const auto& ms : rep.methods) {
        if (ms.name == "tlmma") tl = ms.mse_mu.median;
        if (ms.name == "target_only") t0 = ms.mse_mu.median;
      }
      int violations = 0;
      for (const auto& r : rep.replications)
        if (r.ok && r.criterion_value > r.criterion_target_only + 1e-8 * (1.0 + std::abs(r.criterion_target_only)))
          ++violations;
      ok = ok && rep.failed == 0 && tl <= t0 && violations == 0;
      s << to_string(m) << " |A|=" << cfg.informative_count << ": median " << fmt("%.4f", tl) << " vs "
        << fmt("%.4f", t0) << ", criterion violations " << violations << "; ";
    }
  }
  return {ok, s.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "tlmma");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream sink;
  return cli::main(static_cast<int>(argv.size()), argv.data(), sink, sink);
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / ("tlmma-acceptance-" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream(root / "sim.cfg") << "n0 = 64\nK = 3\nn_source = 36\np = 4\ns = 2\nH = 2\n"
                                     "informative_count = 2\nreplications = 4\n";
  std::ofstream(root / "wt.cfg") << "sizes = 36, 49\nreplications = 4\np = 4\ns = 2\n";

  // Target and one source for `fit`, written from a simulated population.
  auto write_data = [&](const std::string& name, Index n, std::uint64_t seed) {
    PopulationParameters truth;
    truth.rho = 0.4;
    truth.beta = target_beta(3, 2);
    Rng rng = make_rng(seed);
    const Dataset d = generate_sar(n, 3, truth, GridDirection::horizontal, rng).data;
    std::ofstream out(root / name);
    out << "y,x1,x2,x3\n";
    for (Index i = 0; i < n; ++i)
      out << io::fmt(d.y(i)) << ',' << io::fmt(d.X(i, 0)) << ',' << io::fmt(d.X(i, 1)) << ','
          << io::fmt(d.X(i, 2)) << '\n';
    const WeightMatrix w = build_grid_weights(n, GridDirection::horizontal);
    std::ofstream edges(root / (name + ".edges"));
    for (Index i = 0; i < n; ++i)
      for (Index j = i + 1; j < n; ++j)
        if (w(i, j) != 0.0) edges << i + 1 << ' ' << j + 1 << '\n';
  };
  write_data("target.csv", 49, 1);
  write_data("source.csv", 36, 2);
  const std::string r = root.string() + "/";

  struct Command {
    std::vector<std::string> args;
    std::vector<std::string> files;
  };
  const std::vector<Command> commands{
      {{"simulate", "--config", r + "sim.cfg", "--seed", "7"}, {"replications.csv", "report.json"}},
      {{"weights-table", "--config", r + "wt.cfg", "--seed", "7"}, {"weights_table.csv"}},
      {{"fit", "--method", "2sls", "--target", r + "target.csv", "--target-weights", r + "target.csv.edges",
        "--source", r + "source.csv", "--source-weights", r + "source.csv.edges"},
       {"fit.json"}},
      {{"verify", "--quick", "--suite", "qp", "--suite", "identity"}, {"verify.json"}},
  };
  std::ostringstream s;
  bool ok = true;
  int compared = 0;
  for (std::size_t c = 0; c < commands.size(); ++c) {
    std::vector<std::string> outputs;
    for (const char* threads : {"1", "1", "3"}) {
      const fs::path out = root / ("run" + std::to_string(c) + "_" + std::to_string(outputs.size()));
      auto args = commands[c].args;
      if (args.front() == "simulate" || args.front() == "weights-table") {
        args.push_back("--threads");
        args.push_back(threads);
      }
      args.push_back("--out");
      args.push_back(out.string());
      if (run_cli(args) != 0) {
        ok = false;
        s << commands[c].args.front() << " exited nonzero; ";
      }
      std::string blob;
      for (const auto& f : commands[c].files) blob += slurp(out / f);
      outputs.push_back(std::move(blob));
    }
    const bool same = !outputs[0].empty() && outputs[0] == outputs[1] && outputs[1] == outputs[2];
    ok = ok && same;
    compared += 3;
    s << commands[c].args.front() << (same ? " identical" : " DIFFERS") << "; ";
  }
  fs::remove_all(root);
  s << compared << " runs compared (threads 1, 1, 3 where applicable)";
  return {ok, s.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const bool full = argc > 1 && std::strcmp(argv[1], "--full") == 0;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"jacobian trace vs finite-difference refits", jacobian},
      {"risk unbiasedness Monte Carlo", unbiasedness},
      {"simplex QP vs grid and analytic cases", qp},
      {"criterion quadratic-form identity", identity},
      {"estimator recovery", recovery},
      {"weight-consistency table", [full] { return weight_table(full); }},
      {"no negative transfer", anti_negative_transfer},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failed;
    while (o.detail.ends_with(" ") || o.detail.ends_with(";")) o.detail.pop_back();
    std::cout << "criterion " << i + 1 << ": " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first
              << "  [" << o.detail << "] (" << fmt("%.1f", secs) << " s)" << std::endl;
  }
  std::cout << (failed == 0 ? "acceptance: all criteria passed" : "acceptance: " + std::to_string(failed) + " failed")
            << std::endl;
  return failed == 0 ? 0 : 1;
}
