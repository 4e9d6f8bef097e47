#pragma once

// Command implementations behind the `tlmma` executable. Each command writes
// its outputs into an output directory together with manifest.json.

#include "tlmma/averaging.hpp"
#include "tlmma/io.hpp"
#include "tlmma/simulation.hpp"
#include "tlmma/verify.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace tlmma::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kInputError = 2, kRuntimeError = 3 };

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string method;
  int threads = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::vector<std::string> notes;
  std::chrono::system_clock::time_point started = std::chrono::system_clock::now();
  std::chrono::steady_clock::time_point clock = std::chrono::steady_clock::now();
};

inline RunManifest make_manifest(std::string command, const std::vector<std::string>& argv,
                                 std::string config_path = {}) {
  RunManifest m;
  m.command = std::move(command);
  m.argv = argv;
  m.config_path = std::move(config_path);
  return m;
}

inline std::string iso_utc(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_manifest(const RunManifest& m, const fs::path& dir) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["artifact_version"] = kArtifactVersion;
  j["command"] = m.command;
  j["argv"] = m.argv;
  j["config_path"] = m.config_path;
  j["seed"] = m.seed ? Json(*m.seed) : Json(nullptr);
  j["method"] = m.method;
  j["threads"] = m.threads;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["notes"] = m.notes;
  j["started_at"] = iso_utc(m.started);
  j["finished_at"] = iso_utc(std::chrono::system_clock::now());
  j["wall_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - m.clock).count();
  write_text((dir / "manifest.json").string(), j.dump(2) + "\n");
}

inline fs::path prepare_out_dir(const std::string& out) {
  fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ParseError("cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

struct Common {
  std::string config;
  std::string method;  // empty: config or command default
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string out = "out";
  bool quick = false;
  std::vector<std::string> argv;
};

// ---------------------------------------------------------------------------
// simulate

inline SimulationConfig quick_scale(SimulationConfig c) {
  c.n0 = std::min<Index>(c.n0, 64);
  c.n_source = std::min<Index>(c.n_source, 36);
  for (Index& n : c.source_sizes) n = std::min<Index>(n, 36);
  c.K = std::min<Index>(c.K, 4);
  if (!c.source_sizes.empty()) c.source_sizes.resize(static_cast<std::size_t>(c.K));
  c.p = std::min<Index>(c.p, 5);
  c.s = std::min(c.s, c.p);
  c.H = std::min(c.H, c.p);
  c.informative_count = std::min(c.informative_count, c.K);
  std::erase_if(c.informative, [&](Index k) { return k > c.K; });
  c.replications = std::min(c.replications, 5);
  return c;
}

inline SimulationConfig resolve_simulation_config(const Common& a) {
  SimulationConfig c;
  if (!a.config.empty()) c = simulation_config_from(ConfigDocument::load(a.config));
  if (!a.method.empty()) c.method = parse_method(a.method);
  if (a.seed) c.base_seed = *a.seed;
  if (a.threads > 0) c.threads = a.threads;
  if (a.quick) c = quick_scale(c);
  c.validate();
  return c;
}

inline int cmd_simulate(const Common& a, std::ostream& log = std::cout) {
  RunManifest m = make_manifest("simulate", a.argv, a.config);
  const SimulationConfig cfg = resolve_simulation_config(a);
  m.seed = cfg.base_seed;
  m.method = std::string(to_string(cfg.method));
  m.threads = cfg.threads;
  const fs::path dir = prepare_out_dir(a.out);
  if (!a.config.empty()) m.inputs.push_back(a.config);

  const SimulationReport rep = run_experiment(cfg);
  write_text((dir / "replications.csv").string(), replications_csv(rep));
  write_text((dir / "report.json").string(), to_json(rep).dump(2) + "\n");
  m.outputs = {(dir / "replications.csv").string(), (dir / "report.json").string()};

  int status = kOk;
  for (const auto& r : rep.replications) {
    if (!r.ok) {
      m.notes.push_back("replication " + std::to_string(r.replication) + " failed: " + r.failure);
      continue;
    }
    if (r.criterion_value > r.criterion_target_only + 1e-8 * (1.0 + std::abs(r.criterion_target_only))) {
      m.notes.push_back("replication " + std::to_string(r.replication) +
                        ": criterion at the solution exceeds the target-only criterion");
      status = kCheckFailed;
    }
  }
  if (rep.succeeded == 0) status = kRuntimeError;
  write_manifest(m, dir);

  log << "simulate: " << rep.succeeded << " of " << rep.replications.size()
      << " replications succeeded (" << to_string(cfg.scenario) << ", " << to_string(cfg.method)
      << ")\n";
  for (const auto& s : rep.methods)
    log << "  " << s.name << ": median MSE_mu " << s.mse_mu.median << ", median MSE_delta "
        << s.mse_delta.median << "\n";
  log << "  mean nu_hat " << rep.mean_nu_hat << "\n";
  return status;
}

// ---------------------------------------------------------------------------
// weights-table

inline WeightConsistencyConfig resolve_weight_config(const Common& a) {
  WeightConsistencyConfig c;
  if (!a.config.empty()) c = weight_config_from(ConfigDocument::load(a.config));
  if (!a.method.empty()) c.method = parse_method(a.method);
  if (a.seed) c.base_seed = *a.seed;
  if (a.threads > 0) c.threads = a.threads;
  if (a.quick) {
    std::vector<Index> small;
    for (Index n : c.sizes)
      if (n <= 225) small.push_back(n);
    if (small.empty() && !c.sizes.empty()) small.push_back(*std::min_element(c.sizes.begin(), c.sizes.end()));
    c.sizes = small;
    c.replications = std::min(c.replications, 10);
  }
  return c;
}

inline int cmd_weights_table(const Common& a, std::ostream& log = std::cout) {
  RunManifest m = make_manifest("weights-table", a.argv, a.config);
  const WeightConsistencyConfig cfg = resolve_weight_config(a);
  m.seed = cfg.base_seed;
  m.method = std::string(to_string(cfg.method));
  m.threads = cfg.threads;
  if (!a.config.empty()) m.inputs.push_back(a.config);
  const fs::path dir = prepare_out_dir(a.out);

  const auto rows = weight_consistency_experiment(cfg);
  const fs::path csv = dir / "weights_table.csv";
  write_text(csv.string(), weights_table_csv(rows));
  m.outputs.push_back(csv.string());
  for (const auto& r : rows)
    if (r.failed > 0)
      m.notes.push_back("n=" + std::to_string(r.n) + ": " + std::to_string(r.failed) +
                        " replications failed");
  write_manifest(m, dir);
  for (const auto& r : rows)
    log << "n=" << r.n << " nu_hat=" << r.nu_hat << " (" << r.succeeded << " replications)\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// fit

struct FitArgs {
  Common common;
  std::string target;
  std::string target_weights;
  std::vector<std::string> sources;
  std::vector<std::string> source_weights;
  bool raw_weights = false;  // keep the weights as read instead of row-normalising
  bool directed = false;     // edge lists are directed
};

inline Dataset load_dataset(const std::string& csv, const std::string& weights, bool raw,
                            bool directed, std::vector<std::string>* covariates = nullptr) {
  DatasetFile f = read_dataset_csv(csv);
  WeightMatrix w = read_weights(weights, f.X.rows(), directed ? EdgeMode::directed : EdgeMode::symmetric);
  if (!raw) {
    try {
      w = row_normalize(w);
    } catch (const Error& e) {
      throw ParseError(weights + ": " + e.what());
    }
  }
  if (covariates) *covariates = f.covariates;
  return Dataset{std::move(f.X), std::move(f.y), std::move(w)};
}

inline Json fit_report(const FitArgs& a, Method method, const std::vector<std::string>& covariates,
                       const TlmmaResult& tl) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["method"] = std::string(to_string(method));
  j["normalized_weights"] = !a.raw_weights;
  j["directed_edges"] = a.directed;
  j["n0"] = tl.candidates.target.n();
  j["covariates"] = covariates;
  Json cands = Json::array();
  for (std::size_t k = 0; k < tl.fits().size(); ++k) {
    Json c = to_json(tl.fits()[k]);
    c["index"] = k;
    c["data"] = k == 0 ? a.target : a.sources[k - 1];
    c["weights_file"] = k == 0 ? a.target_weights : a.source_weights[k - 1];
    cands.push_back(std::move(c));
  }
  j["candidates"] = std::move(cands);
  j["solution"] = to_json(tl.solution);
  j["penalty"] = to_json(tl.penalty);
  j["fitted"] = to_json(averaged_prediction(tl.candidates, tl.solution.column_weights));
  return j;
}

inline int cmd_fit(const FitArgs& a, std::ostream& log = std::cout) {
  RunManifest m = make_manifest("fit", a.common.argv);
  const Method method = parse_method(a.common.method.empty() ? "mle" : a.common.method);
  m.method = std::string(to_string(method));
  if (a.sources.size() != a.source_weights.size())
    throw ParseError("every --source needs a matching --source-weights file");
  const fs::path dir = prepare_out_dir(a.common.out);

  std::vector<std::string> covariates;
  std::vector<Dataset> data;
  data.push_back(load_dataset(a.target, a.target_weights, a.raw_weights, a.directed, &covariates));
  m.inputs = {a.target, a.target_weights};
  for (std::size_t k = 0; k < a.sources.size(); ++k) {
    data.push_back(load_dataset(a.sources[k], a.source_weights[k], a.raw_weights, a.directed));
    if (data.back().p() != data.front().p())
      throw ParseError("column mismatch: '" + a.sources[k] + "' has " +
                       std::to_string(data.back().p()) + " covariates but '" + a.target +
                       "' has " + std::to_string(data.front().p()));
    m.inputs.push_back(a.sources[k]);
    m.inputs.push_back(a.source_weights[k]);
  }
  for (std::size_t k = 0; k < data.size(); ++k) {
    try {
      data[k].validate();
    } catch (const Error& e) {
      throw ParseError((k == 0 ? a.target : a.sources[k - 1]) + ": " + e.what());
    }
  }

  std::vector<SarFit> fits;
  for (std::size_t k = 0; k < data.size(); ++k) {
    try {
      fits.push_back(fit_sar(data[k], method));
    } catch (const Error& e) {
      throw Error("fit of '" + (k == 0 ? a.target : a.sources[k - 1]) + "' failed: " + e.what());
    }
  }
  const TlmmaResult tl = run_tlmma(std::move(fits), data.front());
  const fs::path out = dir / "fit.json";
  write_text(out.string(), fit_report(a, method, covariates, tl).dump(2) + "\n");
  m.outputs.push_back(out.string());
  for (const auto& d : tl.solution.dropped)
    m.notes.push_back("candidate " + std::to_string(d.index) + " dropped: " + d.reason);
  write_manifest(m, dir);

  log << "fit (" << to_string(method) << "): weights";
  for (Index k = 0; k < tl.solution.weights.size(); ++k) log << ' ' << tl.solution.weights(k);
  log << "\n  criterion " << tl.solution.criterion_value << ", dropped " << tl.solution.dropped.size()
      << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  Common common;
  std::string fit;
  std::string x_new;
  std::string weights;
};

struct LoadedFit {
  std::vector<SarFit> fits;
  AveragingSolution solution;
  bool normalized = true;
  bool directed = false;
  Index n0 = 0;
};

inline LoadedFit load_fit(const std::string& path) {
  auto in = io::open_input(path);
  Json j;
  try {
    j = Json::parse(in);
    if (j.at("schema_version").get<int>() != kSchemaVersion)
      throw ParseError(path + ": unsupported schema_version");
    LoadedFit f;
    for (const auto& c : j.at("candidates")) f.fits.push_back(fit_from_json(c));
    f.solution.weights = vector_from_json(j.at("solution").at("weights"));
    f.normalized = j.value("normalized_weights", true);
    f.directed = j.value("directed_edges", false);
    f.n0 = j.at("n0").get<Index>();
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": malformed fit file: " + e.what());
  }
}

inline Vector predict_from_files(const PredictArgs& a) {
  const LoadedFit f = load_fit(a.fit);
  const NumericTable x = read_covariate_csv(a.x_new);
  WeightMatrix w0 = read_weights(a.weights, f.n0, f.directed ? EdgeMode::directed : EdgeMode::symmetric);
  if (f.normalized) w0 = row_normalize(w0);
  return tlmma_predict(f.solution, f.fits, x.values, w0);
}

inline int cmd_predict(const PredictArgs& a, std::ostream& log = std::cout) {
  RunManifest m = make_manifest("predict", a.common.argv);
  m.inputs = {a.fit, a.x_new, a.weights};
  const fs::path dir = prepare_out_dir(a.common.out);
  const Vector mu = predict_from_files(a);
  std::string csv = "mu_hat\n";
  for (Index i = 0; i < mu.size(); ++i) csv += io::fmt(mu(i)) + "\n";
  const fs::path out = dir / "predictions.csv";
  write_text(out.string(), csv);
  m.outputs.push_back(out.string());
  write_manifest(m, dir);
  log << "predict: wrote " << mu.size() << " predictions to " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// verify

struct VerifyArgs {
  Common common;
  std::vector<std::string> suites;
  double perturb_trace = 0.0;
  bool write_outputs = false;
};

inline int cmd_verify(const VerifyArgs& a, std::ostream& log = std::cout) {
  verify::Options opt;
  opt.quick = a.common.quick;
  if (a.common.seed) opt.seed = *a.common.seed;
  opt.trace_perturbation = a.perturb_trace;
  const auto& names = a.suites.empty() ? verify::suite_names() : a.suites;
  std::vector<verify::Check> all;
  for (const auto& s : names) {
    auto checks = verify::run_suite(s, opt);
    verify::print_table(log, checks);
    all.insert(all.end(), checks.begin(), checks.end());
  }
  const auto failed = std::count_if(all.begin(), all.end(), [](const auto& c) { return !c.passed; });
  log << (failed == 0 ? "verify: all " : "verify: ") << (failed == 0 ? all.size() : failed)
      << (failed == 0 ? " checks passed\n" : " of " + std::to_string(all.size()) + " checks failed\n");

  if (a.write_outputs) {
    RunManifest m = make_manifest("verify", a.common.argv);
    m.seed = opt.seed;
    const fs::path dir = prepare_out_dir(a.common.out);
    Json j;
    j["schema_version"] = kSchemaVersion;
    j["seed"] = opt.seed;
    j["quick"] = opt.quick;
    Json arr = Json::array();
    for (const auto& c : all)
      arr.push_back({{"suite", c.suite}, {"name", c.name}, {"passed", c.passed}, {"value", c.value},
                     {"oracle", c.reference}, {"error", c.error}, {"tolerance", c.tolerance},
                     {"detail", c.detail}});
    j["checks"] = std::move(arr);
    const fs::path out = dir / "verify.json";
    write_text(out.string(), j.dump(2) + "\n");
    m.outputs.push_back(out.string());
    write_manifest(m, dir);
  }
  return failed == 0 ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------------------

inline void add_common(CLI::App* sub, Common& c, bool with_config) {
  if (with_config) sub->add_option("--config", c.config, "key = value configuration file");
  sub->add_option("--method", c.method, "estimation method")
      ->check(CLI::IsMember({"mle", "2sls"}));
  sub->add_option("--seed", c.seed, "base seed (unsigned 64-bit)");
  sub->add_option("--threads", c.threads, "worker threads (0: all cores)")
      ->check(CLI::NonNegativeNumber);
  sub->add_option("--out", c.out, "output directory");
  sub->add_flag("--quick", c.quick, "reduced sizes and replications");
}

inline int main(int argc, char** argv, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Mallows model averaging transfer for spatial autoregressive models", "tlmma"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kArtifactVersion);

  Common common;
  common.argv.assign(argv, argv + argc);

  auto* sim = app.add_subcommand("simulate", "Monte Carlo study of the transfer estimator");
  Common sim_c = common;
  add_common(sim, sim_c, true);

  auto* wt = app.add_subcommand("weights-table", "weight-consistency table (n, nu_hat, w0..)");
  Common wt_c = common;
  add_common(wt, wt_c, true);

  auto* fit = app.add_subcommand("fit", "fit target and sources and choose averaging weights");
  FitArgs fit_a;
  fit_a.common = common;
  add_common(fit, fit_a.common, false);
  fit->add_option("--target", fit_a.target, "target dataset CSV")->required();
  fit->add_option("--target-weights", fit_a.target_weights, "target weight file")->required();
  fit->add_option("--source", fit_a.sources, "source dataset CSV (repeatable)");
  fit->add_option("--source-weights", fit_a.source_weights, "source weight file (repeatable, same order)");
  fit->add_flag("--raw-weights", fit_a.raw_weights, "do not row-normalise weight matrices");
  fit->add_flag("--directed", fit_a.directed, "edge lists are directed");

  auto* pred = app.add_subcommand("predict", "out-of-sample prediction on the target region");
  PredictArgs pred_a;
  pred_a.common = common;
  add_common(pred, pred_a.common, false);
  pred->add_option("--fit", pred_a.fit, "fit.json written by `fit`")->required();
  pred->add_option("--x-new", pred_a.x_new, "covariate CSV for the target region")->required();
  pred->add_option("--weights", pred_a.weights, "target weight file")->required();

  auto* ver = app.add_subcommand("verify", "run the built-in verification suites");
  VerifyArgs ver_a;
  ver_a.common = common;
  add_common(ver, ver_a.common, false);
  ver->add_option("--suite", ver_a.suites, "suite to run (repeatable)")
      ->check(CLI::IsMember(verify::suite_names()));
  ver->add_option("--perturb-trace", ver_a.perturb_trace,
                  "relative perturbation of analytic traces (fault injection)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, log, err);
  }

  try {
    if (*sim) return cmd_simulate(sim_c, log);
    if (*wt) return cmd_weights_table(wt_c, log);
    if (*fit) return cmd_fit(fit_a, log);
    if (*pred) return cmd_predict(pred_a, log);
    if (*ver) {
      ver_a.write_outputs = ver->count("--out") > 0;
      return cmd_verify(ver_a, log);
    }
  } catch (const ParseError& e) {
    err << "tlmma: error: " << e.what() << "\n";
    return kInputError;
  } catch (const InvalidArgument& e) {
    err << "tlmma: error: " << e.what() << "\n";
    return kInputError;
  } catch (const std::exception& e) {
    err << "tlmma: error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kInputError;
}

}  // namespace tlmma::cli
