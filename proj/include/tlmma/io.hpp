#pragma once

// File formats: dataset CSV, weight matrices (edge list or dense CSV),
// key = value configuration files, and JSON encodings of results.

#include "tlmma/averaging.hpp"
#include "tlmma/simulation.hpp"
#include "tlmma/spatial.hpp"
#include "tlmma/types.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace tlmma {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kArtifactVersion = "1.0.0";

class ParseError : public Error {
 public:
  using Error::Error;
};

namespace io {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? s.size() - start : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  const std::string t = trim(s);
  double v = 0.0;
  const char* first = t.data();
  const char* last = t.data() + t.size();
  if (!t.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || t.empty()) return std::nullopt;
  return v;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return in;
}

// Formats a double so that reading it back gives the same value.
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace io

/// Parsed CSV table: header names plus a dense numeric body.
struct NumericTable {
  std::vector<std::string> header;
  Matrix values;
};

inline NumericTable read_numeric_csv(const std::string& path) {
  auto in = io::open_input(path);
  std::string line;
  std::size_t line_no = 0;
  NumericTable t;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string tl = io::trim(line);
    if (tl.empty() || tl.front() == '#') continue;
    auto fields = io::split(tl, ',');
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size())
      throw ParseError(path + ": row " + std::to_string(line_no) + " has " +
                       std::to_string(fields.size()) + " fields, header has " +
                       std::to_string(t.header.size()));
    std::vector<double> row;
    for (std::size_t j = 0; j < fields.size(); ++j) {
      auto v = io::parse_double(fields[j]);
      if (!v || !std::isfinite(*v))
        throw ParseError(path + ": row " + std::to_string(line_no) + ", column '" + t.header[j] +
                         "': '" + fields[j] + "' is not a finite number");
      row.push_back(*v);
    }
    rows.push_back(std::move(row));
  }
  if (t.header.empty()) throw ParseError(path + ": empty file (missing header)");
  t.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(t.header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      t.values(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  return t;
}

struct DatasetFile {
  Matrix X;
  Vector y;
  std::vector<std::string> covariates;
};

/// Header row, first column `y`, remaining columns covariates; row i is
/// spatial unit i of the matching weight matrix.
inline DatasetFile read_dataset_csv(const std::string& path) {
  NumericTable t = read_numeric_csv(path);
  if (t.header.size() < 2 || t.header.front() != "y")
    throw ParseError(path + ": header must start with column 'y' followed by covariates");
  DatasetFile d;
  d.y = t.values.col(0);
  d.X = t.values.rightCols(t.values.cols() - 1);
  d.covariates.assign(t.header.begin() + 1, t.header.end());
  return d;
}

/// Covariate-only CSV (an optional leading `y` column is ignored).
inline NumericTable read_covariate_csv(const std::string& path) {
  NumericTable t = read_numeric_csv(path);
  if (!t.header.empty() && t.header.front() == "y") {
    t.header.erase(t.header.begin());
    t.values = Matrix(t.values.rightCols(t.values.cols() - 1));
  }
  return t;
}

/// Edge list `i j [w]` (1-based, `#` comments) or a dense CSV matrix; the
/// format is detected from the first data line (a comma means CSV).
inline WeightMatrix read_weights(const std::string& path, Index n,
                                 EdgeMode mode = EdgeMode::symmetric) {
  auto in = io::open_input(path);
  std::vector<std::pair<std::size_t, std::string>> lines;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    std::string tl = io::trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (!tl.empty()) lines.emplace_back(line_no, std::move(tl));
  }
  const bool dense = !lines.empty() && lines.front().second.find(',') != std::string::npos;
  try {
    if (dense) {
      if (static_cast<Index>(lines.size()) != n)
        throw ParseError(path + ": matrix has " + std::to_string(lines.size()) +
                         " rows, expected " + std::to_string(n));
      Matrix w(n, n);
      for (Index i = 0; i < n; ++i) {
        const auto& [ln, text] = lines[static_cast<std::size_t>(i)];
        auto fields = io::split(text, ',');
        if (static_cast<Index>(fields.size()) != n)
          throw ParseError(path + ":" + std::to_string(ln) + ": expected " + std::to_string(n) +
                           " values");
        for (Index j = 0; j < n; ++j) {
          auto v = io::parse_double(fields[static_cast<std::size_t>(j)]);
          if (!v) throw ParseError(path + ":" + std::to_string(ln) + ": invalid number");
          w(i, j) = *v;
        }
      }
      return WeightMatrix::from_dense(std::move(w));
    }
    std::vector<Edge> edges;
    for (const auto& [ln, text] : lines) {
      auto tok = io::split_ws(text);
      if (tok.size() != 2 && tok.size() != 3)
        throw ParseError(path + ":" + std::to_string(ln) + ": expected 'i j [w]'");
      auto i = io::parse_double(tok[0]);
      auto j = io::parse_double(tok[1]);
      if (!i || !j || *i != std::floor(*i) || *j != std::floor(*j))
        throw ParseError(path + ":" + std::to_string(ln) + ": indices must be integers");
      if (*i < 1 || *i > static_cast<double>(n) || *j < 1 || *j > static_cast<double>(n))
        throw ParseError(path + ":" + std::to_string(ln) + ": index out of range 1.." +
                         std::to_string(n));
      if (*i == *j)
        throw ParseError(path + ":" + std::to_string(ln) + ": self-loop on unit " + tok[0]);
      double wv = 1.0;
      if (tok.size() == 3) {
        auto v = io::parse_double(tok[2]);
        if (!v) throw ParseError(path + ":" + std::to_string(ln) + ": invalid weight");
        wv = *v;
      }
      edges.push_back({static_cast<Index>(*i), static_cast<Index>(*j), wv});
    }
    return weights_from_edge_list(n, edges, mode);
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// key = value configuration documents

struct ConfigValue {
  std::string text;
  std::size_t line = 0;
};

class ConfigDocument {
 public:
  static ConfigDocument parse(std::istream& in, std::string source) {
    ConfigDocument doc;
    doc.source_ = std::move(source);
    std::string line;
    std::size_t ln = 0;
    while (std::getline(in, line)) {
      ++ln;
      const auto hash = line.find('#');
      const std::string tl = io::trim(hash == std::string::npos ? line : line.substr(0, hash));
      if (tl.empty()) continue;
      const auto eq = tl.find('=');
      if (eq == std::string::npos) doc.fail(ln, "expected 'key = value'");
      std::string key = io::trim(tl.substr(0, eq));
      std::string val = io::trim(tl.substr(eq + 1));
      if (key.empty()) doc.fail(ln, "missing key");
      if (doc.values_.count(key)) doc.fail(ln, "duplicate key '" + key + "'");
      doc.values_[key] = {val, ln};
    }
    return doc;
  }

  static ConfigDocument load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open config file '" + path + "'");
    return parse(in, path);
  }

  /// Rejects keys outside `known`.
  void restrict_to(const std::vector<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (std::find(known.begin(), known.end(), k) == known.end())
        fail(v.line, "unknown key '" + k + "'");
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, std::string def) const {
    auto it = values_.find(key);
    return it == values_.end() ? def : it->second.text;
  }

  double get_double(const std::string& key, double def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    auto v = io::parse_double(it->second.text);
    if (!v) fail(it->second.line, "'" + key + "' must be a number");
    return *v;
  }

  long long get_int(const std::string& key, long long def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    long long v = 0;
    const auto& t = it->second.text;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size())
      fail(it->second.line, "'" + key + "' must be an integer");
    return v;
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    std::uint64_t v = 0;
    const auto& t = it->second.text;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size())
      fail(it->second.line, "'" + key + "' must be an unsigned integer");
    return v;
  }

  std::vector<Index> get_index_list(const std::string& key, std::vector<Index> def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    std::vector<Index> out;
    for (const auto& f : io::split(it->second.text, ',')) {
      if (f.empty()) continue;
      Index v = 0;
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || ptr != f.data() + f.size())
        fail(it->second.line, "'" + key + "' must be a comma-separated list of integers");
      out.push_back(v);
    }
    return out;
  }

  /// Runs `fn` and re-anchors any library error on the line of `key`.
  template <typename Fn>
  auto anchored(const std::string& key, Fn&& fn) const {
    try {
      return fn();
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      auto it = values_.find(key);
      fail(it == values_.end() ? 0 : it->second.line, e.what());
    }
  }

  std::size_t line_of(const std::string& key) const {
    auto it = values_.find(key);
    return it == values_.end() ? 0 : it->second.line;
  }

  /// Fails on the line of `key` (or the file as a whole when absent).
  void require(bool cond, const std::string& key, const std::string& msg) const {
    if (!cond) fail(line_of(key), msg);
  }

  [[noreturn]] void fail(std::size_t line, const std::string& msg) const {
    throw ParseError(source_ + ":" + std::to_string(line) + ": " + msg);
  }

 private:
  std::string source_;
  std::map<std::string, ConfigValue> values_;
};

inline SimulationConfig simulation_config_from(const ConfigDocument& doc) {
  doc.restrict_to({"scenario", "n0", "K", "n_source", "source_sizes", "p", "s", "H", "rho0",
                   "informative_count", "informative", "method", "replications", "base_seed",
                   "seed", "shift_informative", "shift_noninformative", "threads"});
  SimulationConfig c;
  c.scenario = doc.anchored("scenario", [&] { return parse_scenario(doc.get_string("scenario", "all_correct")); });
  c.method = doc.anchored("method", [&] { return parse_method(doc.get_string("method", "2sls")); });
  c.n0 = doc.get_int("n0", c.n0);
  c.K = doc.get_int("K", c.K);
  c.n_source = doc.get_int("n_source", c.n_source);
  c.source_sizes = doc.get_index_list("source_sizes", {});
  c.p = doc.get_int("p", c.p);
  c.s = doc.get_int("s", c.s);
  c.H = doc.get_int("H", c.H);
  c.rho0 = doc.get_double("rho0", c.rho0);
  c.informative_count = doc.get_int("informative_count", c.informative_count);
  c.informative = doc.get_index_list("informative", {});
  c.replications = static_cast<int>(doc.get_int("replications", c.replications));
  c.base_seed = doc.get_u64("base_seed", doc.get_u64("seed", c.base_seed));
  c.shift_informative = doc.get_double("shift_informative", c.shift_informative);
  c.shift_noninformative = doc.get_double("shift_noninformative", c.shift_noninformative);
  c.threads = static_cast<int>(doc.get_int("threads", c.threads));
  doc.require(c.K >= 0, "K", "K must be non-negative");
  doc.require(c.p >= 1, "p", "p must be at least 1");
  doc.require(c.s >= 0 && c.s <= c.p, "s", "s must lie in 0..p");
  doc.require(c.H >= 0 && c.H <= c.p, "H", "H must lie in 0..p");
  doc.require(c.replications >= 1, "replications", "replications must be >= 1");
  doc.anchored("n0", [&] { return grid_side(c.n0); });
  doc.require(c.n0 > c.p, "n0", "n0 must exceed p");
  doc.anchored("n_source", [&] { return grid_side(c.n_source); });
  doc.require(c.source_sizes.empty() || static_cast<Index>(c.source_sizes.size()) == c.K,
              "source_sizes", "source_sizes must list K sizes");
  doc.anchored("source_sizes", [&] {
    for (Index n : c.source_sizes) grid_side(n);
    return 0;
  });
  doc.require(!c.informative.empty() || (c.informative_count >= 0 && c.informative_count <= c.K),
              "informative_count", "informative_count must lie in 0..K");
  for (Index k : c.informative)
    doc.require(k >= 1 && k <= c.K, "informative", "informative index " + std::to_string(k) + " outside 1..K");
  try {
    c.validate();
  } catch (const Error& e) {
    doc.fail(0, e.what());
  }
  return c;
}

inline WeightConsistencyConfig weight_config_from(const ConfigDocument& doc) {
  doc.restrict_to({"sizes", "method", "replications", "base_seed", "seed", "p", "s", "rho0", "K",
                   "informative_sources", "offset", "threads"});
  WeightConsistencyConfig c;
  c.sizes = doc.get_index_list("sizes", c.sizes);
  c.method = doc.anchored("method", [&] { return parse_method(doc.get_string("method", "mle")); });
  c.replications = static_cast<int>(doc.get_int("replications", c.replications));
  c.base_seed = doc.get_u64("base_seed", doc.get_u64("seed", c.base_seed));
  c.p = doc.get_int("p", c.p);
  c.s = doc.get_int("s", c.s);
  c.rho0 = doc.get_double("rho0", c.rho0);
  c.K = doc.get_int("K", c.K);
  c.informative_sources = doc.get_int("informative_sources", c.informative_sources);
  c.offset = doc.get_double("offset", c.offset);
  c.threads = static_cast<int>(doc.get_int("threads", c.threads));
  doc.anchored("sizes", [&] {
    for (Index n : c.sizes) grid_side(n);
    return 0;
  });
  doc.require(c.replications >= 1, "replications", "replications must be >= 1");
  doc.require(c.K >= 1, "K", "K must be at least 1");
  doc.require(c.p >= 1 && c.s >= 0 && c.s <= c.p, "s", "need p >= 1 and 0 <= s <= p");
  doc.require(c.informative_sources >= 0 && c.informative_sources <= c.K, "informative_sources",
              "informative_sources must lie in 0..K");
  return c;
}

// ---------------------------------------------------------------------------
// JSON

using Json = nlohmann::ordered_json;

inline Json to_json(const Vector& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Vector vector_from_json(const Json& a) {
  Vector v(static_cast<Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Index>(i)) = a[i].get<double>();
  return v;
}

inline Json to_json(const SarFit& f) {
  Json j;
  j["method"] = std::string(to_string(f.method));
  j["beta"] = to_json(f.beta);
  j["rho"] = f.rho;
  j["sigma2"] = f.sigma2;
  j["inadmissible_rho"] = f.inadmissible_rho;
  j["interpolating"] = f.interpolating;
  j["at_boundary"] = f.at_boundary;
  j["warnings"] = f.warnings;
  return j;
}

inline SarFit fit_from_json(const Json& j) {
  SarFit f;
  f.method = parse_method(j.at("method").get<std::string>());
  f.beta = vector_from_json(j.at("beta"));
  f.rho = j.at("rho").get<double>();
  f.sigma2 = j.at("sigma2").get<double>();
  f.inadmissible_rho = j.value("inadmissible_rho", false);
  f.interpolating = j.value("interpolating", false);
  f.at_boundary = j.value("at_boundary", false);
  if (j.contains("warnings")) f.warnings = j.at("warnings").get<std::vector<std::string>>();
  return f;
}

inline Json to_json(const std::vector<DroppedCandidate>& dropped) {
  Json a = Json::array();
  for (const auto& d : dropped) a.push_back({{"index", d.index}, {"reason", d.reason}});
  return a;
}

inline Json to_json(const AveragingSolution& s, const std::optional<double>& nu = std::nullopt) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["weights"] = to_json(s.weights);
  j["criterion_value"] = s.criterion_value;
  j["kkt_residual"] = s.kkt_residual;
  j["dropped"] = to_json(s.dropped);
  if (nu) j["nu_hat"] = *nu;
  return j;
}

inline Json to_json(const PenaltyReport& p) {
  return Json{{"method", std::string(to_string(p.method))},
              {"trace_J", p.trace_J},
              {"trace_JOmega", p.trace_JOmega}};
}

inline Json to_json(const SummaryStats& s) {
  return Json{{"mean", s.mean}, {"median", s.median}, {"q25", s.q25},
              {"q75", s.q75},   {"min", s.min},       {"max", s.max}, {"count", s.count}};
}

inline Json to_json(const SimulationConfig& c) {
  Json j;
  j["scenario"] = std::string(to_string(c.scenario));
  j["method"] = std::string(to_string(c.method));
  j["n0"] = c.n0;
  j["K"] = c.K;
  j["n_source"] = c.n_source;
  j["source_sizes"] = c.source_sizes;
  j["p"] = c.p;
  j["s"] = c.s;
  j["H"] = c.H;
  j["rho0"] = c.rho0;
  j["informative"] = c.informative_set();
  j["replications"] = c.replications;
  j["base_seed"] = c.base_seed;
  j["shift_informative"] = c.shift_informative;
  j["shift_noninformative"] = c.shift_noninformative;
  return j;
}

inline Json to_json(const SimulationReport& r) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["config"] = to_json(r.config);
  j["succeeded"] = r.succeeded;
  j["failed"] = r.failed;
  Json methods = Json::array();
  for (const auto& m : r.methods)
    methods.push_back({{"name", m.name}, {"mse_delta", to_json(m.mse_delta)}, {"mse_mu", to_json(m.mse_mu)}});
  j["methods"] = methods;
  j["mean_weights"] = to_json(r.mean_weights);
  j["mean_nu_hat"] = r.mean_nu_hat;
  Json failures = Json::array();
  for (const auto& rep : r.replications)
    if (!rep.ok) failures.push_back({{"replication", rep.replication}, {"reason", rep.failure}});
  j["failures"] = failures;
  return j;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write '" + path + "'");
  out << text;
  if (!out) throw ParseError("failed writing '" + path + "'");
}

/// One row per replication; per-method metrics are columns.
inline std::string replications_csv(const SimulationReport& r) {
  std::ostringstream out;
  out << "replication,seed,status";
  for (const char* m : {"tlmma", "target_only", "uniform"})
    out << ',' << m << "_mse_delta," << m << "_mse_mu";
  out << ",nu_hat,criterion,criterion_target_only,kkt_residual";
  for (Index k = 0; k <= r.config.K; ++k) out << ",w" << k;
  out << '\n';
  for (const auto& rep : r.replications) {
    out << rep.replication << ',' << rep.seed << ',' << (rep.ok ? "ok" : "failed");
    for (const char* m : {"tlmma", "target_only", "uniform"}) {
      if (rep.ok)
        out << ',' << io::fmt(rep.metrics(m).mse_delta) << ',' << io::fmt(rep.metrics(m).mse_mu);
      else
        out << ",,";
    }
    if (rep.ok) {
      out << ',' << io::fmt(rep.nu_hat) << ',' << io::fmt(rep.criterion_value) << ','
          << io::fmt(rep.criterion_target_only) << ',' << io::fmt(rep.kkt_residual);
      for (Index k = 0; k < rep.weights.size(); ++k) out << ',' << io::fmt(rep.weights(k));
    } else {
      out << ",,,,";
      for (Index k = 0; k <= r.config.K; ++k) out << ',';
    }
    out << '\n';
  }
  return out.str();
}

inline std::string weights_table_csv(const std::vector<WeightTableRow>& rows) {
  std::ostringstream out;
  out << "n,nu_hat";
  const Index k = rows.empty() ? 7 : rows.front().weights.size();
  for (Index i = 0; i < k; ++i) out << ",w" << i;
  out << '\n';
  for (const auto& r : rows) {
    out << r.n << ',' << io::fmt(r.nu_hat);
    for (Index i = 0; i < r.weights.size(); ++i) out << ',' << io::fmt(r.weights(i));
    out << '\n';
  }
  return out.str();
}

}  // namespace tlmma
