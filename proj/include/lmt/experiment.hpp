#pragma once
// Experiment runner: flat key=value configs, deterministic fan-out of
// training runs across worker threads, and CSV results tables.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "lmt/checkpoint.hpp"
#include "lmt/cohort.hpp"
#include "lmt/metrics.hpp"
#include "lmt/training.hpp"

namespace lmt {

// Failure families; the CLI maps each to its own process exit code.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitIo = 4;

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return kExitUsage;
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const std::invalid_argument*>(&e)) return kExitUsage;
  // remaining runtime errors come from the math layers (solver limits,
  // non-finite losses); file problems are wrapped in IoError at the call site
  return kExitNumeric;
}

// ---------------------------------------------------------------------------
// flat key=value configuration

using KvMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace detail

inline std::pair<std::string, std::string> parse_kv(const std::string& arg) {
  const std::size_t eq = arg.find('=');
  if (eq == std::string::npos)
    throw UsageError("config: expected key=value, got '" + arg + "'");
  std::string key = detail::trim(arg.substr(0, eq));
  std::string value = detail::trim(arg.substr(eq + 1));
  if (key.empty()) throw UsageError("config: empty key in '" + arg + "'");
  return {std::move(key), std::move(value)};
}

inline KvMap parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("config: cannot open '" + path + "'");
  KvMap kv;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    try {
      auto [k, v] = parse_kv(t);
      kv[k] = v;
    } catch (const UsageError& e) {
      throw UsageError(std::string(e.what()) + " (" + path + ":" +
                       std::to_string(lineno) + ")");
    }
  }
  return kv;
}

inline void merge_kv(KvMap& base, const KvMap& add) {
  for (const auto& [k, v] : add) base[k] = v;
}

inline void write_config(const std::string& path, const KvMap& kv) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("config: cannot open '" + path + "' for write");
  for (const auto& [k, v] : kv) f << k << "=" << v << "\n";
  if (!f) throw IoError("config: write failed for '" + path + "'");
}

namespace detail {

inline const std::string& kv_get(const KvMap& kv, const std::string& key,
                                 const std::string& dflt) {
  auto it = kv.find(key);
  return it == kv.end() ? dflt : it->second;
}

inline double to_double(const KvMap& kv, const std::string& key, double dflt) {
  auto it = kv.find(key);
  if (it == kv.end()) return dflt;
  const std::string& v = it->second;
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size())
    throw UsageError("config: key '" + key + "': cannot parse '" + v +
                     "' as a number");
  return d;
}

inline long long to_ll(const KvMap& kv, const std::string& key, long long dflt) {
  auto it = kv.find(key);
  if (it == kv.end()) return dflt;
  const std::string& v = it->second;
  char* end = nullptr;
  const long long n = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size())
    throw UsageError("config: key '" + key + "': cannot parse '" + v +
                     "' as an integer");
  return n;
}

inline int to_int(const KvMap& kv, const std::string& key, int dflt) {
  return static_cast<int>(to_ll(kv, key, dflt));
}

inline std::uint64_t to_u64(const KvMap& kv, const std::string& key,
                            std::uint64_t dflt) {
  const long long n = to_ll(kv, key, static_cast<long long>(dflt));
  if (n < 0)
    throw UsageError("config: key '" + key + "': negative value");
  return static_cast<std::uint64_t>(n);
}

inline bool to_bool(const KvMap& kv, const std::string& key, bool dflt) {
  auto it = kv.find(key);
  if (it == kv.end()) return dflt;
  const std::string& v = it->second;
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw UsageError("config: key '" + key + "': expected on/off, got '" + v +
                   "'");
}

inline std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= v.size()) {
    const std::size_t comma = v.find(',', pos);
    const std::size_t end = comma == std::string::npos ? v.size() : comma;
    const std::string item = trim(v.substr(pos, end - pos));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

template <typename T, typename Parse>
inline std::vector<T> to_list(const KvMap& kv, const std::string& key,
                              std::vector<T> dflt, Parse&& parse) {
  auto it = kv.find(key);
  if (it == kv.end()) return dflt;
  std::vector<T> out;
  for (const std::string& item : split_commas(it->second)) {
    KvMap one = {{key, item}};
    out.push_back(parse(one));
  }
  return out;
}

inline std::vector<std::uint64_t> to_u64_list(const KvMap& kv,
                                              const std::string& key,
                                              std::vector<std::uint64_t> dflt) {
  return to_list<std::uint64_t>(kv, key, std::move(dflt), [&](const KvMap& one) {
    return to_u64(one, key, 0);
  });
}

inline std::vector<double> to_double_list(const KvMap& kv,
                                          const std::string& key,
                                          std::vector<double> dflt) {
  return to_list<double>(kv, key, std::move(dflt), [&](const KvMap& one) {
    return to_double(one, key, 0.0);
  });
}

inline std::vector<int> to_int_list(const KvMap& kv, const std::string& key,
                                    std::vector<int> dflt) {
  return to_list<int>(kv, key, std::move(dflt), [&](const KvMap& one) {
    return to_int(one, key, 0);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// command key registry

inline const std::set<std::string>& known_keys(const std::string& command) {
  static const std::vector<std::string> cohort_keys = {
      "n_patients",     "feature_dim",  "eyes_per_patient", "min_visits",
      "max_visits",     "gap_median_days", "gap_sigma",     "gap_min_days",
      "gap_max_days",   "noise_sd",     "regress_frac",     "flat_frac",
      "rate_median",    "rate_sigma",   "rate_gain",        "render_hidden",
      "cohort_seed",    "train_frac",   "val_frac",         "test_frac",
      "split_seed"};
  static const std::vector<std::string> fit_keys = {
      "alpha",          "profile",      "epochs",       "batch_size",
      "max_lr",         "weight_decay", "per_sample_lambda",
      "softmax_targets", "eligible_layers"};
  static const std::vector<std::string> node_keys = {
      "node_hidden", "adjoint", "discrete_steps", "rtol", "atol"};
  static const std::map<std::string, std::set<std::string>> registry = [] {
    std::map<std::string, std::set<std::string>> r;
    auto add = [](std::set<std::string>& s, const std::vector<std::string>& v) {
      s.insert(v.begin(), v.end());
    };
    {
      std::set<std::string> s = {"out"};
      add(s, cohort_keys);
      r["generate-data"] = s;
    }
    {
      std::set<std::string> s = {"out",   "data",  "seeds",     "timing",
                                 "setup", "model", "min_grade", "method"};
      add(s, cohort_keys);
      add(s, fit_keys);
      add(s, node_keys);
      r["train"] = s;
    }
    {
      std::set<std::string> s = {"out",   "data",  "seed",      "timing",
                                 "setup", "model", "min_grade", "method",
                                 "checkpoint", "batch_size"};
      add(s, cohort_keys);
      add(s, node_keys);
      s.insert("alpha");
      s.insert("profile");
      s.insert("eligible_layers");
      r["evaluate"] = s;
    }
    {
      std::set<std::string> s = {"out",     "data",       "seeds",
                                 "timing",  "checkpoint", "task",
                                 "epochs",  "batch_size", "max_lr",
                                 "weight_decay"};
      add(s, cohort_keys);
      r["probe"] = s;
    }
    {
      std::set<std::string> s = {"out",    "data",   "seeds", "timing",
                                 "alphas", "method", "profile"};
      add(s, cohort_keys);
      add(s, fit_keys);
      s.erase("alpha");  // swept, not fixed
      r["sweep-alpha"] = s;
    }
    {
      std::set<std::string> s = {"out",    "data",      "seeds", "timing",
                                 "alphas", "min_grade", "task"};
      add(s, cohort_keys);
      add(s, fit_keys);
      add(s, node_keys);
      r["reproduce-tables"] = s;
    }
    return r;
  }();
  auto it = registry.find(command);
  if (it == registry.end())
    throw UsageError("unknown command '" + command + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// resolved experiment configuration

struct ExperimentConfig {
  std::string command;
  // data source: an existing cohort file, or generation parameters
  std::string data;
  CohortConfig cohort;
  std::uint64_t cohort_seed = 1;
  double train_frac = 0.6, val_frac = 0.2, test_frac = 0.2;
  std::uint64_t split_seed = 1;
  // model fitting
  LmtConfig lmt;
  std::string method;  // grading method name; empty selects setup training
  int min_grade = 3;   // next-visit positivity threshold
  // downstream probing
  std::string task = "moderate+";
  std::string checkpoint;
  ProbeConfig probe;
  // runner
  std::vector<std::uint64_t> seeds = {1};
  std::vector<double> alphas = {0.2, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0};
  bool timing = false;
  std::string out = "lmt_out";
};

inline ExperimentConfig build_experiment_config(const std::string& command,
                                                const KvMap& kv) {
  const std::set<std::string>& allowed = known_keys(command);
  for (const auto& [k, v] : kv)
    if (!allowed.count(k))
      throw UsageError("config: unknown key '" + k + "' for command '" +
                       command + "'");
  using namespace detail;
  ExperimentConfig c;
  c.command = command;
  c.data = kv_get(kv, "data", "");
  c.out = kv_get(kv, "out", "lmt_out");

  CohortConfig& g = c.cohort;
  g.n_patients = static_cast<std::size_t>(to_ll(kv, "n_patients",
                                                static_cast<long long>(g.n_patients)));
  g.feature_dim = static_cast<std::size_t>(to_ll(kv, "feature_dim",
                                                 static_cast<long long>(g.feature_dim)));
  g.eyes_per_patient = static_cast<std::size_t>(
      to_ll(kv, "eyes_per_patient", static_cast<long long>(g.eyes_per_patient)));
  g.min_visits = to_int(kv, "min_visits", g.min_visits);
  g.max_visits = to_int(kv, "max_visits", g.max_visits);
  g.gap_median_days = to_double(kv, "gap_median_days", g.gap_median_days);
  g.gap_sigma = to_double(kv, "gap_sigma", g.gap_sigma);
  g.gap_min_days = to_double(kv, "gap_min_days", g.gap_min_days);
  g.gap_max_days = to_double(kv, "gap_max_days", g.gap_max_days);
  g.noise_sd = to_double(kv, "noise_sd", g.noise_sd);
  g.regress_frac = to_double(kv, "regress_frac", g.regress_frac);
  g.flat_frac = to_double(kv, "flat_frac", g.flat_frac);
  g.rate_median = to_double(kv, "rate_median", g.rate_median);
  g.rate_sigma = to_double(kv, "rate_sigma", g.rate_sigma);
  g.rate_gain = to_double(kv, "rate_gain", g.rate_gain);
  g.render_hidden = static_cast<std::size_t>(
      to_ll(kv, "render_hidden", static_cast<long long>(g.render_hidden)));
  c.cohort_seed = to_u64(kv, "cohort_seed", c.cohort_seed);
  c.train_frac = to_double(kv, "train_frac", c.train_frac);
  c.val_frac = to_double(kv, "val_frac", c.val_frac);
  c.test_frac = to_double(kv, "test_frac", c.test_frac);
  c.split_seed = to_u64(kv, "split_seed", c.split_seed);

  LmtConfig& m = c.lmt;
  m.alpha = to_double(kv, "alpha", m.alpha);
  if (kv.count("profile")) m.profile = profile_from_string(kv.at("profile"));
  if (kv.count("setup")) m.setup = setup_from_string(kv.at("setup"));
  if (kv.count("model")) m.model = model_from_string(kv.at("model"));
  m.epochs = to_int(kv, "epochs", m.epochs);
  m.batch_size = to_int(kv, "batch_size", m.batch_size);
  m.max_lr = to_double(kv, "max_lr", m.max_lr);
  m.weight_decay = to_double(kv, "weight_decay", m.weight_decay);
  m.per_sample_lambda = to_bool(kv, "per_sample_lambda", m.per_sample_lambda);
  m.softmax_targets = to_bool(kv, "softmax_targets", m.softmax_targets);
  m.eligible_layers = to_int_list(kv, "eligible_layers", m.eligible_layers);
  m.node_hidden = static_cast<std::size_t>(
      to_ll(kv, "node_hidden", static_cast<long long>(m.node_hidden)));
  m.node.adjoint = to_bool(kv, "adjoint", m.node.adjoint);
  m.node.discrete_steps = to_int(kv, "discrete_steps", m.node.discrete_steps);
  m.node.solver.rtol = to_double(kv, "rtol", m.node.solver.rtol);
  m.node.solver.atol = to_double(kv, "atol", m.node.solver.atol);
  validate(m);

  const std::string default_method = command == "sweep-alpha" ? "lmm" : "";
  c.method = kv_get(kv, "method", default_method);
  if (!c.method.empty()) grade_method_from_string(c.method);  // validate early
  c.min_grade = to_int(kv, "min_grade", c.min_grade);
  if (c.min_grade < 1 || c.min_grade > 4)
    throw UsageError("config: min_grade must be in [1, 4]");

  c.task = kv_get(kv, "task", c.task);
  task_from_string(c.task);
  c.checkpoint = kv_get(kv, "checkpoint", "");
  if (command == "probe") {
    c.probe.epochs = to_int(kv, "epochs", c.probe.epochs);
    c.probe.batch_size = to_int(kv, "batch_size", c.probe.batch_size);
    c.probe.max_lr = to_double(kv, "max_lr", c.probe.max_lr);
    c.probe.weight_decay = to_double(kv, "weight_decay", c.probe.weight_decay);
  }

  c.seeds = to_u64_list(kv, "seeds", c.seeds);
  if (kv.count("seed")) c.seeds = {to_u64(kv, "seed", 1)};
  c.alphas = to_double_list(kv, "alphas", c.alphas);
  for (double a : c.alphas)
    if (!(a > 0.0))
      throw UsageError("config: alphas must be positive");
  c.timing = to_bool(kv, "timing", c.timing);
  return c;
}

namespace detail {

inline std::string render_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
inline std::string render_list(const std::vector<T>& v,
                               std::string (*one)(T)) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += one(v[i]);
  }
  return out;
}

}  // namespace detail

// Full echo of the effective configuration, defaults included; feeding the
// result back to the same command reproduces the run.
inline KvMap resolved_config(const ExperimentConfig& c) {
  using detail::render_double;
  KvMap kv;
  auto put_d = [&](const std::string& k, double v) { kv[k] = render_double(v); };
  auto put_i = [&](const std::string& k, long long v) {
    kv[k] = std::to_string(v);
  };
  auto put_b = [&](const std::string& k, bool v) { kv[k] = v ? "on" : "off"; };
  const std::set<std::string>& allowed = known_keys(c.command);
  put_i("n_patients", static_cast<long long>(c.cohort.n_patients));
  put_i("feature_dim", static_cast<long long>(c.cohort.feature_dim));
  put_i("eyes_per_patient", static_cast<long long>(c.cohort.eyes_per_patient));
  put_i("min_visits", c.cohort.min_visits);
  put_i("max_visits", c.cohort.max_visits);
  put_d("gap_median_days", c.cohort.gap_median_days);
  put_d("gap_sigma", c.cohort.gap_sigma);
  put_d("gap_min_days", c.cohort.gap_min_days);
  put_d("gap_max_days", c.cohort.gap_max_days);
  put_d("noise_sd", c.cohort.noise_sd);
  put_d("regress_frac", c.cohort.regress_frac);
  put_d("flat_frac", c.cohort.flat_frac);
  put_d("rate_median", c.cohort.rate_median);
  put_d("rate_sigma", c.cohort.rate_sigma);
  put_d("rate_gain", c.cohort.rate_gain);
  put_i("render_hidden", static_cast<long long>(c.cohort.render_hidden));
  put_i("cohort_seed", static_cast<long long>(c.cohort_seed));
  put_d("train_frac", c.train_frac);
  put_d("val_frac", c.val_frac);
  put_d("test_frac", c.test_frac);
  put_i("split_seed", static_cast<long long>(c.split_seed));
  kv["data"] = c.data;
  kv["out"] = c.out;
  put_d("alpha", c.lmt.alpha);
  kv["profile"] = to_string(c.lmt.profile);
  kv["setup"] = to_string(c.lmt.setup);
  kv["model"] = to_string(c.lmt.model);
  if (c.command == "probe") {
    put_i("epochs", c.probe.epochs);
    put_i("batch_size", c.probe.batch_size);
    put_d("max_lr", c.probe.max_lr);
    put_d("weight_decay", c.probe.weight_decay);
  } else {
    put_i("epochs", c.lmt.epochs);
    put_i("batch_size", c.lmt.batch_size);
    put_d("max_lr", c.lmt.max_lr);
    put_d("weight_decay", c.lmt.weight_decay);
  }
  put_b("per_sample_lambda", c.lmt.per_sample_lambda);
  put_b("softmax_targets", c.lmt.softmax_targets);
  kv["eligible_layers"] =
      detail::render_list<int>(c.lmt.eligible_layers, +[](int v) {
        return std::to_string(v);
      });
  put_i("node_hidden", static_cast<long long>(c.lmt.node_hidden));
  put_b("adjoint", c.lmt.node.adjoint);
  put_i("discrete_steps", c.lmt.node.discrete_steps);
  put_d("rtol", c.lmt.node.solver.rtol);
  put_d("atol", c.lmt.node.solver.atol);
  kv["method"] = c.method;
  put_i("min_grade", c.min_grade);
  kv["task"] = c.task;
  kv["checkpoint"] = c.checkpoint;
  kv["seeds"] = detail::render_list<std::uint64_t>(
      c.seeds, +[](std::uint64_t v) { return std::to_string(v); });
  if (c.seeds.size() == 1 && allowed.count("seed") && !allowed.count("seeds"))
    kv["seed"] = std::to_string(c.seeds[0]);
  kv["alphas"] = detail::render_list<double>(c.alphas, +[](double v) {
    return detail::render_double(v);
  });
  put_b("timing", c.timing);
  // trim to the command's own vocabulary so the echo can be fed back verbatim
  for (auto it = kv.begin(); it != kv.end();)
    it = allowed.count(it->first) ? std::next(it) : kv.erase(it);
  return kv;
}

// ---------------------------------------------------------------------------
// results table

struct ResultsRow {
  std::string method;
  std::string setup;
  std::string model;
  double alpha = 0.0;
  std::string profile;
  std::uint64_t seed = 0;
  std::string metric;
  double value = 0.0;
  double wall_s = 0.0;

  friend bool operator==(const ResultsRow&, const ResultsRow&) = default;
};

inline constexpr const char* kResultsHeader =
    "method,setup,model,alpha,profile,seed,metric,value,wall_s";

namespace detail {

inline std::string render_f6(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

inline std::string render_results_row(const ResultsRow& r) {
  using detail::render_f6;
  return r.method + "," + r.setup + "," + r.model + "," + render_f6(r.alpha) +
         "," + r.profile + "," + std::to_string(r.seed) + "," + r.metric +
         "," + render_f6(r.value) + "," + render_f6(r.wall_s);
}

inline void write_results(const std::string& path,
                          const std::vector<ResultsRow>& rows) {
  std::ofstream f(path, std::ios::binary);  // binary keeps LF endings
  if (!f) throw IoError("results: cannot open '" + path + "' for write");
  f << kResultsHeader << "\n";
  for (const ResultsRow& r : rows) f << render_results_row(r) << "\n";
  if (!f) throw IoError("results: write failed for '" + path + "'");
}

inline std::vector<ResultsRow> parse_results(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("results: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(f, line) || line != kResultsHeader)
    throw IoError("results: '" + path + "' has an unexpected header");
  std::vector<ResultsRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = line.find(',', pos);
      fields.push_back(line.substr(
          pos, comma == std::string::npos ? std::string::npos : comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (fields.size() != 9)
      throw IoError("results: malformed row in '" + path + "': " + line);
    ResultsRow r;
    r.method = fields[0];
    r.setup = fields[1];
    r.model = fields[2];
    r.alpha = std::strtod(fields[3].c_str(), nullptr);
    r.profile = fields[4];
    r.seed = std::strtoull(fields[5].c_str(), nullptr, 10);
    r.metric = fields[6];
    r.value = std::strtod(fields[7].c_str(), nullptr);
    r.wall_s = std::strtod(fields[8].c_str(), nullptr);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// run plumbing

namespace detail {

inline void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory '" + p.string() + "'");
}

inline void save_named(const std::string& path,
                       std::vector<std::pair<std::string, Tensor*>> named) {
  std::vector<NamedTensor> out;
  out.reserve(named.size());
  for (auto& [name, t] : named) out.push_back({name, t});
  try {
    save_checkpoint(path, out);
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
}

inline double seconds_since(
    const std::chrono::steady_clock::time_point& start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                       start)
      .count();
}

// With timing off every artifact must be byte-stable, so measured epoch
// times are scrubbed before the history is written.
inline void scrub_walltime(TrainResult& r, bool timing) {
  if (timing) return;
  for (EpochStats& e : r.history) e.wall_ms = 0.0;
}

inline std::size_t worker_count(std::size_t njobs) {
  if (njobs <= 1) return 1;
  std::size_t n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* env = std::getenv("LMT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*env == '\0' || end == nullptr || *end != '\0' || v < 1)
      throw UsageError("LMT_THREADS: cannot parse '" + std::string(env) +
                       "' as a positive integer");
    n = static_cast<std::size_t>(v);
  }
  return std::min(n, njobs);
}

// Runs body(0..njobs-1), one job per worker at a time. Jobs write only their
// own slot, so the merged output order never depends on scheduling.
template <typename Body>
inline void run_pool(std::size_t njobs, Body&& body) {
  const std::size_t workers = worker_count(njobs);
  if (workers <= 1) {
    for (std::size_t i = 0; i < njobs; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= njobs) return;
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

inline Cohort obtain_cohort(const ExperimentConfig& cfg) {
  if (!cfg.data.empty()) {
    try {
      return load_cohort(cfg.data);
    } catch (const std::exception& e) {
      throw IoError(e.what());
    }
  }
  try {
    return split_patients(generate_cohort(cfg.cohort, cfg.cohort_seed),
                          {cfg.train_frac, cfg.val_frac, cfg.test_frac},
                          cfg.split_seed);
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::exception& e) {
    throw NumericError(std::string("cohort generation failed: ") + e.what());
  }
}

// One trained (setup, model, seed) cell: artifacts under run_dir, one row.
inline ResultsRow run_setup_once(const Cohort& cohort,
                                 const ExperimentConfig& cfg, Setup setup,
                                 ModelKind model_kind, std::uint64_t seed,
                                 const std::filesystem::path& run_dir,
                                 bool* failed) {
  detail::ensure_dir(run_dir);
  const auto start = std::chrono::steady_clock::now();
  LmtConfig local = cfg.lmt;
  local.setup = setup;
  local.model = model_kind;
  local.seed = seed;
  TrainedTimeAware t = train_setup(setup, model_kind, cohort, local);
  detail::scrub_walltime(t.result, cfg.timing);
  try {
    write_history_csv((run_dir / "history.csv").string(), t.result.history);
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
  detail::save_named((run_dir / "model.bin").string(),
                     t.model.named_params());
  ResultsRow row;
  row.method = "-";
  row.setup = to_string(setup);
  row.model = to_string(model_kind);
  row.alpha = cfg.lmt.alpha;
  row.profile = to_string(cfg.lmt.profile);
  row.seed = seed;
  row.metric = "next_auc";
  if (t.result.failed) {
    row.value = std::numeric_limits<double>::quiet_NaN();
    if (failed) *failed = true;
  } else {
    row.value = evaluate_next_visit_auc(t.model, cohort, Split::kTest,
                                        cfg.min_grade, local);
  }
  row.wall_s = cfg.timing ? detail::seconds_since(start) : 0.0;
  return row;
}

// One trained grading cell: artifacts under run_dir, one kappa row.
inline ResultsRow run_grading_once(const Cohort& cohort,
                                   const ExperimentConfig& cfg,
                                   GradeMethod method, ProfileKind profile,
                                   double alpha, std::uint64_t seed,
                                   const std::filesystem::path& run_dir,
                                   bool* failed,
                                   Encoder* trained_encoder = nullptr) {
  detail::ensure_dir(run_dir);
  const auto start = std::chrono::steady_clock::now();
  LmtConfig local = cfg.lmt;
  local.alpha = alpha;
  local.profile = profile;
  local.seed = seed;
  TrainedGrading t = train_grading(method, cohort, local);
  detail::scrub_walltime(t.result, cfg.timing);
  try {
    write_history_csv((run_dir / "history.csv").string(), t.result.history);
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
  detail::save_named((run_dir / "model.bin").string(),
                     t.model.named_params());
  ResultsRow row;
  row.method = to_string(method);
  row.setup = "-";
  row.model = "mlp";
  row.alpha = alpha;
  row.profile = to_string(profile);
  row.seed = seed;
  row.metric = "kappa";
  if (t.result.failed) {
    row.value = std::numeric_limits<double>::quiet_NaN();
    if (failed) *failed = true;
  } else {
    row.value = evaluate_grading_kappa(t.model.enc, t.model.heads, cohort,
                                       Split::kTest);
  }
  row.wall_s = cfg.timing ? detail::seconds_since(start) : 0.0;
  if (trained_encoder) *trained_encoder = t.model.enc;
  return row;
}

// Probe + fine-tune on a frozen encoder; two rows.
inline std::vector<ResultsRow> run_probe_once(
    const Cohort& cohort, const ExperimentConfig& cfg, const Encoder& enc,
    const std::string& encoder_label, std::uint64_t seed,
    const std::filesystem::path& run_dir) {
  detail::ensure_dir(run_dir);
  const Task task = task_from_string(cfg.task);
  ProbeConfig pc = cfg.probe;
  pc.seed = seed;
  const auto start = std::chrono::steady_clock::now();
  DownstreamResult probe = linear_probe(enc, cohort, task, pc);
  const double probe_wall = cfg.timing ? detail::seconds_since(start) : 0.0;
  const auto start_ft = std::chrono::steady_clock::now();
  DownstreamResult tuned = fine_tune(enc, cohort, task, pc);
  const double tuned_wall = cfg.timing ? detail::seconds_since(start_ft) : 0.0;
  detail::scrub_walltime(probe.train, cfg.timing);
  detail::scrub_walltime(tuned.train, cfg.timing);
  try {
    write_history_csv((run_dir / "history.csv").string(),
                      probe.train.history);
    write_history_csv((run_dir / "finetune_history.csv").string(),
                      tuned.train.history);
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
  Encoder copy = enc;
  detail::save_named((run_dir / "model.bin").string(), copy.named_params());
  ResultsRow base;
  base.method = encoder_label;
  base.setup = "-";
  base.model = "mlp";
  base.alpha = cfg.lmt.alpha;
  base.profile = cfg.task;  // the probed task, not an interpolation profile
  base.seed = seed;
  ResultsRow p = base, f = base;
  p.metric = "probe_auc";
  p.value = probe.auc;
  p.wall_s = probe_wall;
  f.metric = "finetune_auc";
  f.value = tuned.auc;
  f.wall_s = tuned_wall;
  return {p, f};
}

// ---------------------------------------------------------------------------
// commands

struct CommandResult {
  std::vector<ResultsRow> rows;
  bool any_failed = false;
  std::string results_path;
};

namespace detail {

inline void finish_command(const ExperimentConfig& cfg, CommandResult& r) {
  const std::filesystem::path out(cfg.out);
  ensure_dir(out);
  write_config((out / "resolved.cfg").string(), resolved_config(cfg));
  r.results_path = (out / "results.csv").string();
  write_results(r.results_path, r.rows);
}

}  // namespace detail

inline CommandResult cmd_generate(const ExperimentConfig& cfg) {
  const std::filesystem::path out(cfg.out);
  detail::ensure_dir(out);
  Cohort cohort = obtain_cohort(cfg);
  try {
    save_cohort((out / "cohort.bin").string(), cohort);
    export_cohort_csv((out / "cohort.csv").string(), cohort);
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
  CommandResult r;
  detail::finish_command(cfg, r);
  return r;
}

inline CommandResult cmd_train(const ExperimentConfig& cfg) {
  const Cohort cohort = obtain_cohort(cfg);
  const std::filesystem::path out(cfg.out);
  const std::size_t n = cfg.seeds.size();
  std::vector<std::vector<ResultsRow>> slots(n);
  std::vector<char> failed(n, 0);
  detail::run_pool(n, [&](std::size_t i) {
    const std::uint64_t seed = cfg.seeds[i];
    const std::filesystem::path dir =
        out / "runs" / ("seed_" + std::to_string(seed));
    bool bad = false;
    if (cfg.method.empty()) {
      slots[i] = {run_setup_once(cohort, cfg, cfg.lmt.setup, cfg.lmt.model,
                                 seed, dir, &bad)};
    } else {
      slots[i] = {run_grading_once(cohort, cfg,
                                   grade_method_from_string(cfg.method),
                                   cfg.lmt.profile, cfg.lmt.alpha, seed, dir,
                                   &bad)};
    }
    failed[i] = bad ? 1 : 0;
  });
  CommandResult r;
  for (std::size_t i = 0; i < n; ++i) {
    r.rows.insert(r.rows.end(), slots[i].begin(), slots[i].end());
    r.any_failed = r.any_failed || failed[i];
  }
  detail::finish_command(cfg, r);
  return r;
}

inline CommandResult cmd_evaluate(const ExperimentConfig& cfg) {
  if (cfg.checkpoint.empty())
    throw UsageError("evaluate: 'checkpoint' is required");
  std::vector<std::pair<std::string, Tensor>> ckpt;
  try {
    ckpt = load_checkpoint(cfg.checkpoint);
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
  const Cohort cohort = obtain_cohort(cfg);
  const std::uint64_t seed = cfg.seeds.empty() ? 1 : cfg.seeds[0];
  const std::filesystem::path out(cfg.out);
  detail::ensure_dir(out);
  const auto start = std::chrono::steady_clock::now();
  ResultsRow row;
  row.alpha = cfg.lmt.alpha;
  row.profile = to_string(cfg.lmt.profile);
  row.seed = seed;
  if (cfg.method.empty()) {
    Rng rng(seed);
    TimeAwareModel model(cohort.config.feature_dim, cfg.lmt, rng);
    try {
      restore_params(ckpt, model.named_params());
    } catch (const std::exception& e) {
      throw IoError(std::string("checkpoint does not match the configured "
                                "model: ") +
                    e.what());
    }
    row.method = "-";
    row.setup = to_string(cfg.lmt.setup);
    row.model = to_string(cfg.lmt.model);
    row.metric = "next_auc";
    row.value = evaluate_next_visit_auc(model, cohort, Split::kTest,
                                        cfg.min_grade, cfg.lmt);
    detail::save_named((out / "model.bin").string(), model.named_params());
  } else {
    Rng rng(seed);
    GradingModel model;
    model.enc = Encoder(cohort.config.feature_dim, rng);
    model.heads = Heads(model.enc.latent_dim(), rng);
    try {
      restore_params(ckpt, model.named_params());
    } catch (const std::exception& e) {
      throw IoError(std::string("checkpoint does not match the configured "
                                "model: ") +
                    e.what());
    }
    row.method = cfg.method;
    row.setup = "-";
    row.model = "mlp";
    row.metric = "kappa";
    row.value = evaluate_grading_kappa(model.enc, model.heads, cohort,
                                       Split::kTest);
    detail::save_named((out / "model.bin").string(), model.named_params());
  }
  row.wall_s = cfg.timing ? detail::seconds_since(start) : 0.0;
  try {
    write_history_csv((out / "history.csv").string(), {});
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
  CommandResult r;
  r.rows = {row};
  detail::finish_command(cfg, r);
  return r;
}

inline CommandResult cmd_probe(const ExperimentConfig& cfg) {
  const Cohort cohort = obtain_cohort(cfg);
  const std::filesystem::path out(cfg.out);
  Encoder base;
  std::string label;
  if (cfg.checkpoint.empty()) {
    // no pretraining given: probe a randomly initialized frozen encoder
    Rng rng(cfg.seeds.empty() ? 1 : cfg.seeds[0]);
    base = Encoder(cohort.config.feature_dim, rng);
    label = "random";
  } else {
    std::vector<std::pair<std::string, Tensor>> ckpt;
    try {
      ckpt = load_checkpoint(cfg.checkpoint);
    } catch (const std::exception& e) {
      throw IoError(e.what());
    }
    Rng rng(1);
    base = Encoder(cohort.config.feature_dim, rng);
    try {
      restore_params(ckpt, base.named_params());
    } catch (const std::exception& e) {
      throw IoError(std::string("checkpoint does not hold a matching "
                                "encoder: ") +
                    e.what());
    }
    label = "checkpoint";
  }
  const std::size_t n = cfg.seeds.size();
  std::vector<std::vector<ResultsRow>> slots(n);
  detail::run_pool(n, [&](std::size_t i) {
    const std::uint64_t seed = cfg.seeds[i];
    slots[i] = run_probe_once(cohort, cfg, base, label, seed,
                              out / "runs" / ("seed_" + std::to_string(seed)));
  });
  CommandResult r;
  for (auto& s : slots) r.rows.insert(r.rows.end(), s.begin(), s.end());
  detail::finish_command(cfg, r);
  return r;
}

inline CommandResult cmd_sweep_alpha(const ExperimentConfig& cfg) {
  const Cohort cohort = obtain_cohort(cfg);
  const std::filesystem::path out(cfg.out);
  const GradeMethod method = grade_method_from_string(cfg.method);
  struct Job {
    double alpha;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (double a : cfg.alphas)
    for (std::uint64_t s : cfg.seeds) jobs.push_back({a, s});
  std::vector<ResultsRow> slots(jobs.size());
  std::vector<char> failed(jobs.size(), 0);
  detail::run_pool(jobs.size(), [&](std::size_t i) {
    char name[64];
    std::snprintf(name, sizeof name, "alpha_%g_seed_%llu", jobs[i].alpha,
                  static_cast<unsigned long long>(jobs[i].seed));
    bool bad = false;
    slots[i] = run_grading_once(cohort, cfg, method, cfg.lmt.profile,
                                jobs[i].alpha, jobs[i].seed,
                                out / "runs" / name, &bad);
    failed[i] = bad ? 1 : 0;
  });
  CommandResult r;
  r.rows.assign(slots.begin(), slots.end());
  for (char f : failed) r.any_failed = r.any_failed || f;
  detail::finish_command(cfg, r);
  return r;
}

inline CommandResult cmd_reproduce_tables(const ExperimentConfig& cfg) {
  const Cohort cohort = obtain_cohort(cfg);
  const std::filesystem::path out(cfg.out);
  detail::ensure_dir(out);

  struct GradingCell {
    GradeMethod method;
    ProfileKind profile;
  };
  const std::vector<GradingCell> table1_cells = {
      {GradeMethod::kMixupRand, ProfileKind::kLinear},
      {GradeMethod::kManifoldMixupRand, ProfileKind::kLinear},
      {GradeMethod::kMixup, ProfileKind::kLinear},
      {GradeMethod::kManifoldMixup, ProfileKind::kLinear},
      {GradeMethod::kLongMixup, ProfileKind::kLinear},
      {GradeMethod::kLongManifoldMixup, ProfileKind::kLinear},
      {GradeMethod::kLongMixup, ProfileKind::kExponential},
      {GradeMethod::kLongManifoldMixup, ProfileKind::kExponential}};
  struct SetupCell {
    Setup setup;
    ModelKind model;
  };
  const std::vector<SetupCell> table3_cells = {
      {Setup::kS1, ModelKind::kNode},
      {Setup::kS2, ModelKind::kNode},
      {Setup::kS3, ModelKind::kNode},
      {Setup::kS1, ModelKind::kTlstm},
      {Setup::kS2, ModelKind::kTlstm}};

  enum class Kind { kTable1, kTable2, kTable3, kFig3 };
  struct Job {
    Kind kind;
    std::size_t cell;
    std::uint64_t seed;
    double alpha;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < table1_cells.size(); ++c)
    for (std::uint64_t s : cfg.seeds) jobs.push_back({Kind::kTable1, c, s, cfg.lmt.alpha});
  for (std::uint64_t s : cfg.seeds) jobs.push_back({Kind::kTable2, 0, s, cfg.lmt.alpha});
  for (std::size_t c = 0; c < table3_cells.size(); ++c)
    for (std::uint64_t s : cfg.seeds) jobs.push_back({Kind::kTable3, c, s, cfg.lmt.alpha});
  for (std::size_t c = 0; c < cfg.alphas.size(); ++c)
    for (std::uint64_t s : cfg.seeds)
      jobs.push_back({Kind::kFig3, c, s, cfg.alphas[c]});

  std::vector<std::vector<ResultsRow>> slots(jobs.size());
  std::vector<char> failed(jobs.size(), 0);
  detail::run_pool(jobs.size(), [&](std::size_t i) {
    const Job& j = jobs[i];
    bool bad = false;
    char name[96];
    switch (j.kind) {
      case Kind::kTable1: {
        const GradingCell& cell = table1_cells[j.cell];
        std::snprintf(name, sizeof name, "t1_%s_%s_seed_%llu",
                      to_string(cell.method), to_string(cell.profile),
                      static_cast<unsigned long long>(j.seed));
        slots[i] = {run_grading_once(cohort, cfg, cell.method, cell.profile,
                                     j.alpha, j.seed, out / "runs" / name,
                                     &bad)};
        break;
      }
      case Kind::kTable2: {
        std::snprintf(name, sizeof name, "t2_seed_%llu",
                      static_cast<unsigned long long>(j.seed));
        const std::filesystem::path dir = out / "runs" / name;
        Encoder enc;
        ResultsRow pretrain = run_grading_once(
            cohort, cfg, GradeMethod::kLongManifoldMixup,
            ProfileKind::kLinear, j.alpha, j.seed, dir, &bad, &enc);
        ExperimentConfig probe_cfg = cfg;
        probe_cfg.probe.epochs = std::max(cfg.lmt.epochs, 1);
        probe_cfg.probe.batch_size = cfg.lmt.batch_size;
        slots[i] =
            run_probe_once(cohort, probe_cfg, enc, "lmm", j.seed, dir / "probe");
        slots[i].insert(slots[i].begin(), pretrain);
        break;
      }
      case Kind::kTable3: {
        const SetupCell& cell = table3_cells[j.cell];
        std::snprintf(name, sizeof name, "t3_%s_%s_seed_%llu",
                      to_string(cell.setup), to_string(cell.model),
                      static_cast<unsigned long long>(j.seed));
        slots[i] = {run_setup_once(cohort, cfg, cell.setup, cell.model,
                                   j.seed, out / "runs" / name, &bad)};
        break;
      }
      case Kind::kFig3: {
        std::snprintf(name, sizeof name, "fig3_alpha_%g_seed_%llu", j.alpha,
                      static_cast<unsigned long long>(j.seed));
        slots[i] = {run_grading_once(cohort, cfg,
                                     GradeMethod::kLongManifoldMixup,
                                     cfg.lmt.profile, j.alpha, j.seed,
                                     out / "runs" / name, &bad)};
        break;
      }
    }
    failed[i] = bad ? 1 : 0;
  });

  std::vector<ResultsRow> t1, t2, t3, fig3;
  CommandResult r;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    r.any_failed = r.any_failed || failed[i];
    std::vector<ResultsRow>& dst =
        jobs[i].kind == Kind::kTable1
            ? t1
            : jobs[i].kind == Kind::kTable2
                  ? t2
                  : jobs[i].kind == Kind::kTable3 ? t3 : fig3;
    dst.insert(dst.end(), slots[i].begin(), slots[i].end());
    r.rows.insert(r.rows.end(), slots[i].begin(), slots[i].end());
  }
  write_results((out / "table1.csv").string(), t1);
  write_results((out / "table2.csv").string(), t2);
  write_results((out / "table3.csv").string(), t3);
  write_results((out / "fig3.csv").string(), fig3);
  detail::finish_command(cfg, r);
  return r;
}

inline CommandResult run_command(const ExperimentConfig& cfg) {
  if (cfg.command == "generate-data") return cmd_generate(cfg);
  if (cfg.command == "train") return cmd_train(cfg);
  if (cfg.command == "evaluate") return cmd_evaluate(cfg);
  if (cfg.command == "probe") return cmd_probe(cfg);
  if (cfg.command == "sweep-alpha") return cmd_sweep_alpha(cfg);
  if (cfg.command == "reproduce-tables") return cmd_reproduce_tables(cfg);
  throw UsageError("unknown command '" + cfg.command + "'");
}

}  // namespace lmt
