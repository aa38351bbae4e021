#pragma once

// Config-driven experiment orchestration: load a model and an experiment
// description from JSON, run it, and emit reproducible artifacts (JSON
// report, text summary, CSV field samples, manifest with checksums).

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "meanfield/empirical.hpp"
#include "meanfield/flow.hpp"
#include "meanfield/json_io.hpp"
#include "meanfield/mdp.hpp"
#include "meanfield/measure.hpp"
#include "meanfield/particle.hpp"

namespace meanfield {

inline constexpr const char* kToolVersion = "0.1.0";

inline const std::vector<std::string>& experiment_kinds() {
  static const std::vector<std::string> kinds = {
      "exact-flow",    "mdp-sweep",      "rate-eval", "remainder-tail",
      "bracket-drift", "equicontinuity", "covering"};
  return kinds;
}

namespace detail {

inline uint64_t fnv1a(std::string_view bytes) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string fmt17(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

/// JSON-safe number: infinities and NaN are not representable in JSON, so
/// they are emitted as tagged strings.
inline json num(double v) {
  if (std::isfinite(v)) return json(v);
  if (v > 0.0) return json("+inf");
  if (v < 0.0) return json("-inf");
  return json("nan");
}

/// Right-aligned column table; the first row is the header.
inline std::string format_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<size_t> w;
  for (const auto& r : rows) {
    if (w.size() < r.size()) w.resize(r.size(), 0);
    for (size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], r[i].size());
  }
  std::ostringstream os;
  for (const auto& r : rows) {
    for (size_t i = 0; i < r.size(); ++i)
      os << (i ? "  " : "") << std::setw(static_cast<int>(w[i])) << r[i];
    os << "\n";
  }
  return os.str();
}

}  // namespace detail

inline json mc_json(double estimate, double stderr_, int R, int N, uint64_t seed) {
  return json{{"estimate", detail::num(estimate)},
              {"stderr", detail::num(stderr_)},
              {"R", R},
              {"N", N},
              {"seed", seed}};
}

inline json laplace_json(const LaplaceEstimate& e, int N, uint64_t seed) {
  json j = mc_json(e.value, e.se, e.R, N, seed);
  j["alpha"] = e.alpha;
  j["flagged"] = e.flagged;
  j["top_share"] = e.top_share;
  return j;
}

inline json rate_json(const RateEvaluation& r) {
  return json{{"value", detail::num(r.value)}, {"method", r.method_name()},
              {"reason", r.reason_name()},     {"converged", r.converged},
              {"terms", r.terms},              {"rho", r.rho}};
}

inline std::unique_ptr<McKeanSpec> make_spec(const FeynmanKacModel& model,
                                             const std::string& name) {
  if (name == "selection-mutation") return std::make_unique<SelectionMutationMcKean>(model);
  if (name == "conditionally-iid") return std::make_unique<ConditionallyIidMcKean>(model);
  throw ConfigError("params.mckean: unknown rule \"" + name +
                    "\" (expected \"selection-mutation\" or \"conditionally-iid\")");
}

/// Fully validated experiment description. Constructed only through
/// load_experiment_config; fields irrelevant to the kind keep their defaults.
struct ExperimentConfig {
  std::string kind;
  std::shared_ptr<const FeynmanKacModel> model;
  uint64_t seed = 0;
  std::string output_dir = "out";
  int workers = 1;
  bool check = false;
  std::string mckean = "selection-mutation";

  int time = 0;
  std::vector<int> n_grid;
  double beta = 0.5;
  int replications = 1;
  std::vector<Observable> observables;  // per-time sequence, or a single entry
  std::vector<double> target;           // rate-eval direction
  std::string field = "v";
  double eps = 0.5;                // remainder-tail threshold scale
  std::vector<double> delta_grid;  // equicontinuity
  double y = 1.0;
  std::vector<double> eps_grid;  // covering radii
  double entropy_step = 0.05;
  std::shared_ptr<const FunctionClass> fclass;
  int samples_n = 0;  // grid point used for the samples file

  json effective;  // the config document the run is answerable to
};

inline json read_json_file(const std::string& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw ConfigError(what + ": cannot open \"" + path + "\"");
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw ConfigError(what + ": \"" + path + "\": " + e.what());
  }
}

namespace detail {

inline std::string resolve_path(const std::string& path, const std::string& base_dir) {
  std::filesystem::path p(path);
  if (p.is_relative() && !base_dir.empty()) p = std::filesystem::path(base_dir) / p;
  return p.string();
}

inline double require_number(const json& j, const std::string& key, const std::string& where) {
  const json& v = require_key(j, key, where);
  if (!v.is_number()) throw ConfigError(where + ": \"" + key + "\" must be a number");
  return v.get<double>();
}

inline std::vector<int> parse_n_grid(const json& params) {
  const json& g = require_key(params, "n_grid", "params");
  if (!g.is_array() || g.empty())
    throw ConfigError("params: \"n_grid\" must be a nonempty array of integers");
  std::vector<int> grid;
  for (size_t i = 0; i < g.size(); ++i) {
    if (!g[i].is_number_integer() || g[i].get<int64_t>() < 1)
      throw ConfigError("params.n_grid[" + std::to_string(i) + "]: must be a positive integer");
    int v = g[i].get<int>();
    if (!grid.empty() && v <= grid.back())
      throw ConfigError("params.n_grid: must be strictly increasing, got " + std::to_string(v) +
                        " after " + std::to_string(grid.back()));
    grid.push_back(v);
  }
  return grid;
}

inline double parse_beta(const json& params) {
  double b = require_number(params, "beta", "params");
  if (!(b > 0.0 && b < 1.0))
    throw ConfigError("params.beta: must lie strictly in (0,1), got " + fmt17(b));
  return b;
}

inline int parse_replications(const json& params) {
  int r = require_int(params, "replications", "params");
  if (r < 1) throw ConfigError("params.replications: must be at least 1, got " + std::to_string(r));
  return r;
}

inline int parse_time(const json& params, const FeynmanKacModel& model) {
  int t = require_int(params, "time", "params");
  if (t < 0 || t > model.horizon())
    throw ConfigError("params.time: " + std::to_string(t) + " outside the model horizon 0.." +
                      std::to_string(model.horizon()));
  return t;
}

inline Observable parse_observable(const json& v, const StateSpace& space,
                                   const std::string& where) {
  auto vals = require_doubles(v, where);
  if (static_cast<int>(vals.size()) != space.size)
    throw ConfigError(where + ": length " + std::to_string(vals.size()) +
                      " does not match the state space size " + std::to_string(space.size));
  try {
    return Observable(space, std::move(vals));
  } catch (const Error& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

inline std::vector<Observable> parse_observable_sequence(const json& params,
                                                         const FeynmanKacModel& model, int time) {
  const json& obs = require_key(params, "observables", "params");
  if (!obs.is_array() || static_cast<int>(obs.size()) != time + 1)
    throw ConfigError("params.observables: must list one observable per time 0.." +
                      std::to_string(time));
  std::vector<Observable> out;
  for (int t = 0; t <= time; ++t)
    out.push_back(parse_observable(obs[t], model.space(t),
                                   "params.observables[" + std::to_string(t) + "]"));
  return out;
}

inline std::shared_ptr<const FunctionClass> parse_function_class(const json& params,
                                                                 const std::string& base_dir) {
  const json& fc = require_key(params, "function_class", "params");
  json body;
  if (fc.is_string())
    body = read_json_file(resolve_path(fc.get<std::string>(), base_dir), "params.function_class");
  else if (fc.is_object())
    body = fc;
  else
    throw ConfigError("params.function_class: must be a file path or an inline object");
  return std::make_shared<FunctionClass>(function_class_from_json(body, "params.function_class"));
}

}  // namespace detail

/// Parse and validate a config document. `base_dir` anchors relative paths
/// (normally the directory containing the config file). Throws ConfigError
/// naming the offending key and value.
inline ExperimentConfig load_experiment_config(const json& doc, const std::string& base_dir = "") {
  if (!doc.is_object()) throw ConfigError("config: document must be a JSON object");
  ExperimentConfig cfg;
  cfg.effective = doc;

  const json& k = detail::require_key(doc, "kind", "config");
  if (!k.is_string()) throw ConfigError("config: \"kind\" must be a string");
  cfg.kind = k.get<std::string>();
  bool known = false;
  for (const auto& name : experiment_kinds()) known |= name == cfg.kind;
  if (!known) throw ConfigError("config: unknown \"kind\" value \"" + cfg.kind + "\"");

  auto s = doc.find("seed");
  if (s == doc.end())
    throw ConfigError("config: missing key \"seed\" (seeds are mandatory, no implicit entropy)");
  if (!s->is_number_integer() || (s->is_number_integer() && !s->is_number_unsigned() &&
                                  s->get<int64_t>() < 0))
    throw ConfigError("config: \"seed\" must be a nonnegative integer");
  cfg.seed = s->get<uint64_t>();

  const json& m = detail::require_key(doc, "model", "config");
  json model_doc;
  if (m.is_string())
    model_doc = read_json_file(detail::resolve_path(m.get<std::string>(), base_dir),
                               "config.model");
  else if (m.is_object())
    model_doc = m;
  else
    throw ConfigError("config: \"model\" must be a file path or an inline object");
  cfg.model = std::make_shared<FeynmanKacModel>(model_from_json(model_doc, "model"));

  if (auto it = doc.find("output"); it != doc.end()) {
    if (!it->is_string()) throw ConfigError("config: \"output\" must be a string");
    cfg.output_dir = it->get<std::string>();
  }
  if (auto it = doc.find("workers"); it != doc.end()) {
    if (!it->is_number_integer() || it->get<int>() < 1)
      throw ConfigError("config: \"workers\" must be a positive integer");
    cfg.workers = it->get<int>();
  }
  if (auto it = doc.find("check"); it != doc.end()) {
    if (!it->is_boolean()) throw ConfigError("config: \"check\" must be a boolean");
    cfg.check = it->get<bool>();
  }

  const json& params = detail::require_key(doc, "params", "config");
  if (!params.is_object()) throw ConfigError("config: \"params\" must be an object");
  if (auto it = params.find("mckean"); it != params.end()) {
    if (!it->is_string()) throw ConfigError("params.mckean: must be a string");
    cfg.mckean = it->get<std::string>();
    if (cfg.mckean != "selection-mutation" && cfg.mckean != "conditionally-iid")
      throw ConfigError("params.mckean: unknown rule \"" + cfg.mckean + "\"");
  }

  const FeynmanKacModel& model = *cfg.model;
  if (cfg.kind == "exact-flow") {
    cfg.time = detail::parse_time(params, model);
  } else if (cfg.kind == "mdp-sweep") {
    cfg.time = detail::parse_time(params, model);
    cfg.observables = detail::parse_observable_sequence(params, model, cfg.time);
    cfg.n_grid = detail::parse_n_grid(params);
    cfg.beta = detail::parse_beta(params);
    cfg.replications = detail::parse_replications(params);
  } else if (cfg.kind == "rate-eval") {
    cfg.time = detail::parse_time(params, model);
    if (auto it = params.find("field"); it != params.end()) {
      if (!it->is_string() || (it->get<std::string>() != "v" && it->get<std::string>() != "w"))
        throw ConfigError("params.field: must be \"v\" or \"w\"");
      cfg.field = it->get<std::string>();
    }
    cfg.target =
        detail::require_doubles(detail::require_key(params, "target", "params"), "params.target");
    if (static_cast<int>(cfg.target.size()) != model.space(cfg.time).size)
      throw ConfigError("params.target: length " + std::to_string(cfg.target.size()) +
                        " does not match the state space size " +
                        std::to_string(model.space(cfg.time).size));
  } else if (cfg.kind == "remainder-tail") {
    cfg.time = detail::parse_time(params, model);
    cfg.observables.push_back(detail::parse_observable(
        detail::require_key(params, "observable", "params"), model.space(cfg.time),
        "params.observable"));
    cfg.n_grid = detail::parse_n_grid(params);
    cfg.beta = detail::parse_beta(params);
    cfg.replications = detail::parse_replications(params);
    cfg.eps = detail::require_number(params, "eps", "params");
    if (!(cfg.eps > 0.0)) throw ConfigError("params.eps: must be positive");
  } else if (cfg.kind == "bracket-drift") {
    cfg.time = detail::parse_time(params, model);
    cfg.observables = detail::parse_observable_sequence(params, model, cfg.time);
    cfg.n_grid = detail::parse_n_grid(params);
    cfg.replications = detail::parse_replications(params);
  } else if (cfg.kind == "equicontinuity") {
    cfg.time = detail::parse_time(params, model);
    cfg.fclass = detail::parse_function_class(params, base_dir);
    if (cfg.fclass->space().size != model.space(cfg.time).size)
      throw ConfigError("params.function_class: space size " +
                        std::to_string(cfg.fclass->space().size) +
                        " does not match the model space at time " + std::to_string(cfg.time));
    const json& dg = detail::require_key(params, "delta_grid", "params");
    cfg.delta_grid = detail::require_doubles(dg, "params.delta_grid");
    if (cfg.delta_grid.empty()) throw ConfigError("params.delta_grid: must be nonempty");
    for (double d : cfg.delta_grid)
      if (d < 0.0) throw ConfigError("params.delta_grid: radii must be nonnegative");
    cfg.y = detail::require_number(params, "y", "params");
    if (!(cfg.y > 0.0)) throw ConfigError("params.y: must be positive");
    cfg.n_grid = detail::parse_n_grid(params);
    cfg.beta = detail::parse_beta(params);
    cfg.replications = detail::parse_replications(params);
  } else if (cfg.kind == "covering") {
    cfg.fclass = detail::parse_function_class(params, base_dir);
    cfg.eps_grid = detail::require_doubles(
        detail::require_key(params, "eps_grid", "params"), "params.eps_grid");
    if (cfg.eps_grid.empty()) throw ConfigError("params.eps_grid: must be nonempty");
    for (double e : cfg.eps_grid)
      if (!(e > 0.0 && e <= 2.0))
        throw ConfigError("params.eps_grid: radii must lie in (0, 2], got " + detail::fmt17(e));
    if (auto it = params.find("step"); it != params.end()) {
      if (!it->is_number() || !(it->get<double>() > 0.0 && it->get<double>() <= 2.0))
        throw ConfigError("params.step: must be a number in (0, 2]");
      cfg.entropy_step = it->get<double>();
    }
  }

  if (!cfg.n_grid.empty()) {
    cfg.samples_n = cfg.n_grid.front();
    if (auto it = params.find("samples_n"); it != params.end()) {
      if (!it->is_number_integer()) throw ConfigError("params.samples_n: must be an integer");
      int v = it->get<int>();
      bool member = false;
      for (int g : cfg.n_grid) member |= g == v;
      if (!member)
        throw ConfigError("params.samples_n: " + std::to_string(v) + " is not on the n_grid");
      cfg.samples_n = v;
    }
  }
  return cfg;
}

inline ExperimentConfig load_experiment_config_file(const std::string& path) {
  json doc = read_json_file(path, "config");
  return load_experiment_config(doc, std::filesystem::path(path).parent_path().string());
}

/// Non-throwing validation: collects schema/invariant problems and, when the
/// model loads, summarizes its stability constants.
struct ValidationDiagnostics {
  std::vector<std::string> errors;
  json fk_summary;
  bool ok() const { return errors.empty(); }
};

inline ValidationDiagnostics validate_experiment_config(const json& doc,
                                                        const std::string& base_dir = "") {
  ValidationDiagnostics d;
  try {
    ExperimentConfig cfg = load_experiment_config(doc, base_dir);
    FkConstants fk = fk_constants(*cfg.model);
    d.fk_summary = json{{"g", fk.g}, {"r_bound", fk.r_bound}, {"conservative", fk.conservative}};
  } catch (const Error& e) {
    d.errors.emplace_back(e.what());
  }
  return d;
}

// ---------------------------------------------------------------------------
// Field-sample emission.

struct SampleTarget {
  int time = 0;        // evaluation time of the fields
  int observable = 0;  // index written to the CSV
  Observable f;        // lives on the model space at `time`
};

/// CSV of per-replication field values, one row per (replication, target):
/// header `replication,time,observable,V,W,R`, doubles at 17 significant
/// digits.
inline std::string field_samples_csv(const FeynmanKacModel& model, const McKeanSpec& spec,
                                     std::span<const SampleTarget> targets, int N, int R,
                                     const RngSpec& rng, int workers = 1) {
  int horizon = 0;
  for (const auto& t : targets) horizon = std::max(horizon, t.time);
  FlowTrajectory flow = exact_flow(model, horizon);
  std::vector<std::vector<Observable>> dpnf;
  dpnf.reserve(targets.size());
  for (const auto& t : targets) dpnf.push_back(remainder_observables(model, flow, t.time, t.f));

  const int T = static_cast<int>(targets.size());
  RunExtractor ex;
  for (int i = 0; i < T; ++i) {
    std::string tag = std::to_string(i);
    ex.names.push_back("v_" + tag);
    ex.names.push_back("w_" + tag);
    ex.names.push_back("r_" + tag);
  }
  ex.fill = [&](const SimulationRun& run, std::span<double> row) {
    for (int i = 0; i < T; ++i) {
      const auto& t = targets[i];
      row[3 * i + 0] = field_v(run, spec, t.time, t.f);
      row[3 * i + 1] = field_w(run, flow, t.time, t.f);
      row[3 * i + 2] = remainder_r(run, spec, flow, t.time, t.f, dpnf[i]);
    }
  };
  BatchOptions opts;
  opts.workers = workers;
  ReplicationBatch batch = replicate(spec, horizon, N, R, rng, ex, opts);

  std::vector<std::vector<double>> cols;
  cols.reserve(3 * static_cast<size_t>(T));
  for (int j = 0; j < 3 * T; ++j) cols.push_back(batch.column(j));

  std::ostringstream os;
  os << "replication,time,observable,V,W,R\n";
  for (int r = 0; r < R; ++r)
    for (int i = 0; i < T; ++i)
      os << r << ',' << targets[i].time << ',' << targets[i].observable << ','
         << detail::fmt17(cols[3 * i + 0][r]) << ',' << detail::fmt17(cols[3 * i + 1][r]) << ','
         << detail::fmt17(cols[3 * i + 2][r]) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Experiment execution.

struct RunArtifacts {
  json report;
  std::string text;
  std::string samples_csv;  // empty when the kind emits no samples
  std::vector<std::string> failed_checks;
  bool checks_passed() const { return failed_checks.empty(); }
};

namespace detail {

inline json report_shell(const ExperimentConfig& cfg) {
  json j;
  j["kind"] = cfg.kind;
  j["version"] = kToolVersion;
  j["seed"] = cfg.seed;
  std::vector<int> spaces;
  for (int t = 0; t <= cfg.model->horizon(); ++t) spaces.push_back(cfg.model->space(t).size);
  j["model"] = json{{"horizon", cfg.model->horizon()}, {"spaces", spaces}};
  j["checks"] = json::object();
  return j;
}

inline void finish_checks(RunArtifacts& art) {
  for (auto it = art.report["checks"].begin(); it != art.report["checks"].end(); ++it)
    if (!it.value().get<bool>()) art.failed_checks.push_back(it.key());
}

inline std::string text_header(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "experiment: " << cfg.kind << "\n"
     << "version:    " << kToolVersion << "\n"
     << "seed:       " << cfg.seed << "\n";
  return os.str();
}

inline json wilson_json(const WilsonInterval& w) {
  return json{{"lo", w.lo}, {"hi", w.hi}};
}

}  // namespace detail

inline RunArtifacts run_exact_flow(const ExperimentConfig& cfg) {
  RunArtifacts art;
  art.report = detail::report_shell(cfg);
  FlowTrajectory flow = exact_flow(*cfg.model, cfg.time);
  json traj = json::array();
  std::vector<std::vector<std::string>> table{{"time", "weights"}};
  for (int t = 0; t <= cfg.time; ++t) {
    traj.push_back(json{{"time", t}, {"weights", flow[t].weights()}});
    std::string w;
    for (int x = 0; x < flow[t].size(); ++x) w += (x ? " " : "") + detail::fmt17(flow[t][x]);
    table.push_back({std::to_string(t), w});
  }
  art.report["results"] = json{{"trajectory", traj}};
  art.text = detail::text_header(cfg) + "\n" + detail::format_table(table);
  return art;
}

inline RunArtifacts run_mdp_sweep(const ExperimentConfig& cfg) {
  RunArtifacts art;
  art.report = detail::report_shell(cfg);
  auto spec = make_spec(*cfg.model, cfg.mckean);
  SpeedSchedule sched(cfg.beta, cfg.n_grid);
  RngSpec rng{cfg.seed};
  MdpSweepReport rep = mdp_sweep(*cfg.model, *spec, cfg.observables, cfg.time, sched,
                                 cfg.replications, rng, cfg.workers);
  json rows = json::array();
  std::vector<std::vector<std::string>> table{
      {"N", "alpha", "local", "local.se", "gap_local", "global", "global.se", "gap_global"}};
  for (const auto& r : rep.rows) {
    rows.push_back(json{{"N", r.N},
                        {"alpha", r.alpha},
                        {"local", laplace_json(r.local, r.N, cfg.seed)},
                        {"global", laplace_json(r.global, r.N, cfg.seed)},
                        {"target_local", r.target_local},
                        {"target_global", r.target_global},
                        {"gap_local", r.gap_local},
                        {"gap_global", r.gap_global}});
    table.push_back({std::to_string(r.N), detail::fmt17(r.alpha), detail::fmt17(r.local.value),
                     detail::fmt17(r.local.se), detail::fmt17(r.gap_local),
                     detail::fmt17(r.global.value), detail::fmt17(r.global.se),
                     detail::fmt17(r.gap_global)});
  }
  art.report["results"] =
      json{{"time", rep.time},
           {"beta", cfg.beta},
           {"replications", cfg.replications},
           {"mckean", cfg.mckean},
           {"target_local", rep.rows.empty() ? 0.0 : rep.rows.front().target_local},
           {"target_global", rep.rows.empty() ? 0.0 : rep.rows.front().target_global},
           {"rows", rows}};
  art.report["checks"]["gaps_nonincreasing"] = rep.gaps_nonincreasing;
  std::ostringstream os;
  os << detail::text_header(cfg) << "time:       " << rep.time << "\n\n"
     << detail::format_table(table) << "\ngaps_nonincreasing: "
     << (rep.gaps_nonincreasing ? "yes" : "no") << "\n";
  art.text = os.str();

  std::vector<SampleTarget> targets;
  for (int t = 0; t <= cfg.time; ++t) targets.push_back({t, t, cfg.observables[t]});
  art.samples_csv =
      field_samples_csv(*cfg.model, *spec, targets, cfg.samples_n, cfg.replications, rng,
                        cfg.workers);
  detail::finish_checks(art);
  return art;
}

inline RunArtifacts run_rate_eval(const ExperimentConfig& cfg) {
  RunArtifacts art;
  art.report = detail::report_shell(cfg);
  auto spec = make_spec(*cfg.model, cfg.mckean);
  FlowTrajectory flow = exact_flow(*cfg.model, cfg.time);
  SignedMeasure mu(cfg.model->space(cfg.time), cfg.target);
  json results{{"time", cfg.time}, {"field", cfg.field}, {"target", cfg.target},
               {"mckean", cfg.mckean}};
  std::ostringstream os;
  os << detail::text_header(cfg) << "time:       " << cfg.time << "\n"
     << "field:      " << cfg.field << "\n\n";
  if (cfg.field == "v") {
    RateEvaluation series = rate_I_measure(*spec, flow, cfg.time, mu);
    RateEvaluation vari =
        rate_variational_numeric(*cfg.model, *spec, flow, cfg.time, mu, FieldKind::V);
    results["series"] = rate_json(series);
    results["variational"] = rate_json(vari);
    bool agree;
    double gap = 0.0;
    if (series.finite() && vari.finite()) {
      gap = std::fabs(series.value - vari.value);
      agree = series.converged ? gap <= 1e-6 : true;  // partial sums are reported, not asserted
    } else {
      agree = !series.finite() && !vari.finite();
    }
    results["route_gap"] = detail::num(gap);
    art.report["checks"]["routes_agree"] = agree;
    os << "series:      " << detail::fmt17(series.value)
       << (series.reason_name().empty() ? "" : "  [" + series.reason_name() + "]") << "\n"
       << "variational: " << detail::fmt17(vari.value)
       << (vari.reason_name().empty() ? "" : "  [" + vari.reason_name() + "]") << "\n"
       << "route gap:   " << detail::fmt17(gap) << "\n";
  } else {
    RateEvaluation quad = rate_J(*cfg.model, *spec, flow, cfg.time, mu);
    results["quadratic"] = rate_json(quad);
    os << "quadratic:   " << detail::fmt17(quad.value)
       << (quad.reason_name().empty() ? "" : "  [" + quad.reason_name() + "]") << "\n";
  }
  art.report["results"] = results;
  art.text = os.str();
  detail::finish_checks(art);
  return art;
}

inline RunArtifacts run_remainder_tail(const ExperimentConfig& cfg) {
  RunArtifacts art;
  art.report = detail::report_shell(cfg);
  auto spec = make_spec(*cfg.model, cfg.mckean);
  SpeedSchedule sched(cfg.beta, cfg.n_grid);
  RngSpec rng{cfg.seed};
  RemainderTailReport rep = remainder_tail_check(*cfg.model, *spec, cfg.observables[0], cfg.time,
                                                 sched, cfg.replications, cfg.eps, rng,
                                                 cfg.workers);
  json rows = json::array();
  std::vector<std::vector<std::string>> table{
      {"N", "threshold", "count", "freq", "wilson.hi", "mean_abs", "exp_moment", "cor_freq",
       "cor_bound"}};
  for (const auto& r : rep.rows) {
    rows.push_back(json{{"N", r.N},
                        {"alpha", r.alpha},
                        {"threshold", r.threshold},
                        {"count", r.count},
                        {"freq", mc_json(r.freq, std::sqrt(r.freq * (1.0 - r.freq) / rep.R), rep.R,
                                         r.N, cfg.seed)},
                        {"wilson", detail::wilson_json(r.wilson)},
                        {"mean_abs", r.mean_abs},
                        {"exp_moment", detail::num(r.exp_moment)},
                        {"cor_threshold", r.cor_threshold},
                        {"cor_freq", r.cor_freq},
                        {"cor_bound", r.cor_bound}});
    table.push_back({std::to_string(r.N), detail::fmt17(r.threshold), std::to_string(r.count),
                     detail::fmt17(r.freq), detail::fmt17(r.wilson.hi), detail::fmt17(r.mean_abs),
                     detail::fmt17(r.exp_moment), detail::fmt17(r.cor_freq),
                     detail::fmt17(r.cor_bound)});
  }
  art.report["results"] = json{{"time", rep.time},       {"eps", rep.eps},
                               {"r_hat", rep.r_hat},     {"t", rep.t},
                               {"exp_bound", rep.exp_bound}, {"replications", rep.R},
                               {"mckean", cfg.mckean},   {"rows", rows}};
  art.report["checks"]["freqs_nonincreasing"] = rep.freqs_nonincreasing;
  art.report["checks"]["exp_moment_ok"] = rep.exp_moment_ok;
  art.report["checks"]["cor_compatible"] = rep.cor_compatible;
  art.report["checks"]["moments_dominated"] = rep.moments_dominated;
  std::ostringstream os;
  os << detail::text_header(cfg) << "time:       " << rep.time << "\n"
     << "eps:        " << detail::fmt17(rep.eps) << "\n"
     << "r_hat:      " << detail::fmt17(rep.r_hat) << "\n"
     << "exp bound:  " << detail::fmt17(rep.exp_bound) << "\n\n"
     << detail::format_table(table);
  art.text = os.str();

  std::vector<SampleTarget> targets{{cfg.time, 0, cfg.observables[0]}};
  art.samples_csv = field_samples_csv(*cfg.model, *spec, targets, cfg.samples_n,
                                      cfg.replications, rng, cfg.workers);
  detail::finish_checks(art);
  return art;
}

inline RunArtifacts run_bracket_drift(const ExperimentConfig& cfg) {
  RunArtifacts art;
  art.report = detail::report_shell(cfg);
  auto spec = make_spec(*cfg.model, cfg.mckean);
  RngSpec rng{cfg.seed};
  BracketDriftReport rep = bracket_drift_check(*spec, cfg.observables, cfg.time, cfg.n_grid,
                                               cfg.replications, rng, cfg.workers);
  json rows = json::array();
  std::vector<std::vector<std::string>> table{{"N", "mean_gap", "se"}};
  for (const auto& r : rep.rows) {
    rows.push_back(json{{"N", r.N},
                        {"gap", mc_json(r.mean_gap, r.se, cfg.replications, r.N, cfg.seed)}});
    table.push_back({std::to_string(r.N), detail::fmt17(r.mean_gap), detail::fmt17(r.se)});
  }
  art.report["results"] = json{{"time", rep.time},
                               {"exact_bracket", rep.exact_bracket_value},
                               {"replications", rep.R},
                               {"mckean", cfg.mckean},
                               {"slope", detail::num(rep.slope)},
                               {"rows", rows}};
  art.report["checks"]["slope_in_band"] = rep.slope_in_band;
  std::ostringstream os;
  os << detail::text_header(cfg) << "time:       " << rep.time << "\n"
     << "bracket:    " << detail::fmt17(rep.exact_bracket_value) << "\n\n"
     << detail::format_table(table) << "\nslope: " << detail::fmt17(rep.slope) << "  (band ["
     << -0.65 << ", " << -0.35 << "]: " << (rep.slope_in_band ? "inside" : "outside") << ")\n";
  art.text = os.str();
  detail::finish_checks(art);
  return art;
}

inline RunArtifacts run_equicontinuity(const ExperimentConfig& cfg) {
  RunArtifacts art;
  art.report = detail::report_shell(cfg);
  auto spec = make_spec(*cfg.model, cfg.mckean);
  SpeedSchedule sched(cfg.beta, cfg.n_grid);
  RngSpec rng{cfg.seed};
  EquicontinuityReport rep = equicontinuity_sweep(*spec, *cfg.fclass, cfg.time, sched,
                                                  cfg.delta_grid, cfg.y, cfg.replications, rng,
                                                  cfg.workers);
  json cells = json::array();
  std::vector<std::vector<std::string>> table{
      {"delta", "N", "threshold", "count", "freq", "log_prob/alpha", "source"}};
  for (const auto& c : rep.cells) {
    cells.push_back(json{{"delta", c.delta},
                         {"N", c.N},
                         {"alpha", c.alpha},
                         {"threshold", c.threshold},
                         {"count", c.count},
                         {"freq", mc_json(c.freq, std::sqrt(c.freq * (1.0 - c.freq) / rep.R),
                                          rep.R, c.N, cfg.seed)},
                         {"wilson", detail::wilson_json(c.wilson)},
                         {"degenerate", c.degenerate},
                         {"log_prob_over_alpha", detail::num(c.log_prob_over_alpha)},
                         {"source", c.source}});
    table.push_back({detail::fmt17(c.delta), std::to_string(c.N), detail::fmt17(c.threshold),
                     std::to_string(c.count), detail::fmt17(c.freq),
                     detail::fmt17(c.log_prob_over_alpha), c.source});
  }
  art.report["results"] = json{{"time", rep.time},   {"y", rep.y},
                               {"beta", cfg.beta},   {"replications", rep.R},
                               {"mckean", cfg.mckean}, {"class_size", cfg.fclass->size()},
                               {"cells", cells}};
  art.report["checks"]["monotone_at_largest_n"] = rep.monotone_at_largest_n;
  std::ostringstream os;
  os << detail::text_header(cfg) << "time:       " << rep.time << "\n"
     << "y:          " << detail::fmt17(rep.y) << "\n\n"
     << detail::format_table(table) << "\nmonotone_at_largest_n: "
     << (rep.monotone_at_largest_n ? "yes" : "no") << "\n";
  art.text = os.str();
  detail::finish_checks(art);
  return art;
}

inline RunArtifacts run_covering(const ExperimentConfig& cfg) {
  RunArtifacts art;
  art.report = detail::report_shell(cfg);
  const FunctionClass& F = *cfg.fclass;
  auto grid = default_measure_grid(F.space());
  json rows = json::array();
  std::vector<std::vector<std::string>> table{{"eps", "covering_number"}};
  for (double e : cfg.eps_grid) {
    int cn = uniform_covering_number(F, e, grid);
    rows.push_back(json{{"eps", e}, {"covering_number", cn}});
    table.push_back({detail::fmt17(e), std::to_string(cn)});
  }
  EntropyIntegral ei = entropy_integral(F, cfg.entropy_step, grid);
  EntropyIntegral ei_half = entropy_integral(F, 0.5 * cfg.entropy_step, grid);
  double change = std::fabs(ei.value - ei_half.value);
  bool halving_ok = change <= ei.truncation_bound + 1e-12;
  art.report["results"] =
      json{{"class_size", F.size()},
           {"rows", rows},
           {"entropy_integral", json{{"value", ei.value},
                                     {"truncation_bound", ei.truncation_bound},
                                     {"step", ei.step},
                                     {"half_step_value", ei_half.value},
                                     {"half_step_change", change}}}};
  art.report["checks"]["entropy_halving_ok"] = halving_ok;
  std::ostringstream os;
  os << detail::text_header(cfg) << "class size: " << F.size() << "\n\n"
     << detail::format_table(table) << "\nentropy integral: " << detail::fmt17(ei.value)
     << "  (truncation bound " << detail::fmt17(ei.truncation_bound) << ", half-step change "
     << detail::fmt17(change) << ")\n";
  art.text = os.str();
  detail::finish_checks(art);
  return art;
}

inline RunArtifacts run_experiment(const ExperimentConfig& cfg) {
  if (cfg.kind == "exact-flow") return run_exact_flow(cfg);
  if (cfg.kind == "mdp-sweep") return run_mdp_sweep(cfg);
  if (cfg.kind == "rate-eval") return run_rate_eval(cfg);
  if (cfg.kind == "remainder-tail") return run_remainder_tail(cfg);
  if (cfg.kind == "bracket-drift") return run_bracket_drift(cfg);
  if (cfg.kind == "equicontinuity") return run_equicontinuity(cfg);
  if (cfg.kind == "covering") return run_covering(cfg);
  throw ConfigError("config: unknown \"kind\" value \"" + cfg.kind + "\"");
}

// ---------------------------------------------------------------------------
// Artifact persistence.

struct RunManifest {
  std::string config_hash;
  std::string version = kToolVersion;
  uint64_t seed = 0;
  std::string started_at;
  double elapsed_seconds = 0.0;
  std::vector<std::pair<std::string, std::string>> checksums;  // file -> fnv1a-64 hex
};

inline json to_json(const RunManifest& m) {
  json files = json::object();
  for (const auto& [name, sum] : m.checksums) files[name] = sum;
  return json{{"config_hash", m.config_hash}, {"version", m.version},
              {"seed", m.seed},               {"started_at", m.started_at},
              {"elapsed_seconds", m.elapsed_seconds}, {"checksums", files}};
}

inline std::string utc_timestamp() {
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Write report.json, report.txt, the samples file when present, and
/// manifest.json into `out_dir`. Returns the manifest.
inline RunManifest write_run_outputs(const ExperimentConfig& cfg, const RunArtifacts& art,
                                     const std::string& out_dir, double elapsed_seconds,
                                     const std::string& started_at) {
  std::filesystem::create_directories(out_dir);
  RunManifest manifest;
  manifest.config_hash = detail::hex64(detail::fnv1a(cfg.effective.dump()));
  manifest.seed = cfg.seed;
  manifest.started_at = started_at;
  manifest.elapsed_seconds = elapsed_seconds;

  auto emit = [&](const std::string& name, const std::string& content) {
    std::ofstream f(out_dir + "/" + name, std::ios::binary);
    if (!f) throw Error("write_run_outputs: cannot open " + out_dir + "/" + name);
    f << content;
    manifest.checksums.emplace_back(name, detail::hex64(detail::fnv1a(content)));
  };
  emit("report.json", art.report.dump(2) + "\n");
  emit("report.txt", art.text);
  if (!art.samples_csv.empty()) emit("samples.csv", art.samples_csv);

  std::ofstream mf(out_dir + "/manifest.json", std::ios::binary);
  if (!mf) throw Error("write_run_outputs: cannot open " + out_dir + "/manifest.json");
  mf << to_json(manifest).dump(2) << "\n";
  return manifest;
}

}  // namespace meanfield
