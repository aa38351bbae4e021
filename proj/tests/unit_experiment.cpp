#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "oracles.hpp"

using namespace meanfield;
using nlohmann::json;
using Catch::Matchers::ContainsSubstring;

namespace {

json running_config(const std::string& kind) {
  json doc;
  doc["kind"] = kind;
  doc["seed"] = 91;
  doc["model"] = to_json(testkit::running_model(2));
  doc["params"] = json::object();
  return doc;
}

json sweep_config() {
  json doc = running_config("mdp-sweep");
  doc["params"]["time"] = 1;
  doc["params"]["observables"] = json::array({{1.0, 0.0}, {1.0, 0.0}});
  doc["params"]["n_grid"] = {50, 100};
  doc["params"]["beta"] = 0.5;
  doc["params"]["replications"] = 60;
  return doc;
}

}  // namespace

TEST_CASE("checksum primitives match the reference vectors") {
  CHECK(detail::fnv1a("") == 14695981039346656037ull);
  CHECK(detail::fnv1a("a") == 0xaf63dc4c8601ec8cull);
  CHECK(detail::hex64(detail::fnv1a("")) == "cbf29ce484222325");
  CHECK(detail::hex64(0) == "0000000000000000");
  CHECK(detail::fmt17(0.1) == "0.10000000000000001");
  CHECK(std::stod(detail::fmt17(1.0 / 3.0)) == 1.0 / 3.0);
  CHECK(detail::num(std::numeric_limits<double>::infinity()) == json("+inf"));
  CHECK(detail::num(-std::numeric_limits<double>::infinity()) == json("-inf"));
  CHECK(detail::num(std::nan("")) == json("nan"));
  CHECK(detail::num(0.5) == json(0.5));
}

TEST_CASE("json round trips are bit faithful") {
  StateSpace s(3);
  ProbabilityMeasure mu(s, {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0});
  json j = to_json(mu);
  ProbabilityMeasure back = measure_from_json(json::parse(j.dump()));
  CHECK(to_json(back).dump() == j.dump());
  for (int x = 0; x < 3; ++x) CHECK(back[x] == mu[x]);

  MarkovKernel M(s, StateSpace(2), {0.1, 0.9, 0.3, 0.7, 1.0, 0.0});
  CHECK(to_json(kernel_from_json(json::parse(to_json(M).dump()))).dump() == to_json(M).dump());

  Observable f(s, {0.1, -1e-17, 3.000000000000001});
  Observable fb = observable_from_json(json::parse(to_json(f).dump()));
  for (int x = 0; x < 3; ++x) CHECK(fb[x] == f[x]);

  auto model = testkit::running_model(3);
  json mj = to_json(model);
  FeynmanKacModel mb = model_from_json(json::parse(mj.dump()));
  CHECK(to_json(mb).dump() == mj.dump());
}

TEST_CASE("model parsing errors carry the time index") {
  json good = to_json(testkit::running_model(2));

  json bad = good;
  bad["potentials"][1] = {0.5, 1.0, 0.25};
  CHECK_THROWS_WITH(model_from_json(bad), ContainsSubstring("potentials[1]"));

  bad = good;
  bad["mutations"][0]["rows"] = {{0.5, 0.25, 0.25}, {0.5, 0.25, 0.25}};
  CHECK_THROWS_WITH(model_from_json(bad), ContainsSubstring("mutations[0]"));

  bad = good;
  bad["potentials"][1] = {0.0, 1.0};  // below the positivity floor
  CHECK_THROWS_AS(model_from_json(bad), ConfigError);
  CHECK_THROWS_WITH(model_from_json(bad), ContainsSubstring("time 1"));

  bad = good;
  bad.erase("initial");
  CHECK_THROWS_WITH(model_from_json(bad), ContainsSubstring("initial"));
}

TEST_CASE("config loader rejects malformed documents by name") {
  json doc = sweep_config();
  CHECK_NOTHROW(load_experiment_config(doc));

  json no_seed = doc;
  no_seed.erase("seed");
  CHECK_THROWS_WITH(load_experiment_config(no_seed),
                    ContainsSubstring("seeds are mandatory, no implicit entropy"));

  json bad_kind = doc;
  bad_kind["kind"] = "exact-flo";
  CHECK_THROWS_WITH(load_experiment_config(bad_kind), ContainsSubstring("unknown \"kind\""));

  json bad_grid = doc;
  bad_grid["params"]["n_grid"] = {100, 50};
  CHECK_THROWS_WITH(load_experiment_config(bad_grid),
                    ContainsSubstring("strictly increasing, got 50 after 100"));

  json bad_beta = doc;
  bad_beta["params"]["beta"] = 1.0;
  CHECK_THROWS_WITH(load_experiment_config(bad_beta), ContainsSubstring("params.beta"));

  json bad_workers = doc;
  bad_workers["workers"] = 0;
  CHECK_THROWS_WITH(load_experiment_config(bad_workers), ContainsSubstring("workers"));

  json bad_rule = doc;
  bad_rule["params"]["mckean"] = "mean-field";
  CHECK_THROWS_WITH(load_experiment_config(bad_rule),
                    ContainsSubstring("unknown rule \"mean-field\""));

  json bad_samples = doc;
  bad_samples["params"]["samples_n"] = 75;
  CHECK_THROWS_WITH(load_experiment_config(bad_samples),
                    ContainsSubstring("75 is not on the n_grid"));

  json rate = running_config("rate-eval");
  rate["params"]["time"] = 2;
  rate["params"]["target"] = {0.01, -0.01, 0.0};
  CHECK_THROWS_WITH(load_experiment_config(rate),
                    ContainsSubstring("length 3 does not match the state space size 2"));
  rate["params"]["target"] = {0.01, -0.01};
  rate["params"]["field"] = "x";
  CHECK_THROWS_WITH(load_experiment_config(rate), ContainsSubstring("params.field"));

  json bad_time = running_config("exact-flow");
  bad_time["params"]["time"] = 5;
  CHECK_THROWS_WITH(load_experiment_config(bad_time),
                    ContainsSubstring("5 outside the model horizon 0..2"));
}

TEST_CASE("config defaults and overrides") {
  json doc = sweep_config();
  ExperimentConfig cfg = load_experiment_config(doc);
  CHECK(cfg.workers == 1);
  CHECK(cfg.output_dir == "out");
  CHECK_FALSE(cfg.check);
  CHECK(cfg.mckean == "selection-mutation");
  CHECK(cfg.samples_n == 50);  // defaults to the smallest grid entry

  doc["workers"] = 4;
  doc["output"] = "elsewhere";
  doc["check"] = true;
  doc["params"]["samples_n"] = 100;
  doc["params"]["mckean"] = "conditionally-iid";
  cfg = load_experiment_config(doc);
  CHECK(cfg.workers == 4);
  CHECK(cfg.output_dir == "elsewhere");
  CHECK(cfg.check);
  CHECK(cfg.samples_n == 100);
  CHECK(cfg.mckean == "conditionally-iid");
}

TEST_CASE("validation reports the constants on success and the first error otherwise") {
  ValidationDiagnostics ok = validate_experiment_config(sweep_config());
  REQUIRE(ok.ok());
  REQUIRE(ok.fk_summary["g"].size() == 2);
  for (const auto& g : ok.fk_summary["g"]) CHECK(g.get<double>() == 2.0);
  REQUIRE(ok.fk_summary["r_bound"].size() == 3);
  CHECK(ok.fk_summary["r_bound"][1].get<double>() == Catch::Approx(4.0).margin(1e-12));
  CHECK(ok.fk_summary["conservative"].get<bool>());  // the bound is labeled, not sharp

  json broken = sweep_config();
  broken["params"]["beta"] = -1.0;
  ValidationDiagnostics bad = validate_experiment_config(broken);
  REQUIRE_FALSE(bad.ok());
  CHECK_THAT(bad.errors[0], ContainsSubstring("params.beta"));
}

TEST_CASE("exact-flow runs produce the trajectory and no samples") {
  json doc = running_config("exact-flow");
  doc["params"]["time"] = 2;
  RunArtifacts art = run_experiment(load_experiment_config(doc));
  CHECK(art.report["kind"] == "exact-flow");
  CHECK(art.report["seed"] == 91);
  const json& traj = art.report["results"]["trajectory"];
  REQUIRE(traj.size() == 3);
  CHECK(traj[2]["weights"][0].get<double>() == Catch::Approx(0.5).margin(1e-15));
  CHECK(art.samples_csv.empty());
  CHECK(art.checks_passed());
  CHECK_THAT(art.text, ContainsSubstring("exact-flow"));
}

TEST_CASE("rate-eval run: zero target evaluates to rate zero on both routes") {
  json doc = running_config("rate-eval");
  doc["params"]["time"] = 2;
  doc["params"]["target"] = {0.0, 0.0};
  doc["check"] = true;
  RunArtifacts art = run_experiment(load_experiment_config(doc));
  CHECK(art.report["results"]["series"]["value"].get<double>() == 0.0);
  CHECK(art.report["results"]["variational"]["value"].get<double>() == 0.0);
  CHECK(art.report["checks"]["routes_agree"].get<bool>());
  CHECK(art.checks_passed());
}

TEST_CASE("sweep runs are deterministic and emit the sample file") {
  ExperimentConfig cfg = load_experiment_config(sweep_config());
  RunArtifacts a = run_experiment(cfg);
  RunArtifacts b = run_experiment(cfg);
  CHECK(a.report.dump() == b.report.dump());
  CHECK(a.samples_csv == b.samples_csv);
  REQUIRE_FALSE(a.samples_csv.empty());

  std::istringstream lines(a.samples_csv);
  std::string line;
  REQUIRE(std::getline(lines, line));
  CHECK(line == "replication,time,observable,V,W,R");
  int rows = 0;
  while (std::getline(lines, line)) ++rows;
  CHECK(rows == 60 * 2);  // R replications, times 0 and 1

  // Worker count changes neither the report nor the samples.
  json par = sweep_config();
  par["workers"] = 3;
  RunArtifacts c = run_experiment(load_experiment_config(par));
  CHECK(c.samples_csv == a.samples_csv);
  CHECK(c.report["results"].dump() == a.report["results"].dump());
}

TEST_CASE("output writer records checksums that match the files") {
  ExperimentConfig cfg = load_experiment_config(sweep_config());
  RunArtifacts art = run_experiment(cfg);
  namespace fs = std::filesystem;
  fs::path base = fs::temp_directory_path() / "mf_outputs_test";
  fs::remove_all(base);
  RunManifest m1 = write_run_outputs(cfg, art, (base / "a").string(), 1.25, utc_timestamp());
  RunManifest m2 = write_run_outputs(cfg, art, (base / "b").string(), 9.75, utc_timestamp());

  CHECK(m1.config_hash == m2.config_hash);
  REQUIRE(m1.checksums.size() == 3);
  REQUIRE(m2.checksums.size() == 3);
  for (size_t i = 0; i < m1.checksums.size(); ++i) {
    CHECK(m1.checksums[i].first == m2.checksums[i].first);
    CHECK(m1.checksums[i].second == m2.checksums[i].second);
  }

  for (const char* name : {"report.json", "report.txt", "samples.csv", "manifest.json"})
    CHECK(fs::exists(base / "a" / name));

  std::ifstream in(base / "a" / "report.json", std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(detail::hex64(detail::fnv1a(content)) == m1.checksums[0].second);

  json manifest = json::parse(std::ifstream(base / "a" / "manifest.json"));
  CHECK(manifest["config_hash"] == m1.config_hash);
  CHECK(manifest["seed"] == 91);
  CHECK(manifest["elapsed_seconds"].get<double>() == 1.25);
  CHECK(manifest["checksums"]["report.json"] == m1.checksums[0].second);
  fs::remove_all(base);
}

TEST_CASE("missing config files are reported with their path") {
  CHECK_THROWS_WITH(load_experiment_config_file("/nonexistent/cfg.json"),
                    ContainsSubstring("/nonexistent/cfg.json"));
}
