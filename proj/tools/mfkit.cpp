// Command-line front end: run or validate a JSON experiment config.
//
// Exit codes: 0 success, 2 configuration/validation error, 3 failed check
// assertion in a check-mode run.

#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include <meanfield.hpp>

namespace mf = meanfield;

namespace {

struct CliOptions {
  std::string config_path;
  int workers = 0;       // 0: keep config value
  std::string out_dir;   // empty: keep config value
  long long seed = -1;   // negative: keep config value
};

int do_run(const CliOptions& opt) {
  mf::json doc = mf::read_json_file(opt.config_path, "config");
  if (opt.seed >= 0) doc["seed"] = static_cast<uint64_t>(opt.seed);
  if (opt.workers > 0) doc["workers"] = opt.workers;
  if (!opt.out_dir.empty()) doc["output"] = opt.out_dir;

  std::string base = std::filesystem::path(opt.config_path).parent_path().string();
  mf::ExperimentConfig cfg = mf::load_experiment_config(doc, base);

  std::string started = mf::utc_timestamp();
  auto t0 = std::chrono::steady_clock::now();
  mf::RunArtifacts art = mf::run_experiment(cfg);
  double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  mf::RunManifest manifest = mf::write_run_outputs(cfg, art, cfg.output_dir, elapsed, started);
  std::cout << "wrote " << cfg.output_dir << "/report.json (config " << manifest.config_hash
            << ", " << mf::detail::fmt17(elapsed) << "s)\n";
  for (const auto& [name, sum] : manifest.checksums)
    std::cout << "  " << sum << "  " << name << "\n";

  if (!art.checks_passed()) {
    for (const auto& name : art.failed_checks) std::cout << "check failed: " << name << "\n";
    if (cfg.check) return 3;
  }
  return 0;
}

int do_validate(const CliOptions& opt) {
  mf::json doc = mf::read_json_file(opt.config_path, "config");
  if (opt.seed >= 0) doc["seed"] = static_cast<uint64_t>(opt.seed);
  std::string base = std::filesystem::path(opt.config_path).parent_path().string();
  mf::ValidationDiagnostics d = mf::validate_experiment_config(doc, base);
  if (!d.ok()) {
    for (const auto& e : d.errors) std::cout << "error: " << e << "\n";
    return 2;
  }
  std::cout << "config ok\n";
  if (!d.fk_summary.is_null()) std::cout << "stability constants: " << d.fk_summary.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mean-field particle experiment runner"};
  app.require_subcommand(1);
  CliOptions opt;

  CLI::App* run = app.add_subcommand("run", "Run an experiment config and write artifacts");
  run->add_option("config", opt.config_path, "JSON config file")->required();
  run->add_option("--workers", opt.workers, "Override worker count");
  run->add_option("--out", opt.out_dir, "Override output directory");
  run->add_option("--seed", opt.seed, "Override the config seed");

  CLI::App* validate = app.add_subcommand("validate", "Validate a config without running it");
  validate->add_option("config", opt.config_path, "JSON config file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(run)) return do_run(opt);
    return do_validate(opt);
  } catch (const mf::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
