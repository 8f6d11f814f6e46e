// pnpsim: command-line driver for the plug-and-play interferometer simulator.

#include <cstdio>
#include <exception>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <yaml-cpp/exceptions.h>

#include "pnp/errors.hpp"
#include "pnp/harness.hpp"

namespace {

struct RunOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> workers;
  std::optional<std::string> output;
};

void add_run_options(CLI::App *cmd, RunOptions &opts) {
  cmd->add_option("-c,--config", opts.config_path, "YAML configuration file")->check(CLI::ExistingFile);
  cmd->add_option("-s,--set", opts.overrides, "override a key: dotted.key=value (repeatable)");
  cmd->add_option("--seed", opts.seed, "master seed (overrides the file)");
  cmd->add_option("-j,--workers", opts.workers, "worker threads (default: config, then PNP_WORKERS, then 1)");
  cmd->add_option("-o,--output", opts.output, "output directory");
}

pnp::harness::ExperimentConfig build_config(const RunOptions &opts, const std::string &experiment) {
  auto cfg = opts.config_path.empty() ? pnp::harness::default_config() : pnp::harness::load_config(opts.config_path);
  if (!experiment.empty()) cfg.experiment = experiment;
  for (const auto &o : opts.overrides) pnp::harness::apply_override(cfg, o);
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.workers) pnp::harness::set_value(cfg, "workers", std::to_string(*opts.workers));
  if (opts.output) cfg.output = *opts.output;
  return cfg;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Discrete-event simulator of an auto-compensating plug-and-play QKD interferometer"};
  app.require_subcommand(1);

  RunOptions opts;
  std::string chosen;
  std::string experiment;
  for (const char *name : {"visibility", "keygen", "attack", "baseline-mz"}) {
    auto *cmd = app.add_subcommand(name, fmt::format("run the {} experiment", name));
    add_run_options(cmd, opts);
    cmd->callback([&, name] {
      chosen = name;
      experiment = name;
    });
  }
  auto *sweep = app.add_subcommand("sweep", "run the sweep block of the configured experiment");
  add_run_options(sweep, opts);
  sweep->callback([&] { chosen = "sweep"; });

  bool print_effective = false;
  auto *defaults = app.add_subcommand("defaults", "print the configuration reference with all defaults");
  defaults->add_flag("--effective", print_effective, "print the effective configuration instead");
  add_run_options(defaults, opts);
  defaults->callback([&] { chosen = "defaults"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : pnp::harness::kExitConfig;
  }

  try {
    if (chosen == "defaults") {
      if (print_effective) std::fputs(pnp::harness::dump_config(build_config(opts, "")).c_str(), stdout);
      else std::fputs(pnp::harness::reference_config().c_str(), stdout);
      return pnp::harness::kExitOk;
    }
    auto cfg = build_config(opts, experiment);
    if (chosen == "sweep" && cfg.sweep.parameter.empty()) throw pnp::ConfigError("sweep requested but sweep.parameter is empty");
    if (chosen != "sweep") {
      cfg.sweep = {};
    }
    const auto outcome = pnp::harness::run_experiment(cfg);
    std::fputs(pnp::harness::format_summary(outcome.summary).c_str(), stdout);
    if (outcome.exit_code == pnp::harness::kExitAlarm) std::fputs("security alarm raised; failing as configured\n", stderr);
    return outcome.exit_code;
  } catch (const pnp::ConfigError &e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return pnp::harness::kExitConfig;
  } catch (const YAML::Exception &e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return pnp::harness::kExitConfig;
  } catch (const std::exception &e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return pnp::harness::kExitRuntime;
  }
}
