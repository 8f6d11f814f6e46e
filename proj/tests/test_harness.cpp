#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include "pnp/errors.hpp"
#include "pnp/harness.hpp"

using namespace pnp;
using namespace pnp::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string &name) {
  const fs::path dir = fs::temp_directory_path() / ("pnp_harness_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> read_summary(const fs::path &p) {
  std::map<std::string, std::string> out;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

std::string config_error(std::string_view yaml) {
  try {
    parse_config(yaml, "test.yaml");
  } catch (const ConfigError &e) {
    return e.what();
  }
  return {};
}

ExperimentConfig ideal_visibility(const fs::path &out) {
  ExperimentConfig cfg = default_config();
  cfg.experiment = "visibility";
  cfg.interferometer.birefringence = "identity";
  cfg.interferometer.pm_delta = 0.0;
  cfg.interferometer.pm_gamma = 1.0;
  cfg.output = out.string();
  return cfg;
}

int run_cli(const std::string &args) {
  const std::string cmd = std::string(PNPSIM_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST_CASE("minimal config takes defaults") {
  const auto cfg = parse_config("experiment: keygen\nseed: 7\n");
  ExperimentConfig expected = default_config();
  expected.experiment = "keygen";
  expected.seed = 7;
  CHECK(cfg == expected);
  CHECK(parse_config("") == default_config());
}

TEST_CASE("unknown keys are rejected with a suggestion") {
  const auto top = config_error("experiment: visibility\nvissibility:\n  points: 8\n");
  CHECK(top.find("test.yaml:2:") != std::string::npos);
  CHECK(top.find("did you mean 'visibility'") != std::string::npos);

  const auto nested = config_error("session:\n  mu: 0.1\n  n_slot: 10\n");
  CHECK(nested.find(":3:") != std::string::npos);
  CHECK(nested.find("did you mean 'n_slots'") != std::string::npos);

  ExperimentConfig cfg;
  try {
    apply_override(cfg, "session.muu=0.3");
    FAIL("override accepted");
  } catch (const ConfigError &e) {
    CHECK(std::string(e.what()).find("session.mu") != std::string::npos);
  }
}

TEST_CASE("parse errors carry the line") {
  const auto msg = config_error("experiment: keygen\nsession:\n  mu: [0.1, 0.2\n");
  CHECK(msg.find("test.yaml:") != std::string::npos);
  CHECK_FALSE(msg.empty());
  const auto scalar = config_error("session:\n  mu: [0.1]\n");
  CHECK(scalar.find(":2:") != std::string::npos);
}

TEST_CASE("range violations name the field") {
  CHECK(config_error("session:\n  eta: 1.5\n").find("session.eta") != std::string::npos);
  CHECK(config_error("interferometer:\n  t2: 0\n").find("interferometer.t2") != std::string::npos);
  CHECK(config_error("visibility:\n  points: 4\n").find("visibility.points") != std::string::npos);
  CHECK(config_error("experiment: keygn\n").find("did you mean 'keygen'") != std::string::npos);
  CHECK(config_error("session:\n  n_slots: 2.5\n").find("session.n_slots") != std::string::npos);
}

TEST_CASE("config round trip") {
  ExperimentConfig cfg = default_config();
  cfg.experiment = "attack";
  cfg.seed = 123456789012345ULL;
  cfg.session.mu = 0.123456789012345;
  cfg.interferometer.fr_angle_error_deg = 1.0 / 3.0;
  cfg.attack.strategy = "strong-probe";
  cfg.attack.fail_on_alarm = true;
  cfg.output = "out dir/with \"quotes\"";
  cfg.sweep = {"session.mu", 0.05, 0.2, 4, "qber"};
  CHECK(parse_config(dump_config(cfg)) == cfg);
  CHECK(parse_config(dump_config(default_config())) == default_config());
}

TEST_CASE("reference lists every key with its default") {
  ::unsetenv(kWorkersEnv);
  const std::string ref = reference_config();
  CHECK(parse_config(ref) == ExperimentConfig{});
  for (const auto &key : config_keys()) {
    const auto leaf = key.substr(key.rfind('.') == std::string::npos ? 0 : key.rfind('.') + 1);
    CHECK(ref.find(leaf + ":") != std::string::npos);
  }
}

TEST_CASE("worker count from the environment") {
  ::setenv(kWorkersEnv, "3", 1);
  CHECK(default_config().workers == 3);
  ::setenv(kWorkersEnv, "0", 1);
  CHECK_THROWS_AS(default_config(), ConfigError);
  ::unsetenv(kWorkersEnv);
  CHECK(default_config().workers == 1);
}

TEST_CASE("overrides") {
  ExperimentConfig cfg;
  apply_override(cfg, "session.mu=0.25");
  apply_override(cfg, "attack.fail_on_alarm=true");
  apply_override(cfg, "session.protocol=bb84");
  CHECK(cfg.session.mu == 0.25);
  CHECK(cfg.attack.fail_on_alarm);
  CHECK(get_value(cfg, "session.protocol") == "bb84");
  CHECK_THROWS_AS(apply_override(cfg, "session.mu"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "session.mu=abc"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "session.protocol=b92"), ConfigError);
}

TEST_CASE("sweep expansion") {
  ExperimentConfig cfg = default_config();
  cfg.sweep = {"interferometer.fr_angle_error_deg", 0.0, 2.0, 21, "V"};
  const auto steps = sweep_points(cfg);
  REQUIRE(steps.size() == 21);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    CHECK(steps[i].value == doctest::Approx(0.1 * static_cast<double>(i)).epsilon(1e-12));
    CHECK(steps[i].config.interferometer.fr_angle_error_deg == steps[i].value);
    CHECK(steps[i].config.seed == derive_seed(cfg.seed, i));
  }
  CHECK(steps.back().value == 2.0);

  SUBCASE("metric must fit the experiment") {
    cfg.sweep.metric = "qber";
    CHECK_THROWS_AS(sweep_points(cfg), ConfigError);
    cfg.experiment = "keygen";
    CHECK_NOTHROW(sweep_points(cfg));
    cfg.sweep.metric = "V";
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  }
  SUBCASE("parameter must exist") {
    cfg.sweep.parameter = "interferometer.fr_angle_eror_deg";
    try {
      validate(cfg);
      FAIL("accepted");
    } catch (const ConfigError &e) {
      CHECK(std::string(e.what()).find("did you mean 'interferometer.fr_angle_error_deg'") != std::string::npos);
    }
  }
  SUBCASE("steps out of range") {
    cfg.sweep = {"interferometer.t2", 0.5, 1.5, 3, "V"};
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg.sweep = {"interferometer.t2", 0.5, 0.5, 3, "V"};
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  }
}

TEST_CASE("visibility experiment on the ideal instrument") {
  const auto dir = scratch_dir("vis");
  const auto outcome = run_experiment(ideal_visibility(dir));
  CHECK(outcome.exit_code == kExitOk);
  const auto summary = read_summary(dir / "summary.txt");
  CHECK(std::abs(std::stod(summary.at("visibility")) - 1.0) < 1e-9);
  CHECK(summary.at("visibility") == "1.000000000000");
  CHECK(fs::exists(dir / "fringe.csv"));
  CHECK(fs::exists(dir / "bins.csv"));
  CHECK(parse_config(slurp(dir / "effective_config.yaml")) == ideal_visibility(dir));
}

TEST_CASE("keygen experiment") {
  const auto dir = scratch_dir("keygen");
  ExperimentConfig cfg = default_config();
  cfg.experiment = "keygen";
  cfg.session.n_slots = 100'000;
  cfg.output = dir.string();
  CHECK(run_experiment(cfg).exit_code == kExitOk);
  const auto stats = read_summary(dir / "stats.txt");
  CHECK(std::stod(stats.at("sift_rate")) > 0.0);
  CHECK(stats.at("qber") != "undefined");
  CHECK(stats.at("protocol") == "two-state");
  CHECK(stats.at("reference_missing_count") == "0");

  SUBCASE("byte-identical reruns") {
    const std::string records = slurp(dir / "records.csv");
    const std::string summary = slurp(dir / "stats.txt");
    run_experiment(cfg);
    CHECK(slurp(dir / "records.csv") == records);
    CHECK(slurp(dir / "stats.txt") == summary);
  }
  SUBCASE("worker count does not change results") {
    const std::string records = slurp(dir / "records.csv");
    cfg.workers = 5;
    run_experiment(cfg);
    CHECK(slurp(dir / "records.csv") == records);
  }
}

TEST_CASE("attack experiments") {
  const auto dir = scratch_dir("attack");
  ExperimentConfig cfg = default_config();
  cfg.experiment = "attack";
  cfg.attack.strategy = "strong-probe";
  cfg.session.n_slots = 5000;
  cfg.output = dir.string();
  auto outcome = run_experiment(cfg);
  CHECK(outcome.exit_code == kExitOk);
  auto stats = read_summary(dir / "stats.txt");
  CHECK(stats.at("monitor_alarm_count") == "5000");
  CHECK(stats.at("eve_information") != "");
  CHECK(stats.at("alarm") == "true");

  cfg.attack.fail_on_alarm = true;
  CHECK(run_experiment(cfg).exit_code == kExitAlarm);

  // A light tap leaves the reference above threshold and the monitor quiet.
  cfg.attack.strategy = "beam-split";
  cfg.attack.fraction = 0.3;
  CHECK(run_experiment(cfg).exit_code == kExitOk);
  // Tapping most of the light starves the reference bin.
  cfg.attack.fraction = 0.8;
  CHECK(run_experiment(cfg).exit_code == kExitAlarm);
}

TEST_CASE("sweeps") {
  SUBCASE("t2 leaves visibility unchanged") {
    const auto dir = scratch_dir("sweep_t2");
    ExperimentConfig cfg = default_config();
    cfg.experiment = "visibility";
    cfg.interferometer.pm_delta = 0.0;
    cfg.interferometer.pm_gamma = 1.0;
    cfg.visibility.points = 8;
    cfg.sweep = {"interferometer.t2", 0.5, 0.99, 4, "V"};
    cfg.workers = 2;
    cfg.output = dir.string();
    run_experiment(cfg);
    std::istringstream csv(slurp(dir / "sweep.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "interferometer.t2,V,fringe_phase");
    int rows = 0;
    while (std::getline(csv, line)) {
      const double v = std::stod(line.substr(line.find(',') + 1));
      CHECK(std::abs(v - 1.0) < 1e-9);
      ++rows;
    }
    CHECK(rows == 4);
  }
  SUBCASE("half-wave mismatch flips the baseline fringe") {
    const auto dir = scratch_dir("sweep_dl");
    ExperimentConfig cfg = default_config();
    cfg.experiment = "baseline-mz";
    cfg.sweep = {"baseline_mz.delta_l_nm", 0.0, 650.0, 2, "V"};
    cfg.output = dir.string();
    run_experiment(cfg);
    std::istringstream csv(slurp(dir / "sweep.csv"));
    std::string header, first, second;
    std::getline(csv, header);
    std::getline(csv, first);
    std::getline(csv, second);
    const double phase0 = std::stod(first.substr(first.rfind(',') + 1));
    const double phase1 = std::stod(second.substr(second.rfind(',') + 1));
    CHECK(std::abs(phase0) < 1e-6);
    CHECK(std::abs(phase1 - std::numbers::pi) < 1e-6);
  }
  SUBCASE("session metric sweeps are reproducible") {
    const auto dir = scratch_dir("sweep_mu");
    ExperimentConfig cfg = default_config();
    cfg.experiment = "keygen";
    cfg.session.n_slots = 5000;
    cfg.sweep = {"session.mu", 0.05, 0.2, 3, "sift_rate"};
    cfg.output = dir.string();
    run_experiment(cfg);
    const std::string first = slurp(dir / "sweep.csv");
    cfg.workers = 3;
    run_experiment(cfg);
    CHECK(slurp(dir / "sweep.csv") == first);
  }
}

TEST_CASE("command-line exit codes") {
  const auto dir = scratch_dir("cli");
  CHECK(run_cli("visibility --set interferometer.birefringence=identity -o " + (dir / "v").string()) == kExitOk);
  CHECK(fs::exists(dir / "v" / "summary.txt"));
  CHECK(run_cli("keygen --set session.eta=2 -o " + (dir / "k").string()) == kExitConfig);

  const auto bad = dir / "bad.yaml";
  std::ofstream(bad) << "experiment: keygen\nsesion:\n  mu: 0.1\n";
  CHECK(run_cli("keygen -c " + bad.string()) == kExitConfig);

  CHECK(run_cli("attack --set attack.strategy=strong-probe --set attack.fail_on_alarm=true --set session.n_slots=100 -o " +
                (dir / "a").string()) == kExitAlarm);
  CHECK(run_cli("defaults") == kExitOk);
  CHECK(run_cli("sweep -o " + (dir / "s").string()) == kExitConfig);
  // Blocked output directory: a regular file sits where the directory should go.
  std::ofstream(dir / "blocked") << "x";
  CHECK(run_cli("visibility -o " + (dir / "blocked" / "sub").string()) == kExitRuntime);
}
