#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pnp/interferometer.hpp"
#include "pnp/protocol.hpp"

namespace pnp::harness {

struct InterferometerBlock {
  double t1 = 0.9;
  double t2 = 0.9;
  double t3 = 0.95;
  double delay_line_ns = 250.0;
  double line_length_km = 23.0;
  double fiber_loss_db_per_km = 0.0;
  double group_velocity_km_s = 2.04e5;
  double bob_link_ns = 1.0;
  double alice_arm_ns = 1.0;
  double fr_angle_error_deg = 0.0;
  double pm_delta = 0.2;
  double pm_gamma = 0.98;
  std::string birefringence = "random"; ///< identity | random
  std::uint64_t birefringence_seed = 1; ///< fixes the random fiber draws across runs and sweep steps

  bool operator==(const InterferometerBlock &) const = default;
};

struct TraceBlock {
  double amplitude_cutoff = 1e-4;
  double bin_width_ns = 2.0;
  double pulse_fwhm_ns = 0.3;
  double time_horizon_ns = 0.0;
  std::uint64_t max_events = 4'000'000;

  bool operator==(const TraceBlock &) const = default;
};

struct VisibilityBlock {
  std::uint64_t points = 16;

  bool operator==(const VisibilityBlock &) const = default;
};

struct SessionBlock {
  std::string protocol = "two-state"; ///< two-state | bb84
  std::uint64_t n_slots = 100'000;
  double mu = 0.1;
  double eta = 0.2;
  double dark = 1e-4;
  double gate_ns = 2.5;
  double dead_time_ns = 0.0;
  double alarm_ratio = 2.0;
  double reference_fraction = 0.5;
  double laser_photons = 1e6;
  double repetition_period_ns = 1e6;

  bool operator==(const SessionBlock &) const = default;
};

struct AttackBlock {
  std::string strategy = "intercept-resend";
  double fraction = 0.5;
  std::string basis_policy = "random";
  double multiplier = 5.0;
  double probe_fraction = 1.0;
  double block_rate = 0.1;
  bool fail_on_alarm = false;

  bool operator==(const AttackBlock &) const = default;
};

struct BaselineBlock {
  double delta_l_nm = 0.0;
  double wavelength_nm = 1300.0;
  double long_arm_ns = 5.0;
  double line_length_km = 23.0;
  double pm_delta = 0.0;
  double pm_gamma = 1.0;
  std::string detector = "D0";

  bool operator==(const BaselineBlock &) const = default;
};

struct SweepBlock {
  std::string parameter; ///< empty: no sweep
  double from = 0.0;
  double to = 0.0;
  std::uint64_t steps = 0;
  std::string metric = "V"; ///< V | qber | sift_rate | alarm_rate

  bool operator==(const SweepBlock &) const = default;
};

struct ExperimentConfig {
  std::string experiment = "visibility"; ///< visibility | keygen | attack | baseline-mz
  std::uint64_t seed = 1;
  std::uint64_t workers = 1;
  std::string output = "pnp_out";
  InterferometerBlock interferometer;
  TraceBlock trace;
  VisibilityBlock visibility;
  SessionBlock session;
  AttackBlock attack;
  BaselineBlock baseline_mz;
  SweepBlock sweep;

  bool operator==(const ExperimentConfig &) const = default;
};

/// Environment variable holding the default worker count.
inline constexpr const char *kWorkersEnv = "PNP_WORKERS";

/// Built-in defaults, with `workers` taken from PNP_WORKERS when set.
ExperimentConfig default_config();

/// Parse YAML text on top of the defaults. Errors name `source` and the line.
ExperimentConfig parse_config(std::string_view text, std::string_view source = "<config>");
ExperimentConfig load_config(const std::filesystem::path &path);

/// Apply one `dotted.key=value` override.
void apply_override(ExperimentConfig &cfg, std::string_view assignment);
void set_value(ExperimentConfig &cfg, std::string_view key, std::string_view value);
std::string get_value(const ExperimentConfig &cfg, std::string_view key);

/// All settable keys in dotted form.
std::vector<std::string> config_keys();

/// Cross-field checks; throws ConfigError.
void validate(const ExperimentConfig &cfg);

/// Effective configuration as YAML; parse_config(dump_config(c)) == c.
std::string dump_config(const ExperimentConfig &cfg);

/// Commented YAML listing every key with its default and meaning.
std::string reference_config();

std::size_t edit_distance(std::string_view a, std::string_view b);
std::optional<std::string> closest_match(std::string_view key, const std::vector<std::string> &candidates);

// ---- Model construction ---------------------------------------------------

interferometer::PlugAndPlayParams plug_and_play_params(const ExperimentConfig &cfg);
interferometer::DoubleMzParams double_mz_params(const ExperimentConfig &cfg);
interferometer::TraceConfig trace_config(const ExperimentConfig &cfg);
protocol::SessionConfig session_config(const ExperimentConfig &cfg);

// ---- Running --------------------------------------------------------------

/// One sweep step: the configuration with the swept parameter set and a derived seed.
struct RunDescriptor {
  std::size_t index = 0;
  double value = 0.0;
  ExperimentConfig config;
};

/// Expand the sweep block; throws ConfigError if there is none.
std::vector<RunDescriptor> sweep_points(const ExperimentConfig &cfg);

/// Ordered key=value summary.
using Summary = std::vector<std::pair<std::string, std::string>>;

struct RunOutcome {
  int exit_code = 0;
  Summary summary;
};

/// Evaluate one sweep metric for a configuration without writing files.
double metric_value(const ExperimentConfig &cfg, std::string_view metric);

/// Run the configured experiment (or sweep when sweep.parameter is set) and
/// write its files under cfg.output.
RunOutcome run_experiment(const ExperimentConfig &cfg);

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitAlarm = 3;

std::string format_summary(const Summary &summary);

} // namespace pnp::harness
