#include "pnp/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>
#include <variant>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include "pnp/errors.hpp"

namespace pnp::harness {

namespace {

// ---- Field registry -------------------------------------------------------

using RealRef = double &(*)(ExperimentConfig &);
using CountRef = std::uint64_t &(*)(ExperimentConfig &);
using FlagRef = bool &(*)(ExperimentConfig &);
using TextRef = std::string &(*)(ExperimentConfig &);

struct Range {
  double lo = -HUGE_VAL;
  double hi = HUGE_VAL;
  bool lo_open = false;
  bool hi_open = false;

  bool contains(double x) const {
    return (lo_open ? x > lo : x >= lo) && (hi_open ? x < hi : x <= hi);
  }
  std::string describe() const {
    const auto bound = [](double v) { return std::isinf(v) ? std::string(v < 0 ? "-inf" : "inf") : fmt::format("{}", v); };
    return fmt::format("{}{}, {}{}", lo_open ? '(' : '[', bound(lo), bound(hi), hi_open ? ')' : ']');
  }
};

struct Field {
  std::string key;
  std::variant<RealRef, CountRef, FlagRef, TextRef> ref;
  Range range;
  std::vector<std::string> choices; ///< text fields: allowed values (empty = free text)
  std::string doc;
};

constexpr Range kUnit{0.0, 1.0, false, false};
constexpr Range kOpenUnit{0.0, 1.0, true, true};
constexpr Range kPositive{0.0, HUGE_VAL, true, false};
constexpr Range kNonNegative{0.0, HUGE_VAL, false, false};
constexpr Range kAny{};

Field real(std::string key, RealRef ref, Range range, std::string doc) { return {std::move(key), ref, range, {}, std::move(doc)}; }
Field count(std::string key, CountRef ref, Range range, std::string doc) { return {std::move(key), ref, range, {}, std::move(doc)}; }
Field flag(std::string key, FlagRef ref, std::string doc) { return {std::move(key), ref, kAny, {}, std::move(doc)}; }
Field text(std::string key, TextRef ref, std::vector<std::string> choices, std::string doc) {
  return {std::move(key), ref, kAny, std::move(choices), std::move(doc)};
}

const std::vector<std::string> kSections = {"interferometer", "trace", "visibility", "session", "attack", "baseline_mz", "sweep"};

const std::vector<Field> &registry() {
  using C = ExperimentConfig;
  static const std::vector<Field> fields = {
      text("experiment", [](C &c) -> std::string & { return c.experiment; }, {"visibility", "keygen", "attack", "baseline-mz"},
           "experiment family"),
      count("seed", [](C &c) -> std::uint64_t & { return c.seed; }, kNonNegative, "master seed for all random draws"),
      count("workers", [](C &c) -> std::uint64_t & { return c.workers; }, {1.0, 4096.0}, "worker threads (default from PNP_WORKERS)"),
      text("output", [](C &c) -> std::string & { return c.output; }, {}, "directory receiving result files"),

      real("interferometer.t1", [](C &c) -> double & { return c.interferometer.t1; }, kOpenUnit, "C1 amplitude transmission"),
      real("interferometer.t2", [](C &c) -> double & { return c.interferometer.t2; }, kOpenUnit, "C2 amplitude transmission"),
      real("interferometer.t3", [](C &c) -> double & { return c.interferometer.t3; }, kOpenUnit, "C3 amplitude transmission"),
      real("interferometer.delay_line_ns", [](C &c) -> double & { return c.interferometer.delay_line_ns; }, kPositive,
           "pulse separation set by the M1-M2 delay line"),
      real("interferometer.line_length_km", [](C &c) -> double & { return c.interferometer.line_length_km; }, kNonNegative,
           "Bob-Alice fiber length"),
      real("interferometer.fiber_loss_db_per_km", [](C &c) -> double & { return c.interferometer.fiber_loss_db_per_km; },
           kNonNegative, "line attenuation"),
      real("interferometer.group_velocity_km_s", [](C &c) -> double & { return c.interferometer.group_velocity_km_s; }, kPositive,
           "group velocity in fiber"),
      real("interferometer.bob_link_ns", [](C &c) -> double & { return c.interferometer.bob_link_ns; }, kNonNegative,
           "C1-C2 fiber delay"),
      real("interferometer.alice_arm_ns", [](C &c) -> double & { return c.interferometer.alice_arm_ns; }, kNonNegative,
           "C3-M3 fiber delay"),
      real("interferometer.fr_angle_error_deg", [](C &c) -> double & { return c.interferometer.fr_angle_error_deg; },
           {-45.0, 45.0, true, true}, "Faraday rotator angle error, degrees"),
      real("interferometer.pm_delta", [](C &c) -> double & { return c.interferometer.pm_delta; }, kAny,
           "phase modulator extra phase on the v axis, radians"),
      real("interferometer.pm_gamma", [](C &c) -> double & { return c.interferometer.pm_gamma; }, {0.0, 1.0, true, false},
           "phase modulator relative v-axis transmission"),
      text("interferometer.birefringence", [](C &c) -> std::string & { return c.interferometer.birefringence; },
           {"identity", "random"}, "fiber birefringence model"),
      count("interferometer.birefringence_seed", [](C &c) -> std::uint64_t & { return c.interferometer.birefringence_seed; },
            kNonNegative, "seed of the random birefringence draws"),

      real("trace.amplitude_cutoff", [](C &c) -> double & { return c.trace.amplitude_cutoff; }, {0.0, 1.0, true, true},
           "drop segments below this fraction of the launch amplitude"),
      real("trace.bin_width_ns", [](C &c) -> double & { return c.trace.bin_width_ns; }, kPositive, "detector time-bin width"),
      real("trace.pulse_fwhm_ns", [](C &c) -> double & { return c.trace.pulse_fwhm_ns; }, kPositive, "Gaussian pulse FWHM"),
      real("trace.time_horizon_ns", [](C &c) -> double & { return c.trace.time_horizon_ns; }, kNonNegative,
           "trace horizon, 0 = automatic"),
      count("trace.max_events", [](C &c) -> std::uint64_t & { return c.trace.max_events; }, {1.0, HUGE_VAL},
            "event budget per trace"),

      count("visibility.points", [](C &c) -> std::uint64_t & { return c.visibility.points; }, {8.0, 100000.0},
            "phase samples per fringe scan"),

      text("session.protocol", [](C &c) -> std::string & { return c.session.protocol; }, {"two-state", "bb84"},
           "key distribution protocol"),
      count("session.n_slots", [](C &c) -> std::uint64_t & { return c.session.n_slots; }, {1.0, HUGE_VAL}, "slots per session"),
      real("session.mu", [](C &c) -> double & { return c.session.mu; }, kPositive, "mean photon number leaving Alice"),
      real("session.eta", [](C &c) -> double & { return c.session.eta; }, kUnit, "detector quantum efficiency"),
      real("session.dark", [](C &c) -> double & { return c.session.dark; }, {0.0, 1.0, false, true},
           "dark-count probability per gate"),
      real("session.gate_ns", [](C &c) -> double & { return c.session.gate_ns; }, kPositive, "detector gate width"),
      real("session.dead_time_ns", [](C &c) -> double & { return c.session.dead_time_ns; }, kNonNegative, "detector dead time"),
      real("session.alarm_ratio", [](C &c) -> double & { return c.session.alarm_ratio; }, {1.0, HUGE_VAL, true, false},
           "monitor alarm threshold relative to the expected intensity"),
      real("session.reference_fraction", [](C &c) -> double & { return c.session.reference_fraction; },
           {0.0, 1.0, true, false}, "reference bin must reach this fraction of nominal"),
      real("session.laser_photons", [](C &c) -> double & { return c.session.laser_photons; }, kPositive,
           "photons per unit launch intensity"),
      real("session.repetition_period_ns", [](C &c) -> double & { return c.session.repetition_period_ns; }, kPositive,
           "slot period"),

      text("attack.strategy", [](C &c) -> std::string & { return c.attack.strategy; },
           {"beam-split", "intercept-resend", "suppress-inconclusive", "strong-probe", "block-slots"}, "eavesdropping strategy"),
      real("attack.fraction", [](C &c) -> double & { return c.attack.fraction; }, kOpenUnit, "beam-split tapped intensity fraction"),
      text("attack.basis_policy", [](C &c) -> std::string & { return c.attack.basis_policy; }, {"random", "fixed-0", "fixed-90"},
           "intercept-resend measurement basis"),
      real("attack.multiplier", [](C &c) -> double & { return c.attack.multiplier; }, {1.0, HUGE_VAL, true, false},
           "strong-probe intensity multiplier"),
      real("attack.probe_fraction", [](C &c) -> double & { return c.attack.probe_fraction; }, kUnit,
           "fraction of slots probed"),
      real("attack.block_rate", [](C &c) -> double & { return c.attack.block_rate; }, kUnit, "block-slots rate"),
      flag("attack.fail_on_alarm", [](C &c) -> bool & { return c.attack.fail_on_alarm; }, "exit with status 3 on any alarm"),

      real("baseline_mz.delta_l_nm", [](C &c) -> double & { return c.baseline_mz.delta_l_nm; }, kAny,
           "extra length of Bob's long arm"),
      real("baseline_mz.wavelength_nm", [](C &c) -> double & { return c.baseline_mz.wavelength_nm; }, kPositive, "wavelength"),
      real("baseline_mz.long_arm_ns", [](C &c) -> double & { return c.baseline_mz.long_arm_ns; }, kPositive,
           "long-arm delay of both interferometers"),
      real("baseline_mz.line_length_km", [](C &c) -> double & { return c.baseline_mz.line_length_km; }, kNonNegative,
           "line between the two interferometers"),
      real("baseline_mz.pm_delta", [](C &c) -> double & { return c.baseline_mz.pm_delta; }, kAny, "modulator extra v-axis phase"),
      real("baseline_mz.pm_gamma", [](C &c) -> double & { return c.baseline_mz.pm_gamma; }, {0.0, 1.0, true, false},
           "modulator relative v-axis transmission"),
      text("baseline_mz.detector", [](C &c) -> std::string & { return c.baseline_mz.detector; }, {"D0", "D1"},
           "output port scanned"),

      text("sweep.parameter", [](C &c) -> std::string & { return c.sweep.parameter; }, {}, "dotted key to sweep, empty = none"),
      real("sweep.from", [](C &c) -> double & { return c.sweep.from; }, kAny, "first value"),
      real("sweep.to", [](C &c) -> double & { return c.sweep.to; }, kAny, "last value"),
      count("sweep.steps", [](C &c) -> std::uint64_t & { return c.sweep.steps; }, kNonNegative, "number of values"),
      text("sweep.metric", [](C &c) -> std::string & { return c.sweep.metric; }, {"V", "qber", "sift_rate", "alarm_rate"},
           "quantity recorded per step"),
  };
  return fields;
}

const Field *find_field(std::string_view key) {
  for (const Field &f : registry()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

std::string join(const std::vector<std::string> &items) {
  std::string out;
  for (const auto &s : items) out += (out.empty() ? "" : ", ") + s;
  return out;
}

double parse_number(std::string_view key, std::string_view text) {
  double v = 0.0;
  const auto *end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw ConfigError(fmt::format("{}: '{}' is not a finite number", key, text));
  }
  return v;
}

void check_range(const Field &f, double v) {
  if (!f.range.contains(v)) throw ConfigError(fmt::format("{} = {} outside {}", f.key, v, f.range.describe()));
}

std::string format_value(const Field &f, const ExperimentConfig &cfg) {
  auto &c = const_cast<ExperimentConfig &>(cfg);
  return std::visit(
      [&](auto ref) -> std::string {
        using R = decltype(ref);
        if constexpr (std::is_same_v<R, RealRef>) return fmt::format("{}", ref(c));
        else if constexpr (std::is_same_v<R, CountRef>) return fmt::format("{}", ref(c));
        else if constexpr (std::is_same_v<R, FlagRef>) return ref(c) ? "true" : "false";
        else return ref(c);
      },
      f.ref);
}

std::string yaml_quote(const std::string &s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch;
  }
  return out + "\"";
}

std::string render(const ExperimentConfig &cfg, bool with_docs) {
  std::string out;
  std::string section;
  for (const Field &f : registry()) {
    const auto dot = f.key.find('.');
    const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
    const std::string leaf = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
    if (sec != section) {
      section = sec;
      out += fmt::format("\n{}:\n", sec);
    }
    const std::string indent = sec.empty() ? "" : "  ";
    if (with_docs) {
      std::string doc = f.doc;
      if (!f.choices.empty()) doc += fmt::format(" ({})", join(f.choices));
      else if (std::holds_alternative<RealRef>(f.ref) || std::holds_alternative<CountRef>(f.ref)) {
        if (f.range.lo != -HUGE_VAL || f.range.hi != HUGE_VAL) doc += fmt::format(", range {}", f.range.describe());
      }
      out += fmt::format("{}# {}\n", indent, doc);
    }
    std::string value = format_value(f, cfg);
    if (std::holds_alternative<TextRef>(f.ref)) value = yaml_quote(value);
    out += fmt::format("{}{}: {}\n", indent, leaf, value);
  }
  return out;
}

ExperimentConfig builtin_defaults() { return ExperimentConfig{}; }

[[noreturn]] void fail_at(std::string_view source, const YAML::Mark &mark, const std::string &message) {
  throw ConfigError(fmt::format("{}:{}:{}: {}", source, mark.line + 1, mark.column + 1, message));
}

void walk(const YAML::Node &node, const std::string &prefix, ExperimentConfig &cfg, std::string_view source) {
  if (!node.IsMap()) fail_at(source, node.Mark(), prefix.empty() ? "top level must be a mapping" : prefix + " must be a mapping");
  for (const auto &item : node) {
    const std::string key = item.first.as<std::string>();
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (prefix.empty() && std::find(kSections.begin(), kSections.end(), key) != kSections.end()) {
      if (item.second.IsNull()) continue;
      walk(item.second, key, cfg, source);
      continue;
    }
    if (find_field(path)) {
      if (!item.second.IsScalar()) fail_at(source, item.second.Mark(), path + " must be a scalar");
      try {
        set_value(cfg, path, item.second.Scalar());
      } catch (const ConfigError &e) {
        fail_at(source, item.second.Mark(), e.what());
      }
      continue;
    }
    std::vector<std::string> candidates;
    for (const Field &f : registry()) {
      if (prefix.empty()) {
        if (f.key.find('.') == std::string::npos) candidates.push_back(f.key);
      } else if (f.key.starts_with(prefix + ".")) {
        candidates.push_back(f.key.substr(prefix.size() + 1));
      }
    }
    if (prefix.empty()) candidates.insert(candidates.end(), kSections.begin(), kSections.end());
    std::string message = fmt::format("unknown key '{}'", path);
    if (auto hint = closest_match(key, candidates)) message += fmt::format("; did you mean '{}'?", *hint);
    fail_at(source, item.first.Mark(), message);
  }
}

bool sweepable(const Field &f) {
  return (std::holds_alternative<RealRef>(f.ref) || std::holds_alternative<CountRef>(f.ref)) && !f.key.starts_with("sweep.") &&
         f.key != "seed" && f.key != "workers";
}

std::vector<std::string> metric_experiments(std::string_view metric) {
  if (metric == "V") return {"visibility", "baseline-mz"};
  if (metric == "qber" || metric == "sift_rate") return {"keygen", "attack"};
  return {"keygen", "attack"};
}

constexpr double kFwhmPerSigma = 2.3548200450309493;

} // namespace

// ---- Config API -----------------------------------------------------------

ExperimentConfig default_config() {
  ExperimentConfig cfg = builtin_defaults();
  if (const char *env = std::getenv(kWorkersEnv); env && *env) {
    try {
      set_value(cfg, "workers", env);
    } catch (const ConfigError &e) {
      throw ConfigError(fmt::format("{}: {}", kWorkersEnv, e.what()));
    }
  }
  return cfg;
}

ExperimentConfig parse_config(std::string_view text, std::string_view source) {
  ExperimentConfig cfg = default_config();
  YAML::Node root;
  try {
    root = YAML::Load(std::string(text));
  } catch (const YAML::ParserException &e) {
    fail_at(source, e.mark, e.msg);
  }
  if (!root.IsNull()) walk(root, "", cfg, source);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config file '{}'", path.string()));
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str(), path.string());
}

void set_value(ExperimentConfig &cfg, std::string_view key, std::string_view value) {
  const Field *f = find_field(key);
  if (!f) {
    std::string message = fmt::format("unknown key '{}'", key);
    if (auto hint = closest_match(key, config_keys())) message += fmt::format("; did you mean '{}'?", *hint);
    throw ConfigError(message);
  }
  std::visit(
      [&](auto ref) {
        using R = decltype(ref);
        if constexpr (std::is_same_v<R, RealRef>) {
          const double v = parse_number(key, value);
          check_range(*f, v);
          ref(cfg) = v;
        } else if constexpr (std::is_same_v<R, CountRef>) {
          const double v = parse_number(key, value);
          if (v < 0.0 || v != std::floor(v) || v > 1.8e19) {
            throw ConfigError(fmt::format("{}: '{}' is not a non-negative integer", key, value));
          }
          check_range(*f, v);
          std::uint64_t n = 0;
          const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), n);
          ref(cfg) = (ec == std::errc() && ptr == value.data() + value.size()) ? n : static_cast<std::uint64_t>(v);
        } else if constexpr (std::is_same_v<R, FlagRef>) {
          if (value == "true" || value == "yes" || value == "1") ref(cfg) = true;
          else if (value == "false" || value == "no" || value == "0") ref(cfg) = false;
          else throw ConfigError(fmt::format("{}: '{}' is not a boolean", key, value));
        } else {
          std::string s(value);
          if (!f->choices.empty() && std::find(f->choices.begin(), f->choices.end(), s) == f->choices.end()) {
            std::string message = fmt::format("{}: '{}' is not one of {}", key, s, join(f->choices));
            if (auto hint = closest_match(s, f->choices)) message += fmt::format("; did you mean '{}'?", *hint);
            throw ConfigError(message);
          }
          ref(cfg) = std::move(s);
        }
      },
      f->ref);
}

std::string get_value(const ExperimentConfig &cfg, std::string_view key) {
  const Field *f = find_field(key);
  if (!f) throw ConfigError(fmt::format("unknown key '{}'", key));
  return format_value(*f, cfg);
}

void apply_override(ExperimentConfig &cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError(fmt::format("override '{}' is not of the form key=value", assignment));
  }
  set_value(cfg, assignment.substr(0, eq), assignment.substr(eq + 1));
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field &f : registry()) keys.push_back(f.key);
  return keys;
}

void validate(const ExperimentConfig &cfg) {
  for (const Field &f : registry()) {
    // Re-run the per-field checks so programmatically built configs get the same treatment.
    ExperimentConfig scratch = cfg;
    set_value(scratch, f.key, format_value(f, cfg));
  }
  const SweepBlock &sw = cfg.sweep;
  if (sw.parameter.empty()) {
    if (sw.steps != 0) throw ConfigError("sweep.steps is set but sweep.parameter is empty");
  } else {
    const Field *f = find_field(sw.parameter);
    if (!f) {
      std::string message = fmt::format("sweep.parameter: unknown key '{}'", sw.parameter);
      if (auto hint = closest_match(sw.parameter, config_keys())) message += fmt::format("; did you mean '{}'?", *hint);
      throw ConfigError(message);
    }
    if (!sweepable(*f)) throw ConfigError(fmt::format("sweep.parameter: '{}' is not a sweepable numeric key", sw.parameter));
    if (sw.steps < 1) throw ConfigError("sweep.steps must be at least 1");
    if (sw.steps > 1 && sw.from == sw.to) throw ConfigError("sweep range is empty: sweep.from equals sweep.to");
    const auto allowed = metric_experiments(sw.metric);
    if (std::find(allowed.begin(), allowed.end(), cfg.experiment) == allowed.end()) {
      throw ConfigError(fmt::format("sweep.metric '{}' does not apply to experiment '{}' (use with {})", sw.metric,
                                    cfg.experiment, join(allowed)));
    }
    for (std::uint64_t i = 0; i < sw.steps; ++i) {
      ExperimentConfig step = cfg;
      const double v = sw.steps == 1 ? sw.from : sw.from + (sw.to - sw.from) * static_cast<double>(i) / static_cast<double>(sw.steps - 1);
      try {
        set_value(step, sw.parameter, fmt::format("{}", std::holds_alternative<CountRef>(f->ref) ? std::round(v) : v));
      } catch (const ConfigError &e) {
        throw ConfigError(fmt::format("sweep step {}: {}", i, e.what()));
      }
    }
  }
  if (cfg.experiment == "keygen" || cfg.experiment == "attack") session_config(cfg).validate();
}

std::string dump_config(const ExperimentConfig &cfg) { return render(cfg, false); }

std::string reference_config() {
  return "# pnpsim configuration reference: every key with its default value.\n"
         "# Unknown keys are rejected. Any key can be overridden with --set key=value.\n" +
         render(builtin_defaults(), true);
}

std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

std::optional<std::string> closest_match(std::string_view key, const std::vector<std::string> &candidates) {
  std::optional<std::string> best;
  std::size_t best_d = std::max<std::size_t>(2, key.size() / 3) + 1;
  for (const auto &c : candidates) {
    const std::size_t d = edit_distance(key, c);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

// ---- Model construction ---------------------------------------------------

interferometer::PlugAndPlayParams plug_and_play_params(const ExperimentConfig &cfg) {
  const InterferometerBlock &b = cfg.interferometer;
  interferometer::PlugAndPlayParams p;
  p.t1 = b.t1;
  p.t2 = b.t2;
  p.t3 = b.t3;
  p.delay_line_ns = b.delay_line_ns;
  p.line_delay_ns = b.line_length_km / b.group_velocity_km_s * 1e9;
  p.line_loss_db = b.line_length_km * b.fiber_loss_db_per_km;
  p.bob_link_ns = b.bob_link_ns;
  p.alice_arm_ns = b.alice_arm_ns;
  p.fr_angle_error = b.fr_angle_error_deg * std::numbers::pi / 180.0;
  p.alice_pm = {b.pm_delta, b.pm_gamma};
  p.bob_pm = {b.pm_delta, b.pm_gamma};
  if (b.birefringence == "random") {
    RngStream rng(b.birefringence_seed, kSessionStream);
    p.line_birefringence = optics::haar_random_unitary(rng);
    p.delay_m1_birefringence = optics::haar_random_unitary(rng);
    p.delay_m2_birefringence = optics::haar_random_unitary(rng);
    p.alice_arm_birefringence = optics::haar_random_unitary(rng);
    p.bob_link_birefringence = optics::haar_random_unitary(rng);
  }
  return p;
}

interferometer::DoubleMzParams double_mz_params(const ExperimentConfig &cfg) {
  const BaselineBlock &b = cfg.baseline_mz;
  interferometer::DoubleMzParams p;
  p.delta_l_nm = b.delta_l_nm;
  p.wavelength_nm = b.wavelength_nm;
  p.group_velocity_km_s = cfg.interferometer.group_velocity_km_s;
  p.long_arm_ns = b.long_arm_ns;
  p.line_delay_ns = b.line_length_km / p.group_velocity_km_s * 1e9;
  p.line_loss_db = b.line_length_km * cfg.interferometer.fiber_loss_db_per_km;
  p.alice_pm = {b.pm_delta, b.pm_gamma};
  p.bob_pm = {b.pm_delta, b.pm_gamma};
  if (cfg.interferometer.birefringence == "random") {
    // Only the shared line; the arms of an unbalanced interferometer must match.
    RngStream rng(cfg.interferometer.birefringence_seed, kSessionStream);
    p.line_birefringence = optics::haar_random_unitary(rng);
  }
  return p;
}

interferometer::TraceConfig trace_config(const ExperimentConfig &cfg) {
  interferometer::TraceConfig t;
  t.amplitude_cutoff = cfg.trace.amplitude_cutoff;
  t.bin_width_ns = cfg.trace.bin_width_ns;
  t.pulse_rms_ns = cfg.trace.pulse_fwhm_ns / kFwhmPerSigma;
  t.time_horizon_ns = cfg.trace.time_horizon_ns;
  t.max_events = cfg.trace.max_events;
  return t;
}

protocol::SessionConfig session_config(const ExperimentConfig &cfg) {
  const SessionBlock &s = cfg.session;
  protocol::SessionConfig out;
  out.protocol = s.protocol == "bb84" ? protocol::Protocol::bb84 : protocol::Protocol::two_state;
  out.n_slots = s.n_slots;
  out.mu = {s.mu};
  out.detector = {s.eta, s.dark, s.gate_ns, s.dead_time_ns};
  out.monitor = {1.0, s.alarm_ratio};
  out.reference_fraction = s.reference_fraction;
  out.repetition_period_ns = s.repetition_period_ns;
  out.seed = cfg.seed;
  out.workers = static_cast<unsigned>(cfg.workers);
  if (cfg.experiment == "attack") {
    const AttackBlock &a = cfg.attack;
    if (a.strategy == "beam-split") out.eve = protocol::BeamSplit{a.fraction};
    else if (a.strategy == "intercept-resend") {
      const auto policy = a.basis_policy == "fixed-0"    ? protocol::BasisPolicy::fixed_0
                          : a.basis_policy == "fixed-90" ? protocol::BasisPolicy::fixed_90
                                                         : protocol::BasisPolicy::random;
      out.eve = protocol::InterceptResend{policy};
    } else if (a.strategy == "suppress-inconclusive") out.eve = protocol::SuppressInconclusive{};
    else if (a.strategy == "strong-probe") out.eve = protocol::StrongProbe{a.multiplier, a.probe_fraction};
    else out.eve = protocol::BlockSlots{a.block_rate};
  }
  return out;
}

// ---- Running --------------------------------------------------------------

namespace {

struct SessionRun {
  protocol::Calibration calibration;
  std::vector<protocol::RawSlotRecord> records;
  protocol::SessionStats stats;
};

SessionRun run_session_for(const ExperimentConfig &cfg) {
  const protocol::SessionConfig sc = session_config(cfg);
  protocol::OpticsModel optics(plug_and_play_params(cfg), trace_config(cfg), sc.mu, cfg.session.laser_photons);
  SessionRun run;
  run.calibration = optics.calibration();
  run.records = protocol::run_session(sc, optics);
  run.stats = protocol::sift(sc.protocol, run.records);
  return run;
}

interferometer::VisibilityResult scan_for(const ExperimentConfig &cfg) {
  const int n = static_cast<int>(cfg.visibility.points);
  if (cfg.experiment == "baseline-mz") {
    return interferometer::visibility_scan(double_mz_params(cfg), trace_config(cfg), n, cfg.baseline_mz.detector);
  }
  return interferometer::visibility_scan(plug_and_play_params(cfg), trace_config(cfg), n);
}

/// Phase of the fringe maximum in [0, 2 pi), from the first Fourier harmonic.
double fringe_phase(const interferometer::VisibilityResult &r) {
  std::complex<double> c1{};
  for (const auto &pt : r.fringe) c1 += pt.intensity * std::polar(1.0, -pt.phi_a);
  double phase = -std::arg(c1);
  const double two_pi = 2.0 * std::numbers::pi;
  phase = std::fmod(phase + two_pi, two_pi);
  if (two_pi - phase < 1e-9 || phase < 1e-9) phase = 0.0;
  return phase;
}

double alarm_rate(const protocol::SessionStats &stats, std::span<const protocol::RawSlotRecord> records) {
  std::uint64_t alarms = 0;
  for (const auto &r : records) alarms += (r.monitor_alarm || !r.reference_seen) ? 1 : 0;
  return stats.n_slots ? static_cast<double>(alarms) / static_cast<double>(stats.n_slots) : 0.0;
}

std::string num(double v) { return fmt::format("{:.12g}", v); }

void write_file(const std::filesystem::path &path, const std::string &content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << content;
}

RunOutcome run_visibility(const ExperimentConfig &cfg, const std::filesystem::path &dir) {
  const auto result = scan_for(cfg);
  std::ostringstream fringe;
  interferometer::write_fringe_csv(fringe, result);
  write_file(dir / "fringe.csv", fringe.str());

  interferometer::InterferometerSpec spec;
  if (cfg.experiment == "baseline-mz") spec = interferometer::build_double_mz(double_mz_params(cfg));
  else spec = interferometer::build_plug_and_play(plug_and_play_params(cfg));
  const auto tc = trace_config(cfg);
  const auto bins = interferometer::bin_and_interfere(interferometer::trace(spec, tc), spec, tc.bin_width_ns, tc.pulse_rms_ns);
  std::ostringstream bins_csv;
  interferometer::write_bins_csv(bins_csv, bins);
  write_file(dir / "bins.csv", bins_csv.str());

  RunOutcome out;
  out.summary = {{"experiment", cfg.experiment},
                 {"seed", fmt::format("{}", cfg.seed)},
                 {"points", fmt::format("{}", cfg.visibility.points)},
                 {"visibility", fmt::format("{:.12f}", result.visibility)},
                 {"sampled_visibility", fmt::format("{:.12f}", result.sampled_visibility)},
                 {"i_max", num(result.i_max)},
                 {"i_min", num(result.i_min)},
                 {"fringe_phase", num(fringe_phase(result))}};
  if (cfg.experiment == "baseline-mz") {
    const auto mz = double_mz_params(cfg);
    const double dt = mz.mismatch_delay_ns();
    const double sigma = tc.pulse_rms_ns;
    out.summary.emplace_back("detector", cfg.baseline_mz.detector);
    out.summary.emplace_back("mismatch_delay_ns", num(dt));
    out.summary.emplace_back("envelope_overlap", num(std::exp(-dt * dt / (8.0 * sigma * sigma))));
  }
  write_file(dir / "summary.txt", format_summary(out.summary));
  return out;
}

RunOutcome run_session_experiment(const ExperimentConfig &cfg, const std::filesystem::path &dir) {
  const SessionRun run = run_session_for(cfg);
  std::ostringstream records;
  protocol::write_records_csv(records, run.records);
  write_file(dir / "records.csv", records.str());

  const auto &st = run.stats;
  const bool alarm = st.monitor_alarm_count > 0 || st.reference_missing_count > 0;
  RunOutcome out;
  out.summary = {{"experiment", cfg.experiment},
                 {"protocol", cfg.session.protocol},
                 {"n_slots", fmt::format("{}", st.n_slots)},
                 {"seed", fmt::format("{}", cfg.seed)}};
  if (cfg.experiment == "attack") out.summary.emplace_back("eve", cfg.attack.strategy);
  out.summary.emplace_back("sifted_bits", fmt::format("{}", st.sifted()));
  out.summary.emplace_back("errors", fmt::format("{}", st.errors));
  out.summary.emplace_back("sift_rate", num(st.sift_rate));
  if (st.sifted() > 0) {
    const auto q = protocol::qber(st);
    out.summary.emplace_back("qber", num(q.value));
    out.summary.emplace_back("qber_wilson_low", num(q.wilson_low));
    out.summary.emplace_back("qber_wilson_high", num(q.wilson_high));
  } else {
    out.summary.emplace_back("qber", "undefined");
  }
  out.summary.emplace_back("double_clicks", fmt::format("{}", st.double_clicks));
  out.summary.emplace_back("reference_missing_count", fmt::format("{}", st.reference_missing_count));
  out.summary.emplace_back("monitor_alarm_count", fmt::format("{}", st.monitor_alarm_count));
  out.summary.emplace_back("alarm", alarm ? "true" : "false");
  if (cfg.experiment == "attack") out.summary.emplace_back("eve_information", fmt::format("{}", st.eve_information));
  out.summary.emplace_back("alice_attenuation", num(run.calibration.attenuation));
  out.summary.emplace_back("mu_weak", num(run.calibration.mu_weak));
  out.summary.emplace_back("mu_signal_max", num(run.calibration.mu_signal_max));
  out.summary.emplace_back("mu_reference", num(run.calibration.mu_reference));
  write_file(dir / "stats.txt", format_summary(out.summary));

  if (cfg.experiment == "attack" && cfg.attack.fail_on_alarm && alarm) out.exit_code = kExitAlarm;
  return out;
}

RunOutcome run_sweep(const ExperimentConfig &cfg, const std::filesystem::path &dir) {
  const auto steps = sweep_points(cfg);
  const std::string &metric = cfg.sweep.metric;
  std::vector<double> values(steps.size());
  std::vector<double> phases(steps.size());
  std::vector<std::exception_ptr> failures(steps.size());

  auto evaluate = [&](std::size_t i) {
    try {
      if (metric == "V") {
        const auto r = scan_for(steps[i].config);
        values[i] = r.visibility;
        phases[i] = fringe_phase(r);
      } else {
        values[i] = metric_value(steps[i].config, metric);
      }
    } catch (...) {
      failures[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min<std::size_t>(cfg.workers, steps.size());
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < steps.size(); i += workers) evaluate(i);
      });
    }
  }
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (failures[i]) {
      try {
        std::rethrow_exception(failures[i]);
      } catch (const std::exception &e) {
        throw std::runtime_error(fmt::format("sweep step {} ({} = {}): {}", i, cfg.sweep.parameter, steps[i].value, e.what()));
      }
    }
  }

  std::string csv = fmt::format("{},{}{}\n", cfg.sweep.parameter, metric, metric == "V" ? ",fringe_phase" : "");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    csv += fmt::format("{:.17g},{:.17g}", steps[i].value, values[i]);
    if (metric == "V") csv += fmt::format(",{:.17g}", phases[i]);
    csv += '\n';
  }
  write_file(dir / "sweep.csv", csv);

  RunOutcome out;
  out.summary = {{"experiment", cfg.experiment},
                 {"sweep_parameter", cfg.sweep.parameter},
                 {"metric", metric},
                 {"steps", fmt::format("{}", steps.size())},
                 {"seed", fmt::format("{}", cfg.seed)},
                 {"metric_min", num(*std::min_element(values.begin(), values.end()))},
                 {"metric_max", num(*std::max_element(values.begin(), values.end()))}};
  write_file(dir / "summary.txt", format_summary(out.summary));
  return out;
}

} // namespace

std::vector<RunDescriptor> sweep_points(const ExperimentConfig &cfg) {
  if (cfg.sweep.parameter.empty()) throw ConfigError("no sweep configured (sweep.parameter is empty)");
  validate(cfg);
  const SweepBlock &sw = cfg.sweep;
  const bool integral = std::holds_alternative<CountRef>(find_field(sw.parameter)->ref);
  std::vector<RunDescriptor> out;
  out.reserve(sw.steps);
  for (std::uint64_t i = 0; i < sw.steps; ++i) {
    double v = sw.steps == 1 ? sw.from : sw.from + (sw.to - sw.from) * static_cast<double>(i) / static_cast<double>(sw.steps - 1);
    if (i + 1 == sw.steps) v = sw.to;
    if (integral) v = std::round(v);
    RunDescriptor d;
    d.index = i;
    d.value = v;
    d.config = cfg;
    d.config.sweep = {};
    d.config.workers = 1;
    d.config.seed = derive_seed(cfg.seed, i);
    set_value(d.config, sw.parameter, fmt::format("{}", v));
    out.push_back(std::move(d));
  }
  return out;
}

double metric_value(const ExperimentConfig &cfg, std::string_view metric) {
  if (metric == "V") return scan_for(cfg).visibility;
  const SessionRun run = run_session_for(cfg);
  if (metric == "qber") return protocol::qber(run.stats).value;
  if (metric == "sift_rate") return run.stats.sift_rate;
  if (metric == "alarm_rate") return alarm_rate(run.stats, run.records);
  throw ConfigError(fmt::format("unknown metric '{}'", metric));
}

RunOutcome run_experiment(const ExperimentConfig &cfg) {
  validate(cfg);
  const std::filesystem::path dir(cfg.output);
  std::filesystem::create_directories(dir);
  write_file(dir / "effective_config.yaml", dump_config(cfg));
  try {
    if (!cfg.sweep.parameter.empty()) return run_sweep(cfg, dir);
    if (cfg.experiment == "visibility" || cfg.experiment == "baseline-mz") return run_visibility(cfg, dir);
    return run_session_experiment(cfg, dir);
  } catch (const ConfigError &) {
    throw;
  } catch (const std::exception &e) {
    throw std::runtime_error(fmt::format("{} experiment failed: {}", cfg.experiment, e.what()));
  }
}

std::string format_summary(const Summary &summary) {
  std::string out;
  for (const auto &[k, v] : summary) out += fmt::format("{}={}\n", k, v);
  return out;
}

} // namespace pnp::harness
