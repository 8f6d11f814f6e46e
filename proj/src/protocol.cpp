#include "pnp/protocol.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <ostream>
#include <thread>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "pnp/errors.hpp"

namespace pnp::protocol {

namespace {

template <class... Ts> struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts> overloaded(Ts...) -> overloaded<Ts...>;

constexpr double kPi = std::numbers::pi;
constexpr std::array<double, 4> kQuarter = {0.0, kPi / 2.0, kPi, 1.5 * kPi};
constexpr std::array<double, 2> kTwoState = {0.0, kPi};
constexpr std::array<double, 4> kBb84Alice = kQuarter;
constexpr std::array<double, 2> kBb84Bob = {0.0, kPi / 2.0};

/// Phases are multiples of pi/2; work with the quarter-turn index.
int quarter_index(double phase) {
  const long k = std::lround(phase / (kPi / 2.0));
  return static_cast<int>(((k % 4) + 4) % 4);
}

double quarter(int k) { return kQuarter[static_cast<std::size_t>(((k % 4) + 4) % 4)]; }

bool in_set(double phase, std::span<const double> allowed) {
  return std::any_of(allowed.begin(), allowed.end(), [&](double a) { return std::abs(phase - a) < 1e-12; });
}

double poisson_click(double mu) { return -std::expm1(-mu); }

} // namespace

std::string_view to_string(Protocol p) { return p == Protocol::two_state ? "two-state" : "bb84"; }

std::span<const double> alice_phases(Protocol p) {
  return p == Protocol::two_state ? std::span<const double>(kTwoState) : std::span<const double>(kBb84Alice);
}

std::span<const double> bob_phases(Protocol p) {
  return p == Protocol::two_state ? std::span<const double>(kTwoState) : std::span<const double>(kBb84Bob);
}

void validate(const EveStrategy &eve) {
  std::visit(overloaded{
                 [](const BeamSplit &b) {
                   if (!(b.fraction > 0.0 && b.fraction < 1.0)) {
                     throw ConfigError(fmt::format("beam-split fraction {} outside (0, 1)", b.fraction));
                   }
                 },
                 [](const InterceptResend &) {},
                 [](const SuppressInconclusive &) {},
                 [](const StrongProbe &s) {
                   if (!(s.multiplier > 1.0)) throw ConfigError(fmt::format("probe multiplier {} must exceed 1", s.multiplier));
                   if (!(s.probe_fraction >= 0.0 && s.probe_fraction <= 1.0)) {
                     throw ConfigError(fmt::format("probe fraction {} outside [0, 1]", s.probe_fraction));
                   }
                 },
                 [](const BlockSlots &b) {
                   if (!(b.rate >= 0.0 && b.rate <= 1.0)) throw ConfigError(fmt::format("block rate {} outside [0, 1]", b.rate));
                 },
             },
             eve);
}

// ---- OpticsModel ----------------------------------------------------------

OpticsModel::OpticsModel(interferometer::PlugAndPlayParams params, interferometer::TraceConfig trace_cfg,
                         detection::WeakPulseLevel mu, double laser_photons)
    : params_(std::move(params)), trace_cfg_(trace_cfg) {
  // Alice's attenuation is applied through the photon calibration below.
  params_.alice_attenuation = 1.0;
  params_.eve = {};
  timing_ = interferometer::plug_and_play_timing(params_);

  if (!(params_.t3 > 0.0 && params_.t3 < 1.0)) {
    throw ConfigError(fmt::format("t3 = {} leaves Alice without a monitor or a return path", params_.t3));
  }
  const Readout nominal = readout(0.0, 0.0);
  if (!(nominal.monitor_p2 > 0.0)) throw ConfigError("no light reaches Alice's monitor in the delayed-pulse slot");
  if (!(nominal.signal > 0.0)) {
    throw ConfigError("no light in the signal bin at D0; raise trace.amplitude_cutoff precision or check couplers");
  }

  // Alice knows her own coupler: the pulse she returns is r3^4 / t3^2 times what D_A sees.
  const double r3 = optics::Coupler{params_.t3}.r();
  const double outgoing = nominal.monitor_p2 * std::pow(r3, 4) / (params_.t3 * params_.t3);
  const detection::Attenuation att = detection::required_attenuation(outgoing, mu, laser_photons);

  calibration_.attenuation = att.factor;
  calibration_.clamped = att.clamped;
  calibration_.photons_per_unit = att.factor * att.factor * laser_photons;
  calibration_.mu_weak = calibration_.photons_per_unit * outgoing;
  calibration_.mu_signal_max = calibration_.photons_per_unit * nominal.signal;
  calibration_.mu_reference = calibration_.photons_per_unit * nominal.reference;
  calibration_.monitor_expected = nominal.monitor_p2;
}

interferometer::InterferometerSpec OpticsModel::spec_for(double phi_a, double phi_b, TapSetting tap) const {
  interferometer::PlugAndPlayParams p = params_;
  p.phi_a = phi_a;
  p.phi_b = phi_b;
  switch (tap.mode) {
  case TapMode::pass:
    break;
  case TapMode::attenuate:
    p.eve.backward_amplitude = tap.amplitude;
    break;
  case TapMode::block_weak: {
    const double half = p.delay_line_ns / 2.0;
    p.eve.backward_windows.push_back({timing_.p2_return_at_eve - half, timing_.p2_return_at_eve + half, 0.0});
    break;
  }
  case TapMode::block_all:
    p.eve.backward_amplitude = 0.0;
    break;
  }
  return interferometer::build_plug_and_play(p);
}

Readout OpticsModel::compute(double phi_a, double phi_b, TapSetting tap) const {
  const auto spec = spec_for(phi_a, phi_b, tap);
  const auto segments = interferometer::trace(spec, trace_cfg_);
  const auto bins = interferometer::bin_and_interfere(segments, spec, trace_cfg_.bin_width_ns, trace_cfg_.pulse_rms_ns);
  const double tol = trace_cfg_.bin_width_ns;
  const int d0 = spec.node_index("D0");
  const int da = spec.node_index("D_A");
  return Readout{interferometer::bin_intensity(bins, d0, spec.marker("signal"), tol),
                 interferometer::bin_intensity(bins, d0, spec.marker("reference"), tol),
                 interferometer::bin_intensity(bins, da, spec.marker("monitor_p2"), tol)};
}

Readout OpticsModel::readout(double phi_a, double phi_b, TapSetting tap) const {
  if (tap.mode != TapMode::attenuate) tap.amplitude = 1.0;
  const auto key = std::make_tuple(phi_a, phi_b, tap);
  std::lock_guard lock(mutex_);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  const Readout r = compute(phi_a, phi_b, tap);
  cache_.emplace(key, r);
  return r;
}

// ---- Eve ------------------------------------------------------------------

EveAction apply_eve(const EveStrategy &strategy, const InFlightPulse &pulse, RngStream &rng) {
  EveAction act;
  const int k_alice = quarter_index(pulse.phi_a);
  std::visit(
      overloaded{
          [&](const BeamSplit &b) {
            act.tap = {TapMode::attenuate, std::sqrt(1.0 - b.fraction)};
            act.eve_click = detection::sample_click(poisson_click(b.fraction * pulse.mu_weak), rng);
            act.eve_knows = act.eve_click;
          },
          [&](const InterceptResend &ir) {
            int k_eve = 0;
            switch (ir.policy) {
            case BasisPolicy::random: k_eve = static_cast<int>(rng.below(2)); break;
            case BasisPolicy::fixed_0: k_eve = 0; break;
            case BasisPolicy::fixed_90: k_eve = 1; break;
            }
            const double half = 0.5 * (pulse.phi_a - quarter(k_eve));
            const bool c0 = detection::sample_click(poisson_click(pulse.mu_weak * std::cos(half) * std::cos(half)), rng);
            const bool c1 = detection::sample_click(poisson_click(pulse.mu_weak * std::sin(half) * std::sin(half)), rng);
            if (!c0 && !c1) {
              act.tap = {TapMode::block_all, 0.0};
              return;
            }
            const int bit = (c0 && c1) ? static_cast<int>(rng.below(2)) : (c1 ? 1 : 0);
            act.resend_phase = quarter(k_eve + 2 * bit);
            act.eve_click = true;
            act.eve_knows = (k_alice % 2) == k_eve;
          },
          [&](const SuppressInconclusive &) {
            const auto candidates = alice_phases(pulse.protocol);
            const double guess = candidates[rng.below(candidates.size())];
            const double half = 0.5 * (pulse.phi_a - guess);
            act.eve_click = detection::sample_click(poisson_click(pulse.mu_weak * std::cos(half) * std::cos(half)), rng);
            if (act.eve_click) {
              act.eve_knows = quarter_index(guess) == k_alice;
            } else {
              act.tap = {TapMode::block_weak, 0.0};
            }
          },
          [&](const StrongProbe &s) {
            if (rng.uniform() < s.probe_fraction) {
              act.monitor_multiplier = s.multiplier;
              act.eve_knows = true;
            }
          },
          [&](const BlockSlots &b) {
            if (rng.uniform() < b.rate) act.tap = {TapMode::block_all, 0.0};
          },
      },
      strategy);
  return act;
}

// ---- Sessions -------------------------------------------------------------

void SessionConfig::validate() const {
  if (n_slots < 1) throw ConfigError("n_slots must be at least 1");
  if (!(mu.mu >= 0.0)) throw ConfigError(fmt::format("mu {} is negative", mu.mu));
  detector.validate();
  if (!(monitor.alarm_ratio > 1.0)) throw ConfigError(fmt::format("monitor alarm_ratio {} must exceed 1", monitor.alarm_ratio));
  if (!(reference_fraction > 0.0 && reference_fraction <= 1.0)) {
    throw ConfigError(fmt::format("reference_fraction {} outside (0, 1]", reference_fraction));
  }
  if (!(repetition_period_ns > 0.0)) throw ConfigError("repetition_period_ns must be positive");
  if (workers < 1) throw ConfigError("workers must be at least 1");
  if (eve) protocol::validate(*eve);
}

namespace {

RawSlotRecord simulate_slot(const SessionConfig &cfg, const OpticsModel &optics, std::uint64_t slot) {
  const Calibration &cal = optics.calibration();
  RngStream rng(cfg.seed, slot);
  const auto a_set = alice_phases(cfg.protocol);
  const auto b_set = bob_phases(cfg.protocol);

  RawSlotRecord rec;
  rec.slot = slot;
  rec.phi_a = a_set[rng.below(a_set.size())];
  rec.phi_b = b_set[rng.below(b_set.size())];

  EveAction act;
  if (cfg.eve) act = apply_eve(*cfg.eve, InFlightPulse{cfg.protocol, rec.phi_a, cal.mu_weak}, rng);
  rec.eve_click = act.eve_click;
  rec.eve_knows = act.eve_knows;

  const double sent = act.resend_phase.value_or(rec.phi_a);
  const Readout r = optics.readout(sent, rec.phi_b, act.tap);
  rec.click_d0 = detection::sample_click(detection::click_probability(cal.photons_per_unit * r.signal, cfg.detector), rng);
  if (cfg.protocol == Protocol::bb84) {
    // Complementary output: the D0 fringe with Bob's phase advanced by pi.
    const Readout c = optics.readout(sent, quarter(quarter_index(rec.phi_b) + 2), act.tap);
    rec.click_d1 = detection::sample_click(detection::click_probability(cal.photons_per_unit * c.signal, cfg.detector), rng);
  }
  rec.reference_seen = cal.photons_per_unit * r.reference >= cfg.reference_fraction * cal.mu_reference;

  detection::MonitorSpec monitor = cfg.monitor;
  monitor.expected_intensity = cal.monitor_expected;
  rec.monitor_alarm =
      detection::monitor_check(r.monitor_p2 * act.monitor_multiplier, monitor) == detection::MonitorStatus::alarm;
  return rec;
}

void apply_dead_time(std::vector<RawSlotRecord> &records, const SessionConfig &cfg) {
  if (cfg.detector.dead_time_ns <= 0.0) return;
  double ready_d0 = -1.0;
  double ready_d1 = -1.0;
  for (RawSlotRecord &rec : records) {
    const double t = static_cast<double>(rec.slot) * cfg.repetition_period_ns;
    if (rec.click_d0) {
      if (t < ready_d0) rec.click_d0 = false;
      else ready_d0 = t + cfg.detector.dead_time_ns;
    }
    if (rec.click_d1) {
      if (t < ready_d1) rec.click_d1 = false;
      else ready_d1 = t + cfg.detector.dead_time_ns;
    }
  }
}

} // namespace

std::vector<RawSlotRecord> run_session(const SessionConfig &cfg, const OpticsModel &optics) {
  cfg.validate();
  std::vector<RawSlotRecord> records(cfg.n_slots);
  const std::uint64_t workers = std::min<std::uint64_t>(cfg.workers, cfg.n_slots);
  const std::uint64_t chunk = (cfg.n_slots + workers - 1) / workers;

  auto run_range = [&](std::uint64_t begin, std::uint64_t end) {
    for (std::uint64_t s = begin; s < end; ++s) records[s] = simulate_slot(cfg, optics, s);
  };
  if (workers == 1) {
    run_range(0, cfg.n_slots);
  } else {
    std::vector<std::jthread> pool;
    std::vector<std::exception_ptr> failures(workers);
    for (std::uint64_t w = 0; w < workers; ++w) {
      const std::uint64_t begin = w * chunk;
      const std::uint64_t end = std::min(cfg.n_slots, begin + chunk);
      pool.emplace_back([&, w, begin, end] {
        try {
          run_range(begin, end);
        } catch (...) {
          failures[w] = std::current_exception();
        }
      });
    }
    pool.clear();
    for (const auto &f : failures) {
      if (f) std::rethrow_exception(f);
    }
  }
  apply_dead_time(records, cfg);
  return records;
}

// ---- Sifting --------------------------------------------------------------

namespace {

void count_common(SessionStats &stats, std::span<const RawSlotRecord> records) {
  stats.n_slots = records.size();
  for (const RawSlotRecord &r : records) {
    stats.reference_missing_count += r.reference_seen ? 0 : 1;
    stats.monitor_alarm_count += r.monitor_alarm ? 1 : 0;
  }
}

void finish(SessionStats &stats) {
  for (std::size_t i = 0; i < stats.alice_key.size(); ++i) stats.errors += stats.alice_key[i] != stats.bob_key[i];
  stats.sift_rate = stats.n_slots ? static_cast<double>(stats.sifted()) / static_cast<double>(stats.n_slots) : 0.0;
  stats.qber = stats.sifted() ? static_cast<double>(stats.errors) / static_cast<double>(stats.sifted()) : 0.0;
}

} // namespace

SessionStats sift_two_state(std::span<const RawSlotRecord> records) {
  SessionStats stats;
  count_common(stats, records);
  for (const RawSlotRecord &r : records) {
    if (!in_set(r.phi_a, kTwoState) || !in_set(r.phi_b, kTwoState)) {
      throw ProtocolError(fmt::format("slot {} has phases ({}, {}) outside the two-state set {{0, pi}}", r.slot, r.phi_a, r.phi_b));
    }
    if (!r.click_d0) continue;
    stats.alice_key.push_back(r.phi_a > 1.0 ? 1 : 0);
    stats.bob_key.push_back(r.phi_b > 1.0 ? 1 : 0);
    stats.eve_information += r.eve_knows ? 1 : 0;
  }
  finish(stats);
  return stats;
}

SessionStats sift_bb84(std::span<const RawSlotRecord> records) {
  SessionStats stats;
  count_common(stats, records);
  for (const RawSlotRecord &r : records) {
    if (!in_set(r.phi_a, kBb84Alice) || !in_set(r.phi_b, kBb84Bob)) {
      throw ProtocolError(fmt::format("slot {} has phases ({}, {}) outside the BB84 sets", r.slot, r.phi_a, r.phi_b));
    }
    if (quarter_index(r.phi_a) % 2 != quarter_index(r.phi_b)) continue;
    if (r.click_d0 && r.click_d1) {
      ++stats.double_clicks;
      continue;
    }
    if (!r.click_d0 && !r.click_d1) continue;
    stats.alice_key.push_back(quarter_index(r.phi_a) >= 2 ? 1 : 0);
    stats.bob_key.push_back(r.click_d1 ? 1 : 0);
    stats.eve_information += r.eve_knows ? 1 : 0;
  }
  finish(stats);
  return stats;
}

SessionStats sift(Protocol p, std::span<const RawSlotRecord> records) {
  return p == Protocol::two_state ? sift_two_state(records) : sift_bb84(records);
}

ReferenceCheck reference_pulse_check(std::span<const RawSlotRecord> records) {
  ReferenceCheck check;
  for (const RawSlotRecord &r : records) check.missing_count += r.reference_seen ? 0 : 1;
  check.alarm = check.missing_count > 0;
  return check;
}

QberEstimate qber(const SessionStats &stats) {
  const auto n = static_cast<double>(stats.sifted());
  if (n == 0.0) throw EmptyKeyError("no sifted bits; QBER is undefined");
  const double p = static_cast<double>(stats.errors) / n;
  constexpr double z = 1.959963984540054;
  const double denom = 1.0 + z * z / n;
  const double centre = (p + z * z / (2.0 * n)) / denom;
  const double half = z / denom * std::sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n));
  return {p, std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

double intrinsic_qber(double visibility) { return 0.5 * (1.0 - visibility); }

void write_records_csv(std::ostream &out, std::span<const RawSlotRecord> records) {
  out << "slot,phi_a,phi_b,click_d0,click_d1,reference_seen,monitor_alarm\n";
  for (const RawSlotRecord &r : records) {
    fmt::print(out, "{},{:.17g},{:.17g},{:d},{:d},{:d},{:d}\n", r.slot, r.phi_a, r.phi_b, r.click_d0, r.click_d1,
               r.reference_seen, r.monitor_alarm);
  }
}

} // namespace pnp::protocol
