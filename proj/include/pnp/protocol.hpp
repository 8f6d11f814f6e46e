#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string_view>
#include <tuple>
#include <variant>
#include <vector>

#include "pnp/detection.hpp"
#include "pnp/interferometer.hpp"

namespace pnp::protocol {

enum class Protocol { two_state, bb84 };

std::string_view to_string(Protocol p);

/// Alice's allowed total phases.
std::span<const double> alice_phases(Protocol p);
/// Bob's allowed total phases.
std::span<const double> bob_phases(Protocol p);

// ---- Adversaries ----------------------------------------------------------

enum class BasisPolicy { random, fixed_0, fixed_90 };

/// Extra coupler on the line diverting `fraction` of the returning intensity.
struct BeamSplit {
  double fraction = 0.5;
};

/// Measure every returning pulse pair with an ideal two-output receiver and
/// resend a fresh pair carrying the result; slots without a result are blocked.
struct InterceptResend {
  BasisPolicy policy = BasisPolicy::random;
};

/// Unambiguous measurement of the weak pulse; inconclusive weak pulses are
/// blocked while the strong reference, which cannot be removed unnoticed, passes.
struct SuppressInconclusive {};

/// Bright probe pulses toward Alice to read her modulator setting.
struct StrongProbe {
  double multiplier = 5.0;
  double probe_fraction = 1.0;
};

/// Block everything returning to Bob on a random fraction of slots.
struct BlockSlots {
  double rate = 0.1;
};

using EveStrategy = std::variant<BeamSplit, InterceptResend, SuppressInconclusive, StrongProbe, BlockSlots>;

void validate(const EveStrategy &eve);

// ---- Optics readout -------------------------------------------------------

/// What the line tap does to light returning toward Bob.
enum class TapMode { pass, attenuate, block_weak, block_all };

struct TapSetting {
  TapMode mode = TapMode::pass;
  double amplitude = 1.0; ///< used by TapMode::attenuate
  auto operator<=>(const TapSetting &) const = default;
};

/// Traced intensities (launch-normalized, before Alice's attenuation) for one slot setting.
struct Readout {
  double signal = 0.0;     ///< D0, interfering middle bin
  double reference = 0.0;  ///< D0, first pulse direct both ways
  double monitor_p2 = 0.0; ///< D_A, delayed pulse arriving at Alice
};

struct Calibration {
  double attenuation = 1.0;   ///< Alice's amplitude factor
  bool clamped = false;
  double photons_per_unit = 0.0; ///< mean photons per unit traced intensity after attenuation
  double mu_weak = 0.0;       ///< signal pulse leaving Alice, as Alice estimates it
  double mu_signal_max = 0.0; ///< D0 middle bin at phi_a = phi_b
  double mu_reference = 0.0;  ///< D0 reference bin
  double monitor_expected = 0.0;
};

/// Plug-and-play optics for a session: traces each distinct (phase pair, tap)
/// once and caches the result. Thread-safe.
class OpticsModel {
public:
  OpticsModel(interferometer::PlugAndPlayParams params, interferometer::TraceConfig trace_cfg, detection::WeakPulseLevel mu,
              double laser_photons);

  Readout readout(double phi_a, double phi_b, TapSetting tap = {}) const;
  const Calibration &calibration() const { return calibration_; }
  const interferometer::PlugAndPlayParams &params() const { return params_; }

  interferometer::InterferometerSpec spec_for(double phi_a, double phi_b, TapSetting tap) const;

private:
  Readout compute(double phi_a, double phi_b, TapSetting tap) const;

  interferometer::PlugAndPlayParams params_;
  interferometer::TraceConfig trace_cfg_;
  interferometer::PlugAndPlayTiming timing_;
  Calibration calibration_;
  mutable std::mutex mutex_;
  mutable std::map<std::tuple<double, double, TapSetting>, Readout> cache_;
};

// ---- Sessions -------------------------------------------------------------

struct SessionConfig {
  Protocol protocol = Protocol::two_state;
  std::uint64_t n_slots = 100'000;
  detection::WeakPulseLevel mu;
  detection::DetectorSpec detector;
  detection::MonitorSpec monitor; ///< expected_intensity is taken from the optics
  double reference_fraction = 0.5;  ///< reference bin must reach this fraction of nominal
  double repetition_period_ns = 1e6;
  std::uint64_t seed = 1;
  std::optional<EveStrategy> eve;
  unsigned workers = 1;

  void validate() const;
};

struct RawSlotRecord {
  std::uint64_t slot = 0;
  double phi_a = 0.0;
  double phi_b = 0.0;
  bool click_d0 = false;
  bool click_d1 = false;
  bool reference_seen = true;
  bool monitor_alarm = false;
  bool eve_click = false;
  bool eve_knows = false; ///< Eve learned Alice's setting in this slot

  bool operator==(const RawSlotRecord &) const = default;
};

/// Pulse returning from Alice as the adversary sees it.
struct InFlightPulse {
  Protocol protocol = Protocol::two_state;
  double phi_a = 0.0;
  double mu_weak = 0.0;
};

struct EveAction {
  TapSetting tap;
  std::optional<double> resend_phase; ///< Bob receives a pair carrying this phase instead
  double monitor_multiplier = 1.0;
  bool eve_click = false;
  bool eve_knows = false;
};

/// Decide what the adversary does to one slot's returning pulses.
EveAction apply_eve(const EveStrategy &strategy, const InFlightPulse &pulse, RngStream &rng);

/// Simulate `cfg.n_slots` slots. Slot k draws only from RngStream(seed, k), so
/// the records do not depend on the worker count.
std::vector<RawSlotRecord> run_session(const SessionConfig &cfg, const OpticsModel &optics);

struct SessionStats {
  std::vector<std::uint8_t> alice_key;
  std::vector<std::uint8_t> bob_key;
  std::uint64_t n_slots = 0;
  std::uint64_t errors = 0;
  double sift_rate = 0.0;
  double qber = 0.0; ///< 0 when nothing was sifted
  std::uint64_t reference_missing_count = 0;
  std::uint64_t monitor_alarm_count = 0;
  std::uint64_t double_clicks = 0;
  std::uint64_t eve_information = 0; ///< sifted bits Eve learned

  std::size_t sifted() const { return alice_key.size(); }
};

/// Keep slots where D0 clicked; each party's bit is its own phase (0 -> 0, pi -> 1).
SessionStats sift_two_state(std::span<const RawSlotRecord> records);

/// Keep basis-matched slots with exactly one click; D0 means bit 0, D1 bit 1.
SessionStats sift_bb84(std::span<const RawSlotRecord> records);

SessionStats sift(Protocol p, std::span<const RawSlotRecord> records);

struct ReferenceCheck {
  std::uint64_t missing_count = 0;
  bool alarm = false;
};

ReferenceCheck reference_pulse_check(std::span<const RawSlotRecord> records);

struct QberEstimate {
  double value = 0.0;
  double wilson_low = 0.0; ///< 95% Wilson score interval
  double wilson_high = 0.0;
};

/// Throws EmptyKeyError when nothing was sifted.
QberEstimate qber(const SessionStats &stats);

/// Error rate of an interferometer with fringe visibility V: (1 - V) / 2.
double intrinsic_qber(double visibility);

/// Header: slot,phi_a,phi_b,click_d0,click_d1,reference_seen,monitor_alarm
void write_records_csv(std::ostream &out, std::span<const RawSlotRecord> records);

} // namespace pnp::protocol
