#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "pnp/jones.hpp"

namespace pnp::interferometer {

using optics::Complex;
using optics::JonesMatrix;
using optics::JonesVector;

/// Pulsed laser. Launches from its single port and absorbs returning light.
struct Source {};
struct Detector {};
/// Absorbing termination for unused ports.
struct Dump {};

struct InterceptWindow {
  double start_ns = 0.0;
  double end_ns = 0.0;
  double amplitude = 1.0;
};

/// In-line adversary device (two ports; port 0 faces Bob, port 1 faces Alice).
/// Light travelling Alice -> Bob is multiplied by the amplitude of the window
/// containing its arrival time, or by `backward_amplitude` outside all windows.
/// Bob -> Alice light passes untouched.
struct Intercept {
  double backward_amplitude = 1.0;
  std::vector<InterceptWindow> backward_windows;
};

using Element = std::variant<optics::Coupler, optics::Mirror, optics::FaradayRotator, optics::FaradayMirror,
                             optics::PhaseModulator, optics::FiberSegment, optics::Attenuator, Source, Detector,
                             Dump, Intercept>;

int port_count(const Element &e);

struct Node {
  std::string id;
  Element element;
};

struct PortRef {
  int node = -1;
  int port = 0;
  bool operator==(const PortRef &) const = default;
};

/// Bidirectional fiber connection between two ports.
struct Link {
  PortRef a;
  PortRef b;
  double delay_ns = 0.0;
  double loss = 1.0; ///< amplitude transmission factor in (0, 1]
};

struct Launch {
  int node = -1; ///< Source node
  double time_ns = 0.0;
  JonesVector polarization{1.0, 0.0};
};

/// Directed port graph of optical components.
struct InterferometerSpec {
  std::vector<Node> nodes;
  std::vector<Link> links;
  std::vector<Launch> sources;
  std::vector<int> detectors;            ///< indices of Detector nodes
  std::map<std::string, double> markers; ///< nominal arrival times of named pulses, ns

  int add(std::string id, Element element);
  void connect(PortRef a, PortRef b, double delay_ns = 0.0, double loss = 1.0);

  int node_index(std::string_view id) const; ///< throws ConfigError if absent
  const Node &node(std::string_view id) const { return nodes[static_cast<std::size_t>(node_index(id))]; }
  Node &node(std::string_view id) { return nodes[static_cast<std::size_t>(node_index(id))]; }
  double marker(std::string_view name) const;

  /// Largest single-element delay in the network.
  double max_delay_ns() const;

  /// Throws ConfigError describing the first violated well-formedness rule.
  void validate() const;
};

// ---- Builders -------------------------------------------------------------

struct PmImperfection {
  double delta = 0.2;
  double gamma = 0.98;
};

/// Parameters of the auto-compensating two-way interferometer.
///
/// Bob's laser enters C1 by its cross port; C2 splits into the direct path to
/// the line and the M2-M1 delay line (Faraday mirrors at both ends, Bob's
/// modulator in front of M1). Alice's station is C3 (through port to her
/// monitor detector D_A), an attenuator, her modulator and Faraday mirror M3.
struct PlugAndPlayParams {
  double t1 = 0.9;
  double t2 = 0.9;
  double t3 = 0.95;
  double delay_line_ns = 250.0;
  double line_delay_ns = 23.0 / 2.04e5 * 1e9;
  double line_loss_db = 0.0;
  double bob_link_ns = 1.0;
  double alice_arm_ns = 1.0;

  JonesMatrix line_birefringence;
  JonesMatrix delay_m1_birefringence;
  JonesMatrix delay_m2_birefringence;
  JonesMatrix alice_arm_birefringence;
  JonesMatrix bob_link_birefringence;

  double fr_angle_error = 0.0; ///< radians, applied to every Faraday rotator
  PmImperfection alice_pm;
  PmImperfection bob_pm;

  /// Total phases written onto the signal by the double pass of each modulator.
  double phi_a = 0.0;
  double phi_b = 0.0;

  double alice_attenuation = 1.0; ///< round-trip amplitude factor of Alice's attenuator
  Intercept eve;
  JonesVector input_polarization{1.0, 0.0};

  /// Identity birefringence, ideal rotators and polarization-independent modulators.
  static PlugAndPlayParams ideal();
};

/// Nominal arrival times (ns), shared by the builder and the protocol layer.
struct PlugAndPlayTiming {
  double p1_at_alice_pm;   ///< first pulse entering Alice's modulator
  double p2_at_alice_pm;   ///< delayed pulse entering Alice's modulator
  double p1_return_at_eve; ///< first pulse passing the line tap on its way back
  double p2_return_at_eve;
  double bob_pm_signal;    ///< returning first pulse entering Bob's modulator
  double d0_reference;     ///< first pulse, direct both ways
  double d0_signal;        ///< the interfering middle bin
  double da_p1;
  double da_p2;
};

PlugAndPlayTiming plug_and_play_timing(const PlugAndPlayParams &p);

/// Marker names: "reference", "signal", "monitor_p1", "monitor_p2".
InterferometerSpec build_plug_and_play(const PlugAndPlayParams &p);

/// Unbalanced Mach-Zehnder pair (Alice then Bob) joined by a line.
struct DoubleMzParams {
  double alice_split_t = 0.5 * std::numbers::sqrt2;
  double alice_combine_t = 0.5 * std::numbers::sqrt2;
  double bob_split_t = 0.5 * std::numbers::sqrt2;
  double bob_combine_t = 0.5 * std::numbers::sqrt2;
  double long_arm_ns = 5.0;
  double delta_l_nm = 0.0; ///< extra length of Bob's long arm
  double wavelength_nm = 1300.0;
  double group_velocity_km_s = 2.04e5;
  double line_delay_ns = 1000.0;
  double line_loss_db = 0.0;
  JonesMatrix line_birefringence;
  JonesMatrix bob_long_arm_birefringence;
  PmImperfection alice_pm{0.0, 1.0};
  PmImperfection bob_pm{0.0, 1.0};
  double phi_a = 0.0;
  double phi_b = 0.0;
  JonesVector input_polarization{1.0, 0.0};

  /// Arrival-time offset of the mismatched long arm, ns.
  double mismatch_delay_ns() const;
};

/// Marker names: "ss", "signal", "ll". Detectors D0 and D1.
InterferometerSpec build_double_mz(const DoubleMzParams &p);

// ---- Tracing --------------------------------------------------------------

struct TraceConfig {
  double amplitude_cutoff = 1e-4; ///< fraction of launch amplitude
  double time_horizon_ns = 0.0;   ///< 0 selects 3x the largest network delay
  double bin_width_ns = 2.0;
  double pulse_rms_ns = 0.3 / 2.3548200450309493; ///< 300 ps FWHM Gaussian
  std::size_t max_events = 4'000'000;

  void validate(const InterferometerSpec &spec) const;
  double horizon_for(const InterferometerSpec &spec) const;
};

struct PulseSegment {
  int port = -1; ///< detector node index
  double arrival_ns = 0.0;
  Complex amplitude{1.0};
  JonesVector polarization;
  std::vector<int> path;                ///< node indices from the source
  std::vector<Complex> coupler_factors; ///< t or i r per coupler traversal, in order
  int generation = 0;                   ///< coupler traversals

  JonesVector field() const { return polarization * amplitude; }
  double intensity() const { return field().norm2(); }
  bool operator==(const PulseSegment &) const = default;
};

/// Expand every launch through the network until it reaches a detector, is
/// absorbed, falls below the amplitude cutoff, or passes the time horizon.
/// Output is ordered by (detector, arrival time, discovery order).
std::vector<PulseSegment> trace(const InterferometerSpec &spec, const TraceConfig &cfg);

struct BinRecord {
  int port = -1;
  std::string port_name;
  double bin_ns = 0.0; ///< earliest arrival in the bin
  double intensity = 0.0;
  std::size_t n_segments = 0;
};

/// Coherent sum inside each (port, time bin), incoherent across bins. Bins are
/// opened at the earliest unassigned arrival and span `bin_width_ns`. Cross terms
/// between segments separated by dt carry the Gaussian envelope overlap
/// exp(-dt^2 / (8 sigma^2)).
std::vector<BinRecord> bin_and_interfere(const std::vector<PulseSegment> &segments, const InterferometerSpec &spec,
                                         double bin_width_ns, double pulse_rms_ns);

/// Intensity of the bin on `port` whose start lies within `tolerance_ns` of `time_ns` (0 if none).
double bin_intensity(const std::vector<BinRecord> &bins, int port, double time_ns, double tolerance_ns);

/// Intensity of the named detector at the named marker time, traced and binned.
double marker_intensity(const InterferometerSpec &spec, const TraceConfig &cfg, std::string_view detector,
                        std::string_view marker);

struct FringePoint {
  double phi_a = 0.0;
  double intensity = 0.0;
};

struct VisibilityResult {
  double visibility = 0.0;         ///< (Imax - Imin) / (Imax + Imin) of the fitted fringe
  double sampled_visibility = 0.0; ///< same ratio over the sampled points only
  double i_max = 0.0;
  double i_min = 0.0;
  std::vector<FringePoint> fringe;
};

/// Scan phi_a over n equally spaced points of [0, 2 pi), measuring the
/// `detector` intensity at `marker`. Two-beam interference is sinusoidal in
/// phi_a, so the first Fourier harmonic of the samples gives the exact fringe
/// extremes. Throws DomainError if n < 8, DegenerateError if no light arrives.
VisibilityResult visibility_scan(const std::function<InterferometerSpec(double phi_a)> &build,
                                 const TraceConfig &cfg, int n, std::string_view detector = "D0",
                                 std::string_view marker = "signal");

VisibilityResult visibility_scan(PlugAndPlayParams params, const TraceConfig &cfg, int n);
VisibilityResult visibility_scan(DoubleMzParams params, const TraceConfig &cfg, int n,
                                 std::string_view detector = "D0");

// ---- Tabular output -------------------------------------------------------

/// Header: port,bin_ns,intensity,n_segments
void write_bins_csv(std::ostream &out, const std::vector<BinRecord> &bins);
/// Header: phi_a,intensity
void write_fringe_csv(std::ostream &out, const VisibilityResult &result);

} // namespace pnp::interferometer
