#pragma once

#include "pnp/rng.hpp"

namespace pnp::detection {

/// Mean photon number per pulse.
struct WeakPulseLevel {
  double mu = 0.1;
};

/// Threshold single-photon detector.
struct DetectorSpec {
  double eta = 0.2;           ///< quantum efficiency in [0, 1]
  double dark = 1e-4;         ///< dark-count probability per gate in [0, 1)
  double gate_ns = 2.5;
  double dead_time_ns = 0.0;

  void validate() const;
};

struct MonitorSpec {
  double expected_intensity = 1.0;
  double alarm_ratio = 2.0; ///< must exceed 1

  void validate() const;
};

struct Attenuation {
  double factor = 1.0; ///< amplitude factor in (0, 1]
  bool clamped = false; ///< incoming light was already at or below the target
};

/// Amplitude factor a with incoming_intensity * a^2 * photons_per_unit = target.mu,
/// clamped to 1 when the light is already too weak. Throws DomainError for
/// non-positive intensity or calibration.
Attenuation required_attenuation(double incoming_intensity, WeakPulseLevel target, double photons_per_unit);

/// p = 1 - (1 - dark) exp(-eta mu) for Poissonian light of mean mu.
double click_probability(double mu, const DetectorSpec &det);

/// Bernoulli(p) draw.
bool sample_click(double p, RngStream &rng);

enum class MonitorStatus { ok, alarm };

/// Alarm iff measured > expected_intensity * alarm_ratio.
MonitorStatus monitor_check(double measured_intensity, const MonitorSpec &spec);

} // namespace pnp::detection
