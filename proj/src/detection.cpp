#include "pnp/detection.hpp"

#include <cmath>

#include <fmt/format.h>

#include "pnp/errors.hpp"

namespace pnp::detection {

void DetectorSpec::validate() const {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError(fmt::format("detector eta {} outside [0, 1]", eta));
  if (!(dark >= 0.0 && dark < 1.0)) throw ConfigError(fmt::format("detector dark {} outside [0, 1)", dark));
  if (!(gate_ns > 0.0)) throw ConfigError(fmt::format("detector gate_ns {} must be positive", gate_ns));
  if (!(dead_time_ns >= 0.0)) throw ConfigError(fmt::format("detector dead_time_ns {} is negative", dead_time_ns));
}

void MonitorSpec::validate() const {
  if (!(alarm_ratio > 1.0)) throw ConfigError(fmt::format("monitor alarm_ratio {} must exceed 1", alarm_ratio));
  if (!(expected_intensity >= 0.0)) throw ConfigError("monitor expected_intensity is negative");
}

Attenuation required_attenuation(double incoming_intensity, WeakPulseLevel target, double photons_per_unit) {
  if (!(incoming_intensity > 0.0)) {
    throw DomainError(fmt::format("incoming intensity {} must be positive", incoming_intensity));
  }
  if (!(photons_per_unit > 0.0)) throw DomainError(fmt::format("calibration {} must be positive", photons_per_unit));
  if (!(target.mu >= 0.0)) throw DomainError(fmt::format("target mu {} is negative", target.mu));
  const double photons = incoming_intensity * photons_per_unit;
  if (photons <= target.mu) return {1.0, photons < target.mu};
  return {std::sqrt(target.mu / photons), false};
}

double click_probability(double mu, const DetectorSpec &det) {
  if (!(mu >= 0.0)) throw DomainError(fmt::format("mean photon number {} is negative", mu));
  // -expm1 keeps precision for eta * mu << 1.
  const double no_photon_click = -std::expm1(-det.eta * mu);
  return no_photon_click + det.dark * (1.0 - no_photon_click);
}

bool sample_click(double p, RngStream &rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError(fmt::format("probability {} outside [0, 1]", p));
  return rng.uniform() < p;
}

MonitorStatus monitor_check(double measured_intensity, const MonitorSpec &spec) {
  if (!(measured_intensity >= 0.0)) throw DomainError("measured intensity is negative");
  return measured_intensity > spec.expected_intensity * spec.alarm_ratio ? MonitorStatus::alarm : MonitorStatus::ok;
}

} // namespace pnp::detection
