#include "pnp/jones.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "pnp/errors.hpp"

namespace pnp::optics {

Complex inner(const JonesVector &a, const JonesVector &b) {
  return std::conj(a.h) * b.h + std::conj(a.v) * b.v;
}

Complex bilinear(const JonesVector &a, const JonesVector &b) { return a.h * b.h + a.v * b.v; }

JonesVector linear_polarization(double angle) { return {std::cos(angle), std::sin(angle)}; }

JonesMatrix JonesMatrix::operator*(const JonesMatrix &o) const {
  return {m[0] * o.m[0] + m[1] * o.m[2], m[0] * o.m[1] + m[1] * o.m[3],
          m[2] * o.m[0] + m[3] * o.m[2], m[2] * o.m[1] + m[3] * o.m[3]};
}

JonesVector JonesMatrix::operator*(const JonesVector &v) const {
  return {m[0] * v.h + m[1] * v.v, m[2] * v.h + m[3] * v.v};
}

JonesMatrix JonesMatrix::operator*(Complex s) const {
  return {m[0] * s, m[1] * s, m[2] * s, m[3] * s, label};
}

JonesMatrix JonesMatrix::operator-(const JonesMatrix &o) const {
  return {m[0] - o.m[0], m[1] - o.m[1], m[2] - o.m[2], m[3] - o.m[3]};
}

JonesMatrix JonesMatrix::transpose() const { return {m[0], m[2], m[1], m[3], label}; }

JonesMatrix JonesMatrix::adjoint() const {
  return {std::conj(m[0]), std::conj(m[2]), std::conj(m[1]), std::conj(m[3]), label};
}

Complex JonesMatrix::det() const { return m[0] * m[3] - m[1] * m[2]; }

double JonesMatrix::max_singular_value() const {
  // Largest eigenvalue of the Hermitian M^dagger M = [[a, b], [conj(b), d]].
  const JonesMatrix g = adjoint() * *this;
  const double a = g.m[0].real();
  const double d = g.m[3].real();
  const double half_gap = 0.5 * (a - d);
  const double lambda = 0.5 * (a + d) + std::sqrt(half_gap * half_gap + std::norm(g.m[1]));
  return std::sqrt(std::max(lambda, 0.0));
}

bool JonesMatrix::is_unitary(double tol) const {
  return max_abs_diff(adjoint() * *this, identity()) <= tol;
}

double max_abs_diff(const JonesMatrix &a, const JonesMatrix &b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < 4; ++i) worst = std::max(worst, std::abs(a.m[i] - b.m[i]));
  return worst;
}

JonesMatrix rotation(double theta) {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  return {c, -s, s, c};
}

double Coupler::r() const { return std::sqrt(std::max(0.0, 1.0 - t * t)); }

double FiberSegment::amplitude_factor() const {
  return std::pow(10.0, -loss_db_per_km * length_km / 20.0);
}

JonesMatrix coupler_scatter(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw DomainError(fmt::format("coupler transmission {} outside [0, 1]", t));
  }
  const Complex ir{0.0, Coupler{t}.r()};
  return {t, ir, ir, t, "coupler"};
}

JonesMatrix faraday_mirror_matrix() { return {0.0, -1.0, 1.0, 0.0, "faraday-mirror"}; }

JonesMatrix faraday_mirror_matrix(double rotator_angle) {
  if (rotator_angle == std::numbers::pi / 4.0) return faraday_mirror_matrix();
  JonesMatrix out = faraday_rotator_matrix(rotator_angle) * faraday_rotator_matrix(rotator_angle);
  out.label = "faraday-mirror";
  return out;
}

JonesMatrix faraday_rotator_matrix(double theta) {
  JonesMatrix out = rotation(theta);
  out.label = "faraday-rotator";
  return out;
}

JonesMatrix backward_matrix(const JonesMatrix &forward) { return forward.transpose(); }

JonesMatrix roundtrip_operator(const JonesMatrix &forward) {
  return backward_matrix(forward) * faraday_mirror_matrix() * forward;
}

JonesMatrix pm_matrix(const PhaseModulator &pm, double t_ns) {
  for (const PhaseWindow &w : pm.schedule) {
    if (t_ns >= w.start_ns && t_ns < w.end_ns) {
      return JonesMatrix::diagonal(std::polar(1.0, w.phi), std::polar(pm.gamma, w.phi + pm.delta));
    }
  }
  return JonesMatrix::identity();
}

void validate_schedule(const PhaseModulator &pm) {
  if (!(pm.gamma > 0.0 && pm.gamma <= 1.0)) {
    throw ConfigError(fmt::format("phase modulator gamma {} outside (0, 1]", pm.gamma));
  }
  std::vector<PhaseWindow> sorted = pm.schedule;
  std::sort(sorted.begin(), sorted.end(),
            [](const PhaseWindow &a, const PhaseWindow &b) { return a.start_ns < b.start_ns; });
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (!(sorted[i].end_ns > sorted[i].start_ns)) {
      throw ConfigError(fmt::format("phase window [{}, {}) is empty", sorted[i].start_ns, sorted[i].end_ns));
    }
    if (i > 0 && sorted[i].start_ns < sorted[i - 1].end_ns) {
      throw ConfigError(fmt::format("phase windows [{}, {}) and [{}, {}) overlap", sorted[i - 1].start_ns,
                                    sorted[i - 1].end_ns, sorted[i].start_ns, sorted[i].end_ns));
    }
  }
}

JonesMatrix haar_random_unitary(RngStream &rng) {
  // (a, b) uniform on the unit 3-sphere gives Haar measure on SU(2); a uniform
  // global phase extends it to U(2).
  double x[4];
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (double &xi : x) {
      xi = rng.normal();
      n2 += xi * xi;
    }
  } while (n2 < 1e-300);
  const double inv = 1.0 / std::sqrt(n2);
  const Complex a{x[0] * inv, x[1] * inv};
  const Complex b{x[2] * inv, x[3] * inv};
  const Complex phase = std::polar(1.0, 2.0 * std::numbers::pi * rng.uniform());
  return JonesMatrix{a, b, -std::conj(b), std::conj(a), "haar"} * phase;
}

} // namespace pnp::optics
