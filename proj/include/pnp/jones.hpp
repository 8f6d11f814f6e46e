#pragma once

#include <array>
#include <complex>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include "pnp/rng.hpp"

namespace pnp::optics {

using Complex = std::complex<double>;

/// Fully polarized field amplitude in the fixed lab (h, v) basis.
/// States are stored unnormalized; the norm carries intensity.
struct JonesVector {
  Complex h{};
  Complex v{};

  double norm2() const { return std::norm(h) + std::norm(v); }

  JonesVector operator+(const JonesVector &o) const { return {h + o.h, v + o.v}; }
  JonesVector operator*(Complex s) const { return {h * s, v * s}; }
  bool operator==(const JonesVector &) const = default;
};

/// Hermitian inner product <a, b> = conj(a) . b
Complex inner(const JonesVector &a, const JonesVector &b);

/// Bilinear product a . b without conjugation.
Complex bilinear(const JonesVector &a, const JonesVector &b);

/// Linear polarization at `angle` radians from horizontal.
JonesVector linear_polarization(double angle);

/// 2x2 complex matrix, row-major. Also used for the two-port coupler
/// scattering matrix, which acts on (port a, port b) amplitude pairs.
struct JonesMatrix {
  std::array<Complex, 4> m{Complex{1.0}, Complex{}, Complex{}, Complex{1.0}};
  std::string label;

  JonesMatrix() = default;
  JonesMatrix(Complex a, Complex b, Complex c, Complex d, std::string lbl = {})
      : m{a, b, c, d}, label(std::move(lbl)) {}

  static JonesMatrix identity() { return {}; }
  static JonesMatrix diagonal(Complex a, Complex d) { return {a, Complex{}, Complex{}, d}; }

  Complex operator()(int r, int c) const { return m[static_cast<std::size_t>(2 * r + c)]; }

  JonesMatrix operator*(const JonesMatrix &o) const;
  JonesVector operator*(const JonesVector &v) const;
  JonesMatrix operator*(Complex s) const;
  JonesMatrix operator-(const JonesMatrix &o) const;

  JonesMatrix transpose() const;
  JonesMatrix adjoint() const;
  Complex det() const;

  /// Largest singular value.
  double max_singular_value() const;
  bool is_unitary(double tol = 1e-12) const;
};

/// max_ij |a_ij - b_ij|
double max_abs_diff(const JonesMatrix &a, const JonesMatrix &b);

/// Real rotation R(theta) = [[cos, -sin], [sin, cos]].
JonesMatrix rotation(double theta);

// ---- Components -----------------------------------------------------------

/// 2x2 fiber coupler with real amplitude transmission t; r = sqrt(1 - t^2).
struct Coupler {
  double t = 0.5 * std::numbers::sqrt2;

  double r() const;
};

/// Plain mirror; its Jones matrix is the identity in the round-trip convention.
struct Mirror {};

/// Non-reciprocal rotator: the same R(theta) applies in both directions.
struct FaradayRotator {
  double theta = std::numbers::pi / 4.0;
};

/// Mirror glued to a Faraday rotator of angle `rotator_angle` (nominally 45 deg).
struct FaradayMirror {
  double rotator_angle = std::numbers::pi / 4.0;
};

struct PhaseWindow {
  double start_ns = 0.0; ///< inclusive
  double end_ns = 0.0;   ///< exclusive
  double phi = 0.0;      ///< phase applied to the h axis, radians
};

/// Time-gated, polarization-dependent phase modulator.
struct PhaseModulator {
  std::vector<PhaseWindow> schedule;
  double delta = 0.2;  ///< extra phase on the v axis when active
  double gamma = 0.98; ///< relative amplitude transmission of the v axis when active
};

struct FiberSegment {
  double length_km = 0.0;
  double loss_db_per_km = 0.0;
  double delay_ns = 0.0;
  JonesMatrix birefringence; ///< forward one-way Jones matrix, unitary

  /// One-way amplitude transmission.
  double amplitude_factor() const;
};

struct Attenuator {
  double amplitude = 1.0;
};

using ComponentSpec = std::variant<Coupler, Mirror, FaradayRotator, FaradayMirror, PhaseModulator,
                                   FiberSegment, Attenuator>;

// ---- Operations -----------------------------------------------------------

/// Scattering matrix [[t, i r], [i r, t]]; throws DomainError for t outside [0, 1].
JonesMatrix coupler_scatter(double t);

/// Round-trip operator of an ideal 45 degree Faraday mirror, [[0, -1], [1, 0]].
JonesMatrix faraday_mirror_matrix();

/// Round trip through a rotator of angle `rotator_angle`, then a mirror, then the
/// same rotator again: R(2 * rotator_angle).
JonesMatrix faraday_mirror_matrix(double rotator_angle);

JonesMatrix faraday_rotator_matrix(double theta);

/// Jones matrix for the backward pass through a reciprocal element.
JonesMatrix backward_matrix(const JonesMatrix &forward);

/// B^T . M_FM . B, the Jones matrix of out-and-back propagation through B to an
/// ideal Faraday mirror. Equals det(B) . M_FM for every 2x2 B.
JonesMatrix roundtrip_operator(const JonesMatrix &forward);

/// Active-window phase matrix diag(e^{i phi}, gamma e^{i (phi + delta)}), or the
/// identity when `t_ns` is outside every window.
JonesMatrix pm_matrix(const PhaseModulator &pm, double t_ns);

/// Throws ConfigError if any two schedule windows overlap or a window is empty.
void validate_schedule(const PhaseModulator &pm);

/// Haar-distributed element of U(2).
JonesMatrix haar_random_unitary(RngStream &rng);

} // namespace pnp::optics
