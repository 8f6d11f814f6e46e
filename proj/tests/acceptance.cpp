// Acceptance checks for the simulator. Prints one PASS/FAIL line per criterion
// and exits nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "pnp/interferometer.hpp"
#include "pnp/jones.hpp"
#include "pnp/protocol.hpp"

using namespace pnp;
using interferometer::PlugAndPlayParams;

namespace {

constexpr double kPi = std::numbers::pi;

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double binomial_sigma(double p, double n) { return std::sqrt(p * (1.0 - p) / n); }

PlugAndPlayParams random_fibers(PlugAndPlayParams p, std::uint64_t seed) {
  RngStream rng(seed, kSessionStream);
  p.line_birefringence = optics::haar_random_unitary(rng);
  p.delay_m1_birefringence = optics::haar_random_unitary(rng);
  p.delay_m2_birefringence = optics::haar_random_unitary(rng);
  p.alice_arm_birefringence = optics::haar_random_unitary(rng);
  p.bob_link_birefringence = optics::haar_random_unitary(rng);
  return p;
}

Verdict compensation_identity() {
  const auto t0 = Clock::now();
  RngStream rng(1, 0);
  const auto fm = optics::faraday_mirror_matrix();
  double worst = 0.0;
  for (int k = 0; k < 10'000; ++k) {
    std::array<optics::Complex, 4> e;
    for (auto &z : e) z = {2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0};
    const optics::JonesMatrix b(e[0], e[1], e[2], e[3]);
    worst = std::max(worst, optics::max_abs_diff(optics::roundtrip_operator(b), fm * b.det()));
  }
  const double dt = seconds_since(t0);
  return {worst < 1e-12 && dt < 1.0, fmt::format("max deviation {:.3e} over 10^4 matrices, {:.3f} s", worst, dt)};
}

Verdict destructive_interference() {
  const auto t0 = Clock::now();
  const interferometer::TraceConfig cfg;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    PlugAndPlayParams p = random_fibers(PlugAndPlayParams::ideal(), seed);
    p.phi_a = kPi;
    const double dark = interferometer::marker_intensity(interferometer::build_plug_and_play(p), cfg, "D0", "signal");
    p.phi_a = 0.0;
    const double bright = interferometer::marker_intensity(interferometer::build_plug_and_play(p), cfg, "D0", "signal");
    worst = std::max(worst, dark / bright);
  }
  const double dt = seconds_since(t0);
  return {worst < 1e-12 && dt < 10.0, fmt::format("worst dark/bright ratio {:.3e} over 100 draws, {:.2f} s", worst, dt)};
}

Verdict visibility_immunity() {
  const interferometer::TraceConfig cfg;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto v = interferometer::visibility_scan(random_fibers(PlugAndPlayParams::ideal(), seed), cfg, 8);
    worst = std::max(worst, std::abs(v.visibility - 1.0));
  }
  for (double t2 : {0.5, 0.7, 0.9, 0.99}) {
    PlugAndPlayParams p = random_fibers(PlugAndPlayParams::ideal(), 1);
    p.t2 = t2;
    worst = std::max(worst, std::abs(interferometer::visibility_scan(p, cfg, 8).visibility - 1.0));
  }
  return {worst < 1e-9, fmt::format("max |V - 1| = {:.3e} over 50 birefringence draws and t2 in {{0.5, 0.7, 0.9, 0.99}}", worst)};
}

Verdict visibility_reproduction() {
  // Grid: FR angle error 0..2 deg (21 values) x modulator delta 0..0.3 rad (31 values),
  // all other parameters at their defaults, for identity fibers and one fixed random draw.
  const auto t0 = Clock::now();
  const interferometer::TraceConfig cfg;
  constexpr double target = 0.9984;
  constexpr double tol = 0.0005;
  double closest = 0.0;
  double v_lo = 1.0;
  double v_hi = 0.0;
  std::string where;
  bool found = false;
  for (const char *fibers : {"identity", "random"}) {
    PlugAndPlayParams base;
    if (std::string(fibers) == "random") base = random_fibers(base, 1);
    for (int i = 0; i <= 20; ++i) {
      for (int j = 0; j <= 30; ++j) {
        PlugAndPlayParams p = base;
        p.fr_angle_error = (0.1 * i) * kPi / 180.0;
        p.alice_pm.delta = p.bob_pm.delta = 0.01 * j;
        const double v = interferometer::visibility_scan(p, cfg, 8).visibility;
        v_lo = std::min(v_lo, v);
        v_hi = std::max(v_hi, v);
        if (std::abs(v - target) < std::abs(closest - target)) {
          closest = v;
          where = fmt::format("{} fibers, eps={:.1f} deg, delta={:.2f}", fibers, 0.1 * i, 0.01 * j);
        }
        found = found || std::abs(v - target) <= tol;
      }
    }
  }
  const double dt = seconds_since(t0);
  return {found && dt < 120.0, fmt::format("grid V range [{:.6f}, {:.6f}]; closest to {} is {:.6f} ({}); {:.1f} s", v_lo, v_hi,
                                           target, closest, where, dt)};
}

Verdict attenuation_asymmetry() {
  const interferometer::TraceConfig cfg;
  double worst = 0.0;
  for (double r2 : {0.1, 0.3, 0.5}) {
    PlugAndPlayParams p = PlugAndPlayParams::ideal();
    p.t2 = std::sqrt(1.0 - r2 * r2);
    const auto spec = interferometer::build_plug_and_play(p);
    const double ratio = interferometer::marker_intensity(spec, cfg, "D_A", "monitor_p2") /
                         interferometer::marker_intensity(spec, cfg, "D_A", "monitor_p1");
    worst = std::max(worst, std::abs(ratio - std::pow(r2, 4)));
  }
  return {worst < 1e-12, fmt::format("max |P2/P1 - r2^4| = {:.3e} for r2 in {{0.1, 0.3, 0.5}}", worst)};
}

Verdict two_state_statistics() {
  const auto t0 = Clock::now();
  const protocol::OpticsModel optics(random_fibers(PlugAndPlayParams::ideal(), 1), {}, {0.1}, 1e6);
  protocol::SessionConfig cfg;
  cfg.n_slots = 100'000;
  cfg.detector.dark = 0.0;
  cfg.workers = 4;
  const auto stats = protocol::sift_two_state(protocol::run_session(cfg, optics));
  const double mu_eff = optics.calibration().mu_signal_max;
  const double expected = 0.5 * (1.0 - std::exp(-cfg.detector.eta * mu_eff));
  const double sigma = binomial_sigma(expected, 1e5);
  const double dev = std::abs(stats.sift_rate - expected);
  const double dt = seconds_since(t0);
  return {stats.errors == 0 && stats.sifted() > 0 && dev < 3.0 * sigma && dt < 60.0,
          fmt::format("qber {} ({} errors / {} bits); sift_rate {:.5f} vs {:.5f} (mu_eff {:.4f}), {:.2f} sigma; {:.2f} s",
                      stats.qber, stats.errors, stats.sifted(), stats.sift_rate, expected, mu_eff, dev / sigma, dt)};
}

Verdict bb84_intercept_resend() {
  const protocol::OpticsModel optics(PlugAndPlayParams::ideal(), {}, {0.1}, 1e6);
  protocol::SessionConfig cfg;
  cfg.protocol = protocol::Protocol::bb84;
  cfg.n_slots = 5'000'000;
  cfg.detector.dark = 0.0;
  cfg.workers = 4;
  cfg.eve = protocol::InterceptResend{protocol::BasisPolicy::random};
  const auto stats = protocol::sift_bb84(protocol::run_session(cfg, optics));
  const double n = static_cast<double>(stats.sifted());
  const double sigma = binomial_sigma(0.25, n);
  const double dev = std::abs(stats.qber - 0.25);
  return {stats.sifted() >= 10'000 && dev < 3.0 * sigma,
          fmt::format("qber {:.4f} over {} sifted bits, {:.2f} sigma from 0.25", stats.qber, stats.sifted(), dev / sigma)};
}

Verdict defense_triggers() {
  const protocol::OpticsModel optics(random_fibers(PlugAndPlayParams{}, 1), {}, {0.1}, 1e6);
  protocol::SessionConfig cfg;
  cfg.n_slots = 100'000;
  cfg.workers = 4;

  cfg.eve = protocol::StrongProbe{5.0, 0.5};
  std::uint64_t probed = 0;
  std::uint64_t probed_alarmed = 0;
  for (const auto &r : protocol::run_session(cfg, optics)) {
    probed += r.eve_knows ? 1 : 0;
    probed_alarmed += (r.eve_knows && r.monitor_alarm) ? 1 : 0;
  }
  const bool probe_ok = probed > 0 && probed_alarmed == probed;

  cfg.eve = protocol::BlockSlots{0.1};
  const auto missing = protocol::reference_pulse_check(protocol::run_session(cfg, optics)).missing_count;
  const double expected_missing = 0.1 * 1e5;
  const double sd_missing = std::sqrt(1e5 * 0.1 * 0.9);
  const bool block_ok = std::abs(static_cast<double>(missing) - expected_missing) < 3.0 * sd_missing;

  cfg.eve.reset();
  const auto base = protocol::sift_two_state(protocol::run_session(cfg, optics));
  cfg.eve = protocol::SuppressInconclusive{};
  const auto records = protocol::run_session(cfg, optics);
  const auto attacked = protocol::sift_two_state(records);
  const double se = std::sqrt(base.qber * (1.0 - base.qber) / static_cast<double>(base.sifted()) +
                              attacked.qber * (1.0 - attacked.qber) / static_cast<double>(attacked.sifted()));
  const double z = (attacked.qber - base.qber) / se;
  const bool suppress_ok = z > 5.0;

  return {probe_ok && block_ok && suppress_ok,
          fmt::format("probe alarms {}/{}; blocked references {} (expect {:.0f} +- {:.0f}); suppression qber {:.4f} vs "
                      "baseline {:.4f} ({:.1f} sigma, references missing {})",
                      probed_alarmed, probed, missing, expected_missing, 3.0 * sd_missing, attacked.qber, base.qber, z,
                      attacked.reference_missing_count)};
}

Verdict baseline_contrast() {
  const interferometer::TraceConfig cfg;
  interferometer::DoubleMzParams p;
  const auto flat = interferometer::visibility_scan(p, cfg, 16);
  p.delta_l_nm = 650.0;
  const auto flipped = interferometer::visibility_scan(p, cfg, 16);
  // Sample 0 is phi_a = 0, sample 8 is phi_a = pi.
  const bool flip = flat.fringe[0].intensity > flat.fringe[8].intensity &&
                    flipped.fringe[0].intensity < flipped.fringe[8].intensity &&
                    std::abs(flat.fringe[0].intensity - flipped.fringe[8].intensity) < 1e-9 &&
                    std::abs(flat.fringe[8].intensity - flipped.fringe[0].intensity) < 1e-9;

  double worst = 0.0;
  for (double dt : {0.02, 0.05, 0.1, 0.15, 0.2, 0.3}) {
    interferometer::DoubleMzParams q;
    q.delta_l_nm = dt * 1e-9 * q.group_velocity_km_s * 1e12;
    const double oracle = std::exp(-dt * dt / (8.0 * cfg.pulse_rms_ns * cfg.pulse_rms_ns));
    worst = std::max(worst, std::abs(interferometer::visibility_scan(q, cfg, 16).visibility - oracle));
  }
  return {flip && worst < 1e-6,
          fmt::format("fringe {} at 650 nm (I(0): {:.4f} -> {:.4f}); max |V - overlap| = {:.3e}", flip ? "flipped" : "not flipped",
                      flat.fringe[0].intensity, flipped.fringe[0].intensity, worst)};
}

} // namespace

int main() {
  const std::vector<std::pair<const char *, std::function<Verdict()>>> criteria = {
      {"compensation identity", compensation_identity},
      {"destructive interference", destructive_interference},
      {"visibility immunity", visibility_immunity},
      {"visibility 0.9984 within the imperfection grid", visibility_reproduction},
      {"attenuation asymmetry r2^4", attenuation_asymmetry},
      {"two-state statistics", two_state_statistics},
      {"BB84 intercept-resend", bb84_intercept_resend},
      {"defense triggers", defense_triggers},
      {"baseline contrast", baseline_contrast},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception &e) {
      v = {false, fmt::format("exception: {}", e.what())};
    }
    failures += v.pass ? 0 : 1;
    fmt::print("criterion {}: {} - {}: {}\n", i + 1, v.pass ? "PASS" : "FAIL", criteria[i].first, v.detail);
    std::fflush(stdout);
  }
  fmt::print("{} of {} criteria passed\n", criteria.size() - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
