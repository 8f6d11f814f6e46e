#include <doctest.h>

#include <cmath>

#include "pnp/detection.hpp"
#include "pnp/errors.hpp"

using namespace pnp;
using namespace pnp::detection;

TEST_CASE("required attenuation") {
  SUBCASE("ten photons down to 0.1") {
    const auto a = required_attenuation(10.0, {0.1}, 1.0);
    CHECK(a.factor == doctest::Approx(0.1).epsilon(1e-15));
    CHECK_FALSE(a.clamped);
  }
  SUBCASE("exactly at target") {
    const auto a = required_attenuation(0.1, {0.1}, 1.0);
    CHECK(a.factor == 1.0);
    CHECK_FALSE(a.clamped);
  }
  SUBCASE("below target clamps") {
    const auto a = required_attenuation(0.05, {0.1}, 1.0);
    CHECK(a.factor == 1.0);
    CHECK(a.clamped);
  }
  SUBCASE("round trip reproduces the target") {
    for (double incoming : {1e-3, 0.37, 12.0, 4.2e5}) {
      for (double mu : {1e-4, 0.1, 0.5}) {
        if (incoming * 1e3 <= mu) continue;
        const auto a = required_attenuation(incoming, {mu}, 1e3);
        CHECK(std::abs(incoming * 1e3 * a.factor * a.factor - mu) < 1e-12 * std::max(1.0, mu));
      }
    }
  }
  SUBCASE("invalid inputs") {
    CHECK_THROWS_AS(required_attenuation(0.0, {0.1}, 1.0), DomainError);
    CHECK_THROWS_AS(required_attenuation(1.0, {0.1}, -1.0), DomainError);
  }
}

TEST_CASE("click probability") {
  DetectorSpec det{1.0, 0.0};
  CHECK(click_probability(0.0, det) == 0.0);
  CHECK(click_probability(0.1, det) == doctest::Approx(0.0951625819640404).epsilon(1e-14));
  det.dark = 1e-5;
  CHECK(click_probability(0.0, det) == 1e-5);
  CHECK_THROWS_AS(click_probability(-0.1, det), DomainError);

  SUBCASE("monotone in mu, eta and dark") {
    double prev = -1.0;
    for (double mu = 0.0; mu < 5.0; mu += 0.01) {
      const double p = click_probability(mu, {0.2, 1e-4});
      CHECK(p >= prev);
      prev = p;
    }
    prev = -1.0;
    for (double eta = 0.0; eta <= 1.0; eta += 0.01) {
      const double p = click_probability(0.3, {eta, 1e-4});
      CHECK(p >= prev);
      prev = p;
    }
    prev = -1.0;
    for (double dark = 0.0; dark < 0.5; dark += 0.01) {
      const double p = click_probability(0.3, {0.2, dark});
      CHECK(p >= prev);
      prev = p;
    }
  }

  SUBCASE("small-signal linearization") {
    for (double mu : {1e-4, 1e-3, 0.01, 0.04}) {
      const DetectorSpec d{0.2, 1e-4};
      const double approx = d.eta * mu + d.dark;
      CHECK(std::abs(click_probability(mu, d) - approx) < 0.01 * approx);
    }
  }
}

TEST_CASE("click sampling") {
  RngStream rng(1, 0);
  for (int k = 0; k < 1000; ++k) {
    CHECK_FALSE(sample_click(0.0, rng));
    CHECK(sample_click(1.0, rng));
  }
  CHECK_THROWS_AS(sample_click(1.5, rng), DomainError);

  constexpr int n = 1'000'000;
  const double p = 0.095163;
  RngStream stream(99, 3);
  int clicks = 0;
  for (int k = 0; k < n; ++k) clicks += sample_click(p, stream) ? 1 : 0;
  CHECK(std::abs(static_cast<double>(clicks) / n - p) < 3.0 * std::sqrt(p * (1.0 - p) / n));
}

TEST_CASE("intensity monitor") {
  const MonitorSpec spec{1.0, 2.0};
  CHECK(monitor_check(1.0, spec) == MonitorStatus::ok);
  CHECK(monitor_check(2.0, spec) == MonitorStatus::ok);
  CHECK(monitor_check(10.0, spec) == MonitorStatus::alarm);
  CHECK(monitor_check(5.0, spec) == MonitorStatus::alarm);
}

TEST_CASE("detector and monitor settings validation") {
  CHECK_NOTHROW(DetectorSpec{}.validate());
  CHECK_THROWS_AS((DetectorSpec{1.2, 0.0}.validate()), ConfigError);
  CHECK_THROWS_AS((DetectorSpec{0.2, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS((MonitorSpec{1.0, 1.0}.validate()), ConfigError);
}
