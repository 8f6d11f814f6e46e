#include "pnp/interferometer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <queue>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "pnp/errors.hpp"

namespace pnp::interferometer {

namespace {

template <class... Ts> struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts> overloaded(Ts...) -> overloaded<Ts...>;

constexpr double kGroupVelocityKmPerNs = 2.04e5 * 1e-9;

// Coupler port pairing: 0-2 and 1-3 are through, 0-3 and 1-2 are cross.
constexpr int kThrough[4] = {2, 3, 0, 1};
constexpr int kCross[4] = {3, 2, 1, 0};

optics::FiberSegment fiber(double delay_ns, double loss_db, JonesMatrix birefringence) {
  optics::FiberSegment f;
  f.delay_ns = delay_ns;
  f.length_km = delay_ns * kGroupVelocityKmPerNs;
  f.loss_db_per_km = f.length_km > 0.0 ? loss_db / f.length_km : 0.0;
  f.birefringence = std::move(birefringence);
  return f;
}

void check_coupler(double t, std::string_view name) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw ConfigError(fmt::format("coupler {} transmission {} outside [0, 1]", name, t));
  }
}

} // namespace

int port_count(const Element &e) {
  return std::visit(overloaded{
                        [](const optics::Coupler &) { return 4; },
                        [](const optics::Mirror &) { return 1; },
                        [](const optics::FaradayMirror &) { return 1; },
                        [](const Source &) { return 1; },
                        [](const Detector &) { return 1; },
                        [](const Dump &) { return 1; },
                        [](const auto &) { return 2; },
                    },
                    e);
}

// ---- InterferometerSpec ---------------------------------------------------

int InterferometerSpec::add(std::string id, Element element) {
  nodes.push_back(Node{std::move(id), std::move(element)});
  const int index = static_cast<int>(nodes.size()) - 1;
  if (std::holds_alternative<Detector>(nodes.back().element)) detectors.push_back(index);
  return index;
}

void InterferometerSpec::connect(PortRef a, PortRef b, double delay_ns, double loss) {
  links.push_back(Link{a, b, delay_ns, loss});
}

int InterferometerSpec::node_index(std::string_view id) const {
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].id == id) return static_cast<int>(i);
  }
  throw ConfigError(fmt::format("no node named '{}'", id));
}

double InterferometerSpec::marker(std::string_view name) const {
  const auto it = markers.find(std::string(name));
  if (it == markers.end()) throw ConfigError(fmt::format("no marker named '{}'", name));
  return it->second;
}

double InterferometerSpec::max_delay_ns() const {
  double worst = 0.0;
  for (const Link &l : links) worst = std::max(worst, l.delay_ns);
  for (const Node &n : nodes) {
    if (const auto *f = std::get_if<optics::FiberSegment>(&n.element)) worst = std::max(worst, f->delay_ns);
  }
  return worst;
}

void InterferometerSpec::validate() const {
  const int n = static_cast<int>(nodes.size());
  std::vector<std::vector<int>> used(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) used[i].assign(static_cast<std::size_t>(port_count(nodes[i].element)), 0);

  auto check_end = [&](const PortRef &p) {
    if (p.node < 0 || p.node >= n) throw ConfigError(fmt::format("link endpoint refers to missing node {}", p.node));
    auto &ports = used[static_cast<std::size_t>(p.node)];
    if (p.port < 0 || p.port >= static_cast<int>(ports.size())) {
      throw ConfigError(fmt::format("node '{}' has no port {}", nodes[static_cast<std::size_t>(p.node)].id, p.port));
    }
    if (++ports[static_cast<std::size_t>(p.port)] > 1) {
      throw ConfigError(fmt::format("port {} of node '{}' has more than one link", p.port,
                                    nodes[static_cast<std::size_t>(p.node)].id));
    }
  };
  for (const Link &l : links) {
    check_end(l.a);
    check_end(l.b);
    if (!(l.delay_ns >= 0.0)) throw ConfigError(fmt::format("negative link delay {}", l.delay_ns));
    if (!(l.loss > 0.0 && l.loss <= 1.0)) throw ConfigError(fmt::format("link loss factor {} outside (0, 1]", l.loss));
  }
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (std::size_t p = 0; p < used[i].size(); ++p) {
      if (used[i][p] == 0) throw ConfigError(fmt::format("port {} of node '{}' is not connected", p, nodes[i].id));
    }
    std::visit(overloaded{
                   [&](const optics::Coupler &c) { check_coupler(c.t, nodes[i].id); },
                   [&](const optics::PhaseModulator &pm) { optics::validate_schedule(pm); },
                   [&](const optics::FiberSegment &f) {
                     if (!(f.delay_ns >= 0.0)) throw ConfigError(fmt::format("fiber '{}' has negative delay", nodes[i].id));
                     if (!f.birefringence.is_unitary(1e-12)) {
                       throw ConfigError(fmt::format("fiber '{}' birefringence is not unitary", nodes[i].id));
                     }
                   },
                   [&](const optics::Attenuator &a) {
                     if (!(a.amplitude >= 0.0 && a.amplitude <= 1.0)) {
                       throw ConfigError(fmt::format("attenuator '{}' amplitude {} outside [0, 1]", nodes[i].id, a.amplitude));
                     }
                   },
                   [](const auto &) {},
               },
               nodes[i].element);
  }
  for (int d : detectors) {
    if (d < 0 || d >= n || !std::holds_alternative<Detector>(nodes[static_cast<std::size_t>(d)].element)) {
      throw ConfigError(fmt::format("detector index {} is not a detector node", d));
    }
  }
  if (sources.empty()) throw ConfigError("interferometer has no source");
  for (const Launch &s : sources) {
    if (s.node < 0 || s.node >= n || !std::holds_alternative<Source>(nodes[static_cast<std::size_t>(s.node)].element)) {
      throw ConfigError(fmt::format("launch refers to non-source node {}", s.node));
    }
  }
}

// ---- Builders -------------------------------------------------------------

PlugAndPlayParams PlugAndPlayParams::ideal() {
  PlugAndPlayParams p;
  p.alice_pm = {0.0, 1.0};
  p.bob_pm = {0.0, 1.0};
  return p;
}

PlugAndPlayTiming plug_and_play_timing(const PlugAndPlayParams &p) {
  PlugAndPlayTiming t{};
  const double leg = p.delay_line_ns / 4.0;
  t.p1_at_alice_pm = p.bob_link_ns + p.line_delay_ns + p.alice_arm_ns;
  t.p2_at_alice_pm = t.p1_at_alice_pm + p.delay_line_ns;
  t.p1_return_at_eve = p.bob_link_ns + p.line_delay_ns + 2.0 * p.alice_arm_ns;
  t.p2_return_at_eve = t.p1_return_at_eve + p.delay_line_ns;
  t.bob_pm_signal = t.p1_return_at_eve + p.line_delay_ns + leg;
  t.d0_reference = t.p1_return_at_eve + p.line_delay_ns + p.bob_link_ns;
  t.d0_signal = t.d0_reference + p.delay_line_ns;
  t.da_p1 = p.bob_link_ns + p.line_delay_ns;
  t.da_p2 = t.da_p1 + p.delay_line_ns;
  return t;
}

InterferometerSpec build_plug_and_play(const PlugAndPlayParams &p) {
  check_coupler(p.t1, "C1");
  check_coupler(p.t2, "C2");
  check_coupler(p.t3, "C3");
  if (!(p.delay_line_ns > 0.0)) throw ConfigError("delay_line_ns must be positive");
  if (!(p.alice_arm_ns >= 0.0 && 4.0 * p.alice_arm_ns < p.delay_line_ns)) {
    throw ConfigError("alice_arm_ns must be non-negative and shorter than a quarter of the delay line");
  }
  if (!(p.line_delay_ns >= 0.0 && p.bob_link_ns >= 0.0)) throw ConfigError("negative fiber delay");
  if (!(p.alice_attenuation >= 0.0 && p.alice_attenuation <= 1.0)) {
    throw ConfigError(fmt::format("alice_attenuation {} outside [0, 1]", p.alice_attenuation));
  }

  const PlugAndPlayTiming timing = plug_and_play_timing(p);
  const double half = p.delay_line_ns / 2.0;
  const double leg = p.delay_line_ns / 4.0;
  const optics::FaradayMirror fm{std::numbers::pi / 4.0 + p.fr_angle_error};

  optics::PhaseModulator pm_a{{{timing.p2_at_alice_pm - half, timing.p2_at_alice_pm + half, p.phi_a / 2.0}},
                              p.alice_pm.delta,
                              p.alice_pm.gamma};
  optics::PhaseModulator pm_b{{{timing.bob_pm_signal - half, timing.bob_pm_signal + half, p.phi_b / 2.0}},
                              p.bob_pm.delta,
                              p.bob_pm.gamma};

  InterferometerSpec s;
  // Bob
  const int laser = s.add("laser", Source{});
  const int c1 = s.add("C1", optics::Coupler{p.t1});
  const int d0 = s.add("D0", Detector{});
  const int c1_dump = s.add("C1_dump", Dump{});
  const int bob_link = s.add("bob_link", fiber(p.bob_link_ns, 0.0, p.bob_link_birefringence));
  const int c2 = s.add("C2", optics::Coupler{p.t2});
  const int delay_m1 = s.add("delay_m1", fiber(leg, 0.0, p.delay_m1_birefringence));
  const int pm_bob = s.add("PM_B", pm_b);
  const int m1 = s.add("M1", fm);
  const int delay_m2 = s.add("delay_m2", fiber(leg, 0.0, p.delay_m2_birefringence));
  const int m2 = s.add("M2", fm);
  // Line
  const int line = s.add("line", fiber(p.line_delay_ns, p.line_loss_db, p.line_birefringence));
  const int eve = s.add("eve", p.eve);
  // Alice
  const int c3 = s.add("C3", optics::Coupler{p.t3});
  const int c3_dump = s.add("C3_dump", Dump{});
  const int d_a = s.add("D_A", Detector{});
  const int arm = s.add("alice_arm", fiber(p.alice_arm_ns, 0.0, p.alice_arm_birefringence));
  const int att = s.add("attenuator", optics::Attenuator{std::sqrt(p.alice_attenuation)});
  const int pm_alice = s.add("PM_A", pm_a);
  const int m3 = s.add("M3", fm);

  s.connect({laser, 0}, {c1, 0});
  s.connect({c1, 1}, {d0, 0});
  s.connect({c1, 2}, {c1_dump, 0});
  s.connect({c1, 3}, {bob_link, 0});
  s.connect({bob_link, 1}, {c2, 0});
  s.connect({c2, 1}, {delay_m1, 0});
  s.connect({delay_m1, 1}, {pm_bob, 0});
  s.connect({pm_bob, 1}, {m1, 0});
  s.connect({c2, 3}, {delay_m2, 0});
  s.connect({delay_m2, 1}, {m2, 0});
  s.connect({c2, 2}, {line, 0});
  s.connect({line, 1}, {eve, 0});
  s.connect({eve, 1}, {c3, 0});
  s.connect({c3, 1}, {c3_dump, 0});
  s.connect({c3, 2}, {d_a, 0});
  s.connect({c3, 3}, {arm, 0});
  s.connect({arm, 1}, {att, 0});
  s.connect({att, 1}, {pm_alice, 0});
  s.connect({pm_alice, 1}, {m3, 0});

  s.sources.push_back(Launch{laser, 0.0, p.input_polarization});
  s.markers = {{"reference", timing.d0_reference},
               {"signal", timing.d0_signal},
               {"monitor_p1", timing.da_p1},
               {"monitor_p2", timing.da_p2}};
  s.validate();
  return s;
}

double DoubleMzParams::mismatch_delay_ns() const {
  // nm / (km/s): 1e-12 km per nm, 1e9 ns per s.
  return delta_l_nm * 1e-12 / group_velocity_km_s * 1e9;
}

InterferometerSpec build_double_mz(const DoubleMzParams &p) {
  for (double t : {p.alice_split_t, p.alice_combine_t, p.bob_split_t, p.bob_combine_t}) check_coupler(t, "MZ");
  if (!(p.long_arm_ns > 0.0)) throw ConfigError("long_arm_ns must be positive");
  if (!(p.wavelength_nm > 0.0 && p.group_velocity_km_s > 0.0)) throw ConfigError("wavelength and group velocity must be positive");

  const double mismatch_ns = p.mismatch_delay_ns();
  if (!(p.long_arm_ns + mismatch_ns >= 0.0)) throw ConfigError("path mismatch makes Bob's long arm negative");
  const double horizon = 3.0 * (p.line_delay_ns + 2.0 * (p.long_arm_ns + std::abs(mismatch_ns))) + 1.0;
  auto always = [&](double phi, const PmImperfection &imp) {
    return optics::PhaseModulator{{{-1.0, horizon, phi}}, imp.delta, imp.gamma};
  };

  JonesMatrix bob_long = p.bob_long_arm_birefringence * std::polar(1.0, 2.0 * std::numbers::pi * p.delta_l_nm / p.wavelength_nm);

  InterferometerSpec s;
  const int laser = s.add("laser", Source{});
  const int ca1 = s.add("CA1", optics::Coupler{p.alice_split_t});
  const int ca1_dump = s.add("CA1_dump", Dump{});
  const int pm_a = s.add("PM_A", always(p.phi_a, p.alice_pm));
  const int a_long = s.add("alice_long", fiber(p.long_arm_ns, 0.0, {}));
  const int ca2 = s.add("CA2", optics::Coupler{p.alice_combine_t});
  const int ca2_dump = s.add("CA2_dump", Dump{});
  const int line = s.add("line", fiber(p.line_delay_ns, p.line_loss_db, p.line_birefringence));
  const int cb1 = s.add("CB1", optics::Coupler{p.bob_split_t});
  const int cb1_dump = s.add("CB1_dump", Dump{});
  const int pm_b = s.add("PM_B", always(p.phi_b, p.bob_pm));
  const int b_long = s.add("bob_long", fiber(p.long_arm_ns + mismatch_ns, 0.0, bob_long));
  const int cb2 = s.add("CB2", optics::Coupler{p.bob_combine_t});
  const int d0 = s.add("D0", Detector{});
  const int d1 = s.add("D1", Detector{});

  s.connect({laser, 0}, {ca1, 0});
  s.connect({ca1, 1}, {ca1_dump, 0});
  s.connect({ca1, 2}, {pm_a, 0});
  s.connect({pm_a, 1}, {ca2, 0});
  s.connect({ca1, 3}, {a_long, 0});
  s.connect({a_long, 1}, {ca2, 1});
  s.connect({ca2, 2}, {line, 0});
  s.connect({ca2, 3}, {ca2_dump, 0});
  s.connect({line, 1}, {cb1, 0});
  s.connect({cb1, 1}, {cb1_dump, 0});
  s.connect({cb1, 2}, {pm_b, 0});
  s.connect({pm_b, 1}, {cb2, 0});
  s.connect({cb1, 3}, {b_long, 0});
  s.connect({b_long, 1}, {cb2, 1});
  s.connect({cb2, 2}, {d0, 0});
  s.connect({cb2, 3}, {d1, 0});

  s.sources.push_back(Launch{laser, 0.0, p.input_polarization});
  s.markers = {{"ss", p.line_delay_ns},
               {"signal", p.line_delay_ns + p.long_arm_ns},
               {"ll", p.line_delay_ns + 2.0 * p.long_arm_ns + mismatch_ns}};
  s.validate();
  return s;
}

// ---- Tracing --------------------------------------------------------------

double TraceConfig::horizon_for(const InterferometerSpec &spec) const {
  return time_horizon_ns > 0.0 ? time_horizon_ns : 3.0 * spec.max_delay_ns() + 10.0 * bin_width_ns;
}

void TraceConfig::validate(const InterferometerSpec &spec) const {
  if (!(amplitude_cutoff > 0.0 && amplitude_cutoff < 1.0)) {
    throw ConfigError(fmt::format("amplitude_cutoff {} outside (0, 1)", amplitude_cutoff));
  }
  if (!(bin_width_ns > 0.0)) throw ConfigError(fmt::format("bin_width_ns {} must be positive", bin_width_ns));
  if (!(pulse_rms_ns > 0.0)) throw ConfigError(fmt::format("pulse_rms_ns {} must be positive", pulse_rms_ns));
  if (!(horizon_for(spec) > spec.max_delay_ns())) {
    throw ConfigError(fmt::format("time_horizon_ns {} does not exceed the largest network delay {}", horizon_for(spec),
                                  spec.max_delay_ns()));
  }
  if (max_events == 0) throw ConfigError("max_events must be positive");
}

namespace {

struct Event {
  int node;
  int port; ///< arrival port, -1 for a launch root
  double time;
  Complex amplitude;
  JonesVector polarization;
  int parent;
  Complex coupler_factor; ///< factor applied when leaving a coupler toward this event, 0 if none
  int generation;
};

struct QueueEntry {
  double time;
  std::size_t index;
  bool operator>(const QueueEntry &o) const { return time != o.time ? time > o.time : index > o.index; }
};

class Tracer {
public:
  Tracer(const InterferometerSpec &spec, const TraceConfig &cfg)
      : spec_(spec), cfg_(cfg), horizon_(cfg.horizon_for(spec)), link_of_(spec.nodes.size()),
        link_props_(spec.nodes.size()) {
    for (std::size_t n = 0; n < spec.nodes.size(); ++n) {
      const auto ports = static_cast<std::size_t>(port_count(spec.nodes[n].element));
      link_of_[n].assign(ports, PortRef{});
      link_props_[n].assign(ports, {0.0, 1.0});
    }
    for (const Link &l : spec.links) {
      for (const auto &[from, to] : {std::pair{l.a, l.b}, std::pair{l.b, l.a}}) {
        const auto node = static_cast<std::size_t>(from.node);
        const auto port = static_cast<std::size_t>(from.port);
        link_of_[node][port] = to;
        link_props_[node][port] = {l.delay_ns, l.loss};
      }
    }
  }

  std::vector<PulseSegment> run() {
    std::vector<std::size_t> hits;
    for (const Launch &launch : spec_.sources) {
      threshold_ = cfg_.amplitude_cutoff * std::sqrt(launch.polarization.norm2());
      const std::size_t root = push_event(Event{launch.node, -1, launch.time_ns, Complex{1.0}, launch.polarization, -1, {}, 0});
      depart(root, 0, launch.time_ns, Complex{1.0}, launch.polarization, {}, 0);
      while (!queue_.empty()) {
        const QueueEntry top = queue_.top();
        queue_.pop();
        if (process(top.index)) hits.push_back(top.index);
      }
    }
    std::vector<PulseSegment> out;
    out.reserve(hits.size());
    for (std::size_t h : hits) out.push_back(segment_from(h));
    std::stable_sort(out.begin(), out.end(), [](const PulseSegment &a, const PulseSegment &b) {
      return a.port != b.port ? a.port < b.port : a.arrival_ns < b.arrival_ns;
    });
    return out;
  }

private:
  std::size_t push_event(Event e) {
    if (events_.size() >= cfg_.max_events) {
      throw ResourceError(fmt::format("trace exceeded {} events; amplitude_cutoff {} is too small for this network",
                                      cfg_.max_events, cfg_.amplitude_cutoff));
    }
    events_.push_back(e);
    return events_.size() - 1;
  }

  void depart(std::size_t from, int out_port, double time, Complex amplitude, const JonesVector &pol,
              Complex coupler_factor, int generation) {
    const int node = events_[from].node;
    const auto n = static_cast<std::size_t>(node);
    const auto p = static_cast<std::size_t>(out_port);
    const PortRef to = link_of_[n][p];
    const auto [delay, loss] = link_props_[n][p];
    const double t = time + delay;
    const Complex a = amplitude * loss;
    if (t > horizon_) return;
    if (std::abs(a) * std::sqrt(pol.norm2()) < threshold_) return;
    const std::size_t idx = push_event(Event{to.node, to.port, t, a, pol, static_cast<int>(from), coupler_factor, generation});
    queue_.push(QueueEntry{t, idx});
  }

  /// Returns true when the event is a detector hit.
  bool process(std::size_t idx) {
    const Event e = events_[idx];
    const Element &element = spec_.nodes[static_cast<std::size_t>(e.node)].element;
    return std::visit(
        overloaded{
            [&](const optics::Coupler &c) {
              const double r = c.r();
              if (c.t > 0.0) depart(idx, kThrough[e.port], e.time, e.amplitude * c.t, e.polarization, c.t, e.generation + 1);
              if (r > 0.0) {
                const Complex ir{0.0, r};
                depart(idx, kCross[e.port], e.time, e.amplitude * ir, e.polarization, ir, e.generation + 1);
              }
              return false;
            },
            [&](const optics::Mirror &) {
              depart(idx, 0, e.time, e.amplitude, e.polarization, {}, e.generation);
              return false;
            },
            [&](const optics::FaradayMirror &fm) {
              depart(idx, 0, e.time, e.amplitude, optics::faraday_mirror_matrix(fm.rotator_angle) * e.polarization, {},
                     e.generation);
              return false;
            },
            [&](const optics::FaradayRotator &fr) {
              depart(idx, 1 - e.port, e.time, e.amplitude, optics::faraday_rotator_matrix(fr.theta) * e.polarization, {},
                     e.generation);
              return false;
            },
            [&](const optics::PhaseModulator &pm) {
              // Diagonal, hence identical in both directions.
              depart(idx, 1 - e.port, e.time, e.amplitude, optics::pm_matrix(pm, e.time) * e.polarization, {}, e.generation);
              return false;
            },
            [&](const optics::FiberSegment &f) {
              const JonesMatrix m = e.port == 0 ? f.birefringence : optics::backward_matrix(f.birefringence);
              depart(idx, 1 - e.port, e.time + f.delay_ns, e.amplitude * f.amplitude_factor(), m * e.polarization, {},
                     e.generation);
              return false;
            },
            [&](const optics::Attenuator &a) {
              if (a.amplitude > 0.0) depart(idx, 1 - e.port, e.time, e.amplitude * a.amplitude, e.polarization, {}, e.generation);
              return false;
            },
            [&](const Intercept &x) {
              double factor = 1.0;
              if (e.port == 1) {
                factor = x.backward_amplitude;
                for (const InterceptWindow &w : x.backward_windows) {
                  if (e.time >= w.start_ns && e.time < w.end_ns) {
                    factor = w.amplitude;
                    break;
                  }
                }
              }
              if (factor > 0.0) depart(idx, 1 - e.port, e.time, e.amplitude * factor, e.polarization, {}, e.generation);
              return false;
            },
            [](const Detector &) { return true; },
            [](const Source &) { return false; },
            [](const Dump &) { return false; },
        },
        element);
  }

  PulseSegment segment_from(std::size_t idx) const {
    PulseSegment seg;
    const Event &hit = events_[idx];
    seg.port = hit.node;
    seg.arrival_ns = hit.time;
    seg.amplitude = hit.amplitude;
    seg.polarization = hit.polarization;
    seg.generation = hit.generation;
    for (int i = static_cast<int>(idx); i >= 0; i = events_[static_cast<std::size_t>(i)].parent) {
      const Event &e = events_[static_cast<std::size_t>(i)];
      seg.path.push_back(e.node);
      if (e.coupler_factor != Complex{}) seg.coupler_factors.push_back(e.coupler_factor);
    }
    std::reverse(seg.path.begin(), seg.path.end());
    std::reverse(seg.coupler_factors.begin(), seg.coupler_factors.end());
    return seg;
  }

  const InterferometerSpec &spec_;
  const TraceConfig &cfg_;
  double horizon_;
  double threshold_ = 0.0;
  std::vector<std::vector<PortRef>> link_of_;
  std::vector<std::vector<std::pair<double, double>>> link_props_; ///< (delay, loss) per port
  std::vector<Event> events_;
  std::priority_queue<QueueEntry, std::vector<QueueEntry>, std::greater<>> queue_;
};

} // namespace

std::vector<PulseSegment> trace(const InterferometerSpec &spec, const TraceConfig &cfg) {
  spec.validate();
  cfg.validate(spec);
  return Tracer(spec, cfg).run();
}

std::vector<BinRecord> bin_and_interfere(const std::vector<PulseSegment> &segments, const InterferometerSpec &spec,
                                         double bin_width_ns, double pulse_rms_ns) {
  if (!(bin_width_ns > 0.0)) throw ConfigError("bin width must be positive");
  if (!(pulse_rms_ns > 0.0)) throw ConfigError("pulse rms width must be positive");

  std::vector<const PulseSegment *> order;
  order.reserve(segments.size());
  for (const PulseSegment &s : segments) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(), [](const PulseSegment *a, const PulseSegment *b) {
    return a->port != b->port ? a->port < b->port : a->arrival_ns < b->arrival_ns;
  });

  const double inv_8var = 1.0 / (8.0 * pulse_rms_ns * pulse_rms_ns);
  std::vector<BinRecord> bins;
  std::size_t i = 0;
  while (i < order.size()) {
    const int port = order[i]->port;
    const double start = order[i]->arrival_ns;
    std::size_t j = i;
    while (j < order.size() && order[j]->port == port && order[j]->arrival_ns - start < bin_width_ns) ++j;

    double intensity = 0.0;
    for (std::size_t a = i; a < j; ++a) {
      const JonesVector ea = order[a]->field();
      intensity += ea.norm2();
      for (std::size_t b = a + 1; b < j; ++b) {
        const double dt = order[a]->arrival_ns - order[b]->arrival_ns;
        const double overlap = std::exp(-dt * dt * inv_8var);
        intensity += 2.0 * overlap * optics::inner(ea, order[b]->field()).real();
      }
    }
    bins.push_back(BinRecord{port, spec.nodes[static_cast<std::size_t>(port)].id, start, std::max(intensity, 0.0), j - i});
    i = j;
  }
  return bins;
}

double bin_intensity(const std::vector<BinRecord> &bins, int port, double time_ns, double tolerance_ns) {
  for (const BinRecord &b : bins) {
    if (b.port == port && std::abs(b.bin_ns - time_ns) <= tolerance_ns) return b.intensity;
  }
  return 0.0;
}

double marker_intensity(const InterferometerSpec &spec, const TraceConfig &cfg, std::string_view detector,
                        std::string_view marker) {
  const auto segments = trace(spec, cfg);
  const auto bins = bin_and_interfere(segments, spec, cfg.bin_width_ns, cfg.pulse_rms_ns);
  return bin_intensity(bins, spec.node_index(detector), spec.marker(marker), cfg.bin_width_ns);
}

VisibilityResult visibility_scan(const std::function<InterferometerSpec(double phi_a)> &build, const TraceConfig &cfg,
                                 int n, std::string_view detector, std::string_view marker) {
  if (n < 8) throw DomainError(fmt::format("visibility scan needs at least 8 points, got {}", n));
  VisibilityResult result;
  Complex harmonic{};
  double mean = 0.0;
  for (int k = 0; k < n; ++k) {
    const double phi = 2.0 * std::numbers::pi * k / n;
    const double intensity = marker_intensity(build(phi), cfg, detector, marker);
    result.fringe.push_back({phi, intensity});
    mean += intensity / n;
    harmonic += std::polar(2.0 * intensity / n, -phi);
  }
  auto [lo, hi] = std::minmax_element(result.fringe.begin(), result.fringe.end(),
                                      [](const FringePoint &a, const FringePoint &b) { return a.intensity < b.intensity; });
  if (!(hi->intensity > 0.0)) {
    throw DegenerateError(fmt::format("no light at {} in the '{}' bin for any phase", detector, marker));
  }
  result.sampled_visibility = (hi->intensity - lo->intensity) / (hi->intensity + lo->intensity);
  const double swing = std::abs(harmonic);
  result.i_max = mean + swing;
  result.i_min = mean - swing;
  result.visibility = swing / mean;
  return result;
}

VisibilityResult visibility_scan(PlugAndPlayParams params, const TraceConfig &cfg, int n) {
  return visibility_scan(
      [&](double phi) {
        params.phi_a = phi;
        return build_plug_and_play(params);
      },
      cfg, n, "D0", "signal");
}

VisibilityResult visibility_scan(DoubleMzParams params, const TraceConfig &cfg, int n, std::string_view detector) {
  return visibility_scan(
      [&](double phi) {
        params.phi_a = phi;
        return build_double_mz(params);
      },
      cfg, n, detector, "signal");
}

void write_bins_csv(std::ostream &out, const std::vector<BinRecord> &bins) {
  out << "port,bin_ns,intensity,n_segments\n";
  for (const BinRecord &b : bins) fmt::print(out, "{},{:.17g},{:.17g},{}\n", b.port_name, b.bin_ns, b.intensity, b.n_segments);
}

void write_fringe_csv(std::ostream &out, const VisibilityResult &result) {
  out << "phi_a,intensity\n";
  for (const FringePoint &p : result.fringe) fmt::print(out, "{:.17g},{:.17g}\n", p.phi_a, p.intensity);
}

} // namespace pnp::interferometer
