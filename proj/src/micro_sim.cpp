#include "pemsim/micro_sim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "pemsim/errors.hpp"
#include "pemsim/metrics.hpp"

namespace pemsim {

double MicroFleet::total_rated_kw() const {
    double acc = 0.0;
    for (const auto& d : devices) acc += d.params.p_rate;
    return acc;
}

double MicroFleet::aggregate_power() const {
    double acc = 0.0;
    for (const auto& d : devices) {
        if (d.electrically_on()) acc += d.params.p_rate;
    }
    return acc;
}

MicroFleet make_fleet(const FleetSpec& spec, std::uint64_t seed) {
    spec.nominal.validate();
    spec.band.validate();
    MicroFleet fleet;
    fleet.devices.resize(spec.size);
    Rng rng(seed, 0xf1ee7ULL);
    for (auto& d : fleet.devices) {
        d.params = spec.nominal;
        d.band = spec.band;
        if (spec.heterogeneity_rc > 0.0) {
            d.params.r_eq *= 1.0 + spec.heterogeneity_rc * rng.uniform(-1.0, 1.0);
            d.params.c_eq *= 1.0 + spec.heterogeneity_rc * rng.uniform(-1.0, 1.0);
        }
        if (spec.heterogeneity_prate > 0.0) {
            d.params.p_rate *= 1.0 + spec.heterogeneity_prate * rng.uniform(-1.0, 1.0);
        }
        d.temperature = spec.band.t_set;
    }
    return fleet;
}

void init_uniform_off(MicroFleet& fleet, std::uint64_t seed) {
    Rng rng(seed, 0x1217ULL);
    for (auto& d : fleet.devices) {
        d.mode = PemMode::OffIdle;
        d.temperature = rng.uniform(d.band.t_min(), d.band.t_max());
        d.packet_elapsed = 0.0;
        d.backoff_remaining = 0.0;
    }
}

void init_from_distribution(MicroFleet& fleet, const std::vector<double>& q_on,
                            const std::vector<double>& q_off, const PemConfig& cfg,
                            std::uint64_t seed) {
    if (q_on.size() != q_off.size() || q_on.empty()) {
        throw std::invalid_argument("init_from_distribution: bad bin vectors");
    }
    const int n_bins = static_cast<int>(q_on.size());
    std::vector<double> cumulative(2 * n_bins);
    double acc = 0.0;
    for (int i = 0; i < n_bins; ++i) cumulative[i] = (acc += std::max(0.0, q_on[i]));
    for (int i = 0; i < n_bins; ++i) {
        cumulative[n_bins + i] = (acc += std::max(0.0, q_off[i]));
    }
    if (acc <= 0.0) throw std::invalid_argument("init_from_distribution: zero mass");

    Rng rng(seed, 0x57247eULL);
    const int n_timer = cfg.n_timer_bins();
    for (auto& d : fleet.devices) {
        const double u = rng.uniform01() * acc;
        const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
        int idx = static_cast<int>(it - cumulative.begin());
        idx = std::min(idx, 2 * n_bins - 1);
        const bool on = idx < n_bins;
        const int bin = on ? idx : idx - n_bins;
        const double h = d.band.deadband / n_bins;
        d.temperature = d.band.t_min() + (bin + rng.uniform01()) * h;
        d.backoff_remaining = 0.0;
        if (on) {
            d.mode = PemMode::OnPacket;
            d.packet_len = cfg.packet_len;
            const int r = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(n_timer)));
            d.packet_elapsed = r * cfg.dt;
        } else {
            d.mode = PemMode::OffIdle;
            d.packet_elapsed = 0.0;
        }
    }
}

PacketPolicy PacketPolicy::fixed(double len) {
    PacketPolicy p;
    p.kind = Kind::Fixed;
    p.fixed_len = len;
    return p;
}

PacketPolicy PacketPolicy::sampled(std::vector<double> lengths,
                                   std::vector<double> weights) {
    PacketPolicy p;
    p.kind = Kind::Sampled;
    p.lengths = std::move(lengths);
    p.weights = std::move(weights);
    return p;
}

void PacketPolicy::validate(const PemConfig& cfg) const {
    switch (kind) {
        case Kind::Standard:
            return;
        case Kind::Fixed:
            if (!(fixed_len >= cfg.t_lockout && fixed_len <= cfg.t_on_max)) {
                throw ConfigError("packet policy: fixed length outside [lockout, t_on_max]");
            }
            return;
        case Kind::Sampled: {
            if (lengths.empty() || lengths.size() != weights.size()) {
                throw ConfigError("packet policy: empty or mismatched distribution");
            }
            double total = 0.0;
            for (std::size_t i = 0; i < lengths.size(); ++i) {
                if (weights[i] < 0.0) throw ConfigError("packet policy: negative weight");
                if (weights[i] > 0.0 &&
                    (lengths[i] < cfg.t_lockout || lengths[i] > cfg.t_on_max)) {
                    throw ConfigError(
                        "packet policy: distribution support outside [lockout, t_on_max]");
                }
                total += weights[i];
            }
            if (total <= 0.0) throw ConfigError("packet policy: zero total weight");
            return;
        }
    }
}

namespace {

double draw_packet_len(const PacketPolicy& policy, const PemConfig& cfg, Rng& rng) {
    switch (policy.kind) {
        case PacketPolicy::Kind::Standard:
            return cfg.packet_len;
        case PacketPolicy::Kind::Fixed:
            return policy.fixed_len;
        case PacketPolicy::Kind::Sampled: {
            double total = 0.0;
            for (double w : policy.weights) total += w;
            double u = rng.uniform01() * total;
            for (std::size_t i = 0; i < policy.lengths.size(); ++i) {
                u -= policy.weights[i];
                if (u <= 0.0) return policy.lengths[i];
            }
            return policy.lengths.back();
        }
    }
    return cfg.packet_len;
}

struct FleetMoments {
    double mean = 0.0;
    double std_dev = 0.0;
};

FleetMoments temperature_moments(const MicroFleet& fleet) {
    FleetMoments m;
    if (fleet.devices.empty()) return m;
    double acc = 0.0;
    for (const auto& d : fleet.devices) acc += d.temperature;
    m.mean = acc / static_cast<double>(fleet.size());
    double var = 0.0;
    for (const auto& d : fleet.devices) {
        const double dd = d.temperature - m.mean;
        var += dd * dd;
    }
    m.std_dev = std::sqrt(var / static_cast<double>(fleet.size()));
    return m;
}

Trace simulate_impl(MicroFleet fleet, const MicroSimOptions& options,
                    const ReferenceSignal& signal, const PacketPolicy& policy) {
    options.cfg.validate();
    policy.validate(options.cfg);
    if (std::abs(signal.dt - options.cfg.dt) > 1e-9) {
        throw ConfigError("simulate_micro: signal dt does not match control dt");
    }
    if (signal.size() < 2) throw ConfigError("simulate_micro: signal too short");

    const std::size_t n_dev = fleet.size();
    const std::size_t n_steps = signal.size() - 1;
    const PemConfig& cfg = options.cfg;

    std::vector<Rng> dev_rng;
    dev_rng.reserve(n_dev);
    for (std::size_t i = 0; i < n_dev; ++i) dev_rng.emplace_back(options.seed, 1000 + i);
    Rng coord_rng(options.seed, 7);

    Trace trace;
    trace.steps.reserve(n_steps);
    trace.temp_distribution.reserve(n_steps);

    std::vector<RequestKind> requests(n_dev, RequestKind::None);
    std::vector<std::uint8_t> on_granted(n_dev), off_granted(n_dev);
    std::vector<std::size_t> on_reqs, off_reqs;

    for (std::size_t k = 0; k < n_steps; ++k) {
        StepTrace row;
        row.time_s = static_cast<double>(k) * cfg.dt;
        row.p_ref_kw = signal.value(k);
        row.p_agg_kw = fleet.aggregate_power();

        std::size_t optout = 0;
        std::vector<double> dist(options.distribution_bins, 0.0);
        for (const auto& d : fleet.devices) {
            if (!d.in_pem()) ++optout;
            dist[temperature_bin_index(d.temperature, d.band.t_min(), d.band.t_max(),
                                       options.distribution_bins)] += 1.0;
        }
        if (n_dev > 0) {
            for (double& v : dist) v /= static_cast<double>(n_dev);
            row.optout_fraction = static_cast<double>(optout) / static_cast<double>(n_dev);
        }
        const FleetMoments moments = temperature_moments(fleet);
        row.temp_mean_f = moments.mean;
        row.temp_std_f = moments.std_dev;

        // Phase 1: requests from the current state.
        on_reqs.clear();
        off_reqs.clear();
        for (std::size_t i = 0; i < n_dev; ++i) {
            RequestKind r = sample_request(fleet.devices[i], cfg, dev_rng[i]);
            if (r == RequestKind::TurnOff && !options.off_requests_enabled) {
                r = RequestKind::None;
            }
            requests[i] = r;
            if (r == RequestKind::TurnOn) on_reqs.push_back(i);
            if (r == RequestKind::TurnOff) off_reqs.push_back(i);
        }
        if (n_dev > 0) {
            row.n_req_on = static_cast<double>(on_reqs.size()) / static_cast<double>(n_dev);
            row.n_req_off = static_cast<double>(off_reqs.size()) / static_cast<double>(n_dev);
        }

        // Phase 2: coordinator decision against the next reference sample.
        const GrantDecision decision = coordinator_decide(
            fleet.devices, on_reqs, off_reqs, row.p_agg_kw, signal.value(k + 1), coord_rng);
        std::fill(on_granted.begin(), on_granted.end(), 0);
        std::fill(off_granted.begin(), off_granted.end(), 0);
        for (std::size_t i : decision.on_granted) on_granted[i] = 1;
        for (std::size_t i : decision.off_granted) off_granted[i] = 1;
        if (!on_reqs.empty()) {
            row.beta_on = static_cast<double>(decision.on_granted.size()) /
                          static_cast<double>(on_reqs.size());
        }
        if (!off_reqs.empty()) {
            row.beta_off = static_cast<double>(decision.off_granted.size()) /
                           static_cast<double>(off_reqs.size());
        }

        // Phase 3: apply. Packet completions are reconstructed from the
        // before/after pair.
        for (std::size_t i = 0; i < n_dev; ++i) {
            MicroDevice& d = fleet.devices[i];
            const MicroDevice pre = d;
            double granted_len = cfg.packet_len;
            if (on_granted[i] && policy.kind != PacketPolicy::Kind::Standard) {
                granted_len = draw_packet_len(policy, cfg, dev_rng[i]);
            }
            d = device_step(pre, requests[i], on_granted[i] != 0, off_granted[i] != 0,
                            options.t_amb, cfg, granted_len, dev_rng[i]);
            if (pre.mode == PemMode::OnPacket && d.mode != PemMode::OnPacket) {
                PacketCompletion c;
                c.weight = 1.0;
                if (pre.packet_elapsed >= pre.packet_len - 1e-9) {
                    c.cause = PacketEnd::Expiry;
                    c.length_s = pre.packet_elapsed;
                } else if (off_granted[i] && requests[i] == RequestKind::TurnOff) {
                    c.cause = PacketEnd::OffGrant;
                    c.length_s = pre.packet_elapsed;
                } else {
                    c.cause = PacketEnd::OptOut;  // crossed a deadband edge mid-packet
                    c.length_s = pre.packet_elapsed + cfg.dt;
                }
                row.packet_completions.push_back(c);
            }
        }

        trace.temp_distribution.push_back(std::move(dist));
        trace.steps.push_back(std::move(row));
    }
    return trace;
}

}  // namespace

GrantDecision coordinator_decide(const std::vector<MicroDevice>& devices,
                                 const std::vector<std::size_t>& on_requests,
                                 const std::vector<std::size_t>& off_requests,
                                 double p_agg, double p_ref_next, Rng& rng) {
    GrantDecision decision;
    if (p_ref_next > p_agg && !on_requests.empty()) {
        std::vector<std::size_t> order = on_requests;
        rng.shuffle(order);
        double added = 0.0;
        for (std::size_t i : order) {
            const double p = devices[i].params.p_rate;
            if (p_agg + added + p > p_ref_next) continue;
            decision.on_granted.push_back(i);
            added += p;
        }
    } else if (p_ref_next < p_agg && !off_requests.empty()) {
        std::vector<std::size_t> order = off_requests;
        rng.shuffle(order);
        double removed = 0.0;
        for (std::size_t i : order) {
            const double p = devices[i].params.p_rate;
            if (p_agg - removed - p < p_ref_next) continue;
            decision.off_granted.push_back(i);
            removed += p;
        }
    }
    return decision;
}

Trace simulate_micro(MicroFleet fleet, const MicroSimOptions& options,
                     const ReferenceSignal& signal) {
    MicroSimOptions opts = options;
    opts.off_requests_enabled = options.off_requests_enabled;
    return simulate_impl(std::move(fleet), opts, signal, options.packet_policy);
}

Trace run_conventional_pem(MicroFleet fleet, const MicroSimOptions& options,
                           const ReferenceSignal& signal, const PacketPolicy& policy) {
    MicroSimOptions opts = options;
    opts.off_requests_enabled = false;
    opts.packet_policy = policy;
    return simulate_impl(std::move(fleet), opts, signal, policy);
}

double hysteresis_duty(const DeviceParams& params, const ThermalBand& band,
                       double t_amb, std::size_t n_devices, double horizon_s,
                       double dt, std::uint64_t seed) {
    const double duty = analytic_duty_cycle(params, band, t_amb);
    const double tau = params.tau_hours();
    const double t_on_eq = params.on_equilibrium(t_amb);
    const double t_on = tau * std::log((band.t_max() - t_on_eq) / (band.t_min() - t_on_eq));
    const double t_off = tau * std::log((t_amb - band.t_min()) / (t_amb - band.t_max()));

    // Start each device at a uniform phase of the limit cycle so the horizon
    // average is unbiased.
    Rng rng(seed, 0xd0d0ULL);
    std::vector<double> temps(n_devices);
    std::vector<Mode> modes(n_devices);
    for (std::size_t i = 0; i < n_devices; ++i) {
        const double u = rng.uniform01();
        if (u < duty) {
            const double f = duty > 0.0 ? u / duty : 0.0;
            temps[i] = t_on_eq + (band.t_max() - t_on_eq) * std::exp(-f * t_on / tau);
            modes[i] = Mode::On;
        } else {
            const double f = duty < 1.0 ? (u - duty) / (1.0 - duty) : 0.0;
            temps[i] = t_amb + (band.t_min() - t_amb) * std::exp(-f * t_off / tau);
            modes[i] = Mode::Off;
        }
    }

    const std::size_t n_steps = static_cast<std::size_t>(horizon_s / dt);
    std::size_t on_count = 0;
    for (std::size_t k = 0; k < n_steps; ++k) {
        for (std::size_t i = 0; i < n_devices; ++i) {
            if (modes[i] == Mode::On) ++on_count;
            const double next = etp_step(params, temps[i], modes[i], t_amb, dt, 0.0);
            modes[i] = hysteresis_next_mode(modes[i], temps[i], band);
            temps[i] = next;
        }
    }
    return static_cast<double>(on_count) /
           static_cast<double>(n_steps * std::max<std::size_t>(1, n_devices));
}

}  // namespace pemsim
