#include "pemsim/pem_device.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace pemsim {

int PemConfig::n_timer_bins() const {
    return static_cast<int>(std::ceil(packet_len / dt - 1e-9));
}

int PemConfig::lockout_bin() const {
    return static_cast<int>(std::ceil(t_lockout / dt - 1e-9));
}

void PemConfig::validate() const {
    if (!(dt > 0.0)) throw std::invalid_argument("PemConfig: dt must be positive");
    if (!(t_lockout > 0.0 && t_lockout < packet_len && packet_len <= t_on_max)) {
        throw std::invalid_argument(
            "PemConfig: need 0 < t_lockout < packet_len <= t_on_max");
    }
    if (!(mttr_on > 0.0 && mttr_off > 0.0)) {
        throw std::invalid_argument("PemConfig: MTTR values must be positive");
    }
    if (!(optout_reentry > 0.0)) {
        throw std::invalid_argument("PemConfig: optout_reentry must be positive");
    }
}

double mu_on(double temperature, const ThermalBand& band, double m_r_on) {
    if (temperature <= band.t_min()) return 0.0;
    if (temperature >= band.t_max()) return std::numeric_limits<double>::infinity();
    return (temperature - band.t_min()) / (band.t_max() - temperature) * m_r_on;
}

double p_req_on(double temperature, const ThermalBand& band, double m_r_on, double dt) {
    const double mu = mu_on(temperature, band, m_r_on);
    if (std::isinf(mu)) return 1.0;
    const double p = 1.0 - std::exp(-mu * dt);
    return std::min(1.0, std::max(0.0, p));
}

double p_req_off_micro(double packet_elapsed, const PemConfig& cfg, int n_timer_bins) {
    if (packet_elapsed <= cfg.t_lockout) return 0.0;
    const int n = n_timer_bins;
    const int r = static_cast<int>(std::floor(packet_elapsed / cfg.dt + 0.5));
    if (r <= cfg.lockout_bin()) return 0.0;
    if (r >= n) return 1.0;  // expiry is certain
    const double mu = (static_cast<double>(r - cfg.lockout_bin()) /
                       static_cast<double>(n - r)) *
                      cfg.m_r_off();
    return 1.0 - std::exp(-mu * cfg.dt);
}

RequestKind sample_request(const MicroDevice& device, const PemConfig& cfg, Rng& rng) {
    if (!device.in_pem() || device.backoff_remaining > 0.0) return RequestKind::None;
    if (device.mode == PemMode::OffIdle) {
        const double p = p_req_on(device.temperature, device.band, cfg.m_r_on(), cfg.dt);
        if (p >= 1.0) return RequestKind::TurnOn;
        if (p <= 0.0) return RequestKind::None;
        return rng.bernoulli(p) ? RequestKind::TurnOn : RequestKind::None;
    }
    // OnPacket
    const double p = p_req_off_micro(device.packet_elapsed, cfg, cfg.n_timer_bins());
    if (p >= 1.0) return RequestKind::TurnOff;
    if (p <= 0.0) return RequestKind::None;
    return rng.bernoulli(p) ? RequestKind::TurnOff : RequestKind::None;
}

MicroDevice device_step(const MicroDevice& device, RequestKind requested,
                        bool on_granted, bool off_granted, double t_amb,
                        const PemConfig& cfg, double granted_packet_len, Rng& rng) {
    MicroDevice d = device;

    // Control phase: packet expiry wins over everything, then grants.
    if (d.mode == PemMode::OnPacket) {
        if (d.packet_elapsed >= d.packet_len - 1e-9) {
            d.mode = PemMode::OffIdle;  // expiry, grants irrelevant
            d.packet_elapsed = 0.0;
            d.backoff_remaining = 0.0;
        } else if (off_granted && requested == RequestKind::TurnOff) {
            d.mode = PemMode::OffIdle;
            d.packet_elapsed = 0.0;
            d.backoff_remaining = 0.0;
        }
    } else if (d.mode == PemMode::OffIdle && on_granted &&
               requested == RequestKind::TurnOn) {
        d.mode = PemMode::OnPacket;
        d.packet_elapsed = 0.0;
        d.packet_len = granted_packet_len;
        d.backoff_remaining = 0.0;
    }

    // A denied request starts the MTTR backoff for that request type.
    if (requested == RequestKind::TurnOn && !on_granted) {
        d.backoff_remaining = cfg.mttr_on;
    } else if (requested == RequestKind::TurnOff && !off_granted &&
               d.mode == PemMode::OnPacket) {
        d.backoff_remaining = cfg.mttr_off;
    }

    // Thermal step with the post-switch mode.
    double noise = 0.0;
    if (d.params.noise_std > 0.0) {
        const double dt_h = cfg.dt / kSecondsPerHour;
        noise = rng.normal() * d.params.noise_std / std::sqrt(dt_h);
    }
    const Mode m = d.electrically_on() ? Mode::On : Mode::Off;
    d.temperature = etp_step(d.params, d.temperature, m, t_amb, cfg.dt, noise);

    // Timers.
    if (d.mode == PemMode::OnPacket) d.packet_elapsed += cfg.dt;
    if (d.backoff_remaining > 0.0) {
        d.backoff_remaining = std::max(0.0, d.backoff_remaining - cfg.dt);
    }

    // Opt-out state machine on the new temperature.
    if (d.in_pem()) {
        if (d.temperature >= d.band.t_max()) {
            d.mode = PemMode::OptOutOn;
            d.packet_elapsed = 0.0;
            d.backoff_remaining = 0.0;
        } else if (d.temperature <= d.band.t_min()) {
            d.mode = PemMode::OptOutOff;
            d.packet_elapsed = 0.0;
            d.backoff_remaining = 0.0;
        }
    } else if (d.mode == PemMode::OptOutOn &&
               d.temperature <= d.band.t_max() - cfg.optout_reentry) {
        d.mode = PemMode::OffIdle;
        d.backoff_remaining = 0.0;
    } else if (d.mode == PemMode::OptOutOff &&
               d.temperature >= d.band.t_min() + cfg.optout_reentry) {
        d.mode = PemMode::OffIdle;
        d.backoff_remaining = 0.0;
    }

    return d;
}

MicroDevice device_step(const MicroDevice& device, RequestKind requested,
                        bool on_granted, bool off_granted, double t_amb,
                        const PemConfig& cfg, Rng& rng) {
    return device_step(device, requested, on_granted, off_granted, t_amb, cfg,
                       cfg.packet_len, rng);
}

}  // namespace pemsim
