#pragma once

#include "pemsim/rng.hpp"
#include "pemsim/thermal.hpp"

namespace pemsim {

/// Fleet-wide PEM parameters. Durations in seconds; request rates in Hz are
/// tied to the mean-time-to-request values (rate = 1/MTTR).
struct PemConfig {
    double packet_len = 300.0;   // delta
    double dt = 2.0;             // control timestep
    double mttr_on = 300.0;      // backoff after a denied ON request
    double mttr_off = 120.0;     // backoff after a denied OFF request
    double t_lockout = 60.0;     // no OFF requests before this much ON time
    double t_on_max = 300.0;
    double optout_reentry = 0.25;  // degF inside the violated bound

    double m_r_on() const { return 1.0 / mttr_on; }
    double m_r_off() const { return 1.0 / mttr_off; }

    /// Timer bin count n = ceil(packet_len / dt).
    int n_timer_bins() const;
    /// Smallest timer index r with r*dt >= t_lockout.
    int lockout_bin() const;

    void validate() const;
};

enum class PemMode { OffIdle, OnPacket, OptOutOn, OptOutOff };

enum class RequestKind { None, TurnOn, TurnOff };

/// One PEM-enabled AC unit.
struct MicroDevice {
    DeviceParams params;
    ThermalBand band;
    double temperature = 73.0;
    PemMode mode = PemMode::OffIdle;
    double packet_elapsed = 0.0;    // meaningful only in OnPacket
    double packet_len = 300.0;      // length of the current packet
    double backoff_remaining = 0.0;

    bool electrically_on() const {
        return mode == PemMode::OnPacket || mode == PemMode::OptOutOn;
    }
    bool in_pem() const {
        return mode == PemMode::OffIdle || mode == PemMode::OnPacket;
    }
};

/// Temperature-dependent ON-request rate in Hz. Returns +inf at and above
/// t_max so the request probability saturates at 1.
double mu_on(double temperature, const ThermalBand& band, double m_r_on);

/// 1 - exp(-mu_on*dt), clamped to [0,1].
double p_req_on(double temperature, const ThermalBand& band, double m_r_on, double dt);

/// OFF-request probability for a device that has consumed packet_elapsed
/// seconds: zero through the lockout, then 1 - exp(-mu*dt) with
/// mu = (r - r_lo)/(n - r) * m_r_off at timer index r, reaching 1 at expiry.
double p_req_off_micro(double packet_elapsed, const PemConfig& cfg, int n_timer_bins);

/// Request sampled from the device's current state. Opted-out and
/// backed-off devices never request; a device at packet expiry requests OFF
/// with certainty (and will turn off regardless of the answer).
RequestKind sample_request(const MicroDevice& device, const PemConfig& cfg, Rng& rng);

/// One synchronous device update: apply grants/denials decided for this
/// step, run the thermal step, advance timers, then the opt-out state
/// machine. `requested` must be what sample_request returned this step;
/// `granted_packet_len` is the packet length attached to an ON grant
/// (cfg.packet_len under standard PEM, policy-driven otherwise).
MicroDevice device_step(const MicroDevice& device, RequestKind requested,
                        bool on_granted, bool off_granted, double t_amb,
                        const PemConfig& cfg, double granted_packet_len, Rng& rng);

/// Convenience overload matching the standard fixed packet length.
MicroDevice device_step(const MicroDevice& device, RequestKind requested,
                        bool on_granted, bool off_granted, double t_amb,
                        const PemConfig& cfg, Rng& rng);

}  // namespace pemsim
