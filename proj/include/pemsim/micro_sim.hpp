#pragma once

#include <cstdint>
#include <vector>

#include "pemsim/pem_device.hpp"
#include "pemsim/signals.hpp"
#include "pemsim/trace.hpp"

namespace pemsim {

/// Population of PEM devices. Heterogeneous parameters are sampled once at
/// construction; the shared deadband lives on each device.
struct MicroFleet {
    std::vector<MicroDevice> devices;

    std::size_t size() const { return devices.size(); }
    double total_rated_kw() const;
    /// p_rate summed over electrically-ON devices, in kW.
    double aggregate_power() const;
};

struct FleetSpec {
    DeviceParams nominal;
    ThermalBand band;
    std::size_t size = 1000;
    double heterogeneity_rc = 0.0;     // relative half-width for r_eq, c_eq
    double heterogeneity_prate = 0.0;  // relative half-width for p_rate
};

/// Samples device parameters i.i.d. uniform in [nominal*(1-h), nominal*(1+h)].
MicroFleet make_fleet(const FleetSpec& spec, std::uint64_t seed);

/// All devices OFF, temperatures uniform over the deadband.
void init_uniform_off(MicroFleet& fleet, std::uint64_t seed);

/// Sample mode and temperature from a stationary distribution over the
/// 2N-bin grid laid out (on bins 0..n-1, off bins n..2n-1), bin 0 coldest.
/// ON devices receive a uniformly distributed packet timer.
void init_from_distribution(MicroFleet& fleet, const std::vector<double>& q_on,
                            const std::vector<double>& q_off, const PemConfig& cfg,
                            std::uint64_t seed);

/// How granted ON requests receive their packet length.
struct PacketPolicy {
    enum class Kind { Standard, Fixed, Sampled };
    Kind kind = Kind::Standard;
    double fixed_len = 0.0;
    std::vector<double> lengths;  // discrete support, seconds
    std::vector<double> weights;  // unnormalized masses

    static PacketPolicy standard() { return {}; }
    static PacketPolicy fixed(double len);
    static PacketPolicy sampled(std::vector<double> lengths, std::vector<double> weights);
    void validate(const PemConfig& cfg) const;
};

struct MicroSimOptions {
    PemConfig cfg;
    double t_amb = 89.0;
    std::uint64_t seed = 1;
    bool off_requests_enabled = true;
    PacketPolicy packet_policy;
    int distribution_bins = 40;  // grid for the recorded temperature histogram
};

/// Indices into the fleet for granted requests.
struct GrantDecision {
    std::vector<std::size_t> on_granted;
    std::vector<std::size_t> off_granted;
};

/// Greedy anonymous granting: when the reference calls for more power,
/// grant uniformly shuffled ON requests while the next grant still fits
/// under the reference (never overshoot); symmetric for OFF requests on a
/// decrease. At most one request type is granted per step.
GrantDecision coordinator_decide(const std::vector<MicroDevice>& devices,
                                 const std::vector<std::size_t>& on_requests,
                                 const std::vector<std::size_t>& off_requests,
                                 double p_agg, double p_ref_next, Rng& rng);

/// Synchronous fleet loop: sample requests, decide grants, step every
/// device, record. Deterministic for a given options.seed. Throws
/// ConfigError when the signal does not cover the horizon at cfg.dt.
Trace simulate_micro(MicroFleet fleet, const MicroSimOptions& options,
                     const ReferenceSignal& signal);

/// Conventional PEM: no OFF requests, packet lengths from the policy.
Trace run_conventional_pem(MicroFleet fleet, const MicroSimOptions& options,
                           const ReferenceSignal& signal, const PacketPolicy& policy);

/// Mean ON fraction of a plain hysteresis fleet (no PEM), devices started
/// at uniformly random phases of the noise-free limit cycle.
double hysteresis_duty(const DeviceParams& params, const ThermalBand& band,
                       double t_amb, std::size_t n_devices, double horizon_s,
                       double dt, std::uint64_t seed);

}  // namespace pemsim
