#pragma once

#include <string>
#include <vector>

namespace pemsim {

enum class PacketEnd { OffGrant, Expiry, OptOut };

/// One finished (or abandoned) energy packet. weight is a device count in
/// the agent-based model and a population fraction in the bin model.
struct PacketCompletion {
    double length_s = 0.0;
    double weight = 0.0;
    PacketEnd cause = PacketEnd::Expiry;
};

/// Per-step record shared by the micro and macro simulations.
/// n_req_* and the opt-out share are fractions of the fleet; beta_* is the
/// accepted fraction of that step's requests.
struct StepTrace {
    double time_s = 0.0;
    double p_agg_kw = 0.0;
    double p_ref_kw = 0.0;
    double n_req_on = 0.0;
    double n_req_off = 0.0;
    double beta_on = 0.0;
    double beta_off = 0.0;
    double optout_fraction = 0.0;
    double temp_mean_f = 0.0;
    double temp_std_f = 0.0;
    std::vector<PacketCompletion> packet_completions;
};

struct Trace {
    std::vector<StepTrace> steps;
    /// Per-step fleet temperature distribution over the deadband grid
    /// (out-of-band mass clamped into the edge bins). Used by the
    /// distribution metrics; not part of the CSV contract.
    std::vector<std::vector<double>> temp_distribution;

    std::vector<double> power_series() const;
    std::vector<double> reference_series() const;
    std::vector<double> temp_mean_series() const;
    std::vector<double> temp_std_series() const;
    std::vector<PacketCompletion> all_completions() const;
};

/// One row per step; packet completions encoded as len:weight pairs joined
/// with ';'. Formatting is locale-free and byte-stable for a given trace.
void write_trace_csv(const Trace& trace, const std::string& path);

}  // namespace pemsim
