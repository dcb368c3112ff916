#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pemsim/macro_model.hpp"
#include "pemsim/metrics.hpp"
#include "pemsim/micro_sim.hpp"

namespace pemsim {

inline constexpr const char* kVersion = "0.1.0";

enum class SignalKind { Sinusoid, File, Synth };
enum class InitKind { UniformOff, SteadyState };

/// One experiment description. Parsed from a flat dotted-key text file;
/// every field has a default except the seed, which must be set explicitly.
struct ScenarioConfig {
    std::size_t fleet_size = 2000;
    double heterogeneity = 0.05;        // relative half-width for r_eq, c_eq
    double heterogeneity_prate = 0.0;   // relative half-width for p_rate

    DeviceParams device;                // nominal parameters
    double noise_per_step_f = 0.01;     // realized per-step disturbance std, degF
    ThermalBand band;
    double t_amb = 89.0;

    PemConfig pem;
    int grid_bins = 40;

    SignalKind signal_kind = SignalKind::Sinusoid;
    std::string signal_file;
    double signal_mean_kw = 1800.0;
    double signal_amplitude_kw = 1000.0;
    double signal_period_s = 240.0;

    double horizon_s = 3600.0;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out_dir = "out";
    InitKind init = InitKind::UniformOff;

    double robustness_grid_max = 0.20;
    double robustness_grid_step = 0.02;
    int robustness_seeds = 3;

    double event_threshold = 0.10;  // opt-out fraction marking the surge
    double hist_bin_s = 10.0;
    bool dump_matrices = false;

    /// noise_std in degF/sqrt(h) matching noise_per_step_f at pem.dt.
    double noise_std_rate() const;
    /// Canonical key=value serialization (sorted keys).
    std::string canonical_text() const;
    std::uint64_t config_hash() const;
    void validate() const;
};

/// Parses `key = value` lines, '#' comments. Unknown keys are errors.
ScenarioConfig parse_config_text(const std::string& text);
ScenarioConfig load_config(const std::string& path);

// -- experiment runners -----------------------------------------------------
// Every runner writes traces, a summary key-value file, and a manifest into
// config.out_dir, and returns the numbers it computed.

struct ValidateReport {
    Trace micro;
    Trace macro;
    double power_rmse_kw = 0.0;
    TempStatNorms norms;
    double final_dist_pearson = 0.0;
    double event_time_micro_s = -1.0;
    double event_time_macro_s = -1.0;
    double nominal_kw = 0.0;
};

/// Sinusoid-tracking comparison of the micro and macro models from an
/// all-OFF uniform start.
ValidateReport run_validate(const ScenarioConfig& config);

struct TrackReport {
    Trace micro;
    Trace macro;
    double rmse_macro_ref_kw = 0.0;
    double rmse_micro_ref_kw = 0.0;
    double rmse_macro_micro_kw = 0.0;
    double rmse_mean_temp_f = 0.0;
};

/// Regulation-signal tracking from a steady-state start.
TrackReport run_track(const ScenarioConfig& config);

struct RobustnessPoint {
    double variance = 0.0;
    double kld_mean = 0.0;
    double kld_std = 0.0;
    double kld_worst = 0.0;
    double rmse_pct_mean = 0.0;
    double rmse_pct_worst = 0.0;
    int failed_runs = 0;
};

struct RobustnessReport {
    std::vector<RobustnessPoint> points;
    double spearman_variance_kld = 0.0;
    double spearman_kld_rmse = 0.0;
};

/// Heterogeneity sweep; sub-runs execute concurrently, merged in grid order.
RobustnessReport run_robustness(const ScenarioConfig& config);

struct PacketStudyReport {
    PacketLengthStats macro_lengths;
    PacketLengthStats micro_lengths;
    double fixed_len_s = 0.0;
    double rmse_fixed_kw = 0.0;
    double rmse_sampled_kw = 0.0;
    double rmse_enhanced_kw = 0.0;        // bin model tracking error
    double rmse_enhanced_micro_kw = 0.0;  // agent model tracking error
};

/// Variable-packet-length study: extract the length distribution from the
/// enhanced run, then drive conventional (no-OFF-request) PEM with a fixed
/// mean-length packet and with sampled lengths on the same signal and seed.
PacketStudyReport run_packet_study(const ScenarioConfig& config);

struct SteadyStateReport {
    Eigen::VectorXd stationary;  // 2N, on bins first
    double on_mass = 0.0;
    double analytic_duty = 0.0;
    double nominal_kw = 0.0;
};

SteadyStateReport run_steady_state(const ScenarioConfig& config);

// -- shared helpers ----------------------------------------------------------

ReferenceSignal make_reference(const ScenarioConfig& config);
/// Time of the first step where the opt-out fraction reaches the threshold,
/// or -1 when it never does.
double first_optout_crossing(const Trace& trace, double threshold);
void write_summary(const std::map<std::string, double>& values, const std::string& path);
void write_manifest(const ScenarioConfig& config, const std::string& path);

}  // namespace pemsim
