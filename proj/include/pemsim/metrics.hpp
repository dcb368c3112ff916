#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "pemsim/trace.hpp"

namespace pemsim {

/// Bin index on a uniform grid over [t_min, t_max]; out-of-band values are
/// clamped into the edge bins.
inline int temperature_bin_index(double t, double t_min, double t_max, int n_bins) {
    const double h = (t_max - t_min) / n_bins;
    const int i = static_cast<int>(std::floor((t - t_min) / h));
    return std::clamp(i, 0, n_bins - 1);
}

/// Root mean squared pointwise difference. Throws on length mismatch.
double rmse(const std::vector<double>& a, const std::vector<double>& b);

/// Sample Pearson correlation. Throws when either series has zero variance.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

/// Spearman rank correlation (average ranks on ties).
double spearman(const std::vector<double>& a, const std::vector<double>& b);

/// Per-step fleet temperature mean/std series.
struct TempStats {
    std::vector<double> mean;
    std::vector<double> std_dev;
};

TempStats temp_stats_of(const Trace& trace);

/// Norms of the per-step differences between two TempStats series. The
/// *_l2 values are normalized by sqrt(K) so they read as a per-step
/// magnitude; the raw 2-norms are reported alongside.
struct TempStatNorms {
    double mean_l2 = 0.0;
    double mean_l2_raw = 0.0;
    double mean_linf = 0.0;
    double std_l2 = 0.0;
    double std_l2_raw = 0.0;
    double std_linf = 0.0;
};

TempStatNorms temp_stat_norms(const TempStats& a, const TempStats& b);

/// Mean Kullback-Leibler divergence over time steps,
/// (1/K) sum_k sum_i p_i[k] log(p_i[k]/q_i[k]), with 0*log0 = 0. The q
/// (micro) side is smoothed by +epsilon and renormalized per step.
double mean_kld(const std::vector<std::vector<double>>& macro_dist,
                const std::vector<std::vector<double>>& micro_dist,
                double epsilon = 1e-9);

/// Weighted packet-length statistics. Lengths below min_length_s are
/// excluded; the histogram spans [min_length_s, max_length_s].
struct PacketLengthStats {
    double mean_s = 0.0;
    double std_s = 0.0;
    double total_weight = 0.0;
    std::vector<double> hist_edges;   // size bins+1
    std::vector<double> hist_weight;  // size bins
};

PacketLengthStats packet_length_stats(const std::vector<PacketCompletion>& completions,
                                      double min_length_s, double max_length_s,
                                      double bin_width_s = 10.0);

}  // namespace pemsim
