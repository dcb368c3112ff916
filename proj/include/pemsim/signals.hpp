#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pemsim {

/// Uniformly sampled power trajectory. Sample k sits at time k*dt seconds.
struct ReferenceSignal {
    double dt = 2.0;
    std::vector<double> samples;

    std::size_t size() const { return samples.size(); }
    double duration() const {
        return samples.empty() ? 0.0 : dt * static_cast<double>(samples.size() - 1);
    }
    double value(std::size_t k) const { return samples.at(k); }
};

struct SinusoidSpec {
    double amplitude_kw = 1000.0;
    double mean_kw = 1800.0;
    double period_s = 240.0;
};

/// amplitude*sin(2*pi*t/period) + mean, sampled on [0, horizon] inclusive.
ReferenceSignal sinusoid_ref(double horizon, double dt,
                             const SinusoidSpec& spec = SinusoidSpec{});

/// Seeded band-limited stand-in for a fast regulation signal: an
/// exponentially smoothed random walk, exactly zero-mean over the horizon
/// and peak-normalized into [-1, 1].
ReferenceSignal synth_regd(double horizon, double dt, std::uint64_t seed);

/// Affine rescale: (s - mean(s)) / max|s - mean(s)| * amplitude + target_mean.
/// A constant input maps to a constant target_mean output.
ReferenceSignal scale_signal(const ReferenceSignal& in, double target_mean_kw,
                             double amplitude_kw);

/// Two-column CSV ("time_s,power", header row) in, resampled to dt by linear
/// interpolation, then scaled as in scale_signal. Throws ConfigError on
/// malformed rows, non-monotone time, or fewer than 2 samples.
ReferenceSignal load_and_scale_signal(const std::string& path, double target_mean_kw,
                                      double amplitude_kw, double dt);

/// Raw CSV load, no resampling or scaling.
ReferenceSignal load_signal_csv(const std::string& path);

/// Writes "time_s,power" with round-trip-exact doubles.
void write_signal_csv(const ReferenceSignal& sig, const std::string& path);

}  // namespace pemsim
