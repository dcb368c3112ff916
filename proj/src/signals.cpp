#include "pemsim/signals.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pemsim/errors.hpp"
#include "pemsim/rng.hpp"

namespace pemsim {

namespace {

std::size_t sample_count(double horizon, double dt) {
    if (!(horizon > 0.0) || !(dt > 0.0)) {
        throw ConfigError("signal: horizon and dt must be positive");
    }
    return static_cast<std::size_t>(std::floor(horizon / dt + 1e-9)) + 1;
}

}  // namespace

ReferenceSignal sinusoid_ref(double horizon, double dt, const SinusoidSpec& spec) {
    ReferenceSignal sig;
    sig.dt = dt;
    const std::size_t n = sample_count(horizon, dt);
    sig.samples.reserve(n);
    const double omega = 2.0 * M_PI / spec.period_s;
    for (std::size_t k = 0; k < n; ++k) {
        const double t = static_cast<double>(k) * dt;
        sig.samples.push_back(spec.amplitude_kw * std::sin(omega * t) + spec.mean_kw);
    }
    return sig;
}

ReferenceSignal synth_regd(double horizon, double dt, std::uint64_t seed) {
    ReferenceSignal sig;
    sig.dt = dt;
    const std::size_t n = sample_count(horizon, dt);
    sig.samples.resize(n);

    Rng rng(seed, 0x5167d0ULL);
    // Random walk with a ~45 s low-pass, so excursions move on the tens of
    // seconds scale like a fast regulation product.
    const double alpha = dt / (45.0 + dt);
    double walk = 0.0;
    double smooth = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        walk += rng.normal() * std::sqrt(dt);
        smooth += alpha * (walk - smooth);
        sig.samples[k] = smooth;
    }

    double mean = 0.0;
    for (double v : sig.samples) mean += v;
    mean /= static_cast<double>(n);
    double peak = 0.0;
    for (double& v : sig.samples) {
        v -= mean;
        peak = std::max(peak, std::abs(v));
    }
    if (peak > 0.0) {
        for (double& v : sig.samples) v /= peak;
    }
    return sig;
}

ReferenceSignal scale_signal(const ReferenceSignal& in, double target_mean_kw,
                             double amplitude_kw) {
    if (in.samples.empty()) throw ConfigError("scale_signal: empty signal");
    ReferenceSignal out;
    out.dt = in.dt;
    out.samples.resize(in.samples.size());

    double mean = 0.0;
    for (double v : in.samples) mean += v;
    mean /= static_cast<double>(in.samples.size());
    double peak = 0.0;
    for (double v : in.samples) peak = std::max(peak, std::abs(v - mean));

    for (std::size_t k = 0; k < in.samples.size(); ++k) {
        const double unit = peak > 0.0 ? (in.samples[k] - mean) / peak : 0.0;
        out.samples[k] = unit * amplitude_kw + target_mean_kw;
    }
    return out;
}

ReferenceSignal load_signal_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("signal file not found: " + path);

    ReferenceSignal sig;
    std::vector<double> times;
    std::string line;
    bool first = true;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (first) {  // header row
            first = false;
            continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string::npos) {
            throw ConfigError("signal file " + path + ": malformed row at line " +
                              std::to_string(line_no));
        }
        try {
            times.push_back(std::stod(line.substr(0, comma)));
            sig.samples.push_back(std::stod(line.substr(comma + 1)));
        } catch (const std::exception&) {
            throw ConfigError("signal file " + path + ": unparsable number at line " +
                              std::to_string(line_no));
        }
    }
    if (sig.samples.size() < 2) {
        throw ConfigError("signal file " + path + ": needs at least 2 samples");
    }
    for (std::size_t k = 1; k < times.size(); ++k) {
        if (!(times[k] > times[k - 1])) {
            throw ConfigError("signal file " + path + ": time must be strictly increasing");
        }
    }
    sig.dt = times[1] - times[0];
    // Tolerate slightly non-uniform input; the loader below resamples anyway.
    return sig;
}

ReferenceSignal load_and_scale_signal(const std::string& path, double target_mean_kw,
                                      double amplitude_kw, double dt) {
    const ReferenceSignal raw = load_signal_csv(path);
    // Resample onto the requested dt by linear interpolation.
    ReferenceSignal resampled;
    resampled.dt = dt;
    const double horizon = raw.duration();
    const std::size_t n = static_cast<std::size_t>(std::floor(horizon / dt + 1e-9)) + 1;
    resampled.samples.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double t = static_cast<double>(k) * dt;
        const double pos = t / raw.dt;
        const std::size_t i = std::min(static_cast<std::size_t>(pos), raw.size() - 2);
        const double frac = pos - static_cast<double>(i);
        resampled.samples.push_back(raw.samples[i] * (1.0 - frac) +
                                    raw.samples[i + 1] * frac);
    }
    return scale_signal(resampled, target_mean_kw, amplitude_kw);
}

void write_signal_csv(const ReferenceSignal& sig, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write signal file: " + path);
    out << "time_s,power\n";
    char buf[64];
    for (std::size_t k = 0; k < sig.samples.size(); ++k) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n",
                      static_cast<double>(k) * sig.dt, sig.samples[k]);
        out << buf;
    }
}

}  // namespace pemsim
