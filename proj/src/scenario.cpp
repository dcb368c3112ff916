#include "pemsim/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <sstream>

#include "pemsim/errors.hpp"

namespace pemsim {

namespace fs = std::filesystem;

double ScenarioConfig::noise_std_rate() const {
    if (noise_per_step_f <= 0.0) return 0.0;
    const double dt_h = pem.dt / kSecondsPerHour;
    return noise_per_step_f / std::sqrt(dt_h);
}

void ScenarioConfig::validate() const {
    if (!seed_set) throw ConfigError("config: run.seed is required");
    device.validate();
    band.validate();
    pem.validate();
    if (grid_bins < 2) throw ConfigError("config: grid.n_bins must be at least 2");
    if (!(horizon_s > 0.0)) throw ConfigError("config: run.horizon_s must be positive");
    if (signal_kind == SignalKind::File && signal_file.empty()) {
        throw ConfigError("config: signal.kind=file requires signal.file");
    }
    if (signal_kind == SignalKind::File && !fs::exists(signal_file)) {
        throw ConfigError("config: signal file does not exist: " + signal_file);
    }
    if (heterogeneity < 0.0 || heterogeneity >= 1.0 || heterogeneity_prate < 0.0 ||
        heterogeneity_prate >= 1.0) {
        throw ConfigError("config: heterogeneity fractions must lie in [0,1)");
    }
    if (robustness_grid_step <= 0.0 || robustness_grid_max < 0.0 ||
        robustness_seeds < 1) {
        throw ConfigError("config: bad robustness sweep settings");
    }
}

namespace {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string signal_kind_name(SignalKind k) {
    switch (k) {
        case SignalKind::Sinusoid: return "sinusoid";
        case SignalKind::File: return "file";
        case SignalKind::Synth: return "synth";
    }
    return "sinusoid";
}

std::string init_kind_name(InitKind k) {
    return k == InitKind::SteadyState ? "steady_state" : "uniform_off";
}

}  // namespace

std::string ScenarioConfig::canonical_text() const {
    std::map<std::string, std::string> kv;
    kv["fleet.size"] = std::to_string(fleet_size);
    kv["fleet.heterogeneity"] = format_double(heterogeneity);
    kv["fleet.heterogeneity_prate"] = format_double(heterogeneity_prate);
    kv["device.r_eq_f_per_kw"] = format_double(device.r_eq);
    kv["device.c_eq_kwh_per_f"] = format_double(device.c_eq);
    kv["device.cop"] = format_double(device.eta);
    kv["device.p_rate_kw"] = format_double(device.p_rate);
    kv["device.noise_per_step_f"] = format_double(noise_per_step_f);
    kv["band.t_set_f"] = format_double(band.t_set);
    kv["band.deadband_f"] = format_double(band.deadband);
    kv["ambient.t_amb_f"] = format_double(t_amb);
    kv["pem.packet_len_s"] = format_double(pem.packet_len);
    kv["pem.dt_s"] = format_double(pem.dt);
    kv["pem.mttr_on_s"] = format_double(pem.mttr_on);
    kv["pem.mttr_off_s"] = format_double(pem.mttr_off);
    kv["pem.lockout_s"] = format_double(pem.t_lockout);
    kv["pem.t_on_max_s"] = format_double(pem.t_on_max);
    kv["pem.optout_reentry_f"] = format_double(pem.optout_reentry);
    kv["grid.n_bins"] = std::to_string(grid_bins);
    kv["signal.kind"] = signal_kind_name(signal_kind);
    kv["signal.file"] = signal_file;
    kv["signal.mean_kw"] = format_double(signal_mean_kw);
    kv["signal.amplitude_kw"] = format_double(signal_amplitude_kw);
    kv["signal.period_s"] = format_double(signal_period_s);
    kv["run.horizon_s"] = format_double(horizon_s);
    kv["run.seed"] = std::to_string(seed);
    kv["run.out_dir"] = out_dir;
    kv["run.init"] = init_kind_name(init);
    kv["robustness.grid_max"] = format_double(robustness_grid_max);
    kv["robustness.grid_step"] = format_double(robustness_grid_step);
    kv["robustness.seeds"] = std::to_string(robustness_seeds);
    kv["study.event_threshold"] = format_double(event_threshold);
    kv["study.hist_bin_s"] = format_double(hist_bin_s);
    kv["debug.dump_matrices"] = dump_matrices ? "true" : "false";

    std::ostringstream out;
    for (const auto& [key, value] : kv) out << key << " = " << value << '\n';
    return out.str();
}

std::uint64_t ScenarioConfig::config_hash() const {
    // FNV-1a over the canonical serialization.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : canonical_text()) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: bad numeric value for " + key + ": '" + value + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        return std::stoull(value);
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer value for " + key + ": '" + value + "'");
    }
}

void apply_key(ScenarioConfig& c, const std::string& key, const std::string& value) {
    if (key == "fleet.size") {
        c.fleet_size = static_cast<std::size_t>(parse_u64(key, value));
    } else if (key == "fleet.heterogeneity") {
        c.heterogeneity = parse_double(key, value);
    } else if (key == "fleet.heterogeneity_prate") {
        c.heterogeneity_prate = parse_double(key, value);
    } else if (key == "device.r_eq_f_per_kw") {
        c.device.r_eq = parse_double(key, value);
    } else if (key == "device.c_eq_kwh_per_f") {
        c.device.c_eq = parse_double(key, value);
    } else if (key == "device.cop") {
        c.device.eta = parse_double(key, value);
    } else if (key == "device.p_rate_kw") {
        c.device.p_rate = parse_double(key, value);
    } else if (key == "device.noise_per_step_f") {
        c.noise_per_step_f = parse_double(key, value);
    } else if (key == "band.t_set_f") {
        c.band.t_set = parse_double(key, value);
    } else if (key == "band.deadband_f") {
        c.band.deadband = parse_double(key, value);
    } else if (key == "ambient.t_amb_f") {
        c.t_amb = parse_double(key, value);
    } else if (key == "pem.packet_len_s") {
        c.pem.packet_len = parse_double(key, value);
    } else if (key == "pem.dt_s") {
        c.pem.dt = parse_double(key, value);
    } else if (key == "pem.mttr_on_s") {
        c.pem.mttr_on = parse_double(key, value);
    } else if (key == "pem.mttr_off_s") {
        c.pem.mttr_off = parse_double(key, value);
    } else if (key == "pem.lockout_s") {
        c.pem.t_lockout = parse_double(key, value);
    } else if (key == "pem.t_on_max_s") {
        c.pem.t_on_max = parse_double(key, value);
    } else if (key == "pem.optout_reentry_f") {
        c.pem.optout_reentry = parse_double(key, value);
    } else if (key == "grid.n_bins") {
        c.grid_bins = static_cast<int>(parse_u64(key, value));
    } else if (key == "signal.kind") {
        if (value == "sinusoid") c.signal_kind = SignalKind::Sinusoid;
        else if (value == "file") c.signal_kind = SignalKind::File;
        else if (value == "synth") c.signal_kind = SignalKind::Synth;
        else throw ConfigError("config: unknown signal.kind '" + value + "'");
    } else if (key == "signal.file") {
        c.signal_file = value;
    } else if (key == "signal.mean_kw") {
        c.signal_mean_kw = parse_double(key, value);
    } else if (key == "signal.amplitude_kw") {
        c.signal_amplitude_kw = parse_double(key, value);
    } else if (key == "signal.period_s") {
        c.signal_period_s = parse_double(key, value);
    } else if (key == "run.horizon_s") {
        c.horizon_s = parse_double(key, value);
    } else if (key == "run.seed") {
        c.seed = parse_u64(key, value);
        c.seed_set = true;
    } else if (key == "run.out_dir") {
        c.out_dir = value;
    } else if (key == "run.init") {
        if (value == "uniform_off") c.init = InitKind::UniformOff;
        else if (value == "steady_state") c.init = InitKind::SteadyState;
        else throw ConfigError("config: unknown run.init '" + value + "'");
    } else if (key == "robustness.grid_max") {
        c.robustness_grid_max = parse_double(key, value);
    } else if (key == "robustness.grid_step") {
        c.robustness_grid_step = parse_double(key, value);
    } else if (key == "robustness.seeds") {
        c.robustness_seeds = static_cast<int>(parse_u64(key, value));
    } else if (key == "study.event_threshold") {
        c.event_threshold = parse_double(key, value);
    } else if (key == "study.hist_bin_s") {
        c.hist_bin_s = parse_double(key, value);
    } else if (key == "debug.dump_matrices") {
        if (value == "true" || value == "1") c.dump_matrices = true;
        else if (value == "false" || value == "0") c.dump_matrices = false;
        else throw ConfigError("config: bad boolean for debug.dump_matrices");
    } else {
        throw ConfigError("config: unknown key '" + key + "'");
    }
}

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

}  // namespace

ScenarioConfig parse_config_text(const std::string& text) {
    ScenarioConfig config;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: expected key = value at line " +
                              std::to_string(line_no));
        }
        apply_key(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return config;
}

ScenarioConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_config_text(buffer.str());
}

// -- shared helpers ----------------------------------------------------------

ReferenceSignal make_reference(const ScenarioConfig& config) {
    switch (config.signal_kind) {
        case SignalKind::Sinusoid: {
            SinusoidSpec spec;
            spec.amplitude_kw = config.signal_amplitude_kw;
            spec.mean_kw = config.signal_mean_kw;
            spec.period_s = config.signal_period_s;
            return sinusoid_ref(config.horizon_s, config.pem.dt, spec);
        }
        case SignalKind::Synth: {
            const ReferenceSignal unit =
                synth_regd(config.horizon_s, config.pem.dt, config.seed);
            return scale_signal(unit, config.signal_mean_kw, config.signal_amplitude_kw);
        }
        case SignalKind::File:
            return load_and_scale_signal(config.signal_file, config.signal_mean_kw,
                                         config.signal_amplitude_kw, config.pem.dt);
    }
    throw ConfigError("config: unhandled signal kind");
}

double first_optout_crossing(const Trace& trace, double threshold) {
    for (const auto& s : trace.steps) {
        if (s.optout_fraction >= threshold) return s.time_s;
    }
    return -1.0;
}

void write_summary(const std::map<std::string, double>& values, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write summary file: " + path);
    for (const auto& [key, value] : values) {
        out << key << '=' << format_double(value) << '\n';
    }
}

void write_manifest(const ScenarioConfig& config, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write manifest file: " + path);
    char hash[32];
    std::snprintf(hash, sizeof(hash), "%016llx",
                  static_cast<unsigned long long>(config.config_hash()));
    out << "version=" << kVersion << '\n';
    out << "config_hash=" << hash << '\n';
    out << "seed=" << config.seed << '\n';
}

namespace {

struct BuiltScenario {
    MicroFleet fleet;
    MicroSimOptions micro_options;
    MacroMatrices mats;
    MacroState macro_init;
    MacroSimOptions macro_options;
    ReferenceSignal signal;
    double nominal_kw = 0.0;
};

FleetSpec fleet_spec_of(const ScenarioConfig& config) {
    FleetSpec spec;
    spec.nominal = config.device;
    spec.nominal.noise_std = config.noise_std_rate();
    spec.band = config.band;
    spec.size = config.fleet_size;
    spec.heterogeneity_rc = config.heterogeneity;
    spec.heterogeneity_prate = config.heterogeneity_prate;
    return spec;
}

BuiltScenario build_scenario(const ScenarioConfig& config) {
    config.validate();
    BuiltScenario built;
    built.signal = make_reference(config);

    built.fleet = make_fleet(fleet_spec_of(config), config.seed);
    built.micro_options.cfg = config.pem;
    built.micro_options.t_amb = config.t_amb;
    built.micro_options.seed = config.seed;
    built.micro_options.distribution_bins = config.grid_bins;

    const BinGrid grid{config.grid_bins, config.band};
    DeviceParams macro_params = config.device;
    macro_params.noise_std = config.noise_std_rate();
    built.mats = build_macro_matrices(macro_params, grid, config.t_amb, config.pem);
    built.macro_options.fleet_rated_kw =
        static_cast<double>(config.fleet_size) * config.device.p_rate;
    built.nominal_kw = built.macro_options.fleet_rated_kw *
                       analytic_duty_cycle(config.device, config.band, config.t_amb);

    if (config.init == InitKind::SteadyState) {
        const Eigen::VectorXd stationary = stationary_distribution(built.mats.m_hyst);
        built.macro_init = state_from_distribution(built.mats, stationary);
        const int n = config.grid_bins;
        std::vector<double> q_on(n), q_off(n);
        for (int i = 0; i < n; ++i) {
            q_on[i] = stationary(i);
            q_off[i] = stationary(n + i);
        }
        init_from_distribution(built.fleet, q_on, q_off, config.pem, config.seed);
    } else {
        built.macro_init = uniform_off_state(built.mats);
        init_uniform_off(built.fleet, config.seed);
    }
    return built;
}

void dump_matrices_if_requested(const ScenarioConfig& config, const MacroMatrices& mats,
                                const std::string& dir) {
    if (!config.dump_matrices) return;
    write_matrix_csv(mats.augmented_m(), dir + "/matrix_m.csv");
    write_matrix_csv(mats.m_hyst, dir + "/matrix_m_hyst.csv");
    write_matrix_csv(mats.chains.m_exit, dir + "/matrix_m_exit.csv");
    write_matrix_csv(mats.t_req.asDiagonal().toDenseMatrix(), dir + "/matrix_t_req.csv");
    write_matrix_csv(mats.m_off.asDiagonal().toDenseMatrix(), dir + "/matrix_m_off.csv");
}

std::string prepare_out_dir(const ScenarioConfig& config) {
    fs::create_directories(config.out_dir);
    write_manifest(config, config.out_dir + "/manifest.txt");
    std::ofstream eff(config.out_dir + "/effective_config.txt");
    eff << config.canonical_text();
    return config.out_dir;
}

}  // namespace

// -- runners -----------------------------------------------------------------

ValidateReport run_validate(const ScenarioConfig& config) {
    BuiltScenario built = build_scenario(config);
    const std::string dir = prepare_out_dir(config);

    ValidateReport report;
    report.nominal_kw = built.nominal_kw;
    report.micro = simulate_micro(built.fleet, built.micro_options, built.signal);
    if (config.dump_matrices) built.macro_options.snapshot_path = dir + "/macro_q.csv";
    report.macro = simulate_macro(built.mats, config.pem, built.signal, built.macro_init,
                                  built.macro_options);

    report.power_rmse_kw =
        rmse(report.macro.power_series(), report.micro.power_series());
    report.norms = temp_stat_norms(temp_stats_of(report.macro), temp_stats_of(report.micro));
    report.final_dist_pearson = pearson(report.macro.temp_distribution.back(),
                                        report.micro.temp_distribution.back());
    report.event_time_micro_s = first_optout_crossing(report.micro, config.event_threshold);
    report.event_time_macro_s = first_optout_crossing(report.macro, config.event_threshold);

    write_trace_csv(report.micro, dir + "/micro_trace.csv");
    write_trace_csv(report.macro, dir + "/macro_trace.csv");
    dump_matrices_if_requested(config, built.mats, dir);
    write_summary(
        {
            {"macro_micro_power_rmse_kw", report.power_rmse_kw},
            {"final_dist_pearson", report.final_dist_pearson},
            {"temp_mean_l2_per_step_f", report.norms.mean_l2},
            {"temp_mean_l2_raw_f", report.norms.mean_l2_raw},
            {"temp_mean_linf_f", report.norms.mean_linf},
            {"temp_std_l2_per_step_f", report.norms.std_l2},
            {"temp_std_l2_raw_f", report.norms.std_l2_raw},
            {"temp_std_linf_f", report.norms.std_linf},
            {"optout_event_time_micro_s", report.event_time_micro_s},
            {"optout_event_time_macro_s", report.event_time_macro_s},
            {"nominal_power_kw", report.nominal_kw},
        },
        dir + "/summary.txt");
    return report;
}

TrackReport run_track(const ScenarioConfig& config) {
    ScenarioConfig cfg = config;
    cfg.init = InitKind::SteadyState;
    BuiltScenario built = build_scenario(cfg);
    const std::string dir = prepare_out_dir(cfg);

    TrackReport report;
    report.micro = simulate_micro(built.fleet, built.micro_options, built.signal);
    report.macro = simulate_macro(built.mats, cfg.pem, built.signal, built.macro_init,
                                  built.macro_options);

    const auto macro_power = report.macro.power_series();
    const auto micro_power = report.micro.power_series();
    const auto reference = report.macro.reference_series();
    report.rmse_macro_ref_kw = rmse(macro_power, reference);
    report.rmse_micro_ref_kw = rmse(micro_power, reference);
    report.rmse_macro_micro_kw = rmse(macro_power, micro_power);
    report.rmse_mean_temp_f =
        rmse(report.macro.temp_mean_series(), report.micro.temp_mean_series());

    write_trace_csv(report.micro, dir + "/micro_trace.csv");
    write_trace_csv(report.macro, dir + "/macro_trace.csv");
    write_signal_csv(built.signal, dir + "/reference.csv");
    dump_matrices_if_requested(cfg, built.mats, dir);
    write_summary(
        {
            {"rmse_macro_ref_kw", report.rmse_macro_ref_kw},
            {"rmse_micro_ref_kw", report.rmse_micro_ref_kw},
            {"rmse_macro_micro_kw", report.rmse_macro_micro_kw},
            {"rmse_mean_temp_f", report.rmse_mean_temp_f},
        },
        dir + "/summary.txt");
    return report;
}

RobustnessReport run_robustness(const ScenarioConfig& config) {
    ScenarioConfig base = config;
    base.validate();
    const std::string dir = prepare_out_dir(base);

    // The bin model is heterogeneity-blind: run it once against the same
    // signal every sub-run tracks.
    ScenarioConfig nominal = base;
    nominal.heterogeneity = 0.0;
    nominal.heterogeneity_prate = 0.0;
    BuiltScenario built = build_scenario(nominal);
    const Trace macro_trace = simulate_macro(built.mats, base.pem, built.signal,
                                             built.macro_init, built.macro_options);
    const auto macro_power = macro_trace.power_series();

    std::vector<double> variances;
    for (double v = 0.0; v <= base.robustness_grid_max + 1e-12;
         v += base.robustness_grid_step) {
        variances.push_back(v);
    }

    auto run_point = [&](double variance) {
        RobustnessPoint point;
        point.variance = variance;
        std::vector<double> klds, rmses;
        for (int rep = 0; rep < base.robustness_seeds; ++rep) {
            try {
                ScenarioConfig sub = base;
                sub.heterogeneity = variance;
                sub.heterogeneity_prate = variance;
                std::uint64_t mix =
                    base.seed + 7919ULL * static_cast<std::uint64_t>(
                                    std::llround(variance * 1e6) + 131ULL * (rep + 1));
                sub.seed = Rng::splitmix64(mix);
                sub.seed_set = true;

                MicroFleet fleet = make_fleet(fleet_spec_of(sub), sub.seed);
                if (sub.init == InitKind::SteadyState) {
                    const int n = sub.grid_bins;
                    const Eigen::VectorXd stationary =
                        stationary_distribution(built.mats.m_hyst);
                    std::vector<double> q_on(n), q_off(n);
                    for (int i = 0; i < n; ++i) {
                        q_on[i] = stationary(i);
                        q_off[i] = stationary(n + i);
                    }
                    init_from_distribution(fleet, q_on, q_off, sub.pem, sub.seed);
                } else {
                    init_uniform_off(fleet, sub.seed);
                }
                MicroSimOptions opts;
                opts.cfg = sub.pem;
                opts.t_amb = sub.t_amb;
                opts.seed = sub.seed;
                opts.distribution_bins = sub.grid_bins;
                const Trace micro = simulate_micro(std::move(fleet), opts, built.signal);

                klds.push_back(
                    mean_kld(macro_trace.temp_distribution, micro.temp_distribution));
                rmses.push_back(100.0 * rmse(macro_power, micro.power_series()) /
                                base.signal_mean_kw);
            } catch (const std::exception&) {
                ++point.failed_runs;
            }
        }
        if (!klds.empty()) {
            double mean = 0.0, worst = 0.0;
            for (double v : klds) {
                mean += v;
                worst = std::max(worst, v);
            }
            mean /= static_cast<double>(klds.size());
            double var = 0.0;
            for (double v : klds) var += (v - mean) * (v - mean);
            point.kld_mean = mean;
            point.kld_std = std::sqrt(var / static_cast<double>(klds.size()));
            point.kld_worst = worst;
            double rmse_mean = 0.0, rmse_worst = 0.0;
            for (double v : rmses) {
                rmse_mean += v;
                rmse_worst = std::max(rmse_worst, v);
            }
            point.rmse_pct_mean = rmse_mean / static_cast<double>(rmses.size());
            point.rmse_pct_worst = rmse_worst;
        }
        return point;
    };

    std::vector<std::future<RobustnessPoint>> futures;
    futures.reserve(variances.size());
    for (double v : variances) {
        futures.push_back(std::async(std::launch::async, run_point, v));
    }
    RobustnessReport report;
    for (auto& f : futures) report.points.push_back(f.get());

    std::vector<double> var_axis, kld_axis, rmse_axis;
    for (const auto& p : report.points) {
        var_axis.push_back(p.variance);
        kld_axis.push_back(p.kld_worst);
        rmse_axis.push_back(p.rmse_pct_worst);
    }
    report.spearman_variance_kld = spearman(var_axis, kld_axis);
    report.spearman_kld_rmse = spearman(kld_axis, rmse_axis);

    std::ofstream sweep(dir + "/kld_sweep.csv");
    sweep << "variance,kld_mean,kld_std,kld_worst,rmse_pct_mean,rmse_pct_worst,failed_runs\n";
    for (const auto& p : report.points) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%d\n",
                      p.variance, p.kld_mean, p.kld_std, p.kld_worst, p.rmse_pct_mean,
                      p.rmse_pct_worst, p.failed_runs);
        sweep << buf;
    }
    write_summary(
        {
            {"spearman_variance_kld", report.spearman_variance_kld},
            {"spearman_kld_rmse", report.spearman_kld_rmse},
            {"kld_at_zero_variance", report.points.empty() ? 0.0
                                                           : report.points.front().kld_worst},
        },
        dir + "/summary.txt");
    return report;
}

PacketStudyReport run_packet_study(const ScenarioConfig& config) {
    ScenarioConfig cfg = config;
    cfg.init = InitKind::SteadyState;
    if (cfg.signal_kind == SignalKind::Sinusoid) cfg.signal_kind = SignalKind::Synth;
    BuiltScenario built = build_scenario(cfg);
    const std::string dir = prepare_out_dir(cfg);

    PacketStudyReport report;

    // Enhanced (OFF requests active) runs on both models.
    const Trace macro_trace = simulate_macro(built.mats, cfg.pem, built.signal,
                                             built.macro_init, built.macro_options);
    const Trace micro_enhanced =
        simulate_micro(built.fleet, built.micro_options, built.signal);
    const auto reference = macro_trace.reference_series();
    report.rmse_enhanced_kw = rmse(macro_trace.power_series(), reference);
    report.rmse_enhanced_micro_kw = rmse(micro_enhanced.power_series(), reference);

    report.macro_lengths =
        packet_length_stats(macro_trace.all_completions(), cfg.pem.t_lockout,
                            cfg.pem.packet_len, cfg.hist_bin_s);
    report.micro_lengths =
        packet_length_stats(micro_enhanced.all_completions(), cfg.pem.t_lockout,
                            cfg.pem.packet_len, cfg.hist_bin_s);

    // Conventional PEM with the bin-model-informed packet lengths.
    report.fixed_len_s =
        std::max(cfg.pem.t_lockout + cfg.pem.dt,
                 std::round(report.macro_lengths.mean_s / cfg.pem.dt) * cfg.pem.dt);

    std::vector<double> lengths;
    std::vector<double> weights;
    {
        std::map<long, double> by_steps;
        for (const auto& c : macro_trace.all_completions()) {
            if (c.length_s < cfg.pem.t_lockout || c.weight <= 0.0) continue;
            by_steps[std::lround(c.length_s / cfg.pem.dt)] += c.weight;
        }
        for (const auto& [steps, weight] : by_steps) {
            lengths.push_back(static_cast<double>(steps) * cfg.pem.dt);
            weights.push_back(weight);
        }
    }

    const Trace fixed_trace =
        run_conventional_pem(built.fleet, built.micro_options, built.signal,
                             PacketPolicy::fixed(report.fixed_len_s));
    report.rmse_fixed_kw = rmse(fixed_trace.power_series(), reference);

    const Trace sampled_trace =
        run_conventional_pem(built.fleet, built.micro_options, built.signal,
                             PacketPolicy::sampled(lengths, weights));
    report.rmse_sampled_kw = rmse(sampled_trace.power_series(), reference);

    write_trace_csv(macro_trace, dir + "/macro_trace.csv");
    write_trace_csv(micro_enhanced, dir + "/micro_enhanced_trace.csv");
    write_trace_csv(fixed_trace, dir + "/micro_fixed_trace.csv");
    write_trace_csv(sampled_trace, dir + "/micro_sampled_trace.csv");

    auto write_hist = [&](const PacketLengthStats& stats, const std::string& path) {
        std::ofstream out(path);
        out << "length_lo_s,length_hi_s,weight\n";
        for (std::size_t i = 0; i < stats.hist_weight.size(); ++i) {
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%.10g\n", stats.hist_edges[i],
                          stats.hist_edges[i + 1], stats.hist_weight[i]);
            out << buf;
        }
    };
    write_hist(report.macro_lengths, dir + "/packet_hist_macro.csv");
    write_hist(report.micro_lengths, dir + "/packet_hist_micro.csv");

    write_summary(
        {
            {"macro_len_mean_s", report.macro_lengths.mean_s},
            {"macro_len_std_s", report.macro_lengths.std_s},
            {"micro_len_mean_s", report.micro_lengths.mean_s},
            {"micro_len_std_s", report.micro_lengths.std_s},
            {"fixed_len_s", report.fixed_len_s},
            {"rmse_fixed_kw", report.rmse_fixed_kw},
            {"rmse_sampled_kw", report.rmse_sampled_kw},
            {"rmse_enhanced_kw", report.rmse_enhanced_kw},
            {"rmse_enhanced_micro_kw", report.rmse_enhanced_micro_kw},
        },
        dir + "/summary.txt");
    return report;
}

SteadyStateReport run_steady_state(const ScenarioConfig& config) {
    config.validate();
    const std::string dir = prepare_out_dir(config);
    const BinGrid grid{config.grid_bins, config.band};
    const MacroMatrices mats =
        build_macro_matrices(config.device, grid, config.t_amb, config.pem);

    SteadyStateReport report;
    report.stationary = stationary_distribution(mats.m_hyst);
    report.on_mass = report.stationary.head(config.grid_bins).sum();
    report.analytic_duty = analytic_duty_cycle(config.device, config.band, config.t_amb);
    report.nominal_kw = report.on_mass * static_cast<double>(config.fleet_size) *
                        config.device.p_rate;

    std::ofstream out(dir + "/stationary.csv");
    out << "mode,bin,temp_f,mass\n";
    for (int i = 0; i < 2 * config.grid_bins; ++i) {
        const bool on = i < config.grid_bins;
        const int bin = on ? i : i - config.grid_bins;
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%s,%d,%.10g,%.10g\n", on ? "on" : "off", bin,
                      grid.midpoint(bin), report.stationary(i));
        out << buf;
    }
    write_summary(
        {
            {"stationary_on_mass", report.on_mass},
            {"analytic_duty", report.analytic_duty},
            {"nominal_power_kw", report.nominal_kw},
        },
        dir + "/summary.txt");
    return report;
}

}  // namespace pemsim
