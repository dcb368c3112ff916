#include <CLI11.hpp>
#include <cstdio>
#include <exception>
#include <string>

#include "pemsim/errors.hpp"
#include "pemsim/scenario.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_given = false;
};

pemsim::ScenarioConfig resolve_config(const CommonArgs& args) {
    pemsim::ScenarioConfig config;
    if (!args.config_path.empty()) config = pemsim::load_config(args.config_path);
    if (args.seed_given) {
        config.seed = args.seed;
        config.seed_set = true;
    }
    if (!args.out_dir.empty()) config.out_dir = args.out_dir;
    return config;
}

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "scenario config file");
    cmd->add_option("--out", args.out_dir, "output directory override");
    cmd->add_option("--seed", args.seed, "RNG seed override")
        ->each([&args](const std::string&) { args.seed_given = true; });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PEM fleet simulator: agent-based and bin-based models"};
    app.require_subcommand(1);

    CommonArgs args;
    auto* validate = app.add_subcommand(
        "validate", "sinusoid-tracking comparison of the micro and macro models");
    auto* track = app.add_subcommand(
        "track", "regulation-signal tracking from a steady-state start");
    auto* robustness = app.add_subcommand(
        "robustness", "heterogeneity sweep with KLD and power-RMSE curves");
    auto* packet_study = app.add_subcommand(
        "packet-study", "variable packet length study on conventional PEM");
    auto* steady_state = app.add_subcommand(
        "steady-state", "print the stationary distribution of the hysteresis chain");
    for (CLI::App* cmd : {validate, track, robustness, packet_study, steady_state}) {
        add_common(cmd, args);
    }

    CLI11_PARSE(app, argc, argv);

    try {
        const pemsim::ScenarioConfig config = resolve_config(args);
        if (validate->parsed()) {
            const auto report = pemsim::run_validate(config);
            std::printf("macro-micro power RMSE: %.2f kW\n", report.power_rmse_kw);
            std::printf("final distribution Pearson: %.3f\n", report.final_dist_pearson);
            std::printf("opt-out surge: micro %.0f s, macro %.0f s\n",
                        report.event_time_micro_s, report.event_time_macro_s);
        } else if (track->parsed()) {
            const auto report = pemsim::run_track(config);
            std::printf("tracking RMSE: macro %.2f kW, micro %.2f kW\n",
                        report.rmse_macro_ref_kw, report.rmse_micro_ref_kw);
            std::printf("macro-micro power RMSE: %.2f kW, mean-temp RMSE: %.3f F\n",
                        report.rmse_macro_micro_kw, report.rmse_mean_temp_f);
        } else if (robustness->parsed()) {
            const auto report = pemsim::run_robustness(config);
            for (const auto& p : report.points) {
                std::printf("variance %4.0f%%: KLD worst %.4f, power RMSE worst %.2f%%\n",
                            100.0 * p.variance, p.kld_worst, p.rmse_pct_worst);
            }
            std::printf("Spearman(variance, KLD) = %.3f, Spearman(KLD, RMSE) = %.3f\n",
                        report.spearman_variance_kld, report.spearman_kld_rmse);
        } else if (packet_study->parsed()) {
            const auto report = pemsim::run_packet_study(config);
            std::printf("packet lengths: macro %.1f/%.1f s, micro %.1f/%.1f s (mean/std)\n",
                        report.macro_lengths.mean_s, report.macro_lengths.std_s,
                        report.micro_lengths.mean_s, report.micro_lengths.std_s);
            std::printf("tracking RMSE: fixed %.1f kW, sampled %.1f kW, enhanced %.1f kW\n",
                        report.rmse_fixed_kw, report.rmse_sampled_kw,
                        report.rmse_enhanced_kw);
        } else if (steady_state->parsed()) {
            const auto report = pemsim::run_steady_state(config);
            std::printf("stationary ON mass: %.4f (analytic duty %.4f)\n", report.on_mass,
                        report.analytic_duty);
            std::printf("nominal fleet power: %.1f kW\n", report.nominal_kw);
        }
    } catch (const pemsim::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime error: %s\n", e.what());
        return 2;
    }
    return 0;
}
