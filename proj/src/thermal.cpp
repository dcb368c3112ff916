#include "pemsim/thermal.hpp"

#include <cmath>
#include <stdexcept>

namespace pemsim {

void ThermalBand::validate() const {
    if (!(deadband > 0.0)) {
        throw std::invalid_argument("ThermalBand: deadband must be positive");
    }
}

void DeviceParams::validate() const {
    if (!(r_eq > 0.0 && c_eq > 0.0 && eta > 0.0 && p_rate > 0.0)) {
        throw std::invalid_argument("DeviceParams: r_eq, c_eq, eta, p_rate must be positive");
    }
    if (noise_std < 0.0) {
        throw std::invalid_argument("DeviceParams: noise_std must be non-negative");
    }
}

double etp_derivative(const DeviceParams& params, double t_indoor, Mode mode,
                      double t_amb) {
    const double m = (mode == Mode::On) ? 1.0 : 0.0;
    return (t_amb - t_indoor - params.eta * params.p_rate * m * params.r_eq) /
           params.tau_hours();
}

double etp_step(const DeviceParams& params, double t_indoor, Mode mode,
                double t_amb, double dt, double noise) {
    if (!(dt > 0.0)) {
        throw std::invalid_argument("etp_step: dt must be positive");
    }
    if (dt >= params.tau_seconds()) {
        throw std::invalid_argument("etp_step: dt must be well below the thermal time constant");
    }
    const double dt_h = dt / kSecondsPerHour;
    const double a = dt_h / params.tau_hours();
    const double m = (mode == Mode::On) ? 1.0 : 0.0;
    return (1.0 - a) * t_indoor +
           a * (t_amb - params.eta * params.p_rate * params.r_eq * m) +
           dt_h * noise;
}

Mode hysteresis_next_mode(Mode mode, double t_indoor, const ThermalBand& band) {
    if (mode == Mode::Off && t_indoor >= band.t_max()) return Mode::On;
    if (mode == Mode::On && t_indoor <= band.t_min()) return Mode::Off;
    return mode;
}

double analytic_duty_cycle(const DeviceParams& params, const ThermalBand& band,
                           double t_amb) {
    params.validate();
    band.validate();
    const double t_on_eq = params.on_equilibrium(t_amb);
    const bool can_reach_tmax = t_amb > band.t_max();
    const bool can_reach_tmin = t_on_eq < band.t_min();

    if (!can_reach_tmax && can_reach_tmin) return 0.0;  // parks OFF inside the band
    if (can_reach_tmax && !can_reach_tmin) return 1.0;  // once ON, never cools to t_min
    if (!can_reach_tmax && !can_reach_tmin) {
        throw std::domain_error(
            "analytic_duty_cycle: unit neither cycles nor settles independent of its "
            "initial mode");
    }

    // Exact exponential transit times through the deadband.
    const double tau = params.tau_hours();
    const double t_off = tau * std::log((t_amb - band.t_min()) / (t_amb - band.t_max()));
    const double t_on =
        tau * std::log((band.t_max() - t_on_eq) / (band.t_min() - t_on_eq));
    return t_on / (t_on + t_off);
}

}  // namespace pemsim
