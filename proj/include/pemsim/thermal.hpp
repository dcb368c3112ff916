#pragma once

#include <string>

namespace pemsim {

inline constexpr double kSecondsPerHour = 3600.0;

/// Compressor state of an AC unit.
enum class Mode { Off = 0, On = 1 };

/// Thermostat deadband around the setpoint. Temperatures in degF.
struct ThermalBand {
    double t_set = 73.0;
    double deadband = 2.0;

    double t_min() const { return t_set - 0.5 * deadband; }
    double t_max() const { return t_set + 0.5 * deadband; }

    void validate() const;
};

/// First-order equivalent-thermal-parameter description of one unit.
///   r_eq  thermal resistance, degF/kW
///   c_eq  thermal capacitance, kWh/degF
///   eta   coefficient of performance
///   p_rate rated electrical power, kW
///   noise_std  std of the disturbance rate w, degF/sqrt(h); 0 disables noise
struct DeviceParams {
    double r_eq = 2.5;
    double c_eq = 1.8;
    double eta = 3.5;
    double p_rate = 6.0;
    double noise_std = 0.0;

    /// Time constant r_eq*c_eq in hours.
    double tau_hours() const { return r_eq * c_eq; }
    double tau_seconds() const { return tau_hours() * kSecondsPerHour; }

    /// Equilibrium temperature with the compressor running: t_amb - eta*p_rate*r_eq.
    double on_equilibrium(double t_amb) const { return t_amb - eta * p_rate * r_eq; }

    void validate() const;
};

/// dT/dt in degF/h for the deterministic part of the RC model.
double etp_derivative(const DeviceParams& params, double t_indoor, Mode mode,
                      double t_amb);

/// One explicit step of the discretized RC model. dt in seconds, noise is a
/// realized disturbance rate sample in degF/h (the step adds dt*noise).
/// Throws std::invalid_argument when dt <= 0 or dt >= tau.
double etp_step(const DeviceParams& params, double t_indoor, Mode mode,
                double t_amb, double dt, double noise);

/// Thermostat switching: turn on at t_max, off at t_min, hold otherwise.
Mode hysteresis_next_mode(Mode mode, double t_indoor, const ThermalBand& band);

/// Steady-state ON fraction of a noise-free hysteresis-controlled unit,
/// from the exact exponential transit times across the deadband.
/// Returns 0 when the unit ends up parked OFF inside the band, 1 when it
/// can never cool back to t_min; throws std::domain_error when the final
/// state depends on the initial mode (both equilibria inside the band).
double analytic_duty_cycle(const DeviceParams& params, const ThermalBand& band,
                           double t_amb);

}  // namespace pemsim
