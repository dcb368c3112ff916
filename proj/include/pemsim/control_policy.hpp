#pragma once

#include <vector>

namespace pemsim {

/// Accepted fractions of this step's ON / OFF requests. At most one is
/// nonzero (the coordinator actuates in one direction per step).
struct BetaPair {
    double beta_on = 0.0;
    double beta_off = 0.0;
};

/// p_rate_scaled * sum(C .* q): C has ones on the electrically-ON entries
/// (in-PEM ON bins and the ON opt-out chain). p_rate_scaled carries the
/// fleet size, so the result is in kW.
double aggregate_power(const std::vector<double>& q, const std::vector<double>& c_map,
                       double p_rate_scaled);

/// Inverts the one-step aggregate power prediction for the accepted-request
/// fractions, clamped into [0,1], complementarity enforced. All power
/// arguments share one unit system; n_req_on/n_req_off/x_p_last are
/// population fractions when p_rate_scaled is the fleet-scaled rate.
BetaPair compute_betas(double p_agg, double p_ref_next, double n_req_on,
                       double n_req_off, double x_p_last, double p_rate_scaled);

/// One-step power prediction: p_agg + (beta_on*n_req_on - beta_off*n_req_off -
/// (1-beta_off)*x_p_last) * p_rate_scaled.
double predicted_power_step(double p_agg, const BetaPair& betas, double n_req_on,
                            double n_req_off, double x_p_last, double p_rate_scaled);

}  // namespace pemsim
