#include "pemsim/control_policy.hpp"

#include <algorithm>
#include <stdexcept>

namespace pemsim {

double aggregate_power(const std::vector<double>& q, const std::vector<double>& c_map,
                       double p_rate_scaled) {
    if (q.size() != c_map.size()) {
        throw std::invalid_argument("aggregate_power: shape mismatch");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) acc += c_map[i] * q[i];
    return p_rate_scaled * acc;
}

BetaPair compute_betas(double p_agg, double p_ref_next, double n_req_on,
                       double n_req_off, double x_p_last, double p_rate_scaled) {
    BetaPair betas;
    if (p_ref_next > p_agg) {
        const double denom = p_rate_scaled * n_req_on;
        if (denom > 0.0) {
            const double raw =
                (p_ref_next - p_agg + x_p_last * p_rate_scaled) / denom;
            betas.beta_on = std::clamp(raw, 0.0, 1.0);
        }
    } else if (p_ref_next < p_agg) {
        const double num = p_agg - p_ref_next - x_p_last * p_rate_scaled;
        const double denom = p_rate_scaled * (n_req_off - x_p_last);
        if (denom > 0.0) {
            betas.beta_off = std::clamp(num / denom, 0.0, 1.0);
        } else if (num > 0.0 && n_req_off > 0.0) {
            // Expiries cannot deliver the reduction on their own and the
            // denominator degenerates: accept every OFF request.
            betas.beta_off = 1.0;
        }
    }
    return betas;
}

double predicted_power_step(double p_agg, const BetaPair& betas, double n_req_on,
                            double n_req_off, double x_p_last, double p_rate_scaled) {
    return p_agg +
           (betas.beta_on * n_req_on - betas.beta_off * n_req_off) * p_rate_scaled -
           (1.0 - betas.beta_off) * x_p_last * p_rate_scaled;
}

}  // namespace pemsim
