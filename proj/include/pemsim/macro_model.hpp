#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "pemsim/control_policy.hpp"
#include "pemsim/pem_device.hpp"
#include "pemsim/signals.hpp"
#include "pemsim/thermal.hpp"
#include "pemsim/trace.hpp"

namespace pemsim {

// ---------------------------------------------------------------------------
// Bin-based aggregate model of a PEM fleet.
//
// Population state vector q, ordered
//     [ opt_on chain (z_on) | opt_off chain (z_off) | on bins (N) | off bins (N) ]
// with all entries a probability mass (sum q = 1). The deadband is split
// into N uniform temperature bins, bin 0 coldest. Devices holding a packet
// additionally live in n deterministic timer bins x_p (bin r <=> r*dt of
// the packet consumed), with sum x_p equal to the in-PEM ON mass.
//
// The opt-out chains are tapped delay lines along the exact noise-free
// temperature trajectory: mass crossing t_max enters the ON chain at t_max
// and cools one position per step until it is a reentry offset inside the
// band, where it returns to the OFF bins. Symmetrically for mass crossing
// t_min (OFF chain, warming).
// ---------------------------------------------------------------------------

/// Uniform discretization of the deadband.
struct BinGrid {
    int n_bins = 40;
    ThermalBand band;

    double width() const { return band.deadband / n_bins; }
    double midpoint(int i) const { return band.t_min() + (i + 0.5) * width(); }
    /// Bin containing t, clamped into the grid.
    int bin_of(double t) const;

    void validate() const;
};

/// Index bookkeeping for the augmented state vector.
struct MacroLayout {
    int z_on = 0;
    int z_off = 0;
    int n_bins = 0;

    int z() const { return z_on + z_off; }
    int total() const { return z() + 2 * n_bins; }
    int opt_on_begin() const { return 0; }
    int opt_off_begin() const { return z_on; }
    int on_begin() const { return z(); }
    int off_begin() const { return z() + n_bins; }
};

/// Population probability vector plus the packet timer vector.
struct MacroState {
    Eigen::VectorXd q;
    Eigen::VectorXd x_p;

    double on_mass(const MacroLayout& layout) const {
        return q.segment(layout.on_begin(), layout.n_bins).sum();
    }
    double optout_mass(const MacroLayout& layout) const {
        return q.head(layout.z()).sum();
    }
    /// Throws ModelError when mass, non-negativity, or timer consistency
    /// tolerances are violated.
    void validate(const MacroLayout& layout) const;
};

enum class TransitionMethod { Analytic, Empirical };

struct EmpiricalOptions {
    std::uint64_t seed = 1;
    std::size_t n_steps = 2000000;
    double noise_std = 0.3;  // degF/sqrt(h), breaks grid locking
};

/// 2N x 2N column-stochastic hysteresis chain: per-mode drift of the
/// discretized RC model plus the thermostat flips at the deadband edges.
/// The analytic method displaces each bin midpoint one step and splits the
/// image between the straddling bins; the empirical method counts
/// transitions over a long single-unit hysteresis run. Throws ModelError
/// when the per-step drift exceeds one bin width.
Eigen::MatrixXd build_transition_matrix(const DeviceParams& params, const BinGrid& grid,
                                        double t_amb, double dt,
                                        TransitionMethod method = TransitionMethod::Analytic,
                                        const EmpiricalOptions& empirical = {});

/// Unique stationary distribution of a column-stochastic matrix (direct
/// linear solve of (M - I)v = 0 with sum v = 1).
Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& m);

/// Diagonal of the per-bin ON-request probability matrix, evaluated at bin
/// midpoints.
Eigen::VectorXd build_t_req(const BinGrid& grid, double m_r_on, double dt);

/// Diagonal of the n x n turn-OFF request matrix: zero through the lockout
/// bin r_lo, then 1 - exp(-(r - r_lo)/(n - r) * m_r_off * dt), and exactly 1
/// in the final (expiring) bin.
Eigen::VectorXd build_m_off(int n, int r_lo, double m_r_off, double dt);

/// Accepted-ON-request flow in state space: +beta*T_req*q_off on the ON
/// bins, the negative on the OFF bins; zero elsewhere.
Eigen::VectorXd on_request_flow(const Eigen::VectorXd& q, const Eigen::VectorXd& t_req,
                                double beta_on, const MacroLayout& layout);

/// Aggregate ON requests, 1^T T_req q_off (a population fraction).
double n_req_on(const Eigen::VectorXd& q, const Eigen::VectorXd& t_req,
                const MacroLayout& layout);

struct OffRequestFlow {
    Eigen::VectorXd x_hat_off;  // requested mass per timer bin
    Eigen::VectorXd x_p_off;    // accepted mass per timer bin
    double n_req_off = 0.0;     // total requested mass
};

OffRequestFlow off_request_flow(const Eigen::VectorXd& x_p, const Eigen::VectorXd& m_off,
                                double beta_off);

/// Timer advance: shift, place newly accepted ON mass, remove accepted OFF
/// mass. placement[j] (1-based timer bin) is where ON grants from
/// temperature bin j start. Throws ModelError on negativity beyond float
/// noise (tiny negatives are clamped).
Eigen::VectorXd timer_step(const Eigen::VectorXd& x_p, const Eigen::VectorXd& q_plus,
                           const Eigen::VectorXd& x_p_off,
                           const std::vector<int>& placement, const MacroLayout& layout);

/// Fraction of the ON population leaving the ON state this step: accepted
/// OFF requests plus unconditional expiry of the final timer bin.
double beta_off_minus(double beta_off, const Eigen::VectorXd& x_p,
                      const Eigen::VectorXd& m_off);

/// Uniform proportional ON->OFF removal in temperature space.
Eigen::VectorXd off_flow_to_temperature(const Eigen::VectorXd& q, double beta_minus,
                                        const MacroLayout& layout);

struct OptOutChains {
    Eigen::MatrixXd m_exit;                // (z+2N)^2 column-stochastic
    std::vector<double> on_positions;      // chain temperatures, entry first
    std::vector<double> off_positions;
    double phi_hot = 0.0;   // per-step crossing fraction of the hottest OFF bin
    double phi_cold = 0.0;  // per-step crossing fraction of the coldest ON bin
    int reentry_bin_hot = 0;
    int reentry_bin_cold = 0;
};

/// Opt-out entry/exit matrix and chain geometry; z_on/z_off follow from the
/// drift and the configured re-entry offset. Throws ModelError when a chain
/// cannot reach its re-entry temperature.
OptOutChains build_m_exit(const BinGrid& grid, double optout_reentry,
                          const DeviceParams& params, double t_amb, double dt);

/// Everything the stepped model needs, built once per scenario.
struct MacroMatrices {
    BinGrid grid;
    MacroLayout layout;
    int n_timer = 0;
    int lockout_bin = 0;

    Eigen::MatrixXd m_pem;   // 2N x 2N in-PEM drift, edges clamped
    Eigen::MatrixXd m_hyst;  // 2N x 2N hysteresis chain
    Eigen::VectorXd t_req;   // N
    Eigen::VectorXd m_off;   // n
    std::vector<int> placement;  // N, 1-based timer entry bin per ON bin
    OptOutChains chains;
    Eigen::VectorXd c_map;  // power output map over the augmented state

    /// Natural-dynamics matrix over the augmented state: identity on the
    /// opt-out chains, m_pem on the in-PEM bins.
    Eigen::MatrixXd augmented_m() const;
    /// Temperature associated with every augmented-state index.
    std::vector<double> state_temperatures() const;
};

MacroMatrices build_macro_matrices(const DeviceParams& params, const BinGrid& grid,
                                   double t_amb, const PemConfig& cfg,
                                   TransitionMethod method = TransitionMethod::Analytic,
                                   const EmpiricalOptions& empirical = {});

/// All-OFF start, OFF mass uniform over the bins.
MacroState uniform_off_state(const MacroMatrices& mats);

/// Start from a 2N stationary vector (on block first); the timer is filled
/// uniformly with the ON mass.
MacroState state_from_distribution(const MacroMatrices& mats,
                                   const Eigen::VectorXd& q_2n);

struct MacroStepFlows {
    double optout_in_hot = 0.0;    // OFF mass entering the ON chain
    double optout_in_cold = 0.0;   // ON mass entering the OFF chain
    double optout_return = 0.0;    // chain mass re-entering the OFF bins
    double timer_abandon_frac = 0.0;  // fraction scaled out of the timer
};

struct MacroStepResult {
    MacroState next;
    MacroStepFlows flows;
};

/// One step of the controlled population model. Requires
/// beta_on*beta_off = 0 and betas in [0,1]; throws ModelError on invariant
/// violations.
MacroStepResult macro_step_detailed(const MacroState& state, const MacroMatrices& mats,
                                    double beta_on, double beta_off);

MacroState macro_step(const MacroState& state, const MacroMatrices& mats, double beta_on,
                      double beta_off);

struct MacroSimOptions {
    double fleet_rated_kw = 6000.0;  // n_devices * p_rate
    /// When non-empty, per-step q snapshots are appended here as CSV.
    std::string snapshot_path;
};

/// Closed-loop macro simulation against a reference signal, with packet
/// completion accounting resolved by grant cohort. final_state, when given,
/// receives the end-of-run population state.
Trace simulate_macro(const MacroMatrices& mats, const PemConfig& cfg,
                     const ReferenceSignal& signal, const MacroState& init,
                     const MacroSimOptions& options, MacroState* final_state = nullptr);

/// Dense CSV export for debugging.
void write_matrix_csv(const Eigen::MatrixXd& m, const std::string& path);

}  // namespace pemsim
