#include "pemsim/macro_model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "pemsim/errors.hpp"
#include "pemsim/rng.hpp"

namespace pemsim {

namespace {
constexpr double kNegativityFloor = -1e-12;
constexpr double kMassTol = 1e-9;
constexpr double kTimerTol = 1e-6;
}  // namespace

void BinGrid::validate() const {
    band.validate();
    if (n_bins < 2) throw ModelError("BinGrid: need at least 2 bins");
}

int BinGrid::bin_of(double t) const {
    const int i = static_cast<int>(std::floor((t - band.t_min()) / width()));
    return std::min(std::max(i, 0), n_bins - 1);
}

void MacroState::validate(const MacroLayout& layout) const {
    if (q.size() != layout.total()) throw ModelError("MacroState: q size mismatch");
    if (std::abs(q.sum() - 1.0) > kMassTol) {
        throw ModelError("MacroState: probability mass drifted from 1 by " +
                         std::to_string(q.sum() - 1.0));
    }
    if (q.minCoeff() < kNegativityFloor || x_p.minCoeff() < kNegativityFloor) {
        throw ModelError("MacroState: negative mass beyond float noise");
    }
    if (std::abs(x_p.sum() - on_mass(layout)) > kTimerTol) {
        throw ModelError("MacroState: timer mass inconsistent with ON mass by " +
                         std::to_string(x_p.sum() - on_mass(layout)));
    }
}

// -- transition matrices ----------------------------------------------------

namespace {

double step_noise_std(const DeviceParams& params, double dt) {
    return params.noise_std * std::sqrt(dt / kSecondsPerHour);
}

/// int Phi(z) dz antiderivative; G(z) -> max(z, 0) as the argument leaves
/// the bulk of the Gaussian.
double gauss_cdf_integral(double z) {
    const double cdf = 0.5 * std::erfc(-z * M_SQRT1_2);
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
    return z * cdf + pdf;
}

/// Landing CDF at x for mass initially uniform on [a, b] after adding
/// N(0, sigma) noise; the sigma -> 0 limit is the plain interval overlap.
double landing_cdf(double x, double a, double b, double sigma) {
    if (sigma <= 0.0) {
        return std::clamp((x - a) / (b - a), 0.0, 1.0);
    }
    return sigma / (b - a) *
           (gauss_cdf_integral((x - a) / sigma) - gauss_cdf_integral((x - b) / sigma));
}

/// Shared advection core: displace each bin's (uniform) mass one thermal
/// step, smear it with the per-step disturbance kernel, and bin the image.
/// Boundary-crossing mass either flips mode at the thermostat edges
/// (hysteresis chain) or stays in the edge bin (PEM chain; the opt-out
/// matrix taps it instead).
Eigen::MatrixXd drift_chain(const DeviceParams& params, const BinGrid& grid,
                            double t_amb, double dt, bool hysteresis_flips) {
    const int n = grid.n_bins;
    const double h = grid.width();
    const double sigma = step_noise_std(params, dt);
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(2 * n, 2 * n);

    std::vector<double> cdf(n + 1);
    for (int mode_i = 0; mode_i < 2; ++mode_i) {
        const Mode mode = mode_i == 0 ? Mode::On : Mode::Off;
        const int base = mode_i == 0 ? 0 : n;
        for (int i = 0; i < n; ++i) {
            const double t = grid.midpoint(i);
            const double drift = etp_step(params, t, mode, t_amb, dt, 0.0) - t;
            if (std::abs(drift) > h * (1.0 + 1e-12)) {
                throw ModelError("transition matrix: per-step drift exceeds one bin width");
            }
            const double lo = grid.band.t_min() + i * h + drift;
            const double hi = lo + h;
            for (int j = 0; j <= n; ++j) {
                cdf[j] = landing_cdf(grid.band.t_min() + j * h, lo, hi, sigma);
            }
            for (int j = 0; j < n; ++j) {
                m(base + j, base + i) += cdf[j + 1] - cdf[j];
            }
            const double below = cdf[0];
            const double above = 1.0 - cdf[n];
            if (hysteresis_flips && mode == Mode::Off && above > 0.0) {
                m(0 + (n - 1), base + i) += above;  // turn ON at t_max
            } else if (above > 0.0) {
                m(base + (n - 1), base + i) += above;  // clamp at the hot edge
            }
            if (hysteresis_flips && mode == Mode::On && below > 0.0) {
                m(n + 0, base + i) += below;  // turn OFF at t_min
            } else if (below > 0.0) {
                m(base + 0, base + i) += below;  // clamp at the cold edge
            }
        }
    }
    return m;
}

Eigen::MatrixXd empirical_chain(const DeviceParams& params, const BinGrid& grid,
                                double t_amb, double dt, const EmpiricalOptions& opts) {
    const int n = grid.n_bins;
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(2 * n, 2 * n);
    Rng rng(opts.seed, 0xe3aULL);
    const double dt_h = dt / kSecondsPerHour;

    double t = grid.band.t_set;
    Mode mode = Mode::Off;
    auto state_of = [&](Mode m_, double t_) {
        return (m_ == Mode::On ? 0 : n) + grid.bin_of(t_);
    };

    const std::size_t burn_in = opts.n_steps / 100;
    int prev = state_of(mode, t);
    for (std::size_t k = 0; k < opts.n_steps; ++k) {
        const double noise =
            opts.noise_std > 0.0 ? rng.normal() * opts.noise_std / std::sqrt(dt_h) : 0.0;
        const double t_next = etp_step(params, t, mode, t_amb, dt, noise);
        mode = hysteresis_next_mode(mode, t, grid.band);
        t = t_next;
        const int cur = state_of(mode, t);
        if (k >= burn_in) counts(cur, prev) += 1.0;
        prev = cur;
    }

    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(2 * n, 2 * n);
    for (int j = 0; j < 2 * n; ++j) {
        const double total = counts.col(j).sum();
        if (total > 0.0) {
            m.col(j) = counts.col(j) / total;
        } else {
            m(j, j) = 1.0;  // unvisited state
        }
    }
    return m;
}

}  // namespace

Eigen::MatrixXd build_transition_matrix(const DeviceParams& params, const BinGrid& grid,
                                        double t_amb, double dt, TransitionMethod method,
                                        const EmpiricalOptions& empirical) {
    grid.validate();
    params.validate();
    if (method == TransitionMethod::Analytic) {
        return drift_chain(params, grid, t_amb, dt, /*hysteresis_flips=*/true);
    }
    return empirical_chain(params, grid, t_amb, dt, empirical);
}

Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& m) {
    const Eigen::Index n = m.rows();
    if (n == 0 || m.cols() != n) throw ModelError("stationary_distribution: bad matrix");
    Eigen::MatrixXd a = m - Eigen::MatrixXd::Identity(n, n);
    a.row(n - 1).setOnes();
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
    b(n - 1) = 1.0;
    Eigen::VectorXd v = a.fullPivLu().solve(b);
    if ((m * v - v).cwiseAbs().maxCoeff() > 1e-8) {
        throw ModelError("stationary_distribution: solve residual too large");
    }
    v = v.cwiseMax(0.0);
    const double total = v.sum();
    if (total <= 0.0) throw ModelError("stationary_distribution: degenerate solution");
    return v / total;
}

// -- request machinery ------------------------------------------------------

Eigen::VectorXd build_t_req(const BinGrid& grid, double m_r_on, double dt) {
    Eigen::VectorXd t_req(grid.n_bins);
    for (int i = 0; i < grid.n_bins; ++i) {
        t_req(i) = p_req_on(grid.midpoint(i), grid.band, m_r_on, dt);
    }
    return t_req;
}

Eigen::VectorXd build_m_off(int n, int r_lo, double m_r_off, double dt) {
    if (n < 1 || r_lo < 1 || r_lo >= n) {
        throw ModelError("build_m_off: need 1 <= r_lo < n");
    }
    Eigen::VectorXd diag(n);
    for (int r = 1; r <= n; ++r) {
        if (r <= r_lo) {
            diag(r - 1) = 0.0;
        } else if (r == n) {
            diag(r - 1) = 1.0;  // packet expiry is certain
        } else {
            const double mu =
                (static_cast<double>(r - r_lo) / static_cast<double>(n - r)) * m_r_off;
            diag(r - 1) = 1.0 - std::exp(-mu * dt);
        }
    }
    return diag;
}

Eigen::VectorXd on_request_flow(const Eigen::VectorXd& q, const Eigen::VectorXd& t_req,
                                double beta_on, const MacroLayout& layout) {
    Eigen::VectorXd q_plus = Eigen::VectorXd::Zero(layout.total());
    const auto q_off = q.segment(layout.off_begin(), layout.n_bins);
    const Eigen::VectorXd moved = beta_on * t_req.cwiseProduct(q_off);
    q_plus.segment(layout.on_begin(), layout.n_bins) = moved;
    q_plus.segment(layout.off_begin(), layout.n_bins) = -moved;
    return q_plus;
}

double n_req_on(const Eigen::VectorXd& q, const Eigen::VectorXd& t_req,
                const MacroLayout& layout) {
    return t_req.dot(q.segment(layout.off_begin(), layout.n_bins));
}

OffRequestFlow off_request_flow(const Eigen::VectorXd& x_p, const Eigen::VectorXd& m_off,
                                double beta_off) {
    OffRequestFlow flow;
    flow.x_hat_off = m_off.cwiseProduct(x_p);
    flow.x_p_off = beta_off * flow.x_hat_off;
    flow.n_req_off = flow.x_hat_off.sum();
    return flow;
}

Eigen::VectorXd timer_step(const Eigen::VectorXd& x_p, const Eigen::VectorXd& q_plus,
                           const Eigen::VectorXd& x_p_off,
                           const std::vector<int>& placement, const MacroLayout& layout) {
    const Eigen::Index n = x_p.size();
    Eigen::VectorXd next = Eigen::VectorXd::Zero(n);
    // Sub-diagonal shift; the final bin's mass expires off the end.
    for (Eigen::Index r = 1; r < n; ++r) next(r) = x_p(r - 1) - x_p_off(r - 1);
    // Accepted ON requests enter at their placement bin.
    for (int j = 0; j < layout.n_bins; ++j) {
        const double granted = q_plus(layout.on_begin() + j);
        if (granted > 0.0) next(placement[j] - 1) += granted;
    }
    const double low = next.minCoeff();
    if (low < kNegativityFloor) {
        throw ModelError("timer_step: negative timer mass " + std::to_string(low));
    }
    return next.cwiseMax(0.0);
}

double beta_off_minus(double beta_off, const Eigen::VectorXd& x_p,
                      const Eigen::VectorXd& m_off) {
    const double total = x_p.sum();
    if (total <= 0.0) return 0.0;
    const double requested = m_off.cwiseProduct(x_p).sum();
    const double expiring = x_p(x_p.size() - 1);
    return (beta_off * requested + (1.0 - beta_off) * expiring) / total;
}

Eigen::VectorXd off_flow_to_temperature(const Eigen::VectorXd& q, double beta_minus,
                                        const MacroLayout& layout) {
    Eigen::VectorXd q_minus = Eigen::VectorXd::Zero(layout.total());
    const Eigen::VectorXd moved =
        beta_minus * q.segment(layout.on_begin(), layout.n_bins);
    q_minus.segment(layout.on_begin(), layout.n_bins) = moved;
    q_minus.segment(layout.off_begin(), layout.n_bins) = -moved;
    return q_minus;
}

// -- opt-out machinery ------------------------------------------------------

OptOutChains build_m_exit(const BinGrid& grid, double optout_reentry,
                          const DeviceParams& params, double t_amb, double dt) {
    grid.validate();
    if (!(optout_reentry > 0.0) || optout_reentry >= grid.band.deadband) {
        throw ModelError("build_m_exit: re-entry offset must sit inside the deadband");
    }
    OptOutChains chains;

    // ON chain: enters at t_max running, cools along the exact trajectory.
    {
        const double threshold = grid.band.t_max() - optout_reentry;
        double pos = grid.band.t_max();
        chains.on_positions.push_back(pos);
        while (true) {
            const double next = etp_step(params, pos, Mode::On, t_amb, dt, 0.0);
            if (next >= pos) {
                throw ModelError("build_m_exit: ON opt-out chain cannot cool to re-entry");
            }
            if (next <= threshold) {
                chains.reentry_bin_hot = grid.bin_of(next);
                break;
            }
            chains.on_positions.push_back(next);
            pos = next;
            if (chains.on_positions.size() > 1000000) {
                throw ModelError("build_m_exit: ON opt-out chain does not terminate");
            }
        }
    }
    // OFF chain: enters at t_min off, warms back toward the band.
    {
        const double threshold = grid.band.t_min() + optout_reentry;
        double pos = grid.band.t_min();
        chains.off_positions.push_back(pos);
        while (true) {
            const double next = etp_step(params, pos, Mode::Off, t_amb, dt, 0.0);
            if (next <= pos) {
                throw ModelError("build_m_exit: OFF opt-out chain cannot warm to re-entry");
            }
            if (next >= threshold) {
                chains.reentry_bin_cold = grid.bin_of(next);
                break;
            }
            chains.off_positions.push_back(next);
            pos = next;
            if (chains.off_positions.size() > 1000000) {
                throw ModelError("build_m_exit: OFF opt-out chain does not terminate");
            }
        }
    }

    const int n = grid.n_bins;
    const double h = grid.width();
    MacroLayout layout{static_cast<int>(chains.on_positions.size()),
                       static_cast<int>(chains.off_positions.size()), n};

    // Per-step boundary crossing fractions of the edge bins, matching the
    // drift kernel used by the transition matrices.
    {
        const double sigma = step_noise_std(params, dt);
        const double t_hot = grid.midpoint(n - 1);
        const double drift_off = etp_step(params, t_hot, Mode::Off, t_amb, dt, 0.0) - t_hot;
        const double hot_lo = grid.band.t_max() - h + drift_off;
        chains.phi_hot = std::clamp(
            1.0 - landing_cdf(grid.band.t_max(), hot_lo, hot_lo + h, sigma), 0.0, 1.0);
        const double t_cold = grid.midpoint(0);
        const double drift_on = etp_step(params, t_cold, Mode::On, t_amb, dt, 0.0) - t_cold;
        const double cold_lo = grid.band.t_min() + drift_on;
        chains.phi_cold = std::clamp(
            landing_cdf(grid.band.t_min(), cold_lo, cold_lo + h, sigma), 0.0, 1.0);
    }

    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(layout.total(), layout.total());
    // ON chain shift and re-entry (devices return OFF: they must request again).
    for (int j = 0; j + 1 < layout.z_on; ++j) {
        m.col(j).setZero();
        m(j + 1, j) = 1.0;
    }
    m.col(layout.z_on - 1).setZero();
    m(layout.off_begin() + chains.reentry_bin_hot, layout.z_on - 1) = 1.0;
    // OFF chain shift and re-entry.
    for (int j = 0; j + 1 < layout.z_off; ++j) {
        const int col = layout.opt_off_begin() + j;
        m.col(col).setZero();
        m(col + 1, col) = 1.0;
    }
    const int last_off = layout.opt_off_begin() + layout.z_off - 1;
    m.col(last_off).setZero();
    m(layout.off_begin() + chains.reentry_bin_cold, last_off) = 1.0;
    // Boundary taps into the chains.
    const int hottest_off = layout.off_begin() + n - 1;
    m(hottest_off, hottest_off) = 1.0 - chains.phi_hot;
    m(layout.opt_on_begin(), hottest_off) = chains.phi_hot;
    const int coldest_on = layout.on_begin();
    m(coldest_on, coldest_on) = 1.0 - chains.phi_cold;
    m(layout.opt_off_begin(), coldest_on) = chains.phi_cold;

    chains.m_exit = std::move(m);
    return chains;
}

// -- assembled model --------------------------------------------------------

Eigen::MatrixXd MacroMatrices::augmented_m() const {
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(layout.total(), layout.total());
    m.block(layout.on_begin(), layout.on_begin(), 2 * layout.n_bins, 2 * layout.n_bins) =
        m_pem;
    return m;
}

std::vector<double> MacroMatrices::state_temperatures() const {
    std::vector<double> temps;
    temps.reserve(layout.total());
    temps.insert(temps.end(), chains.on_positions.begin(), chains.on_positions.end());
    temps.insert(temps.end(), chains.off_positions.begin(), chains.off_positions.end());
    for (int i = 0; i < grid.n_bins; ++i) temps.push_back(grid.midpoint(i));
    for (int i = 0; i < grid.n_bins; ++i) temps.push_back(grid.midpoint(i));
    return temps;
}

MacroMatrices build_macro_matrices(const DeviceParams& params, const BinGrid& grid,
                                   double t_amb, const PemConfig& cfg,
                                   TransitionMethod method,
                                   const EmpiricalOptions& empirical) {
    grid.validate();
    params.validate();
    cfg.validate();

    MacroMatrices mats;
    mats.grid = grid;
    mats.n_timer = cfg.n_timer_bins();
    mats.lockout_bin = cfg.lockout_bin();
    mats.m_pem = drift_chain(params, grid, t_amb, cfg.dt, /*hysteresis_flips=*/false);
    mats.m_hyst = build_transition_matrix(params, grid, t_amb, cfg.dt, method, empirical);
    mats.t_req = build_t_req(grid, cfg.m_r_on(), cfg.dt);
    mats.m_off = build_m_off(mats.n_timer, mats.lockout_bin, cfg.m_r_off(), cfg.dt);
    mats.chains = build_m_exit(grid, cfg.optout_reentry, params, t_amb, cfg.dt);
    mats.layout = MacroLayout{static_cast<int>(mats.chains.on_positions.size()),
                              static_cast<int>(mats.chains.off_positions.size()),
                              grid.n_bins};

    // Timer placement: grants from bin j enter late enough that the bin
    // midpoint trajectory stays inside the band until the packet expires.
    mats.placement.resize(grid.n_bins);
    const double t_on_eq = params.on_equilibrium(t_amb);
    for (int j = 0; j < grid.n_bins; ++j) {
        double residence = cfg.packet_len;
        if (t_on_eq < grid.band.t_min()) {
            const double t_to_floor =
                params.tau_seconds() *
                std::log((grid.midpoint(j) - t_on_eq) / (grid.band.t_min() - t_on_eq));
            residence = std::min(residence, t_to_floor);
        }
        const int b = static_cast<int>(std::floor((cfg.packet_len - residence) / cfg.dt));
        mats.placement[j] = std::clamp(b, 1, mats.n_timer);
    }

    mats.c_map = Eigen::VectorXd::Zero(mats.layout.total());
    mats.c_map.head(mats.layout.z_on).setOnes();
    mats.c_map.segment(mats.layout.on_begin(), grid.n_bins).setOnes();
    return mats;
}

MacroState uniform_off_state(const MacroMatrices& mats) {
    MacroState s;
    s.q = Eigen::VectorXd::Zero(mats.layout.total());
    s.q.segment(mats.layout.off_begin(), mats.layout.n_bins)
        .setConstant(1.0 / mats.layout.n_bins);
    s.x_p = Eigen::VectorXd::Zero(mats.n_timer);
    return s;
}

MacroState state_from_distribution(const MacroMatrices& mats,
                                   const Eigen::VectorXd& q_2n) {
    if (q_2n.size() != 2 * mats.layout.n_bins) {
        throw ModelError("state_from_distribution: expected a 2N bin vector");
    }
    MacroState s;
    s.q = Eigen::VectorXd::Zero(mats.layout.total());
    s.q.segment(mats.layout.on_begin(), 2 * mats.layout.n_bins) = q_2n.cwiseMax(0.0);
    s.q /= s.q.sum();
    const double on_mass = s.on_mass(mats.layout);
    s.x_p = Eigen::VectorXd::Constant(mats.n_timer, on_mass / mats.n_timer);
    return s;
}

MacroStepResult macro_step_detailed(const MacroState& state, const MacroMatrices& mats,
                                    double beta_on, double beta_off) {
    const MacroLayout& layout = mats.layout;
    if (beta_on < 0.0 || beta_on > 1.0 || beta_off < 0.0 || beta_off > 1.0) {
        throw ModelError("macro_step: betas must lie in [0,1]");
    }
    if (beta_on > 0.0 && beta_off > 0.0) {
        throw ModelError("macro_step: complementarity violated (both betas positive)");
    }

    const double b_minus = beta_off_minus(beta_off, state.x_p, mats.m_off);
    const Eigen::VectorXd q_plus = on_request_flow(state.q, mats.t_req, beta_on, layout);
    const OffRequestFlow off = off_request_flow(state.x_p, mats.m_off, beta_off);
    const Eigen::VectorXd q_minus = off_flow_to_temperature(state.q, b_minus, layout);

    // Controlled switching, then natural drift on the in-PEM block.
    Eigen::VectorXd q_drift = state.q + q_plus - q_minus;
    q_drift.segment(layout.on_begin(), 2 * layout.n_bins) =
        mats.m_pem * q_drift.segment(layout.on_begin(), 2 * layout.n_bins);

    MacroStepResult result;
    result.flows.optout_in_hot =
        mats.chains.phi_hot * q_drift(layout.off_begin() + layout.n_bins - 1);
    result.flows.optout_in_cold = mats.chains.phi_cold * q_drift(layout.on_begin());
    result.flows.optout_return =
        q_drift(layout.z_on - 1) + q_drift(layout.opt_off_begin() + layout.z_off - 1);

    result.next.q = mats.chains.m_exit * q_drift;
    result.next.x_p = timer_step(state.x_p, q_plus, off.x_p_off, mats.placement, layout);

    // ON mass that slid out through t_min leaves the timer proportionally.
    const double timer_total = result.next.x_p.sum();
    if (timer_total > 0.0 && result.flows.optout_in_cold > 0.0) {
        const double frac = std::min(1.0, result.flows.optout_in_cold / timer_total);
        result.next.x_p *= 1.0 - frac;
        result.flows.timer_abandon_frac = frac;
    }

    if (result.next.q.minCoeff() < kNegativityFloor) {
        throw ModelError("macro_step: negative state mass " +
                         std::to_string(result.next.q.minCoeff()));
    }
    result.next.q = result.next.q.cwiseMax(0.0);
    if (std::abs(result.next.q.sum() - state.q.sum()) > kMassTol) {
        throw ModelError("macro_step: mass not conserved, drift " +
                         std::to_string(result.next.q.sum() - state.q.sum()));
    }
    if (std::abs(result.next.x_p.sum() - result.next.on_mass(layout)) > kTimerTol) {
        throw ModelError("macro_step: timer mass diverged from ON mass by " +
                         std::to_string(result.next.x_p.sum() -
                                        result.next.on_mass(layout)));
    }
    return result;
}

MacroState macro_step(const MacroState& state, const MacroMatrices& mats, double beta_on,
                      double beta_off) {
    return macro_step_detailed(state, mats, beta_on, beta_off).next;
}

// -- closed-loop simulation -------------------------------------------------

namespace {

struct Cohort {
    int entry_bin;  // 1-based timer bin where the grant was placed
    int bin;        // current 1-based timer bin
    double mass;
};

}  // namespace

Trace simulate_macro(const MacroMatrices& mats, const PemConfig& cfg,
                     const ReferenceSignal& signal, const MacroState& init,
                     const MacroSimOptions& options, MacroState* final_state) {
    cfg.validate();
    if (std::abs(signal.dt - cfg.dt) > 1e-9) {
        throw ConfigError("simulate_macro: signal dt does not match control dt");
    }
    if (signal.size() < 2) throw ConfigError("simulate_macro: signal too short");
    init.validate(mats.layout);

    const MacroLayout& layout = mats.layout;
    const std::vector<double> temps = mats.state_temperatures();
    const std::size_t n_steps = signal.size() - 1;
    const int n = mats.n_timer;

    std::ofstream snapshot;
    if (!options.snapshot_path.empty()) {
        snapshot.open(options.snapshot_path);
        if (!snapshot) throw ConfigError("cannot write " + options.snapshot_path);
    }

    std::vector<Cohort> cohorts;
    for (int r = 1; r <= n; ++r) {
        if (init.x_p(r - 1) > 0.0) cohorts.push_back({1, r, init.x_p(r - 1)});
    }

    MacroState state = init;
    Trace trace;
    trace.steps.reserve(n_steps);
    trace.temp_distribution.reserve(n_steps);

    for (std::size_t k = 0; k < n_steps; ++k) {
        StepTrace row;
        row.time_s = static_cast<double>(k) * cfg.dt;
        row.p_ref_kw = signal.value(k);
        row.p_agg_kw = options.fleet_rated_kw * mats.c_map.dot(state.q);
        row.optout_fraction = state.optout_mass(layout);

        double mean = 0.0;
        for (int i = 0; i < layout.total(); ++i) mean += temps[i] * state.q(i);
        double var = 0.0;
        std::vector<double> dist(layout.n_bins, 0.0);
        for (int i = 0; i < layout.total(); ++i) {
            const double d = temps[i] - mean;
            var += state.q(i) * d * d;
            dist[mats.grid.bin_of(temps[i])] += state.q(i);
        }
        row.temp_mean_f = mean;
        row.temp_std_f = std::sqrt(std::max(0.0, var));

        const double n_on = n_req_on(state.q, mats.t_req, layout);
        const double n_off = mats.m_off.cwiseProduct(state.x_p).sum();
        const double x_last = state.x_p(n - 1);
        const BetaPair betas = compute_betas(row.p_agg_kw, signal.value(k + 1), n_on,
                                             n_off, x_last, options.fleet_rated_kw);
        row.n_req_on = n_on;
        row.n_req_off = n_off;
        row.beta_on = betas.beta_on;
        row.beta_off = betas.beta_off;

        // Grant masses by temperature bin, before the state advances.
        const Eigen::VectorXd granted_on =
            betas.beta_on *
            mats.t_req.cwiseProduct(state.q.segment(layout.off_begin(), layout.n_bins));

        const MacroStepResult step =
            macro_step_detailed(state, mats, betas.beta_on, betas.beta_off);

        // Packet-length accounting by grant cohort. Consumed time for a
        // cohort placed at bin b now sitting at bin r is (r - b + 1)*dt.
        std::map<std::pair<int, PacketEnd>, double> emitted;
        std::vector<Cohort> survivors;
        survivors.reserve(cohorts.size() + 8);
        for (const Cohort& c : cohorts) {
            const int consumed_steps = c.bin - c.entry_bin + 1;
            if (c.bin == n) {
                emitted[{consumed_steps, PacketEnd::Expiry}] += c.mass;
                continue;
            }
            const double granted = betas.beta_off * mats.m_off(c.bin - 1) * c.mass;
            if (granted > 0.0) emitted[{consumed_steps, PacketEnd::OffGrant}] += granted;
            const double remaining = c.mass - granted;
            if (remaining > 1e-18) survivors.push_back({c.entry_bin, c.bin + 1, remaining});
        }
        for (int j = 0; j < layout.n_bins; ++j) {
            if (granted_on(j) <= 0.0) continue;
            const int b = mats.placement[j];
            bool merged = false;
            for (auto& c : survivors) {
                if (c.entry_bin == b && c.bin == b) {
                    c.mass += granted_on(j);
                    merged = true;
                    break;
                }
            }
            if (!merged) survivors.push_back({b, b, granted_on(j)});
        }
        if (step.flows.timer_abandon_frac > 0.0) {
            for (auto& c : survivors) {
                const double lost = c.mass * step.flows.timer_abandon_frac;
                if (lost > 0.0) {
                    emitted[{c.bin - c.entry_bin + 1, PacketEnd::OptOut}] += lost;
                }
                c.mass -= lost;
            }
        }
        cohorts = std::move(survivors);
        for (const auto& [key, weight] : emitted) {
            row.packet_completions.push_back(
                {static_cast<double>(key.first) * cfg.dt, weight, key.second});
        }

        if (snapshot.is_open()) {
            char buf[32];
            for (int i = 0; i < layout.total(); ++i) {
                std::snprintf(buf, sizeof(buf), "%s%.10g", i ? "," : "", state.q(i));
                snapshot << buf;
            }
            snapshot << '\n';
        }

        state = step.next;
        trace.temp_distribution.push_back(std::move(dist));
        trace.steps.push_back(std::move(row));
    }
    if (final_state != nullptr) *final_state = state;
    return trace;
}

void write_matrix_csv(const Eigen::MatrixXd& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write matrix file: " + path);
    char buf[32];
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%s%.12g", j ? "," : "", m(i, j));
            out << buf;
        }
        out << '\n';
    }
}

}  // namespace pemsim
