#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <cmath>

#include "macro_oracle.hpp"
#include "pemsim/errors.hpp"
#include "pemsim/macro_model.hpp"
#include "pemsim/rng.hpp"

using namespace pemsim;

namespace {

DeviceParams default_params() { return DeviceParams{2.5, 1.8, 3.5, 6.0, 0.0}; }
BinGrid default_grid() { return BinGrid{40, ThermalBand{73.0, 2.0}}; }

PemConfig small_pem() {
    PemConfig cfg;
    cfg.packet_len = 6.0;
    cfg.dt = 2.0;
    cfg.t_lockout = 2.0;
    cfg.t_on_max = 6.0;
    return cfg;
}

MacroMatrices default_mats() {
    return build_macro_matrices(default_params(), default_grid(), 89.0, PemConfig{});
}

MacroState random_state(const MacroMatrices& mats, Rng& rng) {
    return pemsim::testing::random_macro_state(mats, rng);
}

}  // namespace

TEST_CASE("analytic transition matrix structure") {
    const BinGrid grid = default_grid();
    const Eigen::MatrixXd m =
        build_transition_matrix(default_params(), grid, 89.0, 2.0);
    const int n = grid.n_bins;

    SUBCASE("columns sum to one exactly") {
        for (int j = 0; j < 2 * n; ++j) {
            CHECK(m.col(j).sum() == doctest::Approx(1.0).epsilon(1e-14));
        }
    }

    SUBCASE("OFF mass only drifts toward hotter bins") {
        for (int j = 0; j < n - 1; ++j) {
            const int col = n + j;
            for (int i = 0; i < 2 * n; ++i) {
                if (m(i, col) == 0.0) continue;
                CHECK((i == col || i == col + 1));  // stay or move one bin hotter
            }
        }
    }

    SUBCASE("ON mass only drifts toward colder bins") {
        for (int j = 1; j < n; ++j) {
            for (int i = 0; i < 2 * n; ++i) {
                if (m(i, j) == 0.0) continue;
                CHECK((i == j || i == j - 1));
            }
        }
    }

    SUBCASE("hysteresis flips live at the band edges") {
        CHECK(m(n - 1, 2 * n - 1) > 0.0);  // hottest OFF -> hottest ON
        CHECK(m(n + 0, 0) > 0.0);          // coldest ON -> coldest OFF
    }

    SUBCASE("drift beyond one bin width is rejected") {
        CHECK_THROWS_AS(
            build_transition_matrix(default_params(), grid, 89.0, 600.0),
            ModelError);
    }
}

TEST_CASE("stationary distribution of the hysteresis chain") {
    const Eigen::MatrixXd m =
        build_transition_matrix(default_params(), default_grid(), 89.0, 2.0);
    const Eigen::VectorXd v = stationary_distribution(m);

    CHECK(v.minCoeff() >= 0.0);
    CHECK(v.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((m * v - v).cwiseAbs().maxCoeff() < 1e-10);

    SUBCASE("ON mass matches the analytic duty cycle within 2%") {
        const double duty =
            analytic_duty_cycle(default_params(), default_grid().band, 89.0);
        const double on_mass = v.head(40).sum();
        CHECK(std::abs(on_mass - duty) / duty < 0.02);
    }

    SUBCASE("eigenvalue 1 is simple") {
        Eigen::EigenSolver<Eigen::MatrixXd> solver(m);
        int near_one = 0;
        for (int i = 0; i < solver.eigenvalues().size(); ++i) {
            if (std::abs(solver.eigenvalues()(i) - std::complex<double>(1.0, 0.0)) < 1e-8) {
                ++near_one;
            }
        }
        CHECK(near_one == 1);
    }
}

TEST_CASE("empirical transition matrix agrees with the analytic chain") {
    EmpiricalOptions opts;
    opts.seed = 3;
    opts.n_steps = 2000000;
    const Eigen::MatrixXd m = build_transition_matrix(
        default_params(), default_grid(), 89.0, 2.0, TransitionMethod::Empirical, opts);
    for (int j = 0; j < m.cols(); ++j) {
        CHECK(m.col(j).sum() == doctest::Approx(1.0).epsilon(1e-12));
    }
    const Eigen::VectorXd v = stationary_distribution(m);
    const double duty = analytic_duty_cycle(default_params(), default_grid().band, 89.0);
    CHECK(std::abs(v.head(40).sum() - duty) / duty < 0.05);
}

TEST_CASE("ON request probability diagonal") {
    const BinGrid grid = default_grid();
    const Eigen::VectorXd t_req = build_t_req(grid, 1.0 / 300.0, 2.0);

    CHECK(t_req(0) < 1e-4);  // coldest midpoint requests almost never
    // Midpoint bin of an even grid straddles t_set; check the formula value.
    const double mid_p = p_req_on(grid.midpoint(19), grid.band, 1.0 / 300.0, 2.0);
    CHECK(t_req(19) == doctest::Approx(mid_p));
    CHECK(t_req(grid.n_bins - 1) < 1.0);
    CHECK(t_req(grid.n_bins - 1) == doctest::Approx(t_req.maxCoeff()));
    for (int i = 1; i < grid.n_bins; ++i) CHECK(t_req(i) >= t_req(i - 1));
}

TEST_CASE("turn-OFF probability diagonal") {
    const Eigen::VectorXd m_off = build_m_off(150, 30, 1.0 / 120.0, 2.0);
    for (int r = 1; r <= 30; ++r) CHECK(m_off(r - 1) == 0.0);
    CHECK(m_off(30) > 0.0);
    CHECK(m_off(149) == 1.0);
    for (int r = 31; r <= 150; ++r) CHECK(m_off(r - 1) >= m_off(r - 2));
    CHECK_THROWS_AS(build_m_off(10, 10, 1.0, 2.0), ModelError);
}

TEST_CASE("request flows") {
    const MacroMatrices mats = default_mats();
    Rng rng(8, 0);
    const MacroState s = random_state(mats, rng);
    const MacroLayout& L = mats.layout;

    SUBCASE("zero acceptance moves nothing") {
        CHECK(on_request_flow(s.q, mats.t_req, 0.0, L).cwiseAbs().maxCoeff() == 0.0);
    }

    SUBCASE("no OFF mass means no requesters") {
        Eigen::VectorXd q = s.q;
        q.segment(L.off_begin(), L.n_bins).setZero();
        CHECK(on_request_flow(q, mats.t_req, 0.7, L).cwiseAbs().maxCoeff() == 0.0);
        CHECK(n_req_on(q, mats.t_req, L) == 0.0);
    }

    SUBCASE("moved mass equals the accepted fraction of requests") {
        const double beta = 0.42;
        const Eigen::VectorXd q_plus = on_request_flow(s.q, mats.t_req, beta, L);
        const double moved = q_plus.segment(L.on_begin(), L.n_bins).sum();
        CHECK(moved == doctest::Approx(beta * n_req_on(s.q, mats.t_req, L)).epsilon(1e-12));
        CHECK(q_plus.sum() == doctest::Approx(0.0).epsilon(1e-15));
    }

    SUBCASE("n_req_on special cases") {
        Eigen::VectorXd q = Eigen::VectorXd::Zero(L.total());
        q(L.off_begin() + L.n_bins - 1) = 0.3;  // all OFF mass in the hottest bin
        CHECK(n_req_on(q, mats.t_req, L) ==
              doctest::Approx(0.3 * mats.t_req(L.n_bins - 1)));
        q.segment(L.off_begin(), L.n_bins).setConstant(0.5 / L.n_bins);
        CHECK(n_req_on(q, mats.t_req, L) ==
              doctest::Approx(0.5 * mats.t_req.mean()).epsilon(1e-12));
    }

    SUBCASE("off_request_flow") {
        const OffRequestFlow none = off_request_flow(Eigen::VectorXd::Zero(150), mats.m_off, 0.5);
        CHECK(none.n_req_off == 0.0);

        const OffRequestFlow rejected = off_request_flow(s.x_p, mats.m_off, 0.0);
        CHECK(rejected.x_p_off.cwiseAbs().maxCoeff() == 0.0);
        CHECK(rejected.n_req_off > 0.0);  // requests still made

        Eigen::VectorXd locked = Eigen::VectorXd::Zero(150);
        locked.head(30).setConstant(0.01);  // only locked-out mass
        CHECK(off_request_flow(locked, mats.m_off, 1.0).n_req_off == 0.0);
    }
}

TEST_CASE("timer step") {
    const MacroMatrices mats = default_mats();
    const MacroLayout& L = mats.layout;
    const int n = mats.n_timer;

    SUBCASE("pure shift drops the final bin") {
        Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
        x(0) = 0.1;
        x(n - 1) = 0.2;
        const Eigen::VectorXd next =
            timer_step(x, Eigen::VectorXd::Zero(L.total()), Eigen::VectorXd::Zero(n),
                       mats.placement, L);
        CHECK(next(1) == doctest::Approx(0.1));
        CHECK(next(0) == 0.0);
        CHECK(next.sum() == doctest::Approx(0.1));  // final-bin mass left the timer
    }

    SUBCASE("cool-bin grants enter the first timer bin") {
        CHECK(mats.placement[L.n_bins - 1] == 1);  // hottest bin survives a full packet
        Eigen::VectorXd q_plus = Eigen::VectorXd::Zero(L.total());
        q_plus(L.on_begin() + L.n_bins - 1) = 0.05;
        const Eigen::VectorXd next =
            timer_step(Eigen::VectorXd::Zero(n), q_plus, Eigen::VectorXd::Zero(n),
                       mats.placement, L);
        CHECK(next(0) == doctest::Approx(0.05));
    }

    SUBCASE("grants from the coldest bin are placed late (shortened packet)") {
        // Near t_min the midpoint trajectory hits the band floor quickly.
        CHECK(mats.placement[0] > 1);
        const double t_on_eq = default_params().on_equilibrium(89.0);
        const double t_j =
            default_params().tau_seconds() *
            std::log((mats.grid.midpoint(0) - t_on_eq) /
                     (mats.grid.band.t_min() - t_on_eq));
        const int expected =
            std::clamp(static_cast<int>(std::floor((300.0 - t_j) / 2.0)), 1, n);
        CHECK(mats.placement[0] == expected);
    }

    SUBCASE("negative removal beyond float noise aborts") {
        Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
        x(5) = 0.01;
        Eigen::VectorXd bad_off = Eigen::VectorXd::Zero(n);
        bad_off(5) = 0.02;  // remove more than is present
        CHECK_THROWS_AS(timer_step(x, Eigen::VectorXd::Zero(L.total()), bad_off,
                                   mats.placement, L),
                        ModelError);
    }
}

TEST_CASE("beta_off_minus") {
    const MacroMatrices mats = default_mats();
    Rng rng(12, 0);

    Eigen::VectorXd x(150);
    for (int r = 0; r < 150; ++r) x(r) = rng.uniform01();

    const double total = x.sum();
    const double requested = mats.m_off.cwiseProduct(x).sum();
    CHECK(beta_off_minus(1.0, x, mats.m_off) == doctest::Approx(requested / total));
    CHECK(beta_off_minus(0.0, x, mats.m_off) == doctest::Approx(x(149) / total));
    CHECK(beta_off_minus(0.5, Eigen::VectorXd::Zero(150), mats.m_off) == 0.0);

    for (int rep = 0; rep < 200; ++rep) {
        Eigen::VectorXd xr(150);
        for (int r = 0; r < 150; ++r) xr(r) = rng.uniform01();
        const double b = beta_off_minus(rng.uniform01(), xr, mats.m_off);
        CHECK(b >= 0.0);
        CHECK(b <= 1.0);
    }
}

TEST_CASE("uniform OFF-flow to temperature space") {
    const MacroMatrices mats = default_mats();
    Rng rng(14, 0);
    const MacroState s = random_state(mats, rng);
    const MacroLayout& L = mats.layout;

    CHECK(off_flow_to_temperature(s.q, 0.0, L).cwiseAbs().maxCoeff() == 0.0);

    const Eigen::VectorXd all = off_flow_to_temperature(s.q, 1.0, L);
    CHECK(all.segment(L.on_begin(), L.n_bins).sum() ==
          doctest::Approx(s.on_mass(L)).epsilon(1e-12));

    const Eigen::VectorXd half = off_flow_to_temperature(s.q, 0.5, L);
    CHECK(half.segment(L.on_begin(), L.n_bins).sum() ==
          doctest::Approx(0.5 * s.on_mass(L)).epsilon(1e-12));
    CHECK(half.sum() == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("opt-out chains") {
    const MacroMatrices mats = default_mats();
    const OptOutChains& chains = mats.chains;
    const MacroLayout& L = mats.layout;

    SUBCASE("columns sum to one exactly") {
        for (int j = 0; j < L.total(); ++j) {
            CHECK(chains.m_exit.col(j).sum() == doctest::Approx(1.0).epsilon(1e-14));
        }
    }

    SUBCASE("identity on in-PEM bins away from the tapped edges") {
        for (int j = L.on_begin(); j < L.total(); ++j) {
            if (j == L.on_begin()) continue;                  // cold tap
            if (j == L.off_begin() + L.n_bins - 1) continue;  // hot tap
            CHECK(chains.m_exit(j, j) == 1.0);
        }
    }

    SUBCASE("boundary bins are tapped into the chains") {
        CHECK(chains.phi_hot > 0.0);
        CHECK(chains.phi_cold > 0.0);
        CHECK(chains.m_exit(0, L.off_begin() + L.n_bins - 1) ==
              doctest::Approx(chains.phi_hot));
        CHECK(chains.m_exit(L.opt_off_begin(), L.on_begin()) ==
              doctest::Approx(chains.phi_cold));
    }

    SUBCASE("chain terminals feed the re-entry OFF bins") {
        const int hot_terminal = L.z_on - 1;
        CHECK(chains.m_exit(L.off_begin() + chains.reentry_bin_hot, hot_terminal) == 1.0);
        const int cold_terminal = L.opt_off_begin() + L.z_off - 1;
        CHECK(chains.m_exit(L.off_begin() + chains.reentry_bin_cold, cold_terminal) == 1.0);
        // Re-entry sits one offset inside the violated boundary.
        CHECK(mats.grid.midpoint(chains.reentry_bin_hot) ==
              doctest::Approx(74.0 - 0.25).epsilon(0.001));
        CHECK(mats.grid.midpoint(chains.reentry_bin_cold) ==
              doctest::Approx(72.0 + 0.25).epsilon(0.001));
    }

    SUBCASE("chain positions follow the drift direction") {
        for (std::size_t i = 1; i < chains.on_positions.size(); ++i) {
            CHECK(chains.on_positions[i] < chains.on_positions[i - 1]);
        }
        for (std::size_t i = 1; i < chains.off_positions.size(); ++i) {
            CHECK(chains.off_positions[i] > chains.off_positions[i - 1]);
        }
    }

    SUBCASE("a unit that cannot cool is rejected") {
        DeviceParams weak = default_params();
        weak.p_rate = 0.1;
        CHECK_THROWS_AS(build_m_exit(default_grid(), 0.25, weak, 89.0, 2.0), ModelError);
    }
}

TEST_CASE("macro_step") {
    const MacroMatrices mats = default_mats();
    const MacroLayout& L = mats.layout;
    Rng rng(20, 0);

    SUBCASE("zero control with no boundary mass reduces to the drift chain") {
        MacroState s;
        s.q = Eigen::VectorXd::Zero(L.total());
        for (int i = 5; i < 35; ++i) s.q(L.off_begin() + i) = 1.0 / 30.0;
        s.x_p = Eigen::VectorXd::Zero(mats.n_timer);

        const MacroState next = macro_step(s, mats, 0.0, 0.0);
        const Eigen::VectorXd expected = mats.chains.m_exit * (mats.augmented_m() * s.q);
        CHECK((next.q - expected).cwiseAbs().maxCoeff() < 1e-14);
    }

    SUBCASE("complementarity and range are enforced") {
        MacroState s = random_state(mats, rng);
        CHECK_THROWS_AS(macro_step(s, mats, 0.5, 0.5), ModelError);
        CHECK_THROWS_AS(macro_step(s, mats, -0.1, 0.0), ModelError);
        CHECK_THROWS_AS(macro_step(s, mats, 0.0, 1.5), ModelError);
    }

    SUBCASE("denied requests at the hot boundary flow into the ON opt-out chain") {
        MacroState s;
        s.q = Eigen::VectorXd::Zero(L.total());
        s.q(L.off_begin() + L.n_bins - 1) = 1.0;  // everything hot and OFF
        s.x_p = Eigen::VectorXd::Zero(mats.n_timer);
        MacroState cur = s;
        for (int k = 0; k < 5; ++k) cur = macro_step(cur, mats, 0.0, 0.0);
        CHECK(cur.q.head(L.z_on).sum() > 0.0);
        CHECK(cur.q.sum() == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("mass, non-negativity and timer consistency over random controlled steps") {
        MacroState s = random_state(mats, rng);
        for (int k = 0; k < 300; ++k) {
            const bool up = rng.bernoulli(0.5);
            const double beta = rng.uniform01();
            s = macro_step(s, mats, up ? beta : 0.0, up ? 0.0 : beta);
            CHECK(std::abs(s.q.sum() - 1.0) < 1e-10);
            CHECK(s.q.minCoeff() >= 0.0);
            CHECK(std::abs(s.x_p.sum() - s.on_mass(L)) < 1e-8);
        }
    }
}

TEST_CASE("small-instance oracle: macro_step equals the per-bin enumeration") {
    BinGrid grid{4, ThermalBand{73.0, 2.0}};
    const MacroMatrices mats =
        build_macro_matrices(default_params(), grid, 89.0, small_pem());
    REQUIRE(mats.n_timer == 3);

    Rng rng(2024, 0);
    for (int rep = 0; rep < 1000; ++rep) {
        const MacroState s = random_state(mats, rng);
        const bool up = rng.bernoulli(0.5);
        const double beta = rng.uniform01();
        const double beta_on = up ? beta : 0.0;
        const double beta_off = up ? 0.0 : beta;

        const MacroState got = macro_step(s, mats, beta_on, beta_off);
        const MacroState want = pemsim::testing::oracle_step(s, mats, beta_on, beta_off);
        CHECK((got.q - want.q).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((got.x_p - want.x_p).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("state initializers") {
    const MacroMatrices mats = default_mats();

    const MacroState uniform = uniform_off_state(mats);
    CHECK(uniform.q.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(uniform.on_mass(mats.layout) == 0.0);
    CHECK_NOTHROW(uniform.validate(mats.layout));

    const Eigen::VectorXd stationary = stationary_distribution(mats.m_hyst);
    const MacroState steady = state_from_distribution(mats, stationary);
    CHECK_NOTHROW(steady.validate(mats.layout));
    CHECK(steady.x_p.sum() == doctest::Approx(steady.on_mass(mats.layout)).epsilon(1e-9));
    CHECK(steady.x_p(0) == doctest::Approx(steady.x_p(mats.n_timer - 1)));
}

TEST_CASE("macro completion accounting balances the ON-mass flows") {
    const MacroMatrices mats = default_mats();
    const Eigen::VectorXd stationary = stationary_distribution(mats.m_hyst);
    const MacroState init = state_from_distribution(mats, stationary);

    const ReferenceSignal sig =
        scale_signal(synth_regd(600.0, 2.0, 5), 1827.0, 300.0);
    MacroSimOptions options;
    options.fleet_rated_kw = 6000.0;
    MacroState final_state;
    const Trace trace = simulate_macro(mats, PemConfig{}, sig, init, options, &final_state);

    double granted = 0.0, completed = 0.0;
    for (const auto& s : trace.steps) {
        granted += s.beta_on * s.n_req_on;
        for (const auto& c : s.packet_completions) completed += c.weight;
    }
    const double on_initial = init.on_mass(mats.layout);
    const double on_final = final_state.on_mass(mats.layout);
    CHECK(on_initial + granted - completed == doctest::Approx(on_final).epsilon(1e-9));
}
