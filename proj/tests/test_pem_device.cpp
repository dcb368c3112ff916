#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "pemsim/pem_device.hpp"

using namespace pemsim;

namespace {

PemConfig default_cfg() { return PemConfig{}; }

MicroDevice make_device(double temp, PemMode mode) {
    MicroDevice d;
    d.params = DeviceParams{2.5, 1.8, 3.5, 6.0, 0.0};
    d.band = ThermalBand{73.0, 2.0};
    d.temperature = temp;
    d.mode = mode;
    return d;
}

}  // namespace

TEST_CASE("PemConfig validation and bin counts") {
    PemConfig cfg = default_cfg();
    CHECK(cfg.n_timer_bins() == 150);
    CHECK(cfg.lockout_bin() == 30);
    CHECK(cfg.m_r_on() == doctest::Approx(1.0 / 300.0));
    CHECK_NOTHROW(cfg.validate());

    cfg.t_lockout = 400.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = default_cfg();
    cfg.t_on_max = 200.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("ON request rate over the band") {
    const ThermalBand band{73.0, 2.0};
    const double m_r = 1.0 / 300.0;
    CHECK(mu_on(band.t_min(), band, m_r) == 0.0);
    CHECK(mu_on(71.0, band, m_r) == 0.0);
    CHECK(mu_on(73.0, band, m_r) == doctest::Approx(m_r));  // midpoint ratio is 1
    CHECK(std::isinf(mu_on(band.t_max(), band, m_r)));
    CHECK(std::isinf(mu_on(80.0, band, m_r)));
    // Monotone in temperature inside the band.
    CHECK(mu_on(73.5, band, m_r) > mu_on(73.0, band, m_r));
}

TEST_CASE("ON request probability") {
    const ThermalBand band{73.0, 2.0};
    const double m_r = 1.0 / 300.0;
    CHECK(p_req_on(band.t_min(), band, m_r, 2.0) == 0.0);
    CHECK(p_req_on(band.t_max(), band, m_r, 2.0) == 1.0);
    CHECK(p_req_on(73.0, band, m_r, 2.0) ==
          doctest::Approx(1.0 - std::exp(-2.0 / 300.0)).epsilon(1e-12));
    CHECK(p_req_on(73.0, band, m_r, 2.0) == doctest::Approx(0.006645).epsilon(1e-3));
}

TEST_CASE("OFF request probability over the packet") {
    const PemConfig cfg = default_cfg();
    const int n = cfg.n_timer_bins();
    CHECK(p_req_off_micro(30.0, cfg, n) == 0.0);
    CHECK(p_req_off_micro(60.0, cfg, n) == 0.0);  // lockout bin itself
    CHECK(p_req_off_micro(62.0, cfg, n) > 0.0);
    CHECK(p_req_off_micro(cfg.packet_len, cfg, n) == 1.0);
    // Non-decreasing beyond the lockout.
    double prev = 0.0;
    for (double e = 62.0; e <= cfg.packet_len; e += 2.0) {
        const double p = p_req_off_micro(e, cfg, n);
        CHECK(p >= prev);
        prev = p;
    }
}

TEST_CASE("device_step state machine") {
    const PemConfig cfg = default_cfg();
    Rng rng(1, 0);

    SUBCASE("OFF device at t_max opts out without needing a grant") {
        MicroDevice d = make_device(74.0, PemMode::OffIdle);
        const MicroDevice next =
            device_step(d, RequestKind::None, false, false, 89.0, cfg, rng);
        CHECK(next.mode == PemMode::OptOutOn);
        CHECK(next.electrically_on());
    }

    SUBCASE("packet expiry turns the device off regardless of grants") {
        MicroDevice d = make_device(72.5, PemMode::OnPacket);
        d.packet_elapsed = cfg.packet_len;
        const MicroDevice next =
            device_step(d, RequestKind::None, false, false, 89.0, cfg, rng);
        CHECK(next.mode == PemMode::OffIdle);
        CHECK(next.packet_elapsed == 0.0);
    }

    SUBCASE("opted-out unit cooling past the re-entry offset rejoins as OFF") {
        MicroDevice d = make_device(74.0 - cfg.optout_reentry + 1e-4, PemMode::OptOutOn);
        const MicroDevice next =
            device_step(d, RequestKind::None, false, false, 89.0, cfg, rng);
        CHECK(next.mode == PemMode::OffIdle);
        CHECK_FALSE(next.electrically_on());
    }

    SUBCASE("opted-out-cold unit warming past the re-entry offset rejoins as OFF") {
        MicroDevice d = make_device(72.0 + cfg.optout_reentry - 1e-4, PemMode::OptOutOff);
        const MicroDevice next =
            device_step(d, RequestKind::None, false, false, 89.0, cfg, rng);
        CHECK(next.mode == PemMode::OffIdle);
    }

    SUBCASE("granted ON request starts a packet") {
        MicroDevice d = make_device(73.2, PemMode::OffIdle);
        const MicroDevice next =
            device_step(d, RequestKind::TurnOn, true, false, 89.0, cfg, rng);
        CHECK(next.mode == PemMode::OnPacket);
        CHECK(next.packet_elapsed == doctest::Approx(cfg.dt));
        CHECK(next.packet_len == doctest::Approx(cfg.packet_len));
        CHECK(next.temperature < d.temperature);
    }

    SUBCASE("granted OFF request past the lockout ends the packet") {
        MicroDevice d = make_device(72.8, PemMode::OnPacket);
        d.packet_elapsed = 120.0;
        const MicroDevice next =
            device_step(d, RequestKind::TurnOff, false, true, 89.0, cfg, rng);
        CHECK(next.mode == PemMode::OffIdle);
    }

    SUBCASE("denied requests trigger the matching MTTR backoff") {
        MicroDevice d = make_device(73.4, PemMode::OffIdle);
        MicroDevice next = device_step(d, RequestKind::TurnOn, false, false, 89.0, cfg, rng);
        CHECK(next.mode == PemMode::OffIdle);
        CHECK(next.backoff_remaining == doctest::Approx(cfg.mttr_on - cfg.dt));
        CHECK(sample_request(next, cfg, rng) == RequestKind::None);

        MicroDevice on = make_device(72.8, PemMode::OnPacket);
        on.packet_elapsed = 120.0;
        next = device_step(on, RequestKind::TurnOff, false, false, 89.0, cfg, rng);
        CHECK(next.mode == PemMode::OnPacket);
        CHECK(next.backoff_remaining == doctest::Approx(cfg.mttr_off - cfg.dt));
    }
}

TEST_CASE("request sampling respects mode, lockout and backoff") {
    const PemConfig cfg = default_cfg();
    Rng rng(2, 0);

    MicroDevice optout = make_device(74.5, PemMode::OptOutOn);
    for (int i = 0; i < 100; ++i) {
        CHECK(sample_request(optout, cfg, rng) == RequestKind::None);
    }

    MicroDevice locked = make_device(72.5, PemMode::OnPacket);
    locked.packet_elapsed = 40.0;
    for (int i = 0; i < 100; ++i) {
        CHECK(sample_request(locked, cfg, rng) == RequestKind::None);
    }

    MicroDevice expiring = make_device(72.5, PemMode::OnPacket);
    expiring.packet_elapsed = cfg.packet_len;
    CHECK(sample_request(expiring, cfg, rng) == RequestKind::TurnOff);

    MicroDevice hot = make_device(73.99, PemMode::OffIdle);
    CHECK(sample_request(hot, cfg, rng) == RequestKind::TurnOn);

    MicroDevice backed = make_device(73.99, PemMode::OffIdle);
    backed.backoff_remaining = 10.0;
    CHECK(sample_request(backed, cfg, rng) == RequestKind::None);
}
