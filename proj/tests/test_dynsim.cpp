#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "stvsa/dynsim.hpp"

using namespace stvsa;
using namespace stvsa::dynsim;

namespace {

ScenarioSpec small_spec() {
    ScenarioSpec spec;
    spec.load_levels = {0.8, 0.9, 1.0, 1.1, 1.2};
    spec.motor_ratios = {0.7, 0.8, 0.9};
    spec.fault_severities = {0.3, 0.5, 0.7, 0.9};
    spec.fault_start_s = 0.1;
    spec.clearing_times_s = {0.15, 0.2};
    spec.n_bus = 4;
    spec.horizon_s = 4.0;
    spec.seed = 7;
    return spec;
}

// Denser clearing axis used for regime-balance checks.
ScenarioSpec regime_spec() {
    ScenarioSpec spec = small_spec();
    spec.clearing_times_s = {0.14, 0.17, 0.20, 0.23, 0.26, 0.29, 0.32, 0.35};
    return spec;
}

Scenario one_scenario(double severity, double clearing, double load = 1.0,
                      double motor = 0.8) {
    Scenario s;
    s.load_level = load;
    s.motor_ratio = motor;
    s.fault_severity = severity;
    s.fault_start_s = 0.1;
    s.clearing_time_s = clearing;
    s.topology_id = "SRC";
    s.n_bus = 3;
    s.horizon_s = 4.0;
    s.seed = 11;
    s.id = "SRC-test";
    return s;
}

double min_u_after(const Trajectory& t, double t_from) {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& f : t.frames) {
        if (f.t < t_from) continue;
        for (const auto& b : f.bus) m = std::min(m, b[0]);
    }
    return m;
}

double tail_extreme_u(const Trajectory& t, bool want_max) {
    const double tail = t.end_time() - 1.0;
    double m = want_max ? -1e9 : 1e9;
    for (const auto& f : t.frames) {
        if (f.t < tail) continue;
        for (const auto& b : f.bus)
            m = want_max ? std::max(m, b[0]) : std::min(m, b[0]);
    }
    return m;
}

}  // namespace

TEST_CASE("scenario grid is the full cartesian product") {
    auto spec = small_spec();
    auto grid = build_scenario_grid(spec);
    REQUIRE(grid.size() == 5u * 3u * 4u * 2u);  // 120

    // Lexicographic order over (load, motor, severity, clearing).
    REQUIRE(grid[0].load_level == 0.8);
    REQUIRE(grid[0].clearing_time_s == 0.15);
    REQUIRE(grid[1].clearing_time_s == 0.2);
    REQUIRE(grid[1].fault_severity == 0.3);
    REQUIRE(grid[2].fault_severity == 0.5);
    REQUIRE(grid.back().load_level == 1.2);

    // Singleton axes -> exactly one scenario.
    ScenarioSpec one = spec;
    one.load_levels = {1.0};
    one.motor_ratios = {0.8};
    one.fault_severities = {0.5};
    one.clearing_times_s = {0.2};
    REQUIRE(build_scenario_grid(one).size() == 1);

    // Seeds are distinct per cell and stable across calls.
    auto grid2 = build_scenario_grid(spec);
    REQUIRE(grid[5].seed == grid2[5].seed);
    REQUIRE(grid[0].seed != grid[1].seed);

    ScenarioSpec bad = spec;
    bad.fault_severities.clear();
    REQUIRE_THROWS_AS(build_scenario_grid(bad), ConfigError);
}

TEST_CASE("zero severity leaves the equilibrium untouched") {
    auto scn = one_scenario(0.0, 0.2);
    MotorModelParams mp;
    auto traj = simulate(scn, mp);
    REQUIRE(traj.frames.size() >= std::size_t(scn.horizon_s * 100));
    std::vector<double> u0;
    for (const auto& b : traj.frames.front().bus) u0.push_back(b[0]);
    for (const auto& f : traj.frames)
        for (std::size_t b = 0; b < f.bus.size(); ++b)
            REQUIRE(std::abs(f.bus[b][0] - u0[b]) < 1e-9);
}

TEST_CASE("mild fault with early clearing recovers above 0.9") {
    auto scn = one_scenario(0.3, 0.15);
    MotorModelParams mp;
    auto traj = simulate(scn, mp);
    REQUIRE(tail_extreme_u(traj, false) >= 0.9);
}

TEST_CASE("severe fault with late clearing collapses below 0.7") {
    auto scn = one_scenario(0.9, 0.45, 1.2, 0.9);
    MotorModelParams mp;
    auto traj = simulate(scn, mp);
    REQUIRE(tail_extreme_u(traj, true) <= 0.7);
}

TEST_CASE("simulation is deterministic") {
    auto scn = one_scenario(0.6, 0.25);
    MotorModelParams mp;
    auto a = simulate(scn, mp);
    auto b = simulate(scn, mp);
    REQUIRE(a.frames.size() == b.frames.size());
    for (std::size_t i = 0; i < a.frames.size(); ++i) {
        REQUIRE(a.frames[i].t == b.frames[i].t);
        for (std::size_t j = 0; j < a.frames[i].bus.size(); ++j)
            for (int c = 0; c < 3; ++c)
                REQUIRE(a.frames[i].bus[j][std::size_t(c)] ==
                        b.frames[i].bus[j][std::size_t(c)]);
    }
}

TEST_CASE("severity is monotone in post-clearing minimum voltage") {
    MotorModelParams mp;
    double prev_min = 2.0;
    for (double sev : {0.2, 0.4, 0.6, 0.8}) {
        auto traj = simulate(one_scenario(sev, 0.2), mp);
        const double m = min_u_after(traj, 0.2);
        REQUIRE(m <= prev_min + 1e-12);
        prev_min = m;
    }
}

TEST_CASE("topology variants") {
    MotorModelParams mp;
    SECTION("SRC is the identity") {
        auto out = apply_topology_variant(mp, "SRC");
        REQUIRE(out.thevenin_reactance == mp.thevenin_reactance);
        REQUIRE(out.thevenin_voltage == mp.thevenin_voltage);
    }
    SECTION("unknown id rejected") {
        REQUIRE_THROWS_AS(apply_topology_variant(mp, "F-9"), ConfigError);
    }
    SECTION("variants are pure functions") {
        auto a = apply_topology_variant(mp, "F-3");
        auto b = apply_topology_variant(mp, "F-3");
        REQUIRE(a.thevenin_reactance == b.thevenin_reactance);
        REQUIRE(a.thevenin_voltage == b.thevenin_voltage);
    }
    SECTION("F-5 sags at least as deep as F-1") {
        auto scn = one_scenario(0.5, 0.2);
        auto t1 = simulate(scn, apply_topology_variant(mp, "F-1"));
        auto t5 = simulate(scn, apply_topology_variant(mp, "F-5"));
        REQUIRE(min_u_after(t5, 0.2) <= min_u_after(t1, 0.2));
    }
}

TEST_CASE("measurement noise hits the requested power") {
    // Long horizon for a tight sample-variance estimate.
    auto scn = one_scenario(0.0, 0.2);
    scn.horizon_s = 120.0;  // 12001 frames
    scn.n_bus = 1;
    MotorModelParams mp;
    auto traj = simulate(scn, mp);

    SECTION("infinite snr is the identity") {
        auto out = add_measurement_noise(traj, kInfSnrDb, 5);
        for (std::size_t i = 0; i < traj.frames.size(); ++i)
            REQUIRE(out.frames[i].bus[0][0] == traj.frames[i].bus[0][0]);
    }
    SECTION("30 dB noise power within 10% on a known-power channel") {
        auto noisy = add_measurement_noise(traj, 30.0, 5);
        double signal_power = 0.0, noise_power = 0.0;
        for (std::size_t i = 0; i < traj.frames.size(); ++i) {
            const double s = traj.frames[i].bus[0][0];
            const double d = noisy.frames[i].bus[0][0] - s;
            signal_power += s * s;
            noise_power += d * d;
        }
        signal_power /= double(traj.frames.size());
        noise_power /= double(traj.frames.size());
        const double expected = signal_power / std::pow(10.0, 3.0);
        REQUIRE(noise_power > 0.9 * expected);
        REQUIRE(noise_power < 1.1 * expected);
    }
    SECTION("same seed, same noise") {
        auto a = add_measurement_noise(traj, 30.0, 9);
        auto b = add_measurement_noise(traj, 30.0, 9);
        for (std::size_t i = 0; i < a.frames.size(); i += 97)
            REQUIRE(a.frames[i].bus[0][0] == b.frames[i].bus[0][0]);
    }
}

TEST_CASE("default grid produces all three regimes") {
    ScenarioSpec spec = regime_spec();
    MotorModelParams mp;
    auto grid = build_scenario_grid(spec);
    int stable = 0, unstable = 0, ambiguous = 0;
    for (const auto& scn : grid) {
        auto traj = simulate(scn, mp);
        const double lo = tail_extreme_u(traj, false);
        const double hi = tail_extreme_u(traj, true);
        if (lo >= 0.9)
            ++stable;
        else if (hi <= 0.7)
            ++unstable;
        else
            ++ambiguous;
    }
    const double n = double(grid.size());
    INFO("stable=" << stable << " unstable=" << unstable
                   << " ambiguous=" << ambiguous);
    REQUIRE(stable >= 0.2 * n);
    REQUIRE(unstable >= 0.2 * n);
    REQUIRE(ambiguous >= 0.1 * n);
}

TEST_CASE("trajectory round-trips through ndjson") {
    auto scn = one_scenario(0.5, 0.2);
    MotorModelParams mp;
    auto traj = simulate(scn, mp);
    const auto path = std::filesystem::temp_directory_path() / "stvsa_traj.ndjson";
    save_trajectory(traj, path.string());
    auto loaded = load_trajectory(path.string());
    REQUIRE(loaded.frames.size() == traj.frames.size());
    REQUIRE(loaded.clearing_time_s == traj.clearing_time_s);
    REQUIRE(loaded.scenario_id == traj.scenario_id);
    for (std::size_t i = 0; i < traj.frames.size(); i += 37) {
        REQUIRE(loaded.frames[i].t == traj.frames[i].t);
        for (std::size_t b = 0; b < traj.frames[i].bus.size(); ++b)
            for (int c = 0; c < 3; ++c)
                REQUIRE(loaded.frames[i].bus[b][std::size_t(c)] ==
                        traj.frames[i].bus[b][std::size_t(c)]);
    }
    std::filesystem::remove(path);
    std::filesystem::remove(std::filesystem::path(path).replace_extension(".header.json"));
}
