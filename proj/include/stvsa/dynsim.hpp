#pragma once

// Reduced-order surrogate simulator producing post-fault voltage/power
// trajectories. A single-machine-equivalent induction motor plus a static
// admittance load sit behind a Thevenin source; the motor slip is integrated
// with fixed-step RK4 while the bus voltage is solved algebraically each step.
// The model exhibits the three regimes the classifier must separate: stable
// recovery, delayed recovery, and stall-driven voltage collapse.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvsa/common.hpp"

namespace stvsa::dynsim {

inline const std::vector<std::string>& topology_ids() {
    static const std::vector<std::string> ids = {"SRC", "F-1", "F-2",
                                                 "F-3", "F-4", "F-5"};
    return ids;
}

struct ScenarioSpec {
    std::vector<double> load_levels;       // fractions of base load
    std::vector<double> motor_ratios;      // motor share of total load, (0,1)
    std::vector<double> fault_severities;  // voltage-dip depth, (0,1]
    double fault_start_s = 0.1;
    std::vector<double> clearing_times_s;  // absolute clearing instants
    std::string topology_id = "SRC";
    int n_bus = 10;
    double horizon_s = 5.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (load_levels.empty() || motor_ratios.empty() ||
            fault_severities.empty() || clearing_times_s.empty())
            throw ConfigError("scenario spec: empty axis");
        for (double s : fault_severities)
            if (!(s >= 0.0 && s <= 1.0))
                throw ConfigError("scenario spec: severity outside [0,1]");
        for (double m : motor_ratios)
            if (!(m > 0.0 && m < 1.0))
                throw ConfigError("scenario spec: motor ratio outside (0,1)");
        const double min_clear =
            *std::min_element(clearing_times_s.begin(), clearing_times_s.end());
        if (!(fault_start_s < min_clear))
            throw ConfigError("scenario spec: fault_start_s must precede clearing");
        const double max_clear =
            *std::max_element(clearing_times_s.begin(), clearing_times_s.end());
        if (!(max_clear < horizon_s))
            throw ConfigError("scenario spec: clearing beyond horizon");
        if (n_bus < 1) throw ConfigError("scenario spec: n_bus must be positive");
        if (!(horizon_s > 0)) throw ConfigError("scenario spec: bad horizon");
    }

    nlohmann::json to_json() const {
        return {{"load_levels", load_levels},
                {"motor_ratios", motor_ratios},
                {"fault_severities", fault_severities},
                {"fault_start_s", fault_start_s},
                {"clearing_times_s", clearing_times_s},
                {"topology_id", topology_id},
                {"n_bus", n_bus},
                {"horizon_s", horizon_s},
                {"seed", seed}};
    }

    static ScenarioSpec from_json(const nlohmann::json& j) {
        ScenarioSpec s;
        s.load_levels = j.at("load_levels").get<std::vector<double>>();
        s.motor_ratios = j.at("motor_ratios").get<std::vector<double>>();
        s.fault_severities = j.at("fault_severities").get<std::vector<double>>();
        s.fault_start_s = j.at("fault_start_s").get<double>();
        s.clearing_times_s = j.at("clearing_times_s").get<std::vector<double>>();
        if (j.contains("topology_id")) s.topology_id = j.at("topology_id");
        if (j.contains("n_bus")) s.n_bus = j.at("n_bus");
        if (j.contains("horizon_s")) s.horizon_s = j.at("horizon_s");
        if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
        return s;
    }
};

struct Scenario {
    double load_level = 1.0;
    double motor_ratio = 0.8;
    double fault_severity = 0.5;
    double fault_start_s = 0.1;
    double clearing_time_s = 0.2;
    std::string topology_id = "SRC";
    int n_bus = 10;
    double horizon_s = 5.0;
    std::uint64_t seed = 0;
    std::string id;

    nlohmann::json to_json() const {
        return {{"load_level", load_level},
                {"motor_ratio", motor_ratio},
                {"fault_severity", fault_severity},
                {"fault_start_s", fault_start_s},
                {"clearing_time_s", clearing_time_s},
                {"topology_id", topology_id},
                {"n_bus", n_bus},
                {"horizon_s", horizon_s},
                {"seed", seed},
                {"id", id}};
    }

    static Scenario from_json(const nlohmann::json& j) {
        Scenario s;
        s.load_level = j.at("load_level");
        s.motor_ratio = j.at("motor_ratio");
        s.fault_severity = j.at("fault_severity");
        s.fault_start_s = j.at("fault_start_s");
        s.clearing_time_s = j.at("clearing_time_s");
        s.topology_id = j.at("topology_id");
        s.n_bus = j.at("n_bus");
        s.horizon_s = j.at("horizon_s");
        s.seed = j.at("seed").get<std::uint64_t>();
        s.id = j.at("id");
        return s;
    }
};

struct MotorModelParams {
    double thevenin_voltage = 1.05;   // E
    double thevenin_reactance = 0.15; // X_th
    double stator_resistance = 0.02;  // R_s
    double stator_reactance = 0.10;   // X_s
    double rotor_resistance = 0.03;   // R_r
    double rotor_reactance = 0.10;    // X_r
    double inertia_s = 0.07;          // H of the aggregate load
    double torque_coeff = 0.70;       // T0, mechanical torque at base load
    double static_admittance = 0.6;   // conductance of the non-motor load share
    double min_slip = 1e-3;

    void validate() const {
        const double vals[] = {thevenin_voltage, thevenin_reactance,
                               stator_resistance, stator_reactance,
                               rotor_resistance, rotor_reactance,
                               inertia_s, torque_coeff, static_admittance,
                               min_slip};
        for (double v : vals)
            if (!(v > 0.0) || !std::isfinite(v))
                throw ConfigError("motor params: all fields must be positive finite");
        if (!(min_slip < 1.0)) throw ConfigError("motor params: min_slip >= 1");
    }

    nlohmann::json to_json() const {
        return {{"thevenin_voltage", thevenin_voltage},
                {"thevenin_reactance", thevenin_reactance},
                {"stator_resistance", stator_resistance},
                {"stator_reactance", stator_reactance},
                {"rotor_resistance", rotor_resistance},
                {"rotor_reactance", rotor_reactance},
                {"inertia_s", inertia_s},
                {"torque_coeff", torque_coeff},
                {"static_admittance", static_admittance},
                {"min_slip", min_slip}};
    }

    static MotorModelParams from_json(const nlohmann::json& j) {
        MotorModelParams m;
        auto get = [&](const char* k, double& field) {
            if (j.contains(k)) field = j.at(k).get<double>();
        };
        get("thevenin_voltage", m.thevenin_voltage);
        get("thevenin_reactance", m.thevenin_reactance);
        get("stator_resistance", m.stator_resistance);
        get("stator_reactance", m.stator_reactance);
        get("rotor_resistance", m.rotor_resistance);
        get("rotor_reactance", m.rotor_reactance);
        get("inertia_s", m.inertia_s);
        get("torque_coeff", m.torque_coeff);
        get("static_admittance", m.static_admittance);
        get("min_slip", m.min_slip);
        return m;
    }
};

struct Frame {
    double t = 0.0;
    // Per-bus (U, P, Q) triples, n_bus entries.
    std::vector<std::array<double, 3>> bus;
};

struct Trajectory {
    int frame_rate_hz = 100;
    std::vector<Frame> frames;
    double fault_start_s = 0.0;
    double clearing_time_s = 0.0;
    std::string topology_id;
    std::string scenario_id;

    double end_time() const { return frames.empty() ? 0.0 : frames.back().t; }
    int n_bus() const { return frames.empty() ? 0 : int(frames.front().bus.size()); }
};

// ---------------------------------------------------------------------------
// Grid enumeration. Axis order: load_level, motor_ratio, severity, clearing.

inline std::vector<Scenario> build_scenario_grid(const ScenarioSpec& spec) {
    spec.validate();
    std::vector<Scenario> out;
    out.reserve(spec.load_levels.size() * spec.motor_ratios.size() *
                spec.fault_severities.size() * spec.clearing_times_s.size());
    std::size_t idx = 0;
    for (std::size_t il = 0; il < spec.load_levels.size(); ++il)
        for (std::size_t im = 0; im < spec.motor_ratios.size(); ++im)
            for (std::size_t is = 0; is < spec.fault_severities.size(); ++is)
                for (std::size_t ic = 0; ic < spec.clearing_times_s.size(); ++ic) {
                    Scenario s;
                    s.load_level = spec.load_levels[il];
                    s.motor_ratio = spec.motor_ratios[im];
                    s.fault_severity = spec.fault_severities[is];
                    s.fault_start_s = spec.fault_start_s;
                    s.clearing_time_s = spec.clearing_times_s[ic];
                    s.topology_id = spec.topology_id;
                    s.n_bus = spec.n_bus;
                    s.horizon_s = spec.horizon_s;
                    s.seed = derive_seed(spec.seed, {il, im, is, ic});
                    char buf[32];
                    std::snprintf(buf, sizeof(buf), "-%05zu", idx);
                    s.id = spec.topology_id + buf;
                    ++idx;
                    out.push_back(std::move(s));
                }
    return out;
}

// ---------------------------------------------------------------------------
// Topology variants modeled as (X_th, E) perturbations. All faulted variants
// share a large common impedance offset relative to SRC plus a small per-k
// increment, so the faulted domains cluster together away from the source.

inline MotorModelParams apply_topology_variant(const MotorModelParams& mp,
                                               const std::string& topology_id) {
    struct Factors { double xth, e; };
    static const std::pair<const char*, Factors> table[] = {
        {"SRC", {1.00, 1.000}}, {"F-1", {1.22, 0.985}}, {"F-2", {1.26, 0.982}},
        {"F-3", {1.30, 0.979}}, {"F-4", {1.34, 0.976}}, {"F-5", {1.38, 0.973}},
    };
    for (const auto& [id, f] : table) {
        if (topology_id == id) {
            MotorModelParams out = mp;
            out.thevenin_reactance *= f.xth;
            out.thevenin_voltage *= f.e;
            return out;
        }
    }
    throw ConfigError("unknown topology id: " + topology_id);
}

// ---------------------------------------------------------------------------
// Electrical model internals.

namespace detail {

struct LoadState {
    std::complex<double> y_total;  // combined load admittance at slip s
    double torque_e = 0.0;         // electrical torque of the aggregate motor
};

inline LoadState load_at(double slip, double load_level, double motor_ratio,
                         const MotorModelParams& mp) {
    const std::complex<double> z_motor(mp.stator_resistance +
                                           mp.rotor_resistance / slip,
                                       mp.stator_reactance + mp.rotor_reactance);
    const std::complex<double> y_motor =
        motor_ratio * load_level / z_motor;
    const std::complex<double> y_static(
        (1.0 - motor_ratio) * load_level * mp.static_admittance, 0.0);
    LoadState st;
    st.y_total = y_motor + y_static;
    const double a = mp.stator_resistance + mp.rotor_resistance / slip;
    const double b = mp.stator_reactance + mp.rotor_reactance;
    st.torque_e = (mp.rotor_resistance / slip) / (a * a + b * b);  // per V^2
    return st;
}

// Thevenin divider voltage at a given slip.
inline double divider_voltage(double slip, double e_eff, double load_level,
                              double motor_ratio, const MotorModelParams& mp) {
    const LoadState st = load_at(slip, load_level, motor_ratio, mp);
    const std::complex<double> z_load = 1.0 / st.y_total;
    const std::complex<double> z_th(0.0, mp.thevenin_reactance);
    return e_eff * std::abs(z_load) / std::abs(z_th + z_load);
}

// Damped fixed-point solve of the Thevenin divider. The contraction is
// geometric with ratio 1/2, so the iteration cap is never binding for finite
// inputs; the error path guards degenerate parameter sets.
inline double solve_voltage(double slip, double e_eff, double load_level,
                            double motor_ratio, const MotorModelParams& mp,
                            double v_guess, const std::string& scenario_id,
                            double t) {
    const double target = divider_voltage(slip, e_eff, load_level, motor_ratio, mp);
    double v = v_guess;
    for (int it = 0; it < 50; ++it) {
        const double v_next = 0.5 * v + 0.5 * target;
        if (std::abs(v_next - v) < 1e-8) return v_next;
        v = v_next;
    }
    if (!std::isfinite(v) || std::abs(v - target) > 1e-6)
        throw SimulationDiverged(scenario_id, t);
    return v;
}

inline double electrical_torque(double slip, double v,
                                const MotorModelParams& mp) {
    const double a = mp.stator_resistance + mp.rotor_resistance / slip;
    const double b = mp.stator_reactance + mp.rotor_reactance;
    return v * v * (mp.rotor_resistance / slip) / (a * a + b * b);
}

// Peak-torque slip of the steady-state torque curve.
inline double peak_torque_slip(const MotorModelParams& mp) {
    const double b = mp.stator_reactance + mp.rotor_reactance;
    return mp.rotor_resistance /
           std::sqrt(mp.stator_resistance * mp.stator_resistance + b * b);
}

// Pre-fault equilibrium slip on the stable branch (below peak-torque slip).
// Uses the closed-form divider voltage so the equilibrium residual is exact
// to rounding and the unfaulted trajectory holds flat.
inline double equilibrium_slip(const Scenario& scn, const MotorModelParams& mp) {
    const double tm = mp.torque_coeff * scn.load_level;
    const double s_hi = peak_torque_slip(mp);
    auto residual = [&](double s) {
        const double v = divider_voltage(s, mp.thevenin_voltage, scn.load_level,
                                         scn.motor_ratio, mp);
        return electrical_torque(s, v, mp) - tm;
    };
    double lo = mp.min_slip, hi = s_hi;
    if (residual(hi) <= 0.0)
        throw ConfigError("no pre-fault equilibrium for scenario " + scn.id +
                          " (mechanical torque exceeds peak electrical torque)");
    if (residual(lo) >= 0.0) return lo;
    for (int it = 0; it < 200 && (hi - lo) > 1e-16; ++it) {
        const double mid = 0.5 * (lo + hi);
        (residual(mid) < 0.0 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Time-domain simulation: RK4 at dt = 1 ms on the slip ODE
// ds/dt = (Tm - Te(s, V)) / (2H), downsampled to frame_rate_hz.

inline Trajectory simulate(const Scenario& scn, const MotorModelParams& mp,
                           int frame_rate_hz = 100) {
    mp.validate();
    if (frame_rate_hz < 1) throw ConfigError("frame rate must be positive");

    constexpr double dt = 1e-3;
    const double tm = mp.torque_coeff * scn.load_level;
    const double two_h = 2.0 * mp.inertia_s;

    auto e_eff_at = [&](double t) {
        const bool in_fault = t >= scn.fault_start_s && t < scn.clearing_time_s;
        return in_fault ? mp.thevenin_voltage * (1.0 - scn.fault_severity)
                        : mp.thevenin_voltage;
    };

    double v_track = 1.0;
    auto slip_rate = [&](double s, double t) {
        const double s_c = std::clamp(s, mp.min_slip, 1.0);
        const double v = detail::solve_voltage(s_c, e_eff_at(t), scn.load_level,
                                               scn.motor_ratio, mp, v_track,
                                               scn.id, t);
        return (tm - detail::electrical_torque(s_c, v, mp)) / two_h;
    };

    // Bus scaling factors: fixed electrical-distance profile per scenario.
    // The spread is wide enough that partially recovered cases straddle the
    // labeling thresholds instead of collapsing onto one class.
    Rng bus_rng(derive_seed(scn.seed, "bus-factors"));
    std::vector<double> bus_factor(static_cast<std::size_t>(scn.n_bus));
    for (auto& f : bus_factor) f = bus_rng.uniform(0.94, 1.04);

    double slip = detail::equilibrium_slip(scn, mp);
    {
        // Seed the voltage guess at the exact pre-fault operating point so the
        // severity-zero case emits a flat profile from the first frame.
        const auto st0 = detail::load_at(slip, scn.load_level, scn.motor_ratio, mp);
        const std::complex<double> z0 = 1.0 / st0.y_total;
        const std::complex<double> zth(0.0, mp.thevenin_reactance);
        v_track = mp.thevenin_voltage * std::abs(z0) / std::abs(zth + z0);
    }

    Trajectory traj;
    traj.frame_rate_hz = frame_rate_hz;
    traj.fault_start_s = scn.fault_start_s;
    traj.clearing_time_s = scn.clearing_time_s;
    traj.topology_id = scn.topology_id;
    traj.scenario_id = scn.id;

    const long n_steps = std::lround(scn.horizon_s / dt);
    const long steps_per_frame = std::lround(1.0 / (dt * frame_rate_hz));
    if (steps_per_frame < 1)
        throw ConfigError("frame rate exceeds integrator rate");
    traj.frames.reserve(std::size_t(n_steps / steps_per_frame) + 1);

    auto emit_frame = [&](double t, double s) {
        const double s_c = std::clamp(s, mp.min_slip, 1.0);
        const double v = detail::solve_voltage(s_c, e_eff_at(t), scn.load_level,
                                               scn.motor_ratio, mp, v_track,
                                               scn.id, t);
        v_track = v;
        const auto st = detail::load_at(s_c, scn.load_level, scn.motor_ratio, mp);
        Frame f;
        f.t = t;
        f.bus.resize(static_cast<std::size_t>(scn.n_bus));
        for (int b = 0; b < scn.n_bus; ++b) {
            const double u = bus_factor[std::size_t(b)] * v;
            f.bus[std::size_t(b)] = {u, u * u * st.y_total.real(),
                                     -u * u * st.y_total.imag()};
        }
        traj.frames.push_back(std::move(f));
    };

    emit_frame(0.0, slip);
    for (long step = 0; step < n_steps; ++step) {
        const double t = double(step) * dt;
        const double k1 = slip_rate(slip, t);
        const double k2 = slip_rate(slip + 0.5 * dt * k1, t + 0.5 * dt);
        const double k3 = slip_rate(slip + 0.5 * dt * k2, t + 0.5 * dt);
        const double k4 = slip_rate(slip + dt * k3, t + dt);
        slip += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        slip = std::clamp(slip, mp.min_slip, 1.0);
        if ((step + 1) % steps_per_frame == 0)
            emit_frame(double(step + 1) * dt, slip);
    }
    return traj;
}

// ---------------------------------------------------------------------------
// Additive white Gaussian measurement noise at a target SNR. Noise variance is
// set per channel from that channel's mean-square signal power. An infinite
// snr_db is the noise-free sentinel.

// ---------------------------------------------------------------------------
// Persistence: one NDJSON frame per line plus a sidecar JSON header. The frame
// line format doubles as the streaming wire format.

inline nlohmann::json frame_to_json(const Frame& f) {
    nlohmann::json buses = nlohmann::json::array();
    for (const auto& b : f.bus) buses.push_back({b[0], b[1], b[2]});
    return {{"t", f.t}, {"bus", std::move(buses)}};
}

inline Frame frame_from_json(const nlohmann::json& j) {
    Frame f;
    f.t = j.at("t").get<double>();
    for (const auto& b : j.at("bus")) {
        if (!b.is_array() || b.size() != 3)
            throw Error("frame: bus entry must be a [U,P,Q] triple");
        f.bus.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>()});
    }
    return f;
}

inline void save_trajectory(const Trajectory& traj, const std::string& path) {
    namespace fs = std::filesystem;
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    // Same quarter-frame-period tolerance the windowing code uses, so the
    // marked frame is exactly the first window frame.
    const double eps = 0.25 / traj.frame_rate_hz;
    bool marked_start = false, marked_clear = false;
    for (const auto& f : traj.frames) {
        nlohmann::json line = frame_to_json(f);
        if (!marked_start && f.t >= traj.fault_start_s - eps) {
            line["marker"] = "fault_start";
            marked_start = true;
        } else if (!marked_clear && f.t >= traj.clearing_time_s - eps) {
            line["marker"] = "fault_cleared";
            marked_clear = true;
        }
        out << line.dump() << '\n';
    }
    nlohmann::json header = {{"schema_version", 1},
                             {"kind", "trajectory"},
                             {"frame_rate_hz", traj.frame_rate_hz},
                             {"fault_start_s", traj.fault_start_s},
                             {"clearing_time_s", traj.clearing_time_s},
                             {"topology_id", traj.topology_id},
                             {"scenario_id", traj.scenario_id}};
    std::ofstream hout(fs::path(path).replace_extension(".header.json"));
    if (!hout) throw Error("cannot write trajectory header for " + path);
    hout << header.dump(2) << '\n';
}

inline Trajectory load_trajectory(const std::string& path) {
    namespace fs = std::filesystem;
    std::ifstream hin(fs::path(path).replace_extension(".header.json"));
    if (!hin) throw Error("missing trajectory header for " + path);
    nlohmann::json header = nlohmann::json::parse(hin);
    if (header.value("schema_version", 0) != 1)
        throw Error("unsupported trajectory schema version in " + path);

    Trajectory traj;
    traj.frame_rate_hz = header.at("frame_rate_hz");
    traj.fault_start_s = header.at("fault_start_s");
    traj.clearing_time_s = header.at("clearing_time_s");
    traj.topology_id = header.at("topology_id");
    traj.scenario_id = header.at("scenario_id");

    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::string line;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::parse_error& e) {
                throw ParseError("bad frame line in " + path,
                                 offset + (e.byte > 0 ? e.byte - 1 : 0));
            }
            traj.frames.push_back(frame_from_json(j));
        }
        offset += line.size() + 1;
    }
    return traj;
}

inline Trajectory add_measurement_noise(const Trajectory& traj, double snr_db,
                                        std::uint64_t seed) {
    if (std::isinf(snr_db) && snr_db > 0) return traj;
    if (!std::isfinite(snr_db)) throw ConfigError("snr_db must be finite or +inf");
    Trajectory out = traj;
    const int nb = traj.n_bus();
    const std::size_t nf = traj.frames.size();
    if (nf == 0) return out;
    Rng rng(derive_seed(seed, "measurement-noise"));
    const double snr_lin = std::pow(10.0, snr_db / 10.0);
    for (int b = 0; b < nb; ++b) {
        for (int ch = 0; ch < 3; ++ch) {
            double power = 0.0;
            for (const auto& f : traj.frames) {
                const double x = f.bus[std::size_t(b)][std::size_t(ch)];
                power += x * x;
            }
            power /= double(nf);
            const double sigma = std::sqrt(power / snr_lin);
            for (auto& f : out.frames)
                f.bus[std::size_t(b)][std::size_t(ch)] += sigma * rng.normal();
        }
    }
    return out;
}

}  // namespace stvsa::dynsim
