#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "stvsa/dataset.hpp"
#include "stvsa/dynsim.hpp"

using namespace stvsa;
using namespace stvsa::dataset;

namespace {

dynsim::Trajectory make_traj(int n_frames, int n_bus, double clearing,
                             double level_after = 1.0) {
    dynsim::Trajectory t;
    t.frame_rate_hz = 100;
    t.fault_start_s = 0.1;
    t.clearing_time_s = clearing;
    t.topology_id = "SRC";
    t.scenario_id = "SRC-00000";
    for (int i = 0; i < n_frames; ++i) {
        dynsim::Frame f;
        f.t = double(i) * 0.01;
        for (int b = 0; b < n_bus; ++b) {
            const double u = f.t < clearing ? 0.5 : level_after;
            f.bus.push_back({u, 0.9 * u, 0.3 * u});
        }
        t.frames.push_back(std::move(f));
    }
    return t;
}

Dataset tiny_dataset(int n_per_class) {
    Dataset ds;
    for (int i = 0; i < 2 * n_per_class; ++i) {
        Sample s;
        s.features = Eigen::MatrixXd::Constant(2, 3, i % 2 ? 1.0 : 0.0);
        s.features(0, 0) = double(i) / double(2 * n_per_class);
        s.label = i % 2 ? Label::stable : Label::unstable;
        s.meta.scenario_id = "SRC-" + std::to_string(i);
        s.meta.topology_id = "SRC";
        s.meta.otw_s = 0.02;
        s.meta.seed_rule = s.label;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace

TEST_CASE("window sizes follow the observation time") {
    auto traj = make_traj(500, 2, 0.2);
    REQUIRE(window(traj, 0.03).rows() == 3);
    REQUIRE(window(traj, 0.12).rows() == 12);
    auto one = window(traj, 0.01);
    REQUIRE(one.rows() == 1);
    // Single row equals the first post-clearing frame.
    REQUIRE(one(0, 0) == 1.0);
    REQUIRE(window(traj, 0.03).cols() == 6);
}

TEST_CASE("window starts at fault clearing") {
    auto traj = make_traj(500, 1, 0.2);
    auto w = window(traj, 0.05);
    for (int r = 0; r < w.rows(); ++r) REQUIRE(w(r, 0) == 1.0);  // post level
}

TEST_CASE("window overrun is an error") {
    auto traj = make_traj(50, 1, 0.2);  // ends at 0.49 s
    REQUIRE_THROWS(window(traj, 0.5));
}

TEST_CASE("seed labels follow the threshold rules") {
    REQUIRE(seed_label(make_traj(500, 3, 0.2, 0.98)) == Label::stable);
    REQUIRE(seed_label(make_traj(500, 3, 0.2, 0.55)) == Label::unstable);
    auto mixed = make_traj(500, 2, 0.2, 0.95);
    // One bus sits at 0.8 in the tail: neither rule fires.
    for (auto& f : mixed.frames) f.bus[1][0] = 0.8;
    REQUIRE(seed_label(mixed) == Label::unlabeled);
    // Needs 3 s of post-clearing coverage.
    REQUIRE_THROWS(seed_label(make_traj(100, 1, 0.2)));
}

TEST_CASE("normalizer maps feature columns to [0,1]") {
    Dataset ds;
    for (double v : {0.7, 0.9, 1.1}) {
        Sample s;
        s.features = Eigen::MatrixXd::Constant(1, 1, v);
        s.label = Label::stable;
        ds.samples.push_back(std::move(s));
    }
    auto np = fit_normalizer(ds);
    auto out = apply_normalizer(ds, np);
    REQUIRE(out.samples[0].features(0, 0) == 0.0);
    REQUIRE(out.samples[1].features(0, 0) == Catch::Approx(0.5));
    REQUIRE(out.samples[2].features(0, 0) == 1.0);

    SECTION("already [0,1] column is unchanged") {
        Dataset d2;
        for (double v : {0.0, 0.25, 1.0}) {
            Sample s;
            s.features = Eigen::MatrixXd::Constant(1, 1, v);
            d2.samples.push_back(std::move(s));
        }
        auto np2 = fit_normalizer(d2);
        auto o2 = apply_normalizer(d2, np2);
        REQUIRE(o2.samples[0].features(0, 0) == 0.0);
        REQUIRE(o2.samples[1].features(0, 0) == 0.25);
        REQUIRE(o2.samples[2].features(0, 0) == 1.0);
    }
    SECTION("out-of-range test values clip") {
        Dataset test;
        Sample s;
        s.features = Eigen::MatrixXd::Constant(1, 1, 1.3);
        test.samples.push_back(std::move(s));
        auto clipped = apply_normalizer(test, np);
        REQUIRE(clipped.samples[0].features(0, 0) == 1.0);
    }
    SECTION("constant column maps to 0.5") {
        Dataset flat;
        for (int i = 0; i < 3; ++i) {
            Sample s;
            s.features = Eigen::MatrixXd::Constant(1, 1, 2.0);
            flat.samples.push_back(std::move(s));
        }
        auto npf = fit_normalizer(flat);
        auto of = apply_normalizer(flat, npf);
        REQUIRE(of.samples[0].features(0, 0) == 0.5);
    }
}

TEST_CASE("split is stratified and deterministic") {
    SECTION("10 samples, 5/5 classes -> 8/2 with 4/4 per class") {
        auto ds = tiny_dataset(5);
        auto [train, test] = split(ds, 0.8, 3);
        REQUIRE(train.samples.size() == 8);
        REQUIRE(test.samples.size() == 2);
        REQUIRE(train.count(Label::stable) == 4);
        REQUIRE(train.count(Label::unstable) == 4);
        REQUIRE(test.count(Label::stable) == 1);
        REQUIRE(test.count(Label::unstable) == 1);
    }
    SECTION("2040 samples -> 1632/408") {
        auto ds = tiny_dataset(1020);
        auto [train, test] = split(ds, 0.8, 3);
        REQUIRE(train.samples.size() == 1632);
        REQUIRE(test.samples.size() == 408);
    }
    SECTION("same seed, same index sets") {
        auto ds = tiny_dataset(20);
        auto [tr1, te1] = split(ds, 0.8, 9);
        auto [tr2, te2] = split(ds, 0.8, 9);
        REQUIRE(tr1.samples.size() == tr2.samples.size());
        for (std::size_t i = 0; i < tr1.samples.size(); ++i)
            REQUIRE(tr1.samples[i].meta.scenario_id ==
                    tr2.samples[i].meta.scenario_id);
    }
    SECTION("class with < 2 members fails") {
        auto ds = tiny_dataset(4);
        ds.samples.resize(5);  // 3 unstable / 2 stable ... drop to force
        ds.samples[4].label = Label::stable;
        ds.samples[4].meta.seed_rule = Label::stable;
        ds.samples[0].label = Label::unstable;
        ds.samples[1].label = Label::unstable;
        ds.samples[2].label = Label::unstable;
        ds.samples[3].label = Label::unstable;
        for (int i = 0; i < 4; ++i)
            ds.samples[std::size_t(i)].meta.seed_rule = Label::unstable;
        REQUIRE_THROWS(split(ds, 0.8, 1));
    }
    SECTION("ratio preserved within one sample per class") {
        auto ds = tiny_dataset(101);
        auto [train, test] = split(ds, 0.8, 5);
        const double frac =
            double(train.count(Label::stable)) / double(ds.count(Label::stable));
        REQUIRE(std::abs(frac - 0.8) * double(ds.count(Label::stable)) <= 1.0 + 1e-9);
        REQUIRE(train.samples.size() + test.samples.size() == ds.samples.size());
    }
}

TEST_CASE("dataset save/load round-trips bit-exactly") {
    namespace fs = std::filesystem;
    const auto path = fs::temp_directory_path() / "stvsa_ds.ndjson";

    SECTION("empty dataset") {
        Dataset ds;
        save(ds, path.string());
        auto loaded = load(path.string());
        REQUIRE(loaded.samples.empty());
    }
    SECTION("populated dataset with norm params") {
        auto ds = tiny_dataset(50);
        Rng rng(4);
        for (auto& s : ds.samples) {
            for (int r = 0; r < s.features.rows(); ++r)
                for (int c = 0; c < s.features.cols(); ++c)
                    s.features(r, c) = rng.normal();
        }
        ds.samples[3].meta.snr_db = 30.0;
        ds.norm = fit_normalizer(ds);
        ds.domain_tag = "target:F-2";
        save(ds, path.string());
        auto loaded = load(path.string());
        REQUIRE(loaded.samples.size() == ds.samples.size());
        REQUIRE(loaded.domain_tag == ds.domain_tag);
        REQUIRE(loaded.norm.has_value());
        for (std::size_t i = 0; i < ds.samples.size(); ++i) {
            REQUIRE(loaded.samples[i].label == ds.samples[i].label);
            REQUIRE(loaded.samples[i].meta.snr_db == ds.samples[i].meta.snr_db);
            REQUIRE((loaded.samples[i].features.array() ==
                     ds.samples[i].features.array())
                        .all());
        }
    }
    SECTION("corrupted file reports the byte offset") {
        auto ds = tiny_dataset(3);
        save(ds, path.string());
        // Truncate a line in the middle.
        std::ifstream in(path);
        std::string all((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
        in.close();
        const auto cut = all.find('\n') + 20;
        std::ofstream out(path);
        out << all.substr(0, cut) << "garbage\n";
        out.close();
        try {
            load(path.string());
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            REQUIRE(e.byte_offset() > 0);
        }
    }
    fs::remove(path);
    fs::remove(fs::path(path).replace_extension(".header.json"));
}

TEST_CASE("make_sample wires trajectory metadata through") {
    auto traj = make_traj(500, 2, 0.2, 0.97);
    auto s = make_sample(traj, 0.12);
    REQUIRE(s.features.rows() == 12);
    REQUIRE(s.features.cols() == 6);
    REQUIRE(s.label == Label::stable);
    REQUIRE(s.meta.seed_rule == Label::stable);
    REQUIRE(s.meta.scenario_id == "SRC-00000");
    REQUIRE(!s.meta.synthetic);
}
