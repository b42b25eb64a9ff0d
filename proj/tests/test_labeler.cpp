#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "stvsa/labeler.hpp"

using namespace stvsa;
using namespace stvsa::labeler;
using dataset::Dataset;
using dataset::Label;
using dataset::Sample;

namespace {

// Two Gaussian blobs with the generative class recorded as hidden truth and a
// small seeded fraction.
Dataset blobs(int n_per_class, double sep, double sigma, double seed_frac,
              std::uint64_t seed, int dim = 8) {
    Dataset ds;
    Rng rng(seed);
    for (int cls = 0; cls < 2; ++cls) {
        const double mean = cls == 0 ? -sep : sep;
        const int n_seeded = int(std::lround(seed_frac * n_per_class));
        for (int i = 0; i < n_per_class; ++i) {
            Sample s;
            s.features = Eigen::MatrixXd(1, dim);
            for (int d = 0; d < dim; ++d)
                s.features(0, d) = rng.normal(mean, sigma);
            s.meta.scenario_id = "blob-" + std::to_string(cls) + "-" + std::to_string(i);
            s.meta.seed_rule = cls == 0 ? Label::unstable : Label::stable;
            s.label = i < n_seeded ? s.meta.seed_rule : Label::unlabeled;
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

double truth_recovery(const Dataset& labeled) {
    long agree = 0;
    for (const auto& s : labeled.samples) agree += s.label == s.meta.seed_rule;
    return double(agree) / double(labeled.samples.size());
}

}  // namespace

TEST_CASE("consistency loss spot values") {
    SECTION("perfect labeled predictions, no consistency weight") {
        nn::Mat z(2, 2), zt(2, 2);
        z << 1.0, 0.0, 0.0, 1.0;
        zt.setZero();
        REQUIRE(consistency_loss(z, zt, {0, 1}, 0.0, 2) == 0.0);
    }
    SECTION("no labeled samples and z equals the target") {
        nn::Mat z(3, 2);
        z << 0.3, 0.7, 0.5, 0.5, 0.9, 0.1;
        REQUIRE(consistency_loss(z, z, {-1, -1, -1}, 1.0, 2) == 0.0);
    }
    SECTION("worked two-sample instance") {
        nn::Mat z(2, 2), zt(2, 2);
        z << 0.5, 0.5, 1.0, 0.0;
        zt << 0.5, 0.5, 0.0, 1.0;
        const double loss = consistency_loss(z, zt, {0, -1}, 1.0, 2);
        REQUIRE(loss == Catch::Approx(0.8466).margin(1e-4));
    }
    SECTION("non-negative on random inputs") {
        Rng rng(5);
        for (int it = 0; it < 100; ++it) {
            nn::Mat logits(4, 2);
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 2; ++c) logits(r, c) = rng.normal();
            nn::Mat z = nn::softmax_rows(logits);
            nn::Mat zt = nn::softmax_rows(nn::Mat(logits.array() + 0.3));
            REQUIRE(consistency_loss(z, zt, {0, -1, 1, -1}, rng.uniform01(), 2) >=
                    0.0);
        }
    }
}

TEST_CASE("ema update and bias correction") {
    SECTION("alpha 0 tracks the latest epoch exactly") {
        auto st = EnsembleState::zeros(2, 2);
        nn::Mat z(2, 2);
        z << 0.2, 0.8, 0.6, 0.4;
        for (int t = 0; t < 5; ++t) {
            ema_update(st, z, 0.0);
            REQUIRE((st.z_tilde - z).cwiseAbs().maxCoeff() == 0.0);
        }
    }
    SECTION("constant input reproduces itself for any alpha") {
        for (double alpha : {0.0, 0.3, 0.6, 0.9}) {
            auto st = EnsembleState::zeros(3, 2);
            nn::Mat z(3, 2);
            z << 0.1, 0.9, 0.5, 0.5, 0.75, 0.25;
            for (int t = 1; t <= 50; ++t) {
                ema_update(st, z, alpha);
                REQUIRE((st.z_tilde - z).cwiseAbs().maxCoeff() < 1e-12);
            }
        }
    }
    SECTION("scalar case after one epoch") {
        auto st = EnsembleState::zeros(1, 1);
        nn::Mat z(1, 1);
        z << 1.0;
        ema_update(st, z, 0.6);
        REQUIRE(st.z_accum(0, 0) == Catch::Approx(0.4));
        REQUIRE(st.z_tilde(0, 0) == Catch::Approx(1.0));
    }
    SECTION("alpha 1 rejected") {
        auto st = EnsembleState::zeros(1, 1);
        nn::Mat z(1, 1);
        z << 0.5;
        REQUIRE_THROWS_AS(ema_update(st, z, 1.0), ConfigError);
    }
    SECTION("linearity: ema of scaled sequence is scaled ema") {
        Rng rng(9);
        auto st1 = EnsembleState::zeros(2, 2);
        auto st2 = EnsembleState::zeros(2, 2);
        const double scale = 3.5;
        for (int t = 1; t <= 20; ++t) {
            nn::Mat z(2, 2);
            for (int r = 0; r < 2; ++r)
                for (int c = 0; c < 2; ++c) z(r, c) = rng.uniform01();
            ema_update(st1, z, 0.6);
            ema_update(st2, nn::Mat(scale * z), 0.6);
            REQUIRE((st2.z_tilde - scale * st1.z_tilde).cwiseAbs().maxCoeff() <
                    1e-12);
        }
    }
}

TEST_CASE("ramp weight schedule") {
    REQUIRE(ramp_weight(20, 20, 2.0) == 2.0);
    REQUIRE(ramp_weight(35, 20, 2.0) == 2.0);
    // Early-epoch limit: w_max * e^-5.
    REQUIRE(ramp_weight(1, 100000, 1.0) ==
            Catch::Approx(std::exp(-5.0)).epsilon(1e-3));
    REQUIRE(ramp_weight(5, 10, 0.0) == 0.0);
    // Monotone over the ramp.
    double prev = 0.0;
    for (int t = 1; t <= 30; ++t) {
        const double w = ramp_weight(t, 30, 1.0);
        REQUIRE(w >= prev);
        prev = w;
    }
}

TEST_CASE("temporal ensembling labels blobs and retains seeds") {
    TemporalEnsemblingCfg cfg;
    cfg.epochs = 40;
    cfg.ramp_epochs = 15;
    cfg.seed = 3;

    SECTION("fully seeded dataset keeps its labels verbatim") {
        auto ds = blobs(20, 0.5, 1.0, 1.0, 5);  // heavily overlapping
        auto out = temporal_ensembling_label(ds, cfg);
        for (std::size_t i = 0; i < ds.samples.size(); ++i)
            REQUIRE(out.samples[i].label == ds.samples[i].label);
    }
    SECTION("well-separated blobs recover hidden classes from 5% seeds") {
        auto ds = blobs(100, 2.0, 0.4, 0.05, 6);
        LabelReport report;
        auto out = temporal_ensembling_label(ds, cfg, &report);
        REQUIRE(truth_recovery(out) >= 0.98);
        REQUIRE(report.hidden_truth_agreement >= 0.98);
        REQUIRE(out.count(Label::unlabeled) == 0);
        // Seed labels inviolable.
        for (std::size_t i = 0; i < ds.samples.size(); ++i)
            if (ds.samples[i].label != Label::unlabeled)
                REQUIRE(out.samples[i].label == ds.samples[i].label);
    }
    SECTION("deterministic under the configured seed") {
        auto ds = blobs(50, 1.5, 0.5, 0.1, 8);
        auto a = temporal_ensembling_label(ds, cfg);
        auto b = temporal_ensembling_label(ds, cfg);
        for (std::size_t i = 0; i < ds.samples.size(); ++i)
            REQUIRE(a.samples[i].label == b.samples[i].label);
    }
    SECTION("missing seed class is a precondition error") {
        auto ds = blobs(30, 2.0, 0.4, 0.0, 6);
        ds.samples[0].label = Label::stable;  // only one class seeded
        REQUIRE_THROWS(temporal_ensembling_label(ds, cfg));
    }
}

TEST_CASE("kmeans baseline") {
    SECTION("two singleton points become their own clusters") {
        Dataset ds;
        for (double v : {0.0, 1.0}) {
            Sample s;
            s.features = Eigen::MatrixXd::Constant(1, 3, v);
            s.label = Label::unlabeled;
            ds.samples.push_back(std::move(s));
        }
        auto out = kmeans_label(ds, 2, 4);
        REQUIRE(out.samples[0].label != out.samples[1].label);
    }
    SECTION("blobs recovered above 95%") {
        auto ds = blobs(100, 2.0, 0.4, 0.05, 10);
        LabelReport report;
        auto out = kmeans_label(ds, 2, 11, &report);
        REQUIRE(truth_recovery(out) >= 0.95);
        REQUIRE(report.silhouette > 0.0);
    }
    SECTION("duplication leaves the partition unchanged") {
        auto ds = blobs(40, 2.0, 0.4, 0.1, 12);
        auto out_single = kmeans_label(ds, 2, 13);
        Dataset doubled = ds;
        for (const auto& s : ds.samples) doubled.samples.push_back(s);
        auto out_double = kmeans_label(doubled, 2, 13);
        for (std::size_t i = 0; i < ds.samples.size(); ++i) {
            REQUIRE(out_double.samples[i].label ==
                    out_double.samples[i + ds.samples.size()].label);
            REQUIRE(out_double.samples[i].label == out_single.samples[i].label);
        }
    }
}

TEST_CASE("silhouette coefficient") {
    SECTION("two tight, far-apart clusters approach 1") {
        nn::Mat x(6, 2);
        x << 0.0, 0.0, 0.01, 0.0, 0.0, 0.01, 5.0, 5.0, 5.01, 5.0, 5.0, 5.01;
        REQUIRE(silhouette(x, {0, 0, 0, 1, 1, 1}) > 0.99);
    }
    SECTION("singleton clusters at 0 and 1 score exactly 1") {
        nn::Mat x(2, 1);
        x << 0.0, 1.0;
        REQUIRE(silhouette(x, {0, 1}) == 1.0);
    }
    SECTION("single cluster is undefined") {
        nn::Mat x(3, 1);
        x << 0.0, 0.5, 1.0;
        REQUIRE_THROWS(silhouette(x, {0, 0, 0}));
    }
    SECTION("random labels on an unstructured cloud average near 0") {
        double total = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            Rng rng(std::uint64_t(trial) + 1);
            nn::Mat x(40, 4);
            std::vector<int> labels(40);
            for (int i = 0; i < 40; ++i) {
                for (int d = 0; d < 4; ++d) x(i, d) = rng.uniform01();
                labels[std::size_t(i)] = int(rng.uniform_int(0, 1));
            }
            bool has0 = false, has1 = false;
            for (int l : labels) (l ? has1 : has0) = true;
            if (!has0 || !has1) {
                labels[0] = 0;
                labels[1] = 1;
            }
            const double sc = silhouette(x, labels);
            REQUIRE(sc >= -1.0);
            REQUIRE(sc <= 1.0);
            total += sc;
        }
        REQUIRE(std::abs(total / 100.0) < 0.1);
    }
}
