#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "stvsa/common.hpp"
#include "stvsa/metrics.hpp"

using namespace stvsa;
using namespace stvsa::metrics;

namespace {

// Independent recomputation path used as the oracle: count the four cells by
// scanning pairs, then apply the closed forms.
struct BruteMetrics {
    double acc, mcc, f1, precision, recall;
};

BruteMetrics brute_force(const std::vector<int>& preds,
                         const std::vector<int>& truth) {
    long long tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (truth[i] == 1 && preds[i] == 1) ++tp;
        if (truth[i] == 0 && preds[i] == 1) ++fp;
        if (truth[i] == 1 && preds[i] == 0) ++fn;
        if (truth[i] == 0 && preds[i] == 0) ++tn;
    }
    BruteMetrics b{};
    b.acc = double(tp + tn) / double(tp + fp + fn + tn);
    const double d1 = double(tp + fp), d2 = double(tp + fn);
    const double d3 = double(tn + fp), d4 = double(tn + fn);
    b.mcc = (d1 == 0 || d2 == 0 || d3 == 0 || d4 == 0)
                ? 0.0
                : (double(tp) * double(tn) - double(fp) * double(fn)) /
                      std::sqrt(d1 * d2 * d3 * d4);
    b.precision = (tp + fp) == 0 ? 0.0 : double(tp) / double(tp + fp);
    b.recall = (tp + fn) == 0 ? 0.0 : double(tp) / double(tp + fn);
    b.f1 = (b.precision + b.recall) == 0.0
               ? 0.0
               : 2.0 * b.precision * b.recall / (b.precision + b.recall);
    return b;
}

// Exhaustive pairwise AUC with half-credit ties.
double pairwise_auc(const std::vector<double>& scores,
                    const std::vector<int>& truth) {
    double wins = 0.0;
    long long pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (truth[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (truth[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    return wins / double(pairs);
}

}  // namespace

TEST_CASE("confusion counts the four cells") {
    // preds (1,1,0,0) vs truth (1,0,0,1)
    auto cm = confusion({1, 1, 0, 0}, {1, 0, 0, 1});
    REQUIRE(cm.tp == 1);
    REQUIRE(cm.fp == 1);
    REQUIRE(cm.tn == 1);
    REQUIRE(cm.fn == 1);

    auto all_stable = confusion({1, 1, 1}, {1, 1, 1});
    REQUIRE(all_stable.tp == 3);
    REQUIRE(all_stable.fp + all_stable.fn + all_stable.tn == 0);

    auto inverted = confusion({0, 1}, {1, 0});
    REQUIRE(inverted.tp == 0);
    REQUIRE(inverted.tn == 0);
    REQUIRE(inverted.fn == 1);
    REQUIRE(inverted.fp == 1);
}

TEST_CASE("acc examples") {
    REQUIRE(acc({50, 0, 0, 50}) == 1.0);
    REQUIRE(acc({40, 10, 5, 45}) == 0.85);
    REQUIRE(acc({25, 25, 25, 25}) == 0.5);
    REQUIRE_THROWS_AS(acc({0, 0, 0, 0}), Error);
}

TEST_CASE("mcc examples and conventions") {
    REQUIRE(mcc({50, 0, 0, 50}) == 1.0);
    // Inverted classification.
    REQUIRE(mcc({0, 10, 10, 0}) == -1.0);
    // All-stable predictions on mixed truth: zero-denominator convention.
    REQUIRE(mcc({5, 5, 0, 0}) == 0.0);
}

TEST_CASE("mcc symmetric under simultaneous class swap") {
    Rng rng(3);
    for (int it = 0; it < 200; ++it) {
        ConfusionMatrix cm{rng.uniform_int(0, 20), rng.uniform_int(0, 20),
                           rng.uniform_int(0, 20), rng.uniform_int(0, 20)};
        ConfusionMatrix swapped{cm.tn, cm.fn, cm.fp, cm.tp};
        REQUIRE(mcc(cm) == Catch::Approx(mcc(swapped)).margin(1e-15));
    }
}

TEST_CASE("f1 / precision / recall examples") {
    REQUIRE(f1({10, 0, 0, 10}) == 1.0);
    ConfusionMatrix cm{8, 2, 8, 0};
    REQUIRE(precision(cm) == 0.8);
    REQUIRE(recall(cm) == 0.5);
    REQUIRE(f1(cm) == Catch::Approx(0.6154).margin(5e-5));
    REQUIRE(f1({0, 3, 4, 0}) == 0.0);
}

TEST_CASE("auc examples") {
    REQUIRE(auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);
    REQUIRE(auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == 0.5);
    REQUIRE(auc({0.9, 0.4, 0.6}, {1, 0, 1}) == 1.0);
    REQUIRE_THROWS_AS(auc({0.1, 0.2}, {1, 1}), Error);
}

TEST_CASE("auc invariant under strictly increasing transforms") {
    Rng rng(11);
    for (int it = 0; it < 50; ++it) {
        const int n = int(rng.uniform_int(4, 30));
        std::vector<double> scores(static_cast<std::size_t>(n));
        std::vector<int> truth(static_cast<std::size_t>(n));
        truth[0] = 1;
        truth[1] = 0;
        for (int i = 0; i < n; ++i) {
            scores[std::size_t(i)] = rng.uniform(-2.0, 2.0);
            if (i >= 2) truth[std::size_t(i)] = rng.uniform01() < 0.5;
        }
        auto transformed = scores;
        for (auto& s : transformed) s = std::exp(2.0 * s) + 3.0;
        REQUIRE(auc(scores, truth) == auc(transformed, truth));
    }
}

TEST_CASE("metrics match brute-force recomputation on random vectors") {
    Rng rng(2024);
    for (int it = 0; it < 500; ++it) {
        const int n = int(rng.uniform_int(1, 200));
        std::vector<int> preds(static_cast<std::size_t>(n)), truth(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            preds[std::size_t(i)] = rng.uniform01() < 0.5;
            truth[std::size_t(i)] = rng.uniform01() < 0.5;
        }
        const auto cm = confusion(preds, truth);
        const auto oracle = brute_force(preds, truth);
        REQUIRE(acc(cm) == oracle.acc);
        REQUIRE(mcc(cm) == oracle.mcc);
        REQUIRE(f1(cm) == oracle.f1);
        REQUIRE(precision(cm) == oracle.precision);
        REQUIRE(recall(cm) == oracle.recall);
    }
}

TEST_CASE("auc equals the exhaustive pairwise oracle") {
    Rng rng(77);
    for (int it = 0; it < 300; ++it) {
        const int n = int(rng.uniform_int(2, 12));
        std::vector<double> scores(static_cast<std::size_t>(n));
        std::vector<int> truth(static_cast<std::size_t>(n));
        truth[0] = 1;
        truth[std::size_t(n - 1)] = 0;
        for (int i = 0; i < n; ++i) {
            // Quantized scores force ties.
            scores[std::size_t(i)] = double(rng.uniform_int(0, 4)) / 4.0;
            if (i > 0 && i < n - 1) truth[std::size_t(i)] = rng.uniform01() < 0.5;
        }
        REQUIRE(auc(scores, truth) == pairwise_auc(scores, truth));
    }
}

TEST_CASE("report_from aggregates all fields") {
    const std::vector<int> preds{1, 1, 0, 0, 1};
    const std::vector<int> truth{1, 0, 0, 1, 1};
    const std::vector<double> scores{0.9, 0.7, 0.1, 0.4, 0.8};
    auto r = report_from(preds, scores, truth, "source");
    REQUIRE(r.n == 5);
    REQUIRE(r.acc == acc(r.cm));
    REQUIRE(r.domain_tag == "source");
    auto j = r.to_json();
    REQUIRE(j["confusion"]["tp"].get<long long>() == r.cm.tp);
}
