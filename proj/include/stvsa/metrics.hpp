#pragma once

// Confusion-matrix statistics and ranking metrics shared by every evaluation
// in the pipeline. Stable is the positive class throughout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvsa/common.hpp"

namespace stvsa::metrics {

struct ConfusionMatrix {
    long long tp = 0;  // stable predicted stable
    long long fp = 0;  // unstable predicted stable
    long long fn = 0;  // stable predicted unstable
    long long tn = 0;  // unstable predicted unstable

    long long total() const { return tp + fp + fn + tn; }
};

// Labels are 1 = stable (positive), 0 = unstable (negative).
inline ConfusionMatrix confusion(const std::vector<int>& preds,
                                 const std::vector<int>& truth) {
    if (preds.size() != truth.size())
        throw Error("confusion: preds/truth length mismatch");
    if (preds.empty()) throw Error("confusion: empty input");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (truth[i] == 1)
            (preds[i] == 1 ? cm.tp : cm.fn)++;
        else
            (preds[i] == 1 ? cm.fp : cm.tn)++;
    }
    return cm;
}

inline double acc(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw Error("acc: empty confusion matrix");
    return double(cm.tp + cm.tn) / double(cm.total());
}

// Zero denominator factor -> 0 by convention.
inline double mcc(const ConfusionMatrix& cm) {
    const double num = double(cm.tp) * double(cm.tn) - double(cm.fp) * double(cm.fn);
    const double f1 = double(cm.tp + cm.fp);
    const double f2 = double(cm.tp + cm.fn);
    const double f3 = double(cm.tn + cm.fp);
    const double f4 = double(cm.tn + cm.fn);
    if (f1 == 0.0 || f2 == 0.0 || f3 == 0.0 || f4 == 0.0) return 0.0;
    return num / std::sqrt(f1 * f2 * f3 * f4);
}

inline double precision(const ConfusionMatrix& cm) {
    if (cm.tp + cm.fp == 0) return 0.0;
    return double(cm.tp) / double(cm.tp + cm.fp);
}

inline double recall(const ConfusionMatrix& cm) {
    if (cm.tp + cm.fn == 0) return 0.0;
    return double(cm.tp) / double(cm.tp + cm.fn);
}

inline double f1(const ConfusionMatrix& cm) {
    const double p = precision(cm);
    const double r = recall(cm);
    if (p + r == 0.0) return 0.0;
    return 2.0 * p * r / (p + r);
}

// Probability that a random stable sample outscores a random unstable one,
// ties counted 1/2 (Mann-Whitney with midranks). Equals the trapezoidal ROC
// area. Requires both classes present.
inline double auc(const std::vector<double>& scores,
                  const std::vector<int>& truth) {
    if (scores.size() != truth.size())
        throw Error("auc: scores/truth length mismatch");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (int y : truth) n_pos += (y == 1);
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw Error("auc: undefined for single-class truth");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] < scores[b];
    });

    // Midranks over tied score groups; ranks are 1-based.
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * double(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k)
            if (truth[order[k]] == 1) rank_sum_pos += midrank;
        i = j + 1;
    }
    const double u = rank_sum_pos - 0.5 * double(n_pos) * double(n_pos + 1);
    return u / (double(n_pos) * double(n_neg));
}

struct MetricsReport {
    ConfusionMatrix cm;
    double acc = 0.0;
    double auc = 0.0;
    double mcc = 0.0;
    double f1 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    long long n = 0;
    std::string domain_tag;

    nlohmann::json to_json() const {
        return {{"confusion",
                 {{"tp", cm.tp}, {"fp", cm.fp}, {"fn", cm.fn}, {"tn", cm.tn}}},
                {"acc", acc},
                {"auc", auc},
                {"mcc", mcc},
                {"f1", f1},
                {"precision", precision},
                {"recall", recall},
                {"n", n},
                {"domain_tag", domain_tag}};
    }

    // ACC,AUC,MCC,F1 row used by the table exports.
    std::string csv_row(int prec = 4) const {
        return format_double(acc, prec) + "," + format_double(auc, prec) + "," +
               format_double(mcc, prec) + "," + format_double(f1, prec);
    }
};

// Full report from predictions plus stable-class scores.
inline MetricsReport report_from(const std::vector<int>& preds,
                                 const std::vector<double>& scores,
                                 const std::vector<int>& truth,
                                 const std::string& domain_tag = "") {
    MetricsReport r;
    r.cm = confusion(preds, truth);
    r.n = r.cm.total();
    r.acc = acc(r.cm);
    r.mcc = mcc(r.cm);
    r.f1 = f1(r.cm);
    r.precision = precision(r.cm);
    r.recall = recall(r.cm);
    bool has_pos = false, has_neg = false;
    for (int y : truth) (y == 1 ? has_pos : has_neg) = true;
    r.auc = (has_pos && has_neg) ? auc(scores, truth) : 0.5;
    r.domain_tag = domain_tag;
    return r;
}

}  // namespace stvsa::metrics
