#pragma once

// Semi-supervised labeling of partially seed-labeled datasets via temporal
// ensembling, with a seeded k-means baseline and silhouette scoring.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvsa/common.hpp"
#include "stvsa/dataset.hpp"
#include "stvsa/nn.hpp"

namespace stvsa::labeler {

using dataset::Dataset;
using dataset::Label;
using nn::Mat;
using nn::Vec;

struct TemporalEnsemblingCfg {
    double alpha = 0.6;       // EMA momentum
    int epochs = 60;          // T
    int ramp_epochs = 20;
    double w_max = 1.0;
    int batch = 32;
    int n_classes = 2;        // C
    double lr = 1e-3;
    int hidden = 64;
    double dropout = 0.2;
    double jitter_sigma = 0.01;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(alpha >= 0.0 && alpha < 1.0))
            throw ConfigError("temporal ensembling: alpha must be in [0,1)");
        if (epochs < 1 || ramp_epochs < 1 || ramp_epochs > epochs)
            throw ConfigError("temporal ensembling: bad epoch counts");
        if (w_max < 0.0) throw ConfigError("temporal ensembling: negative w_max");
        if (batch < 1) throw ConfigError("temporal ensembling: bad batch size");
        if (n_classes != 2) throw ConfigError("temporal ensembling: C must be 2");
    }

    static TemporalEnsemblingCfg from_json(const nlohmann::json& j) {
        TemporalEnsemblingCfg c;
        if (j.contains("alpha")) c.alpha = j.at("alpha");
        if (j.contains("epochs")) c.epochs = j.at("epochs");
        if (j.contains("ramp_epochs")) c.ramp_epochs = j.at("ramp_epochs");
        if (j.contains("w_max")) c.w_max = j.at("w_max");
        if (j.contains("batch")) c.batch = j.at("batch");
        if (j.contains("lr")) c.lr = j.at("lr");
        if (j.contains("hidden")) c.hidden = j.at("hidden");
        if (j.contains("dropout")) c.dropout = j.at("dropout");
        if (j.contains("jitter_sigma")) c.jitter_sigma = j.at("jitter_sigma");
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

// Per-sample ensemble accumulator. Z and the bias-corrected targets start at
// zero; epoch counts from zero until the first update.
struct EnsembleState {
    Mat z_accum;    // n x C
    Mat z_tilde;    // n x C
    int epoch = 0;  // t

    static EnsembleState zeros(Eigen::Index n, Eigen::Index c) {
        EnsembleState st;
        st.z_accum = Mat::Zero(n, c);
        st.z_tilde = Mat::Zero(n, c);
        st.epoch = 0;
        return st;
    }
};

// ---------------------------------------------------------------------------
// Combined supervised + consistency loss over one batch. Rows of z are softmax
// outputs; labels[i] in {0..C-1} marks seed-labeled rows, -1 the rest.

inline double consistency_loss(const Mat& z, const Mat& z_tilde,
                               const std::vector<int>& labels, double w_t,
                               int n_classes) {
    if (z.rows() != z_tilde.rows() || z.cols() != z_tilde.cols())
        throw Error("consistency_loss: shape mismatch");
    if (std::size_t(z.rows()) != labels.size())
        throw Error("consistency_loss: label count mismatch");
    const double b = double(z.rows());
    double ce = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const int y = labels[std::size_t(i)];
        if (y < 0) continue;
        ce -= std::log(std::max(z(i, y), 1e-12));
    }
    const double cons = (z - z_tilde).squaredNorm();
    return ce / b + w_t * cons / (double(n_classes) * b);
}

// ---------------------------------------------------------------------------
// EMA accumulation with per-epoch bias correction:
// Z <- alpha Z + (1-alpha) z, z_tilde <- Z / (1 - alpha^t).

inline void ema_update(EnsembleState& st, const Mat& z_epoch, double alpha) {
    if (alpha >= 1.0 || alpha < 0.0)
        throw ConfigError("ema_update: alpha must be in [0,1)");
    if (st.z_accum.rows() != z_epoch.rows() || st.z_accum.cols() != z_epoch.cols())
        throw Error("ema_update: shape mismatch");
    st.epoch += 1;
    st.z_accum = alpha * st.z_accum + (1.0 - alpha) * z_epoch;
    const double correction = 1.0 - std::pow(alpha, double(st.epoch));
    st.z_tilde = st.z_accum / correction;
}

// Gaussian ramp-up of the consistency weight; plateaus at w_max.
inline double ramp_weight(int t, int ramp_epochs, double w_max) {
    if (t < 1) throw Error("ramp_weight: epoch must be >= 1");
    const double frac = std::min(double(t) / double(ramp_epochs), 1.0);
    return w_max * std::exp(-5.0 * (1.0 - frac) * (1.0 - frac));
}

// ---------------------------------------------------------------------------
// Internal helpers shared by both labeling paths.

namespace detail {

// Flattened feature rows, min-max scaled on the given dataset (labeling is
// transductive; this internal scaling never leaks into classifier training).
inline Mat design_matrix(const Dataset& ds) {
    if (ds.samples.empty()) throw Error("labeler: empty dataset");
    const Eigen::Index n = Eigen::Index(ds.samples.size());
    const Eigen::Index f = Eigen::Index(ds.samples.front().features.size());
    Mat x(n, f);
    for (Eigen::Index i = 0; i < n; ++i)
        x.row(i) = dataset::flatten(ds.samples[std::size_t(i)].features).transpose();
    for (Eigen::Index c = 0; c < f; ++c) {
        const double lo = x.col(c).minCoeff();
        const double hi = x.col(c).maxCoeff();
        if (hi > lo)
            x.col(c) = (x.col(c).array() - lo) / (hi - lo);
        else
            x.col(c).setConstant(0.5);
    }
    return x;
}

inline double mean_u_channel(const Dataset& ds, const std::vector<int>& members) {
    double sum = 0.0;
    long count = 0;
    for (int i : members) {
        const auto& m = ds.samples[std::size_t(i)].features;
        for (Eigen::Index c = 0; c < m.cols(); c += 3) {
            sum += m.col(c).sum();
            count += m.rows();
        }
    }
    return count ? sum / double(count) : 0.0;
}

}  // namespace detail

struct LabelReport {
    std::size_t n_stable = 0;
    std::size_t n_unstable = 0;
    std::size_t n_seeded = 0;
    double silhouette = 0.0;
    // Agreement with the seed-rule ground truth on rows where it is definite.
    double hidden_truth_agreement = -1.0;
    std::string method;

    nlohmann::json to_json() const {
        return {{"method", method},
                {"n_stable", n_stable},
                {"n_unstable", n_unstable},
                {"n_seeded", n_seeded},
                {"silhouette", silhouette},
                {"hidden_truth_agreement", hidden_truth_agreement}};
    }
};

// ---------------------------------------------------------------------------
// Silhouette coefficient with Euclidean distances on flattened features.
// Singleton-cluster members score a = 0 per the usual convention.

inline double silhouette(const Mat& x, const std::vector<int>& labels) {
    const Eigen::Index n = x.rows();
    if (std::size_t(n) != labels.size())
        throw Error("silhouette: label count mismatch");
    std::vector<int> clusters;
    for (int l : labels)
        if (std::find(clusters.begin(), clusters.end(), l) == clusters.end())
            clusters.push_back(l);
    if (clusters.size() < 2)
        throw Error("silhouette: undefined for a single cluster");

    std::vector<std::vector<int>> members(clusters.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto it = std::find(clusters.begin(), clusters.end(),
                                  labels[std::size_t(i)]);
        members[std::size_t(it - clusters.begin())].push_back(int(i));
    }

    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto own = std::size_t(
            std::find(clusters.begin(), clusters.end(), labels[std::size_t(i)]) -
            clusters.begin());
        double a = 0.0;
        if (members[own].size() > 1) {
            for (int j : members[own])
                if (j != int(i)) a += (x.row(i) - x.row(j)).norm();
            a /= double(members[own].size() - 1);
        }
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < clusters.size(); ++c) {
            if (c == own || members[c].empty()) continue;
            double d = 0.0;
            for (int j : members[c]) d += (x.row(i) - x.row(j)).norm();
            b = std::min(b, d / double(members[c].size()));
        }
        const double denom = std::max(a, b);
        total += denom > 0.0 ? (b - a) / denom : 0.0;
    }
    return total / double(n);
}

inline double silhouette(const Dataset& ds, const std::vector<int>& labels) {
    return silhouette(detail::design_matrix(ds), labels);
}

// ---------------------------------------------------------------------------
// k-means baseline: k-means++ seeding, Lloyd iterations, clusters mapped to
// classes by majority vote of seed-labeled members.

inline Dataset kmeans_label(const Dataset& ds, int k, std::uint64_t seed,
                            LabelReport* report = nullptr) {
    if (int(ds.samples.size()) < k) throw Error("kmeans: fewer samples than k");
    const Mat x = detail::design_matrix(ds);
    const Eigen::Index n = x.rows();
    Rng rng(derive_seed(seed, "kmeans"));

    // k-means++ initialization.
    std::vector<Eigen::Index> centers;
    centers.push_back(rng.uniform_int(0, n - 1));
    std::vector<double> d2(static_cast<std::size_t>(n));
    while (int(centers.size()) < k) {
        double sum = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (auto c : centers) best = std::min(best, (x.row(i) - x.row(c)).squaredNorm());
            d2[std::size_t(i)] = best;
            sum += best;
        }
        if (sum <= 0.0) {
            centers.push_back(rng.uniform_int(0, n - 1));
            continue;
        }
        double r = rng.uniform01() * sum;
        Eigen::Index pick = n - 1;
        for (Eigen::Index i = 0; i < n; ++i) {
            r -= d2[std::size_t(i)];
            if (r <= 0.0) {
                pick = i;
                break;
            }
        }
        centers.push_back(pick);
    }
    Mat centroids(k, x.cols());
    for (int c = 0; c < k; ++c) centroids.row(c) = x.row(centers[std::size_t(c)]);

    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    for (int iter = 0; iter < 300; ++iter) {
        for (Eigen::Index i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            int arg = 0;
            for (int c = 0; c < k; ++c) {
                const double d = (x.row(i) - centroids.row(c)).squaredNorm();
                if (d < best) {
                    best = d;
                    arg = c;
                }
            }
            assign[std::size_t(i)] = arg;
        }
        Mat next = Mat::Zero(k, x.cols());
        std::vector<long> count(static_cast<std::size_t>(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            next.row(assign[std::size_t(i)]) += x.row(i);
            ++count[std::size_t(assign[std::size_t(i)])];
        }
        bool reseeded = false;
        for (int c = 0; c < k; ++c) {
            if (count[std::size_t(c)] == 0) {
                // Empty cluster: re-seed from a random point, retry.
                int tries = 0;
                while (tries++ < 5 && count[std::size_t(c)] == 0) {
                    next.row(c) = x.row(rng.uniform_int(0, n - 1));
                    count[std::size_t(c)] = 1;
                    reseeded = true;
                }
            } else {
                next.row(c) /= double(count[std::size_t(c)]);
            }
        }
        const double shift = (next - centroids).rowwise().norm().maxCoeff();
        centroids = next;
        if (!reseeded && shift < 1e-6) break;
    }

    // Majority vote of seed-labeled members per cluster; distinct classes for
    // k = 2, ties broken toward the cluster with higher mean voltage.
    std::vector<std::vector<int>> members(static_cast<std::size_t>(k));
    std::vector<long> stable_votes(static_cast<std::size_t>(k), 0), votes(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        members[std::size_t(assign[std::size_t(i)])].push_back(int(i));
        const Label l = ds.samples[std::size_t(i)].label;
        if (l != Label::unlabeled) {
            ++votes[std::size_t(assign[std::size_t(i)])];
            if (l == Label::stable) ++stable_votes[std::size_t(assign[std::size_t(i)])];
        }
    }
    std::vector<Label> cluster_class(static_cast<std::size_t>(k));
    if (k == 2) {
        const double f0 = votes[0] ? double(stable_votes[0]) / double(votes[0]) : 0.5;
        const double f1 = votes[1] ? double(stable_votes[1]) / double(votes[1]) : 0.5;
        int stable_cluster;
        if (f0 > f1)
            stable_cluster = 0;
        else if (f1 > f0)
            stable_cluster = 1;
        else
            stable_cluster = detail::mean_u_channel(ds, members[0]) >=
                                     detail::mean_u_channel(ds, members[1])
                                 ? 0
                                 : 1;
        cluster_class[std::size_t(stable_cluster)] = Label::stable;
        cluster_class[std::size_t(1 - stable_cluster)] = Label::unstable;
    } else {
        for (int c = 0; c < k; ++c) {
            if (votes[std::size_t(c)] == 0)
                cluster_class[std::size_t(c)] =
                    detail::mean_u_channel(ds, members[std::size_t(c)]) >= 0.5
                        ? Label::stable
                        : Label::unstable;
            else
                cluster_class[std::size_t(c)] =
                    2 * stable_votes[std::size_t(c)] >= votes[std::size_t(c)]
                        ? Label::stable
                        : Label::unstable;
        }
    }

    Dataset out = ds;
    for (Eigen::Index i = 0; i < n; ++i) {
        auto& s = out.samples[std::size_t(i)];
        if (s.label == Label::unlabeled)
            s.label = cluster_class[std::size_t(assign[std::size_t(i)])];
    }
    if (report) {
        report->method = "kmeans";
        report->n_stable = out.count(Label::stable);
        report->n_unstable = out.count(Label::unstable);
        report->n_seeded = ds.samples.size() - ds.count(Label::unlabeled);
        std::vector<int> final_labels;
        for (const auto& s : out.samples) final_labels.push_back(int(s.label));
        report->silhouette = silhouette(x, final_labels);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Temporal ensembling on a two-layer feed-forward backbone over flattened
// windows. Seed labels are never overwritten; every remaining sample receives
// the argmax of its final bias-corrected ensemble target.

inline Dataset temporal_ensembling_label(const Dataset& ds,
                                         const TemporalEnsemblingCfg& cfg,
                                         LabelReport* report = nullptr,
                                         EnsembleState* state_out = nullptr) {
    cfg.validate();
    bool has_stable = false, has_unstable = false;
    for (const auto& s : ds.samples) {
        has_stable |= s.label == Label::stable;
        has_unstable |= s.label == Label::unstable;
    }
    if (!has_stable || !has_unstable)
        throw Error("temporal ensembling: need at least one seed of each class");

    const Mat x = detail::design_matrix(ds);
    const Eigen::Index n = x.rows();
    const int c = cfg.n_classes;
    std::vector<int> seed_labels(static_cast<std::size_t>(n), -1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Label l = ds.samples[std::size_t(i)].label;
        if (l != Label::unlabeled) seed_labels[std::size_t(i)] = int(l);
    }

    Rng init_rng(derive_seed(cfg.seed, "te-init"));
    nn::Linear l1 = nn::Linear::init(int(x.cols()), cfg.hidden, init_rng);
    nn::Linear l2 = nn::Linear::init(cfg.hidden, c, init_rng);
    nn::AdamBuf a1w, a1b, a2w, a2b;
    nn::AdamCfg adam{cfg.lr, 0.9, 0.999, 1e-8};
    long step = 0;

    EnsembleState st = EnsembleState::zeros(n, c);
    Rng order_rng(derive_seed(cfg.seed, "te-order"));
    Rng noise_rng(derive_seed(cfg.seed, "te-noise"));

    std::vector<std::size_t> idx(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const double w = ramp_weight(epoch, cfg.ramp_epochs, cfg.w_max);
        order_rng.shuffle(idx);
        Mat z_epoch = Mat::Zero(n, c);
        for (std::size_t start = 0; start < idx.size();
             start += std::size_t(cfg.batch)) {
            const std::size_t end =
                std::min(idx.size(), start + std::size_t(cfg.batch));
            const Eigen::Index bsz = Eigen::Index(end - start);
            Mat xb(bsz, x.cols());
            Mat ztb(bsz, c);
            std::vector<int> yb(static_cast<std::size_t>(bsz), -1);
            for (Eigen::Index r = 0; r < bsz; ++r) {
                const auto i = idx[start + std::size_t(r)];
                xb.row(r) = x.row(Eigen::Index(i));
                ztb.row(r) = st.z_tilde.row(Eigen::Index(i));
                yb[std::size_t(r)] = seed_labels[i];
            }
            // Stochastic input perturbation for the consistency target.
            for (Eigen::Index r = 0; r < bsz; ++r)
                for (Eigen::Index f = 0; f < xb.cols(); ++f)
                    xb(r, f) += cfg.jitter_sigma * noise_rng.normal();

            const Mat pre1 = l1.forward(xb);
            const Mat hid = nn::act_forward(nn::Act::relu, pre1);
            Mat mask;
            const Mat hid_do = nn::dropout_forward(hid, cfg.dropout, noise_rng, &mask);
            const Mat logits = l2.forward(hid_do);
            const Mat probs = nn::softmax_rows(logits);

            for (Eigen::Index r = 0; r < bsz; ++r)
                z_epoch.row(Eigen::Index(idx[start + std::size_t(r)])) = probs.row(r);

            // d loss / d probs for the consistency part.
            const Mat dprobs = 2.0 * w / (double(c) * double(bsz)) * (probs - ztb);
            Mat dlogits = nn::softmax_backward(probs, dprobs);
            // Supervised part via the softmax/CE shortcut on labeled rows.
            for (Eigen::Index r = 0; r < bsz; ++r) {
                const int y = yb[std::size_t(r)];
                if (y < 0) continue;
                for (int cc = 0; cc < c; ++cc)
                    dlogits(r, cc) += (probs(r, cc) - (cc == y ? 1.0 : 0.0)) /
                                      double(bsz);
            }
            nn::LinearGrad g1, g2;
            g1.zero_like(l1);
            g2.zero_like(l2);
            Mat dhid = nn::linear_backward(l2, hid_do, dlogits, g2);
            dhid = dhid.cwiseProduct(mask);
            const Mat dpre1 = nn::act_backward(nn::Act::relu, pre1, dhid);
            nn::linear_backward(l1, xb, dpre1, g1);
            ++step;
            nn::adam_step(l1.w, g1.w, a1w, step, adam);
            nn::adam_step(l1.b, g1.b, a1b, step, adam);
            nn::adam_step(l2.w, g2.w, a2w, step, adam);
            nn::adam_step(l2.b, g2.b, a2b, step, adam);

            const double loss = consistency_loss(probs, ztb, yb, w, c);
            if (!std::isfinite(loss))
                throw TrainingDiverged("temporal ensembling loss non-finite",
                                       long(epoch));
        }
        ema_update(st, z_epoch, cfg.alpha);
    }

    Dataset out = ds;
    for (Eigen::Index i = 0; i < n; ++i) {
        auto& s = out.samples[std::size_t(i)];
        if (s.label != Label::unlabeled) continue;  // seeds retained
        Eigen::Index arg;
        st.z_tilde.row(i).maxCoeff(&arg);
        s.label = Label(int(arg));
    }
    if (report) {
        report->method = "temporal_ensembling";
        report->n_stable = out.count(Label::stable);
        report->n_unstable = out.count(Label::unstable);
        report->n_seeded = ds.samples.size() - ds.count(Label::unlabeled);
        std::vector<int> final_labels;
        for (const auto& s : out.samples) final_labels.push_back(int(s.label));
        report->silhouette = silhouette(x, final_labels);
        long agree = 0, definite = 0;
        for (std::size_t i = 0; i < out.samples.size(); ++i) {
            const Label truth = out.samples[i].meta.seed_rule;
            if (truth == Label::unlabeled) continue;
            ++definite;
            agree += out.samples[i].label == truth;
        }
        report->hidden_truth_agreement =
            definite ? double(agree) / double(definite) : -1.0;
    }
    if (state_out) *state_out = st;
    return out;
}

}  // namespace stvsa::labeler
