#pragma once

// Minimal dense-network building blocks shared by the labeler backbone, the
// GAN generator/discriminator, and the Transformer training loop: linear
// layers with hand-derived backward passes, a few activations, softmax/CE,
// and Adam. Everything is double precision and deterministic for a fixed
// seed under single-threaded execution.

#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "stvsa/common.hpp"

namespace stvsa::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline Mat glorot(int in, int out, Rng& rng) {
    const double limit = std::sqrt(6.0 / double(in + out));
    Mat w(in, out);
    for (int r = 0; r < in; ++r)
        for (int c = 0; c < out; ++c) w(r, c) = rng.uniform(-limit, limit);
    return w;
}

struct Linear {
    Mat w;  // in x out
    Vec b;  // out

    static Linear init(int in, int out, Rng& rng) {
        Linear l;
        l.w = glorot(in, out, rng);
        l.b = Vec::Zero(out);
        return l;
    }

    Mat forward(const Mat& x) const {
        return (x * w).rowwise() + b.transpose();
    }
};

struct LinearGrad {
    Mat w;
    Vec b;

    void zero_like(const Linear& l) {
        w = Mat::Zero(l.w.rows(), l.w.cols());
        b = Vec::Zero(l.b.size());
    }
};

// dX for Y = XW + b given dY; accumulates parameter gradients.
inline Mat linear_backward(const Linear& l, const Mat& x, const Mat& dy,
                           LinearGrad& g) {
    g.w.noalias() += x.transpose() * dy;
    g.b.noalias() += dy.colwise().sum().transpose();
    return dy * l.w.transpose();
}

// ---------------------------------------------------------------------------
// Activations.

enum class Act { none, relu, leaky_relu, sigmoid };

inline Mat act_forward(Act a, const Mat& x) {
    switch (a) {
        case Act::none: return x;
        case Act::relu: return x.cwiseMax(0.0);
        case Act::leaky_relu:
            return x.unaryExpr([](double v) { return v > 0 ? v : 0.2 * v; });
        case Act::sigmoid:
            return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    }
    return x;
}

// dPre given dPost and the pre-activation input.
inline Mat act_backward(Act a, const Mat& pre, const Mat& dpost) {
    switch (a) {
        case Act::none: return dpost;
        case Act::relu:
            return dpost.cwiseProduct(
                pre.unaryExpr([](double v) { return v > 0 ? 1.0 : 0.0; }));
        case Act::leaky_relu:
            return dpost.cwiseProduct(
                pre.unaryExpr([](double v) { return v > 0 ? 1.0 : 0.2; }));
        case Act::sigmoid: {
            const Mat s = act_forward(Act::sigmoid, pre);
            return dpost.cwiseProduct(
                s.cwiseProduct(Mat::Ones(s.rows(), s.cols()) - s));
        }
    }
    return dpost;
}

// ---------------------------------------------------------------------------
// Row-wise softmax, stabilized by row-max subtraction.

inline Mat softmax_rows(const Mat& logits) {
    Mat out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double m = logits.row(r).maxCoeff();
        Eigen::RowVectorXd e = (logits.row(r).array() - m).exp();
        out.row(r) = e / e.sum();
    }
    return out;
}

// dLogits given dProbs, for probs = softmax_rows(logits).
inline Mat softmax_backward(const Mat& probs, const Mat& dprobs) {
    Mat dlogits(probs.rows(), probs.cols());
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        const Eigen::RowVectorXd p = probs.row(r);
        const Eigen::RowVectorXd dp = dprobs.row(r);
        const double dot = p.dot(dp);
        dlogits.row(r) = p.cwiseProduct(
            dp - Eigen::RowVectorXd::Constant(probs.cols(), dot));
    }
    return dlogits;
}

// Mean cross-entropy over rows; labels are class indices.
inline double cross_entropy(const Mat& probs, const std::vector<int>& labels) {
    double loss = 0.0;
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        const double p = std::max(probs(r, labels[std::size_t(r)]), 1e-12);
        loss -= std::log(p);
    }
    return loss / double(probs.rows());
}

// Combined softmax + mean cross-entropy gradient w.r.t. logits.
inline Mat ce_softmax_backward(const Mat& probs, const std::vector<int>& labels) {
    Mat d = probs;
    for (Eigen::Index r = 0; r < probs.rows(); ++r)
        d(r, labels[std::size_t(r)]) -= 1.0;
    return d / double(probs.rows());
}

// ---------------------------------------------------------------------------
// Inverted dropout; mask generated from the supplied RNG.

inline Mat dropout_forward(const Mat& x, double p, Rng& rng, Mat* mask_out) {
    if (p <= 0.0) {
        if (mask_out) *mask_out = Mat::Ones(x.rows(), x.cols());
        return x;
    }
    const double keep = 1.0 - p;
    Mat mask(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < x.cols(); ++c)
            mask(r, c) = rng.uniform01() < keep ? 1.0 / keep : 0.0;
    if (mask_out) *mask_out = mask;
    return x.cwiseProduct(mask);
}

// ---------------------------------------------------------------------------
// Adam.

struct AdamBuf {
    Mat m, v;

    void ensure(const Mat& p) {
        if (m.rows() != p.rows() || m.cols() != p.cols()) {
            m = Mat::Zero(p.rows(), p.cols());
            v = Mat::Zero(p.rows(), p.cols());
        }
    }
};

struct AdamCfg {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline void adam_step(Mat& param, const Mat& grad, AdamBuf& buf, long t,
                      const AdamCfg& cfg) {
    buf.ensure(param);
    buf.m = cfg.beta1 * buf.m + (1.0 - cfg.beta1) * grad;
    buf.v = cfg.beta2 * buf.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
    const Mat mhat = buf.m / bc1;
    const Mat vhat = buf.v / bc2;
    param.array() -= cfg.lr * mhat.array() / (vhat.array().sqrt() + cfg.eps);
}

inline void adam_step(Vec& param, const Vec& grad, AdamBuf& buf, long t,
                      const AdamCfg& cfg) {
    Mat p = param;
    adam_step(p, Mat(grad), buf, t, cfg);
    param = p.col(0);
}

// ---------------------------------------------------------------------------
// Simple MLP: linear layers with per-layer activations.

struct Mlp {
    std::vector<Linear> layers;
    std::vector<Act> acts;

    static Mlp init(const std::vector<int>& widths, const std::vector<Act>& acts,
                    Rng& rng) {
        if (widths.size() < 2 || acts.size() != widths.size() - 1)
            throw Error("mlp: widths/acts mismatch");
        Mlp m;
        for (std::size_t i = 0; i + 1 < widths.size(); ++i)
            m.layers.push_back(Linear::init(widths[i], widths[i + 1], rng));
        m.acts = acts;
        return m;
    }

    struct Cache {
        std::vector<Mat> inputs;  // input to each layer
        std::vector<Mat> pre;     // pre-activation of each layer
    };

    Mat forward(const Mat& x, Cache* cache = nullptr) const {
        Mat h = x;
        if (cache) {
            cache->inputs.clear();
            cache->pre.clear();
        }
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (cache) cache->inputs.push_back(h);
            Mat pre = layers[i].forward(h);
            if (cache) cache->pre.push_back(pre);
            h = act_forward(acts[i], pre);
        }
        return h;
    }

    struct Grads {
        std::vector<LinearGrad> layers;

        void zero_like(const Mlp& m) {
            layers.resize(m.layers.size());
            for (std::size_t i = 0; i < m.layers.size(); ++i)
                layers[i].zero_like(m.layers[i]);
        }
    };

    // Returns dX; accumulates into grads.
    Mat backward(const Cache& cache, const Mat& dout, Grads& grads) const {
        Mat d = dout;
        for (std::size_t i = layers.size(); i-- > 0;) {
            d = act_backward(acts[i], cache.pre[i], d);
            d = linear_backward(layers[i], cache.inputs[i], d, grads.layers[i]);
        }
        return d;
    }

    std::size_t n_layers() const { return layers.size(); }
};

struct MlpAdam {
    std::vector<AdamBuf> w, b;
    long t = 0;

    void ensure(const Mlp& m) {
        w.resize(m.layers.size());
        b.resize(m.layers.size());
    }

    void step(Mlp& m, const Mlp::Grads& g, const AdamCfg& cfg) {
        ensure(m);
        ++t;
        for (std::size_t i = 0; i < m.layers.size(); ++i) {
            adam_step(m.layers[i].w, g.layers[i].w, w[i], t, cfg);
            adam_step(m.layers[i].b, g.layers[i].b, b[i], t, cfg);
        }
    }
};

}  // namespace stvsa::nn
