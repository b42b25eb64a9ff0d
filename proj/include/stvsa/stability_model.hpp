#pragma once

// Encoder-only Transformer classifier: scaled dot-product attention,
// multi-head attention, post-norm encoder layers with residuals, temporal
// mean-pooling, and a two-class softmax head. Forward and backward passes are
// written out by hand and verified against finite differences in the tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvsa/common.hpp"
#include "stvsa/dataset.hpp"
#include "stvsa/nn.hpp"

namespace stvsa::stability_model {

using dataset::Dataset;
using dataset::Label;
using dataset::Sample;
using nn::Mat;
using nn::Vec;

struct TransformerCfg {
    int d_model = 64;
    int n_heads = 8;
    int n_layers = 2;
    int d_ffn = 128;
    double dropout = 0.5;
    double lr = 1e-4;
    int batch = 64;
    int epochs = 400;
    bool use_positional_encoding = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (d_model < 1 || n_heads < 1 || n_layers < 0 || d_ffn < 1)
            throw ConfigError("transformer: bad dimensions");
        if (d_model % n_heads != 0)
            throw ConfigError("transformer: d_model must be divisible by n_heads");
        if (!(dropout >= 0.0 && dropout < 1.0))
            throw ConfigError("transformer: dropout must be in [0,1)");
        if (lr <= 0.0 || batch < 1 || epochs < 0)
            throw ConfigError("transformer: bad training settings");
    }

    nlohmann::json to_json() const {
        return {{"d_model", d_model},       {"n_heads", n_heads},
                {"n_layers", n_layers},     {"d_ffn", d_ffn},
                {"dropout", dropout},       {"lr", lr},
                {"batch", batch},           {"epochs", epochs},
                {"use_positional_encoding", use_positional_encoding},
                {"seed", seed}};
    }

    static TransformerCfg from_json(const nlohmann::json& j) {
        TransformerCfg c;
        if (j.contains("d_model")) c.d_model = j.at("d_model");
        if (j.contains("n_heads")) c.n_heads = j.at("n_heads");
        if (j.contains("n_layers")) c.n_layers = j.at("n_layers");
        if (j.contains("d_ffn")) c.d_ffn = j.at("d_ffn");
        if (j.contains("dropout")) c.dropout = j.at("dropout");
        if (j.contains("lr")) c.lr = j.at("lr");
        if (j.contains("batch")) c.batch = j.at("batch");
        if (j.contains("epochs")) c.epochs = j.at("epochs");
        if (j.contains("use_positional_encoding"))
            c.use_positional_encoding = j.at("use_positional_encoding");
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

// ---------------------------------------------------------------------------
// Sinusoidal positional encoding: PE[t, 2i] = sin(t / 10000^(2i/d)),
// PE[t, 2i+1] = cos of the same argument.

inline Mat positional_encoding(int t_frames, int d_model) {
    if (t_frames < 1 || d_model < 1)
        throw Error("positional_encoding: dimensions must be positive");
    Mat pe(t_frames, d_model);
    for (int t = 0; t < t_frames; ++t) {
        for (int i = 0; 2 * i < d_model; ++i) {
            const double arg =
                double(t) / std::pow(10000.0, 2.0 * double(i) / double(d_model));
            pe(t, 2 * i) = std::sin(arg);
            if (2 * i + 1 < d_model) pe(t, 2 * i + 1) = std::cos(arg);
        }
    }
    return pe;
}

namespace detail {

// Sum in ascending value order. The grouping then depends only on the
// multiset of addends, which makes attention bitwise equivariant under
// permutations of the time axis.
inline double stable_sum(std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    double acc = 0.0;
    for (double t : terms) acc += t;
    return acc;
}

// Scalar-loop matrix product. Vectorized kernels can evaluate a row
// differently depending on its packet position, which would break bitwise
// permutation equivariance of the canonical attention ops.
inline Mat plain_matmul(const Mat& a, const Mat& b) {
    Mat out(a.rows(), b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (Eigen::Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
            out(i, j) = acc;
        }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scaled dot-product attention, softmax stabilized by row-max subtraction.
// Sums over the key/value axis run in value-canonical order (see stable_sum).

inline Mat attention(const Mat& q, const Mat& k, const Mat& v) {
    if (q.cols() != k.cols()) throw Error("attention: Q/K width mismatch");
    if (k.rows() != v.rows()) throw Error("attention: K/V length mismatch");
    const double scale = 1.0 / std::sqrt(double(k.cols()));
    const Eigen::Index n = q.rows(), m = k.rows();
    Mat out(n, v.cols());
    std::vector<double> terms;
    for (Eigen::Index r = 0; r < n; ++r) {
        Eigen::RowVectorXd logits(m);
        for (Eigen::Index j = 0; j < m; ++j) {
            double dot = 0.0;
            for (Eigen::Index c = 0; c < q.cols(); ++c) dot += q(r, c) * k(j, c);
            logits(j) = dot * scale;
        }
        const double mx = logits.maxCoeff();
        // Scalar exp per element: vectorized exp kernels differ between packet
        // and tail lanes, which would make the result position dependent.
        Eigen::RowVectorXd e(m);
        for (Eigen::Index j = 0; j < m; ++j) e(j) = std::exp(logits(j) - mx);
        terms.assign(e.data(), e.data() + m);
        const double denom = detail::stable_sum(terms);
        const Eigen::RowVectorXd weights = e / denom;
        for (Eigen::Index c = 0; c < v.cols(); ++c) {
            terms.resize(std::size_t(m));
            for (Eigen::Index j = 0; j < m; ++j)
                terms[std::size_t(j)] = weights(j) * v(j, c);
            out(r, c) = detail::stable_sum(terms);
        }
    }
    return out;
}

struct MultiHeadParams {
    Mat wq, wk, wv, wo;  // each d_model x d_model
    int n_heads = 1;
};

// Heads act on contiguous column slices of XW^Q, XW^K, XW^V; the concatenated
// head outputs are projected by W^O.
inline Mat multi_head(const Mat& x, const MultiHeadParams& p) {
    const Eigen::Index d = p.wq.rows();
    if (x.cols() != d) throw Error("multi_head: input width mismatch");
    if (p.n_heads < 1 || d % p.n_heads != 0)
        throw ConfigError("multi_head: d_model not divisible by head count");
    const Eigen::Index dk = d / p.n_heads;
    const Mat q = detail::plain_matmul(x, p.wq);
    const Mat k = detail::plain_matmul(x, p.wk);
    const Mat v = detail::plain_matmul(x, p.wv);
    Mat concat(x.rows(), d);
    for (int h = 0; h < p.n_heads; ++h) {
        concat.middleCols(h * dk, dk) =
            attention(q.middleCols(h * dk, dk), k.middleCols(h * dk, dk),
                      v.middleCols(h * dk, dk));
    }
    return detail::plain_matmul(concat, p.wo);
}

// ---------------------------------------------------------------------------
// Encoder parameters. Q/K/V/O projections carry no bias, matching the
// multi-head formulas; the FFN and heads do.

struct EncoderLayerParams {
    Mat wq, wk, wv, wo;
    nn::Linear ffn1, ffn2;
    Vec ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

struct EncoderParams {
    TransformerCfg cfg;
    int input_width = 0;
    int t_frames = 0;
    nn::Linear input_proj;
    std::vector<EncoderLayerParams> layers;
    nn::Linear head;
    Mat pe;

    bool compatible_with(const Sample& s) const {
        return s.features.rows() == t_frames && s.features.cols() == input_width;
    }
};

// Named references to every trainable tensor, in a fixed order shared by the
// optimizer, serialization, and the gradient checks.
struct TensorRef {
    std::string name;
    Mat* mat = nullptr;
    Vec* vec = nullptr;
};

inline std::vector<TensorRef> tensor_refs(EncoderParams& p) {
    std::vector<TensorRef> refs;
    refs.push_back({"input_proj.w", &p.input_proj.w, nullptr});
    refs.push_back({"input_proj.b", nullptr, &p.input_proj.b});
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& lay = p.layers[l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        refs.push_back({pre + "wq", &lay.wq, nullptr});
        refs.push_back({pre + "wk", &lay.wk, nullptr});
        refs.push_back({pre + "wv", &lay.wv, nullptr});
        refs.push_back({pre + "wo", &lay.wo, nullptr});
        refs.push_back({pre + "ffn1.w", &lay.ffn1.w, nullptr});
        refs.push_back({pre + "ffn1.b", nullptr, &lay.ffn1.b});
        refs.push_back({pre + "ffn2.w", &lay.ffn2.w, nullptr});
        refs.push_back({pre + "ffn2.b", nullptr, &lay.ffn2.b});
        refs.push_back({pre + "ln1.gamma", nullptr, &lay.ln1_gamma});
        refs.push_back({pre + "ln1.beta", nullptr, &lay.ln1_beta});
        refs.push_back({pre + "ln2.gamma", nullptr, &lay.ln2_gamma});
        refs.push_back({pre + "ln2.beta", nullptr, &lay.ln2_beta});
    }
    refs.push_back({"head.w", &p.head.w, nullptr});
    refs.push_back({"head.b", nullptr, &p.head.b});
    return refs;
}

inline EncoderParams init_params(const TransformerCfg& cfg, int input_width,
                                 int t_frames) {
    cfg.validate();
    if (input_width < 1 || t_frames < 1)
        throw ConfigError("transformer: bad input shape");
    Rng rng(derive_seed(cfg.seed, "encoder-init"));
    EncoderParams p;
    p.cfg = cfg;
    p.input_width = input_width;
    p.t_frames = t_frames;
    p.input_proj = nn::Linear::init(input_width, cfg.d_model, rng);
    p.layers.resize(std::size_t(cfg.n_layers));
    for (auto& lay : p.layers) {
        lay.wq = nn::glorot(cfg.d_model, cfg.d_model, rng);
        lay.wk = nn::glorot(cfg.d_model, cfg.d_model, rng);
        lay.wv = nn::glorot(cfg.d_model, cfg.d_model, rng);
        lay.wo = nn::glorot(cfg.d_model, cfg.d_model, rng);
        lay.ffn1 = nn::Linear::init(cfg.d_model, cfg.d_ffn, rng);
        lay.ffn2 = nn::Linear::init(cfg.d_ffn, cfg.d_model, rng);
        lay.ln1_gamma = Vec::Ones(cfg.d_model);
        lay.ln1_beta = Vec::Zero(cfg.d_model);
        lay.ln2_gamma = Vec::Ones(cfg.d_model);
        lay.ln2_beta = Vec::Zero(cfg.d_model);
    }
    p.head = nn::Linear::init(cfg.d_model, 2, rng);
    p.pe = positional_encoding(t_frames, cfg.d_model);
    return p;
}

// Zero-valued clone used for gradient accumulation.
inline EncoderParams zeros_like(const EncoderParams& p) {
    EncoderParams g = p;
    for (auto& ref : tensor_refs(g)) {
        if (ref.mat) ref.mat->setZero();
        if (ref.vec) ref.vec->setZero();
    }
    return g;
}

// ---------------------------------------------------------------------------
// Forward/backward internals.

namespace detail {

constexpr double kLnEps = 1e-5;

struct LnCache {
    Mat x_hat;        // normalized rows
    Vec inv_std;      // per row
    Mat x_centered;   // x - mean per row
};

inline Mat layer_norm(const Mat& x, const Vec& gamma, const Vec& beta,
                      LnCache* cache) {
    const Eigen::Index n = x.rows(), d = x.cols();
    Mat out(n, d);
    if (cache) {
        cache->x_hat.resize(n, d);
        cache->inv_std.resize(n);
        cache->x_centered.resize(n, d);
    }
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mean = x.row(r).mean();
        const Eigen::RowVectorXd centered = x.row(r).array() - mean;
        const double var = centered.squaredNorm() / double(d);
        const double inv_std = 1.0 / std::sqrt(var + kLnEps);
        const Eigen::RowVectorXd x_hat = centered * inv_std;
        out.row(r) =
            x_hat.cwiseProduct(gamma.transpose()) + beta.transpose();
        if (cache) {
            cache->x_hat.row(r) = x_hat;
            cache->inv_std(r) = inv_std;
            cache->x_centered.row(r) = centered;
        }
    }
    return out;
}

inline Mat layer_norm_backward(const Mat& dout, const LnCache& c,
                               const Vec& gamma, Vec& dgamma, Vec& dbeta) {
    const Eigen::Index n = dout.rows(), d = dout.cols();
    Mat dx(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
        const Eigen::RowVectorXd dy = dout.row(r);
        dgamma += dy.cwiseProduct(c.x_hat.row(r)).transpose();
        dbeta += dy.transpose();
        const Eigen::RowVectorXd dxhat = dy.cwiseProduct(gamma.transpose());
        const double m1 = dxhat.mean();
        const double m2 = dxhat.cwiseProduct(c.x_hat.row(r)).mean();
        dx.row(r) =
            (dxhat.array() - m1 - c.x_hat.row(r).array() * m2) * c.inv_std(r);
    }
    return dx;
}

struct HeadCache {
    Mat att;  // T x T softmax weights
};

struct LayerCache {
    Mat x_in;
    Mat q, k, v;
    std::vector<HeadCache> heads;
    Mat concat;
    Mat mha_out;
    Mat mha_mask;
    Mat res1;
    LnCache ln1;
    Mat a1;
    Mat ffn_pre;
    Mat ffn_hidden;
    Mat ffn_out;
    Mat ffn_mask;
    Mat res2;
    LnCache ln2;
    Mat out;
};

struct SampleCache {
    Mat h0;
    std::vector<LayerCache> layers;
    Vec pooled;
    Vec logits;
    Vec probs;
    const Mat* x = nullptr;
};

// Fast per-head attention used inside the encoder (plain matmuls).
inline Mat cached_attention(const Mat& q, const Mat& k, const Mat& v,
                            HeadCache& cache) {
    const double scale = 1.0 / std::sqrt(double(k.cols()));
    cache.att = nn::softmax_rows(q * k.transpose() * scale);
    return cache.att * v;
}

inline Vec forward_sample(const EncoderParams& p, const Mat& x, bool train,
                          Rng* drop_rng, SampleCache* cache) {
    const auto& cfg = p.cfg;
    const double drop = train ? cfg.dropout : 0.0;
    Mat h = p.input_proj.forward(x);
    if (cfg.use_positional_encoding) h += p.pe.topRows(h.rows());
    if (cache) {
        cache->x = &x;
        cache->h0 = h;
        cache->layers.resize(p.layers.size());
    }
    const Eigen::Index dk = cfg.d_model / cfg.n_heads;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& lay = p.layers[l];
        LayerCache local;
        LayerCache& lc = cache ? (*cache).layers[l] : local;
        lc.x_in = h;
        lc.q = h * lay.wq;
        lc.k = h * lay.wk;
        lc.v = h * lay.wv;
        lc.heads.resize(std::size_t(cfg.n_heads));
        lc.concat.resize(h.rows(), cfg.d_model);
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            lc.concat.middleCols(hd * dk, dk) = cached_attention(
                lc.q.middleCols(hd * dk, dk), lc.k.middleCols(hd * dk, dk),
                lc.v.middleCols(hd * dk, dk), lc.heads[std::size_t(hd)]);
        }
        lc.mha_out = lc.concat * lay.wo;
        Mat mha_dropped;
        if (drop > 0.0 && drop_rng)
            mha_dropped = nn::dropout_forward(lc.mha_out, drop, *drop_rng, &lc.mha_mask);
        else {
            mha_dropped = lc.mha_out;
            lc.mha_mask = Mat::Ones(lc.mha_out.rows(), lc.mha_out.cols());
        }
        lc.res1 = lc.x_in + mha_dropped;
        lc.a1 = layer_norm(lc.res1, lay.ln1_gamma, lay.ln1_beta, &lc.ln1);

        lc.ffn_pre = lay.ffn1.forward(lc.a1);
        lc.ffn_hidden = nn::act_forward(nn::Act::relu, lc.ffn_pre);
        lc.ffn_out = lay.ffn2.forward(lc.ffn_hidden);
        Mat ffn_dropped;
        if (drop > 0.0 && drop_rng)
            ffn_dropped = nn::dropout_forward(lc.ffn_out, drop, *drop_rng, &lc.ffn_mask);
        else {
            ffn_dropped = lc.ffn_out;
            lc.ffn_mask = Mat::Ones(lc.ffn_out.rows(), lc.ffn_out.cols());
        }
        lc.res2 = lc.a1 + ffn_dropped;
        lc.out = layer_norm(lc.res2, lay.ln2_gamma, lay.ln2_beta, &lc.ln2);
        h = lc.out;
    }
    const Vec pooled = h.colwise().mean().transpose();
    const Vec logits = p.head.w.transpose() * pooled + p.head.b;
    Mat probs_row = nn::softmax_rows(logits.transpose());
    const Vec probs = probs_row.row(0).transpose();
    if (cache) {
        cache->pooled = pooled;
        cache->logits = logits;
        cache->probs = probs;
    }
    return probs;
}

// Backward through one attention head given the cached softmax weights.
inline void attention_backward(const Mat& q, const Mat& k, const Mat& v,
                               const HeadCache& hc, const Mat& dout, Mat& dq,
                               Mat& dk_, Mat& dv) {
    const double scale = 1.0 / std::sqrt(double(k.cols()));
    dv = hc.att.transpose() * dout;
    const Mat datt = dout * v.transpose();
    const Mat dlogits = nn::softmax_backward(hc.att, datt);
    dq = dlogits * k * scale;
    dk_ = dlogits.transpose() * q * scale;
}

inline void backward_sample(const EncoderParams& p, const SampleCache& cache,
                            const Vec& dlogits, EncoderParams& grads) {
    const auto& cfg = p.cfg;
    const Eigen::Index dk = cfg.d_model / cfg.n_heads;

    // Head.
    grads.head.w += cache.pooled * dlogits.transpose();
    grads.head.b += dlogits;
    Vec dpooled = p.head.w * dlogits;

    // Mean pool.
    const Eigen::Index t_rows =
        p.layers.empty() ? cache.h0.rows() : cache.layers.back().out.rows();
    Mat dh = (1.0 / double(t_rows)) *
             (Mat::Ones(t_rows, 1) * dpooled.transpose());

    for (std::size_t l = p.layers.size(); l-- > 0;) {
        const auto& lay = p.layers[l];
        auto& glay = grads.layers[l];
        const auto& lc = cache.layers[l];

        // LN2.
        Mat dres2 = layer_norm_backward(dh, lc.ln2, lay.ln2_gamma,
                                        glay.ln2_gamma, glay.ln2_beta);
        // Residual: res2 = a1 + dropout(ffn_out).
        Mat da1 = dres2;
        Mat dffn_out = dres2.cwiseProduct(lc.ffn_mask);
        // FFN.
        nn::LinearGrad g2;
        g2.zero_like(lay.ffn2);
        Mat dhidden = nn::linear_backward(lay.ffn2, lc.ffn_hidden, dffn_out, g2);
        glay.ffn2.w += g2.w;
        glay.ffn2.b += g2.b;
        Mat dpre = nn::act_backward(nn::Act::relu, lc.ffn_pre, dhidden);
        nn::LinearGrad g1;
        g1.zero_like(lay.ffn1);
        da1 += nn::linear_backward(lay.ffn1, lc.a1, dpre, g1);
        glay.ffn1.w += g1.w;
        glay.ffn1.b += g1.b;

        // LN1.
        Mat dres1 = layer_norm_backward(da1, lc.ln1, lay.ln1_gamma,
                                        glay.ln1_gamma, glay.ln1_beta);
        // Residual: res1 = x_in + dropout(mha_out).
        Mat dx_in = dres1;
        Mat dmha = dres1.cwiseProduct(lc.mha_mask);
        // Output projection.
        glay.wo += lc.concat.transpose() * dmha;
        Mat dconcat = dmha * lay.wo.transpose();
        // Heads.
        Mat dq_full = Mat::Zero(lc.q.rows(), lc.q.cols());
        Mat dk_full = Mat::Zero(lc.k.rows(), lc.k.cols());
        Mat dv_full = Mat::Zero(lc.v.rows(), lc.v.cols());
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            Mat dq, dkh, dv;
            attention_backward(lc.q.middleCols(hd * dk, dk),
                               lc.k.middleCols(hd * dk, dk),
                               lc.v.middleCols(hd * dk, dk),
                               lc.heads[std::size_t(hd)],
                               dconcat.middleCols(hd * dk, dk), dq, dkh, dv);
            dq_full.middleCols(hd * dk, dk) = dq;
            dk_full.middleCols(hd * dk, dk) = dkh;
            dv_full.middleCols(hd * dk, dk) = dv;
        }
        glay.wq += lc.x_in.transpose() * dq_full;
        glay.wk += lc.x_in.transpose() * dk_full;
        glay.wv += lc.x_in.transpose() * dv_full;
        dx_in += dq_full * lay.wq.transpose();
        dx_in += dk_full * lay.wk.transpose();
        dx_in += dv_full * lay.wv.transpose();
        dh = dx_in;
    }

    // Input projection (positional encoding is a constant).
    nn::LinearGrad gin;
    gin.zero_like(p.input_proj);
    nn::linear_backward(p.input_proj, *cache.x, dh, gin);
    grads.input_proj.w += gin.w;
    grads.input_proj.b += gin.b;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Batched forward: one row of class probabilities per sample.

inline Mat encoder_forward(const std::vector<const Mat*>& batch,
                           const EncoderParams& p, bool train_mode = false,
                           Rng* drop_rng = nullptr) {
    Mat out(Eigen::Index(batch.size()), 2);
    for (std::size_t i = 0; i < batch.size(); ++i)
        out.row(Eigen::Index(i)) =
            detail::forward_sample(p, *batch[i], train_mode, drop_rng, nullptr)
                .transpose();
    return out;
}

// Mean cross-entropy and accumulated gradients over a batch; shared by the
// trainer and the finite-difference checks.
inline double batch_loss_and_grads(const EncoderParams& p,
                                   const std::vector<const Mat*>& batch,
                                   const std::vector<int>& labels,
                                   EncoderParams* grads, bool train_mode,
                                   Rng* drop_rng) {
    double loss = 0.0;
    const double inv_b = 1.0 / double(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        detail::SampleCache cache;
        const Vec probs =
            detail::forward_sample(p, *batch[i], train_mode, drop_rng, &cache);
        const int y = labels[i];
        loss -= std::log(std::max(probs(y), 1e-12));
        if (grads) {
            Vec dlogits = probs;
            dlogits(y) -= 1.0;
            dlogits *= inv_b;
            detail::backward_sample(p, cache, dlogits, *grads);
        }
    }
    return loss * inv_b;
}

struct TrainHistory {
    std::vector<double> train_loss;
    std::vector<double> val_acc;
    double final_loss = 0.0;
};

struct FreezeMask {
    // Tensor-name prefixes excluded from updates.
    std::vector<std::string> frozen_prefixes;

    bool is_frozen(const std::string& name) const {
        for (const auto& pre : frozen_prefixes)
            if (name.rfind(pre, 0) == 0) return true;
        return false;
    }
};

// Adam over all unfrozen tensors. Deterministic for a fixed seed.
inline TrainHistory train_loop(EncoderParams& p, const Dataset& train_ds,
                               const TransformerCfg& cfg,
                               const Dataset* val_ds = nullptr,
                               const FreezeMask* freeze = nullptr,
                               double lr_override = -1.0) {
    if (train_ds.samples.empty()) throw Error("train: empty dataset");
    for (const auto& s : train_ds.samples) {
        if (s.label == Label::unlabeled)
            throw Error("train: dataset must be fully labeled");
        if (!p.compatible_with(s)) throw Error("train: sample shape mismatch");
    }
    TrainHistory hist;
    auto refs = tensor_refs(p);
    std::vector<nn::AdamBuf> bufs(refs.size());
    nn::AdamCfg adam{lr_override > 0.0 ? lr_override : cfg.lr, 0.9, 0.999, 1e-8};
    long step = 0;

    Rng order_rng(derive_seed(cfg.seed, "train-order"));
    Rng drop_rng(derive_seed(cfg.seed, "train-dropout"));

    std::vector<std::size_t> idx(train_ds.samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        order_rng.shuffle(idx);
        double epoch_loss = 0.0;
        long n_batches = 0;
        for (std::size_t start = 0; start < idx.size();
             start += std::size_t(cfg.batch)) {
            const std::size_t end =
                std::min(idx.size(), start + std::size_t(cfg.batch));
            std::vector<const Mat*> batch;
            std::vector<int> labels;
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(&train_ds.samples[idx[i]].features);
                labels.push_back(int(train_ds.samples[idx[i]].label));
            }
            EncoderParams grads = zeros_like(p);
            const double loss =
                batch_loss_and_grads(p, batch, labels, &grads, true, &drop_rng);
            if (!std::isfinite(loss))
                throw TrainingDiverged("transformer loss non-finite",
                                       long(epoch));
            epoch_loss += loss;
            ++n_batches;
            ++step;
            auto grefs = tensor_refs(grads);
            for (std::size_t t = 0; t < refs.size(); ++t) {
                if (freeze && freeze->is_frozen(refs[t].name)) continue;
                if (refs[t].mat)
                    nn::adam_step(*refs[t].mat, *grefs[t].mat, bufs[t], step, adam);
                else
                    nn::adam_step(*refs[t].vec, *grefs[t].vec, bufs[t], step, adam);
            }
        }
        hist.train_loss.push_back(n_batches ? epoch_loss / double(n_batches) : 0.0);
        if (val_ds && !val_ds->samples.empty()) {
            long correct = 0;
            for (const auto& s : val_ds->samples) {
                const Vec probs =
                    detail::forward_sample(p, s.features, false, nullptr, nullptr);
                const int pred = probs(1) > probs(0) ? 1 : 0;
                correct += pred == int(s.label);
            }
            hist.val_acc.push_back(double(correct) /
                                   double(val_ds->samples.size()));
        }
    }
    hist.final_loss = hist.train_loss.empty() ? 0.0 : hist.train_loss.back();
    return hist;
}

inline std::pair<EncoderParams, TrainHistory> train(const Dataset& train_ds,
                                                    const TransformerCfg& cfg,
                                                    const Dataset* val_ds = nullptr) {
    cfg.validate();
    if (train_ds.samples.empty()) throw Error("train: empty dataset");
    EncoderParams p = init_params(cfg, train_ds.width(), train_ds.t_frames());
    TrainHistory hist = train_loop(p, train_ds, cfg, val_ds);
    return {std::move(p), std::move(hist)};
}

// ---------------------------------------------------------------------------
// Inference. An exact probability tie resolves to unstable.

inline std::pair<Label, double> predict(const EncoderParams& p, const Sample& s) {
    if (!p.compatible_with(s))
        throw Error("predict: sample shape " + std::to_string(s.features.rows()) +
                    "x" + std::to_string(s.features.cols()) + ", expected " +
                    std::to_string(p.t_frames) + "x" +
                    std::to_string(p.input_width));
    const Vec probs = detail::forward_sample(p, s.features, false, nullptr, nullptr);
    if (probs(1) > probs(0)) return {Label::stable, probs(1)};
    return {Label::unstable, probs(0)};
}

// Stable-class probability, used for ranking metrics.
inline double stable_probability(const EncoderParams& p, const Sample& s) {
    const Vec probs = detail::forward_sample(p, s.features, false, nullptr, nullptr);
    return probs(1);
}

}  // namespace stvsa::stability_model
