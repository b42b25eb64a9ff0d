#pragma once

// Conditional least-squares GAN for class-conditioned sample synthesis. The
// generator and discriminator are small feed-forward networks on flattened
// windows; the one-hot class label is concatenated to the generator noise and
// to the discriminator features.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvsa/common.hpp"
#include "stvsa/dataset.hpp"
#include "stvsa/nn.hpp"

namespace stvsa::augment {

using dataset::Dataset;
using dataset::Label;
using dataset::Sample;
using nn::Mat;
using nn::Vec;

struct LsganCfg {
    int noise_dim = 16;
    std::vector<int> g_hidden = {64, 64};
    std::vector<int> d_hidden = {64, 64};
    double lr = 1e-4;
    int k = 4;           // discriminator steps per generator step
    int batch = 32;
    int epochs = 1000;
    int max_iterations = 3000;
    std::uint64_t seed = 0;

    void validate() const {
        if (k < 1) throw ConfigError("lsgan: k must be >= 1");
        if (noise_dim < 1) throw ConfigError("lsgan: bad noise_dim");
        for (int w : g_hidden)
            if (w < 1) throw ConfigError("lsgan: bad generator width");
        for (int w : d_hidden)
            if (w < 1) throw ConfigError("lsgan: bad discriminator width");
        if (batch < 1 || epochs < 0 || max_iterations < 0)
            throw ConfigError("lsgan: bad training bounds");
    }

    static LsganCfg from_json(const nlohmann::json& j) {
        LsganCfg c;
        if (j.contains("noise_dim")) c.noise_dim = j.at("noise_dim");
        if (j.contains("g_hidden")) c.g_hidden = j.at("g_hidden").get<std::vector<int>>();
        if (j.contains("d_hidden")) c.d_hidden = j.at("d_hidden").get<std::vector<int>>();
        if (j.contains("lr")) c.lr = j.at("lr");
        if (j.contains("k")) c.k = j.at("k");
        if (j.contains("batch")) c.batch = j.at("batch");
        if (j.contains("epochs")) c.epochs = j.at("epochs");
        if (j.contains("max_iterations")) c.max_iterations = j.at("max_iterations");
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

struct GanParams {
    nn::Mlp generator;      // (noise + C one-hot) -> features, sigmoid output
    nn::Mlp discriminator;  // (features + C one-hot) -> scalar score
    int noise_dim = 0;
    int n_classes = 2;
    int t_frames = 0;  // window shape for reconstructing samples
    int width = 0;
};

// ---------------------------------------------------------------------------
// Least-squares adversarial losses.

inline double d_loss(const Vec& d_real, const Vec& d_fake) {
    const double lr = (d_real.array() - 1.0).square().mean();
    const double lf = d_fake.array().square().mean();
    return 0.5 * lr + 0.5 * lf;
}

inline double g_loss(const Vec& d_fake) {
    return 0.5 * (d_fake.array() - 1.0).square().mean();
}

// The plain minimax GAN objective value; kept as a reference formula for
// tests, never trained.
inline double vanilla_gan_objective(const Vec& d_real, const Vec& d_fake) {
    return d_real.array().max(1e-12).log().mean() +
           (1.0 - d_fake.array()).max(1e-12).log().mean();
}

struct TrainLogRow {
    long iteration;
    double d_loss;
    double g_loss;
};

namespace detail {

inline Mat one_hot(const std::vector<int>& labels, int n_classes) {
    Mat oh = Mat::Zero(Eigen::Index(labels.size()), n_classes);
    for (std::size_t i = 0; i < labels.size(); ++i)
        oh(Eigen::Index(i), labels[i]) = 1.0;
    return oh;
}

inline Mat concat_cols(const Mat& a, const Mat& b) {
    Mat out(a.rows(), a.cols() + b.cols());
    out.leftCols(a.cols()) = a;
    out.rightCols(b.cols()) = b;
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Alternating optimization: k discriminator updates per generator update.
// Stops at min(epochs * batches_per_epoch, max_iterations) generator steps.

inline GanParams train_lsgan(const Dataset& ds, const LsganCfg& cfg,
                             std::vector<TrainLogRow>* log = nullptr) {
    cfg.validate();
    if (ds.samples.empty()) throw Error("lsgan: empty dataset");
    const long n_stable = long(ds.count(Label::stable));
    const long n_unstable = long(ds.count(Label::unstable));
    if (n_stable == 0 || n_unstable == 0)
        throw Error("lsgan: both classes must be present");
    if (ds.count(Label::unlabeled) != 0)
        throw Error("lsgan: dataset must be fully labeled");

    const int c = 2;
    const Eigen::Index n = Eigen::Index(ds.samples.size());
    const int t_frames = ds.t_frames();
    const int width = ds.width();
    const int f = t_frames * width;

    Mat x(n, f);
    std::vector<int> y(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& s = ds.samples[std::size_t(i)];
        x.row(i) = dataset::flatten(s.features).transpose();
        y[std::size_t(i)] = int(s.label);
        if (x.row(i).minCoeff() < -1e-9 || x.row(i).maxCoeff() > 1.0 + 1e-9)
            throw Error("lsgan: features must be normalized to [0,1]");
    }

    Rng init_rng(derive_seed(cfg.seed, "gan-init"));
    GanParams gp;
    gp.noise_dim = cfg.noise_dim;
    gp.n_classes = c;
    gp.t_frames = t_frames;
    gp.width = width;
    {
        std::vector<int> widths = {cfg.noise_dim + c};
        std::vector<nn::Act> acts;
        for (int w : cfg.g_hidden) {
            widths.push_back(w);
            acts.push_back(nn::Act::relu);
        }
        widths.push_back(f);
        acts.push_back(nn::Act::sigmoid);
        gp.generator = nn::Mlp::init(widths, acts, init_rng);
    }
    {
        std::vector<int> widths = {f + c};
        std::vector<nn::Act> acts;
        for (int w : cfg.d_hidden) {
            widths.push_back(w);
            acts.push_back(nn::Act::leaky_relu);
        }
        widths.push_back(1);
        acts.push_back(nn::Act::none);
        gp.discriminator = nn::Mlp::init(widths, acts, init_rng);
    }

    const long batches_per_epoch = (long(n) + cfg.batch - 1) / cfg.batch;
    const long total_iters =
        std::min(long(cfg.epochs) * batches_per_epoch, long(cfg.max_iterations));

    nn::MlpAdam g_opt, d_opt;
    nn::AdamCfg adam{cfg.lr, 0.5, 0.999, 1e-8};
    Rng rng(derive_seed(cfg.seed, "gan-train"));

    auto sample_real = [&](Eigen::Index bsz, Mat& xb, std::vector<int>& yb) {
        xb.resize(bsz, f);
        yb.resize(std::size_t(bsz));
        for (Eigen::Index r = 0; r < bsz; ++r) {
            const auto i = rng.uniform_int(0, n - 1);
            xb.row(r) = x.row(i);
            yb[std::size_t(r)] = y[std::size_t(i)];
        }
    };
    auto sample_noise = [&](Eigen::Index bsz, std::vector<int>& yb) {
        Mat z(bsz, cfg.noise_dim);
        yb.resize(std::size_t(bsz));
        for (Eigen::Index r = 0; r < bsz; ++r) {
            for (int d = 0; d < cfg.noise_dim; ++d) z(r, d) = rng.normal();
            // Condition labels drawn from the data label distribution.
            yb[std::size_t(r)] = y[std::size_t(rng.uniform_int(0, n - 1))];
        }
        return z;
    };

    const Eigen::Index bsz = Eigen::Index(std::min<long>(cfg.batch, long(n)));
    for (long iter = 1; iter <= total_iters; ++iter) {
        double last_d = 0.0;
        for (int dk = 0; dk < cfg.k; ++dk) {
            Mat xr;
            std::vector<int> yr, yf;
            sample_real(bsz, xr, yr);
            const Mat zs = sample_noise(bsz, yf);
            const Mat g_in = detail::concat_cols(zs, detail::one_hot(yf, c));
            const Mat x_fake = gp.generator.forward(g_in);

            const Mat d_in_real = detail::concat_cols(xr, detail::one_hot(yr, c));
            const Mat d_in_fake = detail::concat_cols(x_fake, detail::one_hot(yf, c));

            nn::Mlp::Cache cache_r, cache_f;
            const Vec s_real = gp.discriminator.forward(d_in_real, &cache_r).col(0);
            const Vec s_fake = gp.discriminator.forward(d_in_fake, &cache_f).col(0);
            last_d = d_loss(s_real, s_fake);
            if (!std::isfinite(last_d))
                throw TrainingDiverged("lsgan discriminator loss non-finite", iter);

            // d/ds of 0.5*mean((s_r - 1)^2) and 0.5*mean(s_f^2).
            const Mat d_sr = (s_real.array() - 1.0).matrix() / double(bsz);
            const Mat d_sf = s_fake / double(bsz);
            nn::Mlp::Grads dg;
            dg.zero_like(gp.discriminator);
            gp.discriminator.backward(cache_r, d_sr, dg);
            gp.discriminator.backward(cache_f, d_sf, dg);
            d_opt.step(gp.discriminator, dg, adam);
        }

        // Generator step.
        std::vector<int> yf;
        const Mat zs = sample_noise(bsz, yf);
        const Mat oh = detail::one_hot(yf, c);
        const Mat g_in = detail::concat_cols(zs, oh);
        nn::Mlp::Cache cache_g;
        const Mat x_fake = gp.generator.forward(g_in, &cache_g);
        nn::Mlp::Cache cache_d;
        const Vec s_fake =
            gp.discriminator.forward(detail::concat_cols(x_fake, oh), &cache_d).col(0);
        const double lg = g_loss(s_fake);
        if (!std::isfinite(lg))
            throw TrainingDiverged("lsgan generator loss non-finite", iter);

        const Mat d_sf = (s_fake.array() - 1.0).matrix() / double(bsz);
        nn::Mlp::Grads d_dummy;
        d_dummy.zero_like(gp.discriminator);
        const Mat d_d_in = gp.discriminator.backward(cache_d, d_sf, d_dummy);
        // Only the feature part of the discriminator input feeds the generator.
        const Mat d_x_fake = d_d_in.leftCols(f);
        nn::Mlp::Grads gg;
        gg.zero_like(gp.generator);
        gp.generator.backward(cache_g, d_x_fake, gg);
        g_opt.step(gp.generator, gg, adam);

        if (log) log->push_back({iter, last_d, lg});
    }
    return gp;
}

// ---------------------------------------------------------------------------
// Conditional sampling from a trained generator.

inline std::vector<Sample> generate(const GanParams& gp, Label label, long count,
                                    std::uint64_t seed) {
    if (label != Label::stable && label != Label::unstable)
        throw Error("generate: label must be a definite class");
    std::vector<Sample> out;
    if (count == 0) return out;
    Rng rng(derive_seed(seed, "gan-generate"));
    Mat z(count, gp.noise_dim);
    for (Eigen::Index r = 0; r < count; ++r)
        for (int d = 0; d < gp.noise_dim; ++d) z(r, d) = rng.normal();
    std::vector<int> yb(static_cast<std::size_t>(count), int(label));
    const Mat x = gp.generator.forward(
        detail::concat_cols(z, detail::one_hot(yb, gp.n_classes)));
    out.reserve(std::size_t(count));
    for (Eigen::Index r = 0; r < count; ++r) {
        Sample s;
        s.features.resize(gp.t_frames, gp.width);
        Eigen::Index k = 0;
        for (int i = 0; i < gp.t_frames; ++i)
            for (int j = 0; j < gp.width; ++j) s.features(i, j) = x(r, k++);
        s.label = label;
        s.meta.synthetic = true;
        s.meta.scenario_id = "synthetic";
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Expands a dataset to target_size with the two classes balanced to within one
// sample. Real samples pass through untouched.

inline Dataset augment_dataset(const Dataset& ds, long target_size,
                               const GanParams& gp, std::uint64_t seed = 0) {
    const long n = long(ds.samples.size());
    if (target_size < n)
        throw Error("augment_dataset: target_size smaller than dataset");
    const long n_stable = long(ds.count(Label::stable));
    const long n_unstable = long(ds.count(Label::unstable));

    const long t_unstable = target_size / 2;
    const long t_stable = target_size - t_unstable;
    const long budget = target_size - n;
    // Fill each class toward its half within the synthetic budget; a real
    // surplus in one class simply shrinks the other's headroom.
    long gen_stable = std::clamp(t_stable - n_stable, 0L, budget);
    long gen_unstable = std::clamp(t_unstable - n_unstable, 0L, budget - gen_stable);
    const long rem = budget - gen_stable - gen_unstable;
    if (rem > 0) {
        if (n_stable + gen_stable <= n_unstable + gen_unstable)
            gen_stable += rem;
        else
            gen_unstable += rem;
    }

    Dataset out = ds;
    auto stable_new = generate(gp, Label::stable, gen_stable,
                               derive_seed(seed, "aug-stable"));
    auto unstable_new = generate(gp, Label::unstable, gen_unstable,
                                 derive_seed(seed, "aug-unstable"));
    for (auto& s : stable_new) {
        s.meta.topology_id = ds.domain_tag;
        out.samples.push_back(std::move(s));
    }
    for (auto& s : unstable_new) {
        s.meta.topology_id = ds.domain_tag;
        out.samples.push_back(std::move(s));
    }
    return out;
}

}  // namespace stvsa::augment
