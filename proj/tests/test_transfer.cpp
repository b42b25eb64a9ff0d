#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "stvsa/transfer.hpp"
#include "stvsa/weights_io.hpp"

using namespace stvsa;
using namespace stvsa::transfer;
using dataset::Dataset;
using dataset::Label;
using dataset::Sample;
using stability_model::TransformerCfg;

namespace {

Dataset shifted_sequences(int n_per_class, double offset, std::uint64_t seed,
                          int t = 4, int w = 3) {
    Dataset ds;
    Rng rng(seed);
    for (int cls = 0; cls < 2; ++cls) {
        for (int i = 0; i < n_per_class; ++i) {
            Sample s;
            s.features = Eigen::MatrixXd(t, w);
            const double level = (cls == 0 ? 0.3 : 0.7) + offset;
            for (int r = 0; r < t; ++r)
                for (int c = 0; c < w; ++c)
                    s.features(r, c) = level + 0.04 * rng.normal();
            s.label = cls == 0 ? Label::unstable : Label::stable;
            s.meta.seed_rule = s.label;
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

TransformerCfg tiny_cfg() {
    TransformerCfg cfg;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.d_ffn = 16;
    cfg.dropout = 0.1;
    cfg.lr = 1e-3;
    cfg.batch = 16;
    cfg.epochs = 25;
    cfg.seed = 7;
    return cfg;
}

bool params_equal(stability_model::EncoderParams& a,
                  stability_model::EncoderParams& b,
                  const std::string& prefix = "") {
    auto ra = stability_model::tensor_refs(a);
    auto rb = stability_model::tensor_refs(b);
    for (std::size_t i = 0; i < ra.size(); ++i) {
        if (!prefix.empty() && ra[i].name.rfind(prefix, 0) != 0) continue;
        if (ra[i].mat) {
            if (!((ra[i].mat->array() == rb[i].mat->array()).all())) return false;
        } else {
            if (!((ra[i].vec->array() == rb[i].vec->array()).all())) return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("pretrain reaches high accuracy and is deterministic") {
    auto train_ds = shifted_sequences(40, 0.0, 1);
    auto test_ds = shifted_sequences(10, 0.0, 2);
    auto [params, report] = pretrain(train_ds, test_ds, tiny_cfg());
    REQUIRE(report.acc >= 0.9);

    SECTION("empty test set is an error") {
        Dataset empty;
        REQUIRE_THROWS(pretrain(train_ds, empty, tiny_cfg()));
    }
    SECTION("same seed reproduces the report") {
        auto [p2, r2] = pretrain(train_ds, test_ds, tiny_cfg());
        REQUIRE(r2.acc == report.acc);
        REQUIRE(r2.cm.tp == report.cm.tp);
        REQUIRE(r2.auc == report.auc);
    }
    SECTION("zero-shot on the source test set equals the pretrain report") {
        auto zs = zero_shot_eval(params, test_ds);
        REQUIRE(zs.acc == report.acc);
        REQUIRE(zs.cm.tp == report.cm.tp);
        REQUIRE(zs.cm.tn == report.cm.tn);
        REQUIRE(zs.auc == report.auc);
    }
    SECTION("single-sample test set produces a well-formed report") {
        Dataset one;
        one.samples.push_back(test_ds.samples.front());
        auto r = zero_shot_eval(params, one);
        REQUIRE(r.n == 1);
        REQUIRE((r.acc == 0.0 || r.acc == 1.0));
    }
}

TEST_CASE("fine-tune contracts") {
    auto source = shifted_sequences(40, 0.0, 3);
    auto target = shifted_sequences(20, 0.15, 4);
    auto cfg = tiny_cfg();
    auto [params, report] = pretrain(source, shifted_sequences(10, 0.0, 5), cfg);

    SECTION("zero epochs returns the input parameters bitwise") {
        TransferCfg tcfg;
        tcfg.epochs = 0;
        auto tuned = fine_tune(params, target, tcfg);
        REQUIRE(params_equal(tuned, params));
    }
    SECTION("freeze-all-but-head keeps encoder tensors bitwise stable") {
        TransferCfg tcfg;
        tcfg.epochs = 5;
        tcfg.policy = FreezePolicy::freeze_all_but_head;
        auto tuned = fine_tune(params, target, tcfg);
        REQUIRE(params_equal(tuned, params, "layer"));
        REQUIRE(params_equal(tuned, params, "input_proj"));
        REQUIRE(!params_equal(tuned, params, "head"));
    }
    SECTION("freeze-encoder keeps only the attention layers frozen") {
        TransferCfg tcfg;
        tcfg.epochs = 5;
        tcfg.policy = FreezePolicy::freeze_encoder;
        auto tuned = fine_tune(params, target, tcfg);
        REQUIRE(params_equal(tuned, params, "layer"));
        REQUIRE(!params_equal(tuned, params, "input_proj"));
    }
    SECTION("full fine-tune moves encoder weights") {
        TransferCfg tcfg;
        tcfg.epochs = 5;
        auto tuned = fine_tune(params, target, tcfg);
        REQUIRE(!params_equal(tuned, params, "layer"));
    }
}

TEST_CASE("cross-fault matrix") {
    auto source = shifted_sequences(40, 0.0, 6);
    auto cfg = tiny_cfg();
    auto [params, report] = pretrain(source, shifted_sequences(10, 0.0, 7), cfg);

    TransferCfg tcfg;
    tcfg.epochs = 5;
    tcfg.seed = 9;

    SECTION("single domain gives a 1x1 matrix equal to its own-domain eval") {
        std::vector<DomainData> domains;
        domains.push_back({"F-1", shifted_sequences(20, 0.1, 8),
                           shifted_sequences(10, 0.1, 9)});
        auto r = cross_fault_matrix(params, domains, tcfg);
        REQUIRE(r.domains.size() == 1);
        TransferCfg per = tcfg;
        per.seed = derive_seed(tcfg.seed, "F-1");
        auto tuned = fine_tune(params, domains[0].train, per);
        auto own = evaluate(tuned, domains[0].test);
        REQUIRE(r.acc(0, 0) == own.acc);
    }
    SECTION("rerun with the same seeds is identical") {
        std::vector<DomainData> domains;
        domains.push_back({"F-1", shifted_sequences(20, 0.1, 8),
                           shifted_sequences(10, 0.1, 9)});
        domains.push_back({"F-2", shifted_sequences(20, 0.2, 10),
                           shifted_sequences(10, 0.2, 11)});
        auto a = cross_fault_matrix(params, domains, tcfg);
        auto b = cross_fault_matrix(params, domains, tcfg);
        REQUIRE((a.acc.array() == b.acc.array()).all());
        REQUIRE(a.to_csv() == b.to_csv());
    }
}

TEST_CASE("model bundle round-trips through the weight file") {
    namespace fs = std::filesystem;
    auto source = shifted_sequences(20, 0.0, 12);
    auto cfg = tiny_cfg();
    cfg.epochs = 3;
    auto [params, hist] = stability_model::train(source, cfg);

    weights_io::ModelBundle bundle;
    bundle.params = params;
    bundle.norm.mins = {0.0, 0.1, 0.2};
    bundle.norm.maxs = {1.0, 1.1, 1.2};
    bundle.domain_tag = "source";

    const auto path = fs::temp_directory_path() / "stvsa_model.bin";
    weights_io::save_model(bundle, path.string());
    auto loaded = weights_io::load_model(path.string());
    REQUIRE(loaded.domain_tag == "source");
    REQUIRE(loaded.norm.mins == bundle.norm.mins);
    REQUIRE(loaded.params.cfg.d_model == cfg.d_model);
    REQUIRE(params_equal(loaded.params, bundle.params));

    // Predictions are bit-identical through the round trip.
    const auto& s = source.samples.front();
    REQUIRE(stability_model::stable_probability(loaded.params, s) ==
            stability_model::stable_probability(bundle.params, s));
    fs::remove(path);
}

TEST_CASE("gan params round-trip through the weight file") {
    namespace fs = std::filesystem;
    Rng rng(3);
    augment::GanParams gp;
    gp.noise_dim = 4;
    gp.n_classes = 2;
    gp.t_frames = 2;
    gp.width = 3;
    gp.generator = nn::Mlp::init({6, 8, 6}, {nn::Act::relu, nn::Act::sigmoid}, rng);
    gp.discriminator = nn::Mlp::init({8, 8, 1}, {nn::Act::leaky_relu, nn::Act::none}, rng);

    const auto path = fs::temp_directory_path() / "stvsa_gan.bin";
    weights_io::save_gan(gp, path.string());
    auto loaded = weights_io::load_gan(path.string());
    REQUIRE(loaded.noise_dim == 4);
    REQUIRE(loaded.generator.layers.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        REQUIRE((loaded.generator.layers[i].w.array() ==
                 gp.generator.layers[i].w.array())
                    .all());
        REQUIRE(loaded.generator.acts[i] == gp.generator.acts[i]);
    }
    auto sample = augment::generate(loaded, dataset::Label::stable, 3, 5);
    auto sample2 = augment::generate(gp, dataset::Label::stable, 3, 5);
    REQUIRE((sample[0].features.array() == sample2[0].features.array()).all());
    fs::remove(path);
}
