#pragma once

// Transfer workflow: pretrain on the source domain, fine-tune per target
// domain under a freezing policy, and evaluate cross-fault adaptability.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvsa/common.hpp"
#include "stvsa/dataset.hpp"
#include "stvsa/metrics.hpp"
#include "stvsa/stability_model.hpp"

namespace stvsa::transfer {

using dataset::Dataset;
using dataset::Label;
using metrics::MetricsReport;
using stability_model::EncoderParams;
using stability_model::TransformerCfg;

enum class FreezePolicy { all, freeze_encoder, freeze_all_but_head };

inline FreezePolicy policy_from_name(const std::string& s) {
    if (s == "all" || s == "none") return FreezePolicy::all;
    if (s == "freeze-encoder") return FreezePolicy::freeze_encoder;
    if (s == "freeze-all-but-head") return FreezePolicy::freeze_all_but_head;
    throw ConfigError("unknown freezing policy: " + s);
}

struct TransferCfg {
    double lr_scale = 0.1;  // fine-tune lr = lr_scale * pretrain lr
    int epochs = 50;
    FreezePolicy policy = FreezePolicy::all;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 0) throw ConfigError("transfer: negative epochs");
        if (lr_scale <= 0.0) throw ConfigError("transfer: lr_scale must be > 0");
    }

    static TransferCfg from_json(const nlohmann::json& j) {
        TransferCfg c;
        if (j.contains("lr_scale")) c.lr_scale = j.at("lr_scale");
        if (j.contains("epochs")) c.epochs = j.at("epochs");
        if (j.contains("policy")) c.policy = policy_from_name(j.at("policy"));
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

// ---------------------------------------------------------------------------
// Single evaluation path shared by every consumer: zero-shot, post-fine-tune,
// and the cross-fault matrix all report through here.

inline MetricsReport evaluate(const EncoderParams& params, const Dataset& test,
                              const std::string& tag = "") {
    if (test.samples.empty()) throw Error("evaluate: empty test set");
    std::vector<int> preds, truth;
    std::vector<double> scores;
    for (const auto& s : test.samples) {
        if (s.label == Label::unlabeled)
            throw Error("evaluate: test set must be fully labeled");
        const double p_stable = stability_model::stable_probability(params, s);
        preds.push_back(p_stable > 0.5 ? 1 : 0);
        scores.push_back(p_stable);
        truth.push_back(int(s.label));
    }
    return metrics::report_from(preds, scores, truth,
                                tag.empty() ? test.domain_tag : tag);
}

inline std::pair<EncoderParams, MetricsReport> pretrain(
    const Dataset& source_train, const Dataset& source_test,
    const TransformerCfg& cfg) {
    if (source_test.samples.empty()) throw Error("pretrain: empty test set");
    auto [params, hist] = stability_model::train(source_train, cfg);
    auto report = evaluate(params, source_test);
    return {std::move(params), std::move(report)};
}

inline MetricsReport zero_shot_eval(const EncoderParams& params,
                                    const Dataset& target_test) {
    return evaluate(params, target_test);
}

// ---------------------------------------------------------------------------
// Fine-tuning continues from the given parameters (never re-initializes) at a
// reduced learning rate. Frozen tensors are excluded from the optimizer and
// therefore stay bitwise identical.

inline EncoderParams fine_tune(const EncoderParams& params,
                               const Dataset& target_train,
                               const TransferCfg& tcfg) {
    tcfg.validate();
    EncoderParams tuned = params;
    if (tcfg.epochs == 0) return tuned;

    TransformerCfg run_cfg = params.cfg;
    run_cfg.epochs = tcfg.epochs;
    run_cfg.seed = derive_seed(tcfg.seed, "fine-tune");

    stability_model::FreezeMask mask;
    switch (tcfg.policy) {
        case FreezePolicy::all: break;
        case FreezePolicy::freeze_encoder:
            mask.frozen_prefixes = {"layer"};
            break;
        case FreezePolicy::freeze_all_but_head:
            mask.frozen_prefixes = {"layer", "input_proj"};
            break;
    }
    stability_model::train_loop(tuned, target_train, run_cfg, nullptr, &mask,
                                params.cfg.lr * tcfg.lr_scale);
    return tuned;
}

// ---------------------------------------------------------------------------
// Cross-fault adaptability: fine-tune one model per domain from the shared
// pretrained parameters and evaluate every model on every domain.

struct DomainData {
    std::string name;
    Dataset train;
    Dataset test;
};

struct CrossFaultReport {
    std::vector<std::string> domains;
    Eigen::MatrixXd acc;  // row: fine-tune domain, col: eval domain
    std::vector<std::vector<MetricsReport>> cells;
    std::vector<MetricsReport> zero_shot;  // pretrained params per domain

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t i = 0; i < domains.size(); ++i) {
            nlohmann::json cols = nlohmann::json::array();
            for (std::size_t j = 0; j < domains.size(); ++j)
                cols.push_back(cells[i][j].to_json());
            rows.push_back(std::move(cols));
        }
        nlohmann::json zs = nlohmann::json::array();
        for (const auto& r : zero_shot) zs.push_back(r.to_json());
        return {{"domains", domains}, {"cells", rows}, {"zero_shot", zs}};
    }

    std::string to_csv() const {
        std::string out = "model_domain";
        for (const auto& d : domains) out += ",acc_" + d;
        out += "\n";
        for (std::size_t i = 0; i < domains.size(); ++i) {
            out += domains[i];
            for (std::size_t j = 0; j < domains.size(); ++j)
                out += "," + format_double(acc(Eigen::Index(i), Eigen::Index(j)), 4);
            out += "\n";
        }
        return out;
    }
};

inline CrossFaultReport cross_fault_matrix(const EncoderParams& pretrained,
                                           const std::vector<DomainData>& domains,
                                           const TransferCfg& tcfg) {
    if (domains.empty()) throw Error("cross_fault_matrix: no domains");
    CrossFaultReport report;
    const auto n = domains.size();
    report.acc.resize(Eigen::Index(n), Eigen::Index(n));
    report.cells.resize(n);
    for (const auto& d : domains) report.domains.push_back(d.name);

    std::vector<EncoderParams> tuned;
    tuned.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        TransferCfg per = tcfg;
        per.seed = derive_seed(tcfg.seed, domains[i].name);
        tuned.push_back(fine_tune(pretrained, domains[i].train, per));
        report.zero_shot.push_back(
            evaluate(pretrained, domains[i].test, domains[i].name));
    }
    for (std::size_t i = 0; i < n; ++i) {
        report.cells[i].resize(n);
        for (std::size_t j = 0; j < n; ++j) {
            report.cells[i][j] =
                evaluate(tuned[i], domains[j].test, domains[j].name);
            report.acc(Eigen::Index(i), Eigen::Index(j)) = report.cells[i][j].acc;
        }
    }
    return report;
}

}  // namespace stvsa::transfer
