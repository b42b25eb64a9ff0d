#pragma once

// Experiment recipes that reproduce the evaluation tables and the cross-fault
// accuracy figure on surrogate data. Each recipe emits a CSV (single header
// comment marking the data as directional) plus a bar-chart SVG.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "stvsa/pipeline.hpp"

namespace stvsa::tables {

namespace fs = std::filesystem;
using pipeline::Pipeline;

constexpr const char* kSurrogateNote =
    "# surrogate data - directional comparison only\n";

// ---------------------------------------------------------------------------
// Minimal grouped bar chart.

inline std::string svg_bar_chart(const std::string& title,
                                 const std::vector<std::string>& groups,
                                 const std::vector<std::string>& series,
                                 const std::vector<std::vector<double>>& values) {
    const int w = 640, h = 360, margin = 50;
    const int plot_w = w - 2 * margin, plot_h = h - 2 * margin;
    double vmax = 0.0;
    for (const auto& row : values)
        for (double v : row) vmax = std::max(vmax, v);
    if (vmax <= 0.0) vmax = 1.0;
    vmax *= 1.1;

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
           std::to_string(w) + "\" height=\"" + std::to_string(h) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"" + std::to_string(w / 2) +
           "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" + title +
           "</text>\n";
    static const char* palette[] = {"#4878d0", "#ee854a", "#6acc64",
                                    "#d65f5f", "#956cb4", "#8c613c"};
    const std::size_t n_groups = groups.size();
    const std::size_t n_series = series.size();
    const double group_w = double(plot_w) / double(n_groups);
    const double bar_w = group_w / double(n_series + 1);
    for (std::size_t g = 0; g < n_groups; ++g) {
        for (std::size_t s = 0; s < n_series; ++s) {
            const double v = values[s][g];
            const double bh = v / vmax * plot_h;
            const double x = margin + double(g) * group_w +
                             (double(s) + 0.5) * bar_w;
            const double y = double(h - margin) - bh;
            svg += "<rect x=\"" + format_double(x, 1) + "\" y=\"" +
                   format_double(y, 1) + "\" width=\"" +
                   format_double(bar_w * 0.9, 1) + "\" height=\"" +
                   format_double(bh, 1) + "\" fill=\"" +
                   palette[s % 6] + "\"/>\n";
        }
        svg += "<text x=\"" +
               format_double(margin + (double(g) + 0.5) * group_w, 1) +
               "\" y=\"" + std::to_string(h - margin + 18) +
               "\" text-anchor=\"middle\" font-size=\"11\">" + groups[g] +
               "</text>\n";
    }
    for (std::size_t s = 0; s < n_series; ++s) {
        const int lx = margin + int(s) * 120;
        svg += "<rect x=\"" + std::to_string(lx) + "\" y=\"" +
               std::to_string(h - 16) + "\" width=\"10\" height=\"10\" fill=\"" +
               palette[s % 6] + "\"/>\n";
        svg += "<text x=\"" + std::to_string(lx + 14) + "\" y=\"" +
               std::to_string(h - 7) + "\" font-size=\"11\">" + series[s] +
               "</text>\n";
    }
    svg += "<line x1=\"" + std::to_string(margin) + "\" y1=\"" +
           std::to_string(h - margin) + "\" x2=\"" + std::to_string(w - margin) +
           "\" y2=\"" + std::to_string(h - margin) +
           "\" stroke=\"black\"/>\n</svg>\n";
    return svg;
}

namespace detail {

inline metrics::MetricsReport read_report(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw Error("missing report " + p.string());
    const auto j = nlohmann::json::parse(in);
    metrics::MetricsReport r;
    r.acc = j.at("acc");
    r.auc = j.at("auc");
    r.mcc = j.at("mcc");
    r.f1 = j.at("f1");
    r.n = j.at("n");
    r.domain_tag = j.value("domain_tag", "");
    return r;
}

inline void write_outputs(const fs::path& dir, const std::string& stem,
                          const std::string& csv, const std::string& svg) {
    fs::create_directories(dir);
    std::ofstream(dir / (stem + ".csv")) << csv;
    std::ofstream(dir / (stem + ".svg")) << svg;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Before/after transfer learning on the configured table target.

inline void table_transfer_effect(Pipeline& pl, const fs::path& dir) {
    const auto& d = pl.config().table_target;
    const auto zs = detail::read_report(pl.out() / "reports" / (d + ".zero_shot.json"));
    const auto ft = detail::read_report(pl.out() / "reports" / (d + ".finetuned.json"));
    std::string csv = kSurrogateNote;
    csv += "item,acc,auc,mcc,f1\n";
    csv += "Before TL," + zs.csv_row() + "\n";
    csv += "After TL," + ft.csv_row() + "\n";
    const auto svg = svg_bar_chart(
        "Transfer learning effect (" + d + ")", {"ACC", "AUC", "MCC", "F1"},
        {"Before TL", "After TL"},
        {{zs.acc, zs.auc, zs.mcc, zs.f1}, {ft.acc, ft.auc, ft.mcc, ft.f1}});
    detail::write_outputs(dir, "table_transfer", csv, svg);
}

// ---------------------------------------------------------------------------
// Clustering quality comparison: temporal ensembling vs k-means vs the
// engineering criterion (seed rule on the seeded subset only).

inline void table_labeling_quality(Pipeline& pl, const fs::path& dir) {
    auto ds = pl.build_raw_dataset("SRC", pl.config().otw_s);
    auto te_cfg = pl.config().te;
    te_cfg.seed = derive_seed(pl.config().seed, "table:te");
    labeler::LabelReport te_report;
    labeler::temporal_ensembling_label(ds, te_cfg, &te_report);
    labeler::LabelReport km_report;
    labeler::kmeans_label(ds, 2, derive_seed(pl.config().seed, "table:kmeans"),
                          &km_report);

    // Engineering criterion: silhouette over the seed-labeled subset.
    dataset::Dataset seeded;
    std::vector<int> seed_labels;
    for (const auto& s : ds.samples) {
        if (s.label == dataset::Label::unlabeled) continue;
        seeded.samples.push_back(s);
        seed_labels.push_back(int(s.label));
    }
    double sc_seed = 0.0;
    if (!seeded.samples.empty()) sc_seed = labeler::silhouette(seeded, seed_labels);

    std::string csv = kSurrogateNote;
    csv += "method,sc\n";
    csv += "Temporal ensembling," + format_double(te_report.silhouette, 4) + "\n";
    csv += "K-means," + format_double(km_report.silhouette, 4) + "\n";
    csv += "Engineering criterion," + format_double(sc_seed, 4) + "\n";
    const auto svg = svg_bar_chart(
        "Clustering quality (silhouette)",
        {"Temporal ensembling", "K-means", "Engineering criterion"}, {"SC"},
        {{te_report.silhouette, km_report.silhouette, sc_seed}});
    detail::write_outputs(dir, "table_labeling", csv, svg);
}

// ---------------------------------------------------------------------------
// Before/after data augmentation on a deliberately reduced target train set.

inline void table_augmentation_effect(Pipeline& pl, const fs::path& dir) {
    const auto& cfg = pl.config();
    auto [train, test] = pl.load_domain_split(cfg.table_target);
    // Reduce the training set, stratified by keeping every k-th sample.
    dataset::Dataset reduced;
    reduced.domain_tag = train.domain_tag;
    reduced.norm = train.norm;
    const auto stride =
        std::max<std::size_t>(1, std::size_t(1.0 / cfg.reduced_train_frac));
    for (std::size_t i = 0; i < train.samples.size(); i += stride)
        reduced.samples.push_back(train.samples[i]);

    auto model_cfg = cfg.model;
    model_cfg.seed = derive_seed(cfg.seed, "table:da-before");
    auto [before_params, before_hist] = stability_model::train(reduced, model_cfg);
    const auto before = transfer::evaluate(before_params, test);

    auto gan_cfg = cfg.gan;
    gan_cfg.seed = derive_seed(cfg.seed, "table:da-gan");
    const auto gp = augment::train_lsgan(reduced, gan_cfg);
    const auto aug = augment::augment_dataset(
        reduced, long(reduced.samples.size()) * 4, gp, gan_cfg.seed);
    model_cfg.seed = derive_seed(cfg.seed, "table:da-after");
    auto [after_params, after_hist] = stability_model::train(aug, model_cfg);
    const auto after = transfer::evaluate(after_params, test);

    std::string csv = kSurrogateNote;
    csv += "item,acc,auc,mcc,f1\n";
    csv += "Before DA," + before.csv_row() + "\n";
    csv += "After DA," + after.csv_row() + "\n";
    const auto svg = svg_bar_chart(
        "Augmentation effect (" + cfg.table_target + ")",
        {"ACC", "AUC", "MCC", "F1"}, {"Before DA", "After DA"},
        {{before.acc, before.auc, before.mcc, before.f1},
         {after.acc, after.auc, after.mcc, after.f1}});
    detail::write_outputs(dir, "table_augmentation", csv, svg);
}

// ---------------------------------------------------------------------------
// Noise robustness: evaluate the fine-tuned target model on test windows cut
// from noisy trajectories.

inline void table_noise_robustness(Pipeline& pl, const fs::path& dir) {
    const auto& cfg = pl.config();
    const auto& domain = cfg.table_target;
    const auto bundle = weights_io::load_model(
        (pl.out() / "models" / (domain + ".bin")).string());

    // Test-set membership comes from the shared split of the labeled dataset.
    auto labeled = dataset::load((pl.out() / "data" / (domain + ".ndjson")).string());
    auto [train, test] =
        dataset::split(labeled, cfg.split_frac, derive_seed(cfg.seed, "split"));
    std::vector<std::string> test_ids;
    for (const auto& s : test.samples) test_ids.push_back(s.meta.scenario_id);
    std::sort(test_ids.begin(), test_ids.end());

    std::string csv = kSurrogateNote;
    csv += "snr_db,acc,auc,mcc,f1\n";
    std::vector<std::string> groups;
    std::vector<double> accs;
    std::vector<double> snrs = {kInfSnrDb};
    for (double s : cfg.snr_list) snrs.push_back(s);
    for (double snr : snrs) {
        auto noisy = pl.build_raw_dataset(domain, cfg.otw_s, snr);
        dataset::Dataset noisy_test;
        noisy_test.domain_tag = noisy.domain_tag;
        for (auto& s : noisy.samples) {
            if (std::binary_search(test_ids.begin(), test_ids.end(),
                                   s.meta.scenario_id))
                noisy_test.samples.push_back(s);
        }
        // Evaluation labels come from the labeled dataset split; both lists
        // share the scenario enumeration order.
        if (noisy_test.samples.size() != test.samples.size())
            throw Error("noise table: test membership mismatch");
        for (std::size_t i = 0; i < test.samples.size(); ++i) {
            if (noisy_test.samples[i].meta.scenario_id !=
                test.samples[i].meta.scenario_id)
                throw Error("noise table: scenario order mismatch");
            noisy_test.samples[i].label = test.samples[i].label;
        }
        dataset::NormParams np{bundle.norm.mins, bundle.norm.maxs};
        const auto prepared = dataset::apply_normalizer(noisy_test, np);
        const auto report = transfer::evaluate(bundle.params, prepared);
        const std::string row_name =
            std::isfinite(snr) ? format_double(snr, 0) : "Noise-free";
        csv += row_name + "," + report.csv_row() + "\n";
        groups.push_back(row_name);
        accs.push_back(report.acc);
    }
    const auto svg = svg_bar_chart("Noise robustness (" + domain + ")", groups,
                                   {"ACC"}, {accs});
    detail::write_outputs(dir, "table_noise", csv, svg);
}

// ---------------------------------------------------------------------------
// Observation-window sweep on the source domain.

inline void table_otw_sweep(Pipeline& pl, const fs::path& dir) {
    const auto& cfg = pl.config();
    std::string csv = kSurrogateNote;
    csv += "otw_s,acc,auc,mcc,f1\n";
    std::vector<std::string> groups;
    std::vector<double> accs;
    for (double otw : cfg.otw_list) {
        auto raw = pl.build_raw_dataset("SRC", otw);
        auto te_cfg = cfg.te;
        te_cfg.seed = derive_seed(cfg.seed, "table:otw-label");
        const auto labeled = labeler::temporal_ensembling_label(raw, te_cfg);
        auto [train, test] = dataset::split(labeled, cfg.split_frac,
                                            derive_seed(cfg.seed, "split"));
        const auto norm = dataset::fit_normalizer(train);
        const auto train_n = dataset::apply_normalizer(train, norm);
        const auto test_n = dataset::apply_normalizer(test, norm);
        auto model_cfg = cfg.model;
        model_cfg.seed = derive_seed(cfg.seed, "table:otw-train");
        auto [params, hist] = stability_model::train(train_n, model_cfg);
        const auto report = transfer::evaluate(params, test_n);
        csv += format_double(otw, 2) + "," + report.csv_row() + "\n";
        groups.push_back(format_double(otw, 2));
        accs.push_back(report.acc);
    }
    const auto svg =
        svg_bar_chart("Observation window sweep", groups, {"ACC"}, {accs});
    detail::write_outputs(dir, "table_otw", csv, svg);
}

// ---------------------------------------------------------------------------
// Cross-fault accuracy matrix over all target domains.

inline void figure_cross_fault(Pipeline& pl, const fs::path& dir) {
    const auto& cfg = pl.config();
    const auto source = weights_io::load_model(
        (pl.out() / "models" / "source.bin").string());
    std::vector<transfer::DomainData> domains;
    for (const auto& d : cfg.target_domains) {
        auto [train, test] = pl.load_domain_split(d);
        domains.push_back({d, std::move(train), std::move(test)});
    }
    auto tcfg = cfg.transfer_cfg;
    tcfg.seed = derive_seed(cfg.seed, "table:fig6");
    const auto report = transfer::cross_fault_matrix(source.params, domains, tcfg);

    std::string csv = kSurrogateNote;
    csv += report.to_csv();
    std::vector<std::vector<double>> values(domains.size());
    std::vector<std::string> series;
    for (std::size_t i = 0; i < domains.size(); ++i) {
        series.push_back("model " + report.domains[i]);
        for (std::size_t j = 0; j < domains.size(); ++j)
            values[i].push_back(report.acc(Eigen::Index(i), Eigen::Index(j)));
    }
    const auto svg = svg_bar_chart("Cross-fault accuracy", report.domains,
                                   series, values);
    detail::write_outputs(dir, "fig_cross_fault", csv, svg);
    std::ofstream(dir / "fig_cross_fault.json") << report.to_json().dump(2) << '\n';
}

// ---------------------------------------------------------------------------

inline void reproduce_table(Pipeline& pl, const std::string& table_id,
                            const fs::path& dir) {
    if (table_id == "IV")
        table_transfer_effect(pl, dir);
    else if (table_id == "V")
        table_labeling_quality(pl, dir);
    else if (table_id == "VI")
        table_augmentation_effect(pl, dir);
    else if (table_id == "VII")
        table_noise_robustness(pl, dir);
    else if (table_id == "IX")
        table_otw_sweep(pl, dir);
    else if (table_id == "fig6")
        figure_cross_fault(pl, dir);
    else
        throw ConfigError("unknown table id: " + table_id +
                          " (expected IV, V, VI, VII, IX, or fig6)");
}

}  // namespace stvsa::tables
