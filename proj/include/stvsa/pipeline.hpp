#pragma once

// Three-stage pipeline orchestration: surrogate data generation, offline
// training (labeling, augmentation, pretraining, fine-tuning), and evaluation
// artifacts. Every stage writes a manifest keyed on an input hash so reruns
// with unchanged inputs are skipped.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvsa/augment.hpp"
#include "stvsa/common.hpp"
#include "stvsa/dataset.hpp"
#include "stvsa/dynsim.hpp"
#include "stvsa/labeler.hpp"
#include "stvsa/metrics.hpp"
#include "stvsa/stability_model.hpp"
#include "stvsa/transfer.hpp"
#include "stvsa/weights_io.hpp"

namespace stvsa::pipeline {

namespace fs = std::filesystem;

struct PipelineConfig {
    std::uint64_t seed = 0;
    std::string out_dir;
    double otw_s = 0.12;
    double split_frac = 0.8;
    std::vector<std::string> target_domains = {"F-1", "F-2", "F-3", "F-4", "F-5"};
    std::vector<double> snr_list = {30.0, 40.0, 50.0};
    std::vector<double> otw_list = {0.03, 0.06, 0.09, 0.12};
    dynsim::ScenarioSpec spec;
    dynsim::MotorModelParams motor;
    labeler::TemporalEnsemblingCfg te;
    augment::LsganCfg gan;
    long augment_target = 0;  // 0 disables the augmentation stage
    stability_model::TransformerCfg model;
    transfer::TransferCfg transfer_cfg;
    std::string table_target = "F-1";
    double reduced_train_frac = 0.25;
    int gen_workers = 2;

    void validate() const {
        if (out_dir.empty()) throw ConfigError("config: out_dir is required");
        spec.validate();
        motor.validate();
        te.validate();
        gan.validate();
        model.validate();
        transfer_cfg.validate();
        if (!(otw_s > 0)) throw ConfigError("config: otw_s must be positive");
        if (!(split_frac > 0 && split_frac < 1))
            throw ConfigError("config: split ratio out of range");
        for (const auto& d : target_domains) {
            bool known = false;
            for (const auto& id : dynsim::topology_ids()) known |= id == d;
            if (!known || d == "SRC")
                throw ConfigError("config: bad target domain " + d);
        }
        if (augment_target < 0) throw ConfigError("config: bad augment target");
    }

    nlohmann::json to_json() const {
        return {{"seed", seed},
                {"out_dir", out_dir},
                {"dataset",
                 {{"otw_s", otw_s},
                  {"split_frac", split_frac},
                  {"otw_list", otw_list},
                  {"snr_list", snr_list}}},
                {"dynsim",
                 {{"spec", spec.to_json()},
                  {"motor", motor.to_json()},
                  {"targets", target_domains},
                  {"workers", gen_workers}}},
                {"labeler",
                 {{"alpha", te.alpha},
                  {"epochs", te.epochs},
                  {"ramp_epochs", te.ramp_epochs},
                  {"w_max", te.w_max},
                  {"batch", te.batch},
                  {"lr", te.lr},
                  {"hidden", te.hidden},
                  {"dropout", te.dropout},
                  {"jitter_sigma", te.jitter_sigma}}},
                {"augment",
                 {{"target_size", augment_target},
                  {"noise_dim", gan.noise_dim},
                  {"g_hidden", gan.g_hidden},
                  {"d_hidden", gan.d_hidden},
                  {"lr", gan.lr},
                  {"k", gan.k},
                  {"batch", gan.batch},
                  {"epochs", gan.epochs},
                  {"max_iterations", gan.max_iterations}}},
                {"model", model.to_json()},
                {"transfer",
                 {{"lr_scale", transfer_cfg.lr_scale},
                  {"epochs", transfer_cfg.epochs},
                  {"policy", transfer_cfg.policy == transfer::FreezePolicy::all
                                 ? "all"
                                 : transfer_cfg.policy ==
                                           transfer::FreezePolicy::freeze_encoder
                                       ? "freeze-encoder"
                                       : "freeze-all-but-head"}}},
                {"table",
                 {{"target", table_target},
                  {"reduced_train_frac", reduced_train_frac}}}};
    }

    static PipelineConfig from_json(const nlohmann::json& j) {
        for (const char* section :
             {"seed", "out_dir", "dynsim", "dataset", "labeler", "augment",
              "model", "transfer"})
            if (!j.contains(section))
                throw ConfigError(std::string("config: missing section '") +
                                  section + "'");
        PipelineConfig c;
        c.seed = j.at("seed").get<std::uint64_t>();
        c.out_dir = j.at("out_dir");
        const auto& d = j.at("dataset");
        if (d.contains("otw_s")) c.otw_s = d.at("otw_s");
        if (d.contains("split_frac")) c.split_frac = d.at("split_frac");
        if (d.contains("otw_list")) c.otw_list = d.at("otw_list").get<std::vector<double>>();
        if (d.contains("snr_list")) c.snr_list = d.at("snr_list").get<std::vector<double>>();
        const auto& dyn = j.at("dynsim");
        c.spec = dynsim::ScenarioSpec::from_json(dyn.at("spec"));
        c.motor = dyn.contains("motor")
                      ? dynsim::MotorModelParams::from_json(dyn.at("motor"))
                      : dynsim::MotorModelParams{};
        if (dyn.contains("targets"))
            c.target_domains = dyn.at("targets").get<std::vector<std::string>>();
        if (dyn.contains("workers")) c.gen_workers = dyn.at("workers");
        c.te = labeler::TemporalEnsemblingCfg::from_json(j.at("labeler"));
        c.gan = augment::LsganCfg::from_json(j.at("augment"));
        if (j.at("augment").contains("target_size"))
            c.augment_target = j.at("augment").at("target_size");
        c.model = stability_model::TransformerCfg::from_json(j.at("model"));
        c.transfer_cfg = transfer::TransferCfg::from_json(j.at("transfer"));
        if (j.contains("table")) {
            if (j.at("table").contains("target"))
                c.table_target = j.at("table").at("target");
            if (j.at("table").contains("reduced_train_frac"))
                c.reduced_train_frac = j.at("table").at("reduced_train_frac");
        }
        c.validate();
        return c;
    }
};

inline PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("config: bad json in " + path,
                         e.byte > 0 ? e.byte - 1 : 0);
    }
    // The global seed can be overridden by the environment.
    if (const char* env = std::getenv("STVSA_SEED")) {
        try {
            j["seed"] = std::stoull(env);
        } catch (...) {
            throw ConfigError("STVSA_SEED must be an unsigned integer");
        }
    }
    return PipelineConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Stage bookkeeping.

class Pipeline {
public:
    explicit Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        fs::create_directories(out() / "manifests");
    }

    const PipelineConfig& config() const { return cfg_; }

    std::vector<std::string> all_domains() const {
        std::vector<std::string> ds = {"SRC"};
        for (const auto& t : cfg_.target_domains) ds.push_back(t);
        return ds;
    }

    // Full pipeline in spec order. Returns the list of executed stage names
    // (skipped stages excluded).
    std::vector<std::string> run() {
        std::vector<std::string> executed;
        auto step = [&](const std::string& name, auto&& fn) {
            try {
                if (fn()) executed.push_back(name);
            } catch (const std::exception& e) {
                throw Error("stage '" + name + "' failed: " + e.what());
            }
        };
        step("gen", [&] { return stage_gen(); });
        for (const auto& d : all_domains())
            step("label:" + d, [&] { return stage_label(d); });
        if (cfg_.augment_target > 0)
            for (const auto& d : cfg_.target_domains)
                step("augment:" + d, [&] { return stage_augment(d); });
        step("pretrain", [&] { return stage_pretrain(); });
        for (const auto& d : cfg_.target_domains)
            step("finetune:" + d, [&] { return stage_finetune(d); });
        step("eval", [&] { return stage_eval(); });
        return executed;
    }

    // --- stage: trajectory generation -------------------------------------
    bool stage_gen() {
        const auto hash = stage_hash("gen", {});
        if (stage_done("gen", hash)) return false;
        std::vector<std::string> outputs;
        for (const auto& domain : all_domains()) {
            const auto mp = dynsim::apply_topology_variant(cfg_.motor, domain);
            auto spec = cfg_.spec;
            spec.topology_id = domain;
            spec.seed = derive_seed(cfg_.seed, "gen:" + domain);
            const auto grid = dynsim::build_scenario_grid(spec);
            const auto dir = out() / "traj" / domain;
            fs::create_directories(dir);
            const int workers = std::max(1, cfg_.gen_workers);
            std::vector<std::thread> pool;
            std::atomic<std::size_t> next{0};
            std::atomic<bool> failed{false};
            std::string error_msg;
            std::mutex error_mutex;
            for (int w = 0; w < workers; ++w) {
                pool.emplace_back([&] {
                    for (;;) {
                        const std::size_t i = next.fetch_add(1);
                        if (i >= grid.size() || failed) return;
                        try {
                            const auto traj = dynsim::simulate(grid[i], mp);
                            dynsim::save_trajectory(
                                traj, (dir / traj_name(i)).string());
                        } catch (const std::exception& e) {
                            std::lock_guard<std::mutex> lock(error_mutex);
                            error_msg = e.what();
                            failed = true;
                            return;
                        }
                    }
                });
            }
            for (auto& t : pool) t.join();
            if (failed) throw Error("generation failed: " + error_msg);
            outputs.push_back((dir / "").string());
        }
        write_manifest("gen", hash, outputs);
        return true;
    }

    // --- stage: windowing + seed labels + temporal ensembling -------------
    bool stage_label(const std::string& domain) {
        const auto name = "label:" + domain;
        const auto hash = stage_hash(name, {"gen"});
        if (stage_done(name, hash)) return false;

        dataset::Dataset ds = build_raw_dataset(domain, cfg_.otw_s);
        labeler::LabelReport report;
        auto te = cfg_.te;
        te.seed = derive_seed(cfg_.seed, "label:" + domain);
        const auto labeled = labeler::temporal_ensembling_label(ds, te, &report);

        fs::create_directories(out() / "data");
        const auto data_path = out() / "data" / (domain + ".ndjson");
        dataset::save(labeled, data_path.string());
        const auto report_path = out() / "data" / (domain + ".label_report.json");
        std::ofstream rep(report_path);
        rep << report.to_json().dump(2) << '\n';
        write_manifest(name, hash, {data_path.string(), report_path.string()});
        return true;
    }

    // --- stage: LSGAN augmentation of a target domain's training split ----
    bool stage_augment(const std::string& domain) {
        const auto name = "augment:" + domain;
        const auto hash = stage_hash(name, {"label:" + domain});
        if (stage_done(name, hash)) return false;

        auto [train, test] = load_domain_split(domain);
        auto gan_cfg = cfg_.gan;
        gan_cfg.seed = derive_seed(cfg_.seed, "augment:" + domain);
        std::vector<augment::TrainLogRow> log;
        const auto gp = augment::train_lsgan(train, gan_cfg, &log);
        const auto aug = augment::augment_dataset(
            train, cfg_.augment_target, gp, gan_cfg.seed);

        const auto aug_path = out() / "data" / (domain + ".aug.ndjson");
        dataset::save(aug, aug_path.string());
        const auto gan_path = out() / "models" / ("gan_" + domain + ".bin");
        fs::create_directories(out() / "models");
        weights_io::save_gan(gp, gan_path.string());
        const auto log_path = out() / "data" / (domain + ".gan_log.csv");
        std::ofstream lout(log_path);
        lout << "iteration,d_loss,g_loss\n";
        for (const auto& row : log)
            lout << row.iteration << ',' << format_sci(row.d_loss, 9) << ','
                 << format_sci(row.g_loss, 9) << '\n';
        write_manifest(name, hash,
                       {aug_path.string(), gan_path.string(), log_path.string()});
        return true;
    }

    // --- stage: pretraining on the source domain --------------------------
    bool stage_pretrain() {
        const auto hash = stage_hash("pretrain", {"label:SRC"});
        if (stage_done("pretrain", hash)) return false;

        auto [train, test] = load_domain_split("SRC");
        auto cfg = cfg_.model;
        cfg.seed = derive_seed(cfg_.seed, "pretrain");
        auto [params, report] = transfer::pretrain(train, test, cfg);

        fs::create_directories(out() / "models");
        fs::create_directories(out() / "reports");
        weights_io::ModelBundle bundle{params, *train.norm, "source"};
        const auto model_path = out() / "models" / "source.bin";
        weights_io::save_model(bundle, model_path.string());
        const auto report_path = out() / "reports" / "pretrain.json";
        std::ofstream rep(report_path);
        rep << report.to_json().dump(2) << '\n';
        write_manifest("pretrain", hash,
                       {model_path.string(), report_path.string()});
        return true;
    }

    // --- stage: per-target fine-tuning and evaluation ----------------------
    bool stage_finetune(const std::string& domain) {
        const auto name = "finetune:" + domain;
        std::vector<std::string> parents = {"pretrain", "label:" + domain};
        if (cfg_.augment_target > 0) parents.push_back("augment:" + domain);
        const auto hash = stage_hash(name, parents);
        if (stage_done(name, hash)) return false;

        const auto source = weights_io::load_model(
            (out() / "models" / "source.bin").string());
        auto [train, test] = load_domain_split(domain);
        dataset::Dataset ft_train = train;
        if (cfg_.augment_target > 0) {
            ft_train = dataset::load(
                (out() / "data" / (domain + ".aug.ndjson")).string());
        }
        auto tcfg = cfg_.transfer_cfg;
        tcfg.seed = derive_seed(cfg_.seed, "finetune:" + domain);
        const auto zero_shot = transfer::zero_shot_eval(source.params, test);
        const auto tuned = transfer::fine_tune(source.params, ft_train, tcfg);
        const auto tuned_report = transfer::evaluate(tuned, test);

        weights_io::ModelBundle bundle{tuned, *test.norm, "target:" + domain};
        const auto model_path = out() / "models" / (domain + ".bin");
        weights_io::save_model(bundle, model_path.string());
        const auto zs_path = out() / "reports" / (domain + ".zero_shot.json");
        const auto ft_path = out() / "reports" / (domain + ".finetuned.json");
        std::ofstream(zs_path) << zero_shot.to_json().dump(2) << '\n';
        std::ofstream(ft_path) << tuned_report.to_json().dump(2) << '\n';
        write_manifest(name, hash,
                       {model_path.string(), zs_path.string(), ft_path.string()});
        return true;
    }

    // --- stage: summary ----------------------------------------------------
    bool stage_eval() {
        std::vector<std::string> parents = {"pretrain"};
        for (const auto& d : cfg_.target_domains) parents.push_back("finetune:" + d);
        const auto hash = stage_hash("eval", parents);
        if (stage_done("eval", hash)) return false;

        std::string csv =
            "# surrogate data - directional comparison only\n"
            "domain,stage,acc,auc,mcc,f1\n";
        auto add_row = [&](const std::string& domain, const std::string& stage,
                           const fs::path& path) {
            std::ifstream in(path);
            if (!in) throw Error("missing report " + path.string());
            const auto j = nlohmann::json::parse(in);
            csv += domain + "," + stage + "," +
                   format_double(j.at("acc"), 4) + "," +
                   format_double(j.at("auc"), 4) + "," +
                   format_double(j.at("mcc"), 4) + "," +
                   format_double(j.at("f1"), 4) + "\n";
        };
        add_row("SRC", "pretrain", out() / "reports" / "pretrain.json");
        for (const auto& d : cfg_.target_domains) {
            add_row(d, "zero_shot", out() / "reports" / (d + ".zero_shot.json"));
            add_row(d, "finetuned", out() / "reports" / (d + ".finetuned.json"));
        }
        const auto csv_path = out() / "reports" / "summary.csv";
        std::ofstream(csv_path) << csv;
        write_manifest("eval", hash, {csv_path.string()});
        return true;
    }

    // --- shared helpers -----------------------------------------------------

    // Loads all trajectories of a domain and windows them into a raw dataset.
    dataset::Dataset build_raw_dataset(const std::string& domain, double otw_s,
                                       double snr_db = kInfSnrDb) const {
        const auto dir = out() / "traj" / domain;
        if (!fs::exists(dir)) throw Error("no trajectories for " + domain);
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.path().extension() == ".ndjson") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        dataset::Dataset ds;
        ds.domain_tag = domain == "SRC" ? "source" : "target:" + domain;
        for (const auto& f : files) {
            auto traj = dynsim::load_trajectory(f.string());
            if (std::isfinite(snr_db)) {
                const auto noise_seed =
                    derive_seed(cfg_.seed, "noise:" + traj.scenario_id);
                traj = dynsim::add_measurement_noise(traj, snr_db, noise_seed);
            }
            ds.samples.push_back(dataset::make_sample(traj, otw_s, snr_db));
        }
        return ds;
    }

    // Labeled domain dataset split and normalized on its own training part.
    std::pair<dataset::Dataset, dataset::Dataset> load_domain_split(
        const std::string& domain) const {
        const auto path = out() / "data" / (domain + ".ndjson");
        auto ds = dataset::load(path.string());
        auto [train, test] =
            dataset::split(ds, cfg_.split_frac, derive_seed(cfg_.seed, "split"));
        const auto norm = dataset::fit_normalizer(train);
        return {dataset::apply_normalizer(train, norm),
                dataset::apply_normalizer(test, norm)};
    }

    fs::path out() const { return fs::path(cfg_.out_dir); }

    static std::string traj_name(std::size_t index) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "scn_%05zu.ndjson", index);
        return buf;
    }

    std::string stage_hash(const std::string& stage,
                           const std::vector<std::string>& parents) const {
        std::uint64_t h = fnv1a64(cfg_.to_json().dump());
        h = fnv1a64(stage, h);
        for (const auto& p : parents) {
            const auto manifest = out() / "manifests" / (sanitize(p) + ".json");
            if (fs::exists(manifest)) {
                std::ifstream in(manifest);
                const auto j = nlohmann::json::parse(in);
                h = fnv1a64(j.value("inputs_hash", ""), h);
            } else {
                h = fnv1a64("missing-parent", h);
            }
        }
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(h));
        return buf;
    }

    bool stage_done(const std::string& stage, const std::string& hash) const {
        const auto manifest = out() / "manifests" / (sanitize(stage) + ".json");
        if (!fs::exists(manifest)) return false;
        std::ifstream in(manifest);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (...) {
            return false;
        }
        if (j.value("inputs_hash", "") != hash) return false;
        for (const auto& o : j.value("outputs", std::vector<std::string>{}))
            if (!fs::exists(fs::path(o))) return false;
        return true;
    }

    void write_manifest(const std::string& stage, const std::string& hash,
                        const std::vector<std::string>& outputs) const {
        nlohmann::json j = {{"schema_version", 1},
                            {"stage", stage},
                            {"inputs_hash", hash},
                            {"seed", cfg_.seed},
                            {"outputs", outputs}};
        const auto manifest = out() / "manifests" / (sanitize(stage) + ".json");
        std::ofstream outf(manifest);
        outf << j.dump(2) << '\n';
    }

    static std::string sanitize(const std::string& s) {
        std::string out = s;
        for (auto& c : out)
            if (c == ':' || c == '/') c = '_';
        return out;
    }

private:
    PipelineConfig cfg_;
};

}  // namespace stvsa::pipeline
