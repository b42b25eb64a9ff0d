#pragma once

// Sample construction from trajectories: observation windows anchored at fault
// clearing, engineering-threshold seed labels, min-max normalization, splits,
// and NDJSON persistence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "stvsa/common.hpp"
#include "stvsa/dynsim.hpp"

namespace stvsa::dataset {

enum class Label { unstable = 0, stable = 1, unlabeled = 2 };

inline std::string label_name(Label l) {
    switch (l) {
        case Label::unstable: return "unstable";
        case Label::stable: return "stable";
        default: return "unlabeled";
    }
}

inline Label label_from_name(const std::string& s) {
    if (s == "unstable") return Label::unstable;
    if (s == "stable") return Label::stable;
    if (s == "unlabeled") return Label::unlabeled;
    throw Error("unknown label: " + s);
}

struct SampleMeta {
    std::string scenario_id;
    std::string topology_id;
    double otw_s = 0.0;
    double snr_db = kInfSnrDb;
    bool synthetic = false;
    // Seed-rule outcome of the source trajectory; evaluation-only ground truth
    // for the labeler, never fed to training.
    Label seed_rule = Label::unlabeled;
};

struct Sample {
    // T_frames x (3 * n_bus), bus-major channel order (U,P,Q per bus).
    Eigen::MatrixXd features;
    Label label = Label::unlabeled;
    SampleMeta meta;
};

struct NormParams {
    std::vector<double> mins;
    std::vector<double> maxs;
};

struct Dataset {
    std::vector<Sample> samples;
    std::optional<NormParams> norm;  // set once normalized
    std::string domain_tag = "source";

    int t_frames() const {
        return samples.empty() ? 0 : int(samples.front().features.rows());
    }
    int width() const {
        return samples.empty() ? 0 : int(samples.front().features.cols());
    }
    std::size_t count(Label l) const {
        std::size_t n = 0;
        for (const auto& s : samples) n += (s.label == l);
        return n;
    }
};

// ---------------------------------------------------------------------------
// Windowing: frames in [clearing_time, clearing_time + otw), i.e. the window
// begins at fault clearing.

inline Eigen::MatrixXd window(const dynsim::Trajectory& traj, double otw_s) {
    if (traj.frames.empty()) throw Error("window: empty trajectory");
    const int rate = traj.frame_rate_hz;
    const int t_frames = int(std::lround(otw_s * rate));
    if (t_frames < 1) throw Error("window: otw shorter than one frame period");
    // Quarter frame period absorbs representation error between the frame
    // grid and the configured clearing instant.
    const double eps = 0.25 / rate;
    std::size_t first = 0;
    while (first < traj.frames.size() &&
           traj.frames[first].t < traj.clearing_time_s - eps)
        ++first;
    if (first + std::size_t(t_frames) > traj.frames.size())
        throw Error("window: observation window overruns trajectory end");
    const int nb = traj.n_bus();
    Eigen::MatrixXd m(t_frames, 3 * nb);
    for (int r = 0; r < t_frames; ++r) {
        const auto& f = traj.frames[first + std::size_t(r)];
        for (int b = 0; b < nb; ++b) {
            m(r, 3 * b + 0) = f.bus[std::size_t(b)][0];
            m(r, 3 * b + 1) = f.bus[std::size_t(b)][1];
            m(r, 3 * b + 2) = f.bus[std::size_t(b)][2];
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Engineering-threshold seed labels evaluated on the final second of the
// trajectory: stable when every bus voltage holds at or above 0.9 p.u. there,
// unstable when every bus is pinned at or below 0.7 p.u.

inline Label seed_label(const dynsim::Trajectory& traj) {
    if (traj.frames.empty()) throw Error("seed_label: empty trajectory");
    if (traj.end_time() - traj.clearing_time_s < 3.0)
        throw Error("seed_label: trajectory must cover >= 3 s after clearing");
    const double tail_start = traj.end_time() - 1.0;
    double u_min = std::numeric_limits<double>::infinity();
    double u_max = -std::numeric_limits<double>::infinity();
    for (const auto& f : traj.frames) {
        if (f.t < tail_start) continue;
        for (const auto& b : f.bus) {
            u_min = std::min(u_min, b[0]);
            u_max = std::max(u_max, b[0]);
        }
    }
    if (u_min >= 0.9) return Label::stable;
    if (u_max <= 0.7) return Label::unstable;
    return Label::unlabeled;
}

// Builds one sample per trajectory for a given window length.
inline Sample make_sample(const dynsim::Trajectory& traj, double otw_s,
                          double snr_db = kInfSnrDb) {
    Sample s;
    s.features = window(traj, otw_s);
    s.label = seed_label(traj);
    s.meta.scenario_id = traj.scenario_id;
    s.meta.topology_id = traj.topology_id;
    s.meta.otw_s = otw_s;
    s.meta.snr_db = snr_db;
    s.meta.seed_rule = s.label;
    return s;
}

// ---------------------------------------------------------------------------
// Per-feature min-max normalization to [0,1]. Features pool over frames and
// samples per channel column. Constant columns map to 0.5.

inline NormParams fit_normalizer(const Dataset& ds) {
    if (ds.samples.empty()) throw Error("fit_normalizer: empty dataset");
    const int w = ds.width();
    NormParams np;
    np.mins.assign(std::size_t(w), std::numeric_limits<double>::infinity());
    np.maxs.assign(std::size_t(w), -std::numeric_limits<double>::infinity());
    for (const auto& s : ds.samples) {
        for (int c = 0; c < w; ++c) {
            np.mins[std::size_t(c)] =
                std::min(np.mins[std::size_t(c)], s.features.col(c).minCoeff());
            np.maxs[std::size_t(c)] =
                std::max(np.maxs[std::size_t(c)], s.features.col(c).maxCoeff());
        }
    }
    return np;
}

inline Dataset apply_normalizer(const Dataset& ds, const NormParams& np) {
    if (std::size_t(ds.width()) != np.mins.size())
        throw Error("apply_normalizer: width mismatch");
    Dataset out = ds;
    bool warned = false;
    for (auto& s : out.samples) {
        for (int c = 0; c < s.features.cols(); ++c) {
            const double lo = np.mins[std::size_t(c)];
            const double hi = np.maxs[std::size_t(c)];
            for (int r = 0; r < s.features.rows(); ++r) {
                double& v = s.features(r, c);
                if (hi > lo)
                    v = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
                else {
                    v = 0.5;
                    if (!warned) {
                        std::cerr << "warning: constant feature column " << c
                                  << " mapped to 0.5\n";
                        warned = true;
                    }
                }
            }
        }
    }
    out.norm = np;
    return out;
}

// ---------------------------------------------------------------------------
// Deterministic stratified split. Strata are the definite labels plus one
// ambiguous stratum keyed on the trajectory seed-rule outcome for samples the
// labeler has not decided yet.

inline std::pair<Dataset, Dataset> split(const Dataset& ds, double train_frac,
                                         std::uint64_t seed) {
    if (ds.samples.size() < 5) throw Error("split: need at least 5 samples");
    if (!(train_frac > 0.0 && train_frac < 1.0))
        throw Error("split: train fraction must be in (0,1)");

    auto stratum_of = [](const Sample& s) -> int {
        if (s.label == Label::stable) return 0;
        if (s.label == Label::unstable) return 1;
        return s.meta.seed_rule == Label::stable     ? 0
               : s.meta.seed_rule == Label::unstable ? 1
                                                     : 2;
    };

    std::map<int, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        strata[stratum_of(ds.samples[i])].push_back(i);
    for (const auto& [k, idxs] : strata)
        if (idxs.size() < 2)
            throw Error("split: stratum " + std::to_string(k) +
                        " has fewer than 2 members");

    const auto total_train =
        std::size_t(std::lround(train_frac * double(ds.samples.size())));

    // Per-stratum rounding, then adjust the largest stratum to hit the total.
    std::vector<std::size_t> train_idx, test_idx;
    Rng rng(derive_seed(seed, "split"));
    std::size_t assigned = 0;
    std::vector<std::pair<int, std::size_t>> order;  // (stratum key, count)
    for (auto& [k, idxs] : strata) {
        rng.shuffle(idxs);
        order.emplace_back(k, idxs.size());
    }
    std::map<int, std::size_t> take;
    for (const auto& [k, n] : order) {
        take[k] = std::size_t(std::lround(train_frac * double(n)));
        assigned += take[k];
    }
    auto largest = std::max_element(
        order.begin(), order.end(),
        [](const auto& a, const auto& b) { return a.second < b.second; });
    if (assigned != total_train) {
        const long delta = long(total_train) - long(assigned);
        take[largest->first] = std::size_t(
            std::clamp(long(take[largest->first]) + delta, 0L,
                       long(largest->second)));
    }
    for (const auto& [k, idxs] : strata) {
        for (std::size_t i = 0; i < idxs.size(); ++i)
            (i < take[k] ? train_idx : test_idx).push_back(idxs[i]);
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());

    Dataset train, test;
    train.domain_tag = test.domain_tag = ds.domain_tag;
    train.norm = test.norm = ds.norm;
    for (auto i : train_idx) train.samples.push_back(ds.samples[i]);
    for (auto i : test_idx) test.samples.push_back(ds.samples[i]);
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Persistence: NDJSON sample lines plus a sidecar JSON header. Doubles are
// serialized with round-trip precision so load(save(ds)) is bit-exact.

inline nlohmann::json sample_to_json(const Sample& s) {
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < s.features.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < s.features.cols(); ++c) row.push_back(s.features(r, c));
        rows.push_back(std::move(row));
    }
    nlohmann::json j = {{"features", std::move(rows)},
                        {"label", label_name(s.label)},
                        {"meta",
                         {{"scenario_id", s.meta.scenario_id},
                          {"topology_id", s.meta.topology_id},
                          {"otw_s", s.meta.otw_s},
                          {"synthetic", s.meta.synthetic},
                          {"seed_rule", label_name(s.meta.seed_rule)}}}};
    if (std::isfinite(s.meta.snr_db))
        j["meta"]["snr_db"] = s.meta.snr_db;
    else
        j["meta"]["snr_db"] = nullptr;
    return j;
}

inline Sample sample_from_json(const nlohmann::json& j) {
    Sample s;
    const auto& rows = j.at("features");
    const std::size_t nr = rows.size();
    if (nr == 0) throw Error("sample: empty feature matrix");
    const std::size_t nc = rows.at(0).size();
    s.features.resize(Eigen::Index(nr), Eigen::Index(nc));
    for (std::size_t r = 0; r < nr; ++r) {
        const auto& row = rows.at(r);
        if (row.size() != nc) throw Error("sample: ragged feature matrix");
        for (std::size_t c = 0; c < nc; ++c)
            s.features(Eigen::Index(r), Eigen::Index(c)) = row.at(c).get<double>();
    }
    s.label = label_from_name(j.at("label"));
    const auto& m = j.at("meta");
    s.meta.scenario_id = m.at("scenario_id");
    s.meta.topology_id = m.at("topology_id");
    s.meta.otw_s = m.at("otw_s");
    s.meta.snr_db = m.at("snr_db").is_null() ? kInfSnrDb : m.at("snr_db").get<double>();
    s.meta.synthetic = m.value("synthetic", false);
    s.meta.seed_rule = label_from_name(m.value("seed_rule", "unlabeled"));
    return s;
}

inline void save(const Dataset& ds, const std::string& path) {
    namespace fs = std::filesystem;
    nlohmann::json header = {{"schema_version", 1},
                             {"kind", "dataset"},
                             {"domain_tag", ds.domain_tag},
                             {"t_frames", ds.t_frames()},
                             {"width", ds.width()},
                             {"counts",
                              {{"stable", ds.count(Label::stable)},
                               {"unstable", ds.count(Label::unstable)},
                               {"unlabeled", ds.count(Label::unlabeled)}}}};
    if (ds.norm) {
        header["norm_params"] = {{"min", ds.norm->mins}, {"max", ds.norm->maxs}};
    } else {
        header["norm_params"] = nullptr;
    }
    std::ofstream hout(fs::path(path).replace_extension(".header.json"));
    if (!hout) throw Error("cannot write dataset header for " + path);
    hout << header.dump(2) << '\n';

    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    for (const auto& s : ds.samples) out << sample_to_json(s).dump() << '\n';
}

inline Dataset load(const std::string& path) {
    namespace fs = std::filesystem;
    const auto header_path = fs::path(path).replace_extension(".header.json");
    std::ifstream hin(header_path);
    if (!hin) throw Error("missing dataset header: " + header_path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hin);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("bad dataset header " + header_path.string(),
                         e.byte > 0 ? e.byte - 1 : 0);
    }
    if (header.value("schema_version", 0) != 1)
        throw Error("unsupported dataset schema version in " + path);

    Dataset ds;
    ds.domain_tag = header.at("domain_tag");
    if (!header.at("norm_params").is_null()) {
        NormParams np;
        np.mins = header["norm_params"].at("min").get<std::vector<double>>();
        np.maxs = header["norm_params"].at("max").get<std::vector<double>>();
        ds.norm = np;
    }

    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::string line;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::parse_error& e) {
                throw ParseError("bad sample line in " + path,
                                 offset + (e.byte > 0 ? e.byte - 1 : 0));
            }
            ds.samples.push_back(sample_from_json(j));
        }
        offset += line.size() + 1;
    }
    const auto expect_n = header.at("counts").at("stable").get<std::size_t>() +
                          header.at("counts").at("unstable").get<std::size_t>() +
                          header.at("counts").at("unlabeled").get<std::size_t>();
    if (expect_n != ds.samples.size())
        throw ParseError("dataset truncated: expected " +
                             std::to_string(expect_n) + " samples, got " +
                             std::to_string(ds.samples.size()),
                         offset);
    return ds;
}

// Flattens a sample's feature matrix row-major into a single vector.
inline Eigen::VectorXd flatten(const Eigen::MatrixXd& m) {
    Eigen::VectorXd v(m.size());
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) v(k++) = m(r, c);
    return v;
}

}  // namespace stvsa::dataset
