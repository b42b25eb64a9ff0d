#pragma once

// Binary weight persistence: a JSON architecture header followed by raw
// little-endian doubles. The same container serves the encoder classifier
// (with its normalizer) and the GAN generator/discriminator pair.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvsa/augment.hpp"
#include "stvsa/common.hpp"
#include "stvsa/dataset.hpp"
#include "stvsa/stability_model.hpp"

namespace stvsa::weights_io {

constexpr char kMagic[8] = {'S', 'T', 'V', 'S', 'A', 'B', 'L', 'B'};
constexpr int kSchemaVersion = 1;

struct ModelBundle {
    stability_model::EncoderParams params;
    dataset::NormParams norm;
    std::string domain_tag;
};

namespace detail {

struct TensorEntry {
    std::string name;
    std::int64_t rows;
    std::int64_t cols;
};

inline void write_all(std::ofstream& out, const void* data, std::size_t len) {
    out.write(static_cast<const char*>(data), std::streamsize(len));
    if (!out) throw Error("weights: write failed");
}

inline void write_blob(const std::string& path, const nlohmann::json& header,
                       const std::vector<std::pair<TensorEntry, const double*>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("weights: cannot open " + path + " for writing");
    out.write(kMagic, sizeof(kMagic));
    const std::string hdr = header.dump();
    const std::uint64_t hlen = hdr.size();
    write_all(out, &hlen, sizeof(hlen));
    write_all(out, hdr.data(), hdr.size());
    for (const auto& [entry, data] : tensors)
        write_all(out, data, std::size_t(entry.rows * entry.cols) * sizeof(double));
}

inline nlohmann::json read_header(std::ifstream& in, const std::string& path) {
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw ParseError("weights: bad magic in " + path, 0);
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in) throw ParseError("weights: truncated header length in " + path, 8);
    std::string hdr(hlen, '\0');
    in.read(hdr.data(), std::streamsize(hlen));
    if (!in) throw ParseError("weights: truncated header in " + path, 16);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(hdr);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("weights: bad header json in " + path,
                         16 + (e.byte > 0 ? e.byte - 1 : 0));
    }
    if (j.value("schema_version", 0) != kSchemaVersion)
        throw Error("weights: unsupported schema version in " + path);
    return j;
}

inline void read_tensor(std::ifstream& in, double* dst, std::int64_t count,
                        const std::string& path) {
    in.read(reinterpret_cast<char*>(dst),
            std::streamsize(std::size_t(count) * sizeof(double)));
    if (!in) {
        const auto pos = in.gcount();
        throw ParseError("weights: truncated tensor data in " + path,
                         pos > 0 ? std::size_t(pos) : 0);
    }
}

inline nlohmann::json norm_to_json(const dataset::NormParams& np) {
    return {{"min", np.mins}, {"max", np.maxs}};
}

inline dataset::NormParams norm_from_json(const nlohmann::json& j) {
    dataset::NormParams np;
    np.mins = j.at("min").get<std::vector<double>>();
    np.maxs = j.at("max").get<std::vector<double>>();
    return np;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder classifier bundle.

inline void save_model(const ModelBundle& bundle, const std::string& path) {
    auto params = bundle.params;  // tensor_refs needs mutable access
    auto refs = stability_model::tensor_refs(params);
    nlohmann::json tensors = nlohmann::json::array();
    std::vector<std::pair<detail::TensorEntry, const double*>> payload;
    for (const auto& r : refs) {
        detail::TensorEntry e;
        e.name = r.name;
        if (r.mat) {
            e.rows = r.mat->rows();
            e.cols = r.mat->cols();
            payload.push_back({e, r.mat->data()});
        } else {
            e.rows = r.vec->size();
            e.cols = 1;
            payload.push_back({e, r.vec->data()});
        }
        tensors.push_back({{"name", e.name}, {"rows", e.rows}, {"cols", e.cols}});
    }
    nlohmann::json header = {
        {"schema_version", kSchemaVersion},
        {"kind", "encoder"},
        {"arch", bundle.params.cfg.to_json()},
        {"input_width", bundle.params.input_width},
        {"t_frames", bundle.params.t_frames},
        {"normalizer", detail::norm_to_json(bundle.norm)},
        {"domain_tag", bundle.domain_tag},
        {"tensors", tensors}};
    detail::write_blob(path, header, payload);
}

inline ModelBundle load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("weights: cannot open " + path);
    const nlohmann::json header = detail::read_header(in, path);
    if (header.value("kind", "") != "encoder")
        throw Error("weights: " + path + " does not hold an encoder model");

    ModelBundle bundle;
    const auto cfg = stability_model::TransformerCfg::from_json(header.at("arch"));
    bundle.params = stability_model::init_params(cfg, header.at("input_width"),
                                                 header.at("t_frames"));
    bundle.norm = detail::norm_from_json(header.at("normalizer"));
    bundle.domain_tag = header.value("domain_tag", "");

    auto refs = stability_model::tensor_refs(bundle.params);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != refs.size())
        throw Error("weights: tensor count mismatch in " + path);
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto& t = tensors.at(i);
        if (t.at("name").get<std::string>() != refs[i].name)
            throw Error("weights: tensor order mismatch at " + refs[i].name);
        const std::int64_t rows = t.at("rows");
        const std::int64_t cols = t.at("cols");
        if (refs[i].mat) {
            if (rows != refs[i].mat->rows() || cols != refs[i].mat->cols())
                throw Error("weights: shape mismatch at " + refs[i].name);
            detail::read_tensor(in, refs[i].mat->data(), rows * cols, path);
        } else {
            if (rows != refs[i].vec->size() || cols != 1)
                throw Error("weights: shape mismatch at " + refs[i].name);
            detail::read_tensor(in, refs[i].vec->data(), rows, path);
        }
    }
    return bundle;
}

// ---------------------------------------------------------------------------
// GAN pair. Layer widths and activations are reconstructed from the header.

namespace detail {

inline nlohmann::json mlp_arch(const nn::Mlp& m) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const char* act = "none";
        switch (m.acts[i]) {
            case nn::Act::relu: act = "relu"; break;
            case nn::Act::leaky_relu: act = "leaky_relu"; break;
            case nn::Act::sigmoid: act = "sigmoid"; break;
            case nn::Act::none: act = "none"; break;
        }
        layers.push_back({{"in", m.layers[i].w.rows()},
                          {"out", m.layers[i].w.cols()},
                          {"act", act}});
    }
    return layers;
}

inline nn::Act act_from_name(const std::string& s) {
    if (s == "relu") return nn::Act::relu;
    if (s == "leaky_relu") return nn::Act::leaky_relu;
    if (s == "sigmoid") return nn::Act::sigmoid;
    if (s == "none") return nn::Act::none;
    throw Error("weights: unknown activation " + s);
}

inline void append_mlp(const std::string& prefix, nn::Mlp& m,
                       nlohmann::json& tensors,
                       std::vector<std::pair<TensorEntry, const double*>>& payload) {
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        TensorEntry w{prefix + std::to_string(i) + ".w", m.layers[i].w.rows(),
                      m.layers[i].w.cols()};
        TensorEntry b{prefix + std::to_string(i) + ".b", m.layers[i].b.size(), 1};
        payload.push_back({w, m.layers[i].w.data()});
        payload.push_back({b, m.layers[i].b.data()});
        tensors.push_back({{"name", w.name}, {"rows", w.rows}, {"cols", w.cols}});
        tensors.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}});
    }
}

inline nn::Mlp mlp_from_arch(const nlohmann::json& arch) {
    nn::Mlp m;
    for (const auto& l : arch) {
        nn::Linear lin;
        lin.w = nn::Mat::Zero(l.at("in").get<int>(), l.at("out").get<int>());
        lin.b = nn::Vec::Zero(l.at("out").get<int>());
        m.layers.push_back(std::move(lin));
        m.acts.push_back(act_from_name(l.at("act")));
    }
    return m;
}

inline void read_mlp(std::ifstream& in, nn::Mlp& m, const std::string& path) {
    for (auto& l : m.layers) {
        read_tensor(in, l.w.data(), l.w.size(), path);
        read_tensor(in, l.b.data(), l.b.size(), path);
    }
}

}  // namespace detail

inline void save_gan(const augment::GanParams& gp, const std::string& path) {
    auto copy = gp;
    nlohmann::json tensors = nlohmann::json::array();
    std::vector<std::pair<detail::TensorEntry, const double*>> payload;
    detail::append_mlp("g.", copy.generator, tensors, payload);
    detail::append_mlp("d.", copy.discriminator, tensors, payload);
    nlohmann::json header = {{"schema_version", kSchemaVersion},
                             {"kind", "gan"},
                             {"noise_dim", gp.noise_dim},
                             {"n_classes", gp.n_classes},
                             {"t_frames", gp.t_frames},
                             {"width", gp.width},
                             {"generator", detail::mlp_arch(copy.generator)},
                             {"discriminator", detail::mlp_arch(copy.discriminator)},
                             {"tensors", tensors}};
    detail::write_blob(path, header, payload);
}

inline augment::GanParams load_gan(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("weights: cannot open " + path);
    const nlohmann::json header = detail::read_header(in, path);
    if (header.value("kind", "") != "gan")
        throw Error("weights: " + path + " does not hold a GAN");
    augment::GanParams gp;
    gp.noise_dim = header.at("noise_dim");
    gp.n_classes = header.at("n_classes");
    gp.t_frames = header.at("t_frames");
    gp.width = header.at("width");
    gp.generator = detail::mlp_from_arch(header.at("generator"));
    gp.discriminator = detail::mlp_from_arch(header.at("discriminator"));
    detail::read_mlp(in, gp.generator, path);
    detail::read_mlp(in, gp.discriminator, path);
    return gp;
}

}  // namespace stvsa::weights_io
