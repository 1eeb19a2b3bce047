#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mscn/model.hpp"
#include "mscn/tensor.hpp"

namespace mscn {

/// Checkpoint container format, little-endian throughout:
///   magic "MSCN", format version (u32), then per-tensor records sorted by
///   name: name length (u32), UTF-8 name, rank (u32), dims (u32 each),
///   values as IEEE-754 doubles. Frozen flags are not persisted.
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(data_[pos_ + i]);
        pos_ += 4;
        return v;
    }

    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 7; i >= 0; --i) bits = (bits << 8) | static_cast<unsigned char>(data_[pos_ + i]);
        pos_ += 8;
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    std::string str(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) {
        if (pos_ + n > data_.size()) throw ValidationError("truncated checkpoint: " + path_);
    }
    const std::string& data_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    std::string out = "MSCN";
    detail::put_u32(out, kCheckpointVersion);
    for (const auto& [name, t] : params.all()) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (double v : t.values()) detail::put_f64(out, v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("failed writing checkpoint: " + path.string());
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path.string());
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (data.size() < 8 || data.compare(0, 4, "MSCN") != 0) {
        throw ValidationError("not an MSCN checkpoint: " + path.string());
    }
    detail::Reader r(data, path.string());
    r.str(4);  // magic
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw ValidationError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
    }
    ModelParams params;
    while (!r.done()) {
        const std::uint32_t name_len = r.u32();
        const std::string name = r.str(name_len);
        const std::uint32_t rank = r.u32();
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = r.u32();
        Tensor t(shape);
        for (double& v : t.values()) v = r.f64();
        params.set(name, std::move(t));
    }
    return params;
}

/// Reconstructs the architecture from parameter names and shapes, so a
/// checkpoint alone is enough for evaluation. Image height/width stay at
/// their defaults for the CNN encoder (it is size-agnostic); callers should
/// overwrite them with the dataset's shape.
inline ModelConfig model_config_from_params(const ModelParams& params) {
    ModelConfig cfg;
    if (params.has("encoder/conv1.w")) {
        cfg.encoder_kind = ModelConfig::EncoderKind::small_cnn;
        cfg.conv_channels.clear();
        for (std::size_t b = 1; params.has("encoder/conv" + std::to_string(b) + ".w"); ++b) {
            cfg.conv_channels.push_back(params.tensor("encoder/conv" + std::to_string(b) + ".w").dim(0));
        }
        if (cfg.conv_channels.empty()) throw ValidationError("checkpoint: no conv blocks found");
        cfg.image_shape[0] = params.tensor("encoder/conv1.w").dim(1);
        cfg.rep_dim = params.tensor("encoder/head.w").dim(0);
    } else if (params.has("encoder/dense1.w")) {
        cfg.encoder_kind = ModelConfig::EncoderKind::mlp;
        cfg.mlp_hidden = params.tensor("encoder/dense1.w").dim(0);
        cfg.rep_dim = params.tensor("encoder/dense2.w").dim(0);
    } else {
        throw ValidationError("checkpoint: no encoder parameters found");
    }
    cfg.proj_hidden = params.tensor("projection/dense1.w").dim(0);
    cfg.proj_out = params.tensor("projection/dense2.w").dim(0);

    cfg.num_aux = 0;
    cfg.aux_feature_dim = 4;
    cfg.aux_dense = false;
    for (const char* name : kAuxNames) {
        if (params.has(std::string("aux/") + name + ".w")) {
            ++cfg.num_aux;
            cfg.aux_dense = true;
            cfg.aux_feature_dim = params.tensor(std::string("aux/") + name + ".w").dim(0);
        }
    }

    cfg.classifier_hidden.clear();
    for (std::size_t l = 1; params.has("classifier/dense" + std::to_string(l) + ".w"); ++l) {
        cfg.classifier_hidden.push_back(params.tensor("classifier/dense" + std::to_string(l) + ".w").dim(0));
    }
    const Tensor& out_w = params.tensor("classifier/out.w");
    cfg.num_classes = out_w.dim(0);

    // Stats-only auxiliaries leave no tensors behind; recover their count
    // from the classifier input width.
    const std::size_t clf_in = cfg.classifier_hidden.empty()
                                   ? out_w.dim(1)
                                   : params.tensor("classifier/dense1.w").dim(1);
    if (cfg.num_aux == 0 && clf_in > cfg.rep_dim) {
        const std::size_t extra = clf_in - cfg.rep_dim;
        if (extra % 4 != 0) throw ValidationError("checkpoint: classifier input width is inconsistent");
        cfg.num_aux = extra / 4;
    }
    if (clf_in != cfg.fused_dim()) {
        throw ValidationError("checkpoint: classifier input width " + std::to_string(clf_in) +
                              " does not match fused dimension " + std::to_string(cfg.fused_dim()));
    }
    return cfg;
}

}  // namespace mscn
