#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mscn/rng.hpp"
#include "mscn/tape.hpp"
#include "mscn/tensor.hpp"

namespace mscn {

inline constexpr std::array<const char*, 4> kAuxNames{"slope", "altitude", "aspect", "gain"};

/// Architecture hyperparameters. The stock encoder is a small trainable CNN
/// (three 3x3 stride-2 conv blocks, global average pool, dense head); an MLP
/// encoder is available as a lighter stand-in.
struct ModelConfig {
    enum class EncoderKind { small_cnn, mlp };

    EncoderKind encoder_kind = EncoderKind::small_cnn;
    std::array<std::size_t, 3> image_shape{3, 64, 64};  // C, H, W
    std::vector<std::size_t> conv_channels{8, 16, 32};
    std::size_t mlp_hidden = 64;
    std::size_t rep_dim = 48;
    std::size_t proj_hidden = 64;
    std::size_t proj_out = 32;
    std::size_t num_aux = 4;
    std::size_t aux_feature_dim = 4;
    bool aux_dense = true;
    std::vector<std::size_t> classifier_hidden{256, 128};
    std::size_t num_classes = 4;

    std::size_t fused_dim() const { return rep_dim + num_aux * aux_feature_dim; }

    std::vector<std::string> aux_names() const {
        std::vector<std::string> names;
        for (std::size_t i = 0; i < num_aux; ++i) names.emplace_back(kAuxNames[i]);
        return names;
    }

    void validate() const {
        if (rep_dim == 0 || proj_hidden == 0 || proj_out == 0 || num_classes == 0) {
            throw ConfigError("model config: dimensions must be positive");
        }
        if (proj_out > proj_hidden) {
            throw ConfigError("model config: proj_out " + std::to_string(proj_out) +
                              " exceeds proj_hidden " + std::to_string(proj_hidden));
        }
        if (num_aux != 0 && num_aux != 1 && num_aux != 2 && num_aux != 4) {
            throw ConfigError("model config: num_aux must be one of {0,1,2,4}, got " + std::to_string(num_aux));
        }
        if (num_aux > 0 && aux_feature_dim == 0) {
            throw ConfigError("model config: aux_feature_dim must be positive");
        }
        if (!aux_dense && num_aux > 0 && aux_feature_dim != 4) {
            throw ConfigError("model config: without the aux dense layer aux_feature_dim must be 4");
        }
        if (encoder_kind == EncoderKind::small_cnn && conv_channels.size() != 3) {
            throw ConfigError("model config: conv_channels must list 3 block widths");
        }
        if (image_shape[0] == 0 || image_shape[1] == 0 || image_shape[2] == 0) {
            throw ConfigError("model config: image_shape must be positive");
        }
        for (std::size_t h : classifier_hidden)
            if (h == 0) throw ConfigError("model config: classifier_hidden entries must be positive");
    }
};

/// Named parameter tensors, partitioned into the groups encoder, projection,
/// aux and classifier by a name prefix ("encoder/conv1.w"). Groups can be
/// frozen; frozen tensors are never moved by an optimizer step and report
/// exactly zero gradients.
class ModelParams {
public:
    static constexpr std::array<const char*, 4> kGroups{"encoder", "projection", "aux", "classifier"};

    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        ModelParams p;
        const std::size_t img_c = cfg.image_shape[0];
        if (cfg.encoder_kind == ModelConfig::EncoderKind::small_cnn) {
            std::size_t in_ch = img_c;
            for (std::size_t b = 0; b < cfg.conv_channels.size(); ++b) {
                const std::size_t out_ch = cfg.conv_channels[b];
                const std::string base = "encoder/conv" + std::to_string(b + 1);
                p.add(base + ".w", {out_ch, in_ch, 3, 3}, seed);
                p.add(base + ".b", {out_ch}, seed, in_ch * 9);
                in_ch = out_ch;
            }
            p.add("encoder/head.w", {cfg.rep_dim, in_ch}, seed);
            p.add("encoder/head.b", {cfg.rep_dim}, seed, in_ch);
        } else {
            const std::size_t flat = img_c * cfg.image_shape[1] * cfg.image_shape[2];
            p.add("encoder/dense1.w", {cfg.mlp_hidden, flat}, seed);
            p.add("encoder/dense1.b", {cfg.mlp_hidden}, seed, flat);
            p.add("encoder/dense2.w", {cfg.rep_dim, cfg.mlp_hidden}, seed);
            p.add("encoder/dense2.b", {cfg.rep_dim}, seed, cfg.mlp_hidden);
        }
        p.add("projection/dense1.w", {cfg.proj_hidden, cfg.rep_dim}, seed);
        p.add("projection/dense1.b", {cfg.proj_hidden}, seed, cfg.rep_dim);
        p.add("projection/dense2.w", {cfg.proj_out, cfg.proj_hidden}, seed);
        p.add("projection/dense2.b", {cfg.proj_out}, seed, cfg.proj_hidden);
        if (cfg.aux_dense) {
            for (const std::string& name : cfg.aux_names()) {
                p.add("aux/" + name + ".w", {cfg.aux_feature_dim, 4}, seed);
                p.add("aux/" + name + ".b", {cfg.aux_feature_dim}, seed, 4);
            }
        }
        std::size_t in_dim = cfg.fused_dim();
        for (std::size_t l = 0; l < cfg.classifier_hidden.size(); ++l) {
            const std::size_t out_dim = cfg.classifier_hidden[l];
            const std::string base = "classifier/dense" + std::to_string(l + 1);
            p.add(base + ".w", {out_dim, in_dim}, seed);
            p.add(base + ".b", {out_dim}, seed, in_dim);
            in_dim = out_dim;
        }
        p.add("classifier/out.w", {cfg.num_classes, in_dim}, seed);
        p.add("classifier/out.b", {cfg.num_classes}, seed, in_dim);
        return p;
    }

    static std::string group_of(const std::string& name) {
        const auto slash = name.find('/');
        if (slash == std::string::npos) throw UsageError("param name without group prefix: " + name);
        return name.substr(0, slash);
    }

    bool has(const std::string& name) const { return tensors_.count(name) != 0; }

    const Tensor& tensor(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw UsageError("unknown parameter: " + name);
        return it->second;
    }

    Tensor& tensor(const std::string& name) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw UsageError("unknown parameter: " + name);
        return it->second;
    }

    void set(const std::string& name, Tensor t) {
        group_of(name);  // enforce the prefix convention
        t.requires_grad = true;
        tensors_[name] = std::move(t);
    }

    /// Names in deterministic (lexicographic) order.
    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(tensors_.size());
        for (const auto& [k, v] : tensors_) out.push_back(k);
        return out;
    }

    std::vector<std::string> names_in_group(const std::string& group) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : tensors_)
            if (group_of(k) == group) out.push_back(k);
        return out;
    }

    /// Marks a parameter group frozen. Idempotent; unknown group names are
    /// rejected.
    void freeze_group(const std::string& group) {
        check_group(group);
        frozen_.insert(group);
    }

    void unfreeze_group(const std::string& group) {
        check_group(group);
        frozen_.erase(group);
    }

    bool is_frozen(const std::string& group) const { return frozen_.count(group) != 0; }
    bool is_frozen_param(const std::string& name) const { return is_frozen(group_of(name)); }

    std::uint64_t byte_checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [name, t] : tensors_) {
            h = fnv1a64(name.data(), name.size(), h);
            h = fnv1a64(t.data(), t.numel() * sizeof(double), h);
        }
        return h;
    }

    std::uint64_t group_checksum(const std::string& group) const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [name, t] : tensors_) {
            if (group_of(name) != group) continue;
            h = fnv1a64(name.data(), name.size(), h);
            h = fnv1a64(t.data(), t.numel() * sizeof(double), h);
        }
        return h;
    }

    const std::map<std::string, Tensor>& all() const { return tensors_; }

private:
    static void check_group(const std::string& group) {
        for (const char* g : kGroups)
            if (group == g) return;
        throw UsageError("unknown parameter group: " + group);
    }

    /// Glorot-uniform weights; biases uniform in +-1/sqrt(fan_in) of their
    /// layer (bias_fan_in > 0 selects that rule). A nonzero bias keeps a
    /// fully dead relu layer from emitting an exactly-zero vector into the
    /// normalization. Each tensor draws from its own stream keyed by
    /// (seed, name) so insertion order is irrelevant.
    void add(const std::string& name, std::vector<std::size_t> shape, std::uint64_t seed,
             std::size_t bias_fan_in = 0) {
        Tensor t(shape);
        double bound;
        if (bias_fan_in > 0) {
            bound = 1.0 / std::sqrt(static_cast<double>(bias_fan_in));
        } else {
            std::size_t fan_in = 1, fan_out = shape[0];
            for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
            if (shape.size() == 4) fan_out = shape[0] * shape[2] * shape[3];
            bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        }
        Rng rng(mix_seed(seed, {fnv1a64(name.data(), name.size())}));
        for (double& v : t.values()) v = rng.uniform(-bound, bound);
        t.requires_grad = true;
        tensors_[name] = std::move(t);
    }

    std::map<std::string, Tensor> tensors_;
    std::set<std::string> frozen_;
};

/// Parameter tensors registered as leaves of one tape.
struct BoundParams {
    std::map<std::string, Variable> vars;

    Variable at(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw UsageError("parameter not bound: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return vars.count(name) != 0; }
};

/// Registers every parameter on the tape. Frozen groups become frozen leaves:
/// they report zero gradients and do not force recording of ops that consume
/// only them. With trainable=false everything enters as a plain constant
/// (cheap inference forward).
inline BoundParams bind_params(GradientTape& tape, const ModelParams& params, bool trainable = true) {
    BoundParams bound;
    for (const auto& [name, tensor] : params.all()) {
        const bool frozen = params.is_frozen_param(name);
        Variable v = trainable ? tape.leaf(tensor, /*requires_grad=*/true, frozen)
                               : tape.constant(tensor);
        bound.vars.emplace(name, v);
    }
    return bound;
}

namespace detail {

inline Variable dense(GradientTape& t, const BoundParams& p, const std::string& base, Variable x) {
    return t.add(t.matvec(p.at(base + ".w"), x), p.at(base + ".b"));
}

}  // namespace detail

/// Enc: image [C x H x W] -> representation [rep_dim].
inline Variable encoder_forward(GradientTape& tape, Variable image, const BoundParams& params,
                                const ModelConfig& cfg) {
    const Tensor& img = tape.value(image);
    if (img.rank() != 3 || img.dim(0) != cfg.image_shape[0]) {
        throw ShapeError("encoder: image shape " + img.shape_str() + " does not match configured channels");
    }
    if (cfg.encoder_kind == ModelConfig::EncoderKind::small_cnn) {
        Variable x = image;
        for (std::size_t b = 0; b < cfg.conv_channels.size(); ++b) {
            const std::string base = "encoder/conv" + std::to_string(b + 1);
            x = tape.conv2d(x, params.at(base + ".w"), /*stride=*/2, /*padding=*/1);
            x = tape.add_channel_bias(x, params.at(base + ".b"));
            x = tape.relu(x);
        }
        return detail::dense(tape, params, "encoder/head", tape.global_avg_pool(x));
    }
    const std::size_t flat = img.numel();
    if (flat != tape.value(params.at("encoder/dense1.w")).dim(1)) {
        throw ShapeError("encoder: flattened image size " + std::to_string(flat) + " does not match dense1");
    }
    Variable x = tape.reshape(image, {flat});
    x = tape.relu(detail::dense(tape, params, "encoder/dense1", x));
    return detail::dense(tape, params, "encoder/dense2", x);
}

/// Proj: representation -> unit-norm embedding [proj_out].
inline Variable projection_forward(GradientTape& tape, Variable rep, const BoundParams& params,
                                   const ModelConfig& cfg) {
    (void)cfg;
    Variable h = tape.relu(detail::dense(tape, params, "projection/dense1", rep));
    Variable z = detail::dense(tape, params, "projection/dense2", h);
    return tape.l2_normalize(z);
}

/// Summary statistics (mean, population std, min, max) of a raster or scalar
/// auxiliary value. A scalar v maps to (v, 0, v, v).
inline Tensor aux_stats(const Tensor& aux) {
    if (aux.numel() == 0) throw ShapeError("aux stats: empty raster " + aux.shape_str());
    if (!aux.all_finite()) throw ValidationError("aux stats: non-finite auxiliary value");
    double mn = aux[0], mx = aux[0], sum = 0.0, sq = 0.0;
    for (double v : aux.values()) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
        sum += v;
        sq += v * v;
    }
    const double n = static_cast<double>(aux.numel());
    const double mean = sum / n;
    const double var = std::max(0.0, sq / n - mean * mean);
    return Tensor::vector({mean, std::sqrt(var), mn, mx});
}

/// Featurizes one auxiliary: summary statistics, then the per-auxiliary dense
/// layer when configured. The statistics enter the tape as data (no gradient
/// flows into the raster).
inline Variable aux_featurize(GradientTape& tape, const Tensor& aux, const std::string& aux_name,
                              const BoundParams& params, const ModelConfig& cfg) {
    Variable stats = tape.constant(aux_stats(aux));
    if (!cfg.aux_dense) return stats;
    return detail::dense(tape, params, "aux/" + aux_name, stats);
}

/// Multimodal fusion: representation first, then auxiliary features in
/// canonical order (slope, altitude, aspect, gain).
inline Variable fuse(GradientTape& tape, Variable rep, std::span<const Variable> aux_features,
                     const ModelConfig& cfg) {
    if (aux_features.size() != cfg.num_aux) {
        throw ConfigError("fuse: expected " + std::to_string(cfg.num_aux) + " auxiliaries, got " +
                          std::to_string(aux_features.size()));
    }
    Variable out = rep;
    for (Variable a : aux_features) out = tape.concat(out, a);
    return out;
}

/// Clas: fused vector -> class logits [num_classes].
inline Variable classifier_logits(GradientTape& tape, Variable fused, const BoundParams& params,
                                  const ModelConfig& cfg) {
    const Tensor& f = tape.value(fused);
    if (f.rank() != 1 || f.dim(0) != cfg.fused_dim()) {
        throw ShapeError("classifier: fused input " + f.shape_str() + " does not match expected [" +
                         std::to_string(cfg.fused_dim()) + "]");
    }
    Variable x = fused;
    for (std::size_t l = 0; l < cfg.classifier_hidden.size(); ++l) {
        x = tape.relu(detail::dense(tape, params, "classifier/dense" + std::to_string(l + 1), x));
    }
    return detail::dense(tape, params, "classifier/out", x);
}

inline Variable classifier_log_probs(GradientTape& tape, Variable fused, const BoundParams& params,
                                     const ModelConfig& cfg) {
    return tape.log_softmax(classifier_logits(tape, fused, params, cfg));
}

/// Class probabilities (softmax over the logits); sums to 1 within 1e-12.
inline Variable classifier_forward(GradientTape& tape, Variable fused, const BoundParams& params,
                                   const ModelConfig& cfg) {
    return tape.exp(classifier_log_probs(tape, fused, params, cfg));
}

// ---- value-form conveniences (inference, no gradients) -----------------

inline Tensor encoder_rep(const ModelParams& params, const ModelConfig& cfg, const Tensor& image) {
    GradientTape tape;
    BoundParams bound = bind_params(tape, params, /*trainable=*/false);
    return tape.value(encoder_forward(tape, tape.constant(image), bound, cfg));
}

/// Encoder + projection head; the stage-1 embedding of an image.
inline Tensor embed_image(const ModelParams& params, const ModelConfig& cfg, const Tensor& image) {
    GradientTape tape;
    BoundParams bound = bind_params(tape, params, /*trainable=*/false);
    Variable rep = encoder_forward(tape, tape.constant(image), bound, cfg);
    return tape.value(projection_forward(tape, rep, bound, cfg));
}

}  // namespace mscn
