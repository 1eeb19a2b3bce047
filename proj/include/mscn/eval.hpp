#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mscn/data.hpp"
#include "mscn/model.hpp"
#include "mscn/tensor.hpp"

namespace mscn {

/// C x C counts; rows are true classes, columns predicted classes.
struct ConfusionMatrix {
    std::size_t num_classes = 0;
    std::vector<std::size_t> counts;

    explicit ConfusionMatrix(std::size_t c) : num_classes(c), counts(c * c, 0) {}

    std::size_t& at(std::size_t truth, std::size_t pred) { return counts[truth * num_classes + pred]; }
    std::size_t at(std::size_t truth, std::size_t pred) const { return counts[truth * num_classes + pred]; }

    std::size_t total() const {
        std::size_t t = 0;
        for (std::size_t v : counts) t += v;
        return t;
    }

    std::size_t trace() const {
        std::size_t t = 0;
        for (std::size_t c = 0; c < num_classes; ++c) t += at(c, c);
        return t;
    }

    double accuracy() const {
        const std::size_t n = total();
        if (n == 0) throw DegenerateInputError("confusion matrix: no samples");
        return static_cast<double>(trace()) / static_cast<double>(n);
    }

    /// Row-wise recall; rows with zero support report nullopt, which is
    /// distinct from a recall of 0.
    std::vector<std::optional<double>> per_class_recall() const {
        std::vector<std::optional<double>> out(num_classes);
        for (std::size_t c = 0; c < num_classes; ++c) {
            std::size_t row = 0;
            for (std::size_t p = 0; p < num_classes; ++p) row += at(c, p);
            if (row > 0) out[c] = static_cast<double>(at(c, c)) / static_cast<double>(row);
        }
        return out;
    }
};

/// Cluster-quality summary of an embedding set. Cosine similarities and
/// distances throughout, since stage-1 embeddings live on the unit sphere.
struct EmbeddingQuality {
    double mean_intra_cosine = 0.0;
    double mean_inter_cosine = 0.0;
    double separation_ratio = 0.0;  // (1 + intra) / (1 + inter)
    double mean_silhouette = 0.0;
    std::size_t excluded_singleton_classes = 0;
};

/// Pairwise cosine statistics and mean silhouette. Classes with a single
/// sample are excluded from the intra mean (counted as warnings) but still
/// act as neighbors. A zero-spread configuration has silhouette 0.
inline EmbeddingQuality embedding_quality(const std::vector<Tensor>& embeddings, const std::vector<int>& labels) {
    if (embeddings.size() != labels.size()) throw UsageError("embedding quality: size mismatch");
    const std::size_t n = embeddings.size();
    if (n < 2) throw DegenerateInputError("embedding quality: need at least 2 samples");

    std::map<int, std::size_t> class_sizes;
    for (int l : labels) class_sizes[l]++;
    if (class_sizes.size() < 2) {
        throw DegenerateInputError("embedding quality: need at least 2 classes present");
    }

    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        norms[i] = l2_norm(embeddings[i]);
        if (!(norms[i] > 0.0)) throw DegenerateInputError("embedding quality: zero-norm embedding");
    }
    auto cosine = [&](std::size_t i, std::size_t j) {
        double d = 0.0;
        for (std::size_t k = 0; k < embeddings[i].numel(); ++k) d += embeddings[i][k] * embeddings[j][k];
        return d / (norms[i] * norms[j]);
    };

    KahanSum intra_sum, inter_sum;
    std::size_t intra_count = 0, inter_count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double c = cosine(i, j);
            if (labels[i] == labels[j]) {
                intra_sum.add(c);
                ++intra_count;
            } else {
                inter_sum.add(c);
                ++inter_count;
            }
        }
    }
    if (intra_count == 0) throw DegenerateInputError("embedding quality: no intra-class pairs");
    if (inter_count == 0) throw DegenerateInputError("embedding quality: no inter-class pairs");

    EmbeddingQuality q;
    q.mean_intra_cosine = intra_sum.value() / static_cast<double>(intra_count);
    q.mean_inter_cosine = inter_sum.value() / static_cast<double>(inter_count);
    q.separation_ratio = (1.0 + q.mean_intra_cosine) / std::max(1.0 + q.mean_inter_cosine, 1e-12);
    for (const auto& [cls, size] : class_sizes) {
        if (size == 1) ++q.excluded_singleton_classes;
    }

    // Silhouette with cosine distance (1 - cos); singleton-cluster samples
    // score 0, as does the degenerate a == b == 0 case.
    KahanSum sil_sum;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t own = class_sizes[labels[i]];
        if (own == 1) {
            sil_sum.add(0.0);
            continue;
        }
        std::map<int, std::pair<KahanSum, std::size_t>> per_class;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            auto& [sum, count] = per_class[labels[j]];
            sum.add(1.0 - cosine(i, j));
            ++count;
        }
        const auto& own_acc = per_class[labels[i]];
        const double a = own_acc.first.value() / static_cast<double>(own_acc.second);
        double b = std::numeric_limits<double>::infinity();
        for (const auto& [cls, acc] : per_class) {
            if (cls == labels[i]) continue;
            b = std::min(b, acc.first.value() / static_cast<double>(acc.second));
        }
        const double denom = std::max(a, b);
        sil_sum.add(denom > 0.0 ? (b - a) / denom : 0.0);
    }
    q.mean_silhouette = sil_sum.value() / static_cast<double>(n);
    return q;
}

/// Full fused forward pass for one sample; probabilities over classes.
inline Tensor predict_probs(const ModelParams& params, const ModelConfig& cfg, const Sample& sample) {
    GradientTape tape;
    BoundParams bound = bind_params(tape, params, /*trainable=*/false);
    Variable rep = encoder_forward(tape, tape.constant(sample.image), bound, cfg);
    std::vector<Variable> aux_feats;
    for (const std::string& name : cfg.aux_names()) {
        const Tensor* aux = sample.find_aux(name);
        if (aux == nullptr) {
            throw ConfigError("sample '" + sample.id + "' lacks auxiliary '" + name + "' required by the model");
        }
        aux_feats.push_back(aux_featurize(tape, *aux, name, bound, cfg));
    }
    Variable fused = fuse(tape, rep, aux_feats, cfg);
    return tape.value(classifier_forward(tape, fused, bound, cfg));
}

struct EvalResult {
    double accuracy = 0.0;
    std::vector<std::optional<double>> per_class_recall;
    ConfusionMatrix confusion{0};
};

inline std::size_t argmax(const Tensor& t) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < t.numel(); ++i)
        if (t[i] > t[best]) best = i;
    return best;
}

/// Argmax classification over a dataset, no augmentation.
inline EvalResult evaluate_classifier(const ModelParams& params, const ModelConfig& cfg, const Dataset& data) {
    if (data.max_label() >= static_cast<int>(cfg.num_classes)) {
        throw ConfigError("dataset labels reach " + std::to_string(data.max_label()) +
                          " but the checkpoint has " + std::to_string(cfg.num_classes) + " classes");
    }
    std::vector<std::size_t> preds(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
        preds[i] = argmax(predict_probs(params, cfg, data.sample(i)));
    });
    EvalResult r;
    r.confusion = ConfusionMatrix(cfg.num_classes);
    for (std::size_t i = 0; i < data.size(); ++i) {
        r.confusion.at(static_cast<std::size_t>(data.sample(i).label), preds[i])++;
    }
    r.accuracy = r.confusion.accuracy();
    r.per_class_recall = r.confusion.per_class_recall();
    return r;
}

/// Encoder+projection embeddings of a dataset, then embedding_quality.
inline EmbeddingQuality evaluate_embeddings(const ModelParams& params, const ModelConfig& cfg, const Dataset& data) {
    std::vector<Tensor> zs(data.size());
    std::vector<int> labels(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
        zs[i] = embed_image(params, cfg, data.sample(i).image);
        labels[i] = data.sample(i).label;
    });
    return embedding_quality(zs, labels);
}

inline nlohmann::ordered_json embedding_quality_json(const EmbeddingQuality& q) {
    nlohmann::ordered_json j;
    j["mean_intra_cosine"] = q.mean_intra_cosine;
    j["mean_inter_cosine"] = q.mean_inter_cosine;
    j["separation_ratio"] = q.separation_ratio;
    j["mean_silhouette"] = q.mean_silhouette;
    j["excluded_singleton_classes"] = q.excluded_singleton_classes;
    return j;
}

inline nlohmann::ordered_json eval_report_json(const EvalResult& r, const EmbeddingQuality& q) {
    nlohmann::ordered_json j;
    j["accuracy"] = r.accuracy;
    nlohmann::ordered_json recalls = nlohmann::ordered_json::array();
    for (const auto& rec : r.per_class_recall) {
        if (rec) recalls.push_back(*rec);
        else recalls.push_back(nullptr);
    }
    j["per_class_recall"] = recalls;
    nlohmann::ordered_json confusion = nlohmann::ordered_json::array();
    for (std::size_t t = 0; t < r.confusion.num_classes; ++t) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (std::size_t p = 0; p < r.confusion.num_classes; ++p) row.push_back(r.confusion.at(t, p));
        confusion.push_back(row);
    }
    j["confusion"] = confusion;
    j["embedding_quality"] = embedding_quality_json(q);
    return j;
}

}  // namespace mscn
