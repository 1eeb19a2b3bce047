#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mscn/checkpoint.hpp"
#include "mscn/data.hpp"
#include "mscn/eval.hpp"
#include "mscn/losses.hpp"
#include "mscn/model.hpp"
#include "mscn/optimizer.hpp"

namespace mscn {

struct TrainConfig {
    int epochs_stage1 = 15;
    int epochs_stage2 = 10;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    LossConfig loss;
    ModelConfig model;
    OptimizerConfig opt_stage1;
    OptimizerConfig opt_stage2;
    AugmentPolicy augment_policy;
    bool two_view = false;

    void validate() const {
        if (epochs_stage1 < 1 || epochs_stage2 < 1) throw ConfigError("train config: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
        model.validate();
        loss.validate(model.num_classes);
        opt_stage1.validate();
        opt_stage2.validate();
    }
};

struct EpochRecord {
    int stage = 1;
    int epoch = 1;
    double mean_loss = 0.0;
    std::optional<double> train_accuracy;
    double seconds = 0.0;
    std::optional<double> val_loss;
    std::optional<double> val_accuracy;
    std::size_t degenerate_batches = 0;  // stage-1 batches without a single positive pair
    std::size_t prob_clamps = 0;         // focal-loss p_t floor hits
};

/// Loss/metric history plus run metadata. The JSONL report is the pinned
/// external format (one record per epoch with exactly the five keys below);
/// everything else lands in metrics.json.
struct TrainReport {
    std::vector<EpochRecord> epochs;
    std::uint64_t seed = 0;
    std::size_t batch_size = 0;
    nlohmann::ordered_json config_echo;
    nlohmann::ordered_json final_eval;

    std::string jsonl() const {
        std::string out;
        for (const EpochRecord& r : epochs) {
            nlohmann::ordered_json j;
            j["stage"] = r.stage;
            j["epoch"] = r.epoch;
            j["mean_loss"] = r.mean_loss;
            if (r.train_accuracy) j["train_accuracy"] = *r.train_accuracy;
            else j["train_accuracy"] = nullptr;
            j["seconds"] = r.seconds;
            out += j.dump();
            out += '\n';
        }
        return out;
    }

    nlohmann::ordered_json metrics_json() const {
        nlohmann::ordered_json j;
        j["seed"] = seed;
        j["batch_size"] = batch_size;
        nlohmann::ordered_json records = nlohmann::ordered_json::array();
        for (const EpochRecord& r : epochs) {
            nlohmann::ordered_json e;
            e["stage"] = r.stage;
            e["epoch"] = r.epoch;
            e["mean_loss"] = r.mean_loss;
            e["train_accuracy"] = nullptr;
            if (r.train_accuracy) e["train_accuracy"] = *r.train_accuracy;
            e["val_loss"] = nullptr;
            if (r.val_loss) e["val_loss"] = *r.val_loss;
            e["val_accuracy"] = nullptr;
            if (r.val_accuracy) e["val_accuracy"] = *r.val_accuracy;
            e["degenerate_batches"] = r.degenerate_batches;
            e["prob_clamps"] = r.prob_clamps;
            e["seconds"] = r.seconds;
            records.push_back(e);
        }
        j["epochs"] = records;
        j["final_eval"] = final_eval.is_null() ? nlohmann::ordered_json() : final_eval;
        j["config"] = config_echo.is_null() ? nlohmann::ordered_json() : config_echo;
        return j;
    }

    void write(const std::filesystem::path& jsonl_path, const std::filesystem::path& metrics_path) const {
        std::ofstream f(jsonl_path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write report: " + jsonl_path.string());
        f << jsonl();
        std::ofstream m(metrics_path, std::ios::binary | std::ios::trunc);
        if (!m) throw IoError("cannot write metrics: " + metrics_path.string());
        m << metrics_json().dump(2) << '\n';
    }
};

namespace detail {

inline double elapsed_seconds(std::chrono::steady_clock::time_point start) {
    if (deterministic_mode()) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline void check_dataset_shape(const Dataset& data, const ModelConfig& cfg, const char* what) {
    const auto shape = data.image_shape();
    if (shape[0] != cfg.image_shape[0]) {
        throw ConfigError(std::string(what) + ": dataset has " + std::to_string(shape[0]) +
                          " image channels, model expects " + std::to_string(cfg.image_shape[0]));
    }
    if (cfg.encoder_kind == ModelConfig::EncoderKind::mlp &&
        (shape[1] != cfg.image_shape[1] || shape[2] != cfg.image_shape[2])) {
        throw ConfigError(std::string(what) + ": mlp encoder requires images of the configured size");
    }
}

inline void check_aux_available(const Dataset& data, const ModelConfig& cfg, const char* what) {
    if (cfg.num_aux > 0 && !data.has_canonical_aux(cfg.num_aux)) {
        throw ConfigError(std::string(what) + ": manifest lacks the first " + std::to_string(cfg.num_aux) +
                          " canonical auxiliaries required by num_aux");
    }
}

inline bool has_positive_pair(const std::vector<int>& labels) {
    for (std::size_t i = 0; i < labels.size(); ++i)
        for (std::size_t j = i + 1; j < labels.size(); ++j)
            if (labels[i] == labels[j]) return true;
    return false;
}

/// Mean contrastive loss over sequential validation chunks (no shuffle, no
/// augmentation). Chunks that cannot form a batch are skipped.
inline std::optional<double> validation_contrastive_loss(const Dataset& val, const ModelParams& params,
                                                         const TrainConfig& cfg) {
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 2 <= val.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(val.size(), start + cfg.batch_size);
        if (end - start < 2) break;
        LabeledEmbeddingBatch batch;
        for (std::size_t i = start; i < end; ++i) {
            batch.embeddings.push_back(embed_image(params, cfg.model, val.sample(i).image));
            batch.labels.push_back(val.sample(i).label);
        }
        sum += supervised_contrastive_loss(batch, cfg.loss.tau);
        ++batches;
    }
    if (batches == 0) return std::nullopt;
    return sum / static_cast<double>(batches);
}

struct ValClassifierMetrics {
    double loss = 0.0;
    double accuracy = 0.0;
};

inline std::optional<ValClassifierMetrics> validation_classifier_metrics(const Dataset& val,
                                                                         const ModelParams& params,
                                                                         const TrainConfig& cfg) {
    if (val.size() == 0) return std::nullopt;
    Tensor probs({val.size(), cfg.model.num_classes});
    std::vector<int> labels(val.size());
    std::size_t correct = 0;
    for (std::size_t i = 0; i < val.size(); ++i) {
        Tensor p = predict_probs(params, cfg.model, val.sample(i));
        for (std::size_t c = 0; c < cfg.model.num_classes; ++c) probs[i * cfg.model.num_classes + c] = p[c];
        labels[i] = val.sample(i).label;
        if (static_cast<int>(argmax(p)) == labels[i]) ++correct;
    }
    ValClassifierMetrics m;
    m.loss = focal_loss(probs, labels, cfg.loss);
    m.accuracy = static_cast<double>(correct) / static_cast<double>(val.size());
    return m;
}

}  // namespace detail

/// Stage 1: trains encoder + projection head with the supervised contrastive
/// loss. Classifier and aux-featurizer parameters are never touched. One
/// augmented view per sample per epoch (two with two_view).
inline void train_representation(const Dataset& train, const Dataset* val, ModelParams& params,
                                 const TrainConfig& cfg, TrainReport& report) {
    cfg.validate();
    if (cfg.batch_size < 2) {
        throw ConfigError("stage 1: batch_size must be >= 2 for the contrastive loss");
    }
    detail::check_dataset_shape(train, cfg.model, "stage 1");
    report.batch_size = cfg.batch_size;
    Optimizer opt(cfg.opt_stage1);

    for (int epoch = 1; epoch <= cfg.epochs_stage1; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        const auto batches = make_batches(train.size(), cfg.batch_size, mix_seed(cfg.seed, {1}),
                                          static_cast<std::uint64_t>(epoch));
        double loss_sum = 0.0;
        std::size_t degenerate = 0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            if (batches[b].size() < 2 && !cfg.two_view) {
                // A trailing single-sample batch has no anchor with positives;
                // it contributes zero loss, like an all-distinct-labels batch.
                ++degenerate;
                continue;
            }
            GradientTape tape;
            BoundParams bound = bind_params(tape, params);
            std::vector<Variable> embeddings;
            std::vector<int> labels;
            const int views = cfg.two_view ? 2 : 1;
            for (std::size_t idx : batches[b]) {
                for (int view = 0; view < views; ++view) {
                    Sample s = augment(train.sample(idx), cfg.augment_policy,
                                       mix_seed(cfg.seed, {0x517A6E, 1, static_cast<std::uint64_t>(epoch), idx,
                                                           static_cast<std::uint64_t>(view)}));
                    Variable rep = encoder_forward(tape, tape.constant(s.image), bound, cfg.model);
                    embeddings.push_back(projection_forward(tape, rep, bound, cfg.model));
                    labels.push_back(s.label);
                }
            }
            Variable loss = supervised_contrastive_loss(tape, embeddings, labels, cfg.loss.tau);
            const double loss_value = tape.value(loss).item();
            if (!std::isfinite(loss_value)) {
                throw NumericError("non-finite loss at stage 1 epoch " + std::to_string(epoch) + " batch " +
                                   std::to_string(b));
            }
            if (!detail::has_positive_pair(labels)) ++degenerate;
            tape.backward(loss);
            std::map<std::string, Tensor> grads;
            for (const auto& [name, var] : bound.vars) {
                const std::string group = ModelParams::group_of(name);
                if (group == "encoder" || group == "projection") grads.emplace(name, tape.grad(var));
            }
            opt.step(params, grads);
            loss_sum += loss_value;
        }
        EpochRecord rec;
        rec.stage = 1;
        rec.epoch = epoch;
        rec.mean_loss = loss_sum / static_cast<double>(batches.size());
        rec.degenerate_batches = degenerate;
        if (val != nullptr) rec.val_loss = detail::validation_contrastive_loss(*val, params, cfg);
        rec.seconds = detail::elapsed_seconds(start);
        report.epochs.push_back(rec);
    }
}

/// Stage 2: freezes encoder and projection, then trains classifier and aux
/// featurizer with the focal loss on the fused representation.
inline void train_classifier(const Dataset& train, const Dataset* val, ModelParams& params,
                             const TrainConfig& cfg, TrainReport& report) {
    cfg.validate();
    detail::check_dataset_shape(train, cfg.model, "stage 2");
    detail::check_aux_available(train, cfg.model, "stage 2");
    if (val != nullptr) detail::check_aux_available(*val, cfg.model, "stage 2 validation");

    params.freeze_group("encoder");
    params.freeze_group("projection");
    report.batch_size = cfg.batch_size;
    Optimizer opt(cfg.opt_stage2);
    const std::vector<std::string> aux_names = cfg.model.aux_names();

    for (int epoch = 1; epoch <= cfg.epochs_stage2; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        const auto batches = make_batches(train.size(), cfg.batch_size, mix_seed(cfg.seed, {2}),
                                          static_cast<std::uint64_t>(epoch));
        double loss_sum = 0.0;
        std::size_t correct = 0, total = 0, clamps = 0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            GradientTape tape;
            BoundParams bound = bind_params(tape, params);
            std::vector<Variable> log_probs;
            std::vector<int> labels;
            for (std::size_t idx : batches[b]) {
                Sample s = augment(train.sample(idx), cfg.augment_policy,
                                   mix_seed(cfg.seed, {0x517A6E, 2, static_cast<std::uint64_t>(epoch), idx, 0}));
                Variable rep = encoder_forward(tape, tape.constant(s.image), bound, cfg.model);
                std::vector<Variable> aux_feats;
                for (const std::string& name : aux_names) {
                    const Tensor* aux = s.find_aux(name);
                    if (aux == nullptr) {
                        throw ConfigError("stage 2: sample '" + s.id + "' lacks auxiliary '" + name + "'");
                    }
                    aux_feats.push_back(aux_featurize(tape, *aux, name, bound, cfg.model));
                }
                Variable fused = fuse(tape, rep, aux_feats, cfg.model);
                Variable logp = classifier_log_probs(tape, fused, bound, cfg.model);
                if (static_cast<int>(argmax(tape.value(logp))) == s.label) ++correct;
                ++total;
                log_probs.push_back(logp);
                labels.push_back(s.label);
            }
            Variable loss = focal_loss_from_log_probs(tape, log_probs, labels, cfg.loss, &clamps);
            const double loss_value = tape.value(loss).item();
            if (!std::isfinite(loss_value)) {
                throw NumericError("non-finite loss at stage 2 epoch " + std::to_string(epoch) + " batch " +
                                   std::to_string(b));
            }
            tape.backward(loss);
            std::map<std::string, Tensor> grads;
            for (const auto& [name, var] : bound.vars) {
                const std::string group = ModelParams::group_of(name);
                if (group == "classifier" || group == "aux") grads.emplace(name, tape.grad(var));
            }
            opt.step(params, grads);
            loss_sum += loss_value;
        }
        EpochRecord rec;
        rec.stage = 2;
        rec.epoch = epoch;
        rec.mean_loss = loss_sum / static_cast<double>(batches.size());
        rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(total);
        rec.prob_clamps = clamps;
        if (val != nullptr) {
            if (auto m = detail::validation_classifier_metrics(*val, params, cfg)) {
                rec.val_loss = m->loss;
                rec.val_accuracy = m->accuracy;
            }
        }
        rec.seconds = detail::elapsed_seconds(start);
        report.epochs.push_back(rec);
    }
}

struct PipelineResult {
    ModelParams params;
    TrainReport report;
};

/// The full two-stage procedure: init, representation training, classifier
/// fine-tuning, optional final test evaluation. Fully determined by
/// (config, data, seed).
inline PipelineResult run_pipeline(const Dataset& train, const Dataset* val, const Dataset* test,
                                   const TrainConfig& cfg, bool stage1_only = false) {
    cfg.validate();
    PipelineResult out{ModelParams::init(cfg.model, cfg.seed), TrainReport{}};
    out.report.seed = cfg.seed;
    out.report.batch_size = cfg.batch_size;
    train_representation(train, val, out.params, cfg, out.report);
    if (!stage1_only) {
        train_classifier(train, val, out.params, cfg, out.report);
    }
    if (test != nullptr) {
        EvalResult ev = evaluate_classifier(out.params, cfg.model, *test);
        EmbeddingQuality q = evaluate_embeddings(out.params, cfg.model, *test);
        out.report.final_eval = eval_report_json(ev, q);
    }
    return out;
}

}  // namespace mscn
