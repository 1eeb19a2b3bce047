#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mscn/tape.hpp"
#include "mscn/tensor.hpp"

namespace mscn {

/// Temperature, per-class balancing weights and focusing exponent. A single
/// alpha entry broadcasts to every ground-truth class.
struct LossConfig {
    double tau = 0.1;
    std::vector<double> alpha{0.8};
    double gamma = 2.0;

    double alpha_for(int label) const {
        if (alpha.size() == 1) return alpha[0];
        return alpha[static_cast<std::size_t>(label)];
    }

    void validate(std::size_t num_classes) const {
        if (!(tau > 0.0)) throw ConfigError("loss config: tau must be positive, got " + std::to_string(tau));
        if (!(gamma >= 0.0)) throw ConfigError("loss config: gamma must be non-negative");
        if (alpha.size() != 1 && alpha.size() != num_classes) {
            throw ConfigError("loss config: alpha must have 1 or " + std::to_string(num_classes) + " entries");
        }
        for (double a : alpha) {
            if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("loss config: alpha entries must lie in [0,1]");
        }
    }
};

/// Unit-norm projected embeddings with class labels; the contrastive batch.
struct LabeledEmbeddingBatch {
    std::vector<Tensor> embeddings;
    std::vector<int> labels;

    void validate() const {
        if (embeddings.size() != labels.size()) {
            throw UsageError("embedding batch: " + std::to_string(embeddings.size()) + " embeddings vs " +
                             std::to_string(labels.size()) + " labels");
        }
        if (embeddings.empty()) throw DegenerateInputError("embedding batch: empty");
        const std::size_t d = embeddings.front().dim(0);
        for (std::size_t i = 0; i < embeddings.size(); ++i) {
            const Tensor& z = embeddings[i];
            if (z.rank() != 1 || z.dim(0) != d) {
                throw ShapeError("embedding batch: element " + std::to_string(i) + " has shape " + z.shape_str());
            }
            if (std::fabs(l2_norm(z) - 1.0) > 1e-9) {
                throw ValidationError("embedding batch: element " + std::to_string(i) + " is not unit norm");
            }
            if (labels[i] < 0) throw ValidationError("embedding batch: negative label at " + std::to_string(i));
        }
    }
};

namespace detail {

inline void check_contrastive_args(std::size_t n, double tau) {
    if (n < 2) throw DegenerateInputError("contrastive loss: batch of " + std::to_string(n) + " needs at least 2");
    if (!(tau > 0.0)) throw ConfigError("contrastive loss: tau must be positive, got " + std::to_string(tau));
}

inline double logsumexp(const std::vector<double>& v) {
    double m = v.front();
    for (double x : v) m = std::max(m, x);
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

}  // namespace detail

/// Supervised contrastive loss over a batch of unit-norm embeddings.
///
/// For each anchor i, the positives P_i are the other same-label members and
/// the contrast set A_i is everything but i. Anchors without positives are
/// skipped. The value is the plain sum over anchors (no anchor averaging);
/// each anchor term averages over its positives. Computed via log-sum-exp.
inline double supervised_contrastive_loss(const LabeledEmbeddingBatch& batch, double tau) {
    detail::check_contrastive_args(batch.embeddings.size(), tau);
    batch.validate();
    const std::size_t n = batch.embeddings.size();
    double total = 0.0;
    std::vector<double> sims;
    sims.reserve(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t positives = 0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i && batch.labels[j] == batch.labels[i]) ++positives;
        if (positives == 0) continue;

        sims.clear();
        double pos_sum = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            if (k == i) continue;
            double s = 0.0;
            const Tensor& zi = batch.embeddings[i];
            const Tensor& zk = batch.embeddings[k];
            for (std::size_t c = 0; c < zi.numel(); ++c) s += zi[c] * zk[c];
            s /= tau;
            sims.push_back(s);
            if (batch.labels[k] == batch.labels[i]) pos_sum += s;
        }
        const double lse = detail::logsumexp(sims);
        // -(1/|P_i|) * sum_j (s_ij - lse)
        total += lse - pos_sum / static_cast<double>(positives);
    }
    return total;
}

/// Tape form of the contrastive loss; differentiable w.r.t. the embeddings
/// (and anything upstream of them). Returns a scalar variable; a batch where
/// every anchor lacks positives yields a constant zero.
inline Variable supervised_contrastive_loss(GradientTape& tape, std::span<const Variable> embeddings,
                                            std::span<const int> labels, double tau) {
    detail::check_contrastive_args(embeddings.size(), tau);
    if (embeddings.size() != labels.size()) throw UsageError("contrastive loss: embeddings/labels size mismatch");
    const std::size_t n = embeddings.size();
    Variable total{};
    std::vector<Variable> sims;
    std::vector<std::size_t> pos_slots;
    for (std::size_t i = 0; i < n; ++i) {
        sims.clear();
        pos_slots.clear();
        for (std::size_t k = 0; k < n; ++k) {
            if (k == i) continue;
            if (labels[k] == labels[i]) pos_slots.push_back(sims.size());
            sims.push_back(tape.scale(tape.dot(embeddings[i], embeddings[k]), 1.0 / tau));
        }
        if (pos_slots.empty()) continue;
        Variable log_frac = tape.log_softmax(tape.stack(sims));
        Variable acc{};
        for (std::size_t slot : pos_slots) {
            Variable term = tape.pick(log_frac, slot);
            acc = acc.valid() ? tape.add(acc, term) : term;
        }
        Variable anchor = tape.scale(acc, -1.0 / static_cast<double>(pos_slots.size()));
        total = total.valid() ? tape.add(total, anchor) : anchor;
    }
    if (!total.valid()) return tape.constant(0.0);
    return total;
}

namespace detail {

inline constexpr double kProbFloor = 1e-15;

inline void check_probability_rows(const Tensor& probs) {
    if (probs.rank() != 2 || probs.dim(0) == 0 || probs.dim(1) == 0) {
        throw ShapeError("focal loss: expected [N x C] probabilities, got " + probs.shape_str());
    }
    const std::size_t n = probs.dim(0), c = probs.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double p = probs[i * c + j];
            if (!(p >= 0.0 && p <= 1.0)) {
                throw ValidationError("focal loss: probability out of [0,1] in row " + std::to_string(i));
            }
            row += p;
        }
        if (std::fabs(row - 1.0) > 1e-9) {
            throw ValidationError("focal loss: row " + std::to_string(i) + " sums to " + std::to_string(row));
        }
    }
}

}  // namespace detail

/// Focal loss, mean over the batch: -alpha_t (1 - p_t)^gamma log(p_t).
/// p_t of exactly zero is clamped to 1e-15; each clamp bumps *clamp_count.
inline double focal_loss(const Tensor& probs, const std::vector<int>& labels, const LossConfig& config,
                         std::size_t* clamp_count = nullptr) {
    detail::check_probability_rows(probs);
    const std::size_t n = probs.dim(0), c = probs.dim(1);
    if (labels.size() != n) throw UsageError("focal loss: labels size mismatch");
    config.validate(c);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const int t = labels[i];
        if (t < 0 || static_cast<std::size_t>(t) >= c) {
            throw ValidationError("focal loss: label " + std::to_string(t) + " out of range in row " + std::to_string(i));
        }
        double pt = probs[i * c + static_cast<std::size_t>(t)];
        if (pt < detail::kProbFloor) {
            pt = detail::kProbFloor;
            if (clamp_count) ++*clamp_count;
        }
        const double log_pt = std::log(pt);
        total += -config.alpha_for(t) * std::pow(1.0 - pt, config.gamma) * log_pt;
    }
    return total / static_cast<double>(n);
}

/// Cross-entropy as the exact gamma = 0, alpha = 1 special case.
inline double cross_entropy(const Tensor& probs, const std::vector<int>& labels,
                            std::size_t* clamp_count = nullptr) {
    LossConfig ce;
    ce.alpha = {1.0};
    ce.gamma = 0.0;
    return focal_loss(probs, labels, ce, clamp_count);
}

/// Tape form of the focal loss on per-sample log-probability vectors (the
/// numerically stable path used in training). log_probs[i] is the rank-1
/// log_softmax output for sample i.
inline Variable focal_loss_from_log_probs(GradientTape& tape, std::span<const Variable> log_probs,
                                          std::span<const int> labels, const LossConfig& config,
                                          std::size_t* clamp_count = nullptr) {
    if (log_probs.empty()) throw DegenerateInputError("focal loss: empty batch");
    if (log_probs.size() != labels.size()) throw UsageError("focal loss: log_probs/labels size mismatch");
    const std::size_t c = tape.value(log_probs.front()).dim(0);
    config.validate(c);
    const double log_floor = std::log(detail::kProbFloor);
    Variable acc{};
    for (std::size_t i = 0; i < log_probs.size(); ++i) {
        const int t = labels[i];
        if (t < 0 || static_cast<std::size_t>(t) >= c) {
            throw ValidationError("focal loss: label " + std::to_string(t) + " out of range in row " + std::to_string(i));
        }
        Variable log_pt = tape.pick(log_probs[i], static_cast<std::size_t>(t));
        if (tape.value(log_pt)[0] < log_floor) {
            if (clamp_count) ++*clamp_count;
            log_pt = tape.clamp_min(log_pt, log_floor);
        }
        Variable modulator = tape.pow_const(tape.affine(tape.exp(log_pt), -1.0, 1.0), config.gamma);
        Variable term = tape.scale(tape.mul(modulator, log_pt), -config.alpha_for(t));
        acc = acc.valid() ? tape.add(acc, term) : term;
    }
    return tape.scale(acc, 1.0 / static_cast<double>(log_probs.size()));
}

}  // namespace mscn
