#include <gtest/gtest.h>

#include <cmath>

#include "mscn/losses.hpp"
#include "mscn/rng.hpp"
#include "mscn/selfcheck.hpp"

using namespace mscn;

namespace {

LabeledEmbeddingBatch random_unit_batch(Rng& rng, std::size_t n, std::size_t d, std::size_t classes) {
    LabeledEmbeddingBatch b;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor z({d});
        double norm = 0.0;
        do {
            for (double& v : z.values()) v = rng.normal();
            norm = l2_norm(z);
        } while (norm < 1e-6);
        for (double& v : z.values()) v /= norm;
        b.embeddings.push_back(std::move(z));
        b.labels.push_back(static_cast<int>(rng.below(classes)));
    }
    return b;
}

}  // namespace

TEST(ContrastiveLoss, SolePositiveFillsContrastSet) {
    LabeledEmbeddingBatch b;
    b.embeddings = {Tensor::vector({0.6, 0.8}), Tensor::vector({0.6, 0.8})};
    b.labels = {1, 1};
    EXPECT_EQ(supervised_contrastive_loss(b, 0.1), 0.0);
}

TEST(ContrastiveLoss, WorkedThreeElementExample) {
    LabeledEmbeddingBatch b;
    b.embeddings = {Tensor::vector({1, 0}), Tensor::vector({0, 1}), Tensor::vector({-1, 0})};
    b.labels = {0, 0, 1};
    const double got = supervised_contrastive_loss(b, 1.0);
    // anchor 1: log(1 + e^-1), anchor 2: log 2, anchor 3 skipped
    const double want = std::log(1.0 + std::exp(-1.0)) + std::log(2.0);
    EXPECT_NEAR(got, want, 1e-12);
    EXPECT_NEAR(got, 1.006409, 1e-6);
}

TEST(ContrastiveLoss, AllLabelsDistinctGiveZero) {
    LabeledEmbeddingBatch b;
    b.embeddings = {Tensor::vector({1, 0}), Tensor::vector({0, 1}), Tensor::vector({-1, 0})};
    b.labels = {0, 1, 2};
    EXPECT_EQ(supervised_contrastive_loss(b, 0.5), 0.0);
}

TEST(ContrastiveLoss, ErrorsOnDegenerateArguments) {
    LabeledEmbeddingBatch single;
    single.embeddings = {Tensor::vector({1, 0})};
    single.labels = {0};
    EXPECT_THROW(supervised_contrastive_loss(single, 0.1), DegenerateInputError);

    LabeledEmbeddingBatch pair;
    pair.embeddings = {Tensor::vector({1, 0}), Tensor::vector({0, 1})};
    pair.labels = {0, 0};
    EXPECT_THROW(supervised_contrastive_loss(pair, 0.0), ConfigError);
    EXPECT_THROW(supervised_contrastive_loss(pair, -1.0), ConfigError);
}

TEST(ContrastiveLoss, RejectsNonUnitEmbeddings) {
    LabeledEmbeddingBatch b;
    b.embeddings = {Tensor::vector({1, 1}), Tensor::vector({0, 1})};
    b.labels = {0, 0};
    EXPECT_THROW(supervised_contrastive_loss(b, 0.1), ValidationError);
}

TEST(ContrastiveLoss, NonNegativeOnRandomBatches) {
    Rng rng(41);
    for (int c = 0; c < 50; ++c) {
        LabeledEmbeddingBatch b = random_unit_batch(rng, 2 + rng.below(10), 2 + rng.below(8), 3);
        EXPECT_GE(supervised_contrastive_loss(b, 0.1), 0.0);
    }
}

TEST(ContrastiveLoss, StrictlyPositiveWithAnyNegativePresent) {
    LabeledEmbeddingBatch b;
    b.embeddings = {Tensor::vector({1, 0}), Tensor::vector({1, 0}), Tensor::vector({0, 1})};
    b.labels = {0, 0, 1};
    EXPECT_GT(supervised_contrastive_loss(b, 0.5), 0.0);
}

TEST(ContrastiveLoss, PermutationInvariant) {
    Rng rng(17);
    LabeledEmbeddingBatch b = random_unit_batch(rng, 12, 8, 3);
    const double base = supervised_contrastive_loss(b, 0.1);
    std::vector<std::size_t> perm(b.embeddings.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    for (int trial = 0; trial < 5; ++trial) {
        rng.shuffle(perm);
        LabeledEmbeddingBatch p;
        for (std::size_t i : perm) {
            p.embeddings.push_back(b.embeddings[i]);
            p.labels.push_back(b.labels[i]);
        }
        EXPECT_NEAR(supervised_contrastive_loss(p, 0.1), base, 1e-12);
    }
}

TEST(ContrastiveLoss, DecreasesWhenPositivePairSimilarityRises) {
    // z2 rotates toward z1 while both cross-similarities with z3 stay 0.
    double prev = -1.0;
    bool first = true;
    for (double angle : {1.2, 0.9, 0.6, 0.3}) {
        LabeledEmbeddingBatch b;
        b.embeddings = {Tensor::vector({1, 0, 0}), Tensor::vector({std::cos(angle), std::sin(angle), 0}),
                        Tensor::vector({0, 0, 1})};
        b.labels = {0, 0, 1};
        const double loss = supervised_contrastive_loss(b, 0.5);
        if (!first) {
            EXPECT_LT(loss, prev);
        }
        prev = loss;
        first = false;
    }
}

TEST(ContrastiveLoss, MatchesDoubleLoopOracleAcrossTemperatures) {
    Rng rng(5);
    for (double tau : {0.1, 0.5, 1.0}) {
        for (int c = 0; c < 30; ++c) {
            LabeledEmbeddingBatch b = random_unit_batch(rng, 2 + rng.below(15), 2 + rng.below(31), 4);
            const double got = supervised_contrastive_loss(b, tau);
            const double want =
                static_cast<double>(contrastive_oracle(b.embeddings, b.labels, static_cast<long double>(tau)));
            EXPECT_NEAR(got, want, 1e-9);
        }
    }
}

TEST(ContrastiveLoss, TapeFormMatchesValueForm) {
    Rng rng(23);
    for (int c = 0; c < 20; ++c) {
        LabeledEmbeddingBatch b = random_unit_batch(rng, 2 + rng.below(8), 4, 3);
        GradientTape t;
        std::vector<Variable> zs;
        for (const Tensor& z : b.embeddings) zs.push_back(t.constant(z));
        const double got = t.value(supervised_contrastive_loss(t, zs, b.labels, 0.1)).item();
        EXPECT_NEAR(got, supervised_contrastive_loss(b, 0.1), 1e-12);
    }
}

TEST(ContrastiveLoss, GradientMatchesFiniteDifferences) {
    // Raw coordinates feed tape-side normalization, then the loss.
    const std::size_t n = 4, d = 3;
    GradCheckProblem p = detail::make_single_leaf_problem(
        "contrastive_through_normalize", n * d,
        [](GradientTape& t, Variable leaf) {
            std::vector<Variable> zs;
            for (std::size_t i = 0; i < 4; ++i) {
                zs.push_back(t.l2_normalize(detail::slice(t, leaf, i * 3, {3})));
            }
            const std::vector<int> labels{0, 0, 1, 1};
            return supervised_contrastive_loss(t, zs, labels, 0.3);
        },
        [](Rng& rng, std::vector<double>& x) {
            for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1, 1);
            for (std::size_t i = 0; i < 4; ++i) {
                double norm = 0.0;
                for (std::size_t j = 0; j < 3; ++j) norm += x[i * 3 + j] * x[i * 3 + j];
                if (std::sqrt(norm) < 0.3) x[i * 3] += 0.7;
            }
        });
    GradCheckReport r = run_gradcheck(p, 20, 77);
    EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST(FocalLoss, PerfectConfidenceIsZero) {
    Tensor probs({1, 3}, {0, 1, 0});
    LossConfig cfg;
    cfg.alpha = {0.8};
    cfg.gamma = 2.0;
    EXPECT_EQ(focal_loss(probs, {1}, cfg), 0.0);
    cfg.gamma = 0.0;
    EXPECT_EQ(focal_loss(probs, {1}, cfg), 0.0);
}

TEST(FocalLoss, ReducesToCrossEntropyAtGammaZero) {
    Tensor probs({1, 2}, {0.5, 0.5});
    LossConfig cfg;
    cfg.alpha = {1.0};
    cfg.gamma = 0.0;
    EXPECT_NEAR(focal_loss(probs, {0}, cfg), 0.693147, 1e-6);
}

TEST(FocalLoss, WorkedExampleAlpha08Gamma2) {
    Tensor probs({1, 2}, {0.5, 0.5});
    LossConfig cfg;
    cfg.alpha = {0.8};
    cfg.gamma = 2.0;
    EXPECT_NEAR(focal_loss(probs, {0}, cfg), 0.8 * 0.25 * std::log(2.0), 1e-12);
    EXPECT_NEAR(focal_loss(probs, {0}, cfg), 0.138629, 1e-6);
}

TEST(FocalLoss, ClampsZeroProbabilityAndCounts) {
    Tensor probs({1, 2}, {1.0, 0.0});
    LossConfig cfg;
    std::size_t clamps = 0;
    const double loss = focal_loss(probs, {1}, cfg, &clamps);
    EXPECT_EQ(clamps, 1u);
    EXPECT_TRUE(std::isfinite(loss));
    EXPECT_NEAR(loss, -0.8 * std::log(1e-15), 1e-9);
}

TEST(FocalLoss, ValidatesRows) {
    LossConfig cfg;
    EXPECT_THROW(focal_loss(Tensor({1, 2}, {0.9, 0.3}), {0}, cfg), ValidationError);
    EXPECT_THROW(focal_loss(Tensor({1, 2}, {1.2, -0.2}), {0}, cfg), ValidationError);
    EXPECT_THROW(focal_loss(Tensor({1, 2}, {0.5, 0.5}), {2}, cfg), ValidationError);
    EXPECT_THROW(focal_loss(Tensor({1, 2}, {0.5, 0.5}), {0, 1}, cfg), UsageError);
}

TEST(FocalLoss, MatchesDirectOracleOnRandomBatches) {
    Rng rng(9);
    for (int c = 0; c < 50; ++c) {
        const std::size_t n = 1 + rng.below(16), k = 2 + rng.below(5);
        Tensor probs({n, k});
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                probs[i * k + j] = std::exp(rng.uniform(-3, 3));
                row += probs[i * k + j];
            }
            for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= row;
            labels[i] = static_cast<int>(rng.below(k));
        }
        LossConfig cfg;
        cfg.alpha = {0.8};
        cfg.gamma = 2.0;
        EXPECT_NEAR(focal_loss(probs, labels, cfg),
                    static_cast<double>(focal_oracle(probs, labels, {0.8L}, 2.0L)), 1e-12);
        LossConfig ce_cfg;
        ce_cfg.alpha = {1.0};
        ce_cfg.gamma = 0.0;
        EXPECT_NEAR(cross_entropy(probs, labels), focal_loss(probs, labels, ce_cfg), 1e-12);
    }
}

TEST(FocalLoss, StrictlyDecreasingInGamma) {
    for (double pt : {0.2, 0.5, 0.9}) {
        Tensor probs({1, 2}, {pt, 1.0 - pt});
        double prev = std::numeric_limits<double>::infinity();
        for (double gamma : {0.0, 1.0, 2.0, 5.0}) {
            LossConfig cfg;
            cfg.alpha = {0.8};
            cfg.gamma = gamma;
            const double loss = focal_loss(probs, {0}, cfg);
            EXPECT_LT(loss, prev);
            prev = loss;
        }
    }
}

TEST(FocalLoss, PerClassAlphaVectorIsIndexedByLabel) {
    Tensor probs({2, 2}, {0.5, 0.5, 0.25, 0.75});
    LossConfig cfg;
    cfg.alpha = {1.0, 0.5};
    cfg.gamma = 0.0;
    const double want = (-1.0 * std::log(0.5) + -0.5 * std::log(0.75)) / 2.0;
    EXPECT_NEAR(focal_loss(probs, {0, 1}, cfg), want, 1e-12);
}

TEST(FocalLoss, TapeFormMatchesValueForm) {
    Rng rng(88);
    for (int c = 0; c < 20; ++c) {
        const std::size_t n = 1 + rng.below(6), k = 2 + rng.below(4);
        GradientTape t;
        Tensor probs({n, k});
        std::vector<Variable> logps;
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            Tensor logits({k});
            for (double& v : logits.values()) v = rng.uniform(-2, 2);
            Variable lp = t.log_softmax(t.constant(logits));
            logps.push_back(lp);
            for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(t.value(lp)[j]);
            labels[i] = static_cast<int>(rng.below(k));
        }
        LossConfig cfg;
        cfg.alpha = {0.8};
        cfg.gamma = 2.0;
        const double got = t.value(focal_loss_from_log_probs(t, logps, labels, cfg)).item();
        EXPECT_NEAR(got, focal_loss(probs, labels, cfg), 1e-12);
    }
}

TEST(FocalLoss, GradientMatchesFiniteDifferences) {
    const std::size_t n = 3, k = 4;
    GradCheckProblem p = detail::make_single_leaf_problem(
        "focal_through_log_softmax", n * k,
        [](GradientTape& t, Variable leaf) {
            std::vector<Variable> logps;
            for (std::size_t i = 0; i < 3; ++i) {
                logps.push_back(t.log_softmax(detail::slice(t, leaf, i * 4, {4})));
            }
            const std::vector<int> labels{0, 2, 3};
            LossConfig cfg;
            cfg.alpha = {0.8};
            cfg.gamma = 2.0;
            return focal_loss_from_log_probs(t, logps, labels, cfg);
        },
        [](Rng& rng, std::vector<double>& x) {
            for (double& v : x) v = rng.uniform(-1, 1);
        });
    GradCheckReport r = run_gradcheck(p, 20, 31);
    EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST(LossConfig, Validation) {
    LossConfig cfg;
    cfg.tau = 0.0;
    EXPECT_THROW(cfg.validate(4), ConfigError);
    cfg.tau = 0.1;
    cfg.gamma = -1.0;
    EXPECT_THROW(cfg.validate(4), ConfigError);
    cfg.gamma = 2.0;
    cfg.alpha = {0.5, 0.5};
    EXPECT_THROW(cfg.validate(4), ConfigError);
    cfg.alpha = {0.5, 0.5, 0.5, 1.5};
    EXPECT_THROW(cfg.validate(4), ConfigError);
    cfg.alpha = {0.5, 0.5, 0.5, 0.5};
    EXPECT_NO_THROW(cfg.validate(4));
}
