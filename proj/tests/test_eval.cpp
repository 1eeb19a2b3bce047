#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "mscn/data.hpp"
#include "mscn/eval.hpp"
#include "mscn/rng.hpp"

using namespace mscn;
namespace fs = std::filesystem;

namespace {

struct QualityOracle {
    double intra = 0.0;
    double inter = 0.0;
    double silhouette = 0.0;
};

/// Test-local all-pairs reimplementation of the embedding metrics.
QualityOracle naive_quality(const std::vector<Tensor>& zs, const std::vector<int>& labels) {
    const std::size_t n = zs.size();
    auto cosine = [&](std::size_t i, std::size_t j) {
        double d = 0.0, ni = 0.0, nj = 0.0;
        for (std::size_t k = 0; k < zs[i].numel(); ++k) {
            d += zs[i][k] * zs[j][k];
            ni += zs[i][k] * zs[i][k];
            nj += zs[j][k] * zs[j][k];
        }
        return d / (std::sqrt(ni) * std::sqrt(nj));
    };
    QualityOracle q;
    std::size_t ic = 0, xc = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            if (labels[i] == labels[j]) {
                q.intra += cosine(i, j);
                ++ic;
            } else {
                q.inter += cosine(i, j);
                ++xc;
            }
        }
    q.intra /= static_cast<double>(ic);
    q.inter /= static_cast<double>(xc);

    double sil = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t own = 0;
        for (std::size_t j = 0; j < n; ++j) own += labels[j] == labels[i];
        if (own == 1) continue;
        double a = 0.0;
        std::size_t ac = 0;
        std::map<int, std::pair<double, std::size_t>> other;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double dist = 1.0 - cosine(i, j);
            if (labels[j] == labels[i]) {
                a += dist;
                ++ac;
            } else {
                other[labels[j]].first += dist;
                other[labels[j]].second++;
            }
        }
        a /= static_cast<double>(ac);
        double b = 1e300;
        for (const auto& [cls, acc] : other) b = std::min(b, acc.first / static_cast<double>(acc.second));
        const double m = std::max(a, b);
        sil += m > 0.0 ? (b - a) / m : 0.0;
    }
    q.silhouette = sil / static_cast<double>(n);
    return q;
}

}  // namespace

TEST(Confusion, PerfectPredictionsGiveIdentity) {
    ConfusionMatrix m(3);
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 5; ++k) m.at(c, c)++;
    EXPECT_EQ(m.accuracy(), 1.0);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t p = 0; p < 3; ++p) EXPECT_EQ(m.at(t, p), t == p ? 5u : 0u);
}

TEST(Confusion, MajorityBaselineOnImbalancedProportions) {
    // constant predictor answering the majority class on (0.5,0.2,0.2,0.1)
    ConfusionMatrix m(4);
    m.at(0, 0) = 50;
    m.at(1, 0) = 20;
    m.at(2, 0) = 20;
    m.at(3, 0) = 10;
    EXPECT_EQ(m.accuracy(), 0.5);
    auto recall = m.per_class_recall();
    EXPECT_EQ(*recall[0], 1.0);
    EXPECT_EQ(*recall[1], 0.0);
    EXPECT_EQ(*recall[3], 0.0);
}

TEST(Confusion, HandTalliedSixPairs) {
    // (label, prediction): (0,0) (0,1) (1,1) (1,1) (2,0) (2,2)
    ConfusionMatrix m(3);
    m.at(0, 0)++;
    m.at(0, 1)++;
    m.at(1, 1)++;
    m.at(1, 1)++;
    m.at(2, 0)++;
    m.at(2, 2)++;
    EXPECT_EQ(m.total(), 6u);
    EXPECT_EQ(m.trace(), 4u);
    EXPECT_NEAR(m.accuracy(), 4.0 / 6.0, 1e-15);
    auto recall = m.per_class_recall();
    EXPECT_NEAR(*recall[0], 0.5, 1e-15);
    EXPECT_NEAR(*recall[1], 1.0, 1e-15);
    EXPECT_NEAR(*recall[2], 0.5, 1e-15);
}

TEST(Confusion, ZeroSupportRowIsUndefinedNotZero) {
    ConfusionMatrix m(3);
    m.at(0, 0) = 2;
    m.at(1, 0) = 1;
    auto recall = m.per_class_recall();
    EXPECT_TRUE(recall[0].has_value());
    EXPECT_TRUE(recall[1].has_value());
    EXPECT_FALSE(recall[2].has_value());
    EXPECT_EQ(m.accuracy(), m.trace() / static_cast<double>(m.total()));
}

TEST(EmbeddingQuality, AntipodalPerfectSeparation) {
    std::vector<Tensor> zs = {Tensor::vector({1, 0}), Tensor::vector({1, 0}), Tensor::vector({-1, 0}),
                              Tensor::vector({-1, 0})};
    std::vector<int> labels = {0, 0, 1, 1};
    EmbeddingQuality q = embedding_quality(zs, labels);
    EXPECT_NEAR(q.mean_intra_cosine, 1.0, 1e-12);
    EXPECT_NEAR(q.mean_inter_cosine, -1.0, 1e-12);
    EXPECT_NEAR(q.mean_silhouette, 1.0, 1e-12);
    EXPECT_EQ(q.excluded_singleton_classes, 0u);
}

TEST(EmbeddingQuality, AllIdenticalIsDegenerateButReportable) {
    std::vector<Tensor> zs(4, Tensor::vector({0, 1}));
    std::vector<int> labels = {0, 0, 1, 1};
    EmbeddingQuality q = embedding_quality(zs, labels);
    EXPECT_NEAR(q.mean_intra_cosine, 1.0, 1e-12);
    EXPECT_NEAR(q.mean_inter_cosine, 1.0, 1e-12);
    EXPECT_NEAR(q.separation_ratio, 1.0, 1e-12);
    EXPECT_EQ(q.mean_silhouette, 0.0);
}

TEST(EmbeddingQuality, MatchesNaiveAllPairsOracle) {
    Rng rng(3);
    std::vector<Tensor> zs;
    std::vector<int> labels;
    for (int i = 0; i < 20; ++i) {
        Tensor z({6});
        for (double& v : z.values()) v = rng.normal();
        const double n = l2_norm(z);
        for (double& v : z.values()) v /= n;
        zs.push_back(std::move(z));
        labels.push_back(static_cast<int>(rng.below(3)));
    }
    EmbeddingQuality q = embedding_quality(zs, labels);
    QualityOracle want = naive_quality(zs, labels);
    EXPECT_NEAR(q.mean_intra_cosine, want.intra, 1e-12);
    EXPECT_NEAR(q.mean_inter_cosine, want.inter, 1e-12);
    EXPECT_NEAR(q.mean_silhouette, want.silhouette, 1e-12);
    EXPECT_NEAR(q.separation_ratio, (1 + want.intra) / (1 + want.inter), 1e-12);
}

TEST(EmbeddingQuality, InvariantToSampleOrder) {
    Rng rng(5);
    std::vector<Tensor> zs;
    std::vector<int> labels;
    for (int i = 0; i < 30; ++i) {
        Tensor z({5});
        for (double& v : z.values()) v = rng.normal();
        const double n = l2_norm(z);
        for (double& v : z.values()) v /= n;
        zs.push_back(std::move(z));
        labels.push_back(static_cast<int>(rng.below(3)));
    }
    EmbeddingQuality base = embedding_quality(zs, labels);
    std::vector<std::size_t> perm(zs.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    for (int trial = 0; trial < 3; ++trial) {
        rng.shuffle(perm);
        std::vector<Tensor> pz;
        std::vector<int> pl;
        for (std::size_t i : perm) {
            pz.push_back(zs[i]);
            pl.push_back(labels[i]);
        }
        EmbeddingQuality q = embedding_quality(pz, pl);
        EXPECT_NEAR(q.mean_intra_cosine, base.mean_intra_cosine, 1e-12);
        EXPECT_NEAR(q.mean_inter_cosine, base.mean_inter_cosine, 1e-12);
        EXPECT_NEAR(q.mean_silhouette, base.mean_silhouette, 1e-12);
    }
}

TEST(EmbeddingQuality, SingletonClassesAreExcludedWithWarning) {
    std::vector<Tensor> zs = {Tensor::vector({1, 0}), Tensor::vector({0.6, 0.8}), Tensor::vector({0, 1}),
                              Tensor::vector({-1, 0})};
    std::vector<int> labels = {0, 0, 1, 2};  // classes 1 and 2 are singletons
    EmbeddingQuality q = embedding_quality(zs, labels);
    EXPECT_EQ(q.excluded_singleton_classes, 2u);
    EXPECT_NEAR(q.mean_intra_cosine, 0.6, 1e-12);
}

TEST(EmbeddingQuality, DegenerateInputsRejected) {
    std::vector<Tensor> one = {Tensor::vector({1, 0})};
    EXPECT_THROW(embedding_quality(one, {0}), DegenerateInputError);

    std::vector<Tensor> same_class = {Tensor::vector({1, 0}), Tensor::vector({0, 1})};
    EXPECT_THROW(embedding_quality(same_class, {0, 0}), DegenerateInputError);

    std::vector<Tensor> all_singletons = {Tensor::vector({1, 0}), Tensor::vector({0, 1})};
    EXPECT_THROW(embedding_quality(all_singletons, {0, 1}), DegenerateInputError);
}

TEST(EvaluateClassifier, EndToEndOnTinyDataset) {
    fs::path dir = fs::temp_directory_path() / ("mscn_eval_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    SyntheticSpec spec;
    spec.num_train = 12;
    spec.num_val = 0;
    spec.num_test = 12;
    spec.image_size = 8;
    spec.aux_raster_size = 4;
    spec.seed = 77;
    generate_synthetic(spec, dir);
    Dataset test = Dataset::load(dir / "manifest_test.csv", 4);

    ModelConfig cfg;
    cfg.image_shape = {3, 8, 8};
    cfg.conv_channels = {3, 4, 5};
    cfg.rep_dim = 6;
    cfg.proj_hidden = 8;
    cfg.proj_out = 4;
    cfg.num_aux = 2;
    cfg.aux_feature_dim = 3;
    cfg.classifier_hidden = {6};
    cfg.num_classes = 4;
    ModelParams params = ModelParams::init(cfg, 9);

    EvalResult r = evaluate_classifier(params, cfg, test);
    EXPECT_EQ(r.confusion.total(), test.size());
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);

    EmbeddingQuality q = evaluate_embeddings(params, cfg, test);
    EXPECT_GE(q.mean_silhouette, -1.0);
    EXPECT_LE(q.mean_silhouette, 1.0);
    EXPECT_GE(q.mean_intra_cosine, -1.0);
    EXPECT_LE(q.mean_intra_cosine, 1.0);

    // class-count mismatch: model with fewer classes than the labels
    ModelConfig small = cfg;
    small.num_classes = 3;
    ModelParams sp = ModelParams::init(small, 9);
    EXPECT_THROW(evaluate_classifier(sp, small, test), ConfigError);

    nlohmann::ordered_json j = eval_report_json(r, q);
    EXPECT_TRUE(j.contains("accuracy"));
    EXPECT_TRUE(j.contains("per_class_recall"));
    EXPECT_TRUE(j.contains("confusion"));
    EXPECT_TRUE(j.contains("embedding_quality"));
    EXPECT_EQ(j["confusion"].size(), 4u);
    fs::remove_all(dir);
}

TEST(EvaluateClassifier, AccuracyEqualsTraceOverTotalExactly) {
    // Whatever the predictions are, the identity must hold exactly.
    fs::path dir = fs::temp_directory_path() / ("mscn_eval2_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    SyntheticSpec spec;
    spec.num_train = 10;
    spec.num_val = 0;
    spec.num_test = 10;
    spec.image_size = 8;
    spec.aux_raster_size = 0;
    spec.seed = 31;
    generate_synthetic(spec, dir);
    Dataset test = Dataset::load(dir / "manifest_test.csv", 4);

    ModelConfig cfg;
    cfg.image_shape = {3, 8, 8};
    cfg.conv_channels = {3, 4, 5};
    cfg.rep_dim = 5;
    cfg.proj_hidden = 6;
    cfg.proj_out = 4;
    cfg.num_aux = 1;
    cfg.aux_feature_dim = 2;
    cfg.classifier_hidden = {5};
    cfg.num_classes = 4;
    ModelParams params = ModelParams::init(cfg, 13);
    EvalResult r = evaluate_classifier(params, cfg, test);
    EXPECT_EQ(r.accuracy, static_cast<double>(r.confusion.trace()) / static_cast<double>(r.confusion.total()));
    fs::remove_all(dir);
}
