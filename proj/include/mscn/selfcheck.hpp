#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mscn/losses.hpp"
#include "mscn/model.hpp"
#include "mscn/optimizer.hpp"
#include "mscn/rng.hpp"
#include "mscn/tape.hpp"

namespace mscn {

// ---- independent oracles --------------------------------------------------
//
// Deliberately plain reimplementations used to cross-check the production
// paths. They share no code with the tape ops or the stable loss routines.

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            out[i * n + j] = s;
        }
    return out;
}

inline Tensor naive_conv2d(const Tensor& in, const Tensor& kern, std::size_t stride, std::size_t padding) {
    const std::size_t ci = in.dim(0), h = in.dim(1), w = in.dim(2);
    const std::size_t co = kern.dim(0), kh = kern.dim(2), kw = kern.dim(3);
    const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
    const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
    Tensor out({co, ho, wo});
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                double s = 0.0;
                for (std::size_t c = 0; c < ci; ++c)
                    for (std::size_t dy = 0; dy < kh; ++dy)
                        for (std::size_t dx = 0; dx < kw; ++dx) {
                            const long iy = static_cast<long>(oy * stride + dy) - static_cast<long>(padding);
                            const long ix = static_cast<long>(ox * stride + dx) - static_cast<long>(padding);
                            if (iy < 0 || iy >= static_cast<long>(h) || ix < 0 || ix >= static_cast<long>(w)) continue;
                            s += in[(c * h + iy) * w + ix] * kern[((o * ci + c) * kh + dy) * kw + dx];
                        }
                out[(o * ho + oy) * wo + ox] = s;
            }
    return out;
}

/// Double-loop contrastive loss straight from the definition, evaluated in
/// extended precision without any log-sum-exp rearrangement.
inline long double contrastive_oracle(const std::vector<Tensor>& z, const std::vector<int>& labels,
                                      long double tau) {
    const std::size_t n = z.size();
    long double total = 0.0L;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t positives = 0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i && labels[j] == labels[i]) ++positives;
        if (positives == 0) continue;
        long double denom = 0.0L;
        for (std::size_t k = 0; k < n; ++k) {
            if (k == i) continue;
            long double s = 0.0L;
            for (std::size_t c = 0; c < z[i].numel(); ++c)
                s += static_cast<long double>(z[i][c]) * static_cast<long double>(z[k][c]);
            denom += expl(s / tau);
        }
        long double inner = 0.0L;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i || labels[j] != labels[i]) continue;
            long double s = 0.0L;
            for (std::size_t c = 0; c < z[i].numel(); ++c)
                s += static_cast<long double>(z[i][c]) * static_cast<long double>(z[j][c]);
            inner += logl(expl(s / tau) / denom);
        }
        total += -inner / static_cast<long double>(positives);
    }
    return total;
}

/// Direct evaluation of the focal loss definition in extended precision.
inline long double focal_oracle(const Tensor& probs, const std::vector<int>& labels,
                                const std::vector<long double>& alpha, long double gamma) {
    const std::size_t n = probs.dim(0), c = probs.dim(1);
    long double total = 0.0L;
    for (std::size_t i = 0; i < n; ++i) {
        const auto t = static_cast<std::size_t>(labels[i]);
        const long double pt = static_cast<long double>(probs[i * c + t]);
        const long double at = alpha.size() == 1 ? alpha[0] : alpha[t];
        total += -at * powl(1.0L - pt, gamma) * logl(pt);
    }
    return total / static_cast<long double>(n);
}

/// log-softmax by the direct formula (no max shift), extended precision.
inline std::vector<long double> log_softmax_oracle(const std::vector<long double>& x) {
    long double s = 0.0L;
    for (long double v : x) s += expl(v);
    const long double ls = logl(s);
    std::vector<long double> out;
    out.reserve(x.size());
    for (long double v : x) out.push_back(v - ls);
    return out;
}

// ---- finite-difference gradient checking ----------------------------------

struct KinkInfo {
    double relu_margin = std::numeric_limits<double>::infinity();
    double l2_prenorm = std::numeric_limits<double>::infinity();

    bool admissible() const { return relu_margin >= 1e-3 && l2_prenorm >= 1e-2; }
};

/// A scalar function of a flat coordinate vector with an analytic gradient
/// from the tape. draw() refreshes any per-instance constants (inputs,
/// labels) and fills the coordinates.
struct GradCheckProblem {
    std::string name;
    std::size_t dim = 0;
    std::function<double(const std::vector<double>&, std::vector<double>*, KinkInfo*)> eval;
    std::function<void(Rng&, std::vector<double>&)> draw;
};

struct GradCheckReport {
    std::string op;
    double max_rel_err = 0.0;
    std::size_t instances = 0;
    bool pass = true;
    std::string detail;
};

/// Central differences at step h; relative error uses max(1, |a|, |n|) in the
/// denominator, matching the [-1,1] input scale.
inline double fd_max_rel_err(const GradCheckProblem& p, const std::vector<double>& x,
                             const std::vector<double>& analytic, double h = 1e-6) {
    std::vector<double> numeric(p.dim);
    parallel_for(p.dim, [&](std::size_t i) {
        std::vector<double> xp = x;
        xp[i] += h;
        const double fp = p.eval(xp, nullptr, nullptr);
        xp[i] = x[i] - h;
        const double fm = p.eval(xp, nullptr, nullptr);
        numeric[i] = (fp - fm) / (2.0 * h);
    });
    double worst = 0.0;
    for (std::size_t i = 0; i < p.dim; ++i) {
        const double denom = std::max({1.0, std::fabs(analytic[i]), std::fabs(numeric[i])});
        worst = std::max(worst, std::fabs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

/// Runs `instances` random instances of a problem, redrawing any that land
/// within 1e-3 of a relu kink (or with a near-degenerate normalization).
inline GradCheckReport run_gradcheck(const GradCheckProblem& p, std::size_t instances, std::uint64_t seed,
                                     double tol = 1e-5, double h = 1e-6) {
    GradCheckReport report;
    report.op = p.name;
    Rng rng(mix_seed(seed, {fnv1a64(p.name.data(), p.name.size())}));
    std::vector<double> x(p.dim);
    std::vector<double> analytic(p.dim);
    for (std::size_t inst = 0; inst < instances; ++inst) {
        bool ok = false;
        for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
            p.draw(rng, x);
            KinkInfo kink;
            p.eval(x, &analytic, &kink);
            ok = kink.admissible();
        }
        if (!ok) {
            report.pass = false;
            report.detail = "no admissible draw found";
            return report;
        }
        report.max_rel_err = std::max(report.max_rel_err, fd_max_rel_err(p, x, analytic, h));
        ++report.instances;
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

namespace detail {

/// Slowly varying deterministic weights so test losses probe every output
/// coordinate with a distinct sensitivity.
inline Tensor probe_weights(const std::vector<std::size_t>& shape) {
    Tensor w(shape);
    for (std::size_t i = 0; i < w.numel(); ++i) {
        w[i] = 0.5 + 0.35 * std::sin(1.7 * static_cast<double>(i) + 0.3);
    }
    return w;
}

inline void fill_uniform(Rng& rng, std::vector<double>& x, double lo = -1.0, double hi = 1.0) {
    for (double& v : x) v = rng.uniform(lo, hi);
}

/// Wraps a forward builder into a GradCheckProblem. The builder receives the
/// tape and the leaf variable holding the coordinates and returns the scalar
/// loss variable.
inline GradCheckProblem make_single_leaf_problem(
    std::string name, std::size_t dim,
    std::function<Variable(GradientTape&, Variable)> build,
    std::function<void(Rng&, std::vector<double>&)> draw) {
    GradCheckProblem p;
    p.name = std::move(name);
    p.dim = dim;
    p.draw = std::move(draw);
    p.eval = [build, dim](const std::vector<double>& x, std::vector<double>* grad, KinkInfo* kink) {
        GradientTape tape;
        Variable leaf = tape.leaf(Tensor({dim}, x), /*requires_grad=*/grad != nullptr);
        Variable loss = build(tape, leaf);
        const double value = tape.value(loss).item();
        if (kink != nullptr) {
            kink->relu_margin = tape.min_abs_relu_input();
            kink->l2_prenorm = tape.min_l2_prenorm();
        }
        if (grad != nullptr) {
            tape.backward(loss);
            *grad = tape.grad(leaf).values();
        }
        return value;
    };
    return p;
}

inline Variable slice(GradientTape& t, Variable flat, std::size_t offset, std::vector<std::size_t> shape) {
    // pick+stack based slicing of the coordinate leaf; cheap at test sizes
    const std::size_t n = Tensor::count(shape);
    std::vector<Variable> parts;
    parts.reserve(n);
    for (std::size_t i = 0; i < n; ++i) parts.push_back(t.pick(flat, offset + i));
    return t.reshape(t.stack(parts), std::move(shape));
}

inline Variable weighted_sum(GradientTape& t, Variable v) {
    return t.sum(t.mul(v, t.constant(probe_weights(t.value(v).shape()))));
}

}  // namespace detail

/// Gradient-check problems covering every differentiable tape operation.
inline std::vector<GradCheckProblem> op_gradcheck_problems() {
    using detail::fill_uniform;
    using detail::make_single_leaf_problem;
    using detail::slice;
    using detail::weighted_sum;
    std::vector<GradCheckProblem> out;

    auto uniform_draw = [](Rng& rng, std::vector<double>& x) { fill_uniform(rng, x); };

    out.push_back(make_single_leaf_problem(
        "matmul", 3 * 4 + 4 * 2,
        [](GradientTape& t, Variable leaf) {
            Variable a = slice(t, leaf, 0, {3, 4});
            Variable b = slice(t, leaf, 12, {4, 2});
            return weighted_sum(t, t.matmul(a, b));
        },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "matvec", 3 * 4 + 4,
        [](GradientTape& t, Variable leaf) {
            Variable w = slice(t, leaf, 0, {3, 4});
            Variable x = slice(t, leaf, 12, {4});
            return weighted_sum(t, t.matvec(w, x));
        },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "conv2d_s1p1", 2 * 5 * 5 + 3 * 2 * 3 * 3,
        [](GradientTape& t, Variable leaf) {
            Variable in = slice(t, leaf, 0, {2, 5, 5});
            Variable k = slice(t, leaf, 50, {3, 2, 3, 3});
            return weighted_sum(t, t.conv2d(in, k, 1, 1));
        },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "conv2d_s2p0", 2 * 6 * 6 + 2 * 2 * 2 * 2,
        [](GradientTape& t, Variable leaf) {
            Variable in = slice(t, leaf, 0, {2, 6, 6});
            Variable k = slice(t, leaf, 72, {2, 2, 2, 2});
            return weighted_sum(t, t.conv2d(in, k, 2, 0));
        },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "add_channel_bias", 2 * 3 * 3 + 2,
        [](GradientTape& t, Variable leaf) {
            Variable x = slice(t, leaf, 0, {2, 3, 3});
            Variable b = slice(t, leaf, 18, {2});
            return weighted_sum(t, t.add_channel_bias(x, b));
        },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "global_avg_pool", 2 * 4 * 4,
        [](GradientTape& t, Variable leaf) {
            return weighted_sum(t, t.global_avg_pool(slice(t, leaf, 0, {2, 4, 4})));
        },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "relu", 8,
        [](GradientTape& t, Variable leaf) { return weighted_sum(t, t.relu(leaf)); },
        [](Rng& rng, std::vector<double>& x) {
            for (double& v : x) {
                const double mag = rng.uniform(1e-3, 1.0);
                v = rng.uniform() < 0.5 ? -mag : mag;
            }
        }));

    out.push_back(make_single_leaf_problem(
        "concat", 5,
        [](GradientTape& t, Variable leaf) {
            Variable a = slice(t, leaf, 0, {3});
            Variable b = slice(t, leaf, 3, {2});
            return weighted_sum(t, t.concat(a, b));
        },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "l2_normalize", 4,
        [](GradientTape& t, Variable leaf) { return weighted_sum(t, t.l2_normalize(leaf)); },
        [](Rng& rng, std::vector<double>& x) {
            double norm = 0.0;
            do {
                fill_uniform(rng, x);
                norm = 0.0;
                for (double v : x) norm += v * v;
            } while (std::sqrt(norm) < 0.3);
        }));

    out.push_back(make_single_leaf_problem(
        "log_softmax", 5,
        [](GradientTape& t, Variable leaf) { return weighted_sum(t, t.log_softmax(leaf)); },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "add", 6,
        [](GradientTape& t, Variable leaf) {
            return weighted_sum(t, t.add(slice(t, leaf, 0, {3}), slice(t, leaf, 3, {3})));
        },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "sub", 6,
        [](GradientTape& t, Variable leaf) {
            return weighted_sum(t, t.sub(slice(t, leaf, 0, {3}), slice(t, leaf, 3, {3})));
        },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "mul", 6,
        [](GradientTape& t, Variable leaf) {
            return weighted_sum(t, t.mul(slice(t, leaf, 0, {3}), slice(t, leaf, 3, {3})));
        },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "affine", 5,
        [](GradientTape& t, Variable leaf) { return weighted_sum(t, t.affine(leaf, 1.7, -0.3)); },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "exp", 5,
        [](GradientTape& t, Variable leaf) { return weighted_sum(t, t.exp(leaf)); },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "log", 5,
        [](GradientTape& t, Variable leaf) { return weighted_sum(t, t.log(leaf)); },
        [](Rng& rng, std::vector<double>& x) { fill_uniform(rng, x, 0.1, 2.0); }));

    out.push_back(make_single_leaf_problem(
        "pow_const_2", 5,
        [](GradientTape& t, Variable leaf) { return weighted_sum(t, t.pow_const(leaf, 2.0)); },
        [](Rng& rng, std::vector<double>& x) { fill_uniform(rng, x, 0.05, 1.0); }));

    out.push_back(make_single_leaf_problem(
        "pow_const_half", 5,
        [](GradientTape& t, Variable leaf) { return weighted_sum(t, t.pow_const(leaf, 0.5)); },
        [](Rng& rng, std::vector<double>& x) { fill_uniform(rng, x, 0.05, 1.0); }));

    out.push_back(make_single_leaf_problem(
        "clamp_min", 6,
        [](GradientTape& t, Variable leaf) { return weighted_sum(t, t.clamp_min(leaf, -0.2)); },
        [](Rng& rng, std::vector<double>& x) {
            for (double& v : x) {
                const double mag = rng.uniform(1e-3, 0.8);
                v = -0.2 + (rng.uniform() < 0.5 ? -mag : mag);
            }
        }));

    out.push_back(make_single_leaf_problem(
        "pick", 5,
        [](GradientTape& t, Variable leaf) { return t.scale(t.pick(leaf, 2), 1.3); },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "stack", 4,
        [](GradientTape& t, Variable leaf) {
            std::vector<Variable> parts;
            for (std::size_t i = 0; i < 4; ++i) parts.push_back(t.pick(leaf, i));
            return weighted_sum(t, t.stack(parts));
        },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "dot", 8,
        [](GradientTape& t, Variable leaf) {
            return t.scale(t.dot(slice(t, leaf, 0, {4}), slice(t, leaf, 4, {4})), 0.9);
        },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "sum", 6,
        [](GradientTape& t, Variable leaf) { return t.scale(t.sum(leaf), 1.1); },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "mean", 6,
        [](GradientTape& t, Variable leaf) { return t.scale(t.mean(leaf), 1.1); },
        uniform_draw));

    out.push_back(make_single_leaf_problem(
        "reshape", 6,
        [](GradientTape& t, Variable leaf) { return weighted_sum(t, t.reshape(leaf, {2, 3})); },
        uniform_draw));

    return out;
}

namespace detail {

struct CompositeCtx {
    std::vector<Tensor> images;
    std::vector<std::vector<Tensor>> aux;  // per sample, per auxiliary (stats-ready rasters)
    std::vector<int> labels;
};

inline ModelConfig tiny_encoder_config(std::size_t num_aux) {
    ModelConfig cfg;
    cfg.encoder_kind = ModelConfig::EncoderKind::small_cnn;
    cfg.image_shape = {3, 6, 6};
    cfg.conv_channels = {3, 4, 5};
    cfg.rep_dim = 5;
    cfg.proj_hidden = 6;
    cfg.proj_out = 4;
    cfg.num_aux = num_aux;
    cfg.aux_feature_dim = 3;
    cfg.aux_dense = true;
    cfg.classifier_hidden = {6};
    cfg.num_classes = 3;
    return cfg;
}

/// Packs the listed parameter tensors into a flat coordinate vector and back.
struct ParamPacker {
    std::vector<std::string> names;
    std::vector<std::size_t> sizes;
    std::size_t total = 0;

    ParamPacker(const ModelParams& params, const std::vector<std::string>& groups) {
        for (const std::string& name : params.names()) {
            const std::string g = ModelParams::group_of(name);
            if (std::find(groups.begin(), groups.end(), g) == groups.end()) continue;
            names.push_back(name);
            sizes.push_back(params.tensor(name).numel());
            total += sizes.back();
        }
    }

    void unpack(const std::vector<double>& x, ModelParams& params) const {
        std::size_t off = 0;
        for (std::size_t i = 0; i < names.size(); ++i) {
            Tensor& t = params.tensor(names[i]);
            for (std::size_t j = 0; j < sizes[i]; ++j) t[j] = x[off + j];
            off += sizes[i];
        }
    }

    std::vector<double> pack_grads(const GradientTape& tape, const BoundParams& bound) const {
        std::vector<double> out;
        out.reserve(total);
        for (const std::string& name : names) {
            const Tensor g = tape.grad(bound.at(name));
            out.insert(out.end(), g.values().begin(), g.values().end());
        }
        return out;
    }
};

}  // namespace detail

/// Contrastive loss through encoder + projection, checked w.r.t. every
/// encoder and projection parameter on a tiny configuration.
inline GradCheckProblem contrastive_composite_problem() {
    using detail::CompositeCtx;
    const ModelConfig cfg = detail::tiny_encoder_config(0);
    auto ctx = std::make_shared<CompositeCtx>();
    auto params = std::make_shared<ModelParams>(ModelParams::init(cfg, 7));
    auto packer = std::make_shared<detail::ParamPacker>(*params, std::vector<std::string>{"encoder", "projection"});

    GradCheckProblem p;
    p.name = "composite_contrastive";
    p.dim = packer->total;
    p.draw = [ctx, packer](Rng& rng, std::vector<double>& x) {
        detail::fill_uniform(rng, x, -0.5, 0.5);
        ctx->images.clear();
        ctx->labels = {0, 0, 1, 2};
        for (std::size_t i = 0; i < 4; ++i) {
            Tensor img({3, 6, 6});
            for (double& v : img.values()) v = rng.uniform();
            ctx->images.push_back(std::move(img));
        }
    };
    p.eval = [ctx, params, packer, cfg](const std::vector<double>& x, std::vector<double>* grad, KinkInfo* kink) {
        ModelParams local = *params;
        packer->unpack(x, local);
        GradientTape tape;
        BoundParams bound = bind_params(tape, local, grad != nullptr);
        std::vector<Variable> zs;
        for (const Tensor& img : ctx->images) {
            Variable rep = encoder_forward(tape, tape.constant(img), bound, cfg);
            zs.push_back(projection_forward(tape, rep, bound, cfg));
        }
        Variable loss = supervised_contrastive_loss(tape, zs, ctx->labels, 0.5);
        const double value = tape.value(loss).item();
        if (kink != nullptr) {
            kink->relu_margin = tape.min_abs_relu_input();
            kink->l2_prenorm = tape.min_l2_prenorm();
        }
        if (grad != nullptr) {
            tape.backward(loss);
            *grad = packer->pack_grads(tape, bound);
        }
        return value;
    };
    return p;
}

/// Focal loss through encoder + fusion + classifier, checked w.r.t. encoder,
/// aux featurizer and classifier parameters together.
inline GradCheckProblem focal_composite_problem() {
    using detail::CompositeCtx;
    const ModelConfig cfg = detail::tiny_encoder_config(2);
    auto ctx = std::make_shared<CompositeCtx>();
    auto params = std::make_shared<ModelParams>(ModelParams::init(cfg, 11));
    auto packer = std::make_shared<detail::ParamPacker>(
        *params, std::vector<std::string>{"encoder", "aux", "classifier"});

    GradCheckProblem p;
    p.name = "composite_focal";
    p.dim = packer->total;
    p.draw = [ctx, packer](Rng& rng, std::vector<double>& x) {
        detail::fill_uniform(rng, x, -0.5, 0.5);
        ctx->images.clear();
        ctx->aux.clear();
        ctx->labels = {0, 1, 2};
        for (std::size_t i = 0; i < 3; ++i) {
            Tensor img({3, 6, 6});
            for (double& v : img.values()) v = rng.uniform();
            ctx->images.push_back(std::move(img));
            std::vector<Tensor> sample_aux;
            for (std::size_t a = 0; a < 2; ++a) {
                Tensor raster({4, 4});
                for (double& v : raster.values()) v = rng.uniform();
                sample_aux.push_back(std::move(raster));
            }
            ctx->aux.push_back(std::move(sample_aux));
        }
    };
    p.eval = [ctx, params, packer, cfg](const std::vector<double>& x, std::vector<double>* grad, KinkInfo* kink) {
        ModelParams local = *params;
        packer->unpack(x, local);
        GradientTape tape;
        BoundParams bound = bind_params(tape, local, grad != nullptr);
        std::vector<Variable> log_probs;
        for (std::size_t i = 0; i < ctx->images.size(); ++i) {
            Variable rep = encoder_forward(tape, tape.constant(ctx->images[i]), bound, cfg);
            std::vector<Variable> feats;
            const auto names = cfg.aux_names();
            for (std::size_t a = 0; a < names.size(); ++a) {
                feats.push_back(aux_featurize(tape, ctx->aux[i][a], names[a], bound, cfg));
            }
            Variable fused = fuse(tape, rep, feats, cfg);
            log_probs.push_back(classifier_log_probs(tape, fused, bound, cfg));
        }
        LossConfig lc;
        lc.alpha = {0.8};
        lc.gamma = 2.0;
        Variable loss = focal_loss_from_log_probs(tape, log_probs, ctx->labels, lc);
        const double value = tape.value(loss).item();
        if (kink != nullptr) {
            kink->relu_margin = tape.min_abs_relu_input();
            kink->l2_prenorm = tape.min_l2_prenorm();
        }
        if (grad != nullptr) {
            tape.backward(loss);
            *grad = packer->pack_grads(tape, bound);
        }
        return value;
    };
    return p;
}

inline std::vector<GradCheckProblem> composite_gradcheck_problems() {
    std::vector<GradCheckProblem> out;
    out.push_back(contrastive_composite_problem());
    out.push_back(focal_composite_problem());
    return out;
}

// ---- whole self-check suite ------------------------------------------------

struct CheckResult {
    std::string name;
    bool pass = false;
    double max_err = 0.0;
    std::string detail;
};

inline std::vector<CheckResult> run_selfcheck(std::size_t gradcheck_instances = 20, std::uint64_t seed = 20240501) {
    std::vector<CheckResult> results;

    auto add_gradcheck = [&](const GradCheckProblem& p) {
        GradCheckReport r = run_gradcheck(p, gradcheck_instances, seed);
        results.push_back({"grad/" + r.op, r.pass, r.max_rel_err, r.detail});
    };
    for (const GradCheckProblem& p : op_gradcheck_problems()) add_gradcheck(p);
    for (const GradCheckProblem& p : composite_gradcheck_problems()) add_gradcheck(p);

    // matmul / conv2d against the naive-loop oracles
    {
        Rng rng(mix_seed(seed, {0x0A1}));
        double worst = 0.0;
        for (int c = 0; c < 100; ++c) {
            const std::size_t m = 1 + rng.below(5), k = 1 + rng.below(4), n = 1 + rng.below(5);
            Tensor a({m, k}), b({k, n});
            for (double& v : a.values()) v = rng.uniform(-1, 1);
            for (double& v : b.values()) v = rng.uniform(-1, 1);
            GradientTape t;
            Tensor got = t.value(t.matmul(t.constant(a), t.constant(b)));
            Tensor want = naive_matmul(a, b);
            for (std::size_t i = 0; i < got.numel(); ++i) worst = std::max(worst, std::fabs(got[i] - want[i]));
        }
        results.push_back({"oracle/matmul_naive", worst <= 1e-12, worst, ""});
    }
    {
        Rng rng(mix_seed(seed, {0x0A2}));
        double worst = 0.0;
        for (int c = 0; c < 100; ++c) {
            const std::size_t ci = 1 + rng.below(3), co = 1 + rng.below(4);
            const std::size_t h = 4 + rng.below(5), w = 4 + rng.below(5);
            const std::size_t kh = 1 + rng.below(3), kw = 1 + rng.below(3);
            const std::size_t stride = 1 + rng.below(2), pad = rng.below(2);
            Tensor in({ci, h, w}), kern({co, ci, kh, kw});
            for (double& v : in.values()) v = rng.uniform(-1, 1);
            for (double& v : kern.values()) v = rng.uniform(-1, 1);
            GradientTape t;
            Tensor got = t.value(t.conv2d(t.constant(in), t.constant(kern), stride, pad));
            Tensor want = naive_conv2d(in, kern, stride, pad);
            for (std::size_t i = 0; i < got.numel(); ++i) worst = std::max(worst, std::fabs(got[i] - want[i]));
        }
        results.push_back({"oracle/conv2d_naive", worst <= 1e-12, worst, ""});
    }

    // contrastive loss vs double-loop oracle, plus the worked example
    {
        Rng rng(mix_seed(seed, {0x0A3}));
        const double taus[3] = {0.1, 0.5, 1.0};
        double worst = 0.0;
        for (int c = 0; c < 100; ++c) {
            const std::size_t n = 2 + rng.below(15);
            const std::size_t d = 2 + rng.below(31);
            LabeledEmbeddingBatch batch;
            for (std::size_t i = 0; i < n; ++i) {
                Tensor z({d});
                double norm = 0.0;
                do {
                    for (double& v : z.values()) v = rng.normal();
                    norm = l2_norm(z);
                } while (norm < 1e-6);
                for (double& v : z.values()) v /= norm;
                batch.embeddings.push_back(std::move(z));
                batch.labels.push_back(static_cast<int>(rng.below(4)));
            }
            const double tau = taus[c % 3];
            const double got = supervised_contrastive_loss(batch, tau);
            const double want = static_cast<double>(
                contrastive_oracle(batch.embeddings, batch.labels, static_cast<long double>(tau)));
            worst = std::max(worst, std::fabs(got - want));
        }
        results.push_back({"oracle/contrastive_double_loop", worst <= 1e-9, worst, ""});

        LabeledEmbeddingBatch worked;
        worked.embeddings = {Tensor::vector({1, 0}), Tensor::vector({0, 1}), Tensor::vector({-1, 0})};
        worked.labels = {0, 0, 1};
        const double got = supervised_contrastive_loss(worked, 1.0);
        const double err = std::fabs(got - 1.006409);
        results.push_back({"oracle/contrastive_worked_example", err <= 1e-6, err, ""});
    }

    // focal loss vs direct evaluation and the cross-entropy identity
    {
        Rng rng(mix_seed(seed, {0x0A4}));
        double worst_direct = 0.0, worst_ce = 0.0;
        for (int c = 0; c < 100; ++c) {
            const std::size_t n = 1 + rng.below(16), k = 2 + rng.below(5);
            Tensor probs({n, k});
            std::vector<int> labels(n);
            for (std::size_t i = 0; i < n; ++i) {
                double row = 0.0;
                for (std::size_t j = 0; j < k; ++j) {
                    probs[i * k + j] = std::exp(rng.uniform(-3.0, 3.0));
                    row += probs[i * k + j];
                }
                for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= row;
                labels[i] = static_cast<int>(rng.below(k));
            }
            LossConfig fc;
            fc.alpha = {0.8};
            fc.gamma = 2.0;
            const double got = focal_loss(probs, labels, fc);
            const double want = static_cast<double>(focal_oracle(probs, labels, {0.8L}, 2.0L));
            worst_direct = std::max(worst_direct, std::fabs(got - want));

            LossConfig ce_cfg;
            ce_cfg.alpha = {1.0};
            ce_cfg.gamma = 0.0;
            worst_ce = std::max(worst_ce,
                                std::fabs(focal_loss(probs, labels, ce_cfg) - cross_entropy(probs, labels)));
        }
        results.push_back({"oracle/focal_direct", worst_direct <= 1e-12, worst_direct, ""});
        results.push_back({"oracle/focal_equals_ce_at_gamma0", worst_ce == 0.0, worst_ce, ""});
    }

    // log-softmax normalization, including large-magnitude entries
    {
        Rng rng(mix_seed(seed, {0x0A5}));
        double worst = 0.0;
        for (int c = 0; c < 50; ++c) {
            const std::size_t d = 2 + rng.below(7);
            Tensor x({d});
            const double scale = (c % 2 == 0) ? 1.0 : 1000.0;
            for (double& v : x.values()) v = rng.uniform(-1.0, 1.0) * scale;
            GradientTape t;
            const Tensor y = t.value(t.log_softmax(t.constant(x)));
            double sum = 0.0;
            for (double v : y.values()) sum += std::exp(v);
            worst = std::max(worst, std::fabs(sum - 1.0));
        }
        results.push_back({"property/log_softmax_normalized", worst <= 1e-12, worst, ""});
    }

    // freeze contracts
    {
        GradientTape t;
        Tensor wt = Tensor::vector({0.5, -0.25, 0.75});
        Variable frozen = t.leaf(wt, true, /*frozen=*/true);
        Variable free = t.leaf(Tensor::vector({1.0, 2.0, 3.0}), true);
        Variable loss = t.sum(t.mul(frozen, free));
        t.backward(loss);
        const Tensor gf = t.grad(frozen);
        const Tensor gw = t.grad(free);
        bool pass = gf.bitwise_equal(Tensor({3}));
        // gradient still flows through the op to the other input
        for (std::size_t i = 0; i < 3; ++i) pass = pass && gw[i] == wt[i];
        results.push_back({"freeze/zero_gradient", pass, 0.0, ""});
    }
    {
        ModelConfig cfg = detail::tiny_encoder_config(0);
        ModelParams params = ModelParams::init(cfg, 3);
        params.freeze_group("encoder");
        const std::uint64_t before = params.group_checksum("encoder");
        std::map<std::string, Tensor> grads;
        for (const std::string& name : params.names()) {
            Tensor g(params.tensor(name).shape());
            for (double& v : g.values()) v = 0.125;
            grads.emplace(name, std::move(g));
        }
        OptimizerConfig sgd;
        sgd.kind = OptimizerConfig::Kind::sgd;
        sgd.learning_rate = 0.1;
        Optimizer o1(sgd);
        o1.step(params, grads);
        OptimizerConfig adam;
        Optimizer o2(adam);
        o2.step(params, grads);
        const bool frozen_ok = params.group_checksum("encoder") == before;
        bool moved = false;
        ModelParams fresh = ModelParams::init(cfg, 3);
        for (const std::string& name : params.names_in_group("classifier")) {
            moved = moved || !params.tensor(name).bitwise_equal(fresh.tensor(name));
        }
        results.push_back({"freeze/optimizer_skips_frozen_group", frozen_ok && moved, 0.0, ""});
    }

    return results;
}

}  // namespace mscn
