#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mscn/tensor.hpp"

namespace mscn {

/// Handle to a node on a GradientTape. Only meaningful together with the
/// tape that produced it.
struct Variable {
    std::uint32_t id = UINT32_MAX;
    bool valid() const { return id != UINT32_MAX; }
};

/// Reverse-mode gradient tape. Forward operations execute eagerly and append
/// an op record; backward() walks the records in reverse. The record order is
/// the execution order, which is always a valid topological order.
///
/// Freeze semantics: a frozen leaf reports a gradient of exactly zero (the
/// accumulation is skipped entirely, so the zeros are bitwise) while ops that
/// consume it still propagate to their other inputs.
class GradientTape {
public:
    GradientTape() = default;
    GradientTape(const GradientTape&) = delete;
    GradientTape& operator=(const GradientTape&) = delete;

    // ---- leaves -------------------------------------------------------

    Variable leaf(Tensor value) {
        bool rg = value.requires_grad;
        return leaf(std::move(value), rg, false);
    }

    Variable leaf(Tensor value, bool requires_grad, bool frozen = false) {
        return push(std::move(value), requires_grad, frozen);
    }

    Variable constant(Tensor value) { return push(std::move(value), false, false); }
    Variable constant(double v) { return constant(Tensor::scalar(v)); }

    const Tensor& value(Variable v) const { return node(v).value; }

    std::size_t num_nodes() const { return nodes_.size(); }
    std::size_t num_ops() const { return ops_.size(); }

    // ---- operations ---------------------------------------------------

    Variable matmul(Variable av, Variable bv) {
        const Tensor& a = value(av);
        const Tensor& b = value(bv);
        if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
            throw ShapeError("matmul: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
        }
        const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
        Tensor out({m, n});
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = a[i * k + p];
                if (aip == 0.0) continue;
                for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * b[p * n + j];
            }
        }
        Variable ov = result(std::move(out), {av, bv});
        record("matmul", ov, [av, bv, ov, m, k, n](GradientTape& t, const Tensor& g) {
            const Tensor& a = t.value(av);
            const Tensor& b = t.value(bv);
            if (Tensor* ga = t.accum(av)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gij = g[i * n + j];
                        if (gij == 0.0) continue;
                        for (std::size_t p = 0; p < k; ++p) (*ga)[i * k + p] += gij * b[p * n + j];
                    }
            }
            if (Tensor* gb = t.accum(bv)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = a[i * k + p];
                        if (aip == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += aip * g[i * n + j];
                    }
            }
        });
        return ov;
    }

    /// w[r x c] . x[c] -> [r]
    Variable matvec(Variable wv, Variable xv) {
        const Tensor& w = value(wv);
        const Tensor& x = value(xv);
        if (w.rank() != 2 || x.rank() != 1 || w.dim(1) != x.dim(0)) {
            throw ShapeError("matvec: incompatible shapes " + w.shape_str() + " and " + x.shape_str());
        }
        const std::size_t r = w.dim(0), c = w.dim(1);
        Tensor out({r});
        for (std::size_t i = 0; i < r; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += w[i * c + j] * x[j];
            out[i] = s;
        }
        Variable ov = result(std::move(out), {wv, xv});
        record("matvec", ov, [wv, xv, r, c](GradientTape& t, const Tensor& g) {
            const Tensor& w = t.value(wv);
            const Tensor& x = t.value(xv);
            if (Tensor* gw = t.accum(wv)) {
                for (std::size_t i = 0; i < r; ++i) {
                    const double gi = g[i];
                    if (gi == 0.0) continue;
                    for (std::size_t j = 0; j < c; ++j) (*gw)[i * c + j] += gi * x[j];
                }
            }
            if (Tensor* gx = t.accum(xv)) {
                for (std::size_t i = 0; i < r; ++i) {
                    const double gi = g[i];
                    if (gi == 0.0) continue;
                    for (std::size_t j = 0; j < c; ++j) (*gx)[j] += gi * w[i * c + j];
                }
            }
        });
        return ov;
    }

    /// Cross-correlation of input[Ci x H x W] with kernels[Co x Ci x kh x kw],
    /// zero padding. Output is [Co x Ho x Wo] with Ho = (H + 2p - kh)/s + 1.
    Variable conv2d(Variable inv, Variable kv, std::size_t stride, std::size_t padding) {
        const Tensor& in = value(inv);
        const Tensor& k = value(kv);
        if (in.rank() != 3 || k.rank() != 4 || in.dim(0) != k.dim(1)) {
            throw ShapeError("conv2d: incompatible shapes " + in.shape_str() + " and " + k.shape_str());
        }
        if (stride == 0) throw UsageError("conv2d: stride must be positive");
        const std::size_t ci = in.dim(0), h = in.dim(1), w = in.dim(2);
        const std::size_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
        if (kh > h + 2 * padding || kw > w + 2 * padding) {
            throw ShapeError("conv2d: kernel " + k.shape_str() + " larger than padded input " + in.shape_str());
        }
        const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
        const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
        Tensor out({co, ho, wo});
        for (std::size_t o = 0; o < co; ++o)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < ci; ++c)
                        for (std::size_t dy = 0; dy < kh; ++dy) {
                            const long iy = static_cast<long>(oy * stride + dy) - static_cast<long>(padding);
                            if (iy < 0 || iy >= static_cast<long>(h)) continue;
                            for (std::size_t dx = 0; dx < kw; ++dx) {
                                const long ix = static_cast<long>(ox * stride + dx) - static_cast<long>(padding);
                                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                s += in[(c * h + iy) * w + ix] * k[((o * ci + c) * kh + dy) * kw + dx];
                            }
                        }
                    out[(o * ho + oy) * wo + ox] = s;
                }
        Variable ov = result(std::move(out), {inv, kv});
        record("conv2d", ov,
               [inv, kv, ci, h, w, co, kh, kw, ho, wo, stride, padding](GradientTape& t, const Tensor& g) {
                   const Tensor& in = t.value(inv);
                   const Tensor& k = t.value(kv);
                   Tensor* gi = t.accum(inv);
                   Tensor* gk = t.accum(kv);
                   for (std::size_t o = 0; o < co; ++o)
                       for (std::size_t oy = 0; oy < ho; ++oy)
                           for (std::size_t ox = 0; ox < wo; ++ox) {
                               const double go = g[(o * ho + oy) * wo + ox];
                               if (go == 0.0) continue;
                               for (std::size_t c = 0; c < ci; ++c)
                                   for (std::size_t dy = 0; dy < kh; ++dy) {
                                       const long iy = static_cast<long>(oy * stride + dy) - static_cast<long>(padding);
                                       if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                       for (std::size_t dx = 0; dx < kw; ++dx) {
                                           const long ix = static_cast<long>(ox * stride + dx) - static_cast<long>(padding);
                                           if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                           const std::size_t ii = (c * h + iy) * w + ix;
                                           const std::size_t ki = ((o * ci + c) * kh + dy) * kw + dx;
                                           if (gi) (*gi)[ii] += go * k[ki];
                                           if (gk) (*gk)[ki] += go * in[ii];
                                       }
                                   }
                           }
               });
        return ov;
    }

    /// x[C x H x W] + bias[C], broadcast over the spatial dims.
    Variable add_channel_bias(Variable xv, Variable bv) {
        const Tensor& x = value(xv);
        const Tensor& b = value(bv);
        if (x.rank() != 3 || b.rank() != 1 || b.dim(0) != x.dim(0)) {
            throw ShapeError("add_channel_bias: incompatible shapes " + x.shape_str() + " and " + b.shape_str());
        }
        const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
        Tensor out = x;
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] += b[ch];
        Variable ov = result(std::move(out), {xv, bv});
        record("add_channel_bias", ov, [xv, bv, c, hw](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv)) {
                for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
            }
            if (Tensor* gb = t.accum(bv)) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) s += g[ch * hw + i];
                    (*gb)[ch] += s;
                }
            }
        });
        return ov;
    }

    /// x[C x H x W] -> per-channel spatial mean [C].
    Variable global_avg_pool(Variable xv) {
        const Tensor& x = value(xv);
        if (x.rank() != 3) throw ShapeError("global_avg_pool: expected rank-3 input, got " + x.shape_str());
        const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
        if (hw == 0) throw ShapeError("global_avg_pool: empty spatial dims " + x.shape_str());
        Tensor out({c});
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += x[ch * hw + i];
            out[ch] = s / static_cast<double>(hw);
        }
        Variable ov = result(std::move(out), {xv});
        record("global_avg_pool", ov, [xv, c, hw](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv)) {
                const double inv = 1.0 / static_cast<double>(hw);
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < hw; ++i) (*gx)[ch * hw + i] += g[ch] * inv;
            }
        });
        return ov;
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is 0.
    Variable relu(Variable xv) {
        const Tensor& x = value(xv);
        Tensor out = x;
        for (std::size_t i = 0; i < out.numel(); ++i) {
            min_abs_relu_input_ = std::min(min_abs_relu_input_, std::fabs(x[i]));
            if (out[i] < 0.0) out[i] = 0.0;
        }
        Variable ov = result(std::move(out), {xv});
        record("relu", ov, [xv](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv)) {
                const Tensor& x = t.value(xv);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    if (x[i] > 0.0) (*gx)[i] += g[i];
            }
        });
        return ov;
    }

    /// Rank-1 concatenation, a's entries first.
    Variable concat(Variable av, Variable bv) {
        const Tensor& a = value(av);
        const Tensor& b = value(bv);
        if (a.rank() != 1 || b.rank() != 1) {
            throw ShapeError("concat: expected rank-1 inputs, got " + a.shape_str() + " and " + b.shape_str());
        }
        const std::size_t da = a.dim(0), db = b.dim(0);
        Tensor out({da + db});
        for (std::size_t i = 0; i < da; ++i) out[i] = a[i];
        for (std::size_t i = 0; i < db; ++i) out[da + i] = b[i];
        Variable ov = result(std::move(out), {av, bv});
        record("concat", ov, [av, bv, da, db](GradientTape& t, const Tensor& g) {
            if (Tensor* ga = t.accum(av))
                for (std::size_t i = 0; i < da; ++i) (*ga)[i] += g[i];
            if (Tensor* gb = t.accum(bv))
                for (std::size_t i = 0; i < db; ++i) (*gb)[i] += g[da + i];
        });
        return ov;
    }

    /// x / ||x||_2 for rank-1 x; inputs with norm below 1e-12 are rejected.
    Variable l2_normalize(Variable xv) {
        const Tensor& x = value(xv);
        if (x.rank() != 1) throw ShapeError("l2_normalize: expected rank-1 input, got " + x.shape_str());
        const double n = l2_norm(x);
        if (!std::isfinite(n)) throw NumericError("l2_normalize: non-finite input norm");
        min_l2_prenorm_ = std::min(min_l2_prenorm_, n);
        if (n < kNormEps) {
            throw DegenerateInputError("l2_normalize: input norm " + std::to_string(n) + " below 1e-12");
        }
        Tensor out = x;
        for (double& v : out.values()) v /= n;
        Variable ov = result(std::move(out), {xv});
        record("l2_normalize", ov, [xv, ov, n](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv)) {
                const Tensor& y = t.value(ov);
                double gy = 0.0;
                for (std::size_t i = 0; i < g.numel(); ++i) gy += g[i] * y[i];
                for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += (g[i] - y[i] * gy) / n;
            }
        });
        return ov;
    }

    /// x - logsumexp(x) with max subtraction; exp of the output sums to 1.
    Variable log_softmax(Variable xv) {
        const Tensor& x = value(xv);
        if (x.rank() != 1 || x.dim(0) == 0) {
            throw ShapeError("log_softmax: expected non-empty rank-1 input, got " + x.shape_str());
        }
        double m = x[0];
        for (std::size_t i = 1; i < x.numel(); ++i) m = std::max(m, x[i]);
        double s = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) s += std::exp(x[i] - m);
        const double lse = m + std::log(s);
        Tensor out = x;
        for (double& v : out.values()) v -= lse;
        Variable ov = result(std::move(out), {xv});
        record("log_softmax", ov, [xv, ov](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv)) {
                const Tensor& y = t.value(ov);
                double gs = 0.0;
                for (std::size_t i = 0; i < g.numel(); ++i) gs += g[i];
                for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] - std::exp(y[i]) * gs;
            }
        });
        return ov;
    }

    Variable add(Variable av, Variable bv) {
        const Tensor& a = value(av);
        const Tensor& b = value(bv);
        if (!a.same_shape(b)) {
            throw ShapeError("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
        }
        Tensor out = a;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
        Variable ov = result(std::move(out), {av, bv});
        record("add", ov, [av, bv](GradientTape& t, const Tensor& g) {
            if (Tensor* ga = t.accum(av))
                for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
            if (Tensor* gb = t.accum(bv))
                for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i];
        });
        return ov;
    }

    Variable sub(Variable av, Variable bv) {
        const Tensor& a = value(av);
        const Tensor& b = value(bv);
        if (!a.same_shape(b)) {
            throw ShapeError("sub: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
        }
        Tensor out = a;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
        Variable ov = result(std::move(out), {av, bv});
        record("sub", ov, [av, bv](GradientTape& t, const Tensor& g) {
            if (Tensor* ga = t.accum(av))
                for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
            if (Tensor* gb = t.accum(bv))
                for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
        });
        return ov;
    }

    Variable mul(Variable av, Variable bv) {
        const Tensor& a = value(av);
        const Tensor& b = value(bv);
        if (!a.same_shape(b)) {
            throw ShapeError("mul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
        }
        Tensor out = a;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
        Variable ov = result(std::move(out), {av, bv});
        record("mul", ov, [av, bv](GradientTape& t, const Tensor& g) {
            const Tensor& a = t.value(av);
            const Tensor& b = t.value(bv);
            if (Tensor* ga = t.accum(av))
                for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * b[i];
            if (Tensor* gb = t.accum(bv))
                for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * a[i];
        });
        return ov;
    }

    /// a * x + b, elementwise with scalar constants.
    Variable affine(Variable xv, double a, double b) {
        Tensor out = value(xv);
        for (double& v : out.values()) v = a * v + b;
        Variable ov = result(std::move(out), {xv});
        record("affine", ov, [xv, a](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv))
                for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += a * g[i];
        });
        return ov;
    }

    Variable scale(Variable xv, double c) { return affine(xv, c, 0.0); }

    Variable exp(Variable xv) {
        Tensor out = value(xv);
        for (double& v : out.values()) v = std::exp(v);
        Variable ov = result(std::move(out), {xv});
        record("exp", ov, [xv, ov](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv)) {
                const Tensor& y = t.value(ov);
                for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * y[i];
            }
        });
        return ov;
    }

    /// Natural log; requires strictly positive entries.
    Variable log(Variable xv) {
        const Tensor& x = value(xv);
        Tensor out = x;
        for (double& v : out.values()) {
            if (!(v > 0.0)) throw NumericError("log: non-positive input " + std::to_string(v));
            v = std::log(v);
        }
        Variable ov = result(std::move(out), {xv});
        record("log", ov, [xv](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv)) {
                const Tensor& x = t.value(xv);
                for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] / x[i];
            }
        });
        return ov;
    }

    /// x^p for x >= 0 and constant p >= 0. The derivative at x == 0 is
    /// defined as 0 for p != 1 so the focal modulator stays finite at p_t = 1.
    Variable pow_const(Variable xv, double p) {
        const Tensor& x = value(xv);
        if (p < 0.0) throw UsageError("pow_const: negative exponent");
        Tensor out = x;
        for (double& v : out.values()) {
            if (v < 0.0) throw NumericError("pow_const: negative base " + std::to_string(v));
            v = std::pow(v, p);
        }
        Variable ov = result(std::move(out), {xv});
        record("pow_const", ov, [xv, p](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv)) {
                const Tensor& x = t.value(xv);
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    double d;
                    if (p == 1.0) d = 1.0;
                    else if (p == 0.0 || x[i] == 0.0) d = 0.0;
                    else d = p * std::pow(x[i], p - 1.0);
                    (*gx)[i] += g[i] * d;
                }
            }
        });
        return ov;
    }

    /// max(x, floor), elementwise; gradient passes only where x > floor.
    Variable clamp_min(Variable xv, double floor) {
        Tensor out = value(xv);
        for (double& v : out.values()) v = std::max(v, floor);
        Variable ov = result(std::move(out), {xv});
        record("clamp_min", ov, [xv, floor](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv)) {
                const Tensor& x = t.value(xv);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    if (x[i] > floor) (*gx)[i] += g[i];
            }
        });
        return ov;
    }

    /// Rank-1 element selection -> scalar.
    Variable pick(Variable xv, std::size_t index) {
        const Tensor& x = value(xv);
        if (x.rank() != 1) throw ShapeError("pick: expected rank-1 input, got " + x.shape_str());
        if (index >= x.dim(0)) {
            throw UsageError("pick: index " + std::to_string(index) + " out of range for " + x.shape_str());
        }
        Variable ov = result(Tensor::scalar(x[index]), {xv});
        record("pick", ov, [xv, index](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv)) (*gx)[index] += g[0];
        });
        return ov;
    }

    /// Stacks scalar variables into a rank-1 tensor.
    Variable stack(std::span<const Variable> scalars) {
        Tensor out({scalars.size()});
        for (std::size_t i = 0; i < scalars.size(); ++i) {
            const Tensor& s = value(scalars[i]);
            if (s.numel() != 1) throw ShapeError("stack: element " + std::to_string(i) + " is not scalar");
            out[i] = s[0];
        }
        std::vector<Variable> parents(scalars.begin(), scalars.end());
        Variable ov = result(std::move(out), parents);
        record("stack", ov, [parents](GradientTape& t, const Tensor& g) {
            for (std::size_t i = 0; i < parents.size(); ++i) {
                if (Tensor* gp = t.accum(parents[i])) (*gp)[0] += g[i];
            }
        });
        return ov;
    }

    Variable dot(Variable av, Variable bv) {
        const Tensor& a = value(av);
        const Tensor& b = value(bv);
        if (a.rank() != 1 || !a.same_shape(b)) {
            throw ShapeError("dot: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
        }
        double s = 0.0;
        for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
        Variable ov = result(Tensor::scalar(s), {av, bv});
        record("dot", ov, [av, bv](GradientTape& t, const Tensor& g) {
            const Tensor& a = t.value(av);
            const Tensor& b = t.value(bv);
            const double gs = g[0];
            if (Tensor* ga = t.accum(av))
                for (std::size_t i = 0; i < a.numel(); ++i) (*ga)[i] += gs * b[i];
            if (Tensor* gb = t.accum(bv))
                for (std::size_t i = 0; i < b.numel(); ++i) (*gb)[i] += gs * a[i];
        });
        return ov;
    }

    Variable sum(Variable xv) {
        const Tensor& x = value(xv);
        double s = 0.0;
        for (double v : x.values()) s += v;
        Variable ov = result(Tensor::scalar(s), {xv});
        record("sum", ov, [xv](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv))
                for (std::size_t i = 0; i < gx->numel(); ++i) (*gx)[i] += g[0];
        });
        return ov;
    }

    Variable mean(Variable xv) {
        const Tensor& x = value(xv);
        if (x.numel() == 0) throw UsageError("mean: empty tensor");
        double s = 0.0;
        for (double v : x.values()) s += v;
        const double inv = 1.0 / static_cast<double>(x.numel());
        Variable ov = result(Tensor::scalar(s * inv), {xv});
        record("mean", ov, [xv, inv](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv))
                for (std::size_t i = 0; i < gx->numel(); ++i) (*gx)[i] += g[0] * inv;
        });
        return ov;
    }

    Variable reshape(Variable xv, std::vector<std::size_t> shape) {
        const Tensor& x = value(xv);
        if (Tensor::count(shape) != x.numel()) {
            throw ShapeError("reshape: cannot view " + x.shape_str() + " as " + Tensor::shape_str(shape));
        }
        Tensor out(std::move(shape), x.values());
        Variable ov = result(std::move(out), {xv});
        record("reshape", ov, [xv](GradientTape& t, const Tensor& g) {
            if (Tensor* gx = t.accum(xv))
                for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
        });
        return ov;
    }

    Variable softmax(Variable xv) { return exp(log_softmax(xv)); }

    // ---- backward -----------------------------------------------------

    /// Propagates d(loss)/d(node) for every recorded node. May be called once
    /// per tape; the loss must hold exactly one value.
    void backward(Variable loss) {
        if (backward_done_) throw UsageError("backward: already called on this tape");
        const Tensor& lv = value(loss);
        if (lv.numel() != 1) {
            throw UsageError("backward: loss must be scalar, got shape " + lv.shape_str());
        }
        backward_done_ = true;
        Node& ln = node(loss);
        if (!ln.active()) return;  // constant loss: every gradient is zero
        ln.grad = Tensor::full(lv.shape(), 1.0);
        ln.has_grad = true;
        const std::string& fault = gradient_fault();
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            Node& out = nodes_[it->out];
            if (!out.has_grad) continue;
            if (!fault.empty() && fault == it->name) {
                Tensor perturbed = out.grad;
                for (double& v : perturbed.values()) v *= 1.02;
                it->backward(*this, perturbed);
            } else {
                it->backward(*this, out.grad);
            }
        }
    }

    /// Gradient of the loss w.r.t. v. Frozen tensors and nodes the loss does
    /// not reach report exact zeros. Asking for a non-differentiable node is
    /// a usage error.
    Tensor grad(Variable v) const {
        if (!backward_done_) throw UsageError("grad: backward has not been run");
        const Node& n = node(v);
        if (!n.requires_grad) throw UsageError("grad: node does not require gradients");
        if (n.has_grad) return n.grad;
        return Tensor(n.value.shape());
    }

    bool backward_done() const { return backward_done_; }

    // ---- diagnostics ----------------------------------------------------

    /// Smallest |x| seen by any relu; +inf if none ran. Gradient checks use
    /// this to reject draws that sit within 1e-3 of the kink.
    double min_abs_relu_input() const { return min_abs_relu_input_; }

    /// Smallest pre-normalization norm seen by l2_normalize; +inf if none ran.
    double min_l2_prenorm() const { return min_l2_prenorm_; }

    /// Test hook: while set to an op name, backward multiplies that op's
    /// upstream gradient by 1.02. Used to prove the self-check catches a
    /// broken gradient rule.
    static void set_gradient_fault(std::string op_name) { gradient_fault_mut() = std::move(op_name); }
    static const std::string& gradient_fault() { return gradient_fault_mut(); }

private:
    static constexpr double kNormEps = 1e-12;

    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool frozen = false;
        bool has_grad = false;
        bool active() const { return requires_grad && !frozen; }
    };

    struct OpRecord {
        const char* name;
        std::uint32_t out;
        std::function<void(GradientTape&, const Tensor&)> backward;
    };

    static std::string& gradient_fault_mut() {
        static thread_local std::string fault;
        return fault;
    }

    Node& node(Variable v) {
        if (!v.valid() || v.id >= nodes_.size()) throw UsageError("invalid tape variable");
        return nodes_[v.id];
    }
    const Node& node(Variable v) const {
        if (!v.valid() || v.id >= nodes_.size()) throw UsageError("invalid tape variable");
        return nodes_[v.id];
    }

    Variable push(Tensor value, bool requires_grad, bool frozen) {
        if (backward_done_) throw UsageError("tape: cannot extend after backward");
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.frozen = frozen;
        nodes_.push_back(std::move(n));
        return Variable{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    /// Creates the output node of an op; it participates in the gradient
    /// graph iff some parent does.
    Variable result(Tensor value, std::span<const Variable> parents) {
        bool rg = false;
        for (Variable p : parents) rg = rg || node(p).active();
        return push(std::move(value), rg, false);
    }

    Variable result(Tensor value, std::initializer_list<Variable> parents) {
        return result(std::move(value), std::span<const Variable>(parents.begin(), parents.size()));
    }

    template <typename Fn>
    void record(const char* name, Variable out, Fn&& backward) {
        if (!node(out).active()) return;  // nothing downstream needs this op
        ops_.push_back(OpRecord{name, out.id, std::forward<Fn>(backward)});
    }

    /// Returns the gradient buffer of a node for accumulation, or nullptr if
    /// the node never accumulates (constant or frozen).
    Tensor* accum(Variable v) {
        Node& n = node(v);
        if (!n.active()) return nullptr;
        if (!n.has_grad) {
            n.grad = Tensor(n.value.shape());
            n.has_grad = true;
        }
        return &n.grad;
    }

    std::vector<Node> nodes_;
    std::vector<OpRecord> ops_;
    bool backward_done_ = false;
    double min_abs_relu_input_ = std::numeric_limits<double>::infinity();
    double min_l2_prenorm_ = std::numeric_limits<double>::infinity();
};

}  // namespace mscn
