#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "mscn/model.hpp"
#include "mscn/tensor.hpp"

namespace mscn {

struct OptimizerConfig {
    enum class Kind { sgd, adam };
    Kind kind = Kind::adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (!(learning_rate > 0.0) && learning_rate != 0.0) {
            throw ConfigError("optimizer: learning_rate must be non-negative");
        }
    }
};

/// SGD (w <- w - lr * g, exact) or Adam with bias correction. Tensors in
/// frozen groups are skipped entirely, so their bytes never change.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

    void step(ModelParams& params, const std::map<std::string, Tensor>& grads) {
        ++t_;
        for (const auto& [name, g] : grads) {
            if (params.is_frozen_param(name)) continue;
            Tensor& w = params.tensor(name);
            if (!w.same_shape(g)) {
                throw UsageError("optimizer: gradient shape " + g.shape_str() + " does not match parameter " +
                                 name + " " + w.shape_str());
            }
            if (cfg_.kind == OptimizerConfig::Kind::sgd) {
                for (std::size_t i = 0; i < w.numel(); ++i) w[i] -= cfg_.learning_rate * g[i];
                continue;
            }
            Tensor& m = state(m_, name, w);
            Tensor& v = state(v_, name, w);
            const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
            const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
            for (std::size_t i = 0; i < w.numel(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    std::uint64_t iterations() const { return t_; }

private:
    static Tensor& state(std::map<std::string, Tensor>& store, const std::string& name, const Tensor& like) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, Tensor(like.shape())).first;
        return it->second;
    }

    OptimizerConfig cfg_;
    std::uint64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

}  // namespace mscn
