#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mscn/data.hpp"
#include "mscn/training.hpp"

namespace mscn {

namespace detail {

/// Strict object reader: every key must be consumed, unknown keys are
/// reported with their dotted path. Holds its own copy of the subtree so
/// callers can pass temporaries.
class Section {
public:
    Section(nlohmann::json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    template <typename T>
    T get(const std::string& key, T fallback) {
        seen_.insert(key);
        if (!j_.contains(key)) return fallback;
        try {
            return j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(path_ + "." + key + ": wrong type");
        }
    }

    const nlohmann::json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    nlohmann::json sub(const std::string& key) {
        seen_.insert(key);
        if (!j_.contains(key)) return nlohmann::json::object();
        if (!j_.at(key).is_object()) throw ConfigError(path_ + "." + key + ": expected an object");
        return j_.at(key);
    }

    std::string where(const std::string& key) const { return path_ + "." + key; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) {
                throw ConfigError("unknown config key: " + path_ + "." + it.key());
            }
        }
    }

private:
    nlohmann::json j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace detail

/// The single JSON config document: synthetic-data spec plus the full
/// training configuration. Unknown keys are rejected; all defaults follow
/// the stock recipe (tau 0.1, alpha 0.8, gamma 2, Adam at 1e-3, batch 16,
/// 15 + 10 epochs).
struct RunConfig {
    std::uint64_t seed = 1;
    SyntheticSpec data;
    TrainConfig train;

    static RunConfig from_json(const nlohmann::json& root) {
        RunConfig cfg;
        detail::Section top(root, "config");
        cfg.seed = top.get<std::uint64_t>("seed", cfg.seed);

        {
            detail::Section d(top.sub("data"), "data");
            cfg.data.num_train = d.get<std::size_t>("num_train", cfg.data.num_train);
            cfg.data.num_val = d.get<std::size_t>("num_val", cfg.data.num_val);
            cfg.data.num_test = d.get<std::size_t>("num_test", cfg.data.num_test);
            if (d.has("class_proportions")) {
                try {
                    cfg.data.class_proportions = d.raw("class_proportions").get<std::vector<double>>();
                } catch (const nlohmann::json::exception&) {
                    throw ConfigError("data.class_proportions: expected an array of reals");
                }
                double sum = 0.0;
                for (double p : cfg.data.class_proportions) sum += p;
                if (std::fabs(sum - 1.0) > 1e-9) {
                    throw ConfigError("data.class_proportions: entries sum to " + format_double(sum) +
                                      ", expected 1");
                }
            }
            cfg.data.image_size = d.get<std::size_t>("image_size", cfg.data.image_size);
            cfg.data.aux_raster_size = d.get<std::size_t>("aux_raster_size", cfg.data.aux_raster_size);
            cfg.data.class_separation = d.get<double>("class_separation", cfg.data.class_separation);
            if (d.has("aux_informativeness")) {
                const nlohmann::json& a = d.raw("aux_informativeness");
                if (a.is_number()) {
                    cfg.data.aux_informativeness.fill(a.get<double>());
                } else if (a.is_array() && a.size() == 4) {
                    for (std::size_t i = 0; i < 4; ++i) cfg.data.aux_informativeness[i] = a.at(i).get<double>();
                } else {
                    throw ConfigError("data.aux_informativeness: expected a real or an array of 4 reals");
                }
            }
            cfg.data.noise_level = d.get<double>("noise_level", cfg.data.noise_level);
            d.finish();
        }

        {
            detail::Section m(top.sub("model"), "model");
            const std::string enc = m.get<std::string>("encoder", "small_cnn");
            if (enc == "small_cnn") cfg.train.model.encoder_kind = ModelConfig::EncoderKind::small_cnn;
            else if (enc == "mlp") cfg.train.model.encoder_kind = ModelConfig::EncoderKind::mlp;
            else throw ConfigError("model.encoder: expected 'small_cnn' or 'mlp', got '" + enc + "'");
            if (m.has("conv_channels")) {
                cfg.train.model.conv_channels = m.raw("conv_channels").get<std::vector<std::size_t>>();
            }
            cfg.train.model.mlp_hidden = m.get<std::size_t>("mlp_hidden", cfg.train.model.mlp_hidden);
            cfg.train.model.rep_dim = m.get<std::size_t>("rep_dim", cfg.train.model.rep_dim);
            cfg.train.model.proj_hidden = m.get<std::size_t>("proj_hidden", cfg.train.model.proj_hidden);
            cfg.train.model.proj_out = m.get<std::size_t>("proj_out", cfg.train.model.proj_out);
            cfg.train.model.num_aux = m.get<std::size_t>("num_aux", cfg.train.model.num_aux);
            cfg.train.model.aux_feature_dim = m.get<std::size_t>("aux_feature_dim", cfg.train.model.aux_feature_dim);
            cfg.train.model.aux_dense = m.get<bool>("aux_dense", cfg.train.model.aux_dense);
            if (m.has("classifier_hidden")) {
                cfg.train.model.classifier_hidden = m.raw("classifier_hidden").get<std::vector<std::size_t>>();
            }
            cfg.train.model.num_classes = m.get<std::size_t>("num_classes", cfg.train.model.num_classes);
            m.finish();
        }

        {
            detail::Section l(top.sub("loss"), "loss");
            cfg.train.loss.tau = l.get<double>("tau", cfg.train.loss.tau);
            if (l.has("alpha")) {
                const nlohmann::json& a = l.raw("alpha");
                if (a.is_number()) cfg.train.loss.alpha = {a.get<double>()};
                else if (a.is_array()) cfg.train.loss.alpha = a.get<std::vector<double>>();
                else throw ConfigError("loss.alpha: expected a real or an array of reals");
            }
            cfg.train.loss.gamma = l.get<double>("gamma", cfg.train.loss.gamma);
            l.finish();
        }

        {
            detail::Section t(top.sub("train"), "train");
            cfg.train.epochs_stage1 = t.get<int>("epochs_stage1", cfg.train.epochs_stage1);
            cfg.train.epochs_stage2 = t.get<int>("epochs_stage2", cfg.train.epochs_stage2);
            cfg.train.batch_size = t.get<std::size_t>("batch_size", cfg.train.batch_size);
            const std::string opt = t.get<std::string>("optimizer", "adam");
            OptimizerConfig::Kind kind;
            if (opt == "adam") kind = OptimizerConfig::Kind::adam;
            else if (opt == "sgd") kind = OptimizerConfig::Kind::sgd;
            else throw ConfigError("train.optimizer: expected 'adam' or 'sgd', got '" + opt + "'");
            const double lr = t.get<double>("learning_rate", 1e-3);
            cfg.train.opt_stage1.kind = kind;
            cfg.train.opt_stage1.learning_rate = lr;
            cfg.train.opt_stage2.kind = kind;
            cfg.train.opt_stage2.learning_rate = lr;
            {
                detail::Section a(t.sub("augment"), "train.augment");
                cfg.train.augment_policy.hflip = a.get<bool>("hflip", cfg.train.augment_policy.hflip);
                cfg.train.augment_policy.rotation = a.get<bool>("rotation", cfg.train.augment_policy.rotation);
                cfg.train.augment_policy.elastic = a.get<bool>("elastic", cfg.train.augment_policy.elastic);
                cfg.train.augment_policy.elastic_sigma =
                    a.get<double>("elastic_sigma", cfg.train.augment_policy.elastic_sigma);
                cfg.train.augment_policy.elastic_radius =
                    a.get<double>("elastic_radius", cfg.train.augment_policy.elastic_radius);
                a.finish();
            }
            cfg.train.two_view = t.get<bool>("two_view", cfg.train.two_view);
            t.finish();
        }
        top.finish();

        cfg.data.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.data.validate();
        cfg.train.validate();
        return cfg;
    }

    /// Loads a config file (or defaults when path is empty) and applies
    /// dotted-path overrides of the form "train.epochs_stage1=3".
    static RunConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
        nlohmann::json root = nlohmann::json::object();
        if (!path.empty()) {
            std::ifstream f(path);
            if (!f) throw ConfigError("cannot open config file: " + path.string());
            try {
                f >> root;
            } catch (const nlohmann::json::exception& e) {
                throw ConfigError("config parse error in " + path.string() + ": " + e.what());
            }
        }
        for (const std::string& ov : overrides) {
            const auto eq = ov.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + ov + "'");
            std::string key = ov.substr(0, eq);
            const std::string value = ov.substr(eq + 1);
            nlohmann::json parsed;
            try {
                parsed = nlohmann::json::parse(value);
            } catch (const nlohmann::json::exception&) {
                parsed = value;  // plain string
            }
            nlohmann::json* node = &root;
            std::size_t start = 0;
            while (true) {
                const auto dot = key.find('.', start);
                const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
                if (part.empty()) throw ConfigError("--set: empty path segment in '" + key + "'");
                if (dot == std::string::npos) {
                    (*node)[part] = parsed;
                    break;
                }
                node = &(*node)[part];
                start = dot + 1;
            }
        }
        return from_json(root);
    }

    nlohmann::ordered_json echo() const {
        nlohmann::ordered_json j;
        j["seed"] = seed;
        nlohmann::ordered_json d;
        d["num_train"] = data.num_train;
        d["num_val"] = data.num_val;
        d["num_test"] = data.num_test;
        d["class_proportions"] = data.class_proportions;
        d["image_size"] = data.image_size;
        d["aux_raster_size"] = data.aux_raster_size;
        d["class_separation"] = data.class_separation;
        d["aux_informativeness"] = data.aux_informativeness;
        d["noise_level"] = data.noise_level;
        j["data"] = d;
        nlohmann::ordered_json m;
        m["encoder"] = train.model.encoder_kind == ModelConfig::EncoderKind::small_cnn ? "small_cnn" : "mlp";
        m["conv_channels"] = train.model.conv_channels;
        m["mlp_hidden"] = train.model.mlp_hidden;
        m["rep_dim"] = train.model.rep_dim;
        m["proj_hidden"] = train.model.proj_hidden;
        m["proj_out"] = train.model.proj_out;
        m["num_aux"] = train.model.num_aux;
        m["aux_feature_dim"] = train.model.aux_feature_dim;
        m["aux_dense"] = train.model.aux_dense;
        m["classifier_hidden"] = train.model.classifier_hidden;
        m["num_classes"] = train.model.num_classes;
        j["model"] = m;
        nlohmann::ordered_json l;
        l["tau"] = train.loss.tau;
        l["alpha"] = train.loss.alpha;
        l["gamma"] = train.loss.gamma;
        j["loss"] = l;
        nlohmann::ordered_json t;
        t["epochs_stage1"] = train.epochs_stage1;
        t["epochs_stage2"] = train.epochs_stage2;
        t["batch_size"] = train.batch_size;
        t["optimizer"] = train.opt_stage1.kind == OptimizerConfig::Kind::adam ? "adam" : "sgd";
        t["learning_rate"] = train.opt_stage1.learning_rate;
        nlohmann::ordered_json a;
        a["hflip"] = train.augment_policy.hflip;
        a["rotation"] = train.augment_policy.rotation;
        a["elastic"] = train.augment_policy.elastic;
        a["elastic_sigma"] = train.augment_policy.elastic_sigma;
        a["elastic_radius"] = train.augment_policy.elastic_radius;
        t["augment"] = a;
        t["two_view"] = train.two_view;
        j["train"] = t;
        return j;
    }
};

}  // namespace mscn
