#pragma once

// JSON (de)serialization of every configuration section. Parsing is strict:
// unknown keys are rejected so typos never silently fall back to defaults.

#include <cstdio>
#include <set>
#include <string>

#include <json.hpp>

#include "tpnet/backbone.hpp"
#include "tpnet/error.hpp"
#include "tpnet/model.hpp"
#include "tpnet/rng.hpp"

namespace tpnet {

using json = nlohmann::json;

struct TrainConfig {
    std::size_t epochs = 100;
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    std::size_t crop_size = 224;
    bool freeze_backbone = true;

    void validate() const {
        if (epochs < 1) fail(ErrorKind::config, "epochs must be >= 1");
        if (!(learning_rate >= 0)) fail(ErrorKind::config, "learning_rate must be >= 0");
        if (batch_size < 1) fail(ErrorKind::config, "batch_size must be >= 1");
    }
};

struct DataConfig {
    std::string manifest;  // single manifest, split 60/20/20
    bool group_aware_split = false;
};

struct BackboneSource {
    std::string pretrained;  // named-tensor archive; empty = seeded random trunk
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "run";
    ModelConfig model;
    BackboneSource backbone;
    DataConfig data;
    TrainConfig train;
};

namespace config_detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& section) {
    if (!j.is_object()) fail(ErrorKind::config, section + ": expected a JSON object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key)) fail(ErrorKind::config, section + ": unknown key '" + key + "'");
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& section) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const json::exception& e) {
        fail(ErrorKind::config, section + "." + key + ": " + e.what());
    }
}

}  // namespace config_detail

inline json to_json(const ModelConfig& c) {
    return json{{"num_stages", c.num_stages},
                {"base_channels", c.base_channels},
                {"sa_group_divisor", c.sa_group_divisor},
                {"use_sa", c.use_sa},
                {"use_fnorm", c.use_fnorm},
                {"regressor_pool_size", c.regressor_pool_size},
                {"regressor_channels", c.regressor_channels},
                {"regressor_kernels", c.regressor_kernels},
                {"perceptual_channels", c.perceptual_channels}};
}

inline ModelConfig model_config_from_json(const json& j) {
    using namespace config_detail;
    const std::string s = "model";
    reject_unknown(j,
                   {"num_stages", "base_channels", "sa_group_divisor", "use_sa", "use_fnorm", "regressor_pool_size",
                    "regressor_channels", "regressor_kernels", "perceptual_channels"},
                   s);
    ModelConfig c;
    read(j, "num_stages", c.num_stages, s);
    read(j, "base_channels", c.base_channels, s);
    read(j, "sa_group_divisor", c.sa_group_divisor, s);
    read(j, "use_sa", c.use_sa, s);
    read(j, "use_fnorm", c.use_fnorm, s);
    read(j, "regressor_pool_size", c.regressor_pool_size, s);
    read(j, "regressor_channels", c.regressor_channels, s);
    read(j, "regressor_kernels", c.regressor_kernels, s);
    read(j, "perceptual_channels", c.perceptual_channels, s);
    c.validate();
    return c;
}

inline json to_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},       {"learning_rate", c.learning_rate},
                {"beta1", c.beta1},         {"beta2", c.beta2},
                {"eps", c.eps},             {"batch_size", c.batch_size},
                {"crop_size", c.crop_size}, {"freeze_backbone", c.freeze_backbone}};
}

inline TrainConfig train_config_from_json(const json& j) {
    using namespace config_detail;
    const std::string s = "train";
    reject_unknown(j, {"epochs", "learning_rate", "beta1", "beta2", "eps", "batch_size", "crop_size", "freeze_backbone"},
                   s);
    TrainConfig c;
    read(j, "epochs", c.epochs, s);
    read(j, "learning_rate", c.learning_rate, s);
    read(j, "beta1", c.beta1, s);
    read(j, "beta2", c.beta2, s);
    read(j, "eps", c.eps, s);
    read(j, "batch_size", c.batch_size, s);
    read(j, "crop_size", c.crop_size, s);
    read(j, "freeze_backbone", c.freeze_backbone, s);
    c.validate();
    return c;
}

inline json to_json(const RunConfig& c) {
    return json{{"seed", c.seed},
                {"output_dir", c.output_dir},
                {"model", to_json(c.model)},
                {"backbone", {{"pretrained", c.backbone.pretrained}}},
                {"data", {{"manifest", c.data.manifest}, {"group_aware_split", c.data.group_aware_split}}},
                {"train", to_json(c.train)}};
}

inline RunConfig run_config_from_json(const json& j) {
    using namespace config_detail;
    reject_unknown(j, {"seed", "output_dir", "model", "backbone", "data", "train"}, "config");
    RunConfig c;
    read(j, "seed", c.seed, "config");
    read(j, "output_dir", c.output_dir, "config");
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("backbone")) {
        reject_unknown(j.at("backbone"), {"pretrained"}, "backbone");
        read(j.at("backbone"), "pretrained", c.backbone.pretrained, "backbone");
    }
    if (j.contains("data")) {
        reject_unknown(j.at("data"), {"manifest", "group_aware_split"}, "data");
        read(j.at("data"), "manifest", c.data.manifest, "data");
        read(j.at("data"), "group_aware_split", c.data.group_aware_split, "data");
    }
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    c.train.seed = c.seed;
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        fail(ErrorKind::config, path + ": " + e.what());
    }
    return run_config_from_json(j);
}

/// 16 hex digits of FNV-1a over the canonical (key-sorted, compact) dump.
inline std::string config_hash(const json& j) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

}  // namespace tpnet
