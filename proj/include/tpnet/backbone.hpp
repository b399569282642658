#pragma once

// VGG-19 feature trunk used as the perceptual branch.
//
// Layers are addressed by the canonical torchvision `features` enumeration
// (conv1_1 = 0, ReLU and max-pool layers interleaved). Taps return the raw
// convolution output at the listed index, before its ReLU.
//
//   canonical  torchvision            canonical  torchvision
//   conv1_1    features.0             conv4_1    features.19
//   conv1_2    features.2   (tap 1)   conv4_2    features.21  (tap 4)
//   conv2_1    features.5             conv4_3    features.23
//   conv2_2    features.7   (tap 2)   conv4_4    features.25
//   conv3_1    features.10            conv5_1    features.28
//   conv3_2    features.12  (tap 3)   conv5_2    features.30  (tap 5)
//   conv3_3    features.14            conv5_3    features.32
//   conv3_4    features.16            conv5_4    features.34
//
// Archive tensor names may use either column, with a ".weight" / ".bias" suffix.

#include <algorithm>
#include <array>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "tpnet/error.hpp"
#include "tpnet/image.hpp"
#include "tpnet/model.hpp"
#include "tpnet/ops.hpp"
#include "tpnet/params.hpp"
#include "tpnet/tensor.hpp"

namespace tpnet {

struct VggLayer {
    enum class Kind { conv, relu, pool };
    Kind kind;
    std::size_t index;
    std::string name;  // canonical name for convs, empty otherwise
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
};

/// Canonical VGG-19 `features` sequence (37 layers).
inline const std::vector<VggLayer>& vgg19_layers() {
    static const std::vector<VggLayer> layers = [] {
        const std::array<int, 5> convs_per_block{2, 2, 4, 4, 4};
        const std::array<std::size_t, 5> widths{64, 128, 256, 512, 512};
        std::vector<VggLayer> out;
        std::size_t in = 3;
        for (std::size_t b = 0; b < 5; ++b) {
            for (int k = 1; k <= convs_per_block[b]; ++k) {
                out.push_back({VggLayer::Kind::conv, out.size(),
                               "conv" + std::to_string(b + 1) + "_" + std::to_string(k), in, widths[b]});
                out.push_back({VggLayer::Kind::relu, out.size(), "", 0, 0});
                in = widths[b];
            }
            out.push_back({VggLayer::Kind::pool, out.size(), "", 0, 0});
        }
        return out;
    }();
    return layers;
}

struct Preprocessing {
    std::array<double, 3> mean{0.485, 0.456, 0.406};
    std::array<double, 3> std{0.229, 0.224, 0.225};
};

struct BackboneConfig {
    std::vector<std::size_t> tap_layers{2, 7, 12, 21, 30};
    std::vector<std::size_t> channels_per_tap{64, 128, 256, 512, 512};
    bool frozen = true;
    Preprocessing preprocessing{};

    std::size_t last_layer() const { return tap_layers.back(); }

    void validate() const {
        if (tap_layers.size() != 5) fail(ErrorKind::config, "backbone needs exactly 5 tap layers");
        if (!std::is_sorted(tap_layers.begin(), tap_layers.end()) ||
            std::adjacent_find(tap_layers.begin(), tap_layers.end()) != tap_layers.end())
            fail(ErrorKind::config, "backbone tap layers must be strictly increasing");
        const auto& layers = vgg19_layers();
        if (tap_layers.back() >= layers.size()) fail(ErrorKind::config, "tap layer beyond the VGG-19 trunk");
        if (channels_per_tap.size() != tap_layers.size())
            fail(ErrorKind::config, "channels_per_tap must list one entry per tap");
        for (std::size_t i = 0; i < tap_layers.size(); ++i) {
            const auto& l = layers[tap_layers[i]];
            if (l.kind != VggLayer::Kind::conv)
                fail(ErrorKind::config, "tap layer " + std::to_string(tap_layers[i]) + " is not a convolution");
            if (l.out_channels != channels_per_tap[i])
                fail(ErrorKind::config, "tap layer " + std::to_string(tap_layers[i]) + " has " +
                                            std::to_string(l.out_channels) + " channels, expected " +
                                            std::to_string(channels_per_tap[i]));
        }
    }

    /// Convolution layers the trunk needs to reach the last tap.
    std::vector<VggLayer> conv_layers() const {
        std::vector<VggLayer> out;
        for (const auto& l : vgg19_layers())
            if (l.kind == VggLayer::Kind::conv && l.index <= last_layer()) out.push_back(l);
        return out;
    }
};

inline ConvSpec vgg_conv_spec(const VggLayer& l) { return conv3x3(l.in_channels, l.out_channels); }

template <typename T = float>
ParamStore<T> backbone_layout(const BackboneConfig& cfg) {
    cfg.validate();
    ParamStore<T> store;
    for (const auto& l : cfg.conv_layers()) add_conv(store, l.name, vgg_conv_spec(l));
    return store;
}

/// Seeded random trunk used when no pretrained archive is available.
template <typename T = float>
ParamStore<T> init_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
    auto store = backbone_layout<T>(cfg);
    kaiming_init(store, derive_seed(seed, "backbone"));
    return store;
}

/// 8-bit RGB raster -> (1, 3, H, W): scale to [0, 1], then per-channel standardization.
template <typename T = float>
Tensor<T> preprocess(const Image& image, const Preprocessing& prep = {}, std::size_t min_side = 0,
                     std::size_t multiple = 1) {
    if (image.channels != 3)
        fail(ErrorKind::data, "expected an RGB image, got " + std::to_string(image.channels) + " channels");
    if (image.width < min_side || image.height < min_side)
        fail(ErrorKind::shape, "image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                                   " is below the minimum size " + std::to_string(min_side) + "x" +
                                   std::to_string(min_side));
    if (image.width % multiple != 0 || image.height % multiple != 0)
        fail(ErrorKind::shape, "image sides must be divisible by " + std::to_string(multiple));
    Tensor<T> out(Shape{1, 3, image.height, image.width});
    for (std::size_t c = 0; c < 3; ++c) {
        const double mean = prep.mean[c], sd = prep.std[c];
        T* plane = out.plane(0, c);
        for (std::size_t y = 0; y < image.height; ++y)
            for (std::size_t x = 0; x < image.width; ++x)
                plane[y * image.width + x] =
                    static_cast<T>((static_cast<double>(image.at(y, x, c)) / 255.0 - mean) / sd);
    }
    return out;
}

template <typename T>
struct BackboneTape {
    std::vector<Tensor<T>> conv_inputs;  // input of every conv, in trunk order
    std::vector<Tensor<T>> relu_outputs;
    std::vector<Shape> pool_inputs;
    std::vector<std::vector<std::uint32_t>> pool_argmax;
};

template <typename T>
std::vector<Tensor<T>> vgg_features(const Tensor<T>& x, const ParamStore<T>& weights, const BackboneConfig& cfg,
                                    BackboneTape<T>* tape = nullptr) {
    if (x.c() != 3) fail(ErrorKind::shape, "backbone expects 3 input channels, got " + x.shape().str());
    std::vector<Tensor<T>> taps;
    Tensor<T> cur = x;
    if (tape) *tape = BackboneTape<T>{};
    for (const auto& l : vgg19_layers()) {
        if (l.index > cfg.last_layer()) break;
        switch (l.kind) {
            case VggLayer::Kind::conv: {
                const auto spec = vgg_conv_spec(l);
                if (!weights.contains(l.name + ".weight") || !weights.contains(l.name + ".bias"))
                    fail(ErrorKind::integrity, "backbone weights incomplete: missing " + l.name);
                if (tape) tape->conv_inputs.push_back(cur);
                cur = conv_named(cur, weights, l.name, spec);
                if (std::find(cfg.tap_layers.begin(), cfg.tap_layers.end(), l.index) != cfg.tap_layers.end())
                    taps.push_back(cur);
                break;
            }
            case VggLayer::Kind::relu:
                cur = relu(std::move(cur));
                if (tape) tape->relu_outputs.push_back(cur);
                break;
            case VggLayer::Kind::pool: {
                auto pooled = max_pool2x2(cur);
                if (tape) {
                    tape->pool_inputs.push_back(cur.shape());
                    tape->pool_argmax.push_back(std::move(pooled.argmax));
                }
                cur = std::move(pooled.out);
                break;
            }
        }
    }
    return taps;
}

/// Backward through the trunk, accumulating weight gradients. `tap_grads` may
/// contain empty tensors for taps that receive no gradient.
template <typename T>
void vgg_backward(const BackboneTape<T>& tape, const std::vector<Tensor<T>>& tap_grads, const ParamStore<T>& weights,
                  const BackboneConfig& cfg, ParamStore<T>* grads) {
    const auto& layers = vgg19_layers();
    std::size_t conv_i = tape.conv_inputs.size(), relu_i = tape.relu_outputs.size(), pool_i = tape.pool_inputs.size();
    std::size_t tap_i = cfg.tap_layers.size();
    Tensor<T> grad;  // gradient w.r.t. the current layer's output; empty = zero
    for (std::size_t idx = cfg.last_layer() + 1; idx-- > 0;) {
        const auto& l = layers[idx];
        switch (l.kind) {
            case VggLayer::Kind::conv: {
                --conv_i;
                if (tap_i > 0 && cfg.tap_layers[tap_i - 1] == idx) {
                    --tap_i;
                    const auto& g = tap_grads[tap_i];
                    if (!g.empty()) {
                        if (grad.empty())
                            grad = g;
                        else
                            grad += g;
                    }
                }
                if (grad.empty()) break;
                grad = conv_named_backward(tape.conv_inputs[conv_i], grad, weights, grads, l.name, vgg_conv_spec(l),
                                           conv_i > 0);
                break;
            }
            case VggLayer::Kind::relu:
                --relu_i;
                if (!grad.empty()) grad = relu_backward(tape.relu_outputs[relu_i], std::move(grad));
                break;
            case VggLayer::Kind::pool:
                --pool_i;
                if (!grad.empty()) grad = max_pool_backward(tape.pool_inputs[pool_i], tape.pool_argmax[pool_i], grad);
                break;
        }
    }
}

struct ImportReport {
    std::uint32_t checksum = 0;
    std::size_t tensors = 0;
    std::vector<std::pair<std::string, std::string>> mapping;  // canonical name -> source name
};

/// Build the trunk ParamStore from a named-tensor archive holding VGG-19 conv
/// layers under canonical or torchvision names. Layers past the last tap are
/// ignored; missing or mis-shaped layers raise an integrity error naming them.
template <typename T = float>
ParamStore<T> import_pretrained(const ParamStore<float>& source, const BackboneConfig& cfg,
                                ImportReport* report = nullptr) {
    auto store = backbone_layout<T>(cfg);
    std::vector<std::string> missing, mismatched;
    ImportReport rep;
    for (const auto& l : cfg.conv_layers()) {
        const std::string torch_name = "features." + std::to_string(l.index);
        for (const char* suffix : {".weight", ".bias"}) {
            std::string src;
            if (source.contains(l.name + suffix))
                src = l.name + suffix;
            else if (source.contains(torch_name + suffix))
                src = torch_name + suffix;
            if (src.empty()) {
                if (missing.empty() || missing.back() != l.name) missing.push_back(l.name);
                continue;
            }
            auto& dst = store.get(l.name + suffix);
            const auto& in = source.get(src);
            if (in.shape != dst.shape) {
                if (mismatched.empty() || mismatched.back() != l.name) mismatched.push_back(l.name);
                continue;
            }
            std::copy(in.values.begin(), in.values.end(), dst.values.begin());
            rep.mapping.emplace_back(l.name + suffix, src);
        }
    }
    if (!missing.empty() || !mismatched.empty()) {
        std::string msg = "pretrained VGG-19 archive:";
        auto join = [](const std::vector<std::string>& v) {
            std::string s;
            for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
            return s;
        };
        if (!missing.empty()) msg += " missing [" + join(missing) + "]";
        if (!mismatched.empty()) msg += " shape mismatch [" + join(mismatched) + "]";
        fail(ErrorKind::integrity, msg);
    }
    rep.tensors = store.size();
    rep.checksum = checksum(store);
    if (report) *report = std::move(rep);
    return store;
}

template <typename T = float>
ParamStore<T> import_pretrained(const std::string& path, const BackboneConfig& cfg, ImportReport* report = nullptr) {
    ImportReport rep;
    auto store = import_pretrained<T>(load_params<float>(path), cfg, &rep);
    std::clog << "imported " << rep.tensors << " backbone tensors from " << path << " (crc32 " << std::hex
              << rep.checksum << std::dec << ")\n";
    if (report) *report = std::move(rep);
    return store;
}

/// Full forward: backbone features, textural branch and regressor.
template <typename T>
std::vector<T> tpnet_forward(const Tensor<T>& image, const ParamStore<T>& head, const ModelConfig& cfg,
                             const ParamStore<T>& backbone, const BackboneConfig& bcfg) {
    check_input_size<T>(image.shape(), cfg);
    auto feats = vgg_features(image, backbone, bcfg);
    return scores_of(head_forward(image, feats, head, cfg));
}

/// Per-stage attention, channel-averaged to one (n, 1, h, w) map and min-max
/// rescaled to [0, 1]. A constant map exports as all zeros.
template <typename T>
struct AttentionMaps {
    struct Stage {
        std::size_t stage = 0;
        Tensor<T> map;
        T raw_min = 0;
        T raw_max = 0;
    };
    std::vector<Stage> stages;  // ordered by stage, keyed 1..num_stages
};

template <typename T>
AttentionMaps<T> extract_attention(const Tensor<T>& image, const ParamStore<T>& head, const ModelConfig& cfg,
                                   const ParamStore<T>& backbone, const BackboneConfig& bcfg) {
    if (!cfg.use_sa) fail(ErrorKind::unsupported, "attention export requires a model with spatial attention enabled");
    check_input_size<T>(image.shape(), cfg);
    auto feats = vgg_features(image, backbone, bcfg);
    HeadTape<T> tape;
    head_forward(image, feats, head, cfg, &tape);
    AttentionMaps<T> maps;
    for (std::size_t s = 0; s < cfg.num_stages; ++s) {
        const auto& a = tape.textural.stages[s].block.sa.attention;
        Tensor<T> avg(Shape{a.n(), 1, a.h(), a.w()});
        for (std::size_t b = 0; b < a.n(); ++b)
            for (std::size_t c = 0; c < a.c(); ++c) {
                const T* src = a.plane(b, c);
                T* dst = avg.plane(b, 0);
                for (std::size_t i = 0; i < a.shape().plane(); ++i) dst[i] += src[i];
            }
        for (auto& v : avg.values()) v /= static_cast<T>(a.c());
        const auto [lo, hi] = std::minmax_element(avg.values().begin(), avg.values().end());
        const T mn = *lo, mx = *hi;
        for (auto& v : avg.values()) v = mx > mn ? (v - mn) / (mx - mn) : T(0);
        maps.stages.push_back({s + 1, std::move(avg), mn, mx});
    }
    return maps;
}

}  // namespace tpnet
