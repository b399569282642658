#pragma once

// TPNet head: the textural branch of residual SR blocks (conv-ReLU-conv, spatial
// attention, F-Norm, residual skip) fused stage by stage with perceptual
// features, followed by the pooling regressor. Every forward can record a tape
// so the matching backward can accumulate gradients into a ParamStore with the
// same names.

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tpnet/error.hpp"
#include "tpnet/ops.hpp"
#include "tpnet/params.hpp"
#include "tpnet/rng.hpp"
#include "tpnet/tensor.hpp"

namespace tpnet {

struct ModelConfig {
    std::size_t num_stages = 6;
    std::size_t base_channels = 64;
    std::size_t sa_group_divisor = 4;
    bool use_sa = true;
    bool use_fnorm = true;
    std::size_t regressor_pool_size = 4;
    std::vector<std::size_t> regressor_channels{256, 64, 1};
    std::vector<std::size_t> regressor_kernels{3, 2, 1};
    std::vector<std::size_t> perceptual_channels{64, 128, 256, 512, 512};
    std::size_t image_channels = 3;

    /// Input sides must be multiples of this.
    std::size_t downsampling() const { return std::size_t{1} << (num_stages - 1); }
    /// Smallest legal input side: the textural output must cover the pooling grid.
    std::size_t min_input_side() const { return downsampling() * regressor_pool_size; }

    std::size_t stage_in_channels(std::size_t stage) const {
        return stage == 1 ? image_channels : perceptual_channels[stage - 2] + base_channels;
    }

    void validate() const {
        if (base_channels == 0 || sa_group_divisor == 0 || base_channels % sa_group_divisor != 0)
            fail(ErrorKind::config, "base_channels (" + std::to_string(base_channels) +
                                        ") must be divisible by sa_group_divisor (" +
                                        std::to_string(sa_group_divisor) + ")");
        if (num_stages != perceptual_channels.size() + 1)
            fail(ErrorKind::config, "num_stages must equal the number of perceptual taps + 1");
        if (regressor_channels.empty() || regressor_channels.back() != 1)
            fail(ErrorKind::config, "last regressor channel count must be 1");
        if (regressor_kernels.size() != regressor_channels.size())
            fail(ErrorKind::config, "regressor_kernels and regressor_channels differ in length");
        std::size_t side = regressor_pool_size;
        for (auto k : regressor_kernels) {
            if (k == 0 || k > side) fail(ErrorKind::config, "regressor kernels exceed the pooled map");
            side = side - k + 1;
        }
        if (side != 1) fail(ErrorKind::config, "regressor kernels must reduce the pooled map to 1x1");
    }
};

// ---------------------------------------------------------------------------
// Layer geometry

inline ConvSpec conv3x3(std::size_t in, std::size_t out, std::size_t groups = 1) {
    return ConvSpec{in, out, 3, 1, groups, true};
}

inline std::pair<ConvSpec, ConvSpec> sa_specs(std::size_t channels, std::size_t divisor) {
    if (divisor == 0 || channels % divisor != 0)
        fail(ErrorKind::config, "spatial attention: " + std::to_string(channels) +
                                    " channels not divisible by group divisor " + std::to_string(divisor));
    const std::size_t reduced = channels / divisor;
    return {conv3x3(channels, reduced, reduced), conv3x3(reduced, channels, reduced)};
}

inline ConvSpec fnorm_spec(std::size_t channels) { return conv3x3(channels, channels, channels); }

inline ConvSpec skip_spec(std::size_t in, std::size_t out) { return ConvSpec{in, out, 1, 0, 1, true}; }

inline std::vector<ConvSpec> regressor_specs(const ModelConfig& cfg) {
    std::vector<ConvSpec> specs;
    std::size_t in = 2 * cfg.base_channels;
    for (std::size_t i = 0; i < cfg.regressor_channels.size(); ++i) {
        specs.push_back(ConvSpec{in, cfg.regressor_channels[i], cfg.regressor_kernels[i], 0, 1, true});
        in = cfg.regressor_channels[i];
    }
    return specs;
}

inline std::string stage_prefix(std::size_t stage) { return "stage" + std::to_string(stage) + "."; }

template <typename T>
void add_conv(ParamStore<T>& store, const std::string& name, const ConvSpec& spec) {
    spec.validate(name);
    store.add(name + ".weight", spec.weight_shape(), ParamRole::weight);
    if (spec.bias) store.add(name + ".bias", {spec.out_channels}, ParamRole::bias);
}

template <typename T>
void add_sa_params(ParamStore<T>& store, const std::string& prefix, std::size_t channels, std::size_t divisor) {
    const auto [c1, c2] = sa_specs(channels, divisor);
    add_conv(store, prefix + "conv1", c1);
    add_conv(store, prefix + "conv2", c2);
}

template <typename T>
void add_fnorm_params(ParamStore<T>& store, const std::string& prefix, std::size_t channels) {
    add_conv(store, prefix.substr(0, prefix.size() - 1), fnorm_spec(channels));
}

template <typename T>
void add_rsrb_params(ParamStore<T>& store, const std::string& prefix, std::size_t in, const ModelConfig& cfg) {
    const std::size_t f = cfg.base_channels;
    add_conv(store, prefix + "conv1", conv3x3(in, f));
    add_conv(store, prefix + "conv2", conv3x3(f, f));
    if (cfg.use_sa) add_sa_params(store, prefix + "sa.", f, cfg.sa_group_divisor);
    if (cfg.use_fnorm) add_fnorm_params(store, prefix + "fnorm.", f);
    if (in != f) add_conv(store, prefix + "skip", skip_spec(in, f));
}

/// Parameter layout of the full head (textural branch + regressor), all zeros.
template <typename T = float>
ParamStore<T> model_layout(const ModelConfig& cfg) {
    cfg.validate();
    ParamStore<T> store;
    for (std::size_t s = 1; s <= cfg.num_stages; ++s)
        add_rsrb_params(store, stage_prefix(s), cfg.stage_in_channels(s), cfg);
    const auto specs = regressor_specs(cfg);
    for (std::size_t i = 0; i < specs.size(); ++i) add_conv(store, "reg.conv" + std::to_string(i + 1), specs[i]);
    return store;
}

enum class InitScheme {
    he_normal,       // N(0, 2 / fan_in)
    fan_in_uniform,  // U(-1 / sqrt(fan_in), 1 / sqrt(fan_in))
};

/// Fan-in scaled weights and zero biases. Weight tensors are filled in layout
/// order from one stream seeded by (seed, "init").
template <typename T>
void kaiming_init(ParamStore<T>& store, std::uint64_t seed, InitScheme scheme = InitScheme::he_normal) {
    Rng rng(derive_seed(seed, "init"));
    for (std::size_t i = 0; i < store.size(); ++i) {
        auto& p = store.at(i);
        if (p.role != ParamRole::weight) {
            std::fill(p.values.begin(), p.values.end(), T(0));
            continue;
        }
        const double fan_in = static_cast<double>(p.numel() / p.shape[0]);
        if (scheme == InitScheme::he_normal) {
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
            for (auto& v : p.values) v = static_cast<T>(dist(rng));
        } else {
            const double bound = 1.0 / std::sqrt(fan_in);
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (auto& v : p.values) v = static_cast<T>(dist(rng));
        }
    }
}

/// Head weights use the uniform scheme: residual stages add their input back,
/// so He-normal gains compound into large, hypersensitive scores.
template <typename T = float>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    auto store = model_layout<T>(cfg);
    kaiming_init(store, seed, InitScheme::fan_in_uniform);
    return store;
}

// ---------------------------------------------------------------------------
// Convolution helpers addressed by parameter name

template <typename T>
Tensor<T> conv_named(const Tensor<T>& x, const ParamStore<T>& p, const std::string& name, const ConvSpec& spec) {
    return conv2d(x, spec, p.get(name + ".weight"), spec.bias ? &p.get(name + ".bias") : nullptr);
}

template <typename T>
Tensor<T> conv_named_backward(const Tensor<T>& x, const Tensor<T>& grad_y, const ParamStore<T>& p,
                              ParamStore<T>* grads, const std::string& name, const ConvSpec& spec,
                              bool want_input_grad = true, std::size_t grad_from = 0) {
    Param<T>* gw = grads ? &grads->get(name + ".weight") : nullptr;
    Param<T>* gb = (grads && spec.bias) ? &grads->get(name + ".bias") : nullptr;
    return conv2d_backward(x, grad_y, spec, p.get(name + ".weight"), gw, gb, want_input_grad, grad_from);
}

// ---------------------------------------------------------------------------
// Spatial attention: y = x * sigmoid(gconv2(relu(gconv1(x))))

template <typename T>
struct SaTape {
    Tensor<T> x;
    Tensor<T> hidden;     // relu(gconv1(x))
    Tensor<T> attention;  // sigmoid output
};

template <typename T>
Tensor<T> sa_forward(const Tensor<T>& x, const ParamStore<T>& p, const std::string& prefix, std::size_t divisor,
                     SaTape<T>* tape = nullptr) {
    const auto [c1, c2] = sa_specs(x.c(), divisor);
    require_finite(x, "spatial attention");
    auto hidden = relu(conv_named(x, p, prefix + "conv1", c1));
    auto attention = sigmoid(conv_named(hidden, p, prefix + "conv2", c2));
    Tensor<T> y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] *= attention.data()[i];
    if (tape) *tape = SaTape<T>{x, std::move(hidden), std::move(attention)};
    return y;
}

template <typename T>
Tensor<T> sa_backward(const SaTape<T>& tape, const Tensor<T>& grad_y, const ParamStore<T>& p,
                      const std::string& prefix, std::size_t divisor, ParamStore<T>* grads) {
    const auto [c1, c2] = sa_specs(tape.x.c(), divisor);
    Tensor<T> grad_x = grad_y;
    Tensor<T> grad_a(grad_y.shape());
    for (std::size_t i = 0; i < grad_y.size(); ++i) {
        grad_x.data()[i] *= tape.attention.data()[i];
        grad_a.data()[i] = grad_y.data()[i] * tape.x.data()[i];
    }
    auto grad_z = sigmoid_backward(tape.attention, std::move(grad_a));
    auto grad_h = conv_named_backward(tape.hidden, grad_z, p, grads, prefix + "conv2", c2);
    grad_h = relu_backward(tape.hidden, std::move(grad_h));
    grad_x += conv_named_backward(tape.x, grad_h, p, grads, prefix + "conv1", c1);
    return grad_x;
}

// ---------------------------------------------------------------------------
// F-Norm: y = x + depthwise_conv3x3(x)

template <typename T>
Tensor<T> fnorm_forward(const Tensor<T>& x, const ParamStore<T>& p, const std::string& prefix) {
    require_finite(x, "f-norm");
    const std::string name = prefix.substr(0, prefix.size() - 1);
    const auto& w = p.get(name + ".weight");
    if (w.shape != fnorm_spec(x.c()).weight_shape())
        fail(ErrorKind::config, "f-norm: depth-wise kernel must have one 3x3 filter per channel (" +
                                    std::to_string(x.c()) + " channels)");
    Tensor<T> y = conv_named(x, p, name, fnorm_spec(x.c()));
    y += x;
    return y;
}

template <typename T>
Tensor<T> fnorm_backward(const Tensor<T>& x, const Tensor<T>& grad_y, const ParamStore<T>& p,
                         const std::string& prefix, ParamStore<T>* grads) {
    const std::string name = prefix.substr(0, prefix.size() - 1);
    Tensor<T> grad_x = conv_named_backward(x, grad_y, p, grads, name, fnorm_spec(x.c()));
    grad_x += grad_y;
    return grad_x;
}

// ---------------------------------------------------------------------------
// Residual SR block: y = fnorm(sa(conv2(relu(conv1(x))))) + skip(x)

template <typename T>
struct RsrbTape {
    Tensor<T> x;
    Tensor<T> hidden;  // relu(conv1(x))
    Tensor<T> body;    // conv2 output
    SaTape<T> sa;
    Tensor<T> gated;  // sa output (== body when SA is disabled)
};

template <typename T>
Tensor<T> rsrb_forward(const Tensor<T>& x, const ParamStore<T>& p, const std::string& prefix, const ModelConfig& cfg,
                       RsrbTape<T>* tape = nullptr) {
    require_finite(x, "residual block");
    const std::size_t f = cfg.base_channels;
    auto hidden = relu(conv_named(x, p, prefix + "conv1", conv3x3(x.c(), f)));
    auto body = conv_named(hidden, p, prefix + "conv2", conv3x3(f, f));
    SaTape<T> sa_tape;
    Tensor<T> gated = cfg.use_sa ? sa_forward(body, p, prefix + "sa.", cfg.sa_group_divisor, &sa_tape) : body;
    Tensor<T> y = cfg.use_fnorm ? fnorm_forward(gated, p, prefix + "fnorm.") : gated;
    if (x.c() == f)
        y += x;
    else
        y += conv_named(x, p, prefix + "skip", skip_spec(x.c(), f));
    if (tape) *tape = RsrbTape<T>{x, std::move(hidden), std::move(body), std::move(sa_tape), std::move(gated)};
    return y;
}

template <typename T>
Tensor<T> rsrb_backward(const RsrbTape<T>& tape, const Tensor<T>& grad_y, const ParamStore<T>& p,
                        const std::string& prefix, const ModelConfig& cfg, ParamStore<T>* grads,
                        bool want_input_grad = true, std::size_t grad_from = 0) {
    const std::size_t f = cfg.base_channels;
    const std::size_t cin = tape.x.c();
    Tensor<T> grad_gated = cfg.use_fnorm ? fnorm_backward(tape.gated, grad_y, p, prefix + "fnorm.", grads) : grad_y;
    Tensor<T> grad_body =
        cfg.use_sa ? sa_backward(tape.sa, grad_gated, p, prefix + "sa.", cfg.sa_group_divisor, grads) : grad_gated;
    auto grad_hidden = conv_named_backward(tape.hidden, grad_body, p, grads, prefix + "conv2", conv3x3(f, f));
    grad_hidden = relu_backward(tape.hidden, std::move(grad_hidden));
    Tensor<T> grad_x = conv_named_backward(tape.x, grad_hidden, p, grads, prefix + "conv1", conv3x3(cin, f),
                                           want_input_grad, grad_from);
    if (cin == f) {
        if (want_input_grad) grad_x += grad_from ? split_channels(grad_y, grad_from).second : grad_y;
    } else {
        auto g = conv_named_backward(tape.x, grad_y, p, grads, prefix + "skip", skip_spec(cin, f), want_input_grad,
                                     grad_from);
        if (want_input_grad) grad_x += g;
    }
    return grad_x;
}

// ---------------------------------------------------------------------------
// Textural branch

template <typename T>
struct StageTape {
    RsrbTape<T> block;
    Shape block_out;  // shape before pooling
    std::vector<std::uint32_t> pool_argmax;
    std::size_t perceptual_channels = 0;  // channels of the concatenated perceptual part
};

template <typename T>
struct TexturalTape {
    std::vector<StageTape<T>> stages;  // index 0 is stage 1
};

template <typename T>
void check_textural_inputs(const Tensor<T>& image, const std::vector<Tensor<T>>& feats, const ModelConfig& cfg) {
    if (image.c() != cfg.image_channels)
        fail(ErrorKind::shape, "image must have " + std::to_string(cfg.image_channels) + " channels, got " +
                                   image.shape().str());
    const std::size_t d = cfg.downsampling();
    if (image.h() < d || image.w() < d)
        fail(ErrorKind::shape, "input too small: " + image.shape().str() + " (minimum side " + std::to_string(d) + ")");
    if (image.h() % d != 0 || image.w() % d != 0)
        fail(ErrorKind::shape, "input sides must be divisible by " + std::to_string(d) + ", got " + image.shape().str());
    if (feats.size() != cfg.perceptual_channels.size())
        fail(ErrorKind::shape, "expected " + std::to_string(cfg.perceptual_channels.size()) +
                                   " perceptual features, got " + std::to_string(feats.size()));
    for (std::size_t i = 0; i < feats.size(); ++i) {
        const Shape want{image.n(), cfg.perceptual_channels[i], image.h() >> i, image.w() >> i};
        if (feats[i].shape() != want)
            fail(ErrorKind::shape, "perceptual feature " + std::to_string(i + 1) + " has shape " +
                                       feats[i].shape().str() + ", expected " + want.str());
    }
}

/// Returns the last textural feature; stage 1 runs on the image at full
/// resolution, stages 2..N on [perceptual_{i-1}, textural_{i-1}] followed by a
/// 2x2 max-pool.
template <typename T>
Tensor<T> textural_forward(const Tensor<T>& image, const std::vector<Tensor<T>>& feats, const ParamStore<T>& p,
                           const ModelConfig& cfg, TexturalTape<T>* tape = nullptr,
                           std::vector<Tensor<T>>* stage_outputs = nullptr) {
    check_textural_inputs(image, feats, cfg);
    if (tape) tape->stages.assign(cfg.num_stages, StageTape<T>{});
    if (stage_outputs) stage_outputs->clear();
    Tensor<T> current = rsrb_forward(image, p, stage_prefix(1), cfg, tape ? &tape->stages[0].block : nullptr);
    if (tape) tape->stages[0].block_out = current.shape();
    if (stage_outputs) stage_outputs->push_back(current);
    for (std::size_t s = 2; s <= cfg.num_stages; ++s) {
        const auto& perceptual = feats[s - 2];
        if (perceptual.h() != current.h() || perceptual.w() != current.w())
            fail(ErrorKind::shape, "stage " + std::to_string(s) + ": perceptual " + perceptual.shape().str() +
                                       " vs textural " + current.shape().str());
        auto input = concat_channels(perceptual, current);
        StageTape<T>* st = tape ? &tape->stages[s - 1] : nullptr;
        auto block = rsrb_forward(input, p, stage_prefix(s), cfg, st ? &st->block : nullptr);
        auto pooled = max_pool2x2(block);
        if (st) {
            st->block_out = block.shape();
            st->pool_argmax = std::move(pooled.argmax);
            st->perceptual_channels = perceptual.c();
        }
        current = std::move(pooled.out);
        if (stage_outputs) stage_outputs->push_back(current);
    }
    return current;
}

/// Backward through the textural branch. Returns gradients for the perceptual
/// features when `want_feature_grads`, otherwise an empty vector.
template <typename T>
std::vector<Tensor<T>> textural_backward(const TexturalTape<T>& tape, const Tensor<T>& grad_out, const ParamStore<T>& p,
                                         const ModelConfig& cfg, ParamStore<T>* grads,
                                         bool want_feature_grads = false) {
    std::vector<Tensor<T>> feat_grads(want_feature_grads ? cfg.num_stages - 1 : 0);
    Tensor<T> grad = grad_out;
    for (std::size_t s = cfg.num_stages; s >= 2; --s) {
        const auto& st = tape.stages[s - 1];
        auto grad_block = max_pool_backward(st.block_out, st.pool_argmax, grad);
        if (!want_feature_grads) {
            grad = rsrb_backward(st.block, grad_block, p, stage_prefix(s), cfg, grads, true, st.perceptual_channels);
            continue;
        }
        auto grad_input = rsrb_backward(st.block, grad_block, p, stage_prefix(s), cfg, grads);
        auto [grad_perceptual, grad_textural] = split_channels(grad_input, st.perceptual_channels);
        feat_grads[s - 2] = std::move(grad_perceptual);
        grad = std::move(grad_textural);
    }
    rsrb_backward(tape.stages[0].block, grad, p, stage_prefix(1), cfg, grads, false);
    return feat_grads;
}

// ---------------------------------------------------------------------------
// Regressor: [adaptive max pool, adaptive avg pool] -> conv/ReLU chain -> scalar

template <typename T>
struct RegressorTape {
    Shape input;
    std::vector<std::uint32_t> max_argmax;
    std::vector<Tensor<T>> layer_inputs;  // input of every regressor conv
};

template <typename T>
Tensor<T> regressor_forward(const Tensor<T>& f, const ParamStore<T>& p, const ModelConfig& cfg,
                            RegressorTape<T>* tape = nullptr) {
    const std::size_t ps = cfg.regressor_pool_size;
    if (f.c() != cfg.base_channels)
        fail(ErrorKind::shape, "regressor expects " + std::to_string(cfg.base_channels) + " channels, got " +
                               f.shape().str());
    if (f.h() < ps || f.w() < ps)
        fail(ErrorKind::shape, "regressor input " + f.shape().str() + " is below the " + std::to_string(ps) + "x" +
                                   std::to_string(ps) + " pooling grid");
    auto mx = adaptive_max_pool(f, ps, ps);
    auto avg = adaptive_avg_pool(f, ps, ps);
    Tensor<T> x = concat_channels(mx.out, avg);
    const auto specs = regressor_specs(cfg);
    if (tape) {
        tape->input = f.shape();
        tape->max_argmax = std::move(mx.argmax);
        tape->layer_inputs.clear();
    }
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (tape) tape->layer_inputs.push_back(x);
        x = conv_named(x, p, "reg.conv" + std::to_string(i + 1), specs[i]);
        if (i + 1 < specs.size()) x = relu(std::move(x));
    }
    return x;  // (n, 1, 1, 1)
}

template <typename T>
Tensor<T> regressor_backward(const RegressorTape<T>& tape, const Tensor<T>& grad_score, const ParamStore<T>& p,
                             const ModelConfig& cfg, ParamStore<T>* grads) {
    const auto specs = regressor_specs(cfg);
    Tensor<T> grad = grad_score;
    for (std::size_t i = specs.size(); i-- > 0;) {
        grad = conv_named_backward(tape.layer_inputs[i], grad, p, grads, "reg.conv" + std::to_string(i + 1), specs[i]);
        // layer_inputs[i] is relu(previous conv) for i > 0
        if (i > 0) grad = relu_backward(tape.layer_inputs[i], std::move(grad));
    }
    auto [grad_max, grad_avg] = split_channels(grad, cfg.base_channels);
    Tensor<T> grad_f = max_pool_backward(tape.input, tape.max_argmax, grad_max);
    grad_f += adaptive_avg_pool_backward(tape.input, grad_avg);
    return grad_f;
}

template <typename T>
std::vector<T> scores_of(const Tensor<T>& out) {
    return std::vector<T>(out.data(), out.data() + out.size());
}

// ---------------------------------------------------------------------------
// Head = textural branch + regressor, given precomputed perceptual features.

template <typename T>
struct HeadTape {
    TexturalTape<T> textural;
    RegressorTape<T> regressor;
};

template <typename T>
void check_input_size(const Shape& image, const ModelConfig& cfg) {
    const std::size_t d = cfg.downsampling();
    const std::size_t min_side = cfg.min_input_side();
    if (image.h < min_side || image.w < min_side)
        fail(ErrorKind::shape, "image " + std::to_string(image.w) + "x" + std::to_string(image.h) +
                                   " is below the minimum size " + std::to_string(min_side) + "x" +
                                   std::to_string(min_side));
    if (image.h % d != 0 || image.w % d != 0)
        fail(ErrorKind::shape, "image sides must be divisible by " + std::to_string(d) + ", got " +
                                   std::to_string(image.w) + "x" + std::to_string(image.h));
}

template <typename T>
Tensor<T> head_forward(const Tensor<T>& image, const std::vector<Tensor<T>>& feats, const ParamStore<T>& p,
                       const ModelConfig& cfg, HeadTape<T>* tape = nullptr) {
    check_input_size<T>(image.shape(), cfg);
    auto textural = textural_forward(image, feats, p, cfg, tape ? &tape->textural : nullptr);
    return regressor_forward(textural, p, cfg, tape ? &tape->regressor : nullptr);
}

template <typename T>
std::vector<Tensor<T>> head_backward(const HeadTape<T>& tape, const Tensor<T>& grad_score, const ParamStore<T>& p,
                                     const ModelConfig& cfg, ParamStore<T>* grads, bool want_feature_grads = false) {
    auto grad_textural = regressor_backward(tape.regressor, grad_score, p, cfg, grads);
    return textural_backward(tape.textural, grad_textural, p, cfg, grads, want_feature_grads);
}

}  // namespace tpnet
