#pragma once

// l1 regression of the network against normalized MOS with Adam, validation
// driven model selection and resumable checkpoints.

#include <cmath>
#include <cstring>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpnet/backbone.hpp"
#include "tpnet/config.hpp"
#include "tpnet/data.hpp"
#include "tpnet/error.hpp"
#include "tpnet/metrics.hpp"
#include "tpnet/model.hpp"
#include "tpnet/params.hpp"

namespace tpnet {

/// Everything needed to score an image.
template <typename T = float>
struct Network {
    ModelConfig model;
    BackboneConfig backbone;
    ParamStore<T> head;
    ParamStore<T> trunk;

    static Network create(const ModelConfig& cfg, const BackboneConfig& bcfg, std::uint64_t seed) {
        return Network{cfg, bcfg, init_params<T>(cfg, seed), init_backbone<T>(bcfg, seed)};
    }

    std::vector<T> score(const Tensor<T>& image) const { return tpnet_forward(image, head, model, trunk, backbone); }
};

template <typename T>
T l1_loss(std::span<const T> predicted, std::span<const T> target) {
    if (predicted.size() != target.size())
        fail(ErrorKind::shape, "loss: length mismatch " + std::to_string(predicted.size()) + " vs " +
                                   std::to_string(target.size()));
    if (predicted.empty()) return T(0);
    T acc = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) acc += std::abs(predicted[i] - target[i]);
    return acc / static_cast<T>(predicted.size());
}

/// d(l1_loss)/d(predicted); the subgradient at zero is taken as 0.
template <typename T>
std::vector<T> l1_loss_grad(std::span<const T> predicted, std::span<const T> target) {
    std::vector<T> g(predicted.size());
    const T scale = T(1) / static_cast<T>(predicted.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const T d = predicted[i] - target[i];
        g[i] = d > 0 ? scale : (d < 0 ? -scale : T(0));
    }
    return g;
}

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One Adam update at step `t` (1-based), bias-corrected.
template <typename T>
void adam_update(ParamStore<T>& params, const ParamStore<T>& grads, ParamStore<T>& m, ParamStore<T>& v,
                 std::uint64_t t, const AdamConfig& cfg) {
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T step = static_cast<T>(cfg.learning_rate / c1);
    const T sqrt_c2 = static_cast<T>(std::sqrt(c2));
    const T eps = static_cast<T>(cfg.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params.at(i).values;
        const auto& g = grads.at(i).values;
        auto& mi = m.at(i).values;
        auto& vi = v.at(i).values;
        for (std::size_t k = 0; k < p.size(); ++k) {
            mi[k] = b1 * mi[k] + (T(1) - b1) * g[k];
            vi[k] = b2 * vi[k] + (T(1) - b2) * g[k] * g[k];
            p[k] -= step * mi[k] / (std::sqrt(vi[k]) / sqrt_c2 + eps);
        }
    }
}

template <typename T = float>
struct TrainState {
    std::uint64_t step = 0;   // Adam step counter
    std::size_t epoch = 0;    // completed epochs
    std::uint64_t seed = 0;
    double best_val_plcc = -std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    ParamStore<T> m_head, v_head;
    ParamStore<T> m_trunk, v_trunk;  // empty while the backbone is frozen

    static TrainState create(const Network<T>& net, std::uint64_t seed, bool freeze_backbone) {
        TrainState s;
        s.seed = seed;
        s.m_head = net.head.zeros_like();
        s.v_head = net.head.zeros_like();
        if (!freeze_backbone) {
            s.m_trunk = net.trunk.zeros_like();
            s.v_trunk = net.trunk.zeros_like();
        }
        return s;
    }
};

template <typename T = float>
struct BatchItem {
    std::string id;
    Tensor<T> image;                                 // preprocessed (1, 3, H, W)
    const std::vector<Tensor<T>>* features = nullptr;  // cached backbone taps, frozen mode only
    T target = 0;
};

template <typename T>
AdamConfig adam_of(const TrainConfig& cfg) {
    return {cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps};
}

/// Forward, l1 loss, backward and one Adam update. Returns the batch loss.
template <typename T>
T train_step(TrainState<T>& state, Network<T>& net, const std::vector<BatchItem<T>>& batch, const TrainConfig& cfg) {
    if (batch.empty()) fail(ErrorKind::data, "train_step: empty batch");
    const bool finetune = !cfg.freeze_backbone;
    if (finetune && state.m_trunk.size() != net.trunk.size())
        fail(ErrorKind::config, "train_step: optimizer state was created for a frozen backbone");
    auto head_grads = net.head.zeros_like();
    ParamStore<T> trunk_grads;
    if (finetune) trunk_grads = net.trunk.zeros_like();

    std::vector<T> preds(batch.size()), targets(batch.size());
    std::vector<HeadTape<T>> tapes(batch.size());
    std::vector<BackboneTape<T>> trunk_tapes(finetune ? batch.size() : 0);
    std::vector<std::vector<Tensor<T>>> own_feats(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& item = batch[i];
        const std::vector<Tensor<T>>* feats = item.features;
        if (finetune || !feats) {
            own_feats[i] = vgg_features(item.image, net.trunk, net.backbone, finetune ? &trunk_tapes[i] : nullptr);
            feats = &own_feats[i];
        }
        preds[i] = head_forward(item.image, *feats, net.head, net.model, &tapes[i]).data()[0];
        targets[i] = item.target;
    }
    const T loss = l1_loss<T>(preds, targets);
    if (!std::isfinite(loss)) {
        std::string ids;
        for (std::size_t i = 0; i < batch.size(); ++i)
            if (!std::isfinite(preds[i])) ids += (ids.empty() ? "" : ", ") + batch[i].id;
        fail(ErrorKind::numeric, "non-finite loss; offending samples: [" + ids + "]");
    }
    const auto grad = l1_loss_grad<T>(preds, targets);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Tensor<T> g(Shape{1, 1, 1, 1}, grad[i]);
        auto feat_grads = head_backward(tapes[i], g, net.head, net.model, &head_grads, finetune);
        if (finetune) vgg_backward(trunk_tapes[i], feat_grads, net.trunk, net.backbone, &trunk_grads);
    }
    ++state.step;
    const auto adam = adam_of<T>(cfg);
    adam_update(net.head, head_grads, state.m_head, state.v_head, state.step, adam);
    if (finetune) adam_update(net.trunk, trunk_grads, state.m_trunk, state.v_trunk, state.step, adam);
    return loss;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "TPNCKPT1"        8 bytes magic
//   header_len        u64
//   header            JSON (format_version, epoch, step, seed, best_val_plcc,
//                     best_epoch, model, backbone, train, config_hash, tensors)
//   archive           named-tensor archive: head.*, trunk.*, adam.{m,v}.{head,trunk}.*
//   crc32             u32 over every preceding byte

inline constexpr int kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::string& path, const Network<T>& net, const TrainState<T>& state,
                     const TrainConfig& train_cfg, const std::string& config_hash_hex = "") {
    ParamStore<T> all;
    all.merge(net.head, "head.");
    all.merge(net.trunk, "trunk.");
    all.merge(state.m_head, "adam.m.head.");
    all.merge(state.v_head, "adam.v.head.");
    all.merge(state.m_trunk, "adam.m.trunk.");
    all.merge(state.v_trunk, "adam.v.trunk.");
    json header{{"format_version", kCheckpointVersion},
                {"epoch", state.epoch},
                {"step", state.step},
                {"seed", state.seed},
                {"best_val_plcc", std::isfinite(state.best_val_plcc) ? json(state.best_val_plcc) : json(nullptr)},
                {"best_epoch", state.best_epoch},
                {"model", to_json(net.model)},
                {"backbone", {{"tap_layers", net.backbone.tap_layers}, {"frozen", net.backbone.frozen}}},
                {"train", to_json(train_cfg)},
                {"config_hash", config_hash_hex},
                {"tensors", all.size()}};
    const std::string header_bytes = header.dump();
    std::string out = "TPNCKPT1";
    archive_detail::put_u64(out, header_bytes.size());
    out += header_bytes;
    out += encode_archive(all);
    archive_detail::put_u32(out, crc32_of(out));
    write_file(path, out);
}

template <typename T = float>
struct Checkpoint {
    Network<T> net;
    TrainState<T> state;
    TrainConfig train;
    json header;
};

/// Loads a checkpoint. When `expected` is given, the stored head must match its
/// parameter layout exactly.
template <typename T = float>
Checkpoint<T> load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expected = std::nullopt) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 20 || bytes.compare(0, 8, "TPNCKPT1") != 0)
        fail(ErrorKind::integrity, path + ": not a checkpoint (bad magic)");
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (crc32_of(std::string_view(bytes).substr(0, bytes.size() - 4)) != stored)
        fail(ErrorKind::integrity, path + ": checkpoint checksum mismatch (file corrupted)");
    std::uint64_t header_len;
    std::memcpy(&header_len, bytes.data() + 8, 8);
    if (16 + header_len > bytes.size() - 4) fail(ErrorKind::integrity, path + ": truncated header");
    Checkpoint<T> ck;
    try {
        ck.header = json::parse(bytes.substr(16, header_len));
    } catch (const json::exception& e) {
        fail(ErrorKind::integrity, path + ": bad header: " + e.what());
    }
    const json& h = ck.header;
    const int version = h.value("format_version", -1);
    if (version != kCheckpointVersion)
        fail(ErrorKind::integrity, path + ": checkpoint version " + std::to_string(version) + ", expected " +
                                       std::to_string(kCheckpointVersion));
    auto all = decode_archive<T>(std::string_view(bytes).substr(16 + header_len, bytes.size() - 4 - 16 - header_len));

    ck.net.model = model_config_from_json(h.at("model"));
    ck.net.backbone.tap_layers = h.at("backbone").at("tap_layers").get<std::vector<std::size_t>>();
    ck.net.backbone.frozen = h.at("backbone").at("frozen").get<bool>();
    ck.net.backbone.validate();
    ck.train = train_config_from_json(h.at("train"));
    ck.net.head = all.slice("head.");
    ck.net.trunk = all.slice("trunk.");
    const auto layout = model_layout<T>(expected ? *expected : ck.net.model);
    check_layout(layout, ck.net.head, path + " (model head)");
    check_layout(backbone_layout<T>(ck.net.backbone), ck.net.trunk, path + " (backbone)");
    if (expected) ck.net.model = *expected;

    auto& s = ck.state;
    s.step = h.at("step").get<std::uint64_t>();
    s.epoch = h.at("epoch").get<std::size_t>();
    s.seed = h.at("seed").get<std::uint64_t>();
    s.best_epoch = h.at("best_epoch").get<std::size_t>();
    s.best_val_plcc = h.at("best_val_plcc").is_null() ? -std::numeric_limits<double>::infinity()
                                                              : h.at("best_val_plcc").get<double>();
    s.m_head = all.slice("adam.m.head.");
    s.v_head = all.slice("adam.v.head.");
    s.m_trunk = all.slice("adam.m.trunk.");
    s.v_trunk = all.slice("adam.v.trunk.");
    if (s.m_head.size() != 0) check_layout(layout, s.m_head, path + " (optimizer state)");
    return ck;
}

// ---------------------------------------------------------------------------
// fit

struct Example {
    std::string id;
    Image image;
    double target = 0;
};

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0;
    double val_plcc = std::numeric_limits<double>::quiet_NaN();
    double val_srcc = std::numeric_limits<double>::quiet_NaN();
};

template <typename T = float>
struct FitResult {
    std::vector<EpochLog> history;
    ParamStore<T> best_head;
    ParamStore<T> best_trunk;
    std::size_t best_epoch = 0;
    double best_val_plcc = -std::numeric_limits<double>::infinity();
};

struct FitOptions {
    std::string checkpoint_dir;  // when set: last.ckpt every epoch, best.ckpt on improvement
    std::string config_hash;
    bool verbose = false;
};

/// Evaluation image: center crop to the model's size multiple.
template <typename T>
Tensor<T> eval_tensor(const Image& img, const Network<T>& net) {
    const auto cropped = center_crop_to_multiple(img, net.model.downsampling());
    return preprocess<T>(cropped, net.backbone.preprocessing, net.model.min_input_side(), net.model.downsampling());
}

/// Scores a list of images with optional per-index cached features.
template <typename T>
std::vector<double> score_examples(const Network<T>& net, const std::vector<Example>& examples,
                                   std::map<std::size_t, std::vector<Tensor<T>>>* cache = nullptr) {
    std::vector<double> out;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto x = eval_tensor(examples[i].image, net);
        const std::vector<Tensor<T>>* feats = nullptr;
        std::vector<Tensor<T>> tmp;
        if (cache && net.backbone.frozen) {
            auto it = cache->find(i);
            if (it == cache->end()) it = cache->emplace(i, vgg_features(x, net.trunk, net.backbone)).first;
            feats = &it->second;
        } else {
            tmp = vgg_features(x, net.trunk, net.backbone);
            feats = &tmp;
        }
        out.push_back(static_cast<double>(head_forward(x, *feats, net.head, net.model).data()[0]));
    }
    return out;
}

/// Trains for cfg.epochs (resuming from state.epoch). Data order, crops and
/// initialization derive from state.seed only, so a run is reproducible and a
/// resumed run follows the uninterrupted trajectory.
template <typename T>
FitResult<T> fit(Network<T>& net, TrainState<T>& state, const std::vector<Example>& train,
                 const std::vector<Example>& val, const TrainConfig& cfg, const FitOptions& opt = {}) {
    cfg.validate();
    if (train.empty()) fail(ErrorKind::data, "fit: empty training split");
    if (val.empty()) fail(ErrorKind::data, "fit: empty validation split");
    net.backbone.frozen = cfg.freeze_backbone;
    FitResult<T> result;
    result.best_head = net.head;
    result.best_trunk = net.trunk;
    result.best_epoch = state.best_epoch;
    result.best_val_plcc = state.best_val_plcc;
    std::map<std::size_t, std::vector<Tensor<T>>> train_cache, val_cache;
    const std::size_t min_side = net.model.min_input_side();

    for (std::size_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(train.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(derive_seed(state.seed, "shuffle", epoch));
        seeded_shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<BatchItem<T>> batch;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t idx = order[k];
                const auto& ex = train[idx];
                const bool identity_crop = ex.image.width == cfg.crop_size && ex.image.height == cfg.crop_size;
                const Image cropped =
                    identity_crop ? ex.image
                                  : sample_crop(ex.image, cfg.crop_size,
                                                derive_seed(state.seed, "crop", epoch * train.size() + idx), min_side);
                BatchItem<T> item{ex.id,
                                  preprocess<T>(cropped, net.backbone.preprocessing, min_side,
                                                net.model.downsampling()),
                                  nullptr, static_cast<T>(ex.target)};
                if (identity_crop && cfg.freeze_backbone) {
                    auto it = train_cache.find(idx);
                    if (it == train_cache.end())
                        it = train_cache.emplace(idx, vgg_features(item.image, net.trunk, net.backbone)).first;
                    item.features = &it->second;
                }
                batch.push_back(std::move(item));
            }
            loss_sum += static_cast<double>(train_step(state, net, batch, cfg)) * static_cast<double>(batch.size());
        }

        EpochLog log;
        log.epoch = epoch + 1;
        log.train_loss = loss_sum / static_cast<double>(train.size());
        const auto preds = score_examples(net, val, &val_cache);
        std::vector<double> targets;
        for (const auto& ex : val) targets.push_back(ex.target);
        try {
            log.val_plcc = metrics::plcc(preds, targets);
            log.val_srcc = metrics::srcc(preds, targets);
        } catch (const Error& e) {
            if (opt.verbose) std::clog << "epoch " << log.epoch << ": validation correlation undefined (" << e.what()
                                       << ")\n";
        }
        state.epoch = epoch + 1;
        const bool improved = std::isfinite(log.val_plcc) && log.val_plcc > state.best_val_plcc;
        if (improved) {
            state.best_val_plcc = log.val_plcc;
            state.best_epoch = log.epoch;
            result.best_head = net.head;
            result.best_trunk = net.trunk;
            result.best_epoch = log.epoch;
            result.best_val_plcc = log.val_plcc;
        }
        if (opt.verbose)
            std::clog << "epoch " << log.epoch << "/" << cfg.epochs << " train_l1 " << log.train_loss << " val_plcc "
                      << log.val_plcc << " val_srcc " << log.val_srcc << (improved ? " *" : "") << "\n";
        if (!opt.checkpoint_dir.empty()) {
            save_checkpoint(opt.checkpoint_dir + "/last.ckpt", net, state, cfg, opt.config_hash);
            if (improved) save_checkpoint(opt.checkpoint_dir + "/best.ckpt", net, state, cfg, opt.config_hash);
        }
        result.history.push_back(log);
    }
    return result;
}

inline std::string history_csv(const std::vector<EpochLog>& history) {
    std::string out = "epoch,train_loss,val_plcc,val_srcc\n";
    char line[160];
    for (const auto& h : history) {
        std::snprintf(line, sizeof(line), "%zu,%.9g,%.9g,%.9g\n", h.epoch, h.train_loss, h.val_plcc, h.val_srcc);
        out += line;
    }
    return out;
}

}  // namespace tpnet
