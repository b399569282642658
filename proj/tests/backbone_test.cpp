#include <gtest/gtest.h>

#include <filesystem>

#include "oracles.hpp"
#include "tpnet/backbone.hpp"

namespace tpnet {
namespace {

const ParamStore<float>& random_trunk() {
    static const auto trunk = init_backbone<float>(BackboneConfig{}, 5);
    return trunk;
}

TEST(VggLayers, CanonicalEnumeration) {
    const auto& layers = vgg19_layers();
    ASSERT_EQ(layers.size(), 37u);
    std::size_t convs = 0;
    for (const auto& l : layers) convs += l.kind == VggLayer::Kind::conv;
    EXPECT_EQ(convs, 16u);
    EXPECT_EQ(layers[2].name, "conv1_2");
    EXPECT_EQ(layers[7].name, "conv2_2");
    EXPECT_EQ(layers[12].name, "conv3_2");
    EXPECT_EQ(layers[21].name, "conv4_2");
    EXPECT_EQ(layers[30].name, "conv5_2");
    EXPECT_EQ(layers[4].kind, VggLayer::Kind::pool);
    EXPECT_EQ(layers[36].kind, VggLayer::Kind::pool);
}

TEST(BackboneLayout, FourteenConvsUpToLastTap) {
    const auto p = backbone_layout<float>(BackboneConfig{});
    EXPECT_EQ(p.size(), 28u);
    EXPECT_TRUE(p.contains("conv5_2.weight"));
    EXPECT_FALSE(p.contains("conv5_3.weight"));
    EXPECT_EQ(p.get("conv4_1.weight").shape, (std::vector<std::size_t>{512, 256, 3, 3}));
}

TEST(BackboneConfig, RejectsInvalidTaps) {
    BackboneConfig cfg;
    cfg.tap_layers = {2, 7, 12, 21, 31};
    EXPECT_THROW(cfg.validate(), Error);
    cfg.tap_layers = {2, 7, 7, 21, 30};
    EXPECT_THROW(cfg.validate(), Error);
    cfg.tap_layers = {2, 7, 12, 14, 30};
    EXPECT_THROW(cfg.validate(), Error);  // conv3_3 has 256 channels, not 512
    cfg.tap_layers = {2, 7, 12, 22, 30};
    EXPECT_THROW(cfg.validate(), Error);  // ReLU, not a convolution
    cfg.tap_layers = {0, 5, 10, 19, 28};
    EXPECT_NO_THROW(cfg.validate());
}

TEST(VggFeatures, TapShapesSquare) {
    auto x = oracle::random_tensor<float>(Shape{1, 3, 128, 128}, 1);
    const auto taps = vgg_features(x, random_trunk(), BackboneConfig{});
    ASSERT_EQ(taps.size(), 5u);
    EXPECT_EQ(taps[0].shape(), (Shape{1, 64, 128, 128}));
    EXPECT_EQ(taps[1].shape(), (Shape{1, 128, 64, 64}));
    EXPECT_EQ(taps[2].shape(), (Shape{1, 256, 32, 32}));
    EXPECT_EQ(taps[3].shape(), (Shape{1, 512, 16, 16}));
    EXPECT_EQ(taps[4].shape(), (Shape{1, 512, 8, 8}));
}

TEST(VggFeatures, TapShapesNonSquare) {
    auto x = oracle::random_tensor<float>(Shape{1, 3, 160, 224}, 2);
    const auto taps = vgg_features(x, random_trunk(), BackboneConfig{});
    ASSERT_EQ(taps.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(taps[i].h(), 160u >> i);
        EXPECT_EQ(taps[i].w(), 224u >> i);
    }
}

TEST(VggFeatures, TapsArePreActivation) {
    auto x = oracle::random_tensor<float>(Shape{1, 3, 32, 32}, 3);
    const auto taps = vgg_features(x, random_trunk(), BackboneConfig{});
    for (const auto& t : taps) {
        const auto [lo, hi] = std::minmax_element(t.values().begin(), t.values().end());
        EXPECT_LT(*lo, 0.f);
        EXPECT_GT(*hi, 0.f);
    }
}

TEST(VggFeatures, FirstTapMatchesConvolutionOracle) {
    auto x = oracle::random_tensor<double>(Shape{1, 3, 16, 16}, 4);
    const auto w = random_trunk().cast<double>();
    const auto taps = vgg_features(x, w, BackboneConfig{});
    auto h = oracle::relu(oracle::conv(x, w.get("conv1_1.weight").values, w.get("conv1_1.bias").values, 64, 3, 1, 1));
    auto want = oracle::conv(h, w.get("conv1_2.weight").values, w.get("conv1_2.bias").values, 64, 3, 1, 1);
    EXPECT_LE(oracle::max_abs_diff(taps[0], want), 1e-10);
}

TEST(VggFeatures, ZeroWeightsGiveBiasOnlyTaps) {
    auto w = backbone_layout<float>(BackboneConfig{});
    for (std::size_t i = 0; i < w.size(); ++i)
        if (w.at(i).role == ParamRole::bias) std::fill(w.at(i).values.begin(), w.at(i).values.end(), 0.25f);
    auto x = oracle::random_tensor<float>(Shape{1, 3, 32, 32}, 6);
    for (const auto& t : vgg_features(x, w, BackboneConfig{}))
        for (float v : t.values()) ASSERT_EQ(v, 0.25f);
}

TEST(VggFeatures, MissingLayerIsIntegrityError) {
    auto w = random_trunk();
    ParamStore<float> partial;
    for (std::size_t i = 0; i < w.size(); ++i)
        if (w.names()[i].rfind("conv3_2", 0) != 0)
            partial.add(w.names()[i], w.at(i).shape, w.at(i).role).values = w.at(i).values;
    try {
        vgg_features(Tensor<float>(Shape{1, 3, 16, 16}), partial, BackboneConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::integrity);
        EXPECT_NE(std::string(e.what()).find("conv3_2"), std::string::npos);
    }
}

// Directional derivative of <taps, r> along a random weight perturbation.
TEST(VggFeatures, BackwardMatchesDirectionalDerivative) {
    const BackboneConfig cfg;
    auto w = random_trunk().cast<double>();
    auto x = oracle::random_tensor<double>(Shape{1, 3, 16, 16}, 7);
    BackboneTape<double> tape;
    const auto taps = vgg_features(x, w, cfg, &tape);
    std::vector<Tensor<double>> r;
    for (std::size_t i = 0; i < taps.size(); ++i) r.push_back(oracle::random_tensor<double>(taps[i].shape(), 8 + i));
    auto grads = w.zeros_like();
    vgg_backward(tape, r, w, cfg, &grads);

    auto direction = w.zeros_like();
    double analytic = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        direction.at(i).values = oracle::random_vector<double>(w.at(i).values.size(), 100 + i);
        for (std::size_t k = 0; k < w.at(i).values.size(); ++k)
            analytic += grads.at(i).values[k] * direction.at(i).values[k];
    }
    auto loss_at = [&](double h) {
        auto shifted = w;
        for (std::size_t i = 0; i < w.size(); ++i)
            for (std::size_t k = 0; k < w.at(i).values.size(); ++k)
                shifted.at(i).values[k] += h * direction.at(i).values[k];
        double acc = 0;
        const auto t = vgg_features(x, shifted, cfg);
        for (std::size_t i = 0; i < t.size(); ++i)
            for (std::size_t k = 0; k < t[i].size(); ++k) acc += t[i].data()[k] * r[i].data()[k];
        return acc;
    };
    const double h = 1e-6;
    const double numeric = (loss_at(h) - loss_at(-h)) / (2 * h);
    EXPECT_NEAR(analytic, numeric, 1e-4 * std::max(1.0, std::abs(numeric)));
}

TEST(Preprocess, ScalesThenStandardizes) {
    Image img(32, 32);
    img.at(0, 0, 0) = 255;
    img.at(0, 0, 1) = 0;
    img.at(0, 0, 2) = 128;
    const auto t = preprocess<double>(img, {}, 32, 32);
    ASSERT_EQ(t.shape(), (Shape{1, 3, 32, 32}));
    EXPECT_NEAR(t.at(0, 0, 0, 0), (1.0 - 0.485) / 0.229, 1e-12);
    EXPECT_NEAR(t.at(0, 1, 0, 0), (0.0 - 0.456) / 0.224, 1e-12);
    EXPECT_NEAR(t.at(0, 2, 0, 0), (128.0 / 255.0 - 0.406) / 0.225, 1e-12);
}

TEST(Preprocess, RejectsGrayscaleAndUndersizedImages) {
    try {
        preprocess<float>(Image(128, 128, 1));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::data);
    }
    try {
        preprocess<float>(Image(96, 128), {}, 128, 32);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::shape);
    }
    EXPECT_THROW(preprocess<float>(Image(144, 128), {}, 128, 32), Error);
}

ParamStore<float> renamed(const ParamStore<float>& src, bool torchvision, const std::string& skip = "") {
    ParamStore<float> out;
    for (const auto& l : vgg19_layers()) {
        if (l.kind != VggLayer::Kind::conv || l.name == skip) continue;
        for (const char* suffix : {".weight", ".bias"}) {
            const auto name = (torchvision ? "features." + std::to_string(l.index) : l.name) + suffix;
            if (src.contains(l.name + suffix)) {
                const auto& p = src.get(l.name + suffix);
                out.add(name, p.shape, p.role).values = p.values;
            } else {
                // layers past the last tap: present in full archives, must be ignored
                const auto spec = vgg_conv_spec(l);
                auto& p = out.add(name, std::string(suffix) == ".weight" ? spec.weight_shape()
                                                                           : std::vector<std::size_t>{spec.out_channels},
                                  std::string(suffix) == ".weight" ? ParamRole::weight : ParamRole::bias);
                std::fill(p.values.begin(), p.values.end(), 1.f);
            }
        }
    }
    return out;
}

TEST(ImportPretrained, CanonicalAndTorchvisionNamesGiveSameTrunk) {
    ImportReport a, b;
    const auto from_canonical = import_pretrained<float>(renamed(random_trunk(), false), BackboneConfig{}, &a);
    const auto from_torch = import_pretrained<float>(renamed(random_trunk(), true), BackboneConfig{}, &b);
    EXPECT_TRUE(from_canonical == random_trunk());
    EXPECT_TRUE(from_torch == random_trunk());
    EXPECT_EQ(a.tensors, 28u);
    EXPECT_EQ(b.tensors, 28u);
    EXPECT_EQ(a.checksum, b.checksum);
    EXPECT_EQ(a.checksum, checksum(random_trunk()));
    ASSERT_EQ(b.mapping.size(), 28u);
    EXPECT_EQ(b.mapping[2], (std::pair<std::string, std::string>{"conv1_2.weight", "features.2.weight"}));
}

TEST(ImportPretrained, MissingLayerIsNamed) {
    try {
        import_pretrained<float>(renamed(random_trunk(), true, "conv3_2"), BackboneConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::integrity);
        const std::string msg = e.what();
        EXPECT_NE(msg.find("conv3_2"), std::string::npos);
        EXPECT_EQ(msg.find("conv3_1"), std::string::npos);
    }
}

TEST(ImportPretrained, ShapeMismatchIsNamed) {
    auto src = renamed(random_trunk(), false);
    ParamStore<float> bad;
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto shape = src.at(i).shape;
        if (src.names()[i] == "conv2_1.weight") shape[1] = 32;
        bad.add(src.names()[i], shape, src.at(i).role);
    }
    try {
        import_pretrained<float>(bad, BackboneConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::integrity);
        EXPECT_NE(std::string(e.what()).find("conv2_1"), std::string::npos);
    }
}

TEST(ImportPretrained, FromArchiveFile) {
    const auto path = (std::filesystem::temp_directory_path() / "tpnet_vgg_import.tpna").string();
    save_params(renamed(random_trunk(), true), path);
    ImportReport rep;
    const auto trunk = import_pretrained<float>(path, BackboneConfig{}, &rep);
    EXPECT_TRUE(trunk == random_trunk());
    EXPECT_EQ(rep.tensors, 28u);
    std::filesystem::remove(path);
}

TEST(InitBackbone, SeededAndDistinctFromHeadStream) {
    EXPECT_TRUE(init_backbone<float>(BackboneConfig{}, 5) == random_trunk());
    EXPECT_FALSE(init_backbone<float>(BackboneConfig{}, 6) == random_trunk());
}

}  // namespace
}  // namespace tpnet
