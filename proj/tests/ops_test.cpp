#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tpnet/ops.hpp"

namespace tpnet {
namespace {

template <typename T>
double conv_vs_oracle(const ConvSpec& spec, const Shape& in, std::uint64_t seed) {
    auto x = oracle::random_tensor<T>(in, seed);
    Param<T> w;
    w.shape = spec.weight_shape();
    w.values = oracle::random_vector<T>(w.numel(), seed + 1);
    Param<T> b;
    b.shape = {spec.out_channels};
    b.values = spec.bias ? oracle::random_vector<T>(spec.out_channels, seed + 2) : std::vector<T>(spec.out_channels);
    const auto got = conv2d(x, spec, w, spec.bias ? &b : nullptr);
    const auto want = oracle::conv(x, w.values, b.values, spec.out_channels, spec.kernel, spec.padding, spec.groups);
    return oracle::max_abs_diff(got, want);
}

std::vector<ConvSpec> conv_kinds() {
    return {
        ConvSpec{8, 8, 3, 1, 1, true},   // plain, padded
        ConvSpec{8, 2, 3, 1, 2, true},   // grouped reduce (SA first layer)
        ConvSpec{2, 8, 3, 1, 2, true},   // grouped expand (SA second layer)
        ConvSpec{8, 8, 3, 1, 8, true},   // depth-wise
        ConvSpec{8, 5, 1, 0, 1, true},   // 1x1 projection
        ConvSpec{8, 4, 3, 0, 1, true},   // unpadded
        ConvSpec{8, 3, 2, 0, 1, true},   // 2x2 unpadded
        ConvSpec{8, 5, 5, 2, 1, true},   // 5x5, padding 2
        ConvSpec{8, 24, 3, 1, 1, true},  // wide output
        ConvSpec{8, 40, 3, 1, 2, true},  // wide grouped output
        ConvSpec{8, 20, 3, 0, 1, false}, // wide unpadded, no bias
    };
}

TEST(Conv2d, MatchesNestedLoopOracleFloat) {
    std::uint64_t seed = 10;
    for (const auto& spec : conv_kinds())
        for (const Shape in : {Shape{1, 8, 6, 6}, Shape{2, 8, 6, 6}, Shape{2, 8, 5, 3}}) {
            Shape s = in;
            s.c = spec.in_channels;
            EXPECT_LE(conv_vs_oracle<float>(spec, s, seed++), 1e-5) << "groups " << spec.groups;
        }
}

TEST(Conv2d, MatchesNestedLoopOracleDouble) {
    std::uint64_t seed = 100;
    for (const auto& spec : conv_kinds()) {
        Shape s{2, spec.in_channels, 6, 6};
        EXPECT_LE(conv_vs_oracle<double>(spec, s, seed++), 1e-10);
    }
}

TEST(Conv2d, RejectsChannelMismatch) {
    ConvSpec spec{4, 4, 3, 1, 1, true};
    Param<float> w;
    w.shape = spec.weight_shape();
    w.values.assign(w.numel(), 0.f);
    Tensor<float> x(Shape{1, 3, 4, 4});
    try {
        conv2d(x, spec, w, static_cast<const Param<float>*>(nullptr));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::shape);
    }
}

TEST(Conv2d, InvalidGroupingIsConfigError) {
    ConvSpec spec{6, 4, 3, 1, 4, true};
    try {
        spec.validate("layer");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::config);
    }
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
    for (const auto& spec : conv_kinds()) {
        auto x = oracle::random_tensor<double>(Shape{2, spec.in_channels, 5, 4}, 7);
        Param<double> w, b;
        w.shape = spec.weight_shape();
        w.values = oracle::random_vector<double>(w.numel(), 8);
        b.shape = {spec.out_channels};
        b.values = oracle::random_vector<double>(spec.out_channels, 9);
        const auto y0 = conv2d(x, spec, w, &b);
        const auto r = oracle::random_tensor<double>(y0.shape(), 11);
        auto loss = [&] {
            const auto y = conv2d(x, spec, w, &b);
            double acc = 0;
            for (std::size_t i = 0; i < y.size(); ++i) acc += y.data()[i] * r.data()[i];
            return acc;
        };
        Param<double> gw = w, gb = b;
        std::fill(gw.values.begin(), gw.values.end(), 0.0);
        std::fill(gb.values.begin(), gb.values.end(), 0.0);
        const auto gx = conv2d_backward(x, r, spec, w, &gw, &gb);
        EXPECT_LE(oracle::relative_error(gw.values, oracle::finite_difference(w.values, loss)), 1e-6);
        EXPECT_LE(oracle::relative_error(gb.values, oracle::finite_difference(b.values, loss)), 1e-6);
        EXPECT_LE(oracle::relative_error(gx.storage(), oracle::finite_difference(x.storage(), loss)), 1e-6);
    }
}

TEST(Conv2d, PartialInputGradientIsTrailingChannelSlice) {
    Param<double>* none = nullptr;
    for (const auto& spec : conv_kinds()) {
        if (spec.groups != 1) continue;
        auto x = oracle::random_tensor<double>(Shape{2, spec.in_channels, 5, 4}, 12);
        Param<double> w;
        w.shape = spec.weight_shape();
        w.values = oracle::random_vector<double>(w.numel(), 13);
        const auto r = oracle::random_tensor<double>(conv2d(x, spec, w, none).shape(), 14);
        const auto full = conv2d_backward(x, r, spec, w, none, none);
        for (std::size_t from : {std::size_t{1}, std::size_t{5}, spec.in_channels}) {
            const auto part = conv2d_backward(x, r, spec, w, none, none, true, from);
            ASSERT_EQ(part.c(), spec.in_channels - from);
            EXPECT_LE(oracle::max_abs_diff(part, split_channels(full, from).second), 1e-12);
        }
    }
    ConvSpec grouped{8, 8, 3, 1, 2, true};
    Param<double> w;
    w.shape = grouped.weight_shape();
    w.values.assign(w.numel(), 0.0);
    Tensor<double> x(Shape{1, 8, 4, 4});
    try {
        conv2d_backward(x, x, grouped, w, none, none, true, 2);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::unsupported);
    }
}

TEST(Pooling, MaxPoolHalvesAndRoutesGradientToArgmax) {
    Tensor<float> x(Shape{1, 1, 2, 4}, std::vector<float>{1, 5, 2, 0, 3, 4, 9, 1});
    auto r = max_pool2x2(x);
    ASSERT_EQ(r.out.shape(), (Shape{1, 1, 1, 2}));
    EXPECT_EQ(r.out.data()[0], 5.f);
    EXPECT_EQ(r.out.data()[1], 9.f);
    Tensor<float> g(r.out.shape(), std::vector<float>{1, 2});
    auto gx = max_pool_backward(x.shape(), r.argmax, g);
    EXPECT_EQ(gx.storage(), (std::vector<float>{0, 1, 0, 0, 0, 0, 2, 0}));
}

TEST(Pooling, AdaptiveWindowsCoverNonDivisibleInputs) {
    // 5 -> 4 cells: windows [0,2) [1,3) [2,4) [3,5)
    Tensor<double> x(Shape{1, 1, 1, 5}, std::vector<double>{1, 2, 3, 4, 5});
    auto avg = adaptive_avg_pool(x, 1, 4);
    EXPECT_EQ(avg.storage(), (std::vector<double>{1.5, 2.5, 3.5, 4.5}));
    auto mx = adaptive_max_pool(x, 1, 4);
    EXPECT_EQ(mx.out.storage(), (std::vector<double>{2, 3, 4, 5}));
}

TEST(Pooling, AdaptivePoolOfConstantIsConstant) {
    Tensor<float> x(Shape{1, 3, 7, 9}, 2.5f);
    const auto avg = adaptive_avg_pool(x, 4, 4);
    const auto mx = adaptive_max_pool(x, 4, 4);
    for (float v : avg.values()) EXPECT_FLOAT_EQ(v, 2.5f);
    for (float v : mx.out.values()) EXPECT_EQ(v, 2.5f);
}

TEST(Tensor, ConcatThenSplitRestoresInputs) {
    auto a = oracle::random_tensor<float>(Shape{2, 3, 4, 5}, 1);
    auto b = oracle::random_tensor<float>(Shape{2, 2, 4, 5}, 2);
    auto c = concat_channels(a, b);
    ASSERT_EQ(c.shape(), (Shape{2, 5, 4, 5}));
    auto [a2, b2] = split_channels(c, 3);
    EXPECT_EQ(a2.storage(), a.storage());
    EXPECT_EQ(b2.storage(), b.storage());
    Tensor<float> bad(Shape{2, 2, 3, 5});
    EXPECT_THROW(concat_channels(a, bad), Error);
}

}  // namespace
}  // namespace tpnet
