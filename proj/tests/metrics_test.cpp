#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "tpnet/metrics.hpp"

namespace tpnet::metrics {
namespace {

using Vec = std::vector<double>;

template <typename F>
void expect_error(ErrorKind kind, F&& f) {
    try {
        f();
        FAIL() << "expected " << to_string(kind) << " error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), kind) << e.what();
    }
}

TEST(Plcc, HandComputedExamples) {
    EXPECT_DOUBLE_EQ(plcc(Vec{1, 2, 3}, Vec{2, 4, 6}), 1.0);
    EXPECT_DOUBLE_EQ(plcc(Vec{1, 2, 3}, Vec{6, 4, 2}), -1.0);
    EXPECT_NEAR(plcc(Vec{1, 2, 3, 4}, Vec{1, 3, 2, 4}), 0.8, 1e-15);
}

TEST(Plcc, Errors) {
    expect_error(ErrorKind::data, [] { plcc(Vec{1, 2, 3}, Vec{1, 2}); });
    expect_error(ErrorKind::data, [] { plcc(Vec{1}, Vec{1}); });
    expect_error(ErrorKind::numeric, [] { plcc(Vec{2, 2, 2}, Vec{1, 2, 3}); });
    expect_error(ErrorKind::numeric, [] { plcc(Vec{1, 2, 3}, Vec{5, 5, 5}); });
    expect_error(ErrorKind::numeric, [] { plcc(Vec{1, NAN, 3}, Vec{1, 2, 3}); });
    expect_error(ErrorKind::numeric, [] { srcc(Vec{1, 2, INFINITY}, Vec{1, 2, 3}); });
}

TEST(Srcc, TiesReceiveAverageRank) {
    EXPECT_EQ(average_ranks(Vec{1, 2, 2, 3}), (Vec{1, 2.5, 2.5, 4}));
    EXPECT_EQ(average_ranks(Vec{5, 5, 5, 1}), (Vec{3, 3, 3, 1}));
    const double want = oracle::pearson({1, 2.5, 2.5, 4}, {1, 2, 3, 4});
    EXPECT_NEAR(srcc(Vec{1, 2, 2, 3}, Vec{1, 2, 3, 4}), want, 1e-15);
    EXPECT_DOUBLE_EQ(srcc(Vec{1, 2, 3, 4}, Vec{10, 20, 30, 1000}), 1.0);
    EXPECT_DOUBLE_EQ(srcc(Vec{1, 2, 3, 4}, Vec{4, 3, 2, 1}), -1.0);
}

// 1000 random vectors, half with heavy ties, against the definition-level oracles.
TEST(Correlation, RandomVectorsMatchOracles) {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng() % 40;
        Vec x(n), y(n);
        const bool ties = trial % 2 == 1;
        std::uniform_real_distribution<double> u(-10, 10);
        std::uniform_int_distribution<int> k(0, 4);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = ties ? k(rng) : u(rng);
            y[i] = ties ? k(rng) : u(rng);
        }
        if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; }) ||
            std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; }))
            continue;
        ASSERT_NEAR(plcc(x, y), oracle::pearson(x, y), 1e-12) << trial;
        ASSERT_NEAR(srcc(x, y), oracle::spearman(x, y), 1e-12) << trial;
        ASSERT_EQ(average_ranks(x), oracle::brute_ranks(x)) << trial;
    }
}

TEST(Correlation, InvariancesProperty) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-3, 3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 3 + rng() % 30;
        Vec x(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = u(rng);
            y[i] = 0.5 * x[i] + u(rng);
        }
        const double p = plcc(x, y), s = srcc(x, y);
        ASSERT_LE(std::abs(p), 1.0);
        ASSERT_LE(std::abs(s), 1.0);
        ASSERT_NEAR(plcc(y, x), p, 1e-12);
        ASSERT_NEAR(srcc(y, x), s, 1e-12);

        const double a = 0.1 + std::abs(u(rng)), b = u(rng);
        Vec affine(n), negated(n), monotone(n);
        for (std::size_t i = 0; i < n; ++i) {
            affine[i] = a * x[i] + b;
            negated[i] = -a * x[i] + b;
            monotone[i] = std::exp(x[i]) + x[i] * x[i] * x[i];
        }
        ASSERT_NEAR(plcc(affine, y), p, 1e-10);
        ASSERT_NEAR(plcc(negated, y), -p, 1e-10);
        ASSERT_NEAR(srcc(monotone, y), s, 1e-12);
    }
}

TEST(Correlation, SrccEqualsPlccOnRankPermutations) {
    std::mt19937_64 rng(9);
    Vec x{1, 2, 3, 4, 5, 6, 7, 8}, y = x;
    for (int t = 0; t < 20; ++t) {
        std::shuffle(y.begin(), y.end(), rng);
        EXPECT_DOUBLE_EQ(srcc(x, y), plcc(x, y));
    }
}

Image filled(std::size_t w, std::size_t h, std::uint8_t v, std::size_t c = 3) { return Image(w, h, c, v); }

TEST(Psnr, ClosedForms) {
    const auto a = filled(16, 16, 100);
    EXPECT_TRUE(psnr(a, a).infinite);
    EXPECT_EQ(psnr(a, a).str(), "inf");

    auto b = a;
    for (std::size_t i = 0; i < b.pixels.size(); ++i) b.pixels[i] = i % 2 ? 101 : 99;
    const auto r = psnr(a, b);
    EXPECT_FALSE(r.infinite);
    EXPECT_NEAR(r.db, 48.1308036, 1e-6);
    EXPECT_NEAR(r.db, 20 * std::log10(255.0), 1e-12);

    EXPECT_NEAR(psnr(filled(8, 8, 0), filled(8, 8, 255)).db, 0.0, 1e-12);
}

TEST(Psnr, StrictlyDecreasesWithErrorMagnitude) {
    const auto ref = filled(12, 9, 0);
    double prev = INFINITY;
    for (int e = 1; e <= 255; e += 7) {
        const double db = psnr(ref, filled(12, 9, static_cast<std::uint8_t>(e))).db;
        EXPECT_LT(db, prev);
        prev = db;
    }
}

TEST(Psnr, DimensionMismatchIsShapeError) {
    expect_error(ErrorKind::shape, [] { psnr(filled(8, 8, 0), filled(8, 9, 0)); });
}

TEST(Ssim, IdenticalImagesGiveOne) {
    Image img(32, 24);
    std::mt19937 rng(1);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng());
    EXPECT_DOUBLE_EQ(ssim(img, img), 1.0);
}

TEST(Ssim, ConstantOffsetMatchesLuminanceClosedForm) {
    const double c1 = std::pow(0.01 * 255, 2);
    for (int base : {0, 40, 120, 200}) {
        const double m1 = base, m2 = base + 30;
        const double want = (2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        const auto got = ssim(filled(20, 15, static_cast<std::uint8_t>(base), 1),
                              filled(20, 15, static_cast<std::uint8_t>(base + 30), 1));
        EXPECT_NEAR(got, want, 1e-9) << base;
    }
}

// Direct 2-D windowed evaluation with an explicitly built Gaussian kernel.
double ssim_oracle(const std::vector<double>& a, const std::vector<double>& b, std::size_t w, std::size_t h) {
    const int win = 11;
    double kernel[win][win], ksum = 0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) ksum += kernel[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
    const double c1 = std::pow(0.01 * 255, 2), c2 = std::pow(0.03 * 255, 2);
    double total = 0;
    std::size_t count = 0;
    for (std::size_t y = 0; y + win <= h; ++y)
        for (std::size_t x = 0; x + win <= w; ++x) {
            long double ma = 0, mb = 0, aa = 0, bb = 0, ab = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    const long double k = kernel[i][j] / ksum;
                    const double va = a[(y + i) * w + x + j], vb = b[(y + i) * w + x + j];
                    ma += k * va;
                    mb += k * vb;
                    aa += k * va * va;
                    bb += k * vb * vb;
                    ab += k * va * vb;
                }
            const long double sa = aa - ma * ma, sb = bb - mb * mb, sab = ab - ma * mb;
            total += static_cast<double>(((2 * ma * mb + c1) * (2 * sab + c2)) /
                                         ((ma * ma + mb * mb + c1) * (sa + sb + c2)));
            ++count;
        }
    return total / static_cast<double>(count);
}

TEST(Ssim, RandomImagesMatchWindowedOracle) {
    std::mt19937 rng(3);
    for (int t = 0; t < 5; ++t) {
        Image a(17 + t, 13 + 2 * t), b(17 + t, 13 + 2 * t);
        for (std::size_t i = 0; i < a.pixels.size(); ++i) {
            a.pixels[i] = static_cast<std::uint8_t>(rng());
            b.pixels[i] = static_cast<std::uint8_t>(std::clamp<int>(a.pixels[i] + static_cast<int>(rng() % 61) - 30, 0, 255));
        }
        const double got = ssim(a, b);
        EXPECT_NEAR(got, ssim_oracle(luma(a), luma(b), a.width, a.height), 1e-9);
        EXPECT_GE(got, -1.0);
        EXPECT_LE(got, 1.0);
    }
}

TEST(Ssim, LumaWeightsAndUndersizedError) {
    Image px(1, 1);
    px.pixels = {100, 50, 200};
    EXPECT_DOUBLE_EQ(luma(px)[0], 0.299 * 100 + 0.587 * 50 + 0.114 * 200);
    expect_error(ErrorKind::shape, [] { ssim(filled(10, 32, 0), filled(10, 32, 0)); });
    expect_error(ErrorKind::shape, [] { ssim(filled(16, 16, 0), filled(16, 17, 0)); });
}

TEST(Evaluate, ReportsBothCorrelations) {
    std::vector<ScoredPair> same{{0.1, 0.1, "a"}, {0.5, 0.5, "b"}, {0.3, 0.3, "c"}};
    auto r = evaluate(same);
    EXPECT_DOUBLE_EQ(r.plcc, 1.0);
    EXPECT_DOUBLE_EQ(r.srcc, 1.0);
    EXPECT_EQ(r.n, 3u);

    std::vector<ScoredPair> affine;
    for (const auto& p : same) affine.push_back({3 * p.mos - 2, p.mos, p.id});
    EXPECT_NEAR(evaluate(affine).plcc, 1.0, 1e-12);

    std::vector<ScoredPair> random;
    Vec pred, mos;
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 5; ++i) {
        random.push_back({u(rng), u(rng), std::to_string(i)});
        pred.push_back(random.back().predicted);
        mos.push_back(random.back().mos);
    }
    r = evaluate(random);
    EXPECT_NEAR(r.plcc, oracle::pearson(pred, mos), 1e-12);
    EXPECT_NEAR(r.srcc, oracle::spearman(pred, mos), 1e-12);

    nlohmann::json j = r;
    EXPECT_EQ(j.at("n"), 5);
    EXPECT_DOUBLE_EQ(j.at("plcc").get<double>(), r.plcc);
}

}  // namespace
}  // namespace tpnet::metrics
