#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>

#include <gtest/gtest.h>

#include "gsi3/illum.hpp"
#include "gsi3/random.hpp"

using namespace gsi3;

namespace {

ImageRGB random_image(int w, int h, std::uint64_t seed, double lo = 0.05, double hi = 0.95) {
    Rng rng(seed);
    ImageRGB img(w, h);
    for (double& v : img.data()) v = rng.uniform(lo, hi);
    return img;
}

GammaParams params(double a, double b, double c, double d) {
    GammaParams gp;
    gp.theta = {a, b, c, d};
    return gp;
}

double central_difference(const std::function<double()>& f, double& x, double h = 1e-4) {
    const double x0 = x;
    x = x0 + h;
    const double fp = f();
    x = x0 - h;
    const double fm = f();
    x = x0;
    return (fp - fm) / (2 * h);
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-7}); }

} // namespace

TEST(GammaRange, Examples) {
    auto r = gamma_range(params(1, 0, 1, 0));
    EXPECT_EQ(r.min, 1.0);
    EXPECT_EQ(r.max, 1.0);
    r = gamma_range(params(0.5, 0, 2, 0));
    EXPECT_EQ(r.min, 0.5);
    EXPECT_EQ(r.max, 2.0);
    r = gamma_range(params(1, 1, 1, 0));
    EXPECT_EQ(r.min, 1.0);
    EXPECT_DOUBLE_EQ(r.max, std::exp(1.0));
    // The swapped pair carries its own partials.
    EXPECT_DOUBLE_EQ(r.dmax[0], std::exp(1.0));
    EXPECT_EQ(r.dmin[2], 1.0);
}

TEST(GammaRange, ClampedToBounds) {
    auto r = gamma_range(params(1e-3, 0, 100, 0));
    EXPECT_EQ(r.min, kGammaFloor);
    EXPECT_EQ(r.max, kGammaCeil);
    for (double d : r.dmin) EXPECT_EQ(d, 0.0);
    r = gamma_range(params(-2, 0, 1, 0));
    EXPECT_EQ(r.min, kGammaFloor);
}

TEST(GammaOfRank, EndpointsAndMidpointAffinity) {
    EXPECT_EQ(gamma_of_rank(0.5, 2.0, 0.0), 0.5);
    EXPECT_EQ(gamma_of_rank(0.5, 2.0, 1.0), 2.0);
    EXPECT_EQ(gamma_of_rank(0.5, 2.0, 0.5), 1.25);
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const double lo = rng.uniform(0.05, 20), hi = rng.uniform(0.05, 20);
        const double mid = gamma_of_rank(lo, hi, 0.5);
        const double avg = 0.5 * (gamma_of_rank(lo, hi, 0.0) + gamma_of_rank(lo, hi, 1.0));
        EXPECT_NEAR(mid, avg, 4 * std::numeric_limits<double>::epsilon() * std::max(lo, hi));
    }
}

TEST(ApplyGamma, PowerLawExamples) {
    ImageRGB img(2, 1);
    for (int c = 0; c < 3; ++c) {
        img(0, 0, c) = 0.25;
        img(1, 0, c) = 1.0;
    }
    const ScalarMap rank(2, 1, 0.5);
    const auto out = apply_gamma(img, rank, params(2, 0, 2, 0));
    EXPECT_DOUBLE_EQ(out(0, 0, 1), 0.0625);
    EXPECT_EQ(out(1, 0, 2), 1.0);
}

TEST(ApplyGamma, IdentityParamsReproduceClampedInput) {
    auto img = random_image(9, 6, 4, 0.0, 1.0);
    img(0, 0, 0) = 0.0;
    const auto rank = cdf_rank(luminance(img));
    const auto out = apply_gamma(img, rank, GammaParams{});
    for (std::size_t i = 0; i < img.data().size(); ++i)
        EXPECT_EQ(out.data()[i], std::clamp(img.data()[i], kGammaBaseEps, 1.0));
}

TEST(ApplyGamma, StaysInUnitIntervalForExtremeGamma) {
    const auto img = random_image(8, 8, 5, 0.0, 1.0);
    const auto rank = cdf_rank(luminance(img));
    for (const auto& gp : {params(0.01, 0, 100, 0), params(20, 0, 0.05, 0)}) {
        const auto out = apply_gamma(img, rank, gp);
        for (double v : out.data()) {
            EXPECT_TRUE(std::isfinite(v));
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(RefineFeatures, ZeroNetworkGivesZero) {
    ConvWeights w;
    const auto f6 = refine_features(random_image(8, 8, 6), w);
    for (double v : f6.data()) EXPECT_EQ(v, 0.0);
}

TEST(RefineFeatures, HandEvaluatedIdentityNetwork) {
    ConvWeights w;
    // Layer 1 lifts input channel 0 to hidden channel 0 on the center tap; layer 2 reads it back.
    w.theta[(4 * 3 + 0) * kHidden + 0] = 1.0;
    w.theta[ConvWeights::kW1 + ConvWeights::kB1 + 4 * kHidden + 0] = 1.0;
    const auto f = refine_features(ImageRGB(8, 8, 0.3), w);
    ASSERT_EQ(f.width(), kFeatureSize);
    for (int y = 1; y < kFeatureSize - 1; ++y)
        for (int x = 1; x < kFeatureSize - 1; ++x) EXPECT_NEAR(f(x, y), 0.3, 1e-15);
}

TEST(RefineFeatures, NegativePreActivationIsCut) {
    ConvWeights w;
    w.theta[ConvWeights::kSize - 1] = -0.5;
    const auto f7 = refine_features(random_image(8, 8, 7), w);
    for (double v : f7.data()) EXPECT_EQ(v, 0.0);
}

TEST(Fuse, IdentityZeroAndArithmetic) {
    Rng rng(8);
    ScalarMap f2(kFeatureSize, kFeatureSize);
    for (double& v : f2.data()) v = rng.uniform();
    EXPECT_EQ(fuse(ScalarMap(kFeatureSize, kFeatureSize, 1.0), f2), f2);
    const auto fused = fuse(f2, ScalarMap(kFeatureSize, kFeatureSize, 0.0));
    for (double v : fused.data()) EXPECT_EQ(v, 0.0);
    ScalarMap m(1, 1, 2.0), x(1, 1, 0.3);
    EXPECT_DOUBLE_EQ(fuse(m, x)(0, 0), 0.6);
    EXPECT_THROW((void)fuse(ScalarMap(2, 2), ScalarMap(2, 3)), std::invalid_argument);
}

TEST(Modulate, IdentityZeroAndArithmetic) {
    const auto img = random_image(8, 8, 9);
    EXPECT_EQ(modulate(ScalarMap(kFeatureSize, kFeatureSize, 1.0), img), img);
    const auto dark = modulate(ScalarMap(kFeatureSize, kFeatureSize, 0.0), img);
    for (double v : dark.data()) EXPECT_EQ(v, 0.0);
    ImageRGB px(1, 1);
    px(0, 0, 0) = 0.4;
    px(0, 0, 1) = 0.8;
    px(0, 0, 2) = 0.2;
    const auto out = modulate(ScalarMap(kFeatureSize, kFeatureSize, 0.5), px);
    EXPECT_DOUBLE_EQ(out(0, 0, 0), 0.2);
    EXPECT_DOUBLE_EQ(out(0, 0, 1), 0.4);
    EXPECT_DOUBLE_EQ(out(0, 0, 2), 0.1);
}

TEST(IllumLoss, ZeroIffEqual) {
    const auto a = random_image(8, 8, 10);
    const auto same = illum_loss(a, a, 0.2);
    EXPECT_NEAR(same.value, 0.0, 1e-12);
    for (double v : same.per_pixel.data()) EXPECT_NEAR(v, 0.0, 1e-12);
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        auto b = a;
        const auto k = rng.below(b.data().size());
        b.data()[k] += rng.uniform(-0.01, 0.01);
        if (b.data()[k] == a.data()[k]) continue;
        for (double lambda : {0.0, 0.2, 0.9}) EXPECT_GT(illum_loss(b, a, lambda).value, 0.0);
    }
}

TEST(IllumLoss, BlackVersusWhiteAndPureL1) {
    const auto r = illum_loss(ImageRGB(8, 8, 0.0), ImageRGB(8, 8, 1.0), 0.2);
    const double ssim = ssim::kC1 * ssim::kC2 / ((1 + ssim::kC1) * ssim::kC2);
    EXPECT_NEAR(r.value, 0.8 + 0.2 * (1 - ssim), 1e-12);
    EXPECT_NEAR(r.value, 0.99998, 1e-6);
    const auto a = random_image(8, 8, 12), b = random_image(8, 8, 13);
    EXPECT_NEAR(illum_loss(a, b, 0.0).value, mean(l1_map(a, b)), 1e-15);
}

TEST(IllumPass, BackwardBeforeForwardRejected) {
    IllumPass pass;
    GammaParams gp;
    ConvWeights w;
    IlluminationField f;
    EXPECT_THROW((void)pass.backward(1.0, gp, w, f), std::logic_error);
}

TEST(IllumPass, IdentityStateAtMatchHasZeroGradient) {
    // Conv output exactly 1: zero weights and b2 = 1; the rendered image equals the target.
    const auto gt = random_image(8, 8, 14);
    const auto rank = cdf_rank(luminance(gt));
    GammaParams gp;
    ConvWeights w;
    w.theta[ConvWeights::kSize - 1] = 1.0;
    IlluminationField field;
    IllumPass pass;
    EXPECT_NEAR(pass.forward(gt, rank, gt, gp, w, field, 0.2).loss.value, 0.0, 1e-12);
    const auto d = pass.backward(1.0, gp, w, field);
    for (double g : gp.grad) EXPECT_NEAR(g, 0.0, 1e-12);
    for (double g : w.grad) EXPECT_NEAR(g, 0.0, 1e-12);
    for (double g : field.grad.data()) EXPECT_NEAR(g, 0.0, 1e-12);
    for (double g : d.data()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(IllumPass, FieldGradientVanishesWhereFeaturesAreZero) {
    const auto gt = random_image(8, 8, 15), rendered = random_image(8, 8, 16);
    const auto rank = cdf_rank(luminance(gt));
    auto w = ConvWeights::initialized(3);
    GammaParams gp;
    IlluminationField field;
    IllumPass pass;
    const auto& fwd = pass.forward(gt, rank, rendered, gp, w, field, 0.2);
    const auto features = fwd.features;
    (void)pass.backward(1.0, gp, w, field);
    for (std::size_t i = 0; i < features.pixels(); ++i) {
        if (features.data()[i] == 0.0) { EXPECT_EQ(field.grad.data()[i], 0.0); }
    }
    w.theta[ConvWeights::kSize - 1] = -10.0;
    field.zero_grad();
    w.zero_grad();
    pass.forward(gt, rank, rendered, gp, w, field, 0.2);
    (void)pass.backward(1.0, gp, w, field);
    for (double g : field.grad.data()) EXPECT_EQ(g, 0.0);
}

// Central differences on the scalar loss against the recorded reverse pass, for the gamma
// parameters, a sample of field entries and a sample of rendered pixels.
TEST(IllumPass, MatchesFiniteDifferences) {
    const auto gt = random_image(8, 8, 17, 0.1, 0.9), rendered = random_image(8, 8, 18, 0.1, 0.9);
    const auto rank = cdf_rank(luminance(gt));
    GammaParams gp = params(0.8, 0.1, 1.3, -0.05);
    ConvWeights w = ConvWeights::initialized(5);
    for (int o = 0; o < kHidden; ++o) w.theta[ConvWeights::kW1 + o] = (o % 2) ? 1.0 : -1.0;
    w.theta[ConvWeights::kSize - 1] = 2.0;
    IlluminationField field;
    Rng rng(19);
    for (double& v : field.value.data()) v = rng.uniform(0.5, 1.5);
    ImageRGB r = rendered;
    const double lambda = 0.2;

    auto loss = [&] {
        IllumPass p;
        return p.forward(gt, rank, r, gp, w, field, lambda).loss.value;
    };
    IllumPass pass;
    pass.forward(gt, rank, r, gp, w, field, lambda);
    const auto d_rendered = pass.backward(1.0, gp, w, field);

    for (int j = 0; j < 4; ++j) EXPECT_LT(rel_err(gp.grad[j], central_difference(loss, gp.theta[j])), 1e-3) << j;
    for (int k = 0; k < 10; ++k) {
        const auto i = rng.below(field.value.pixels());
        EXPECT_LT(rel_err(field.grad.data()[i], central_difference(loss, field.value.data()[i])), 1e-3) << i;
    }
    for (int k = 0; k < 10; ++k) {
        const auto i = rng.below(r.data().size());
        EXPECT_LT(rel_err(d_rendered.data()[i], central_difference(loss, r.data()[i])), 1e-3) << i;
    }
    for (std::size_t i : {std::size_t{0}, ConvWeights::kW1 + 3, ConvWeights::kSize - 1})
        EXPECT_LT(rel_err(w.grad[i], central_difference(loss, w.theta[i])), 1e-3) << i;
}

TEST(IllumState, CheckpointRoundTrip) {
    IllumState s;
    s.conv = ConvWeights::initialized(2);
    s.gamma.resize(2);
    s.field.resize(2);
    s.gamma[1] = params(0.3, 0.2, 1.1, -0.4);
    s.field[0].value(5, 7) = 0.123;
    const auto path = std::filesystem::temp_directory_path() / "gsi3_illum_state.bin";
    save_illum_state(s, path);
    const auto back = load_illum_state(path);
    EXPECT_EQ(back.conv.theta, s.conv.theta);
    ASSERT_EQ(back.gamma.size(), 2u);
    EXPECT_EQ(back.gamma[1].theta, s.gamma[1].theta);
    EXPECT_EQ(back.field[0].value, s.field[0].value);
}

TEST(IllumState, CorruptCheckpointRejected) {
    const auto path = std::filesystem::temp_directory_path() / "gsi3_illum_bad.bin";
    std::ofstream(path, std::ios::binary) << "GSI3ILL1garbage";
    EXPECT_THROW((void)load_illum_state(path), CheckpointError);
}
