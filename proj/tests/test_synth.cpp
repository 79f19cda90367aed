#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include <gtest/gtest.h>

#include "gsi3/image_io.hpp"
#include "gsi3/synth.hpp"

using namespace gsi3;

TEST(SceneKind, ParseAndPrint) {
    for (auto k : {SceneKind::sphere, SceneKind::plane, SceneKind::box}) EXPECT_EQ(parse_scene_kind(to_string(k)), k);
    EXPECT_THROW((void)parse_scene_kind("torus"), std::invalid_argument);
}

TEST(Scene, GroundTruthPointsLieOnSurface) {
    for (auto k : {SceneKind::sphere, SceneKind::plane, SceneKind::box})
        for (double extent : {1.0, 2.5}) {
            const auto s = make_scene(k, extent, 3, 1500);
            EXPECT_NEAR(static_cast<double>(s.gt_points.size()), 1500.0, 75.0);
            for (const auto& p : s.gt_points) EXPECT_LT(surface_residual(s, p), 1e-6) << to_string(k);
        }
}

TEST(RenderGt, SphereCenterNormalFacesCamera) {
    const auto s = make_scene(SceneKind::sphere);
    const Camera cam = Camera::look_at({0, 0, 3}, {0, 0, 0}, Eigen::Vector3d::UnitY(), 33, 33, 26.4);
    const auto v = render_gt(s, cam);
    ASSERT_TRUE(v.normals.valid(16, 16));
    EXPECT_NEAR((v.normals.at(16, 16) - Eigen::Vector3d(0, 0, -1)).norm(), 0.0, 1e-12);
    EXPECT_NEAR(v.depth(16, 16), 2.0, 1e-12);
    EXPECT_FALSE(v.normals.valid(0, 0));
    EXPECT_EQ(v.depth(0, 0), 0.0);
    EXPECT_EQ(v.image(0, 0, 1), 0.0);
}

TEST(RenderGt, OnAxisPlaneHasConstantDepth) {
    const auto s = make_scene(SceneKind::plane, 4.0);
    const Camera cam = Camera::look_at({0, 0, 2}, {0, 0, 0}, Eigen::Vector3d::UnitY(), 24, 24, 19.2);
    const auto v = render_gt(s, cam);
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 24; ++x) {
            ASSERT_TRUE(v.normals.valid(x, y));
            EXPECT_NEAR(v.depth(x, y), 2.0, 1e-12);
        }
}

TEST(RenderGt, NormalsAreUnitAndFrontFacing) {
    for (auto k : {SceneKind::sphere, SceneKind::plane, SceneKind::box}) {
        const auto s = make_scene(k);
        for (const auto& cam : make_cameras(s, 6, 32, 32)) {
            const auto v = render_gt(s, cam);
            EXPECT_TRUE(v.normals.unit_where_valid(1e-12));
            EXPECT_GT(v.normals.valid_count(), 0u);
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x)
                    if (v.normals.valid(x, y)) {
                        EXPECT_LE(v.normals.at(x, y).dot(cam.pixel_ray(x, y)), 0.0);
                        for (int c = 0; c < 3; ++c) {
                            EXPECT_GE(v.image(x, y, c), 0.0);
                            EXPECT_LE(v.image(x, y, c), 1.0);
                        }
                    }
        }
    }
}

TEST(ReferenceNormals, MatchGroundTruthExactly) {
    const auto s = make_scene(SceneKind::box);
    const auto cams = make_cameras(s, 4, 32, 32);
    const OracleNormalProvider provider(s, cams);
    for (std::size_t v = 0; v < cams.size(); ++v) {
        const auto ref = provider.normals(v);
        const auto gt = render_gt(s, cams[v]).normals;
        EXPECT_EQ(ref.vectors(), gt.vectors());
        EXPECT_EQ(ref.validity(), gt.validity());
    }
}

TEST(ReferenceNormals, NoiseModeCorruptsButKeepsUnitLength) {
    const auto s = make_scene(SceneKind::sphere);
    const auto cam = make_cameras(s, 4, 32, 32)[0];
    const auto clean = reference_normals(s, cam);
    const auto noisy = reference_normals(s, cam, 0.1, 1);
    EXPECT_EQ(noisy.validity(), clean.validity());
    EXPECT_TRUE(noisy.unit_where_valid(1e-12));
    EXPECT_NE(noisy.vectors(), clean.vectors());
    EXPECT_EQ(reference_normals(s, cam, 0.1, 1).vectors(), noisy.vectors());
}

TEST(Cameras, RingSpacingAndLookAt) {
    const auto s = make_scene(SceneKind::plane);
    const auto cams = make_cameras(s, 4, 64, 48);
    ASSERT_EQ(cams.size(), 4u);
    for (int i = 0; i < 4; ++i) {
        const Eigen::Vector3d c = cams[i].center();
        const double az = std::atan2(c.y(), c.x());
        const double expected = std::remainder(i * std::numbers::pi / 2, 2 * std::numbers::pi);
        EXPECT_NEAR(std::remainder(az - expected, 2 * std::numbers::pi), 0.0, 1e-12);
        EXPECT_NEAR(c.norm(), 3.0, 1e-12);
        EXPECT_EQ(cams[i].fx, 0.8 * 64);
        EXPECT_NO_THROW(cams[i].validate());
    }
}

TEST(Cameras, OpticalAxesPassThroughCentroid) {
    for (auto k : {SceneKind::sphere, SceneKind::plane, SceneKind::box})
        for (const auto& cam : make_cameras(make_scene(k, 1.7), 16, 64, 64)) {
            const Eigen::Vector3d c = cam.center();
            const Eigen::Vector3d f = cam.forward();
            // Distance from the origin to the optical axis.
            EXPECT_LT((c - c.dot(f) * f).norm(), 1e-6);
            EXPECT_GT(f.dot(-c), 0.0);
        }
}

TEST(Cameras, SphereSpiralKeepsNeighborsClose) {
    const auto cams = make_cameras(make_scene(SceneKind::sphere), 16, 64, 64);
    for (std::size_t i = 0; i + 1 < cams.size(); ++i) {
        const double cosang = cams[i].forward().dot(cams[i + 1].forward());
        EXPECT_GT(cosang, std::cos(std::numbers::pi / 3)) << i;
        EXPECT_GE(cams[i].center().z(), 0.0);
    }
}

TEST(Cameras, NeedTwoViews) {
    EXPECT_THROW((void)make_cameras(make_scene(SceneKind::plane), 1, 16, 16), std::invalid_argument);
}

TEST(Perturb, NeutralFactorsAreIdentity) {
    ImageRGB img(4, 4);
    Rng rng(1);
    for (double& v : img.data()) v = rng.uniform();
    const auto out = apply_perturbation(img, PerturbDraw{1.0, 1.0, 1.0});
    for (std::size_t i = 0; i < img.data().size(); ++i) EXPECT_NEAR(out.data()[i], img.data()[i], 1e-15);
}

TEST(Perturb, GammaOnMidGray) {
    const auto out = apply_perturbation(ImageRGB(1, 1, 0.5), PerturbDraw{1.0, 1.0, 0.1});
    EXPECT_NEAR(out(0, 0, 0), 0.93303, 1e-5);
    EXPECT_EQ(out(0, 0, 0), std::pow(0.5, 0.1));
}

TEST(Perturb, DeterministicAndInRange) {
    PerturbSpec spec;
    spec.seed = 42;
    ImageRGB img(8, 8);
    Rng rng(2);
    for (double& v : img.data()) v = rng.uniform();
    for (std::uint64_t v = 0; v < 20; ++v) {
        const auto d = draw_perturbation(spec, v);
        EXPECT_GE(d.brightness, 0.5);
        EXPECT_LT(d.brightness, 1.5);
        EXPECT_GE(d.contrast, 0.5);
        EXPECT_LT(d.contrast, 1.5);
        EXPECT_TRUE(d.gamma == 0.1 || d.gamma == 0.8);
        const auto a = perturb(img, spec, v), b = perturb(img, spec, v);
        EXPECT_EQ(a, b);
        for (double x : a.data()) {
            EXPECT_GE(x, 0.0);
            EXPECT_LE(x, 1.0);
        }
    }
    PerturbSpec other = spec;
    other.seed = 43;
    EXPECT_NE(draw_perturbation(spec, 0).brightness, draw_perturbation(other, 0).brightness);
}

TEST(Perturb, SpecValidation) {
    PerturbSpec bad;
    bad.brightness_lo = 2.0;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = {};
    bad.gamma_choices = {0.5, -1};
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad.gamma_choices = {};
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Perturb, TargetBackgroundStaysBlack) {
    const auto s = make_scene(SceneKind::sphere);
    const auto cam = make_cameras(s, 4, 32, 32)[1];
    const auto gt = render_gt(s, cam);
    const auto t = perturbed_target(gt, PerturbDraw{1.2, 0.7, 0.1});
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            if (!gt.normals.valid(x, y)) { EXPECT_EQ(t(x, y, 0), 0.0); }
            else { EXPECT_GT(t(x, y, 0), 0.0); }
}

TEST(Dataset, WritesFilesAndManifest) {
    const auto dir = std::filesystem::temp_directory_path() / "gsi3_test_dataset";
    std::filesystem::remove_all(dir);
    const auto s = make_scene(SceneKind::box);
    const auto cams = make_cameras(s, 3, 16, 16);
    PerturbSpec spec;
    spec.seed = 5;
    write_dataset(s, cams, spec, dir);
    for (int v = 0; v < 3; ++v)
        for (const char* suffix : {"_clean.pfm", "_perturbed.pfm", "_perturbed.ppm", "_normals.pfm", "_depth.pfm"})
            EXPECT_TRUE(std::filesystem::exists(dir / ("view_" + std::to_string(v) + suffix)));
    std::ifstream in(dir / "manifest.txt");
    std::string line;
    int views = 0;
    while (std::getline(in, line)) {
        if (line.rfind("view ", 0) != 0) continue;
        std::istringstream is(line.substr(5));
        std::vector<double> f;
        for (double x; is >> x;) f.push_back(x);
        ASSERT_EQ(f.size(), 1u + 6u + 9u + 3u + 3u);
        const auto d = draw_perturbation(spec, views);
        EXPECT_EQ(f.back(), d.gamma);
        EXPECT_EQ(f[f.size() - 3], d.brightness);
        ++views;
    }
    EXPECT_EQ(views, 3);
    const auto clean = read_image(dir / "view_1_clean.pfm");
    const auto gt = render_gt(s, cams[1]).image;
    for (std::size_t i = 0; i < gt.data().size(); ++i)
        EXPECT_EQ(clean.data()[i], static_cast<double>(static_cast<float>(gt.data()[i])));
}
