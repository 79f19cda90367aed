#include <gtest/gtest.h>

#include "gsi3/gradcheck.hpp"

using namespace gsi3;

namespace {

void expect_all_pass(const std::vector<GradcheckRow>& rows) {
    ASSERT_FALSE(rows.empty());
    for (const auto& r : rows) {
        EXPECT_GT(r.checked, 0u) << r.group;
        EXPECT_LE(r.max_rel_err, r.tolerance) << r.group;
    }
}

} // namespace

TEST(Gradcheck, TenSeedsPass) {
    GradcheckOptions opt;
    opt.seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    const auto rows = gradcheck(opt);
    expect_all_pass(rows);
    EXPECT_TRUE(all_pass(rows));
}

TEST(Gradcheck, IdentityIlluminationPasses) {
    GradcheckOptions opt;
    opt.identity_illum = true;
    opt.seeds = {3, 4};
    expect_all_pass(gradcheck(opt));
}

TEST(Gradcheck, CoversEveryGroup) {
    const auto rows = gradcheck();
    std::vector<std::string> names;
    for (const auto& r : rows) names.push_back(r.group);
    for (const char* g : {"illum.gamma", "illum.conv", "illum.field", "illum.rendered", "normal.loss",
                          "normal.gradient", "normal.gradient_gated", "mvs.depth", "splat.position",
                          "splat.log_scale", "splat.rotation", "splat.opacity", "splat.color"})
        EXPECT_NE(std::find(names.begin(), names.end(), g), names.end()) << g;
}

TEST(Gradcheck, CorruptedGradientIsCaught) {
    for (const char* g : {"illum.field", "normal.loss", "mvs.depth", "splat.position", "splat.opacity"}) {
        GradcheckOptions opt;
        opt.corrupt_group = g;
        const auto rows = gradcheck(opt);
        EXPECT_FALSE(all_pass(rows)) << g;
        for (const auto& r : rows) {
            if (r.group == g) { EXPECT_FALSE(r.pass()); }
            else { EXPECT_TRUE(r.pass()) << r.group; }
        }
    }
}

TEST(Gradcheck, SplatFixtureAvoidsDiscontinuities) {
    GradcheckOptions opt;
    opt.seeds = {11, 12, 13};
    for (const auto& r : gradcheck(opt)) {
        if (r.group.rfind("splat.", 0) == 0) {
            EXPECT_TRUE(r.pass()) << r.group << " " << r.max_rel_err;
        }
    }
}
