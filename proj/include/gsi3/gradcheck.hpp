#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gsi3/illum.hpp"
#include "gsi3/mvs.hpp"
#include "gsi3/normalcomp.hpp"
#include "gsi3/random.hpp"
#include "gsi3/splat.hpp"

namespace gsi3 {

struct GradcheckOptions {
    std::vector<std::uint64_t> seeds{1};
    double step = 1e-4;
    double tol_smooth = 1e-3;  // illumination, normal compensation, multi-view
    double tol_splat = 1e-2;
    std::size_t conv_samples = 12;
    std::size_t field_samples = 24;
    std::size_t rendered_samples = 8;
    bool identity_illum = false;   // field at 1, gamma range just off its identity tie
    std::string corrupt_group;     // test hook: scales this group's analytic gradient by 1.05
};

struct GradcheckRow {
    std::string group;
    std::size_t checked = 0;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    [[nodiscard]] bool pass() const { return checked > 0 && max_rel_err <= tolerance; }
};

namespace detail {

/// Relative error with a floor so that pairs of near-zero values compare as equal.
inline double rel_err(double analytic, double numeric) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-7});
    return std::abs(analytic - numeric) / scale;
}

class RowAccumulator {
public:
    RowAccumulator(std::string group, double tol, const GradcheckOptions& opt)
        : row_{std::move(group), 0, 0.0, tol}, corrupt_(opt.corrupt_group == row_.group) {}

    void add(double analytic, double numeric) {
        if (corrupt_) analytic *= 1.05;
        row_.max_rel_err = std::max(row_.max_rel_err, rel_err(analytic, numeric));
        ++row_.checked;
    }
    [[nodiscard]] GradcheckRow row() const { return row_; }

private:
    GradcheckRow row_;
    bool corrupt_;
};

inline double central_difference(double& x, double h, const std::function<double()>& f) {
    const double x0 = x;
    x = x0 + h;
    const double fp = f();
    x = x0 - h;
    const double fm = f();
    x = x0;
    return (fp - fm) / (2.0 * h);
}

inline ImageRGB random_image(Rng& rng, int w, int h, double lo, double hi) {
    ImageRGB img(w, h);
    for (double& v : img.data()) v = rng.uniform(lo, hi);
    return img;
}

inline NormalMap random_normals(Rng& rng, int w, int h, double invalid_fraction) {
    NormalMap n(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            Eigen::Vector3d v(rng.normal(), rng.normal(), -std::abs(rng.normal()) - 0.5);
            n.set(x, y, v.normalized(), rng.uniform() >= invalid_fraction);
        }
    return n;
}

inline void merge(std::vector<GradcheckRow>& rows, const GradcheckRow& r) {
    for (auto& existing : rows)
        if (existing.group == r.group) {
            existing.checked += r.checked;
            existing.max_rel_err = std::max(existing.max_rel_err, r.max_rel_err);
            return;
        }
    rows.push_back(r);
}

// ---------------------------------------------------------------------------

inline std::vector<GradcheckRow> check_illum(std::uint64_t seed, const GradcheckOptions& opt) {
    constexpr int W = 8, H = 8;
    constexpr double kLambda = 0.2;
    Rng rng({seed, 0x696c6cULL});
    const ImageRGB gt = random_image(rng, W, H, 0.05, 0.95);
    const ScalarMap rank = cdf_rank(luminance(gt));
    ImageRGB rendered = random_image(rng, W, H, 0.05, 0.95);
    GammaParams gp;
    IlluminationField field;
    if (!opt.identity_illum) {
        gp.theta = {rng.uniform(0.6, 1.2), rng.uniform(-0.3, 0.3), rng.uniform(1.2, 2.0), rng.uniform(-0.3, 0.3)};
        for (double& v : field.value.data()) v = rng.uniform(0.5, 1.5);
    } else {
        // The range endpoints swap where they meet, so exact identity sits on a kink.
        gp.theta[2] = 1.01;
    }
    // With ~3M ReLU units some pre-activation always sits within one step of zero and the
    // central difference straddles the kink. Biases of +-1 keep every hidden unit clear of
    // zero while half the channels stay active and half inactive; the output unit stays active.
    ConvWeights conv = ConvWeights::initialized(seed);
    for (int c = 0; c < kHidden; ++c) conv.theta[ConvWeights::kW1 + c] = (c % 2 == 0) ? 1.0 : -1.0;
    for (std::size_t i = 0; i < ConvWeights::kW2; ++i) conv.theta[ConvWeights::kW1 + ConvWeights::kB1 + i] *= 0.4;
    conv.theta[ConvWeights::kSize - 1] = 2.0;

    IllumPass pass;
    pass.forward(gt, rank, rendered, gp, conv, field, kLambda);
    GammaParams g_gp = gp;
    ConvWeights g_conv = conv;
    IlluminationField g_field = field;
    g_gp.zero_grad();
    g_conv.zero_grad();
    g_field.zero_grad();
    const ImageRGB d_rendered = pass.backward(1.0, g_gp, g_conv, g_field);
    const IllumForward base = pass.result();

    // Loss with the refined features held fixed (they do not depend on gamma or the field).
    auto loss_cached = [&] {
        const ImageRGB target = apply_gamma(gt, rank, gp);
        const ImageRGB mod = modulate(fuse(field.value, base.features), rendered);
        return illum_loss(mod, target, kLambda).value;
    };
    auto loss_full = [&] {
        IllumPass p;
        return p.forward(gt, rank, rendered, gp, conv, field, kLambda).loss.value;
    };

    RowAccumulator r_gamma("illum.gamma", opt.tol_smooth, opt);
    for (std::size_t j = 0; j < 4; ++j)
        r_gamma.add(g_gp.grad[j], central_difference(gp.theta[j], opt.step, loss_cached));

    // Downsampling to 8x8 reads only a few field entries; sample mostly among those.
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < g_field.grad.pixels(); ++i)
        if (g_field.grad.data()[i] != 0.0) live.push_back(i);
    RowAccumulator r_field("illum.field", opt.tol_smooth, opt);
    for (std::size_t k = 0; k < opt.field_samples; ++k) {
        const std::size_t i = (k % 4 != 0 && !live.empty()) ? live[rng.below(live.size())]
                                                            : rng.below(field.value.pixels());
        r_field.add(g_field.grad.data()[i], central_difference(field.value.data()[i], opt.step, loss_cached));
    }

    RowAccumulator r_conv("illum.conv", opt.tol_smooth, opt);
    std::vector<std::size_t> conv_idx{ConvWeights::kSize - 1, ConvWeights::kW1};
    while (conv_idx.size() < opt.conv_samples) conv_idx.push_back(rng.below(ConvWeights::kSize));
    for (std::size_t i : conv_idx)
        r_conv.add(g_conv.grad[i], central_difference(conv.theta[i], opt.step, loss_full));

    RowAccumulator r_rendered("illum.rendered", opt.tol_smooth, opt);
    for (std::size_t k = 0; k < opt.rendered_samples; ++k) {
        const std::size_t i = rng.below(rendered.data().size());
        r_rendered.add(d_rendered.data()[i], central_difference(rendered.data()[i], opt.step, loss_full));
    }
    return {r_gamma.row(), r_conv.row(), r_field.row(), r_rendered.row()};
}

inline std::vector<GradcheckRow> check_normal(std::uint64_t seed, const GradcheckOptions& opt) {
    constexpr int W = 8, H = 8;
    Rng rng({seed, 0x6e726dULL});
    NormalMap pred = random_normals(rng, W, H, 0.15);
    const NormalMap ref = random_normals(rng, W, H, 0.15);
    ScalarMap per_pixel(W, H);
    for (double& v : per_pixel.data()) v = rng.uniform(0.0, 0.2);
    const GateMask mask = gate(per_pixel, 0.1);

    Buffer<3> g_normal(W, H), g_grad(W, H), g_grad_gated(W, H);
    normal_loss_backward(pred, ref, mask, 1.0, g_normal);
    gradient_loss_backward(pred, ref, 1.0, g_grad);
    gradient_loss_backward(pred, ref, 1.0, g_grad_gated, &mask);

    // Components are perturbed directly; the losses treat them as free variables.
    Buffer<3> vec = pred.vectors();
    auto rebuilt = [&] {
        NormalMap m(W, H);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                m.set(x, y, Eigen::Vector3d(vec(x, y, 0), vec(x, y, 1), vec(x, y, 2)), pred.valid(x, y));
        return m;
    };
    RowAccumulator r_n("normal.loss", opt.tol_smooth, opt);
    RowAccumulator r_g("normal.gradient", opt.tol_smooth, opt);
    RowAccumulator r_gg("normal.gradient_gated", opt.tol_smooth, opt);
    for (std::size_t i = 0; i < vec.data().size(); ++i) {
        const std::size_t px = i / 3;
        if (!pred.valid(static_cast<int>(px % W), static_cast<int>(px / W))) continue;
        double& x = vec.data()[i];
        r_n.add(g_normal.data()[i], central_difference(x, opt.step, [&] { return normal_loss(rebuilt(), ref, mask).value; }));
        r_g.add(g_grad.data()[i], central_difference(x, opt.step, [&] { return gradient_loss(rebuilt(), ref).value; }));
        r_gg.add(g_grad_gated.data()[i],
                 central_difference(x, opt.step, [&] { return gradient_loss(rebuilt(), ref, &mask).value; }));
    }
    return {r_n.row(), r_g.row(), r_gg.row()};
}

/// Two views of a tilted plane with a smooth depth perturbation, all pixels valid.
inline std::vector<GradcheckRow> check_mvs(std::uint64_t seed, const GradcheckOptions& opt) {
    constexpr int W = 8, H = 8;
    Rng rng({seed, 0x6d7673ULL});
    const Camera ca = Camera::look_at({0.3, -0.2, -3.0}, {0, 0, 0}, {0, -1, 0}, W, H, 6.4);
    const Camera cb = Camera::look_at({-0.3, 0.25, -3.0}, {0, 0, 0}, {0, -1, 0}, W, H, 6.4);
    auto plane_depth = [&](const Camera& c) {
        ScalarMap d(W, H);
        // Plane z = 0.1 x + 0.05 y in world space.
        const Eigen::Vector3d n = Eigen::Vector3d(-0.1, -0.05, 1.0).normalized();
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const Eigen::Vector3d ray_w = c.rotation.transpose() * c.pixel_ray(x, y);
                const double t = -n.dot(c.center()) / n.dot(ray_w);
                d(x, y) = t * (c.rotation * ray_w).z() * (1.0 + 0.02 * rng.uniform(-1.0, 1.0));
            }
        return d;
    };
    DepthObservation a{plane_depth(ca), std::vector<std::uint8_t>(W * H, 1), std::nullopt};
    DepthObservation b{plane_depth(cb), std::vector<std::uint8_t>(W * H, 1), std::nullopt};
    const MvsGrad g = mvs_loss_backward(a, ca, b, cb, 1.0);
    RowAccumulator row("mvs.depth", opt.tol_smooth, opt);
    auto f = [&] { return mvs_loss(a, ca, b, cb).value; };
    for (std::size_t i = 0; i < a.depth.pixels(); ++i) {
        row.add(g.depth_a.data()[i], central_difference(a.depth.data()[i], opt.step, f));
        row.add(g.depth_b.data()[i], central_difference(b.depth.data()[i], opt.step, f));
    }
    return {row.row()};
}

/// True when no pixel center sits next to a discontinuity of the forward pass:
/// a 3-sigma box edge or the alpha = 0.5 normal-validity threshold.
inline bool well_conditioned(const GaussianCloud& cloud, const Camera& cam) {
    const auto splats = build_splats(cloud, cam);
    for (const auto& s : splats) {
        const double rx = 3.0 * std::sqrt(s.cov2d(0, 0)), ry = 3.0 * std::sqrt(s.cov2d(1, 1));
        for (double edge : {s.mean2d.x() - rx - 0.5, s.mean2d.x() + rx - 0.5})
            if (std::abs(edge - std::round(edge)) < 0.02) return false;
        for (double edge : {s.mean2d.y() - ry - 0.5, s.mean2d.y() + ry - 0.5})
            if (std::abs(edge - std::round(edge)) < 0.02) return false;
    }
    const RenderOutput r = rasterize(cloud, cam);
    for (double a : r.alpha.data())
        if (std::abs(a - 0.5) < 0.01) return false;
    return true;
}

inline std::vector<GradcheckRow> check_splat(std::uint64_t seed, const GradcheckOptions& opt) {
    constexpr int W = 8, H = 8;
    Rng rng({seed, 0x73706cULL});
    Camera cam;
    cam.width = W;
    cam.height = H;
    cam.fx = cam.fy = 0.8 * W;
    cam.cx = W / 2.0;
    cam.cy = H / 2.0;

    GaussianCloud cloud;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        cloud = GaussianCloud();
        for (int i = 0; i < 8; ++i) {
            Gaussian g;
            const double z = rng.uniform(2.0, 4.0);
            g.position = {rng.uniform(-0.5, 0.5) * z * 0.5, rng.uniform(-0.5, 0.5) * z * 0.5, z};
            g.log_scale = {std::log(rng.uniform(0.25, 0.5)), std::log(rng.uniform(0.15, 0.25)),
                           std::log(rng.uniform(0.03, 0.08))};
            g.rotation = Eigen::Vector4d(rng.normal(), rng.normal(), rng.normal(), rng.normal()).normalized();
            g.opacity_logit = rng.uniform(-0.5, 1.5);
            g.color_logit = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
            cloud.push_back(g);
        }
        if (well_conditioned(cloud, cam)) break;
    }

    RenderGrad up{random_image(rng, W, H, -1, 1), ScalarMap(W, H), Buffer<3>(W, H), ScalarMap(W, H)};
    for (double& v : up.depth.data()) v = rng.uniform(-0.3, 0.3);
    for (double& v : up.normal.data()) v = rng.uniform(-1, 1);
    for (double& v : up.alpha.data()) v = rng.uniform(-1, 1);
    auto scalar = [&] {
        const RenderOutput r = rasterize(cloud, cam);
        double s = 0.0;
        for (std::size_t i = 0; i < r.color.data().size(); ++i) s += up.color.data()[i] * r.color.data()[i];
        for (std::size_t i = 0; i < r.depth.data().size(); ++i) s += up.depth.data()[i] * r.depth.data()[i];
        for (std::size_t i = 0; i < r.alpha.data().size(); ++i) s += up.alpha.data()[i] * r.alpha.data()[i];
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (r.normal.valid(x, y))
                    for (int c = 0; c < 3; ++c) s += up.normal(x, y, c) * r.normal.vectors()(x, y, c);
        return s;
    };

    RenderRecord rec;
    rasterize(cloud, cam, &rec);
    cloud.zero_grad();
    rasterize_backward(cloud, rec, up);
    const std::vector<double> analytic(cloud.grads().begin(), cloud.grads().end());

    using L = ParamLayout;
    struct Group {
        const char* name;
        int begin, count;
    };
    const Group groups[] = {{"splat.position", L::kPosition, 3},
                            {"splat.log_scale", L::kLogScale, 3},
                            {"splat.rotation", L::kRotation, 4},
                            {"splat.opacity", L::kOpacity, 1},
                            {"splat.color", L::kColor, 3}};
    std::vector<GradcheckRow> rows;
    for (const auto& grp : groups) {
        RowAccumulator row(grp.name, opt.tol_splat, opt);
        for (std::size_t i = 0; i < cloud.size(); ++i)
            for (int k = grp.begin; k < grp.begin + grp.count; ++k) {
                const std::size_t idx = i * L::kStride + k;
                row.add(analytic[idx], central_difference(cloud.params()[idx], opt.step, scalar));
            }
        rows.push_back(row.row());
    }
    return rows;
}

} // namespace detail

/// Finite-difference check of every analytic gradient path on small fixtures.
inline std::vector<GradcheckRow> gradcheck(const GradcheckOptions& opt = {}) {
    std::vector<GradcheckRow> rows;
    for (std::uint64_t seed : opt.seeds) {
        for (const auto& r : detail::check_illum(seed, opt)) detail::merge(rows, r);
        for (const auto& r : detail::check_normal(seed, opt)) detail::merge(rows, r);
        for (const auto& r : detail::check_mvs(seed, opt)) detail::merge(rows, r);
        for (const auto& r : detail::check_splat(seed, opt)) detail::merge(rows, r);
    }
    return rows;
}

inline bool all_pass(const std::vector<GradcheckRow>& rows) {
    return std::all_of(rows.begin(), rows.end(), [](const GradcheckRow& r) { return r.pass(); });
}

} // namespace gsi3
