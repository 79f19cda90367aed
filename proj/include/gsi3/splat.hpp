#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "gsi3/binary_io.hpp"
#include "gsi3/camera.hpp"
#include "gsi3/image.hpp"
#include "gsi3/parallel.hpp"

namespace gsi3 {

inline constexpr double kNearPlane = 0.01;
inline constexpr double kCovRegularizer = 0.3;
inline constexpr double kAlphaMax = 0.999;
inline constexpr double kTransmittanceCutoff = 1e-4;
inline constexpr double kMinScale = 1e-4;
inline constexpr double kMaxScale = 1e2;
inline constexpr int kTileSize = 16;

inline double sigmoid(double x) noexcept { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) noexcept { return std::log(p / (1.0 - p)); }

/// One anisotropic primitive in its optimizer parameterization.
struct Gaussian {
    Eigen::Vector3d position = Eigen::Vector3d::Zero();
    Eigen::Vector3d log_scale = Eigen::Vector3d::Constant(std::log(0.01));
    Eigen::Vector4d rotation{1.0, 0.0, 0.0, 0.0};  // (w, x, y, z)
    double opacity_logit = 0.0;
    Eigen::Vector3d color_logit = Eigen::Vector3d::Zero();

    [[nodiscard]] Eigen::Vector3d scale() const {
        return log_scale.array().exp().min(kMaxScale).max(kMinScale).matrix();
    }
    [[nodiscard]] double opacity() const { return sigmoid(opacity_logit); }
    [[nodiscard]] Eigen::Vector3d color() const {
        return color_logit.unaryExpr([](double v) { return sigmoid(v); });
    }
    [[nodiscard]] Eigen::Matrix3d rotation_matrix() const { return quat_to_rotation(rotation); }
    /// World-space covariance R S S^T R^T.
    [[nodiscard]] Eigen::Matrix3d covariance() const {
        const Eigen::Matrix3d m = rotation_matrix() * scale().asDiagonal();
        return m * m.transpose();
    }
};

/// Flat parameter block per Gaussian: position(3) log_scale(3) rotation(4) opacity(1) color(3).
struct ParamLayout {
    static constexpr int kPosition = 0;
    static constexpr int kLogScale = 3;
    static constexpr int kRotation = 6;
    static constexpr int kOpacity = 10;
    static constexpr int kColor = 11;
    static constexpr int kStride = 14;
};

/// Fixed-size set of Gaussians with parameters and gradients in flat storage so an
/// optimizer can treat them as one vector. revision() changes whenever parameters do.
class GaussianCloud {
public:
    GaussianCloud() = default;
    explicit GaussianCloud(std::span<const Gaussian> gs) {
        for (const auto& g : gs) push_back(g);
    }

    [[nodiscard]] std::size_t size() const noexcept { return params_.size() / ParamLayout::kStride; }
    [[nodiscard]] bool empty() const noexcept { return params_.empty(); }

    void push_back(const Gaussian& g) {
        params_.resize(params_.size() + ParamLayout::kStride);
        grads_.resize(params_.size(), 0.0);
        set(size() - 1, g);
    }

    [[nodiscard]] Gaussian get(std::size_t i) const {
        const double* p = &params_[i * ParamLayout::kStride];
        Gaussian g;
        g.position = {p[0], p[1], p[2]};
        g.log_scale = {p[3], p[4], p[5]};
        g.rotation = {p[6], p[7], p[8], p[9]};
        g.opacity_logit = p[10];
        g.color_logit = {p[11], p[12], p[13]};
        return g;
    }

    void set(std::size_t i, const Gaussian& g) {
        double* p = &params_[i * ParamLayout::kStride];
        for (int k = 0; k < 3; ++k) {
            p[k] = g.position[k];
            p[3 + k] = g.log_scale[k];
            p[11 + k] = g.color_logit[k];
        }
        for (int k = 0; k < 4; ++k) p[6 + k] = g.rotation[k];
        p[10] = g.opacity_logit;
        ++revision_;
    }

    [[nodiscard]] std::span<double> params() noexcept { return params_; }
    [[nodiscard]] std::span<const double> params() const noexcept { return params_; }
    [[nodiscard]] std::span<double> grads() noexcept { return grads_; }
    [[nodiscard]] std::span<const double> grads() const noexcept { return grads_; }
    [[nodiscard]] std::span<double> grad(std::size_t i) noexcept {
        return std::span<double>(grads_).subspan(i * ParamLayout::kStride, ParamLayout::kStride);
    }

    void zero_grad() { std::fill(grads_.begin(), grads_.end(), 0.0); }

    /// Renormalizes quaternions and clamps log-scales into the decoded-scale range.
    void project() {
        const double lo = std::log(kMinScale), hi = std::log(kMaxScale);
        for (std::size_t i = 0; i < size(); ++i) {
            double* p = &params_[i * ParamLayout::kStride];
            for (int k = 0; k < 3; ++k) p[3 + k] = std::clamp(p[3 + k], lo, hi);
            Eigen::Map<Eigen::Vector4d> q(p + 6);
            const double n = q.norm();
            if (n > 0.0) q /= n;
            else q = Eigen::Vector4d(1, 0, 0, 0);
        }
        ++revision_;
    }

    void touch() noexcept { ++revision_; }
    [[nodiscard]] std::uint64_t revision() const noexcept { return revision_; }

private:
    std::vector<double> params_;
    std::vector<double> grads_;
    std::uint64_t revision_ = 0;
};

// ---------------------------------------------------------------------------
// Projection

struct Projection {
    Eigen::Vector2d mean2d;
    Eigen::Matrix2d cov2d;
    double depth = 0.0;
};

/// Perspective projection of the Gaussian's mean and covariance (EWA, first-order).
/// Returns nullopt when the mean is not in front of the near plane.
inline std::optional<Projection> project(const Gaussian& g, const Camera& cam) {
    const Eigen::Vector3d pc = cam.to_camera(g.position);
    if (!(pc.z() > kNearPlane)) return std::nullopt;
    const double z = pc.z();
    Eigen::Matrix<double, 2, 3> J;
    J << cam.fx / z, 0.0, -cam.fx * pc.x() / (z * z),
         0.0, cam.fy / z, -cam.fy * pc.y() / (z * z);
    const Eigen::Matrix3d cov_cam = cam.rotation * g.covariance() * cam.rotation.transpose();
    Projection p;
    p.mean2d = cam.project(pc);
    p.cov2d = J * cov_cam * J.transpose() + kCovRegularizer * Eigen::Matrix2d::Identity();
    p.depth = z;
    return p;
}

/// Index of the flattest axis, lowest index on ties.
inline int flattest_axis(const Eigen::Vector3d& scale) {
    int k = 0;
    for (int i = 1; i < 3; ++i)
        if (scale[i] < scale[k]) k = i;
    return k;
}

/// Camera-space unit normal: the rotation column of the flattest axis, flipped to face the camera.
inline Eigen::Vector3d gaussian_normal(const Gaussian& g, const Camera& cam) {
    const Eigen::Vector3d n = cam.rotation * g.rotation_matrix().col(flattest_axis(g.scale()));
    const Eigen::Vector3d pc = cam.to_camera(g.position);
    return n.dot(pc) > 0.0 ? Eigen::Vector3d(-n) : n;
}

// ---------------------------------------------------------------------------
// Rasterization

struct RenderOutput {
    ImageRGB color;
    ScalarMap depth;  // expected camera-space z of the blended surface, valid where alpha > 0.5
    NormalMap normal; // camera space, unit where alpha > 0.5
    ScalarMap alpha;
};

/// Per-Gaussian screen-space quantities cached between forward and backward.
struct Splat {
    std::uint32_t id = 0;
    Eigen::Vector3d cam_pos;
    Eigen::Vector2d mean2d;
    Eigen::Matrix2d cov2d;
    Eigen::Vector3d conic;  // (a, b, c) of the inverse 2D covariance
    double opacity = 0.0;
    Eigen::Vector3d color;
    Eigen::Vector3d normal;
    int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel box

    [[nodiscard]] bool covers(int x, int y) const noexcept { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

/// Everything rasterize_backward needs to replay one forward pass.
struct RenderRecord {
    std::uint64_t cloud_revision = 0;
    std::size_t cloud_size = 0;
    Camera camera;
    std::vector<Splat> splats;               // depth-sorted visible Gaussians
    int tiles_x = 0, tiles_y = 0;
    std::vector<std::vector<std::uint32_t>> tile_lists;  // indices into splats
    // Per tile: contributor slot lists per pixel (offsets into ids/alphas).
    std::vector<std::vector<std::uint32_t>> contrib_ids;
    std::vector<std::vector<double>> contrib_alpha;
    std::vector<std::vector<std::uint32_t>> contrib_offsets;
    RenderOutput output;
    Buffer<3> normal_raw;  // unnormalized blended normals
};

namespace detail {

inline double pixel_alpha(const Splat& s, double px, double py, double* gauss = nullptr) {
    const double dx = px - s.mean2d.x(), dy = py - s.mean2d.y();
    const double power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
    const double g = std::exp(power);
    if (gauss) *gauss = g;
    return std::min(kAlphaMax, s.opacity * g);
}

inline std::vector<Splat> build_splats(const GaussianCloud& cloud, const Camera& cam) {
    std::vector<Splat> splats;
    splats.reserve(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Gaussian g = cloud.get(i);
        const auto proj = project(g, cam);
        if (!proj) continue;
        Splat s;
        s.id = static_cast<std::uint32_t>(i);
        s.cam_pos = cam.to_camera(g.position);
        s.mean2d = proj->mean2d;
        s.cov2d = proj->cov2d;
        const Eigen::Matrix2d inv = proj->cov2d.inverse();
        s.conic = {inv(0, 0), inv(0, 1), inv(1, 1)};
        s.opacity = g.opacity();
        s.color = g.color();
        s.normal = gaussian_normal(g, cam);
        const double rx = 3.0 * std::sqrt(proj->cov2d(0, 0));
        const double ry = 3.0 * std::sqrt(proj->cov2d(1, 1));
        // Pixel centers (x + 0.5) inside [mean - r, mean + r].
        const double fx0 = std::ceil(s.mean2d.x() - rx - 0.5), fx1 = std::floor(s.mean2d.x() + rx - 0.5);
        const double fy0 = std::ceil(s.mean2d.y() - ry - 0.5), fy1 = std::floor(s.mean2d.y() + ry - 0.5);
        if (fx1 < 0 || fy1 < 0 || fx0 > cam.width - 1 || fy0 > cam.height - 1) continue;
        s.x0 = static_cast<int>(std::max(fx0, 0.0));
        s.x1 = static_cast<int>(std::min(fx1, cam.width - 1.0));
        s.y0 = static_cast<int>(std::max(fy0, 0.0));
        s.y1 = static_cast<int>(std::min(fy1, cam.height - 1.0));
        if (s.x0 > s.x1 || s.y0 > s.y1) continue;
        splats.push_back(s);
    }
    std::stable_sort(splats.begin(), splats.end(), [](const Splat& a, const Splat& b) {
        return a.cam_pos.z() < b.cam_pos.z() || (a.cam_pos.z() == b.cam_pos.z() && a.id < b.id);
    });
    return splats;
}

} // namespace detail

/// Front-to-back alpha compositing of the depth-sorted splats over 16x16 tiles.
/// Background is black with zero alpha.
inline RenderOutput rasterize(const GaussianCloud& cloud, const Camera& cam, RenderRecord* record = nullptr) {
    if (cloud.empty()) throw std::invalid_argument("rasterize: empty cloud");
    const int W = cam.width, H = cam.height;
    RenderRecord local;
    RenderRecord& rec = record ? *record : local;
    rec = RenderRecord{};
    rec.cloud_revision = cloud.revision();
    rec.cloud_size = cloud.size();
    rec.camera = cam;
    rec.splats = detail::build_splats(cloud, cam);
    rec.tiles_x = (W + kTileSize - 1) / kTileSize;
    rec.tiles_y = (H + kTileSize - 1) / kTileSize;
    const int n_tiles = rec.tiles_x * rec.tiles_y;
    rec.tile_lists.assign(n_tiles, {});
    for (std::uint32_t k = 0; k < rec.splats.size(); ++k) {
        const auto& s = rec.splats[k];
        for (int ty = s.y0 / kTileSize; ty <= s.y1 / kTileSize; ++ty)
            for (int tx = s.x0 / kTileSize; tx <= s.x1 / kTileSize; ++tx)
                rec.tile_lists[ty * rec.tiles_x + tx].push_back(k);
    }
    rec.contrib_ids.assign(n_tiles, {});
    rec.contrib_alpha.assign(n_tiles, {});
    rec.contrib_offsets.assign(n_tiles, {});

    RenderOutput out{ImageRGB(W, H), ScalarMap(W, H), NormalMap(W, H), ScalarMap(W, H)};
    rec.normal_raw = Buffer<3>(W, H);

    for_each_band(n_tiles, [&](int t) {
        const int tx = t % rec.tiles_x, ty = t / rec.tiles_x;
        const auto& list = rec.tile_lists[t];
        auto& ids = rec.contrib_ids[t];
        auto& alphas = rec.contrib_alpha[t];
        auto& offsets = rec.contrib_offsets[t];
        for (int y = ty * kTileSize; y < std::min(H, (ty + 1) * kTileSize); ++y)
            for (int x = tx * kTileSize; x < std::min(W, (tx + 1) * kTileSize); ++x) {
                offsets.push_back(static_cast<std::uint32_t>(ids.size()));
                double T = 1.0, depth_acc = 0.0;
                Eigen::Vector3d color = Eigen::Vector3d::Zero(), normal = Eigen::Vector3d::Zero();
                for (std::uint32_t k : list) {
                    const auto& s = rec.splats[k];
                    if (!s.covers(x, y)) continue;
                    const double a = detail::pixel_alpha(s, x + 0.5, y + 0.5);
                    const double w = a * T;
                    color += w * s.color;
                    depth_acc += w * s.cam_pos.z();
                    normal += w * s.normal;
                    ids.push_back(k);
                    alphas.push_back(a);
                    T *= 1.0 - a;
                    if (T < kTransmittanceCutoff) break;
                }
                const double A = 1.0 - T;
                for (int c = 0; c < 3; ++c) {
                    out.color(x, y, c) = color[c];
                    rec.normal_raw(x, y, c) = normal[c];
                }
                out.alpha(x, y) = A;
                out.depth(x, y) = A > 0.0 ? depth_acc / A : 0.0;
                const double len = normal.norm();
                if (A > 0.5 && len > 0.0) out.normal.set(x, y, normal / len, true);
            }
        offsets.push_back(static_cast<std::uint32_t>(ids.size()));
    });
    if (record) rec.output = out;
    return out;
}

/// Upstream gradients for rasterize_backward; empty buffers mean zero gradient.
struct RenderGrad {
    ImageRGB color;
    ScalarMap depth;
    Buffer<3> normal;
    ScalarMap alpha;
};

/// Screen-space gradient accumulators of one splat.
struct SplatGrad {
    Eigen::Vector2d mean2d = Eigen::Vector2d::Zero();
    Eigen::Vector3d conic = Eigen::Vector3d::Zero();
    double opacity = 0.0;
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    double depth = 0.0;
    Eigen::Vector3d normal = Eigen::Vector3d::Zero();

    SplatGrad& operator+=(const SplatGrad& o) {
        mean2d += o.mean2d;
        conic += o.conic;
        opacity += o.opacity;
        color += o.color;
        depth += o.depth;
        normal += o.normal;
        return *this;
    }
};

namespace detail {

/// Chain rule from screen-space gradients back to the Gaussian's parameters.
inline void backprop_splat(const Gaussian& g, const Splat& s, const SplatGrad& sg, const Camera& cam,
                           std::span<double> out) {
    const Eigen::Vector3d pc = s.cam_pos;
    const double x = pc.x(), y = pc.y(), z = pc.z();
    const double fx = cam.fx, fy = cam.fy;
    Eigen::Vector3d d_pc = Eigen::Vector3d::Zero();

    // Mean projection and depth attribute.
    d_pc.x() += sg.mean2d.x() * fx / z;
    d_pc.y() += sg.mean2d.y() * fy / z;
    d_pc.z() += -sg.mean2d.x() * fx * x / (z * z) - sg.mean2d.y() * fy * y / (z * z) + sg.depth;

    // Conic -> 2D covariance.
    const Eigen::Matrix2d K = s.cov2d.inverse();
    Eigen::Matrix2d gK;
    gK << sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2];
    const Eigen::Matrix2d g_cov2d = -K * gK * K;

    // 2D covariance -> camera covariance and Jacobian.
    Eigen::Matrix<double, 2, 3> J;
    J << fx / z, 0.0, -fx * x / (z * z), 0.0, fy / z, -fy * y / (z * z);
    const Eigen::Matrix3d R = g.rotation_matrix();
    const Eigen::Vector3d sc = g.scale();
    const Eigen::Matrix3d M = R * sc.asDiagonal();
    const Eigen::Matrix3d cov_world = M * M.transpose();
    const Eigen::Matrix3d cov_cam = cam.rotation * cov_world * cam.rotation.transpose();
    const Eigen::Matrix3d g_cov_cam = J.transpose() * g_cov2d * J;
    const Eigen::Matrix<double, 2, 3> gJ = 2.0 * g_cov2d * J * cov_cam;
    d_pc.z() += gJ(0, 0) * (-fx / (z * z)) + gJ(0, 2) * (2.0 * fx * x / (z * z * z)) +
                gJ(1, 1) * (-fy / (z * z)) + gJ(1, 2) * (2.0 * fy * y / (z * z * z));
    d_pc.x() += gJ(0, 2) * (-fx / (z * z));
    d_pc.y() += gJ(1, 2) * (-fy / (z * z));

    // Camera covariance -> world covariance -> (R, S).
    const Eigen::Matrix3d g_cov_world = cam.rotation.transpose() * g_cov_cam * cam.rotation;
    const Eigen::Matrix3d gM = 2.0 * g_cov_world * M;
    Eigen::Matrix3d gR = gM * sc.asDiagonal();
    Eigen::Vector3d g_scale;
    for (int j = 0; j < 3; ++j) g_scale[j] = gM.col(j).dot(R.col(j));

    // Normal: sign * cam.rotation * R.col(axis).
    const int axis = flattest_axis(sc);
    const Eigen::Vector3d n_cam = cam.rotation * R.col(axis);
    const double sign = n_cam.dot(pc) > 0.0 ? -1.0 : 1.0;
    gR.col(axis) += sign * cam.rotation.transpose() * sg.normal;

    const Eigen::Vector4d g_quat = quat_to_rotation_backward(g.rotation, gR);
    const Eigen::Vector3d g_pos = cam.rotation.transpose() * d_pc;

    using L = ParamLayout;
    for (int k = 0; k < 3; ++k) {
        out[L::kPosition + k] += g_pos[k];
        const double e = std::exp(g.log_scale[k]);
        if (e >= kMinScale && e <= kMaxScale) out[L::kLogScale + k] += g_scale[k] * sc[k];
        out[L::kColor + k] += sg.color[k] * s.color[k] * (1.0 - s.color[k]);
    }
    for (int k = 0; k < 4; ++k) out[L::kRotation + k] += g_quat[k];
    out[L::kOpacity] += sg.opacity * s.opacity * (1.0 - s.opacity);
}

} // namespace detail

/// Accumulates exact gradients of the upstream loss into cloud.grads(). The record
/// must come from rasterize() on this cloud with unchanged parameters.
inline void rasterize_backward(GaussianCloud& cloud, const RenderRecord& rec, const RenderGrad& grad) {
    if (rec.cloud_size != cloud.size() || rec.cloud_revision != cloud.revision())
        throw std::logic_error("rasterize_backward: record does not match the cloud's current state");
    const int W = rec.camera.width, H = rec.camera.height;
    const auto& out = rec.output;
    const bool has_color = !grad.color.empty(), has_depth = !grad.depth.empty();
    const bool has_normal = !grad.normal.empty(), has_alpha = !grad.alpha.empty();
    if ((has_color && (grad.color.width() != W || grad.color.height() != H)) ||
        (has_depth && (grad.depth.width() != W || grad.depth.height() != H)) ||
        (has_normal && (grad.normal.width() != W || grad.normal.height() != H)) ||
        (has_alpha && (grad.alpha.width() != W || grad.alpha.height() != H)))
        throw std::invalid_argument("rasterize_backward: gradient size does not match the render");

    const int n_tiles = rec.tiles_x * rec.tiles_y;
    std::vector<std::vector<SplatGrad>> partial(n_tiles);

    for_each_band(n_tiles, [&](int t) {
        const int tx = t % rec.tiles_x, ty = t / rec.tiles_x;
        const auto& list = rec.tile_lists[t];
        // Map from splat index to slot in this tile's list.
        std::vector<SplatGrad> local(list.size());
        std::vector<std::uint32_t> slot_of;
        if (!list.empty()) {
            slot_of.assign(rec.splats.size(), 0);
            for (std::uint32_t j = 0; j < list.size(); ++j) slot_of[list[j]] = j;
        }
        const auto& ids = rec.contrib_ids[t];
        const auto& alphas = rec.contrib_alpha[t];
        const auto& offsets = rec.contrib_offsets[t];
        std::vector<double> trans;
        int pixel = 0;
        for (int y = ty * kTileSize; y < std::min(H, (ty + 1) * kTileSize); ++y)
            for (int x = tx * kTileSize; x < std::min(W, (tx + 1) * kTileSize); ++x, ++pixel) {
                const std::uint32_t begin = offsets[pixel], end = offsets[pixel + 1];
                if (begin == end) continue;

                // Upstream gradient over channels (r, g, b, z, nx, ny, nz, 1).
                std::array<double, 8> gch{};
                const double A = out.alpha(x, y);
                if (has_color)
                    for (int c = 0; c < 3; ++c) gch[c] = grad.color(x, y, c);
                if (has_depth && A > 0.0) {
                    gch[3] = grad.depth(x, y) / A;
                    gch[7] -= grad.depth(x, y) * out.depth(x, y) / A;
                }
                if (has_alpha) gch[7] += grad.alpha(x, y);
                if (has_normal && out.normal.valid(x, y)) {
                    const Eigen::Vector3d raw{rec.normal_raw(x, y, 0), rec.normal_raw(x, y, 1),
                                              rec.normal_raw(x, y, 2)};
                    const double len = raw.norm();
                    const Eigen::Vector3d n = raw / len;
                    const Eigen::Vector3d dn{grad.normal(x, y, 0), grad.normal(x, y, 1), grad.normal(x, y, 2)};
                    const Eigen::Vector3d g_raw = (dn - n * n.dot(dn)) / len;
                    for (int c = 0; c < 3; ++c) gch[4 + c] = g_raw[c];
                }
                if (std::all_of(gch.begin(), gch.end(), [](double v) { return v == 0.0; })) continue;

                trans.resize(end - begin);
                double T = 1.0;
                for (std::uint32_t k = begin; k < end; ++k) {
                    trans[k - begin] = T;
                    T *= 1.0 - alphas[k];
                }
                std::array<double, 8> suffix{};
                for (std::uint32_t k = end; k-- > begin;) {
                    const auto& s = rec.splats[ids[k]];
                    const double a = alphas[k];
                    const double Tk = trans[k - begin];
                    const double w = a * Tk;
                    const std::array<double, 8> f{s.color[0], s.color[1], s.color[2], s.cam_pos.z(),
                                                  s.normal[0], s.normal[1], s.normal[2], 1.0};
                    double d_alpha = 0.0;
                    for (int c = 0; c < 8; ++c) d_alpha += gch[c] * (Tk * f[c] - suffix[c] / (1.0 - a));
                    SplatGrad& sg = local[slot_of[ids[k]]];
                    for (int c = 0; c < 3; ++c) {
                        sg.color[c] += w * gch[c];
                        sg.normal[c] += w * gch[4 + c];
                    }
                    sg.depth += w * gch[3];
                    for (int c = 0; c < 8; ++c) suffix[c] += w * f[c];

                    double gauss = 0.0;
                    const double px = x + 0.5, py = y + 0.5;
                    detail::pixel_alpha(s, px, py, &gauss);
                    if (s.opacity * gauss >= kAlphaMax) continue;  // clipped alpha is constant
                    sg.opacity += d_alpha * gauss;
                    const double d_power = d_alpha * a;
                    const double dx = px - s.mean2d.x(), dy = py - s.mean2d.y();
                    sg.mean2d.x() += d_power * (s.conic[0] * dx + s.conic[1] * dy);
                    sg.mean2d.y() += d_power * (s.conic[1] * dx + s.conic[2] * dy);
                    sg.conic[0] += d_power * (-0.5 * dx * dx);
                    sg.conic[1] += d_power * (-dx * dy);
                    sg.conic[2] += d_power * (-0.5 * dy * dy);
                }
            }
        partial[t] = std::move(local);
    });

    std::vector<SplatGrad> total(rec.splats.size());
    for (int t = 0; t < n_tiles; ++t) {
        const auto& list = rec.tile_lists[t];
        for (std::size_t j = 0; j < list.size(); ++j) total[list[j]] += partial[t][j];
    }
    for (std::size_t k = 0; k < rec.splats.size(); ++k) {
        const auto& s = rec.splats[k];
        detail::backprop_splat(cloud.get(s.id), s, total[k], rec.camera, cloud.grad(s.id));
    }
}

// ---------------------------------------------------------------------------
// Persistence: "GSI3GAU1", u32 version, u64 count, then 14 little-endian float64
// per Gaussian in ParamLayout order.

inline constexpr std::uint32_t kCloudCheckpointVersion = 1;

inline void save_cloud(const GaussianCloud& cloud, const std::filesystem::path& path) {
    BinaryWriter out(path);
    out.magic("GSI3GAU1");
    out.u32(kCloudCheckpointVersion);
    out.u64(cloud.size());
    out.f64s(cloud.params());
    out.finish();
}

inline GaussianCloud load_cloud(const std::filesystem::path& path) {
    BinaryReader in(path);
    in.expect_magic("GSI3GAU1");
    if (in.u32() != kCloudCheckpointVersion) throw CheckpointError(path.string() + ": unsupported version");
    const std::uint64_t n = in.u64();
    if (n > (1ull << 28)) throw CheckpointError(path.string() + ": implausible Gaussian count");
    GaussianCloud cloud;
    for (std::uint64_t i = 0; i < n; ++i) cloud.push_back(Gaussian{});
    in.f64s(cloud.params());
    in.expect_end();
    cloud.touch();
    return cloud;
}

/// ASCII PLY with x, y, z vertex properties.
inline void write_ply(std::span<const Eigen::Vector3d> points, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw CheckpointError(path.string() + ": cannot open for writing");
    out << "ply\nformat ascii 1.0\nelement vertex " << points.size()
        << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
    char line[128];
    for (const auto& p : points) {
        std::snprintf(line, sizeof line, "%.17g %.17g %.17g\n", p.x(), p.y(), p.z());
        out << line;
    }
    if (!out) throw CheckpointError(path.string() + ": write failed");
}

/// Reads the vertex positions of an ASCII PLY written by write_ply (or any ASCII PLY
/// whose first three vertex properties are x, y, z).
inline std::vector<Eigen::Vector3d> read_ply(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CheckpointError(path.string() + ": cannot open");
    std::string line;
    std::getline(in, line);
    if (line != "ply") throw CheckpointError(path.string() + ": not a PLY file");
    std::size_t count = 0;
    int props = 0;
    bool ascii = false;
    while (std::getline(in, line) && line != "end_header") {
        if (line.rfind("format ascii", 0) == 0) ascii = true;
        else if (line.rfind("element vertex ", 0) == 0) count = std::stoull(line.substr(15));
        else if (line.rfind("property ", 0) == 0) ++props;
    }
    if (!ascii || props < 3) throw CheckpointError(path.string() + ": unsupported PLY layout");
    std::vector<Eigen::Vector3d> pts(count);
    for (auto& p : pts) {
        if (!(in >> p.x() >> p.y() >> p.z())) throw CheckpointError(path.string() + ": truncated PLY");
        for (int k = 3; k < props; ++k) {
            double skip;
            in >> skip;
        }
    }
    return pts;
}

} // namespace gsi3
