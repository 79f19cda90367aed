#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "gsi3/camera.hpp"
#include "gsi3/image.hpp"
#include "gsi3/splat.hpp"

namespace gsi3 {

inline constexpr double kOcclusionGap = 0.2;

/// A depth map together with the pixels where it is defined. Camera-space normals,
/// when present, let the lookup skip points that face away from the other view.
struct DepthObservation {
    ScalarMap depth;
    std::vector<std::uint8_t> valid;
    std::optional<Buffer<3>> normals;

    [[nodiscard]] bool is_valid(int x, int y) const {
        return valid[static_cast<std::size_t>(y) * depth.width() + x] != 0;
    }

    /// Rendered depth, valid where alpha > 0.5.
    static DepthObservation from_render(const RenderOutput& r) {
        DepthObservation o{r.depth, std::vector<std::uint8_t>(r.depth.pixels(), 0), r.normal.vectors()};
        for (std::size_t i = 0; i < o.valid.size(); ++i)
            o.valid[i] = (r.alpha.data()[i] > 0.5 && r.depth.data()[i] > 0.0 && r.normal.validity()[i]) ? 1 : 0;
        return o;
    }

    /// Depth valid wherever the normal map is valid (ground-truth renders).
    static DepthObservation from_maps(const ScalarMap& depth, const NormalMap& normals) {
        return DepthObservation{depth, normals.validity(), normals.vectors()};
    }
};

struct MvsResult {
    double value = 0.0;
    std::size_t tested = 0;    // pixels contributing to the mean
    std::size_t rejected = 0;  // occlusion rejections: large gaps and back-facing points
    bool informative = false;  // false when no pixel was mutually visible
};

namespace detail {

/// Reprojection of one source pixel into the other view. Inverse depth is interpolated
/// bilinearly, which is exact for planar surfaces.
struct Reprojection {
    bool ok = false;
    bool back_facing = false;
    double residual = 0.0;  // |D_b - z_b| / z_b
    // Partials for the backward pass.
    double d_depth_a = 0.0;
    std::array<int, 4> bx{}, by{};
    std::array<double, 4> d_depth_b{};
};

inline Reprojection reproject(const DepthObservation& a, const Camera& ca, const DepthObservation& b,
                              const Camera& cb, int x, int y, bool with_grad) {
    Reprojection r;
    const double da = a.depth(x, y);
    const Eigen::Vector3d ray = ca.pixel_ray(x, y);
    const Eigen::Matrix3d rel = cb.rotation * ca.rotation.transpose();
    const Eigen::Vector3d pb = rel * (da * ray - ca.translation) + cb.translation;
    const double zb = pb.z();
    if (!(zb > kNearPlane)) return r;
    if (a.normals) {
        const Eigen::Vector3d n((*a.normals)(x, y, 0), (*a.normals)(x, y, 1), (*a.normals)(x, y, 2));
        if ((rel * n).dot(pb) >= 0.0) {
            r.back_facing = true;
            return r;
        }
    }
    const double u = cb.fx * pb.x() / zb + cb.cx - 0.5;
    const double v = cb.fy * pb.y() / zb + cb.cy - 0.5;
    const int W = b.depth.width(), H = b.depth.height();
    if (!(u >= 0.0 && v >= 0.0 && u <= W - 1 && v <= H - 1)) return r;
    const int x0 = std::min(static_cast<int>(std::floor(u)), std::max(W - 2, 0));
    const int y0 = std::min(static_cast<int>(std::floor(v)), std::max(H - 2, 0));
    const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    const double tx = u - x0, ty = v - y0;
    r.bx = {x0, x1, x0, x1};
    r.by = {y0, y0, y1, y1};
    const std::array<double, 4> wts{(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
    double inv = 0.0;
    std::array<double, 4> d{};
    for (int k = 0; k < 4; ++k) {
        if (!b.is_valid(r.bx[k], r.by[k])) return r;
        d[k] = b.depth(r.bx[k], r.by[k]);
        if (!(d[k] > 0.0)) return r;
        inv += wts[k] / d[k];
    }
    const double Db = 1.0 / inv;
    const double diff = Db - zb;
    r.residual = std::abs(diff) / zb;
    r.ok = true;
    if (!with_grad) return r;

    const double s = sign0(diff);
    const double dr_dD = s / zb;
    const double dr_dz = -s / zb - std::abs(diff) / (zb * zb);
    for (int k = 0; k < 4; ++k) r.d_depth_b[k] = dr_dD * Db * Db * wts[k] / (d[k] * d[k]);

    // Source depth moves the point along the ray: position, projection and z all change.
    const Eigen::Vector3d e = rel * ray;
    const double du = cb.fx * (e.x() * zb - pb.x() * e.z()) / (zb * zb);
    const double dv = cb.fy * (e.y() * zb - pb.y() * e.z()) / (zb * zb);
    const double dinv_du = ((1 - ty) * (1 / d[1] - 1 / d[0]) + ty * (1 / d[3] - 1 / d[2]));
    const double dinv_dv = ((1 - tx) * (1 / d[2] - 1 / d[0]) + tx * (1 / d[3] - 1 / d[1]));
    const double dD_dda = -Db * Db * (dinv_du * du + dinv_dv * dv);
    r.d_depth_a = dr_dD * dD_dda + dr_dz * e.z();
    return r;
}

} // namespace detail

/// Depth-reprojection consistency of view a against view b: mean relative depth
/// disagreement over pixels of a that land on valid pixels of b, with occlusion
/// rejection above a relative gap of 0.2.
inline MvsResult mvs_loss(const DepthObservation& a, const Camera& ca, const DepthObservation& b,
                          const Camera& cb) {
    MvsResult res;
    double sum = 0.0;
    for (int y = 0; y < a.depth.height(); ++y)
        for (int x = 0; x < a.depth.width(); ++x) {
            if (!a.is_valid(x, y)) continue;
            const auto r = detail::reproject(a, ca, b, cb, x, y, false);
            res.rejected += r.back_facing;
            if (!r.ok) continue;
            if (r.residual > kOcclusionGap) {
                ++res.rejected;
                continue;
            }
            sum += r.residual;
            ++res.tested;
        }
    res.informative = res.tested > 0;
    res.value = res.tested ? sum / static_cast<double>(res.tested) : 0.0;
    return res;
}

inline MvsResult mvs_loss(const RenderOutput& a, const Camera& ca, const RenderOutput& b, const Camera& cb) {
    return mvs_loss(DepthObservation::from_render(a), ca, DepthObservation::from_render(b), cb);
}

struct MvsGrad {
    ScalarMap depth_a, depth_b;
};

/// Gradients of scale * mvs_loss with respect to both depth maps.
inline MvsGrad mvs_loss_backward(const DepthObservation& a, const Camera& ca, const DepthObservation& b,
                                 const Camera& cb, double scale) {
    MvsGrad g{ScalarMap(a.depth.width(), a.depth.height()), ScalarMap(b.depth.width(), b.depth.height())};
    const auto res = mvs_loss(a, ca, b, cb);
    if (res.tested == 0) return g;
    const double k = scale / static_cast<double>(res.tested);
    for (int y = 0; y < a.depth.height(); ++y)
        for (int x = 0; x < a.depth.width(); ++x) {
            if (!a.is_valid(x, y)) continue;
            const auto r = detail::reproject(a, ca, b, cb, x, y, true);
            if (!r.ok || r.residual > kOcclusionGap) continue;
            g.depth_a(x, y) += k * r.d_depth_a;
            for (int i = 0; i < 4; ++i) g.depth_b(r.bx[i], r.by[i]) += k * r.d_depth_b[i];
        }
    return g;
}

} // namespace gsi3
