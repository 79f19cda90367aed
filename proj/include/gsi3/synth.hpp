#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gsi3/camera.hpp"
#include "gsi3/image.hpp"
#include "gsi3/image_io.hpp"
#include "gsi3/normalcomp.hpp"
#include "gsi3/random.hpp"

namespace gsi3 {

enum class SceneKind { sphere, plane, box };

inline const char* to_string(SceneKind k) {
    switch (k) {
    case SceneKind::sphere: return "sphere";
    case SceneKind::plane: return "plane";
    case SceneKind::box: return "box";
    }
    return "?";
}

inline SceneKind parse_scene_kind(const std::string& s) {
    if (s == "sphere") return SceneKind::sphere;
    if (s == "plane") return SceneKind::plane;
    if (s == "box") return SceneKind::box;
    throw std::invalid_argument("unknown scene kind '" + s + "'");
}

/// Procedural albedo: a checkerboard (or stripes) alternating two colors.
struct Texture {
    double frequency = 6.0;
    bool stripes = false;
    Eigen::Vector3d albedo_a{0.75, 0.4, 0.2};
    Eigen::Vector3d albedo_b{0.2, 0.45, 0.7};
};

struct Light {
    Eigen::Vector3d direction{0.4, -0.3, 0.866};  // towards the light
    double ambient = 0.3;
};

/// Analytic ground-truth scene centered at the origin.
///   sphere: radius = extent
///   plane:  square |x|,|y| <= extent in z = 0
///   box:    cube of half-size 0.6 * extent
struct SceneSpec {
    SceneKind kind = SceneKind::sphere;
    double extent = 1.0;
    Texture texture;
    Light light;
    std::uint64_t seed = 0;
    std::vector<Eigen::Vector3d> gt_points;

    [[nodiscard]] double box_half() const { return 0.6 * extent; }
};

struct SurfaceHit {
    double t = 0.0;
    Eigen::Vector3d point;
    Eigen::Vector3d normal;  // outward, world space
};

/// Nearest intersection of the ray origin + t * dir (t > 0) with the scene surface.
inline std::optional<SurfaceHit> intersect(const SceneSpec& s, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
    switch (s.kind) {
    case SceneKind::sphere: {
        const double r = s.extent;
        const double b = o.dot(d), c = o.squaredNorm() - r * r, a = d.squaredNorm();
        const double disc = b * b - a * c;
        if (disc < 0.0) return std::nullopt;
        const double sq = std::sqrt(disc);
        double t = (-b - sq) / a;
        if (t <= 0.0) t = (-b + sq) / a;
        if (t <= 0.0) return std::nullopt;
        const Eigen::Vector3d p = o + t * d;
        return SurfaceHit{t, p, p / r};
    }
    case SceneKind::plane: {
        if (d.z() == 0.0) return std::nullopt;
        const double t = -o.z() / d.z();
        if (t <= 0.0) return std::nullopt;
        Eigen::Vector3d p = o + t * d;
        if (std::abs(p.x()) > s.extent || std::abs(p.y()) > s.extent) return std::nullopt;
        p.z() = 0.0;
        return SurfaceHit{t, p, Eigen::Vector3d::UnitZ()};
    }
    case SceneKind::box: {
        const double h = s.box_half();
        double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
        int axis = -1;
        double side = 0.0;
        for (int k = 0; k < 3; ++k) {
            if (d[k] == 0.0) {
                if (std::abs(o[k]) > h) return std::nullopt;
                continue;
            }
            double ta = (-h - o[k]) / d[k], tb = (h - o[k]) / d[k];
            double sa = -1.0;
            if (ta > tb) {
                std::swap(ta, tb);
                sa = 1.0;
            }
            if (ta > t0) {
                t0 = ta;
                axis = k;
                side = sa;
            }
            t1 = std::min(t1, tb);
        }
        if (t0 > t1 || t0 <= 0.0 || axis < 0) return std::nullopt;
        Eigen::Vector3d p = o + t0 * d;
        p[axis] = side * h;
        Eigen::Vector3d n = Eigen::Vector3d::Zero();
        n[axis] = side;
        return SurfaceHit{t0, p, n};
    }
    }
    return std::nullopt;
}

/// Albedo of the procedural texture at a surface point.
inline Eigen::Vector3d albedo(const SceneSpec& s, const Eigen::Vector3d& p) {
    const double f = s.texture.frequency;
    long cells = 0;
    switch (s.kind) {
    case SceneKind::sphere: {
        const Eigen::Vector3d u = p / s.extent;
        const double theta = std::acos(std::clamp(u.z(), -1.0, 1.0));
        const double phi = std::atan2(u.y(), u.x()) + std::numbers::pi;
        cells = static_cast<long>(std::floor(f * phi / std::numbers::pi));
        if (!s.texture.stripes) cells += static_cast<long>(std::floor(f * theta / std::numbers::pi));
        break;
    }
    case SceneKind::plane: {
        const double e = s.extent;
        cells = static_cast<long>(std::floor(f * (p.x() + e) / (2 * e)));
        if (!s.texture.stripes) cells += static_cast<long>(std::floor(f * (p.y() + e) / (2 * e)));
        break;
    }
    case SceneKind::box: {
        const double h = s.box_half();
        // Offset by a quarter cell so face boundaries do not coincide with cell edges.
        for (int k = 0; k < (s.texture.stripes ? 1 : 3); ++k)
            cells += static_cast<long>(std::floor(f * (p[k] + h) / (2 * h) + 0.25));
        break;
    }
    }
    return (cells % 2 == 0) ? s.texture.albedo_a : s.texture.albedo_b;
}

/// Dense ground-truth surface samples; every point lies on the analytic surface.
/// About `count` samples; the plane and box round it to full square grids per face.
inline std::vector<Eigen::Vector3d> surface_points(const SceneSpec& s, int count) {
    std::vector<Eigen::Vector3d> pts;
    switch (s.kind) {
    case SceneKind::sphere: {
        const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
        for (int i = 0; i < count; ++i) {
            const double z = 1.0 - 2.0 * (i + 0.5) / count;
            const double r = std::sqrt(1.0 - z * z);
            const double phi = golden * i;
            pts.emplace_back(s.extent * r * std::cos(phi), s.extent * r * std::sin(phi), s.extent * z);
        }
        break;
    }
    case SceneKind::plane: {
        const int n = std::max(2, static_cast<int>(std::lround(std::sqrt(count))));
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i)
                pts.emplace_back(s.extent * (-1.0 + 2.0 * (i + 0.5) / n), s.extent * (-1.0 + 2.0 * (j + 0.5) / n), 0.0);
        break;
    }
    case SceneKind::box: {
        const double h = s.box_half();
        const int n = std::max(2, static_cast<int>(std::lround(std::sqrt(count / 6.0))));
        for (int axis = 0; axis < 3; ++axis)
            for (double side : {-1.0, 1.0})
                for (int j = 0; j < n; ++j)
                    for (int i = 0; i < n; ++i) {
                        Eigen::Vector3d p;
                        p[axis] = side * h;
                        p[(axis + 1) % 3] = h * (-1.0 + 2.0 * (i + 0.5) / n);
                        p[(axis + 2) % 3] = h * (-1.0 + 2.0 * (j + 0.5) / n);
                        pts.push_back(p);
                    }
        break;
    }
    }
    return pts;
}

/// Signed distance-like residual of a point from the analytic surface (0 on the surface).
inline double surface_residual(const SceneSpec& s, const Eigen::Vector3d& p) {
    switch (s.kind) {
    case SceneKind::sphere: return std::abs(p.norm() - s.extent);
    case SceneKind::plane:
        return std::abs(p.z()) + std::max(0.0, std::max(std::abs(p.x()), std::abs(p.y())) - s.extent);
    case SceneKind::box: {
        const double h = s.box_half();
        const Eigen::Vector3d q = p.cwiseAbs() - Eigen::Vector3d::Constant(h);
        const double outside = q.cwiseMax(0.0).norm();
        return outside > 0.0 ? outside : -q.maxCoeff();
    }
    }
    return 0.0;
}

inline SceneSpec make_scene(SceneKind kind, double extent = 1.0, std::uint64_t seed = 0, int gt_points = 4000) {
    if (!(extent > 0.0)) throw std::invalid_argument("make_scene: extent must be positive");
    SceneSpec s;
    s.kind = kind;
    s.extent = extent;
    s.seed = seed;
    s.light.direction.normalize();
    s.gt_points = surface_points(s, gt_points);
    return s;
}

// ---------------------------------------------------------------------------
// Ground-truth rendering

struct GroundTruthView {
    ImageRGB image;
    NormalMap normals;  // camera space, facing the camera; background invalid
    ScalarMap depth;    // camera-space z; 0 on background
};

/// Analytic ray casting with Lambertian shading: albedo * (ambient + max(0, n.l)).
inline GroundTruthView render_gt(const SceneSpec& s, const Camera& cam) {
    GroundTruthView v{ImageRGB(cam.width, cam.height), NormalMap(cam.width, cam.height),
                      ScalarMap(cam.width, cam.height)};
    const Eigen::Vector3d origin = cam.center();
    const Eigen::Vector3d l = s.light.direction.normalized();
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            const Eigen::Vector3d ray_cam = cam.pixel_ray(x, y);
            const Eigen::Vector3d dir = cam.rotation.transpose() * ray_cam;
            const auto hit = intersect(s, origin, dir);
            if (!hit) continue;
            Eigen::Vector3d n = hit->normal;
            if (n.dot(dir) > 0.0) n = -n;  // two-sided surfaces face the viewer
            const Eigen::Vector3d shade =
                albedo(s, hit->point) * (s.light.ambient + std::max(0.0, n.dot(l)));
            for (int c = 0; c < 3; ++c) v.image(x, y, c) = std::clamp(shade[c], 0.0, 1.0);
            v.normals.set(x, y, cam.rotation * n, true);
            v.depth(x, y) = cam.to_camera(hit->point).z();
        }
    return v;
}

/// Reference normals for one view: the analytic normal map, optionally corrupted by
/// angular noise of standard deviation `noise_sigma` radians.
inline NormalMap reference_normals(const SceneSpec& s, const Camera& cam, double noise_sigma = 0.0,
                                   std::uint64_t noise_seed = 0) {
    NormalMap n = render_gt(s, cam).normals;
    if (noise_sigma <= 0.0) return n;
    Rng rng({s.seed, noise_seed, 0x6e6f726dULL});
    for (int y = 0; y < n.height(); ++y)
        for (int x = 0; x < n.width(); ++x) {
            if (!n.valid(x, y)) continue;
            const Eigen::Vector3d v = n.at(x, y);
            Eigen::Vector3d t = v.unitOrthogonal();
            const Eigen::Vector3d b = v.cross(t);
            const Eigen::Vector3d noisy = v + noise_sigma * (rng.normal() * t + rng.normal() * b);
            n.set(x, y, noisy.normalized(), true);
        }
    return n;
}

/// Reference-normal provider backed by the analytic scene.
class OracleNormalProvider final : public ReferenceNormalProvider {
public:
    OracleNormalProvider(SceneSpec scene, std::vector<Camera> cameras, double noise_sigma = 0.0)
        : scene_(std::move(scene)), cameras_(std::move(cameras)), noise_sigma_(noise_sigma) {}

    [[nodiscard]] NormalMap normals(std::size_t view) const override {
        return reference_normals(scene_, cameras_.at(view), noise_sigma_, view);
    }

private:
    SceneSpec scene_;
    std::vector<Camera> cameras_;
    double noise_sigma_;
};

// ---------------------------------------------------------------------------
// Cameras

/// Cameras at distance 3 * extent looking at the origin. Sphere scenes use a spiral over
/// the upper hemisphere (equal-area elevation steps, about sqrt(n)/2 turns) so that
/// consecutive views are neighbors; plane and box scenes use a ring at fixed elevation.
inline std::vector<Camera> make_cameras(const SceneSpec& s, int n_views, int width, int height) {
    if (n_views < 2) throw std::invalid_argument("make_cameras: at least two views are required");
    const double radius = 3.0 * s.extent;
    const double focal = 0.8 * width;
    const int turns = std::max(1, static_cast<int>(std::lround(std::sqrt(n_views) / 2.0)));
    std::vector<Camera> cams;
    cams.reserve(n_views);
    for (int i = 0; i < n_views; ++i) {
        double azimuth = 2.0 * std::numbers::pi * i / n_views;
        double elevation = 0.0;
        switch (s.kind) {
        case SceneKind::sphere:
            elevation = std::asin((i + 0.5) / n_views);
            azimuth = std::fmod(2.0 * std::numbers::pi * turns * i / n_views, 2.0 * std::numbers::pi);
            break;
        case SceneKind::plane: elevation = std::numbers::pi / 4.0; break;
        case SceneKind::box: elevation = std::numbers::pi / 6.0; break;
        }
        const Eigen::Vector3d eye = radius * Eigen::Vector3d(std::cos(elevation) * std::cos(azimuth),
                                                             std::cos(elevation) * std::sin(azimuth),
                                                             std::sin(elevation));
        cams.push_back(Camera::look_at(eye, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitZ(), width, height, focal));
    }
    return cams;
}

// ---------------------------------------------------------------------------
// Illumination perturbation

struct PerturbSpec {
    double brightness_lo = 0.5, brightness_hi = 1.5;
    double contrast_lo = 0.5, contrast_hi = 1.5;
    std::vector<double> gamma_choices{0.1, 0.8};
    std::uint64_t seed = 0;

    void validate() const {
        if (!(brightness_lo > 0.0 && brightness_lo <= brightness_hi && contrast_lo > 0.0 && contrast_lo <= contrast_hi))
            throw std::invalid_argument("PerturbSpec: need 0 < lo <= hi");
        if (gamma_choices.empty() || std::any_of(gamma_choices.begin(), gamma_choices.end(), [](double g) { return !(g > 0.0); }))
            throw std::invalid_argument("PerturbSpec: gamma choices must be positive");
    }
};

struct PerturbDraw {
    double brightness = 1.0;
    double contrast = 1.0;
    double gamma = 1.0;
};

/// Per-view factors, a pure function of (spec.seed, view).
inline PerturbDraw draw_perturbation(const PerturbSpec& spec, std::uint64_t view) {
    spec.validate();
    Rng rng({spec.seed, view, 0x70657274ULL});
    PerturbDraw d;
    d.brightness = rng.uniform(spec.brightness_lo, spec.brightness_hi);
    d.contrast = rng.uniform(spec.contrast_lo, spec.contrast_hi);
    d.gamma = spec.gamma_choices[rng.below(spec.gamma_choices.size())];
    return d;
}

/// clamp(contrast * (brightness * v - 0.5) + 0.5, 0, 1) ^ gamma, per channel.
inline ImageRGB apply_perturbation(const ImageRGB& img, const PerturbDraw& d) {
    ImageRGB out(img.width(), img.height());
    for (std::size_t i = 0; i < img.data().size(); ++i) {
        const double v = std::clamp(d.contrast * (d.brightness * img.data()[i] - 0.5) + 0.5, 0.0, 1.0);
        out.data()[i] = std::pow(v, d.gamma);
    }
    return out;
}

inline ImageRGB perturb(const ImageRGB& img, const PerturbSpec& spec, std::uint64_t view) {
    return apply_perturbation(img, draw_perturbation(spec, view));
}

/// Training target of one view: the perturbation applied to the object while the
/// empty background stays black.
inline ImageRGB perturbed_target(const GroundTruthView& gt, const PerturbDraw& d) {
    ImageRGB out = apply_perturbation(gt.image, d);
    for (int y = 0; y < out.height(); ++y)
        for (int x = 0; x < out.width(); ++x)
            if (!gt.normals.valid(x, y))
                for (int c = 0; c < 3; ++c) out(x, y, c) = 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Dataset export

/// Writes per-view images, normals and depth plus a line-oriented manifest:
///   view <i> <w> <h> <fx> <fy> <cx> <cy> <r00..r22> <t0 t1 t2> <brightness> <contrast> <gamma>
inline void write_dataset(const SceneSpec& s, const std::vector<Camera>& cams, const PerturbSpec& spec,
                          const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
    manifest << "# gsi3 dataset v1\n";
    manifest << "scene " << to_string(s.kind) << ' ' << s.extent << ' ' << cams.size() << '\n';
    manifest.precision(17);
    for (std::size_t v = 0; v < cams.size(); ++v) {
        const auto gt = render_gt(s, cams[v]);
        const auto draw = draw_perturbation(spec, v);
        const auto perturbed = perturbed_target(gt, draw);
        const std::string stem = "view_" + std::to_string(v);
        write_image(gt.image, dir / (stem + "_clean.pfm"));
        write_image(perturbed, dir / (stem + "_perturbed.pfm"));
        write_image(perturbed, dir / (stem + "_perturbed.ppm"));
        write_image(gt.normals.vectors(), dir / (stem + "_normals.pfm"));
        write_scalar_map(gt.depth, dir / (stem + "_depth.pfm"));
        const auto& c = cams[v];
        manifest << "view " << v << ' ' << c.width << ' ' << c.height << ' ' << c.fx << ' ' << c.fy << ' ' << c.cx
                 << ' ' << c.cy;
        for (int r = 0; r < 3; ++r)
            for (int k = 0; k < 3; ++k) manifest << ' ' << c.rotation(r, k);
        for (int k = 0; k < 3; ++k) manifest << ' ' << c.translation[k];
        manifest << ' ' << draw.brightness << ' ' << draw.contrast << ' ' << draw.gamma << '\n';
    }
    if (!manifest) throw std::runtime_error("manifest write failed");
}

} // namespace gsi3
