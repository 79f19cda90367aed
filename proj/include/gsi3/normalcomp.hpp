#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "gsi3/image.hpp"

namespace gsi3 {

/// Weights of the combined objective plus the gate threshold.
struct LossWeights {
    double lambda = 0.2;     // SSIM share of the photometric term
    double threshold = 0.1;  // per-pixel photometric loss above which normals are supervised
    double w_illum = 1.0;
    double w_normal = 0.15;
    double w_gradient = 0.0015;
    double w_mvs = 0.03;

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("LossWeights: lambda outside [0,1]");
        if (threshold < 0.0 || w_illum < 0.0 || w_normal < 0.0 || w_gradient < 0.0 || w_mvs < 0.0)
            throw std::invalid_argument("LossWeights: weights must be non-negative");
    }
};

/// Pixels whose photometric loss exceeds the threshold.
class GateMask {
public:
    GateMask() = default;
    GateMask(int width, int height) : width_(width), height_(height), bits_(static_cast<std::size_t>(width) * height, 0) {}

    [[nodiscard]] int width() const noexcept { return width_; }
    [[nodiscard]] int height() const noexcept { return height_; }
    [[nodiscard]] bool operator()(int x, int y) const noexcept {
        return bits_[static_cast<std::size_t>(y) * width_ + x] != 0;
    }
    void set(int x, int y, bool v) { bits_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }
    [[nodiscard]] std::size_t count() const noexcept {
        std::size_t n = 0;
        for (auto b : bits_) n += b;
        return n;
    }
    [[nodiscard]] double fraction() const noexcept {
        return bits_.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(bits_.size());
    }

private:
    int width_ = 0, height_ = 0;
    std::vector<std::uint8_t> bits_;
};

/// Strict comparison: a pixel whose loss equals the threshold is not gated.
inline GateMask gate(const ScalarMap& per_pixel_loss, double threshold) {
    GateMask m(per_pixel_loss.width(), per_pixel_loss.height());
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) m.set(x, y, per_pixel_loss(x, y) > threshold);
    return m;
}

// ---------------------------------------------------------------------------
// Gated normal loss

struct NormalLossResult {
    double value = 0.0;
    std::size_t used = 0;     // gated pixels valid in both maps
    std::size_t skipped = 0;  // gated pixels invalid in either map
};

/// Mean L1 distance between predicted and reference normals over gated, valid pixels.
inline NormalLossResult normal_loss(const NormalMap& pred, const NormalMap& ref, const GateMask& mask) {
    require_same_shape(pred, ref, "normal_loss");
    require_same_shape(pred, mask, "normal_loss");
    NormalLossResult r;
    double sum = 0.0;
    for (int y = 0; y < pred.height(); ++y)
        for (int x = 0; x < pred.width(); ++x) {
            if (!mask(x, y)) continue;
            if (!pred.valid(x, y) || !ref.valid(x, y)) {
                ++r.skipped;
                continue;
            }
            sum += (pred.at(x, y) - ref.at(x, y)).cwiseAbs().sum();
            ++r.used;
        }
    r.value = r.used ? sum / static_cast<double>(r.used) : 0.0;
    return r;
}

/// Adds scale * d(normal_loss)/d(pred) into grad (3 channels per pixel).
inline void normal_loss_backward(const NormalMap& pred, const NormalMap& ref, const GateMask& mask,
                                 double scale, Buffer<3>& grad) {
    const auto r = normal_loss(pred, ref, mask);
    if (r.used == 0) return;
    const double k = scale / static_cast<double>(r.used);
    for (int y = 0; y < pred.height(); ++y)
        for (int x = 0; x < pred.width(); ++x) {
            if (!mask(x, y) || !pred.valid(x, y) || !ref.valid(x, y)) continue;
            const Eigen::Vector3d d = pred.at(x, y) - ref.at(x, y);
            for (int c = 0; c < 3; ++c) grad(x, y, c) += k * sign0(d[c]);
        }
}

// ---------------------------------------------------------------------------
// Normal-gradient consistency

/// Forward differences of a normal map. dx/dy hold 3 components per pixel; a site is
/// excluded when the pixel or a neighbor its stencil reads is invalid.
struct NormalGradientField {
    Buffer<3> dx, dy;
    std::vector<std::uint8_t> excluded;

    [[nodiscard]] bool is_excluded(int x, int y) const {
        return excluded[static_cast<std::size_t>(y) * dx.width() + x] != 0;
    }
};

inline NormalGradientField normal_gradient(const NormalMap& n) {
    const int W = n.width(), H = n.height();
    NormalGradientField g{Buffer<3>(W, H), Buffer<3>(W, H), std::vector<std::uint8_t>(n.pixels(), 0)};
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * W + x;
            if (!n.valid(x, y)) {
                g.excluded[i] = 1;
                continue;
            }
            const bool has_right = x + 1 < W;
            const bool has_down = y + 1 < H;
            if ((has_right && !n.valid(x + 1, y)) || (has_down && !n.valid(x, y + 1))) {
                g.excluded[i] = 1;
                continue;
            }
            for (int c = 0; c < 3; ++c) {
                const double v = n.vectors()(x, y, c);
                g.dx(x, y, c) = has_right ? n.vectors()(x + 1, y, c) - v : 0.0;
                g.dy(x, y, c) = has_down ? n.vectors()(x, y + 1, c) - v : 0.0;
            }
        }
    return g;
}

struct GradientLossResult {
    double value = 0.0;
    std::size_t used = 0;
};

/// Mean L1 difference of the six forward-difference components over sites valid in
/// both maps. A non-empty mask restricts the sites to gated pixels.
inline GradientLossResult gradient_loss(const NormalMap& pred, const NormalMap& ref,
                                        const GateMask* mask = nullptr) {
    require_same_shape(pred, ref, "gradient_loss");
    const auto gp = normal_gradient(pred);
    const auto gr = normal_gradient(ref);
    GradientLossResult r;
    double sum = 0.0;
    for (int y = 0; y < pred.height(); ++y)
        for (int x = 0; x < pred.width(); ++x) {
            if (gp.is_excluded(x, y) || gr.is_excluded(x, y)) continue;
            if (mask && !(*mask)(x, y)) continue;
            for (int c = 0; c < 3; ++c)
                sum += std::abs(gp.dx(x, y, c) - gr.dx(x, y, c)) + std::abs(gp.dy(x, y, c) - gr.dy(x, y, c));
            ++r.used;
        }
    r.value = r.used ? sum / static_cast<double>(r.used) : 0.0;
    return r;
}

/// Adds scale * d(gradient_loss)/d(pred) into grad, through the forward-difference stencil.
inline void gradient_loss_backward(const NormalMap& pred, const NormalMap& ref, double scale,
                                   Buffer<3>& grad, const GateMask* mask = nullptr) {
    const auto gp = normal_gradient(pred);
    const auto gr = normal_gradient(ref);
    const auto r = gradient_loss(pred, ref, mask);
    if (r.used == 0) return;
    const double k = scale / static_cast<double>(r.used);
    const int W = pred.width(), H = pred.height();
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (gp.is_excluded(x, y) || gr.is_excluded(x, y)) continue;
            if (mask && !(*mask)(x, y)) continue;
            for (int c = 0; c < 3; ++c) {
                if (x + 1 < W) {
                    const double s = k * sign0(gp.dx(x, y, c) - gr.dx(x, y, c));
                    grad(x + 1, y, c) += s;
                    grad(x, y, c) -= s;
                }
                if (y + 1 < H) {
                    const double s = k * sign0(gp.dy(x, y, c) - gr.dy(x, y, c));
                    grad(x, y + 1, c) += s;
                    grad(x, y, c) -= s;
                }
            }
        }
}

// ---------------------------------------------------------------------------

/// Weighted sum of the four objective terms. Every term is non-negative by construction.
inline double total_loss(double l_illum, double l_normal, double l_gradient, double l_mvs,
                         const LossWeights& w = {}) {
    for (double v : {l_illum, l_normal, l_gradient, l_mvs})
        if (!(v >= 0.0) || !std::isfinite(v))
            throw std::invalid_argument("total_loss: components must be finite and non-negative");
    return w.w_illum * l_illum + w.w_normal * l_normal + w.w_gradient * l_gradient + w.w_mvs * l_mvs;
}

/// Source of per-pixel reference normals in camera space for a training view.
class ReferenceNormalProvider {
public:
    virtual ~ReferenceNormalProvider() = default;
    [[nodiscard]] virtual NormalMap normals(std::size_t view) const = 0;
};

} // namespace gsi3
