#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace gsi3 {

/// Dense row-major interleaved buffer of `Channels` doubles per pixel.
template <int Channels>
class Buffer {
    static_assert(Channels >= 1);

public:
    static constexpr int channels = Channels;

    Buffer() = default;

    Buffer(int width, int height, double fill = 0.0) : width_(width), height_(height) {
        if (width < 1 || height < 1) {
            throw std::invalid_argument("image dimensions must be at least 1x1, got " +
                                        std::to_string(width) + "x" + std::to_string(height));
        }
        data_.assign(static_cast<std::size_t>(width) * height * Channels, fill);
    }

    [[nodiscard]] int width() const noexcept { return width_; }
    [[nodiscard]] int height() const noexcept { return height_; }
    [[nodiscard]] std::size_t pixels() const noexcept {
        return static_cast<std::size_t>(width_) * height_;
    }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    [[nodiscard]] double& operator()(int x, int y, int c = 0) noexcept {
        return data_[(static_cast<std::size_t>(y) * width_ + x) * Channels + c];
    }
    [[nodiscard]] double operator()(int x, int y, int c = 0) const noexcept {
        return data_[(static_cast<std::size_t>(y) * width_ + x) * Channels + c];
    }

    [[nodiscard]] std::span<double> data() & noexcept { return data_; }
    [[nodiscard]] std::span<const double> data() const& noexcept { return data_; }
    // A span into a temporary would dangle.
    std::span<const double> data() && = delete;
    [[nodiscard]] std::vector<double>& storage() noexcept { return data_; }
    [[nodiscard]] const std::vector<double>& storage() const noexcept { return data_; }

    [[nodiscard]] bool same_shape(const auto& other) const noexcept {
        return width_ == other.width() && height_ == other.height();
    }

    [[nodiscard]] bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Buffer&, const Buffer&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<double> data_;
};

using ImageRGB = Buffer<3>;
using ScalarMap = Buffer<1>;

/// Per-pixel 3-vectors with a validity flag (background pixels are invalid).
class NormalMap {
public:
    NormalMap() = default;
    NormalMap(int width, int height) : vec_(width, height), valid_(vec_.pixels(), 0) {}

    [[nodiscard]] int width() const noexcept { return vec_.width(); }
    [[nodiscard]] int height() const noexcept { return vec_.height(); }
    [[nodiscard]] std::size_t pixels() const noexcept { return vec_.pixels(); }

    [[nodiscard]] Eigen::Vector3d at(int x, int y) const {
        return {vec_(x, y, 0), vec_(x, y, 1), vec_(x, y, 2)};
    }
    void set(int x, int y, const Eigen::Vector3d& n, bool valid = true) {
        vec_(x, y, 0) = n.x();
        vec_(x, y, 1) = n.y();
        vec_(x, y, 2) = n.z();
        valid_[static_cast<std::size_t>(y) * width() + x] = valid ? 1 : 0;
    }
    [[nodiscard]] bool valid(int x, int y) const noexcept {
        return valid_[static_cast<std::size_t>(y) * width() + x] != 0;
    }
    void set_valid(int x, int y, bool v) {
        valid_[static_cast<std::size_t>(y) * width() + x] = v ? 1 : 0;
    }

    [[nodiscard]] const Buffer<3>& vectors() const noexcept { return vec_; }
    [[nodiscard]] Buffer<3>& vectors() noexcept { return vec_; }
    [[nodiscard]] const std::vector<std::uint8_t>& validity() const noexcept { return valid_; }

    [[nodiscard]] std::size_t valid_count() const noexcept {
        return static_cast<std::size_t>(std::count(valid_.begin(), valid_.end(), 1));
    }

    /// True when every valid vector has unit length within `tol`.
    [[nodiscard]] bool unit_where_valid(double tol = 1e-4) const {
        for (int y = 0; y < height(); ++y)
            for (int x = 0; x < width(); ++x)
                if (valid(x, y) && std::abs(at(x, y).norm() - 1.0) > tol) return false;
        return true;
    }

    friend bool operator==(const NormalMap&, const NormalMap&) = default;

private:
    Buffer<3> vec_;
    std::vector<std::uint8_t> valid_;
};

inline void require_same_shape(const auto& a, const auto& b, const char* what) {
    if (a.width() != b.width() || a.height() != b.height()) {
        throw std::invalid_argument(std::string(what) + ": dimension mismatch (" +
                                    std::to_string(a.width()) + "x" + std::to_string(a.height()) +
                                    " vs " + std::to_string(b.width()) + "x" +
                                    std::to_string(b.height()) + ")");
    }
}

// ---------------------------------------------------------------------------
// Luminance and rank

inline constexpr std::array<double, 3> kLumaWeights{0.299, 0.587, 0.114};

/// BT.601 luma.
inline ScalarMap luminance(const ImageRGB& img) {
    ScalarMap out(img.width(), img.height());
    const auto src = img.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < out.pixels(); ++i) {
        dst[i] = kLumaWeights[0] * src[3 * i] + kLumaWeights[1] * src[3 * i + 1] +
                 kLumaWeights[2] * src[3 * i + 2];
    }
    return out;
}

/// Midpoint percentile rank of every pixel within the whole map:
/// p = (count_less + count_equal / 2) / N. Constant maps give 0.5 everywhere.
inline ScalarMap cdf_rank(const ScalarMap& lum) {
    const std::size_t n = lum.pixels();
    const auto v = lum.data();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    ScalarMap out(lum.width(), lum.height());
    auto p = out.data();
    const double inv_n = 1.0 / static_cast<double>(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i + 1;
        while (j < n && v[order[j]] == v[order[i]]) ++j;
        const double rank = (static_cast<double>(i) + 0.5 * static_cast<double>(j - i)) * inv_n;
        for (std::size_t k = i; k < j; ++k) p[order[k]] = rank;
        i = j;
    }
    return out;
}

// ---------------------------------------------------------------------------
// L1

/// Per-pixel mean absolute channel difference.
inline ScalarMap l1_map(const ImageRGB& a, const ImageRGB& b) {
    require_same_shape(a, b, "l1_map");
    ScalarMap out(a.width(), a.height());
    const auto pa = a.data();
    const auto pb = b.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < out.pixels(); ++i) {
        dst[i] = (std::abs(pa[3 * i] - pb[3 * i]) + std::abs(pa[3 * i + 1] - pb[3 * i + 1]) +
                  std::abs(pa[3 * i + 2] - pb[3 * i + 2])) /
                 3.0;
    }
    return out;
}

/// sign(x) with sign(0) = 0.
inline double sign0(double x) noexcept { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// ---------------------------------------------------------------------------
// SSIM

namespace ssim {

inline constexpr int kRadius = 5;
inline constexpr double kSigma = 1.5;
inline constexpr double kC1 = 0.01 * 0.01;
inline constexpr double kC2 = 0.03 * 0.03;

inline const std::array<double, 2 * kRadius + 1>& window() {
    static const auto w = [] {
        std::array<double, 2 * kRadius + 1> k{};
        double sum = 0.0;
        for (int i = -kRadius; i <= kRadius; ++i) {
            k[i + kRadius] = std::exp(-(i * i) / (2.0 * kSigma * kSigma));
            sum += k[i + kRadius];
        }
        for (auto& v : k) v /= sum;
        return k;
    }();
    return w;
}

/// Mirror index without edge repetition (d c b | a b c d | c b a), folded as often as needed.
inline int reflect(int i, int n) noexcept {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

/// Separable Gaussian blur of a single plane with reflected borders.
inline std::vector<double> blur(const std::vector<double>& src, int w, int h) {
    const auto& k = window();
    std::vector<double> tmp(src.size()), out(src.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int t = -kRadius; t <= kRadius; ++t)
                s += k[t + kRadius] * src[static_cast<std::size_t>(y) * w + reflect(x + t, w)];
            tmp[static_cast<std::size_t>(y) * w + x] = s;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int t = -kRadius; t <= kRadius; ++t)
                s += k[t + kRadius] * tmp[static_cast<std::size_t>(reflect(y + t, h)) * w + x];
            out[static_cast<std::size_t>(y) * w + x] = s;
        }
    return out;
}

/// Adjoint of blur().
inline std::vector<double> blur_adjoint(const std::vector<double>& g, int w, int h) {
    const auto& k = window();
    std::vector<double> tmp(g.size(), 0.0), out(g.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double v = g[static_cast<std::size_t>(y) * w + x];
            for (int t = -kRadius; t <= kRadius; ++t)
                tmp[static_cast<std::size_t>(reflect(y + t, h)) * w + x] += k[t + kRadius] * v;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double v = tmp[static_cast<std::size_t>(y) * w + x];
            for (int t = -kRadius; t <= kRadius; ++t)
                out[static_cast<std::size_t>(y) * w + reflect(x + t, w)] += k[t + kRadius] * v;
        }
    return out;
}

struct ChannelStats {
    std::vector<double> mu_a, mu_b, e_aa, e_bb, e_ab;
};

inline ChannelStats channel_stats(const ImageRGB& a, const ImageRGB& b, int c) {
    const int w = a.width(), h = a.height();
    const std::size_t n = a.pixels();
    std::vector<double> pa(n), pb(n), aa(n), bb(n), ab(n);
    for (std::size_t i = 0; i < n; ++i) {
        pa[i] = a.data()[3 * i + c];
        pb[i] = b.data()[3 * i + c];
        aa[i] = pa[i] * pa[i];
        bb[i] = pb[i] * pb[i];
        ab[i] = pa[i] * pb[i];
    }
    return {blur(pa, w, h), blur(pb, w, h), blur(aa, w, h), blur(bb, w, h), blur(ab, w, h)};
}

} // namespace ssim

/// Per-pixel SSIM (11x11 Gaussian window, sigma 1.5), averaged over the three channels.
inline ScalarMap ssim_map(const ImageRGB& a, const ImageRGB& b) {
    require_same_shape(a, b, "ssim_map");
    ScalarMap out(a.width(), a.height());
    auto dst = out.data();
    for (int c = 0; c < 3; ++c) {
        const auto s = ssim::channel_stats(a, b, c);
        for (std::size_t i = 0; i < out.pixels(); ++i) {
            const double ma = s.mu_a[i], mb = s.mu_b[i];
            const double va = s.e_aa[i] - ma * ma;
            const double vb = s.e_bb[i] - mb * mb;
            const double cov = s.e_ab[i] - ma * mb;
            const double num = (2.0 * ma * mb + ssim::kC1) * (2.0 * cov + ssim::kC2);
            const double den = (ma * ma + mb * mb + ssim::kC1) * (va + vb + ssim::kC2);
            dst[i] += num / den / 3.0;
        }
    }
    return out;
}

/// Gradients of sum_p weight(p) * ssim_map(a, b)(p) with respect to a and b.
inline std::pair<ImageRGB, ImageRGB> ssim_map_backward(const ImageRGB& a, const ImageRGB& b,
                                                       const ScalarMap& weight) {
    require_same_shape(a, b, "ssim_map_backward");
    require_same_shape(a, weight, "ssim_map_backward");
    const int w = a.width(), h = a.height();
    const std::size_t n = a.pixels();
    ImageRGB ga(w, h), gb(w, h);
    std::vector<double> d_ma(n), d_mb(n), d_eaa(n), d_ebb(n), d_eab(n);
    for (int c = 0; c < 3; ++c) {
        const auto s = ssim::channel_stats(a, b, c);
        for (std::size_t i = 0; i < n; ++i) {
            const double g = weight.data()[i] / 3.0;
            const double ma = s.mu_a[i], mb = s.mu_b[i];
            const double va = s.e_aa[i] - ma * ma;
            const double vb = s.e_bb[i] - mb * mb;
            const double cov = s.e_ab[i] - ma * mb;
            const double a1 = 2.0 * ma * mb + ssim::kC1;
            const double a2 = 2.0 * cov + ssim::kC2;
            const double b1 = ma * ma + mb * mb + ssim::kC1;
            const double b2 = va + vb + ssim::kC2;
            const double den = b1 * b2;
            const double val = a1 * a2 / den;
            // mu enters a1, a2 (through cov), b1 and b2 (through the variances).
            d_ma[i] = g * ((2.0 * mb * a2 - 2.0 * mb * a1) / den - val * 2.0 * ma / b1 +
                           val * 2.0 * ma / b2);
            d_mb[i] = g * ((2.0 * ma * a2 - 2.0 * ma * a1) / den - val * 2.0 * mb / b1 +
                           val * 2.0 * mb / b2);
            d_eaa[i] = g * (-val / b2);
            d_ebb[i] = g * (-val / b2);
            d_eab[i] = g * (2.0 * a1 / den);
        }
        const auto t_ma = ssim::blur_adjoint(d_ma, w, h);
        const auto t_mb = ssim::blur_adjoint(d_mb, w, h);
        const auto t_eaa = ssim::blur_adjoint(d_eaa, w, h);
        const auto t_ebb = ssim::blur_adjoint(d_ebb, w, h);
        const auto t_eab = ssim::blur_adjoint(d_eab, w, h);
        for (std::size_t i = 0; i < n; ++i) {
            const double va = a.data()[3 * i + c];
            const double vb = b.data()[3 * i + c];
            ga.data()[3 * i + c] = t_ma[i] + 2.0 * va * t_eaa[i] + vb * t_eab[i];
            gb.data()[3 * i + c] = t_mb[i] + 2.0 * vb * t_ebb[i] + va * t_eab[i];
        }
    }
    return {std::move(ga), std::move(gb)};
}

// ---------------------------------------------------------------------------
// Bilinear resampling (half-pixel centers, edge clamped)

namespace detail {
struct Tap {
    int i0, i1;
    double t;
};

inline std::vector<Tap> resize_taps(int src, int dst) {
    std::vector<Tap> taps(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
        double s = (i + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(src - 1));
        const int i0 = static_cast<int>(std::floor(s));
        const int i1 = std::min(i0 + 1, src - 1);
        taps[i] = {i0, i1, s - i0};
    }
    return taps;
}
} // namespace detail

template <int C>
Buffer<C> resize_bilinear(const Buffer<C>& src, int width, int height) {
    if (src.width() == width && src.height() == height) return src;
    const auto tx = detail::resize_taps(src.width(), width);
    const auto ty = detail::resize_taps(src.height(), height);
    Buffer<C> out(width, height);
    for (int y = 0; y < height; ++y) {
        const auto& vy = ty[y];
        for (int x = 0; x < width; ++x) {
            const auto& vx = tx[x];
            for (int c = 0; c < C; ++c) {
                const double top = (1.0 - vx.t) * src(vx.i0, vy.i0, c) + vx.t * src(vx.i1, vy.i0, c);
                const double bot = (1.0 - vx.t) * src(vx.i0, vy.i1, c) + vx.t * src(vx.i1, vy.i1, c);
                out(x, y, c) = (1.0 - vy.t) * top + vy.t * bot;
            }
        }
    }
    return out;
}

/// Adjoint of resize_bilinear: maps a gradient at the output size back to the source size.
template <int C>
Buffer<C> resize_bilinear_adjoint(const Buffer<C>& grad, int src_width, int src_height) {
    if (grad.width() == src_width && grad.height() == src_height) return grad;
    const auto tx = detail::resize_taps(src_width, grad.width());
    const auto ty = detail::resize_taps(src_height, grad.height());
    Buffer<C> out(src_width, src_height);
    for (int y = 0; y < grad.height(); ++y) {
        const auto& vy = ty[y];
        for (int x = 0; x < grad.width(); ++x) {
            const auto& vx = tx[x];
            for (int c = 0; c < C; ++c) {
                const double g = grad(x, y, c);
                out(vx.i0, vy.i0, c) += (1.0 - vy.t) * (1.0 - vx.t) * g;
                out(vx.i1, vy.i0, c) += (1.0 - vy.t) * vx.t * g;
                out(vx.i0, vy.i1, c) += vy.t * (1.0 - vx.t) * g;
                out(vx.i1, vy.i1, c) += vy.t * vx.t * g;
            }
        }
    }
    return out;
}

template <int C>
double mean(const Buffer<C>& b) {
    double s = 0.0;
    for (double v : b.data()) s += v;
    return s / static_cast<double>(b.data().size());
}

} // namespace gsi3
