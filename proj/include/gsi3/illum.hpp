#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "gsi3/binary_io.hpp"
#include "gsi3/image.hpp"
#include "gsi3/parallel.hpp"
#include "gsi3/random.hpp"

namespace gsi3 {

/// Side length of the refinement feature map and of the illumination field.
inline constexpr int kFeatureSize = 224;
/// Hidden channels of the first refinement convolution.
inline constexpr int kHidden = 64;

inline constexpr double kGammaFloor = 0.05;
inline constexpr double kGammaCeil = 20.0;
inline constexpr double kGammaBaseEps = 1e-6;

// ---------------------------------------------------------------------------
// Coarse gamma mapping

/// Learnable per-view gamma range: gamma_min = a*exp(b), gamma_max = c*exp(d).
struct GammaParams {
    std::array<double, 4> theta{1.0, 0.0, 1.0, 0.0};
    std::array<double, 4> grad{};

    [[nodiscard]] double a() const noexcept { return theta[0]; }
    [[nodiscard]] double b() const noexcept { return theta[1]; }
    [[nodiscard]] double c() const noexcept { return theta[2]; }
    [[nodiscard]] double d() const noexcept { return theta[3]; }

    void zero_grad() noexcept { grad.fill(0.0); }
};

/// Clamped, ordered gamma range together with its partials w.r.t. (a, b, c, d).
struct GammaRange {
    double min = 1.0;
    double max = 1.0;
    std::array<double, 4> dmin{};
    std::array<double, 4> dmax{};
};

inline GammaRange gamma_range(const GammaParams& gp) {
    auto endpoint = [](double scale, double log_mult, std::size_t i) {
        const double e = std::exp(log_mult);
        const double raw = scale * e;
        std::array<double, 4> d{};
        if (raw < kGammaFloor) return std::pair{kGammaFloor, d};
        if (raw > kGammaCeil) return std::pair{kGammaCeil, d};
        d[i] = e;
        d[i + 1] = raw;
        return std::pair{raw, d};
    };
    auto [lo, dlo] = endpoint(gp.a(), gp.b(), 0);
    auto [hi, dhi] = endpoint(gp.c(), gp.d(), 2);
    if (lo > hi) {
        std::swap(lo, hi);
        std::swap(dlo, dhi);
    }
    return {lo, hi, dlo, dhi};
}

/// Linear interpolation of the gamma range at rank p.
inline double gamma_of_rank(double gamma_min, double gamma_max, double p) noexcept {
    return gamma_min + p * (gamma_max - gamma_min);
}

/// Gamma-maps the target image: out = clamp(gt, eps, 1)^gamma(rank), per channel.
inline ImageRGB apply_gamma(const ImageRGB& gt, const ScalarMap& rank, const GammaParams& gp) {
    require_same_shape(gt, rank, "apply_gamma");
    const auto range = gamma_range(gp);
    ImageRGB out(gt.width(), gt.height());
    for (std::size_t i = 0; i < gt.pixels(); ++i) {
        const double g = gamma_of_rank(range.min, range.max, rank.data()[i]);
        for (int c = 0; c < 3; ++c) {
            const double base = std::clamp(gt.data()[3 * i + c], kGammaBaseEps, 1.0);
            out.data()[3 * i + c] = std::pow(base, g);
        }
    }
    return out;
}

/// Accumulates d(loss)/d(a,b,c,d) into gp.grad given d(loss)/d(gamma-mapped image).
inline void apply_gamma_backward(const ImageRGB& gt, const ScalarMap& rank, const ImageRGB& mapped,
                                 const ImageRGB& grad_mapped, GammaParams& gp) {
    const auto range = gamma_range(gp);
    double g_min = 0.0, g_max = 0.0;
    for (std::size_t i = 0; i < gt.pixels(); ++i) {
        double dgamma = 0.0;
        for (int c = 0; c < 3; ++c) {
            const std::size_t k = 3 * i + c;
            const double base = std::clamp(gt.data()[k], kGammaBaseEps, 1.0);
            dgamma += grad_mapped.data()[k] * mapped.data()[k] * std::log(base);
        }
        const double p = rank.data()[i];
        g_min += dgamma * (1.0 - p);
        g_max += dgamma * p;
    }
    for (std::size_t j = 0; j < 4; ++j) gp.grad[j] += g_min * range.dmin[j] + g_max * range.dmax[j];
}

// ---------------------------------------------------------------------------
// Fine convolutional refinement

/// Two 3x3 convolutions (3 -> 64 -> 1) packed in one parameter vector.
/// Layout: w1[tap][cin][cout], b1[cout], w2[tap][cin], b2.
class ConvWeights {
public:
    static constexpr std::size_t kW1 = 9 * 3 * kHidden;
    static constexpr std::size_t kB1 = kHidden;
    static constexpr std::size_t kW2 = 9 * kHidden;
    static constexpr std::size_t kSize = kW1 + kB1 + kW2 + 1;

    ConvWeights() : theta(kSize, 0.0), grad(kSize, 0.0) {}

    /// Small uniform weights in [-0.05, 0.05] with b1 = 0 and b2 = 1, so the refined
    /// feature map starts close to 1 and the modulation starts close to identity.
    static ConvWeights initialized(std::uint64_t seed) {
        ConvWeights w;
        Rng rng({seed, 0x636f6e76ULL});
        for (std::size_t i = 0; i < kW1; ++i) w.theta[i] = rng.uniform(-0.05, 0.05);
        for (std::size_t i = 0; i < kW2; ++i) w.theta[kW1 + kB1 + i] = rng.uniform(-0.05, 0.05);
        w.theta[kSize - 1] = 1.0;
        return w;
    }

    [[nodiscard]] const double* w1(int tap, int cin) const { return &theta[(tap * 3 + cin) * kHidden]; }
    [[nodiscard]] const double* b1() const { return &theta[kW1]; }
    [[nodiscard]] const double* w2(int tap) const { return &theta[kW1 + kB1 + tap * kHidden]; }
    [[nodiscard]] double b2() const { return theta[kSize - 1]; }

    double* gw1(int tap, int cin) { return &grad[(tap * 3 + cin) * kHidden]; }
    double* gb1() { return &grad[kW1]; }
    double* gw2(int tap) { return &grad[kW1 + kB1 + tap * kHidden]; }
    double& gb2() { return grad[kSize - 1]; }

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

    std::vector<double> theta;
    std::vector<double> grad;
};

/// Intermediates of refine_features needed by its backward pass.
struct RefineRecord {
    int src_width = 0, src_height = 0;
    ImageRGB input;           // resized input, kFeatureSize^2
    std::vector<double> f1;   // post-ReLU hidden features, HWC
    ScalarMap z2;             // pre-ReLU output
};

namespace detail {
inline constexpr int kConvBands = 14;
inline constexpr std::array<std::array<int, 2>, 9> kTaps{{{-1, -1}, {0, -1}, {1, -1},
                                                          {-1, 0},  {0, 0},  {1, 0},
                                                          {-1, 1},  {0, 1},  {1, 1}}};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

/// 3x3 zero-padded patches of rows [y0, y1) of a 3-channel S x S image, one row per pixel,
/// columns ordered (tap, channel) to match the layer-1 weight layout.
inline RowMatrix im2col(const double* u, int S, int y0, int y1) {
    RowMatrix X = RowMatrix::Zero(static_cast<Eigen::Index>(y1 - y0) * S, 27);
    for (int y = y0; y < y1; ++y)
        for (int x = 0; x < S; ++x) {
            double* row = X.row(static_cast<Eigen::Index>(y - y0) * S + x).data();
            for (int t = 0; t < 9; ++t) {
                const int qx = x + kTaps[t][0], qy = y + kTaps[t][1];
                if (qx < 0 || qy < 0 || qx >= S || qy >= S) continue;
                std::copy_n(u + (static_cast<std::size_t>(qy) * S + qx) * 3, 3, row + 3 * t);
            }
        }
    return X;
}
} // namespace detail

/// Resizes the rendered image to 224x224 and applies ReLU(conv 3->64), ReLU(conv 64->1).
inline ScalarMap refine_features(const ImageRGB& rendered, const ConvWeights& w,
                                 RefineRecord* record = nullptr) {
    using detail::ConstRowMap, detail::RowMap, detail::RowMatrix;
    constexpr int S = kFeatureSize;
    constexpr int nb = detail::kConvBands;
    ImageRGB input = resize_bilinear(rendered, S, S);
    std::vector<double> f1(static_cast<std::size_t>(S) * S * kHidden);
    const ConstRowMap W1(w.theta.data(), 27, kHidden);
    const Eigen::Map<const Eigen::RowVectorXd> B1(w.b1(), kHidden);
    const ConstRowMap W2(w.w2(0), 9, kHidden);

    for_each_band(nb, [&](int band) {
        const auto [y0, y1] = band_range(S, nb, band);
        const RowMatrix X = detail::im2col(input.data().data(), S, y0, y1);
        RowMap F(&f1[static_cast<std::size_t>(y0) * S * kHidden], X.rows(), kHidden);
        F.noalias() = X * W1;
        F = (F.rowwise() + B1).cwiseMax(0.0);
    });

    // Per-pixel responses of every layer-2 tap, then gathered from the neighbors.
    RowMatrix G(static_cast<Eigen::Index>(S) * S, 9);
    for_each_band(nb, [&](int band) {
        const auto [y0, y1] = band_range(S, nb, band);
        const Eigen::Index r0 = static_cast<Eigen::Index>(y0) * S, rows = static_cast<Eigen::Index>(y1 - y0) * S;
        const ConstRowMap F(&f1[static_cast<std::size_t>(r0) * kHidden], rows, kHidden);
        G.middleRows(r0, rows).noalias() = F * W2.transpose();
    });

    ScalarMap z2(S, S), out(S, S);
    for_each_band(nb, [&](int band) {
        const auto [y0, y1] = band_range(S, nb, band);
        for (int y = y0; y < y1; ++y)
            for (int x = 0; x < S; ++x) {
                double z = w.b2();
                for (int t = 0; t < 9; ++t) {
                    const int qx = x + detail::kTaps[t][0], qy = y + detail::kTaps[t][1];
                    if (qx < 0 || qy < 0 || qx >= S || qy >= S) continue;
                    z += G(static_cast<Eigen::Index>(qy) * S + qx, t);
                }
                z2(x, y) = z;
                out(x, y) = z > 0.0 ? z : 0.0;
            }
    });

    if (record) {
        record->src_width = rendered.width();
        record->src_height = rendered.height();
        record->input = std::move(input);
        record->f1 = std::move(f1);
        record->z2 = std::move(z2);
    }
    return out;
}

/// Accumulates weight gradients into w.grad and returns d(loss)/d(rendered image).
inline ImageRGB refine_features_backward(const ScalarMap& grad_f2, ConvWeights& w,
                                         const RefineRecord& rec) {
    using detail::ConstRowMap, detail::RowMap, detail::RowMatrix;
    constexpr int S = kFeatureSize;
    constexpr int nb = detail::kConvBands;
    ScalarMap dz2(S, S);
    for (std::size_t i = 0; i < dz2.pixels(); ++i)
        dz2.data()[i] = rec.z2.data()[i] > 0.0 ? grad_f2.data()[i] : 0.0;

    const ConstRowMap W1(w.theta.data(), 27, kHidden);
    const ConstRowMap W2(w.w2(0), 9, kHidden);
    // Column gradient of the layer-1 patches; scattered back to pixels below.
    RowMatrix dcol(static_cast<Eigen::Index>(S) * S, 27);
    std::vector<RowMatrix> part_w1(nb), part_w2(nb);
    std::vector<Eigen::RowVectorXd> part_b1(nb);
    std::vector<double> part_b2(nb, 0.0);

    for_each_band(nb, [&](int band) {
        const auto [y0, y1] = band_range(S, nb, band);
        const Eigen::Index r0 = static_cast<Eigen::Index>(y0) * S, rows = static_cast<Eigen::Index>(y1 - y0) * S;
        // D(q, t) = dz2 at the output pixel that reads q through tap t.
        RowMatrix D = RowMatrix::Zero(rows, 9);
        for (int y = y0; y < y1; ++y)
            for (int x = 0; x < S; ++x)
                for (int t = 0; t < 9; ++t) {
                    const int px = x - detail::kTaps[t][0], py = y - detail::kTaps[t][1];
                    if (px < 0 || py < 0 || px >= S || py >= S) continue;
                    D(static_cast<Eigen::Index>(y - y0) * S + x, t) = dz2(px, py);
                }
        const ConstRowMap F(&rec.f1[static_cast<std::size_t>(r0) * kHidden], rows, kHidden);
        RowMatrix dZ1 = D * W2;
        dZ1 = (F.array() > 0.0).select(dZ1, 0.0);
        part_w2[band] = D.transpose() * F;
        for (int y = y0; y < y1; ++y)
            for (int x = 0; x < S; ++x) part_b2[band] += dz2(x, y);

        const RowMatrix X = detail::im2col(rec.input.data().data(), S, y0, y1);
        part_w1[band] = X.transpose() * dZ1;
        part_b1[band] = dZ1.colwise().sum();
        dcol.middleRows(r0, rows).noalias() = dZ1 * W1.transpose();
    });

    // Input gradient at q gathers the patch entries that copied q.
    ImageRGB dinput(S, S);
    for_each_band(nb, [&](int band) {
        const auto [y0, y1] = band_range(S, nb, band);
        for (int y = y0; y < y1; ++y)
            for (int x = 0; x < S; ++x)
                for (int t = 0; t < 9; ++t) {
                    const int px = x - detail::kTaps[t][0], py = y - detail::kTaps[t][1];
                    if (px < 0 || py < 0 || px >= S || py >= S) continue;
                    const double* g = dcol.row(static_cast<Eigen::Index>(py) * S + px).data() + 3 * t;
                    for (int ci = 0; ci < 3; ++ci) dinput(x, y, ci) += g[ci];
                }
    });

    RowMap gW1(w.grad.data(), 27, kHidden);
    Eigen::Map<Eigen::RowVectorXd> gB1(w.gb1(), kHidden);
    RowMap gW2(w.gw2(0), 9, kHidden);
    for (int b = 0; b < nb; ++b) {
        gW1 += part_w1[b];
        gB1 += part_b1[b];
        gW2 += part_w2[b];
        w.gb2() += part_b2[b];
    }
    return resize_bilinear_adjoint(dinput, rec.src_width, rec.src_height);
}

// ---------------------------------------------------------------------------
// Illumination field, fusion and modulation

/// Learnable positive 224x224 illumination map, one per training view.
struct IlluminationField {
    ScalarMap value{kFeatureSize, kFeatureSize, 1.0};
    ScalarMap grad{kFeatureSize, kFeatureSize, 0.0};

    static constexpr double kMinValue = 1e-4;

    void zero_grad() { grad.fill(0.0); }
    /// Keeps every entry strictly positive after an optimizer step.
    void project() {
        for (double& v : value.data()) v = std::max(v, kMinValue);
    }
};

/// Elementwise product of the illumination field and the refined features.
inline ScalarMap fuse(const ScalarMap& field, const ScalarMap& features) {
    require_same_shape(field, features, "fuse");
    ScalarMap out(field.width(), field.height());
    for (std::size_t i = 0; i < out.pixels(); ++i) out.data()[i] = field.data()[i] * features.data()[i];
    return out;
}

/// Upsamples the fused map to the rendered resolution and scales every channel by it.
inline ImageRGB modulate(const ScalarMap& fused, const ImageRGB& rendered) {
    const ScalarMap r = resize_bilinear(fused, rendered.width(), rendered.height());
    ImageRGB out(rendered.width(), rendered.height());
    for (std::size_t i = 0; i < out.pixels(); ++i)
        for (int c = 0; c < 3; ++c) out.data()[3 * i + c] = r.data()[i] * rendered.data()[3 * i + c];
    return out;
}

// ---------------------------------------------------------------------------
// Loss

struct IllumLoss {
    double value = 0.0;
    ScalarMap per_pixel;
};

/// per_pixel = (1 - lambda) * L1 + lambda * (1 - SSIM); value is the pixel mean.
inline IllumLoss illum_loss(const ImageRGB& mapped, const ImageRGB& target, double lambda) {
    require_same_shape(mapped, target, "illum_loss");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("illum_loss: lambda outside [0,1]");
    const ScalarMap l1 = l1_map(mapped, target);
    const ScalarMap s = ssim_map(mapped, target);
    IllumLoss out{0.0, ScalarMap(mapped.width(), mapped.height())};
    for (std::size_t i = 0; i < l1.pixels(); ++i)
        // SSIM can round to just above 1 on matching patches, where its gradient vanishes.
        out.per_pixel.data()[i] = (1.0 - lambda) * l1.data()[i] + lambda * std::max(0.0, 1.0 - s.data()[i]);
    out.value = mean(out.per_pixel);
    return out;
}

/// Gradients of scale * illum_loss(...).value with respect to both images.
inline std::pair<ImageRGB, ImageRGB> illum_loss_backward(const ImageRGB& mapped, const ImageRGB& target,
                                                         double lambda, double scale = 1.0) {
    const double n = static_cast<double>(mapped.pixels());
    ImageRGB ga(mapped.width(), mapped.height()), gb(mapped.width(), mapped.height());
    const double k1 = scale * (1.0 - lambda) / (3.0 * n);
    for (std::size_t i = 0; i < mapped.data().size(); ++i) {
        const double s = k1 * sign0(mapped.data()[i] - target.data()[i]);
        ga.data()[i] = s;
        gb.data()[i] = -s;
    }
    if (lambda != 0.0) {
        const ScalarMap weight(mapped.width(), mapped.height(), -scale * lambda / n);
        auto [sa, sb] = ssim_map_backward(mapped, target, weight);
        for (std::size_t i = 0; i < ga.data().size(); ++i) {
            ga.data()[i] += sa.data()[i];
            gb.data()[i] += sb.data()[i];
        }
    }
    return {std::move(ga), std::move(gb)};
}

// ---------------------------------------------------------------------------
// Full two-stage pass with reverse mode

struct IllumForward {
    ImageRGB mapped_target;  // gamma-mapped ground truth
    ScalarMap features;      // refined features (224^2)
    ScalarMap fused;         // field * features
    ScalarMap upsampled;     // fused, resized to the render size
    ImageRGB modulated;      // upsampled * rendered
    IllumLoss loss;
};

/// Records one forward evaluation of the illumination objective so that backward()
/// can produce exact gradients for every learnable and for the rendered image.
class IllumPass {
public:
    const IllumForward& forward(const ImageRGB& gt, const ScalarMap& rank, const ImageRGB& rendered,
                                const GammaParams& gp, const ConvWeights& w,
                                const IlluminationField& field, double lambda) {
        require_same_shape(gt, rendered, "IllumPass::forward");
        gt_ = gt;
        rank_ = rank;
        rendered_ = rendered;
        lambda_ = lambda;
        fwd_.mapped_target = apply_gamma(gt, rank, gp);
        fwd_.features = refine_features(rendered, w, &refine_);
        fwd_.fused = fuse(field.value, fwd_.features);
        fwd_.upsampled = resize_bilinear(fwd_.fused, rendered.width(), rendered.height());
        fwd_.modulated = modulate(fwd_.fused, rendered);
        fwd_.loss = illum_loss(fwd_.modulated, fwd_.mapped_target, lambda);
        recorded_ = true;
        return fwd_;
    }

    [[nodiscard]] bool recorded() const noexcept { return recorded_; }
    [[nodiscard]] const IllumForward& result() const {
        if (!recorded_) throw std::logic_error("IllumPass: no forward pass recorded");
        return fwd_;
    }

    /// Accumulates gradients of scale * loss into gp, w and field; returns d/d(rendered).
    ImageRGB backward(double scale, GammaParams& gp, ConvWeights& w, IlluminationField& field) {
        if (!recorded_) throw std::logic_error("IllumPass::backward called before forward");
        auto [d_mod, d_target] = illum_loss_backward(fwd_.modulated, fwd_.mapped_target, lambda_, scale);
        apply_gamma_backward(gt_, rank_, fwd_.mapped_target, d_target, gp);

        const int W = rendered_.width(), H = rendered_.height();
        ImageRGB d_rendered(W, H);
        ScalarMap d_up(W, H);
        for (std::size_t i = 0; i < d_up.pixels(); ++i) {
            double s = 0.0;
            for (int c = 0; c < 3; ++c) {
                const std::size_t k = 3 * i + c;
                s += d_mod.data()[k] * rendered_.data()[k];
                d_rendered.data()[k] = d_mod.data()[k] * fwd_.upsampled.data()[i];
            }
            d_up.data()[i] = s;
        }
        const ScalarMap d_fused = resize_bilinear_adjoint(d_up, kFeatureSize, kFeatureSize);
        ScalarMap d_features(kFeatureSize, kFeatureSize);
        for (std::size_t i = 0; i < d_fused.pixels(); ++i) {
            field.grad.data()[i] += d_fused.data()[i] * fwd_.features.data()[i];
            d_features.data()[i] = d_fused.data()[i] * field.value.data()[i];
        }
        const ImageRGB d_conv = refine_features_backward(d_features, w, refine_);
        for (std::size_t i = 0; i < d_rendered.data().size(); ++i) d_rendered.data()[i] += d_conv.data()[i];
        return d_rendered;
    }

private:
    bool recorded_ = false;
    double lambda_ = 0.2;
    ImageRGB gt_, rendered_;
    ScalarMap rank_;
    RefineRecord refine_;
    IllumForward fwd_;
};

// ---------------------------------------------------------------------------
// Checkpoint: "GSI3ILL1", u32 version, u64 views, conv theta, then per view
// (a, b, c, d) and the 224x224 field, all little-endian float64.

inline constexpr std::uint32_t kIllumCheckpointVersion = 1;

struct IllumState {
    ConvWeights conv;
    std::vector<GammaParams> gamma;
    std::vector<IlluminationField> field;
};

inline void save_illum_state(const IllumState& s, const std::filesystem::path& path) {
    if (s.gamma.size() != s.field.size()) throw CheckpointError("illum state: view count mismatch");
    BinaryWriter out(path);
    out.magic("GSI3ILL1");
    out.u32(kIllumCheckpointVersion);
    out.u64(s.gamma.size());
    out.f64s(s.conv.theta);
    for (std::size_t v = 0; v < s.gamma.size(); ++v) {
        out.f64s(s.gamma[v].theta);
        out.f64s(s.field[v].value.data());
    }
    out.finish();
}

inline IllumState load_illum_state(const std::filesystem::path& path) {
    BinaryReader in(path);
    in.expect_magic("GSI3ILL1");
    if (in.u32() != kIllumCheckpointVersion) throw CheckpointError(path.string() + ": unsupported version");
    const std::uint64_t views = in.u64();
    if (views > (1u << 20)) throw CheckpointError(path.string() + ": implausible view count");
    IllumState s;
    in.f64s(s.conv.theta);
    s.gamma.resize(views);
    s.field.resize(views);
    for (std::size_t v = 0; v < views; ++v) {
        in.f64s(s.gamma[v].theta);
        in.f64s(s.field[v].value.data());
    }
    in.expect_end();
    return s;
}

} // namespace gsi3
