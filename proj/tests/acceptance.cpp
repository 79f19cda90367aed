// Acceptance run: one PASS/FAIL line per criterion on stdout, details on stderr.
// Usage: acceptance [criterion numbers...]   (default: all)
// Exit status is 0 when every selected criterion was evaluated, whatever the verdicts.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "gsi3/chamfer.hpp"
#include "gsi3/gradcheck.hpp"
#include "gsi3/illum.hpp"
#include "gsi3/mvs.hpp"
#include "gsi3/normalcomp.hpp"
#include "gsi3/synth.hpp"
#include "gsi3/train.hpp"

using namespace gsi3;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// 1. Analytic gradients against central differences.
Verdict gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckOptions opt;
    opt.seeds = {1, 2, 3};
    const auto rows = gradcheck(opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string worst;
    double worst_ratio = 0.0;
    for (const auto& r : rows) {
        std::fprintf(stderr, "  %-24s n=%-5zu max_rel_err=%.3e tol=%.0e\n", r.group.c_str(), r.checked, r.max_rel_err,
                     r.tolerance);
        if (r.max_rel_err / r.tolerance >= worst_ratio) {
            worst_ratio = r.max_rel_err / r.tolerance;
            worst = r.group;
        }
    }
    return {all_pass(rows) && secs < 60.0, fmt("%zu groups, worst %s at %.2f of tolerance, %.1f s", rows.size(),
                                               worst.c_str(), worst_ratio, secs)};
}

// 2. Closed-form identities of the objective.
Verdict equations() {
    std::vector<std::string> failed;
    auto check = [&](bool ok, const char* what) {
        if (!ok) failed.push_back(what);
    };
    constexpr double kTol = 1e-6;

    // Rank-to-gamma map is affine: the midpoint rank gives the midpoint gamma.
    check(std::abs(gamma_of_rank(0.3, 2.5, 0.5) - 1.4) <= kTol, "gamma midpoint");
    check(gamma_of_rank(0.3, 2.5, 0.0) == 0.3 && gamma_of_rank(0.3, 2.5, 1.0) == 2.5, "gamma endpoints");

    // Gamma of one leaves the image unchanged.
    {
        Rng rng(1);
        ImageRGB img(8, 8);
        for (double& v : img.data()) v = rng.uniform(0.05, 1.0);
        ScalarMap rank(8, 8, 0.5);
        GammaParams gp;
        const auto r = gamma_range(gp);
        ImageRGB out = img;
        if (std::abs(r.min - 1.0) <= kTol && std::abs(r.max - 1.0) <= kTol) out = apply_gamma(img, rank, gp);
        double err = std::abs(r.min - 1.0) + std::abs(r.max - 1.0);
        for (std::size_t i = 0; i < img.data().size(); ++i) err = std::max(err, std::abs(out.data()[i] - img.data()[i]));
        check(err <= kTol, "gamma identity");
    }

    // Fuse and modulate: a unit field with unit features is the identity, a zero field absorbs.
    {
        Rng rng(2);
        ImageRGB img(16, 16);
        for (double& v : img.data()) v = rng.uniform();
        const ScalarMap ones(kFeatureSize, kFeatureSize, 1.0), zeros(kFeatureSize, kFeatureSize, 0.0);
        const auto same = modulate(fuse(ones, ones), img);
        const auto dark = modulate(fuse(zeros, ones), img);
        double e1 = 0.0, e0 = 0.0;
        for (std::size_t i = 0; i < img.data().size(); ++i) {
            e1 = std::max(e1, std::abs(same.data()[i] - img.data()[i]));
            e0 = std::max(e0, std::abs(dark.data()[i]));
        }
        check(e1 <= kTol, "modulate identity");
        check(e0 == 0.0, "modulate zero absorption");
    }

    // Photometric loss vanishes exactly when the images agree.
    {
        Rng rng(3);
        ImageRGB a(16, 16);
        for (double& v : a.data()) v = rng.uniform();
        ImageRGB b = a;
        b(7, 7, 1) += 0.01;
        check(illum_loss(a, a, 0.2).value <= kTol, "illum loss zero on equal images");
        check(illum_loss(a, b, 0.2).value > kTol, "illum loss positive on unequal images");
    }

    // Gate is strict: a loss exactly at the threshold is not supervised.
    {
        ScalarMap l(3, 1);
        l(0, 0) = 0.1;
        l(1, 0) = std::nextafter(0.1, 1.0);
        l(2, 0) = 0.05;
        const auto m = gate(l, 0.1);
        check(!m(0, 0) && m(1, 0) && !m(2, 0), "strict gate");
    }

    // A constant normal map has zero spatial gradient, so the gradient loss between two
    // constant maps is zero.
    {
        NormalMap a(8, 8), b(8, 8);
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                a.set(x, y, Eigen::Vector3d(0.3, -0.4, -1.0).normalized());
                b.set(x, y, Eigen::Vector3d(0, 0, -1));
            }
        const auto g = normal_gradient(a);
        double m = 0.0;
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x)
                for (int c = 0; c < 3; ++c)
                    if (!g.is_excluded(x, y)) m = std::max({m, std::abs(g.dx(x, y, c)), std::abs(g.dy(x, y, c))});
        check(m == 0.0 && gradient_loss(a, b).value == 0.0, "constant map gradient");
    }

    // Weighted sum with the default weights.
    {
        const double t = total_loss(0.2, 0.4, 10.0, 0.5);
        check(std::abs(t - (0.2 + 0.15 * 0.4 + 0.0015 * 10.0 + 0.03 * 0.5)) <= kTol, "weighted sum");
        const LossWeights w;
        check(w.w_illum == 1.0 && w.w_normal == 0.15 && w.w_gradient == 0.0015 && w.w_mvs == 0.03, "default weights");
    }

    std::string detail = failed.empty() ? "all identities hold" : "failed:";
    for (const auto& f : failed) detail += " [" + f + "]";
    return {failed.empty(), detail};
}

// 3. Perturbation draws: determinism, range, uniformity.
Verdict perturbation() {
    PerturbSpec spec;
    spec.seed = 7;
    bool ok = true;
    constexpr int kDraws = 10000, kBins = 20;
    std::vector<int> bright(kBins), contrast(kBins);
    int low_gamma = 0;
    for (int v = 0; v < kDraws; ++v) {
        const auto d = draw_perturbation(spec, v);
        const auto e = draw_perturbation(spec, v);
        ok &= d.brightness == e.brightness && d.contrast == e.contrast && d.gamma == e.gamma;
        ok &= d.brightness >= 0.5 && d.brightness < 1.5 && d.contrast >= 0.5 && d.contrast < 1.5;
        ok &= d.gamma == 0.1 || d.gamma == 0.8;
        ++bright[std::min(kBins - 1, static_cast<int>((d.brightness - 0.5) * kBins))];
        ++contrast[std::min(kBins - 1, static_cast<int>((d.contrast - 0.5) * kBins))];
        low_gamma += d.gamma == 0.1;
    }
    // Perturbed images stay in [0, 1] and repeat exactly.
    Rng rng(4);
    ImageRGB img(16, 16);
    for (double& x : img.data()) x = rng.uniform();
    for (int v = 0; v < 50; ++v) {
        const auto a = perturb(img, spec, v);
        ok &= a == perturb(img, spec, v);
        for (double x : a.data()) ok &= x >= 0.0 && x <= 1.0;
    }

    auto p_value = [](const std::vector<int>& counts) {
        const double expected = static_cast<double>(kDraws) / counts.size();
        double chi2 = 0.0;
        for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
        boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
        return boost::math::cdf(boost::math::complement(dist, chi2));
    };
    const double pb = p_value(bright), pc = p_value(contrast), pg = p_value({low_gamma, kDraws - low_gamma});
    const bool uniform = pb > 0.01 && pc > 0.01 && pg > 0.01;
    return {ok && uniform, fmt("deterministic and in range: %s; chi2 p brightness %.3f contrast %.3f gamma %.3f",
                               ok ? "yes" : "no", pb, pc, pg)};
}

// 4. Chamfer: grid search equals brute force; worked examples.
Verdict chamfer_exact() {
    Rng rng(11);
    int mismatches = 0;
    for (int t = 0; t < 50; ++t) {
        auto make = [&](std::size_t n) {
            PointSet p(n);
            const double s = rng.uniform(0.05, 5.0);
            for (auto& x : p) x = {rng.uniform(-s, s), rng.uniform(-s, s), rng.uniform(-s, s)};
            return p;
        };
        const auto p = make(1 + rng.below(1000)), q = make(1 + rng.below(1000));
        mismatches += chamfer(p, q) != chamfer_brute_force(p, q);
    }
    const PointSet a{{0, 0, 0}, {1, 2, 3}};
    const bool examples = chamfer(a, a) == 0.0 && chamfer(PointSet{{0, 0, 0}}, PointSet{{1, 0, 0}}) == 1.0 &&
                          chamfer(PointSet{{0, 0, 0}, {2, 0, 0}}, PointSet{{1, 0, 0}}) == 1.0;
    return {mismatches == 0 && examples,
            fmt("%d of 50 pairs differ from brute force; worked examples %s", mismatches, examples ? "ok" : "wrong")};
}

// 5. Ablation on sphere and plane.
Verdict ablation() {
    const std::vector<std::uint64_t> seeds{1, 2, 3};
    bool ok = true;
    std::string detail;
    for (auto kind : {SceneKind::sphere, SceneKind::plane}) {
        std::vector<std::vector<double>> by_config(4);
        std::vector<std::string> names;
        for (auto seed : seeds) {
            RunConfig cfg;
            cfg.scene = kind;
            cfg.seed = seed;
            cfg.views = 16;
            cfg.width = cfg.height = 64;
            cfg.iterations = 2000;
            cfg.log_every = 100;
            const auto runs = ablate(cfg, std::nullopt);
            names.clear();
            for (std::size_t i = 0; i < runs.size(); ++i) {
                names.push_back(runs[i].name);
                by_config[i].push_back(runs[i].report.chamfer);
                std::fprintf(stderr, "  %s seed %llu %-12s chamfer %.6f (initial %.6f) opaque %zu gated %.3f\n",
                             to_string(kind), static_cast<unsigned long long>(seed), runs[i].name.c_str(),
                             runs[i].report.chamfer, runs[i].report.initial_chamfer, runs[i].report.opaque_gaussians,
                             runs[i].report.gated_fraction);
            }
        }
        std::vector<double> med;
        for (auto& v : by_config) {
            std::sort(v.begin(), v.end());
            med.push_back(v[v.size() / 2]);
        }
        const double base = med[0], illum = med[1], normal = med[2], full = med[3];
        const bool scene_ok = full <= illum && illum <= base && full <= normal && normal <= base && full <= 0.8 * base;
        ok &= scene_ok;
        detail += fmt("%s%s median %s %.4f %s %.4f %s %.4f %s %.4f", detail.empty() ? "" : "; ", to_string(kind),
                      names[0].c_str(), base, names[1].c_str(), illum, names[2].c_str(), normal, names[3].c_str(), full);
    }
    return {ok, detail};
}

// 6. Multi-view consistency of ground-truth depth.
Verdict mvs_ground_truth() {
    double worst_clean = 0.0, least_scaled = INFINITY;
    std::string detail;
    for (auto kind : {SceneKind::sphere, SceneKind::plane, SceneKind::box}) {
        const auto scene = make_scene(kind);
        const auto cams = make_cameras(scene, 16, 64, 64);
        std::vector<DepthObservation> obs;
        for (const auto& c : cams) {
            const auto v = render_gt(scene, c);
            obs.push_back(DepthObservation::from_maps(v.depth, v.normals));
        }
        double clean = 0.0, scaled_min = INFINITY;
        for (std::size_t i = 0; i < cams.size(); ++i) {
            const auto j = (i + 1) % cams.size();
            clean = std::max(clean, mvs_loss(obs[i], cams[i], obs[j], cams[j]).value);
            DepthObservation s = obs[j];
            for (double& d : s.depth.data()) d *= 1.1;
            scaled_min = std::min(scaled_min, mvs_loss(obs[i], cams[i], s, cams[j]).value);
        }
        worst_clean = std::max(worst_clean, clean);
        least_scaled = std::min(least_scaled, scaled_min);
        detail += fmt("%s%s clean max %.2e scaled min %.4f", detail.empty() ? "" : "; ", to_string(kind), clean,
                      scaled_min);
    }
    return {worst_clean < 1e-6 && least_scaled > 0.05, detail};
}

// 7. Byte-identical outputs across runs and thread counts.
Verdict determinism() {
    auto cfg = config_with_overrides({"render.views=6", "train.iterations=60", "train.gaussians=600", "train.mvs_every=2"});
    const auto root = fs::temp_directory_path() / "gsi3_acceptance_det";
    fs::remove_all(root);
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    std::vector<fs::path> dirs;
    for (int threads : {1, 1, 2, 4}) {
        cfg.threads = threads;
        dirs.push_back(root / ("run" + std::to_string(dirs.size())));
        train(cfg, dirs.back());
    }
    set_thread_count(1);
    int differing = 0;
    for (const char* f : {"report.json", "cloud.gsi3", "illum.gsi3"})
        for (std::size_t i = 1; i < dirs.size(); ++i) differing += slurp(dirs[0] / f) != slurp(dirs[i] / f);
    return {differing == 0, fmt("%d differing file pairs over 4 runs (threads 1, 1, 2, 4)", differing)};
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
        {"gradients", gradients},         {"equations", equations},   {"perturbation", perturbation},
        {"chamfer", chamfer_exact},       {"ablation", ablation},     {"mvs", mvs_ground_truth},
        {"determinism", determinism}};
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) {
        const int k = std::atoi(argv[i]);
        if (k < 1 || k > static_cast<int>(criteria.size())) {
            std::fprintf(stderr, "usage: %s [criterion 1-%zu ...]\n", argv[0], criteria.size());
            return 1;
        }
        selected.insert(k);
    }
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!selected.empty() && !selected.count(static_cast<int>(i + 1))) continue;
        const auto t0 = std::chrono::steady_clock::now();
        const Verdict v = criteria[i].second();
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s %zu %s: %s (%.1f s)\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, v.detail.c_str(),
                    secs);
        std::fflush(stdout);
        failed += !v.pass;
    }
    std::printf("%d criteria failed\n", failed);
    return 0;
}
