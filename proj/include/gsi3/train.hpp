#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsi3/adam.hpp"
#include "gsi3/chamfer.hpp"
#include "gsi3/config.hpp"
#include "gsi3/illum.hpp"
#include "gsi3/image_io.hpp"
#include "gsi3/mvs.hpp"
#include "gsi3/normalcomp.hpp"
#include "gsi3/parallel.hpp"
#include "gsi3/splat.hpp"
#include "gsi3/synth.hpp"

namespace gsi3 {

/// Raised when a loss becomes non-finite; the trainer has already written a dump.
class NumericAbort : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training views derived from a config: cameras, perturbed targets, ranks and
/// reference normals.
struct Dataset {
    SceneSpec scene;
    std::vector<Camera> cameras;
    std::vector<ImageRGB> targets;
    std::vector<ScalarMap> ranks;
    std::vector<NormalMap> reference;
    std::vector<PerturbDraw> draws;
};

inline Dataset make_dataset(const RunConfig& cfg) {
    Dataset d;
    d.scene = cfg.scene_spec();
    d.cameras = make_cameras(d.scene, cfg.views, cfg.width, cfg.height);
    const OracleNormalProvider provider(d.scene, d.cameras, cfg.normal_noise);
    const PerturbSpec spec = cfg.perturb_spec();
    for (int v = 0; v < cfg.views; ++v) {
        const auto gt = render_gt(d.scene, d.cameras[v]);
        const PerturbDraw draw = cfg.perturb ? draw_perturbation(spec, v) : PerturbDraw{};
        ImageRGB target = perturbed_target(gt, draw);
        d.ranks.push_back(cdf_rank(luminance(target)));
        d.targets.push_back(std::move(target));
        d.reference.push_back(provider.normals(v));
        d.draws.push_back(draw);
    }
    return d;
}

/// Initial cloud: jittered ground-truth surface samples, flattened random orientations.
inline GaussianCloud initial_cloud(const RunConfig& cfg, const SceneSpec& scene) {
    Rng rng({cfg.seed, 0x696e6974ULL});
    GaussianCloud cloud;
    const double jitter = cfg.init_jitter * cfg.extent;
    const double s = cfg.init_scale * cfg.extent;
    for (int i = 0; i < cfg.gaussians; ++i) {
        Gaussian g;
        const auto& p = scene.gt_points[rng.below(scene.gt_points.size())];
        g.position = p + jitter * Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
        g.log_scale = Eigen::Vector3d(std::log(s), std::log(s), std::log(0.3 * s));
        Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        g.rotation = q.normalized();
        g.opacity_logit = logit(cfg.init_opacity);
        g.color_logit.setZero();
        cloud.push_back(g);
    }
    return cloud;
}

struct IterationLog {
    int iteration = 0;
    int view = 0;
    double illum = 0.0;
    double normal = 0.0;
    double gradient = 0.0;
    double mvs = 0.0;
    double total = 0.0;
    double gated_fraction = 0.0;
};

struct Report {
    std::string version = kVersion;
    std::vector<std::pair<std::string, std::string>> config;
    std::vector<IterationLog> log;
    double chamfer = 0.0;
    double initial_chamfer = 0.0;
    double gated_fraction = 0.0;  // mean over iterations
    std::size_t opaque_gaussians = 0;
    double wall_clock_seconds = 0.0;  // not part of to_json(); see write_timing

    /// Execution settings (threads, output location) are left out so that reports of
    /// the same experiment compare equal byte for byte.
    [[nodiscard]] nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["version"] = version;
        nlohmann::ordered_json c = nlohmann::ordered_json::object();
        for (const auto& [k, v] : config)
            if (k != "train.threads" && k != "output.dir") c[k] = v;
        j["config"] = c;
        j["chamfer"] = chamfer;
        j["initial_chamfer"] = initial_chamfer;
        j["gated_fraction"] = gated_fraction;
        j["opaque_gaussians"] = opaque_gaussians;
        j["iterations"] = log.size();
        if (!log.empty()) {
            j["first_total"] = log.front().total;
            j["final_total"] = log.back().total;
        }
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (const auto& r : log)
            rows.push_back({r.iteration, r.view, r.illum, r.normal, r.gradient, r.mvs, r.total, r.gated_fraction});
        j["log_columns"] = {"iteration", "view", "illum", "normal", "gradient", "mvs", "total", "gated_fraction"};
        j["log"] = rows;
        return j;
    }
};

inline std::string format_csv_row(const IterationLog& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.iteration, r.view, r.illum,
                  r.normal, r.gradient, r.mvs, r.total, r.gated_fraction);
    return buf;
}

class Trainer {
public:
    explicit Trainer(RunConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        set_thread_count(cfg_.threads);
        data_ = make_dataset(cfg_);
        cloud_ = initial_cloud(cfg_, data_.scene);
        cloud_adam_ = AdamState(cloud_.params().size());
        const double e = cfg_.extent;
        const auto& lr = cfg_.lr;
        lr_pattern_ = {lr.position * e, lr.position * e, lr.position * e, lr.log_scale, lr.log_scale, lr.log_scale,
                       lr.rotation, lr.rotation, lr.rotation, lr.rotation, lr.opacity, lr.color, lr.color, lr.color};
        if (cfg_.ablation.illum) {
            illum_.conv = ConvWeights::initialized(cfg_.seed);
            illum_.gamma.resize(cfg_.views);
            illum_.field.resize(cfg_.views);
            conv_adam_ = AdamState(ConvWeights::kSize);
            gamma_adam_.assign(cfg_.views, AdamState(4));
            field_adam_.assign(cfg_.views, AdamState(static_cast<std::size_t>(kFeatureSize) * kFeatureSize));
        }
    }

    [[nodiscard]] const RunConfig& config() const noexcept { return cfg_; }
    [[nodiscard]] const Dataset& dataset() const noexcept { return data_; }
    [[nodiscard]] const GaussianCloud& cloud() const noexcept { return cloud_; }
    [[nodiscard]] GaussianCloud& cloud() noexcept { return cloud_; }
    [[nodiscard]] const IllumState& illum_state() const noexcept { return illum_; }
    [[nodiscard]] int iteration() const noexcept { return iter_; }

    /// Directory for NaN dumps and snapshots; unset disables file output.
    void set_output(std::filesystem::path dir) { out_ = std::move(dir); }

    /// One optimization step on view (iteration mod views).
    IterationLog step() {
        const int n = cfg_.views;
        const int v = iter_ % n;
        const Camera& cam = data_.cameras[v];
        const auto& w = cfg_.weights;
        const bool use_illum = cfg_.ablation.illum, use_normal = cfg_.ablation.normal;
        const bool use_mvs = cfg_.ablation.mvs && iter_ % cfg_.mvs_every == 0;

        cloud_.zero_grad();
        RenderRecord rec;
        const RenderOutput r = rasterize(cloud_, cam, &rec);
        const ImageRGB& target = data_.targets[v];

        IterationLog log;
        log.iteration = iter_;
        log.view = v;

        ScalarMap per_pixel;
        IllumPass pass;
        if (use_illum) {
            illum_.conv.zero_grad();
            illum_.gamma[v].zero_grad();
            illum_.field[v].zero_grad();
            const auto& f = pass.forward(target, data_.ranks[v], r.color, illum_.gamma[v], illum_.conv,
                                         illum_.field[v], w.lambda);
            log.illum = f.loss.value;
            per_pixel = f.loss.per_pixel;
        } else {
            auto l = illum_loss(r.color, target, w.lambda);
            log.illum = l.value;
            per_pixel = std::move(l.per_pixel);
        }

        GateMask mask;
        const NormalMap& ref = data_.reference[v];
        if (use_normal) {
            mask = gate(per_pixel, w.threshold);
            log.gated_fraction = mask.fraction();
            log.normal = normal_loss(r.normal, ref, mask).value;
            log.gradient = gradient_loss(r.normal, ref, cfg_.gate_gradient ? &mask : nullptr).value;
        }

        std::optional<RenderRecord> rec_b;
        std::optional<DepthObservation> obs_a, obs_b;
        int u = (v + 1) % n;
        if (use_mvs) {
            rec_b.emplace();
            const RenderOutput rb = rasterize(cloud_, data_.cameras[u], &*rec_b);
            obs_a = DepthObservation::from_render(r);
            obs_b = DepthObservation::from_render(rb);
            log.mvs = mvs_loss(*obs_a, cam, *obs_b, data_.cameras[u]).value;
        }

        const double terms[4] = {log.illum, log.normal, log.gradient, log.mvs};
        for (double t : terms)
            if (!std::isfinite(t)) abort_numeric(log, r, target);
        LossWeights eff = w;
        if (!use_normal) eff.w_normal = eff.w_gradient = 0.0;
        if (!use_mvs) eff.w_mvs = 0.0;
        log.total = total_loss(log.illum, log.normal, log.gradient, log.mvs, eff);

        // Reverse pass.
        RenderGrad g;
        if (use_illum) g.color = pass.backward(w.w_illum, illum_.gamma[v], illum_.conv, illum_.field[v]);
        else g.color = illum_loss_backward(r.color, target, w.lambda, w.w_illum).first;
        if (use_normal) {
            g.normal = Buffer<3>(cfg_.width, cfg_.height);
            normal_loss_backward(r.normal, ref, mask, w.w_normal, g.normal);
            gradient_loss_backward(r.normal, ref, w.w_gradient, g.normal, cfg_.gate_gradient ? &mask : nullptr);
        }
        if (use_mvs) {
            MvsGrad mg = mvs_loss_backward(*obs_a, cam, *obs_b, data_.cameras[u], w.w_mvs);
            g.depth = std::move(mg.depth_a);
            RenderGrad gb;
            gb.depth = std::move(mg.depth_b);
            rasterize_backward(cloud_, *rec_b, gb);
        }
        rasterize_backward(cloud_, rec, g);

        for (double x : cloud_.grads())
            if (!std::isfinite(x)) abort_numeric(log, r, target);

        adam_step(cloud_.params(), cloud_.grads(), cloud_adam_, lr_pattern_);
        cloud_.project();
        if (use_illum) {
            adam_step(illum_.conv.theta, illum_.conv.grad, conv_adam_, cfg_.lr.conv);
            adam_step(illum_.gamma[v].theta, illum_.gamma[v].grad, gamma_adam_[v], cfg_.lr.gamma);
            adam_step(illum_.field[v].value.data(), illum_.field[v].grad.data(), field_adam_[v], cfg_.lr.field);
            illum_.field[v].project();
        }

        if (out_ && cfg_.snapshot_every > 0 && iter_ % cfg_.snapshot_every == 0) {
            std::filesystem::create_directories(*out_ / "snapshots");
            char name[64];
            std::snprintf(name, sizeof name, "iter_%06d_view_%02d.ppm", iter_, v);
            write_image(r.color, *out_ / "snapshots" / name);
        }
        ++iter_;
        return log;
    }

    /// Chamfer distance between samples of the opaque Gaussians and the ground truth.
    [[nodiscard]] double evaluate() const {
        const auto pts = sample_points(cloud_, static_cast<std::size_t>(cfg_.eval_samples), cfg_.seed);
        return chamfer(pts, data_.scene.gt_points);
    }

    [[nodiscard]] std::size_t opaque_count() const {
        std::size_t k = 0;
        for (std::size_t i = 0; i < cloud_.size(); ++i) k += cloud_.get(i).opacity() > 0.5;
        return k;
    }

private:
    [[noreturn]] void abort_numeric(const IterationLog& log, const RenderOutput& r, const ImageRGB& target) {
        std::string msg = "non-finite loss at iteration " + std::to_string(log.iteration) + " (view " +
                          std::to_string(log.view) + "): illum=" + std::to_string(log.illum) +
                          " normal=" + std::to_string(log.normal) + " gradient=" + std::to_string(log.gradient) +
                          " mvs=" + std::to_string(log.mvs);
        if (out_) {
            const auto dir = *out_ / "nan_dump";
            std::filesystem::create_directories(dir);
            write_image(r.color, dir / "render.pfm");
            write_image(target, dir / "target.pfm");
            write_scalar_map(r.depth, dir / "depth.pfm");
            write_scalar_map(r.alpha, dir / "alpha.pfm");
            write_image(r.normal.vectors(), dir / "normal.pfm");
            save_cloud(cloud_, dir / "cloud.gsi3");
            std::ofstream(dir / "diagnostic.txt") << msg << '\n';
            msg += "; buffers written to " + dir.string();
        }
        throw NumericAbort(msg);
    }

    RunConfig cfg_;
    Dataset data_;
    GaussianCloud cloud_;
    IllumState illum_;
    AdamState cloud_adam_;
    AdamState conv_adam_;
    std::vector<AdamState> gamma_adam_, field_adam_;
    std::vector<double> lr_pattern_;
    std::optional<std::filesystem::path> out_;
    int iter_ = 0;
};

inline void write_report(const Report& rep, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << rep.to_json().dump(2) << '\n';
}

inline void write_timing(const Report& rep, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["wall_clock_seconds"] = rep.wall_clock_seconds;
    std::ofstream(path) << j.dump(2) << '\n';
}

/// Full run. With an output directory it writes report.json, timing.json, loss.csv,
/// cloud.gsi3, illum.gsi3 (illumination on), points.ply and optional snapshots.
inline Report train(const RunConfig& cfg, const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
    const auto t0 = std::chrono::steady_clock::now();
    Trainer trainer(cfg);
    std::ofstream csv;
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        trainer.set_output(*out_dir);
        csv.open(*out_dir / "loss.csv");
        csv << "iteration,view,illum,normal,gradient,mvs,total,gated_fraction\n";
    }
    Report rep;
    rep.config = config_entries(cfg);
    rep.initial_chamfer = trainer.evaluate();
    double gated = 0.0;
    for (int i = 0; i < cfg.iterations; ++i) {
        const IterationLog l = trainer.step();
        gated += l.gated_fraction;
        if (i % cfg.log_every == 0 || i + 1 == cfg.iterations) {
            rep.log.push_back(l);
            if (csv.is_open()) csv << format_csv_row(l);
        }
    }
    rep.gated_fraction = gated / cfg.iterations;
    rep.chamfer = trainer.evaluate();
    rep.opaque_gaussians = trainer.opaque_count();
    rep.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (out_dir) {
        write_report(rep, *out_dir / "report.json");
        write_timing(rep, *out_dir / "timing.json");
        save_cloud(trainer.cloud(), *out_dir / "cloud.gsi3");
        if (cfg.ablation.illum) save_illum_state(trainer.illum_state(), *out_dir / "illum.gsi3");
        write_ply(sample_points(trainer.cloud(), static_cast<std::size_t>(cfg.eval_samples), cfg.seed),
                  *out_dir / "points.ply");
    }
    return rep;
}

struct AblationRun {
    std::string name;
    AblationSwitches switches;
    Report report;
};

/// The four configurations of the ablation: neither module, each alone, both.
/// The multi-view term follows the base config in all four.
inline std::vector<AblationRun> ablation_plan(const RunConfig& base) {
    const bool mvs = base.ablation.mvs;
    return {{"baseline", {false, false, mvs}, {}},
            {"illum-only", {true, false, mvs}, {}},
            {"normal-only", {false, true, mvs}, {}},
            {"full", {true, true, mvs}, {}}};
}

inline std::vector<AblationRun> ablate(const RunConfig& base, const std::optional<std::filesystem::path>& out_dir) {
    auto runs = ablation_plan(base);
    for (auto& run : runs) {
        RunConfig c = base;
        c.ablation = run.switches;
        std::optional<std::filesystem::path> dir;
        if (out_dir) dir = *out_dir / run.name;
        run.report = train(c, dir);
    }
    if (out_dir) {
        std::ofstream csv(*out_dir / "ablation.csv");
        csv << "config,illum,normal,mvs,chamfer,initial_chamfer,final_total,gated_fraction\n";
        for (const auto& run : runs) {
            char buf[256];
            std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%.17g,%.17g,%.17g,%.17g\n", run.name.c_str(),
                          run.switches.illum, run.switches.normal, run.switches.mvs, run.report.chamfer,
                          run.report.initial_chamfer, run.report.log.back().total, run.report.gated_fraction);
            csv << buf;
        }
    }
    return runs;
}

} // namespace gsi3
