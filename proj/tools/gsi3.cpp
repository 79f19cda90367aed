// Command-line front end: gen, train, eval, gradcheck, ablate.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gsi3/chamfer.hpp"
#include "gsi3/config.hpp"
#include "gsi3/gradcheck.hpp"
#include "gsi3/synth.hpp"
#include "gsi3/train.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitCheckFailed = 3;

/// Options shared by the config-driven subcommands: the config file plus one
/// --section.key flag per config key.
struct ConfigOptions {
    std::string path;
    std::map<std::string, std::string> keys;
    std::optional<std::uint64_t> seed;
    std::optional<int> iters;
    std::optional<int> threads;
    std::string out;

    void attach(CLI::App* app, bool config_required) {
        auto* opt = app->add_option("-c,--config", path, "Run config (INI)")->check(CLI::ExistingFile);
        if (config_required) opt->required();
        for (const auto& key : gsi3::detail::known_keys())
            app->add_option("--" + key, keys[key], "Override " + key)->group("Config overrides");
        app->add_option("--seed", seed, "Seed for every random draw (train.seed)");
        app->add_option("--iters", iters, "Iteration count (train.iterations)");
        app->add_option("--threads", threads, "Worker threads (train.threads)");
        app->add_option("-o,--out", out, "Output directory (output.dir)");
    }

    [[nodiscard]] std::vector<std::string> overrides() const {
        std::vector<std::string> o;
        for (const auto& [k, v] : keys)
            if (!v.empty()) o.push_back(k + "=" + v);
        if (seed) o.push_back("train.seed=" + std::to_string(*seed));
        if (iters) o.push_back("train.iterations=" + std::to_string(*iters));
        if (threads) o.push_back("train.threads=" + std::to_string(*threads));
        if (!out.empty()) o.push_back("output.dir=" + out);
        return o;
    }

    [[nodiscard]] gsi3::RunConfig load() const {
        return path.empty() ? gsi3::config_with_overrides(overrides()) : gsi3::load_config(path, overrides());
    }
};

void print_report_summary(const std::string& name, const gsi3::Report& r) {
    std::printf("%-12s chamfer %.6f (initial %.6f)  total %.6f -> %.6f  gated %.3f  opaque %zu\n", name.c_str(),
                r.chamfer, r.initial_chamfer, r.log.front().total, r.log.back().total, r.gated_fraction,
                r.opaque_gaussians);
}

int run_gen(const ConfigOptions& o) {
    const auto cfg = o.load();
    const auto scene = cfg.scene_spec();
    const auto cams = gsi3::make_cameras(scene, cfg.views, cfg.width, cfg.height);
    auto spec = cfg.perturb_spec();
    if (!cfg.perturb) {
        spec.gamma_choices = {1.0};
        spec.brightness_lo = spec.brightness_hi = 1.0;
        spec.contrast_lo = spec.contrast_hi = 1.0;
    }
    const std::filesystem::path dir = std::filesystem::path(cfg.output) / "dataset";
    gsi3::write_dataset(scene, cams, spec, dir);
    gsi3::write_ply(scene.gt_points, dir / "gt_points.ply");
    std::printf("wrote %d views to %s\n", cfg.views, dir.string().c_str());
    return kExitOk;
}

int run_train(const ConfigOptions& o) {
    const auto cfg = o.load();
    const std::filesystem::path dir = cfg.output;
    const auto rep = gsi3::train(cfg, dir);
    print_report_summary("train", rep);
    std::printf("report written to %s\n", (dir / "report.json").string().c_str());
    return kExitOk;
}

int run_eval(const ConfigOptions& o, const std::string& checkpoint, const std::string& points) {
    const auto cfg = o.load();
    const auto scene = cfg.scene_spec();
    gsi3::PointSet pts;
    if (!points.empty()) {
        pts = gsi3::read_ply(points);
    } else {
        const auto cloud = gsi3::load_cloud(checkpoint);
        pts = gsi3::sample_points(cloud, static_cast<std::size_t>(cfg.eval_samples), cfg.seed);
    }
    std::printf("chamfer %.17g\n", gsi3::chamfer(pts, scene.gt_points));
    return kExitOk;
}

int run_gradcheck(int seeds, const std::string& corrupt) {
    gsi3::GradcheckOptions opt;
    opt.seeds.clear();
    for (int s = 1; s <= seeds; ++s) opt.seeds.push_back(static_cast<std::uint64_t>(s));
    opt.corrupt_group = corrupt;
    const auto rows = gsi3::gradcheck(opt);
    std::printf("%-24s %8s %14s %10s  %s\n", "group", "checked", "max_rel_err", "tolerance", "result");
    for (const auto& r : rows)
        std::printf("%-24s %8zu %14.3e %10.1e  %s\n", r.group.c_str(), r.checked, r.max_rel_err, r.tolerance,
                    r.pass() ? "pass" : "FAIL");
    return gsi3::all_pass(rows) ? kExitOk : kExitCheckFailed;
}

int run_ablate(const ConfigOptions& o) {
    const auto cfg = o.load();
    const std::filesystem::path dir = cfg.output;
    const auto runs = gsi3::ablate(cfg, dir);
    for (const auto& run : runs) print_report_summary(run.name, run.report);
    std::printf("combined table written to %s\n", (dir / "ablation.csv").string().c_str());
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Illumination-robust Gaussian splatting lab"};
    app.require_subcommand(1);

    ConfigOptions gen_opt, train_opt, eval_opt, ablate_opt;
    auto* gen = app.add_subcommand("gen", "Write the synthetic dataset described by a config");
    gen_opt.attach(gen, true);
    auto* train = app.add_subcommand("train", "Train and write report, log, checkpoints");
    train_opt.attach(train, true);
    auto* eval = app.add_subcommand("eval", "Chamfer distance of a checkpoint or PLY against the ground truth");
    eval_opt.attach(eval, true);
    std::string checkpoint, points;
    auto* src = eval->add_option_group("source");
    src->add_option("--checkpoint", checkpoint, "Gaussian checkpoint (cloud.gsi3)")->check(CLI::ExistingFile);
    src->add_option("--points", points, "ASCII PLY point set")->check(CLI::ExistingFile);
    src->require_option(1);
    auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of all gradient paths");
    int seeds = 10;
    std::string corrupt;
    grad->add_option("--seeds", seeds, "Number of randomized fixtures")->check(CLI::PositiveNumber);
    grad->add_option("--corrupt", corrupt, "Scale one group's analytic gradient (harness self-test)");
    auto* abl = app.add_subcommand("ablate", "Run baseline, illum-only, normal-only and full");
    ablate_opt.attach(abl, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gen) return run_gen(gen_opt);
        if (*train) return run_train(train_opt);
        if (*eval) return run_eval(eval_opt, checkpoint, points);
        if (*grad) return run_gradcheck(seeds, corrupt);
        if (*abl) return run_ablate(ablate_opt);
    } catch (const gsi3::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n\n%s", e.what(), app.help().c_str());
        return kExitUsage;
    } catch (const gsi3::NumericAbort& e) {
        std::fprintf(stderr, "numeric abort: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }
    return kExitUsage;
}
