#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "gsi3/normalcomp.hpp"
#include "gsi3/synth.hpp"

namespace gsi3 {

inline constexpr const char* kVersion = "gsi3 0.1.0";

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct LearningRates {
    double position = 2e-4;  // multiplied by the scene extent
    double log_scale = 5e-3;
    double rotation = 1e-3;
    double opacity = 5e-2;
    double color = 2.5e-3;
    double gamma = 1e-3;
    double conv = 1e-3;
    double field = 1e-2;
};

struct AblationSwitches {
    bool illum = true;
    bool normal = true;
    bool mvs = true;
};

/// Everything a run depends on. Sections of the config file map onto the groups below.
struct RunConfig {
    // [scene]
    SceneKind scene = SceneKind::sphere;
    double extent = 1.0;
    int gt_points = 4000;
    double texture_frequency = 6.0;
    double ambient = 0.3;
    // [perturb]
    bool perturb = true;
    double brightness_lo = 0.5, brightness_hi = 1.5;
    double contrast_lo = 0.5, contrast_hi = 1.5;
    std::vector<double> gamma_choices{0.1, 0.8};
    // [render]
    int views = 16;
    int width = 64;
    int height = 64;
    // [train]
    int iterations = 2000;
    std::uint64_t seed = 1;
    int gaussians = 1500;
    double init_jitter = 0.05;   // position noise, fraction of extent
    double init_scale = 0.06;    // in-plane scale, fraction of extent
    double init_opacity = 0.7;
    int mvs_every = 4;
    int log_every = 1;
    int snapshot_every = 0;      // 0 disables PPM snapshots
    int threads = 1;
    // [loss]
    LossWeights weights;
    bool gate_gradient = false;
    double normal_noise = 0.0;
    // [lr]
    LearningRates lr;
    // [ablation]
    AblationSwitches ablation;
    // [eval]
    int eval_samples = 4000;
    // [output]
    std::string output = "out";

    void validate() const {
        if (!(extent > 0.0)) throw ConfigError("scene.extent must be positive");
        if (gt_points < 1) throw ConfigError("scene.gt_points must be at least 1");
        if (width < 16 || height < 16) throw ConfigError("render resolution must be at least 16");
        if (views < 2) throw ConfigError("render.views must be at least 2");
        if (iterations < 1) throw ConfigError("train.iterations must be at least 1");
        if (gaussians < 1) throw ConfigError("train.gaussians must be at least 1");
        if (mvs_every < 1) throw ConfigError("train.mvs_every must be at least 1");
        if (log_every < 1) throw ConfigError("train.log_every must be at least 1");
        if (snapshot_every < 0) throw ConfigError("train.snapshot_every must be non-negative");
        if (!(init_opacity > 0.0 && init_opacity < 1.0)) throw ConfigError("train.init_opacity must be in (0,1)");
        if (eval_samples < 1) throw ConfigError("eval.samples must be at least 1");
        if (normal_noise < 0.0) throw ConfigError("loss.normal_noise must be non-negative");
        try {
            weights.validate();
            perturb_spec().validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }

    [[nodiscard]] PerturbSpec perturb_spec() const {
        PerturbSpec p;
        p.brightness_lo = brightness_lo;
        p.brightness_hi = brightness_hi;
        p.contrast_lo = contrast_lo;
        p.contrast_hi = contrast_hi;
        p.gamma_choices = gamma_choices;
        p.seed = seed;
        return p;
    }

    [[nodiscard]] SceneSpec scene_spec() const {
        SceneSpec s = make_scene(scene, extent, seed, gt_points);
        s.texture.frequency = texture_frequency;
        s.light.ambient = ambient;
        return s;
    }
};

namespace detail {

inline std::string format_list(const std::vector<double>& v) {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

inline std::vector<double> parse_list(const std::string& s, const std::string& key) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("bad number list for " + key + ": '" + s + "'");
        }
    }
    return out;
}

/// Binds every config key to a member so reading, writing and key validation share one table.
template <typename Visitor>
void visit_fields(RunConfig& c, Visitor&& v) {
    v("scene.kind", c.scene);
    v("scene.extent", c.extent);
    v("scene.gt_points", c.gt_points);
    v("scene.texture_frequency", c.texture_frequency);
    v("scene.ambient", c.ambient);
    v("perturb.enabled", c.perturb);
    v("perturb.brightness_lo", c.brightness_lo);
    v("perturb.brightness_hi", c.brightness_hi);
    v("perturb.contrast_lo", c.contrast_lo);
    v("perturb.contrast_hi", c.contrast_hi);
    v("perturb.gamma_choices", c.gamma_choices);
    v("render.views", c.views);
    v("render.width", c.width);
    v("render.height", c.height);
    v("train.iterations", c.iterations);
    v("train.seed", c.seed);
    v("train.gaussians", c.gaussians);
    v("train.init_jitter", c.init_jitter);
    v("train.init_scale", c.init_scale);
    v("train.init_opacity", c.init_opacity);
    v("train.mvs_every", c.mvs_every);
    v("train.log_every", c.log_every);
    v("train.snapshot_every", c.snapshot_every);
    v("train.threads", c.threads);
    v("loss.lambda", c.weights.lambda);
    v("loss.threshold", c.weights.threshold);
    v("loss.w_illum", c.weights.w_illum);
    v("loss.w_normal", c.weights.w_normal);
    v("loss.w_gradient", c.weights.w_gradient);
    v("loss.w_mvs", c.weights.w_mvs);
    v("loss.gate_gradient", c.gate_gradient);
    v("loss.normal_noise", c.normal_noise);
    v("lr.position", c.lr.position);
    v("lr.log_scale", c.lr.log_scale);
    v("lr.rotation", c.lr.rotation);
    v("lr.opacity", c.lr.opacity);
    v("lr.color", c.lr.color);
    v("lr.gamma", c.lr.gamma);
    v("lr.conv", c.lr.conv);
    v("lr.field", c.lr.field);
    v("ablation.illum", c.ablation.illum);
    v("ablation.normal", c.ablation.normal);
    v("ablation.mvs", c.ablation.mvs);
    v("eval.samples", c.eval_samples);
    v("output.dir", c.output);
}

inline bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
    if (s == "0" || s == "false" || s == "off" || s == "no") return false;
    throw ConfigError("bad boolean for " + key + ": '" + s + "'");
}

template <typename T>
T parse_number(const std::string& s, const std::string& key) {
    std::istringstream is(s);
    T v{};
    if (!(is >> v) || !(is >> std::ws).eof()) throw ConfigError("bad value for " + key + ": '" + s + "'");
    return v;
}

struct Reader {
    const boost::property_tree::ptree& tree;

    template <typename T>
    void operator()(const std::string& key, T& field) const {
        const auto node = tree.get_optional<std::string>(boost::property_tree::ptree::path_type(key, '.'));
        if (!node) return;
        const std::string& s = *node;
        if constexpr (std::is_same_v<T, bool>) field = parse_bool(s, key);
        else if constexpr (std::is_same_v<T, SceneKind>) {
            try {
                field = parse_scene_kind(s);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        } else if constexpr (std::is_same_v<T, std::string>) field = s;
        else if constexpr (std::is_same_v<T, std::vector<double>>) field = parse_list(s, key);
        else field = parse_number<T>(s, key);
    }
};

inline std::set<std::string> known_keys() {
    std::set<std::string> keys;
    RunConfig c;
    visit_fields(c, [&](const std::string& k, auto&) { keys.insert(k); });
    return keys;
}

} // namespace detail

/// Applies "section.key=value" overrides on top of a property tree.
inline void apply_overrides(boost::property_tree::ptree& tree, const std::vector<std::string>& overrides) {
    const auto keys = detail::known_keys();
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("override must be key=value: '" + o + "'");
        const std::string key = o.substr(0, eq);
        if (!keys.count(key)) throw ConfigError("unknown config key '" + key + "'");
        tree.put(boost::property_tree::ptree::path_type(key, '.'), o.substr(eq + 1));
    }
}

inline RunConfig config_from_tree(const boost::property_tree::ptree& tree) {
    const auto keys = detail::known_keys();
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty())
            throw ConfigError("config key '" + section + "' must live inside a section");
        for (const auto& [key, value] : body)
            if (!keys.count(section + "." + key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
    }
    RunConfig c;
    detail::visit_fields(c, detail::Reader{tree});
    c.validate();
    return c;
}

/// Reads an INI file ([section] key = value, ';' or '#' comments) and applies overrides.
inline RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(e.what());
    }
    apply_overrides(tree, overrides);
    return config_from_tree(tree);
}

inline RunConfig config_with_overrides(const std::vector<std::string>& overrides) {
    boost::property_tree::ptree tree;
    apply_overrides(tree, overrides);
    return config_from_tree(tree);
}

/// Every key with its current value as text, in table order.
inline std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> out;
    RunConfig c = cfg;
    detail::visit_fields(c, [&](const std::string& key, auto& field) {
        using T = std::decay_t<decltype(field)>;
        std::ostringstream os;
        os.precision(17);
        if constexpr (std::is_same_v<T, bool>) os << (field ? "true" : "false");
        else if constexpr (std::is_same_v<T, SceneKind>) os << to_string(field);
        else if constexpr (std::is_same_v<T, std::vector<double>>) os << detail::format_list(field);
        else os << field;
        out.emplace_back(key, os.str());
    });
    return out;
}

/// Serializes a config back to INI text that load_config reads to an equal config.
inline std::string to_ini(const RunConfig& cfg) {
    std::ostringstream os;
    std::string section;
    for (const auto& [key, value] : config_entries(cfg)) {
        const auto dot = key.find('.');
        const std::string s = key.substr(0, dot);
        if (s != section) {
            os << (section.empty() ? "" : "\n") << '[' << s << "]\n";
            section = s;
        }
        os << key.substr(dot + 1) << " = " << value << '\n';
    }
    return os.str();
}

} // namespace gsi3
