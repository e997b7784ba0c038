#pragma once

// Pipeline configuration: line-based `key = value` text with documented
// defaults and ranges for every tunable.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hkdet/core.hpp"
#include "hkdet/model_io.hpp"

namespace hkdet {

struct PipelineConfig {
    // over-segmentation and proposals
    double segment_k = 300.0;
    double segment_sigma = 0.8;
    int segment_min_size = 50;
    int proposals_max_per_image = 2000;
    double proposals_min_side = 4.0;

    // HOG channel
    int hog_cells_x = 6;
    int hog_cells_y = 6;

    // IFV channel
    int ifv_patch = 8;
    int ifv_stride = 4;
    int pca_dim = 64;
    int pca_max_samples = 20000;
    int gmm_k = 16;
    int gmm_max_iters = 50;
    double gmm_tol = 1e-6;
    int gmm_max_samples = 20000;

    // CNN channel: `embedding` synthesizes a downsampled-pixel vector and
    // writes it through the ingestion format; `file` ingests
    // <cnn_dir>/<split>.cnn.txt produced elsewhere.
    std::string cnn_source = "embedding";
    std::string cnn_dir = ".";
    int cnn_side = 6;

    // training labels
    double label_pos_iou = 0.5;
    double label_neg_iou = 0.3;

    // per-channel SVM banks
    double svm_lambda = 1e-4;
    int svm_epochs = 10;

    // stacked fusion
    double fusion_lambda = 1e-3;
    int fusion_epochs = 10;
    int fusion_folds = 2;
    int fusion_standardize = 1;

    // box regression
    double regress_lambda = 1.0;
    double regress_min_iou = 0.6;
    std::string regress_channel = "cnn";

    // presence prior
    int prior_enabled = 1;
    double prior_lambda = 1e-3;
    int prior_epochs = 20;
    double prior_recall = 0.95;
    int prior_folds = 5;  // tau is chosen on out-of-fold scores
    std::string prior_tau = "auto";  // `auto` or a number shared by all categories

    // detection and evaluation
    double nms_iou = 0.3;
    double eval_iou = 0.5;

    // synthetic data
    int synth_classes = 3;
    int synth_train_images = 200;
    int synth_test_images = 50;
    int synth_max_shapes = 4;
    double synth_noise = 8.0;
    int synth_width = 96;
    int synth_height = 96;

    std::uint64_t seed = 0;
};

namespace detail {

struct ConfigKey {
    std::string name;
    std::function<void(PipelineConfig&, const std::string&)> set;
    std::function<std::string(const PipelineConfig&)> get;
};

inline double parse_config_real(const std::string& v) {
    const double x = parse_real(v);
    if (!std::isfinite(x)) throw Error("value must be finite");
    return x;
}

inline long long parse_config_int(const std::string& v) {
    std::size_t pos = 0;
    long long x = 0;
    try {
        x = std::stoll(v, &pos);
    } catch (const std::exception&) {
        throw Error("not an integer: '" + v + "'");
    }
    if (pos != v.size()) throw Error("not an integer: '" + v + "'");
    return x;
}

template <class T>
ConfigKey real_key(const std::string& name, T PipelineConfig::*field, double lo, double hi, bool lo_open = false) {
    return ConfigKey{
        name,
        [=](PipelineConfig& c, const std::string& v) {
            const double x = parse_config_real(v);
            if ((lo_open ? !(x > lo) : !(x >= lo)) || !(x <= hi)) {
                std::ostringstream os;
                os << "value " << v << " out of range " << (lo_open ? "(" : "[") << lo << ", " << hi << "]";
                throw Error(os.str());
            }
            c.*field = x;
        },
        [=](const PipelineConfig& c) { return format_real(c.*field); }};
}

inline ConfigKey int_key(const std::string& name, int PipelineConfig::*field, long long lo, long long hi) {
    return ConfigKey{name,
                     [=](PipelineConfig& c, const std::string& v) {
                         const long long x = parse_config_int(v);
                         if (x < lo || x > hi)
                             throw Error("value " + v + " out of range [" + std::to_string(lo) + ", " +
                                         std::to_string(hi) + "]");
                         c.*field = static_cast<int>(x);
                     },
                     [=](const PipelineConfig& c) { return std::to_string(c.*field); }};
}

inline ConfigKey choice_key(const std::string& name, std::string PipelineConfig::*field,
                            std::vector<std::string> choices) {
    return ConfigKey{name,
                     [=](PipelineConfig& c, const std::string& v) {
                         for (const auto& ch : choices)
                             if (ch == v) {
                                 c.*field = v;
                                 return;
                             }
                         std::string all;
                         for (const auto& ch : choices) all += (all.empty() ? "" : "|") + ch;
                         throw Error("value '" + v + "' must be one of " + all);
                     },
                     [=](const PipelineConfig& c) { return c.*field; }};
}

inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        k.push_back(real_key("segment.k", &PipelineConfig::segment_k, 0, 1e9, true));
        k.push_back(real_key("segment.sigma", &PipelineConfig::segment_sigma, 0, 20));
        k.push_back(int_key("segment.min_size", &PipelineConfig::segment_min_size, 1, 1 << 24));
        k.push_back(int_key("proposals.max_per_image", &PipelineConfig::proposals_max_per_image, 0, 1 << 24));
        k.push_back(real_key("proposals.min_side", &PipelineConfig::proposals_min_side, 0, 1e6));
        k.push_back(int_key("hog.cells_x", &PipelineConfig::hog_cells_x, 1, 64));
        k.push_back(int_key("hog.cells_y", &PipelineConfig::hog_cells_y, 1, 64));
        k.push_back(int_key("ifv.patch", &PipelineConfig::ifv_patch, 2, 64));
        k.push_back(int_key("ifv.stride", &PipelineConfig::ifv_stride, 1, 64));
        k.push_back(int_key("pca.dim", &PipelineConfig::pca_dim, 1, 4096));
        k.push_back(int_key("pca.max_samples", &PipelineConfig::pca_max_samples, 0, 1 << 26));
        k.push_back(int_key("gmm.k", &PipelineConfig::gmm_k, 1, 1024));
        k.push_back(int_key("gmm.max_iters", &PipelineConfig::gmm_max_iters, 1, 100000));
        k.push_back(real_key("gmm.tol", &PipelineConfig::gmm_tol, 0, 1));
        k.push_back(int_key("gmm.max_samples", &PipelineConfig::gmm_max_samples, 0, 1 << 26));
        k.push_back(choice_key("cnn.source", &PipelineConfig::cnn_source, {"embedding", "file"}));
        k.push_back(ConfigKey{"cnn.dir", [](PipelineConfig& c, const std::string& v) { c.cnn_dir = v; },
                              [](const PipelineConfig& c) { return c.cnn_dir; }});
        k.push_back(int_key("cnn.side", &PipelineConfig::cnn_side, 1, 64));
        k.push_back(real_key("label.pos_iou", &PipelineConfig::label_pos_iou, 0, 1, true));
        k.push_back(real_key("label.neg_iou", &PipelineConfig::label_neg_iou, 0, 1));
        k.push_back(real_key("svm.lambda", &PipelineConfig::svm_lambda, 0, 1e6, true));
        k.push_back(int_key("svm.epochs", &PipelineConfig::svm_epochs, 1, 100000));
        k.push_back(real_key("fusion.lambda", &PipelineConfig::fusion_lambda, 0, 1e6, true));
        k.push_back(int_key("fusion.epochs", &PipelineConfig::fusion_epochs, 1, 100000));
        k.push_back(int_key("fusion.folds", &PipelineConfig::fusion_folds, 1, 20));
        k.push_back(int_key("fusion.standardize", &PipelineConfig::fusion_standardize, 0, 1));
        k.push_back(real_key("regress.lambda", &PipelineConfig::regress_lambda, 0, 1e9));
        k.push_back(real_key("regress.min_iou", &PipelineConfig::regress_min_iou, 0, 1));
        k.push_back(choice_key("regress.channel", &PipelineConfig::regress_channel, {"cnn", "hog", "ifv"}));
        k.push_back(int_key("prior.enabled", &PipelineConfig::prior_enabled, 0, 1));
        k.push_back(real_key("prior.lambda", &PipelineConfig::prior_lambda, 0, 1e6, true));
        k.push_back(int_key("prior.epochs", &PipelineConfig::prior_epochs, 1, 100000));
        k.push_back(real_key("prior.recall", &PipelineConfig::prior_recall, 0, 1, true));
        k.push_back(int_key("prior.folds", &PipelineConfig::prior_folds, 2, 1000));
        k.push_back(ConfigKey{"prior.tau",
                              [](PipelineConfig& c, const std::string& v) {
                                  if (v != "auto") parse_config_real(v);
                                  c.prior_tau = v;
                              },
                              [](const PipelineConfig& c) { return c.prior_tau; }});
        k.push_back(real_key("nms.iou", &PipelineConfig::nms_iou, 0, 1, true));
        k.push_back(real_key("eval.iou", &PipelineConfig::eval_iou, 0, 1, true));
        k.push_back(int_key("synth.classes", &PipelineConfig::synth_classes, 1, 6));
        k.push_back(int_key("synth.train_images", &PipelineConfig::synth_train_images, 1, 1000000));
        k.push_back(int_key("synth.test_images", &PipelineConfig::synth_test_images, 1, 1000000));
        k.push_back(int_key("synth.max_shapes", &PipelineConfig::synth_max_shapes, 1, 16));
        k.push_back(real_key("synth.noise", &PipelineConfig::synth_noise, 0, 128));
        k.push_back(int_key("synth.width", &PipelineConfig::synth_width, 48, 4096));
        k.push_back(int_key("synth.height", &PipelineConfig::synth_height, 48, 4096));
        k.push_back(ConfigKey{"seed",
                              [](PipelineConfig& c, const std::string& v) {
                                  const long long x = parse_config_int(v);
                                  if (x < 0) throw Error("seed must be non-negative");
                                  c.seed = static_cast<std::uint64_t>(x);
                              },
                              [](const PipelineConfig& c) { return std::to_string(c.seed); }});
        return k;
    }();
    return keys;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Sets one key; throws with the key name on unknown keys or bad values.
inline void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& k : detail::config_keys()) {
        if (k.name != key) continue;
        if (value.empty()) throw Error("key '" + key + "' has no value");
        try {
            k.set(cfg, value);
        } catch (const Error& e) {
            throw Error("key '" + key + "': " + e.what());
        }
        return;
    }
    throw Error("unknown config key '" + key + "'");
}

/// `key = value` lines; `#` starts a comment. Errors carry the line number.
inline PipelineConfig read_config(std::istream& is) {
    PipelineConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    std::map<std::string, std::size_t> seen;
    while (std::getline(is, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error("config line " + std::to_string(line_no) + ": expected `key = value`");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (auto it = seen.find(key); it != seen.end())
            throw Error("config line " + std::to_string(line_no) + ": key '" + key + "' already set on line " +
                        std::to_string(it->second));
        seen[key] = line_no;
        try {
            set_config_value(cfg, key, value);
        } catch (const Error& e) {
            throw Error("config line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (cfg.label_neg_iou > cfg.label_pos_iou)
        throw Error("config: label.neg_iou must not exceed label.pos_iou");
    return cfg;
}

inline PipelineConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open config " + path);
    try {
        return read_config(is);
    } catch (const Error& e) {
        throw Error(path + ": " + e.what());
    }
}

/// Every key with its current value, in declaration order.
inline std::string config_to_string(const PipelineConfig& cfg) {
    std::string s;
    for (const auto& k : detail::config_keys()) s += k.name + " = " + k.get(cfg) + "\n";
    return s;
}

/// FNV-1a over the canonical serialization.
inline std::uint64_t config_hash(const PipelineConfig& cfg) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : config_to_string(cfg)) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace hkdet
