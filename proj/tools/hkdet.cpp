// hkdet: command-line driver for the detection pipeline stages.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "hkdet/pipeline/stages.hpp"

int main(int argc, char** argv) {
    CLI::App app{"hkdet: proposal-based object detection pipeline"};
    app.require_subcommand(1, 1);

    std::string config_path, out_dir = "out", manifest, test_manifest, channel = "all", mode = "fused";
    std::vector<std::string> overrides, inputs;
    long long seed = -1;
    bool no_prior = false, verbose = false;
    double min_score = 0.0;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "pipeline config file (key = value)");
        sub->add_option("--out-dir", out_dir, "artifact directory")->capture_default_str();
        sub->add_option("--seed", seed, "override the config seed")->check(CLI::NonNegativeNumber);
        sub->add_option("--set", overrides, "config override key=value (repeatable)");
        sub->add_flag("-v,--verbose", verbose, "echo the run log to stdout");
    };

    const char* help[] = {"generate the synthetic train/test datasets",
                          "selective-search proposals for a split",
                          "cnn/hog/ifv features per proposal (fits the ifv codebook if absent)",
                          "per-channel one-vs-rest SVM banks",
                          "stacked fusion SVMs over the 3N channel scores",
                          "per-category bounding-box regressors",
                          "whole-image presence prior and gating thresholds",
                          "score, refine, suppress and gate detections",
                          "per-class AP and mAP report",
                          "categories won across reports",
                          "draw detections onto the split's images",
                          "run every stage end to end"};
    const auto& names = hkdet::stage_names();
    for (std::size_t i = 0; i < names.size(); ++i) {
        auto* sub = app.add_subcommand(names[i], help[i]);
        common(sub);
        const std::string& n = names[i];
        if (n != "synth" && n != "compare") sub->add_option("--manifest", manifest, "dataset manifest of the split");
        if (n == "all") sub->add_option("--test-manifest", test_manifest, "evaluation split manifest");
        if (n == "extract")
            sub->add_option("--channel", channel, "channel to extract")
                ->check(CLI::IsMember({"all", "cnn", "hog", "ifv"}))
                ->capture_default_str();
        if (n == "detect" || n == "eval" || n == "render") {
            sub->add_option("--mode", mode, "score source")
                ->check(CLI::IsMember({"fused", "cnn", "hog", "ifv"}))
                ->capture_default_str();
            sub->add_flag("--no-prior", no_prior, "skip presence gating");
        }
        if (n == "render") sub->add_option("--min-score", min_score, "draw detections scoring at least this");
        if (n == "compare") sub->add_option("inputs", inputs, "name=report_path pairs")->required();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        hkdet::StageOptions o;
        if (!config_path.empty()) o.config = hkdet::load_config(config_path);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw hkdet::Error("--set expects key=value, got '" + kv + "'");
            hkdet::set_config_value(o.config, hkdet::detail::trim(kv.substr(0, eq)), hkdet::detail::trim(kv.substr(eq + 1)));
        }
        if (seed >= 0) o.config.seed = static_cast<std::uint64_t>(seed);
        o.out_dir = out_dir;
        o.manifest = manifest;
        o.test_manifest = test_manifest;
        o.channel = channel;
        o.mode = mode;
        o.use_prior = !no_prior;
        o.inputs = inputs;
        o.render_min_score = min_score;
        if (verbose) o.echo = &std::cout;
        const std::string stage = app.get_subcommands().front()->get_name();
        if (stage == "all") {
            const auto rep = hkdet::run_all(o);
            std::cout << "mAP " << hkdet::format_real(rep.mean_ap) << '\n';
        } else {
            hkdet::run_stage(stage, o);
        }
    } catch (const std::exception& e) {
        std::cerr << "hkdet: error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
