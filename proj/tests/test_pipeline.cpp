#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "hkdet/pipeline/stages.hpp"

using namespace hkdet;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("hkdet_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string config_error(const std::string& text) {
    std::istringstream is(text);
    try {
        read_config(is);
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

// Small but complete configuration for wiring tests.
PipelineConfig small_config() {
    PipelineConfig c;
    c.synth_train_images = 30;
    c.synth_test_images = 10;
    c.synth_width = 64;
    c.synth_height = 64;
    c.synth_max_shapes = 2;
    c.pca_dim = 16;
    c.gmm_k = 4;
    c.gmm_max_iters = 15;
    c.prior_folds = 3;
    return c;
}

int run_cli(const std::string& args, const fs::path& err) {
    const std::string cmd = std::string(HKDET_CLI) + " " + args + " >/dev/null 2>" + err.string();
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Config, EmptyFileGivesDefaults) {
    std::istringstream is("# only a comment\n\n");
    const auto c = read_config(is);
    EXPECT_EQ(config_to_string(c), config_to_string(PipelineConfig{}));
    EXPECT_EQ(config_hash(c), config_hash(PipelineConfig{}));
}

TEST(Config, ParsesKeys) {
    std::istringstream is("gmm.k = 16\nsvm.lambda=1e-3  # trailing comment\ncnn.source = file\nprior.tau = -0.5\n");
    const auto c = read_config(is);
    EXPECT_EQ(c.gmm_k, 16);
    EXPECT_EQ(c.svm_lambda, 1e-3);
    EXPECT_EQ(c.cnn_source, "file");
    EXPECT_EQ(c.prior_tau, "-0.5");
    EXPECT_NE(config_hash(c), config_hash(PipelineConfig{}));
}

TEST(Config, ShippedConfigListsTheDefaults) {
    const auto c = load_config(std::string(HKDET_SOURCE_DIR) + "/configs/synthetic.conf");
    EXPECT_EQ(config_to_string(c), config_to_string(PipelineConfig{}));
}

TEST(Config, ErrorsNameTheLine) {
    EXPECT_NE(config_error("\ngmm.k = 0\n").find("config line 2"), std::string::npos);
    EXPECT_NE(config_error("gmm.k = 16\nbogus.key = 1\n").find("config line 2"), std::string::npos);
    EXPECT_NE(config_error("gmm.k = 16\n\n\nno equals sign\n").find("config line 4"), std::string::npos);
    EXPECT_NE(config_error("gmm.k = 4\ngmm.k = 5\n").find("config line 2"), std::string::npos);
    EXPECT_NE(config_error("svm.lambda = abc\n").find("config line 1"), std::string::npos);
    EXPECT_NE(config_error("cnn.source = camera\n").find("config line 1"), std::string::npos);
    EXPECT_NE(config_error("prior.tau = soon\n").find("config line 1"), std::string::npos);
    EXPECT_NE(config_error("label.pos_iou = 0.2\n"), "");
}

TEST(Manifest, ParsesAndRoundTrips) {
    std::istringstream is("2 cat dog\nim1 a.ppm 2\n0 1 2 3 4\n1 0 0 5 5 1\n\nim2 b.ppm 0\n");
    const auto m = read_manifest(is);
    ASSERT_EQ(m.images.size(), 2u);
    EXPECT_EQ(m.category_names, (std::vector<std::string>{"cat", "dog"}));
    EXPECT_EQ(m.images[0].ground_truths[1].box, (Box{0, 0, 5, 5}));
    EXPECT_EQ(m.all_ground_truths().size(), 2u);
    std::ostringstream os;
    write_manifest(os, m);
    std::istringstream again(os.str());
    EXPECT_EQ(read_manifest(again).all_ground_truths(), m.all_ground_truths());
}

TEST(Manifest, ErrorsNameTheLine) {
    auto error = [](const std::string& text) {
        std::istringstream is(text);
        try {
            read_manifest(is);
        } catch (const Error& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    EXPECT_NE(error("2 cat\n").find("line 1"), std::string::npos);
    EXPECT_NE(error("1 cat\nim1 a.ppm 1\n3 0 0 1 1\n").find("line 3"), std::string::npos);
    EXPECT_NE(error("1 cat\nim1 a.ppm 1\n0 5 0 1 1\n").find("line 3"), std::string::npos);
    EXPECT_NE(error("1 cat\nim1 a.ppm 0\nim1 b.ppm 0\n").find("line 3"), std::string::npos);
    EXPECT_NE(error("1 cat\nim1 a.ppm 2\n0 0 0 1 1\n").find("missing"), std::string::npos);
    EXPECT_NE(error(""), "");
}

TEST(Synthetic, SingleShapeBoxIsTheDrawnExtent) {
    SynthSpec spec;
    spec.max_shapes = 1;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        const auto scene = render_scene(rng, spec);
        ASSERT_EQ(scene.shapes.size(), 1u);
        int x0 = spec.width, y0 = spec.height, x1 = 0, y1 = 0;
        for (int y = 0; y < spec.height; ++y)
            for (int x = 0; x < spec.width; ++x)
                if (scene.masks[0][static_cast<std::size_t>(y) * spec.width + x]) {
                    x0 = std::min(x0, x);
                    y0 = std::min(y0, y);
                    x1 = std::max(x1, x + 1);
                    y1 = std::max(y1, y + 1);
                }
        EXPECT_EQ(scene.boxes[0], (Box{double(x0), double(y0), double(x1), double(y1)}));
    }
}

TEST(Synthetic, DeterministicAndCountsInRange) {
    const auto a = scratch("synth_a"), b = scratch("synth_b");
    SynthSpec spec;
    spec.images = 100;
    spec.classes = 3;
    spec.max_shapes = 4;
    spec.seed = 5;
    const auto ma = synth_generate(spec, a.string(), "s");
    const auto mb = synth_generate(spec, b.string(), "s");
    EXPECT_EQ(slurp(ma), slurp(mb));
    EXPECT_EQ(slurp(a / "images" / "s_0042.ppm"), slurp(b / "images" / "s_0042.ppm"));
    const auto m = load_manifest(ma);
    EXPECT_EQ(m.images.size(), 100u);
    const auto n = m.all_ground_truths().size();
    EXPECT_GE(n, 100u);
    EXPECT_LE(n, 400u);
    for (const auto& im : m.images) {
        EXPECT_GE(im.ground_truths.size(), 1u);
        EXPECT_LE(im.ground_truths.size(), 4u);
    }
    spec.classes = 0;
    EXPECT_THROW(synth_generate(spec, a.string(), "bad"), Error);
}

TEST(Artifacts, FeatureMatrixRoundTrip) {
    const auto dir = scratch("featmat");
    FeatureMatrix fm;
    fm.append({1.5, -2, 1e-8});
    fm.append({0, 3.25, 7});
    save_feature_matrix(dir / "m.bin", fm);
    const auto back = load_feature_matrix(dir / "m.bin");
    EXPECT_EQ(back.rows, 2u);
    EXPECT_EQ(back.cols, 3u);
    EXPECT_EQ(back.data, fm.data);
    EXPECT_THROW(fm.append({1}), Error);
    std::ofstream(dir / "bad.bin") << "HKFEAT 1\n4 4\nxx";
    EXPECT_THROW(load_feature_matrix(dir / "bad.bin"), Error);
}

TEST(Labels, ProposalLabelThresholds) {
    const PipelineConfig cfg;
    const std::vector<GroundTruth> gts{{"a", Box{0, 0, 10, 10}, 2}};
    EXPECT_EQ(proposal_label(Box{0, 0, 10, 10}, gts, cfg), 2);
    EXPECT_EQ(proposal_label(Box{0, 0, 5, 10}, gts, cfg), 2);          // IoU 0.5
    EXPECT_EQ(proposal_label(Box{0, 0, 4, 10}, gts, cfg), kIgnoreLabel);  // IoU 0.4
    EXPECT_EQ(proposal_label(Box{0, 0, 2, 10}, gts, cfg), -1);         // IoU 0.2
    EXPECT_EQ(proposal_label(Box{0, 0, 1, 1}, {}, cfg), -1);
}

TEST(Stages, MissingUpstreamArtifactNamesTheStage) {
    const auto dir = scratch("missing");
    StageOptions o;
    o.config = small_config();
    o.out_dir = (dir / "out").string();
    SynthSpec spec;
    spec.images = 2;
    o.manifest = synth_generate(spec, (dir / "data").string(), "tiny");
    auto message = [&](const std::string& stage) {
        try {
            run_stage(stage, o);
        } catch (const Error& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    EXPECT_NE(message("extract").find("run `propose` first"), std::string::npos);
    EXPECT_NE(message("detect").find("run `propose` first"), std::string::npos);
    EXPECT_NE(message("eval").find("run `detect` first"), std::string::npos);
    run_stage("propose", o);
    EXPECT_NE(message("train-svm").find("run `extract` first"), std::string::npos);
    EXPECT_NE(message("detect").find("first"), std::string::npos);
    o.manifest.clear();
    EXPECT_NE(message("propose").find("--manifest"), std::string::npos);
    EXPECT_THROW(run_stage("nonsense", o), Error);
}

TEST(Stages, WholeGraphOnSmallSyntheticData) {
    const auto dir = scratch("graph");
    StageOptions o;
    o.config = small_config();
    o.out_dir = dir.string();
    const auto rep = run_all(o);
    const ArtifactPaths paths{dir};

    // the report's mAP is the mean of its per-class column
    const auto file = load_report(paths.report("test", "").string());
    ASSERT_EQ(file.rows.size(), 3u);
    EXPECT_EQ(file.mean_ap, mean_ap(file.rows));
    EXPECT_EQ(file.mean_ap, rep.mean_ap);
    EXPECT_GE(rep.mean_ap, 0.0);
    EXPECT_LE(rep.mean_ap, 1.0);

    // every stage left a log with hash and seed
    for (const auto& name : {"synth", "propose.train", "extract.test", "train-svm", "train-fusion", "train-regressor",
                             "train-prior", "detect.test", "eval.test"}) {
        const auto log = slurp(paths.log(name));
        EXPECT_NE(log.find("config_hash "), std::string::npos) << name;
        EXPECT_NE(log.find("seed 0"), std::string::npos) << name;
    }

    // rerunning a stage with identical inputs gives identical bytes
    StageOptions te = o;
    te.manifest = (dir / "data" / "test.manifest").string();
    const auto dets = slurp(paths.detections("test", ""));
    const auto report = slurp(paths.report("test", ""));
    stages::detect(te);
    stages::eval(te);
    EXPECT_EQ(slurp(paths.detections("test", "")), dets);
    EXPECT_EQ(slurp(paths.report("test", "")), report);

    // single-channel and ungated variants, then compare and render
    te.mode = "hog";
    te.use_prior = false;
    stages::detect(te);
    stages::eval(te);
    te.inputs = {"fused=" + paths.report("test", "").string(), "hog=" + paths.report("test", ".hog.noprior").string()};
    stages::compare(te);
    const auto cmp = slurp(dir / "reports" / "compare.txt");
    EXPECT_EQ(cmp.rfind("name categories_won mAP\n", 0), 0u);
    EXPECT_NE(cmp.find("\nhog "), std::string::npos);
    te.mode = "fused";
    te.use_prior = true;
    stages::render(te);
    EXPECT_EQ(load_pnm((paths.render_dir("test") / "test_0000.ppm").string()).width(), 64);
}

TEST(Cli, ExitCodesAndDiagnostics) {
    const auto dir = scratch("cli");
    const auto err = dir / "stderr.txt";
    EXPECT_EQ(run_cli("--help", err), 0);
    EXPECT_NE(run_cli("", err), 0);
    EXPECT_NE(run_cli("frobnicate", err), 0);

    EXPECT_EQ(run_cli("eval --out-dir " + dir.string(), err), 1);
    const auto msg = slurp(err);
    EXPECT_EQ(msg, "hkdet: error: eval: --manifest is required\n");

    std::ofstream(dir / "bad.conf") << "gmm.k = 0\n";
    EXPECT_EQ(run_cli("synth --config " + (dir / "bad.conf").string() + " --out-dir " + dir.string(), err), 1);
    EXPECT_NE(slurp(err).find("config line 1"), std::string::npos);
    EXPECT_EQ(run_cli("synth --set nope=1 --out-dir " + dir.string(), err), 1);

    EXPECT_EQ(run_cli("synth --set synth.train_images=2 --set synth.test_images=1 --out-dir " + dir.string(), err), 0);
    EXPECT_TRUE(fs::exists(dir / "data" / "train.manifest"));
    EXPECT_EQ(load_manifest((dir / "data" / "test.manifest").string()).images.size(), 1u);
}
