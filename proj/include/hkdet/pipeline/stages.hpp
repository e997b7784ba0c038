#pragma once

// Stage executor for the full detection graph:
//   propose -> extract -> train-svm -> train-fusion -> train-regressor
//   -> train-prior -> detect -> eval, plus compare / render / all.
// Every stage reads and writes plain files under one output directory so any
// stage can be rerun in isolation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hkdet/classify.hpp"
#include "hkdet/context.hpp"
#include "hkdet/core.hpp"
#include "hkdet/eval.hpp"
#include "hkdet/features.hpp"
#include "hkdet/image.hpp"
#include "hkdet/model_io.hpp"
#include "hkdet/pipeline/config.hpp"
#include "hkdet/pipeline/manifest.hpp"
#include "hkdet/pipeline/synth.hpp"
#include "hkdet/proposals.hpp"
#include "hkdet/regress.hpp"

namespace hkdet {

namespace fs = std::filesystem;

inline const std::vector<std::string>& channel_names() {
    static const std::vector<std::string> names{"cnn", "hog", "ifv"};
    return names;
}

struct StageOptions {
    PipelineConfig config;
    std::string out_dir = "out";
    std::string manifest;       // split the stage works on
    std::string test_manifest;  // `all` only: evaluation split
    std::string channel = "all";  // extract: cnn|hog|ifv|all
    std::string mode = "fused";   // detect/eval: fused|cnn|hog|ifv
    bool use_prior = true;        // detect: apply presence gating
    std::vector<std::string> inputs;  // compare: name=report_path
    double render_min_score = 0.0;
    std::ostream* echo = nullptr;  // optional progress sink
};

// ---------------------------------------------------------------------------
// Artifact layout

struct ArtifactPaths {
    fs::path root;

    fs::path proposals(const std::string& split) const { return root / "proposals" / (split + ".txt"); }
    fs::path features(const std::string& split, const std::string& channel) const {
        return root / "features" / (split + "." + channel + (channel == "cnn" ? ".txt" : ".bin"));
    }
    fs::path image_features(const std::string& split) const { return root / "features" / (split + ".image_ifv.bin"); }
    fs::path model(const std::string& name) const { return root / "models" / (name + ".model"); }
    fs::path bank(const std::string& channel) const { return model("bank_" + channel); }
    fs::path detections(const std::string& split, const std::string& variant) const {
        return root / "detections" / (split + variant + ".txt");
    }
    fs::path report(const std::string& split, const std::string& variant) const {
        return root / "reports" / (split + variant + ".report");
    }
    fs::path log(const std::string& name) const { return root / "logs" / (name + ".log"); }
    fs::path render_dir(const std::string& split) const { return root / "render" / split; }
};

inline std::string split_name(const std::string& manifest_path) { return fs::path(manifest_path).stem().string(); }

inline void require_artifact(const fs::path& p, const std::string& stage) {
    if (!fs::exists(p)) throw Error("missing " + p.string() + "; run `" + stage + "` first");
}

/// Suffix distinguishing detect/eval variants: "" for the default fused
/// pipeline with gating.
inline std::string variant_suffix(const StageOptions& o) {
    std::string v;
    if (o.mode != "fused") v += "." + o.mode;
    if (!o.use_prior) v += ".noprior";
    return v;
}

// ---------------------------------------------------------------------------
// Run log

class RunLog {
public:
    RunLog(const ArtifactPaths& paths, const std::string& name, const StageOptions& o) : echo_(o.echo) {
        fs::create_directories(paths.log(name).parent_path());
        os_.open(paths.log(name));
        if (!os_) throw Error("cannot write run log " + paths.log(name).string());
        char hash[32];
        std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash(o.config)));
        line("stage " + name);
        line(std::string("config_hash ") + hash);
        line("seed " + std::to_string(o.config.seed));
    }

    void line(const std::string& s) {
        os_ << s << '\n';
        if (echo_) *echo_ << s << '\n';
    }

private:
    std::ofstream os_;
    std::ostream* echo_;
};

// ---------------------------------------------------------------------------
// Proposal and feature files

struct ProposalSet {
    // proposals per image, in manifest order; the index within an image is
    // the proposal index used by the feature files
    std::vector<std::string> image_ids;
    std::vector<std::vector<Box>> boxes;

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& b : boxes) n += b.size();
        return n;
    }
};

inline void write_proposals(const fs::path& path, const ProposalSet& ps) {
    fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path.string());
    for (std::size_t i = 0; i < ps.image_ids.size(); ++i)
        for (const auto& b : ps.boxes[i])
            os << ps.image_ids[i] << ' ' << format_real(b.x_min) << ' ' << format_real(b.y_min) << ' '
               << format_real(b.x_max) << ' ' << format_real(b.y_max) << '\n';
}

/// Reads a proposals dump and aligns it with the manifest's image order.
inline ProposalSet read_proposals(const fs::path& path, const DatasetManifest& m) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open " + path.string());
    std::map<std::string, std::size_t> index;
    ProposalSet ps;
    for (const auto& im : m.images) {
        index[im.image_id] = ps.image_ids.size();
        ps.image_ids.push_back(im.image_id);
        ps.boxes.emplace_back();
    }
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        std::string id;
        double x0, y0, x1, y1;
        if (!(ls >> id >> x0 >> y0 >> x1 >> y1))
            throw Error(path.string() + " line " + std::to_string(line_no) + ": malformed proposal");
        auto it = index.find(id);
        if (it == index.end())
            throw Error(path.string() + " line " + std::to_string(line_no) + ": image '" + id + "' not in manifest");
        ps.boxes[it->second].push_back(Box::make(x0, y0, x1, y1));
    }
    return ps;
}

/// Dense float32 matrix file: `HKFEAT 1` line, `rows cols` line, then
/// little-endian float32 values row-major.
struct FeatureMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<float> data;

    Vector row(std::size_t r) const {
        return Vector(data.begin() + static_cast<std::ptrdiff_t>(r * cols),
                      data.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
    }
    void append(const Vector& v) {
        if (rows == 0 && cols == 0) cols = v.size();
        if (v.size() != cols) throw Error("feature row length mismatch");
        for (double x : v) data.push_back(static_cast<float>(x));
        ++rows;
    }
};

inline void save_feature_matrix(const fs::path& path, const FeatureMatrix& fm) {
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path.string());
    os << "HKFEAT 1\n" << fm.rows << ' ' << fm.cols << '\n';
    for (float f : fm.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                               static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
        os.write(bytes, 4);
    }
}

inline FeatureMatrix load_feature_matrix(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path.string());
    std::string magic;
    int version = 0;
    FeatureMatrix fm;
    if (!(is >> magic >> version) || magic != "HKFEAT" || version != 1) throw Error(path.string() + ": not a feature matrix");
    if (!(is >> fm.rows >> fm.cols) || is.get() != '\n') throw Error(path.string() + ": bad feature matrix header");
    std::vector<unsigned char> raw(fm.rows * fm.cols * 4);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw Error(path.string() + ": truncated feature matrix");
    fm.data.resize(fm.rows * fm.cols);
    for (std::size_t i = 0; i < fm.data.size(); ++i) {
        const std::uint32_t bits = raw[4 * i] | (raw[4 * i + 1] << 8) | (raw[4 * i + 2] << 16) |
                                   (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
        std::memcpy(&fm.data[i], &bits, 4);
    }
    return fm;
}

// ---------------------------------------------------------------------------
// Feature extraction

/// Everything the IFV channel needs after codebook training.
struct IfvCodebook {
    PcaModel pca;
    GmmModel gmm;
};

inline VectorList project_descriptors(const VectorList& raw, const PcaModel& pca) {
    VectorList out;
    out.reserve(raw.size());
    for (const auto& d : raw) out.push_back(pca_apply(pca, d));
    return out;
}

/// IFV of one window. Windows narrower than a patch are grown around their
/// center to one patch; if no descriptor fits, the zero vector is returned.
inline Vector ifv_feature(const GradientField& grad, const Box& window, const IfvCodebook& cb, const PipelineConfig& cfg) {
    Box w = window;
    const double need = cfg.ifv_patch;
    if (w.width() < need) {
        const double c = w.center_x();
        w.x_min = std::clamp(c - need / 2, 0.0, std::max(0.0, grad.width - need));
        w.x_max = w.x_min + need;
    }
    if (w.height() < need) {
        const double c = w.center_y();
        w.y_min = std::clamp(c - need / 2, 0.0, std::max(0.0, grad.height - need));
        w.y_max = w.y_min + need;
    }
    const auto raw = dense_descriptors(grad, w, cfg.ifv_stride, cfg.ifv_patch);
    if (raw.empty()) return Vector(fisher_length(cb.gmm.D, cb.gmm.K), 0.0);
    return fisher_encode(project_descriptors(raw, cb.pca), cb.gmm);
}

inline std::vector<Plane> color_planes(const Image& img) {
    std::vector<Plane> planes;
    for (int c = 0; c < img.channels(); ++c) planes.push_back(channel_plane(img, c));
    return planes;
}

/// Trains PCA then GMM on descriptors from a coarse whole-image grid.
inline IfvCodebook fit_ifv_codebook(const DatasetManifest& m, const PipelineConfig& cfg, RunLog& log) {
    VectorList raw;
    for (const auto& im : m.images) {
        const Image img = load_pnm(m.image_path(im));
        const GradientField grad(gray_plane(img));
        const Box whole{0, 0, static_cast<double>(img.width()), static_cast<double>(img.height())};
        auto d = dense_descriptors(grad, whole, cfg.ifv_patch, cfg.ifv_patch);
        for (auto& v : d)
            if (l2_norm(v) > 0) raw.push_back(std::move(v));
    }
    log.line("codebook_descriptors " + std::to_string(raw.size()));
    IfvCodebook cb;
    cb.pca = pca_fit(raw, static_cast<std::size_t>(cfg.pca_dim), cfg.seed + 11, static_cast<std::size_t>(cfg.pca_max_samples));
    VectorList projected;
    std::vector<std::size_t> idx(raw.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (cfg.gmm_max_samples > 0 && idx.size() > static_cast<std::size_t>(cfg.gmm_max_samples)) {
        Rng rng(cfg.seed + 12);
        rng.shuffle(idx);
        idx.resize(static_cast<std::size_t>(cfg.gmm_max_samples));
        std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) projected.push_back(pca_apply(cb.pca, raw[i]));
    GmmFitOptions go;
    go.K = static_cast<std::size_t>(cfg.gmm_k);
    go.max_iters = cfg.gmm_max_iters;
    go.tol = cfg.gmm_tol;
    go.seed = cfg.seed + 13;
    const auto fit = gmm_fit_report(projected, go);
    log.line("gmm_iterations " + std::to_string(fit.log_likelihoods.size() - 1) + " final_loglik " +
             format_real(fit.log_likelihoods.back()));
    cb.gmm = fit.model;
    return cb;
}

/// Per-split channel features, row-aligned with the proposal set.
struct SplitFeatures {
    std::map<std::string, FeatureMatrix> channels;  // cnn, hog, ifv
    FeatureMatrix image_ifv;                        // one row per manifest image
};

inline FeatureMatrix cnn_matrix(const CnnFeatureTable& table, const ProposalSet& ps) {
    FeatureMatrix fm;
    for (std::size_t i = 0; i < ps.image_ids.size(); ++i)
        for (std::size_t p = 0; p < ps.boxes[i].size(); ++p) fm.append(table.at(ps.image_ids[i], static_cast<int>(p)));
    return fm;
}

inline SplitFeatures load_split_features(const ArtifactPaths& paths, const std::string& split, const ProposalSet& ps,
                                         bool need_image_features = false) {
    SplitFeatures sf;
    for (const auto& ch : channel_names()) {
        const auto p = paths.features(split, ch);
        require_artifact(p, "extract");
        if (ch == "cnn") {
            sf.channels[ch] = cnn_matrix(load_cnn_features(p.string()), ps);
        } else {
            sf.channels[ch] = load_feature_matrix(p);
        }
        if (sf.channels[ch].rows != ps.total())
            throw Error(p.string() + " has " + std::to_string(sf.channels[ch].rows) + " rows for " +
                        std::to_string(ps.total()) + " proposals; rerun `extract`");
    }
    if (need_image_features) {
        require_artifact(paths.image_features(split), "extract");
        sf.image_ifv = load_feature_matrix(paths.image_features(split));
    }
    return sf;
}

// ---------------------------------------------------------------------------
// Training labels

inline constexpr int kIgnoreLabel = -2;

/// Category of the best-overlapping ground truth if IoU >= pos_iou, -1
/// (background) if the best IoU is below neg_iou, otherwise ignored.
inline int proposal_label(const Box& b, const std::vector<GroundTruth>& gts, const PipelineConfig& cfg) {
    double best = 0;
    int cat = -1;
    for (const auto& g : gts) {
        const double o = iou(b, g.box);
        if (o > best) {
            best = o;
            cat = g.category_id;
        }
    }
    if (best >= cfg.label_pos_iou) return cat;
    if (best < cfg.label_neg_iou) return -1;
    return kIgnoreLabel;
}

struct LabeledRows {
    std::vector<std::size_t> rows;  // feature row index
    std::vector<int> labels;
    std::vector<std::size_t> image_index;
};

inline LabeledRows label_proposals(const DatasetManifest& m, const ProposalSet& ps, const PipelineConfig& cfg) {
    LabeledRows lr;
    std::size_t row = 0;
    for (std::size_t i = 0; i < ps.image_ids.size(); ++i)
        for (const auto& b : ps.boxes[i]) {
            const int l = proposal_label(b, m.images[i].ground_truths, cfg);
            if (l != kIgnoreLabel) {
                lr.rows.push_back(row);
                lr.labels.push_back(l);
                lr.image_index.push_back(i);
            }
            ++row;
        }
    return lr;
}

inline VectorList gather_rows(const FeatureMatrix& fm, const std::vector<std::size_t>& rows) {
    VectorList out;
    out.reserve(rows.size());
    for (std::size_t r : rows) out.push_back(fm.row(r));
    return out;
}

inline SvmParams bank_params(const PipelineConfig& cfg) { return SvmParams{cfg.svm_lambda, cfg.svm_epochs, cfg.seed + 21}; }
inline SvmParams fusion_params(const PipelineConfig& cfg) {
    return SvmParams{cfg.fusion_lambda, cfg.fusion_epochs, cfg.seed + 22};
}

inline std::map<std::string, SvmBank> load_banks(const ArtifactPaths& paths) {
    std::map<std::string, SvmBank> banks;
    for (const auto& ch : channel_names()) {
        require_artifact(paths.bank(ch), "train-svm");
        banks[ch] = bank_from_file(ModelFile::load(paths.bank(ch).string()));
    }
    return banks;
}

// ---------------------------------------------------------------------------
// Detection

struct DetectionModels {
    std::map<std::string, SvmBank> banks;
    FusionModel fusion;
    BoxRegressor regressor;
    std::string regress_channel = "cnn";
    bool use_prior = false;
    PresencePrior prior;
};

/// Scores every proposal of one image for every category, refines boxes,
/// applies per-category NMS and, when enabled, presence gating.
/// `feature_row` is the first row of this image in the split matrices.
inline std::vector<Detection> detect_image(const std::string& image_id, const std::vector<Box>& proposals,
                                           const SplitFeatures& sf, std::size_t feature_row,
                                           const Vector* image_feature, const DetectionModels& dm,
                                           const std::string& mode, double image_w, double image_h, double nms_iou) {
    std::vector<Detection> dets;
    VectorList reg_features;
    const std::size_t N = dm.fusion.num_categories();
    for (std::size_t p = 0; p < proposals.size(); ++p) {
        const std::size_t row = feature_row + p;
        const Vector cnn = score_bank(sf.channels.at("cnn").row(row), dm.banks.at("cnn"));
        const Vector hg = score_bank(sf.channels.at("hog").row(row), dm.banks.at("hog"));
        const Vector ifv = score_bank(sf.channels.at("ifv").row(row), dm.banks.at("ifv"));
        Vector scores;
        if (mode == "fused")
            scores = final_scores(fuse_scores(cnn, hg, ifv), dm.fusion);
        else if (mode == "cnn")
            scores = cnn;
        else if (mode == "hog")
            scores = hg;
        else if (mode == "ifv")
            scores = ifv;
        else
            throw Error("unknown detect mode '" + mode + "'");
        const Vector rf = sf.channels.at(dm.regress_channel).row(row);
        for (std::size_t c = 0; c < N; ++c) {
            dets.push_back(Detection{image_id, proposals[p], static_cast<int>(c), scores[c]});
            reg_features.push_back(rf);
        }
    }
    dets = refine(dets, reg_features, dm.regressor, image_w, image_h);
    // nms per category, categories in ascending order
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.category_id < b.category_id; });
    dets = nms_grouped(dets, nms_iou);
    if (dm.use_prior) {
        if (!image_feature) throw Error("presence gating needs the whole-image feature");
        dets = filter_detections(dets, presence_scores(*image_feature, dm.prior), dm.prior.thresholds);
    }
    return dets;
}

/// Fraction of ground truths covered by some proposal at IoU >= threshold.
inline double proposal_recall(const DatasetManifest& m, const ProposalSet& ps, double threshold) {
    std::size_t hit = 0, total = 0;
    for (std::size_t i = 0; i < m.images.size(); ++i)
        for (const auto& g : m.images[i].ground_truths) {
            ++total;
            for (const auto& b : ps.boxes[i])
                if (iou(b, g.box) >= threshold) {
                    ++hit;
                    break;
                }
        }
    if (total == 0) throw Error("proposal_recall: no ground truths");
    return static_cast<double>(hit) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Stages

namespace stages {

inline DatasetManifest need_manifest(const StageOptions& o, const std::string& stage) {
    if (o.manifest.empty()) throw Error(stage + ": --manifest is required");
    return load_manifest(o.manifest);
}

inline void propose(const StageOptions& o) {
    const ArtifactPaths paths{o.out_dir};
    const auto m = need_manifest(o, "propose");
    const std::string split = split_name(o.manifest);
    RunLog log(paths, "propose." + split, o);
    ProposalConfig pc;
    pc.k = o.config.segment_k;
    pc.sigma = o.config.segment_sigma;
    pc.min_size = o.config.segment_min_size;
    pc.max_proposals = o.config.proposals_max_per_image;
    pc.min_box_side = o.config.proposals_min_side;
    ProposalSet ps;
    for (const auto& im : m.images) {
        ps.image_ids.push_back(im.image_id);
        ps.boxes.push_back(selective_search(load_pnm(m.image_path(im)), pc));
    }
    write_proposals(paths.proposals(split), ps);
    log.line("images " + std::to_string(m.images.size()));
    log.line("proposals " + std::to_string(ps.total()));
    log.line("recall@0.5 " + format_real(proposal_recall(m, ps, 0.5)));
}

inline void extract(const StageOptions& o) {
    const ArtifactPaths paths{o.out_dir};
    const auto m = need_manifest(o, "extract");
    const std::string split = split_name(o.manifest);
    require_artifact(paths.proposals(split), "propose");
    const auto ps = read_proposals(paths.proposals(split), m);
    const auto& cfg = o.config;
    RunLog log(paths, "extract." + split, o);

    const bool all = o.channel == "all";
    const bool do_cnn = all || o.channel == "cnn", do_hog = all || o.channel == "hog", do_ifv = all || o.channel == "ifv";
    if (!do_cnn && !do_hog && !do_ifv) throw Error("extract: unknown channel '" + o.channel + "'");

    IfvCodebook cb;
    if (do_ifv) {
        if (fs::exists(paths.model("pca")) && fs::exists(paths.model("gmm"))) {
            cb.pca = pca_from_file(ModelFile::load(paths.model("pca").string()));
            cb.gmm = gmm_from_file(ModelFile::load(paths.model("gmm").string()));
            log.line("codebook reused");
        } else {
            cb = fit_ifv_codebook(m, cfg, log);
            fs::create_directories(paths.model("pca").parent_path());
            pca_to_file(cb.pca).save(paths.model("pca").string());
            gmm_to_file(cb.gmm).save(paths.model("gmm").string());
        }
        if (cb.pca.raw_dim != 2 * static_cast<std::size_t>(cfg.ifv_patch) * cfg.ifv_patch)
            throw Error("extract: codebook was trained for a different ifv.patch; delete models/pca.model");
    }

    FeatureMatrix hog_m, ifv_m, image_m;
    std::ofstream cnn_os;
    if (do_cnn && cfg.cnn_source == "embedding") {
        fs::create_directories(paths.features(split, "cnn").parent_path());
        cnn_os.open(paths.features(split, "cnn"));
        if (!cnn_os) throw Error("cannot write " + paths.features(split, "cnn").string());
    }
    for (std::size_t i = 0; i < m.images.size(); ++i) {
        const Image img = load_pnm(m.image_path(m.images[i]));
        const Plane gray = gray_plane(img);
        const GradientField grad(gray);
        const auto planes = color_planes(img);
        for (std::size_t p = 0; p < ps.boxes[i].size(); ++p) {
            const Box& b = ps.boxes[i][p];
            if (do_hog) hog_m.append(hog(gray, b, cfg.hog_cells_x, cfg.hog_cells_y));
            if (do_ifv) ifv_m.append(ifv_feature(grad, b, cb, cfg));
            if (cnn_os.is_open()) write_cnn_row(cnn_os, ps.image_ids[i], static_cast<int>(p), pixel_embedding(planes, b, cfg.cnn_side));
        }
        if (do_ifv) {
            const Box whole{0, 0, static_cast<double>(img.width()), static_cast<double>(img.height())};
            image_m.append(ifv_feature(grad, whole, cb, cfg));
        }
    }
    if (do_hog) {
        hog_m.cols = hog_length(cfg.hog_cells_x, cfg.hog_cells_y);
        save_feature_matrix(paths.features(split, "hog"), hog_m);
        log.line("hog rows " + std::to_string(hog_m.rows) + " dim " + std::to_string(hog_m.cols));
    }
    if (do_ifv) {
        ifv_m.cols = fisher_length(cb.gmm.D, cb.gmm.K);
        save_feature_matrix(paths.features(split, "ifv"), ifv_m);
        save_feature_matrix(paths.image_features(split), image_m);
        log.line("ifv rows " + std::to_string(ifv_m.rows) + " dim " + std::to_string(ifv_m.cols));
    }
    if (do_cnn) {
        if (cnn_os.is_open()) {
            cnn_os.close();
        } else {
            const fs::path src = fs::path(cfg.cnn_dir) / (split + ".cnn.txt");
            if (!fs::exists(src)) throw Error("extract: cnn.source=file but " + src.string() + " does not exist");
            fs::create_directories(paths.features(split, "cnn").parent_path());
            fs::copy_file(src, paths.features(split, "cnn"), fs::copy_options::overwrite_existing);
        }
        // ingestion check: every proposal must have a vector of one shared length
        const auto table = load_cnn_features(paths.features(split, "cnn").string());
        const auto fm = cnn_matrix(table, ps);
        log.line("cnn rows " + std::to_string(fm.rows) + " dim " + std::to_string(table.dim()));
    }
}

inline void train_svm_stage(const StageOptions& o) {
    const ArtifactPaths paths{o.out_dir};
    const auto m = need_manifest(o, "train-svm");
    const std::string split = split_name(o.manifest);
    require_artifact(paths.proposals(split), "propose");
    const auto ps = read_proposals(paths.proposals(split), m);
    const auto sf = load_split_features(paths, split, ps);
    RunLog log(paths, "train-svm", o);
    const auto lr = label_proposals(m, ps, o.config);
    log.line("samples " + std::to_string(lr.rows.size()));
    fs::create_directories(paths.bank("cnn").parent_path());
    for (const auto& ch : channel_names()) {
        const auto bank = train_bank(ch, gather_rows(sf.channels.at(ch), lr.rows), lr.labels, m.num_categories(),
                                     bank_params(o.config));
        bank_to_file(bank).save(paths.bank(ch).string());
        log.line("bank " + ch + " dim " + std::to_string(bank.dim));
    }
}

inline void train_fusion_stage(const StageOptions& o) {
    const ArtifactPaths paths{o.out_dir};
    const auto m = need_manifest(o, "train-fusion");
    const std::string split = split_name(o.manifest);
    require_artifact(paths.proposals(split), "propose");
    const auto banks = load_banks(paths);
    const auto ps = read_proposals(paths.proposals(split), m);
    const auto sf = load_split_features(paths, split, ps);
    RunLog log(paths, "train-fusion", o);
    const auto lr = label_proposals(m, ps, o.config);
    const auto& cfg = o.config;
    const std::size_t N = m.num_categories();

    std::map<std::string, VectorList> x;
    for (const auto& ch : channel_names()) x[ch] = gather_rows(sf.channels.at(ch), lr.rows);

    // channel scores for fusion training come from banks that did not see
    // the sample's image (fold = image index mod folds)
    std::map<std::string, VectorList> scores;
    for (const auto& ch : channel_names()) scores[ch].resize(lr.rows.size());
    const auto folds = static_cast<std::size_t>(cfg.fusion_folds);
    if (folds <= 1) {
        for (const auto& ch : channel_names())
            for (std::size_t i = 0; i < lr.rows.size(); ++i) scores[ch][i] = score_bank(x[ch][i], banks.at(ch));
    } else {
        for (std::size_t f = 0; f < folds; ++f) {
            std::vector<std::size_t> train_idx, hold_idx;
            for (std::size_t i = 0; i < lr.rows.size(); ++i)
                (lr.image_index[i] % folds == f ? hold_idx : train_idx).push_back(i);
            if (hold_idx.empty()) continue;
            std::vector<int> labels;
            for (std::size_t i : train_idx) labels.push_back(lr.labels[i]);
            for (const auto& ch : channel_names()) {
                VectorList xt;
                for (std::size_t i : train_idx) xt.push_back(x[ch][i]);
                const auto bank = train_bank(ch, xt, labels, N, bank_params(cfg));
                for (std::size_t i : hold_idx) scores[ch][i] = score_bank(x[ch][i], bank);
            }
            log.line("fold " + std::to_string(f) + " held_out " + std::to_string(hold_idx.size()));
        }
    }
    VectorList fused;
    for (std::size_t i = 0; i < lr.rows.size(); ++i)
        fused.push_back(fuse_scores(scores["cnn"][i], scores["hog"][i], scores["ifv"][i]));
    const auto fm = train_fusion(fused, lr.labels, N, fusion_params(cfg), cfg.fusion_standardize != 0);
    fusion_to_file(fm).save(paths.model("fusion").string());
    log.line("fusion samples " + std::to_string(fused.size()) + " dim " + std::to_string(3 * N));
}

inline void train_regressor_stage(const StageOptions& o) {
    const ArtifactPaths paths{o.out_dir};
    const auto m = need_manifest(o, "train-regressor");
    const std::string split = split_name(o.manifest);
    require_artifact(paths.proposals(split), "propose");
    const auto ps = read_proposals(paths.proposals(split), m);
    const auto sf = load_split_features(paths, split, ps);
    RunLog log(paths, "train-regressor", o);
    const auto& fm = sf.channels.at(o.config.regress_channel);
    std::vector<RegressionSample> samples;
    std::size_t row = 0;
    for (std::size_t i = 0; i < ps.image_ids.size(); ++i)
        for (const auto& b : ps.boxes[i]) {
            double best = 0;
            const GroundTruth* match = nullptr;
            for (const auto& g : m.images[i].ground_truths) {
                const double ov = iou(b, g.box);
                if (ov > best) {
                    best = ov;
                    match = &g;
                }
            }
            if (match && best >= o.config.regress_min_iou)
                samples.push_back(RegressionSample{fm.row(row), b, match->box, match->category_id});
            ++row;
        }
    const auto reg = train_bbox_regressor(samples, m.num_categories(), o.config.regress_lambda, o.config.regress_min_iou);
    fs::create_directories(paths.model("regressor").parent_path());
    regressor_to_file(reg).save(paths.model("regressor").string());
    log.line("pairs " + std::to_string(samples.size()) + " channel " + o.config.regress_channel);
    for (std::size_t c = 0; c < reg.categories.size(); ++c)
        if (!reg.categories[c].trained) log.line("category " + m.category_names[c] + " untrained (no matched pairs)");
}

inline std::vector<PresenceTrainingImage> presence_images(const DatasetManifest& m, const FeatureMatrix& image_features) {
    if (image_features.rows != m.images.size()) throw Error("image feature rows do not match the manifest; rerun `extract`");
    std::vector<PresenceTrainingImage> out;
    for (std::size_t i = 0; i < m.images.size(); ++i) {
        PresenceTrainingImage p;
        p.image_id = m.images[i].image_id;
        p.feature = image_features.row(i);
        for (const auto& g : m.images[i].ground_truths)
            if (std::find(p.categories.begin(), p.categories.end(), g.category_id) == p.categories.end())
                p.categories.push_back(g.category_id);
        out.push_back(std::move(p));
    }
    return out;
}

inline void train_prior_stage(const StageOptions& o) {
    const ArtifactPaths paths{o.out_dir};
    const auto m = need_manifest(o, "train-prior");
    const std::string split = split_name(o.manifest);
    require_artifact(paths.image_features(split), "extract");
    RunLog log(paths, "train-prior", o);
    auto images = presence_images(m, load_feature_matrix(paths.image_features(split)));
    std::sort(images.begin(), images.end(),
              [](const PresenceTrainingImage& a, const PresenceTrainingImage& b) { return a.image_id < b.image_id; });
    const auto& cfg = o.config;
    const std::size_t N = m.num_categories();
    const SvmParams params{cfg.prior_lambda, cfg.prior_epochs, cfg.seed + 31};
    auto res = train_presence_prior(images, N, params);
    for (const auto& w : res.warnings) log.line("warning " + w);
    if (cfg.prior_tau == "auto") {
        // out-of-fold presence scores of positive images, fold = sorted index mod folds
        const auto folds = std::min(static_cast<std::size_t>(cfg.prior_folds), images.size());
        std::vector<std::vector<double>> pos(N);
        for (std::size_t f = 0; f < folds && folds >= 2; ++f) {
            std::vector<PresenceTrainingImage> train, hold;
            for (std::size_t i = 0; i < images.size(); ++i) (i % folds == f ? hold : train).push_back(images[i]);
            const auto fold_prior = train_presence_prior(train, N, params).prior;
            for (const auto& im : hold) {
                const auto s = presence_scores(im.feature, fold_prior);
                for (int c : im.categories) pos[static_cast<std::size_t>(c)].push_back(s[static_cast<std::size_t>(c)]);
            }
        }
        for (std::size_t c = 0; c < N; ++c)
            if (res.prior.gated[c]) res.prior.thresholds[c] = threshold_at_recall(pos[c], cfg.prior_recall);
        log.line("folds " + std::to_string(folds));
    } else {
        const double tau = parse_real(cfg.prior_tau);
        for (std::size_t c = 0; c < N; ++c)
            if (res.prior.gated[c]) res.prior.thresholds[c] = tau;
    }
    fs::create_directories(paths.model("prior").parent_path());
    prior_to_file(res.prior).save(paths.model("prior").string());
    log.line("images " + std::to_string(images.size()));
    for (std::size_t c = 0; c < res.prior.num_categories(); ++c)
        log.line("tau " + m.category_names[c] + " " + format_real(res.prior.thresholds[c]));
}

inline DetectionModels load_detection_models(const ArtifactPaths& paths, const StageOptions& o) {
    DetectionModels dm;
    dm.banks = load_banks(paths);
    require_artifact(paths.model("fusion"), "train-fusion");
    require_artifact(paths.model("regressor"), "train-regressor");
    dm.fusion = fusion_from_file(ModelFile::load(paths.model("fusion").string()));
    dm.regressor = regressor_from_file(ModelFile::load(paths.model("regressor").string()));
    dm.regress_channel = o.config.regress_channel;
    dm.use_prior = o.use_prior && o.config.prior_enabled != 0;
    if (dm.use_prior) {
        require_artifact(paths.model("prior"), "train-prior");
        dm.prior = prior_from_file(ModelFile::load(paths.model("prior").string()));
    }
    return dm;
}

inline void detect(const StageOptions& o) {
    const ArtifactPaths paths{o.out_dir};
    const auto m = need_manifest(o, "detect");
    const std::string split = split_name(o.manifest);
    require_artifact(paths.proposals(split), "propose");
    const auto dm = load_detection_models(paths, o);
    const auto ps = read_proposals(paths.proposals(split), m);
    const auto sf = load_split_features(paths, split, ps, dm.use_prior);
    if (dm.fusion.num_categories() != m.num_categories())
        throw Error("detect: models were trained for " + std::to_string(dm.fusion.num_categories()) +
                    " categories, manifest has " + std::to_string(m.num_categories()));
    RunLog log(paths, "detect." + split + variant_suffix(o), o);
    std::vector<Detection> all;
    std::size_t row = 0;
    for (std::size_t i = 0; i < m.images.size(); ++i) {
        const Image img = load_pnm(m.image_path(m.images[i]));
        Vector image_feature;
        if (dm.use_prior) image_feature = sf.image_ifv.row(i);
        auto dets = detect_image(ps.image_ids[i], ps.boxes[i], sf, row, dm.use_prior ? &image_feature : nullptr, dm,
                                 o.mode, img.width(), img.height(), o.config.nms_iou);
        all.insert(all.end(), dets.begin(), dets.end());
        row += ps.boxes[i].size();
    }
    const auto out = paths.detections(split, variant_suffix(o));
    fs::create_directories(out.parent_path());
    std::ofstream os(out);
    if (!os) throw Error("cannot write " + out.string());
    write_detections(os, all);
    log.line("mode " + o.mode + " prior " + (dm.use_prior ? "on" : "off"));
    log.line("detections " + std::to_string(all.size()));
}

inline void eval(const StageOptions& o) {
    const ArtifactPaths paths{o.out_dir};
    const auto m = need_manifest(o, "eval");
    const std::string split = split_name(o.manifest);
    const auto dpath = paths.detections(split, variant_suffix(o));
    require_artifact(dpath, "detect");
    std::ifstream is(dpath);
    const auto dets = read_detections(is);
    const auto rep = per_class_report(dets, m.all_ground_truths(), m.category_names, o.config.eval_iou);
    RunLog log(paths, "eval." + split + variant_suffix(o), o);
    const auto out = paths.report(split, variant_suffix(o));
    fs::create_directories(out.parent_path());
    std::ofstream os(out);
    if (!os) throw Error("cannot write " + out.string());
    write_report(os, rep);
    for (const auto& r : rep.rows) log.line("ap " + r.category + " " + format_real(r.ap));
    log.line("mAP " + format_real(rep.mean_ap));
}

inline void compare(const StageOptions& o) {
    const ArtifactPaths paths{o.out_dir};
    if (o.inputs.size() < 2) throw Error("compare: needs at least two name=report inputs");
    std::vector<NamedReport> reports;
    for (const auto& in : o.inputs) {
        const auto eq = in.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == in.size())
            throw Error("compare: expected name=report_path, got '" + in + "'");
        reports.push_back(NamedReport{in.substr(0, eq), load_report(in.substr(eq + 1))});
    }
    const auto wins = categories_won(reports);
    RunLog log(paths, "compare", o);
    const auto out = paths.root / "reports" / "compare.txt";
    fs::create_directories(out.parent_path());
    std::ofstream os(out);
    os << "name categories_won mAP\n";
    for (const auto& r : reports) {
        os << r.name << ' ' << wins.at(r.name) << ' ' << format_real(r.report.mean_ap) << '\n';
        log.line("won " + r.name + " " + std::to_string(wins.at(r.name)));
    }
}

inline void render(const StageOptions& o) {
    const ArtifactPaths paths{o.out_dir};
    const auto m = need_manifest(o, "render");
    const std::string split = split_name(o.manifest);
    const auto dpath = paths.detections(split, variant_suffix(o));
    require_artifact(dpath, "detect");
    std::ifstream is(dpath);
    const auto dets = read_detections(is);
    RunLog log(paths, "render." + split, o);
    static const std::uint8_t palette[6][3] = {{255, 40, 40}, {40, 255, 40}, {60, 120, 255},
                                               {255, 255, 40}, {255, 40, 255}, {40, 255, 255}};
    const auto dir = paths.render_dir(split);
    fs::create_directories(dir);
    std::size_t drawn = 0;
    for (const auto& im : m.images) {
        Image img = load_pnm(m.image_path(im));
        if (img.channels() == 1) {
            Image rgb(img.width(), img.height(), 3);
            for (int y = 0; y < img.height(); ++y)
                for (int x = 0; x < img.width(); ++x)
                    for (int c = 0; c < 3; ++c) rgb.at(x, y, c) = img.at(x, y);
            img = std::move(rgb);
        }
        for (const auto& d : dets) {
            if (d.image_id != im.image_id || d.score < o.render_min_score) continue;
            const auto* col = palette[d.category_id % 6];
            const int x0 = std::clamp(static_cast<int>(std::floor(d.box.x_min)), 0, img.width() - 1);
            const int y0 = std::clamp(static_cast<int>(std::floor(d.box.y_min)), 0, img.height() - 1);
            const int x1 = std::clamp(static_cast<int>(std::ceil(d.box.x_max)) - 1, 0, img.width() - 1);
            const int y1 = std::clamp(static_cast<int>(std::ceil(d.box.y_max)) - 1, 0, img.height() - 1);
            for (int x = x0; x <= x1; ++x)
                for (int c = 0; c < 3; ++c) img.at(x, y0, c) = img.at(x, y1, c) = col[c];
            for (int y = y0; y <= y1; ++y)
                for (int c = 0; c < 3; ++c) img.at(x0, y, c) = img.at(x1, y, c) = col[c];
            ++drawn;
        }
        save_pnm((dir / (im.image_id + ".ppm")).string(), img);
    }
    log.line("images " + std::to_string(m.images.size()) + " boxes " + std::to_string(drawn));
}

inline std::pair<std::string, std::string> synth(const StageOptions& o) {
    const auto& cfg = o.config;
    const auto dir = (fs::path(o.out_dir) / "data").string();
    SynthSpec spec;
    spec.classes = cfg.synth_classes;
    spec.max_shapes = cfg.synth_max_shapes;
    spec.noise = cfg.synth_noise;
    spec.width = cfg.synth_width;
    spec.height = cfg.synth_height;
    spec.images = cfg.synth_train_images;
    spec.seed = cfg.seed * 2 + 1;
    const auto train = synth_generate(spec, dir, "train");
    spec.images = cfg.synth_test_images;
    spec.seed = cfg.seed * 2 + 2;
    const auto test = synth_generate(spec, dir, "test");
    RunLog log(ArtifactPaths{o.out_dir}, "synth", o);
    log.line("train " + train);
    log.line("test " + test);
    return {train, test};
}

}  // namespace stages

/// Runs the whole graph: synthesizes data when no manifests are given, then
/// trains on the first split and detects + evaluates on the second.
inline PerClassReport run_all(StageOptions o) {
    std::string train = o.manifest, test = o.test_manifest;
    if (train.empty() != test.empty()) throw Error("all: give both --manifest and --test-manifest, or neither");
    if (train.empty()) std::tie(train, test) = stages::synth(o);
    o.channel = "all";
    o.mode = "fused";
    o.use_prior = true;
    const ArtifactPaths paths{o.out_dir};
    // codebooks are always refit from the training split
    fs::remove(paths.model("pca"));
    fs::remove(paths.model("gmm"));
    StageOptions tr = o, te = o;
    tr.manifest = train;
    te.manifest = test;
    stages::propose(tr);
    stages::propose(te);
    stages::extract(tr);
    stages::extract(te);
    stages::train_svm_stage(tr);
    stages::train_fusion_stage(tr);
    stages::train_regressor_stage(tr);
    stages::train_prior_stage(tr);
    stages::detect(te);
    stages::eval(te);
    return load_report(paths.report(split_name(test), "").string());
}

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"synth",  "propose", "extract", "train-svm", "train-fusion",
                                                "train-regressor", "train-prior", "detect", "eval", "compare",
                                                "render", "all"};
    return names;
}

inline void run_stage(const std::string& stage, const StageOptions& o) {
    if (stage == "synth")
        stages::synth(o);
    else if (stage == "propose")
        stages::propose(o);
    else if (stage == "extract")
        stages::extract(o);
    else if (stage == "train-svm")
        stages::train_svm_stage(o);
    else if (stage == "train-fusion")
        stages::train_fusion_stage(o);
    else if (stage == "train-regressor")
        stages::train_regressor_stage(o);
    else if (stage == "train-prior")
        stages::train_prior_stage(o);
    else if (stage == "detect")
        stages::detect(o);
    else if (stage == "eval")
        stages::eval(o);
    else if (stage == "compare")
        stages::compare(o);
    else if (stage == "render")
        stages::render(o);
    else if (stage == "all")
        run_all(o);
    else
        throw Error("unknown stage '" + stage + "'");
}

}  // namespace hkdet
