// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Usage: acceptance [work_dir]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include "hkdet/pipeline/stages.hpp"
#include "hkdet/regress.hpp"
#include "oracles.hpp"

using namespace hkdet;

namespace {

int failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
    std::printf("%s  %-22s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    failures += !ok;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

double map_of(const std::vector<Detection>& dets, const DatasetManifest& m) {
    return per_class_report(dets, m.all_ground_truths(), m.category_names, 0.5).mean_ap;
}

std::vector<Detection> load_dets(const fs::path& p) {
    std::ifstream is(p);
    return read_detections(is);
}

// Runs `hkdet all` into dir; returns wall seconds or a negative value on failure.
double run_all_cli(const fs::path& dir) {
    fs::remove_all(dir);
    const std::string cmd = std::string(HKDET_CLI) + " all --out-dir " + dir.string() + " > " +
                            (dir.parent_path() / (dir.filename().string() + ".stdout")).string();
    const auto t0 = std::chrono::steady_clock::now();
    const int rc = std::system(cmd.c_str());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rc == 0 ? secs : -1;
}

// --------------------------------------------------------------------------

void end_to_end(const fs::path& run, double secs) {
    if (secs < 0) return report("end-to-end", false, "`hkdet all` failed");
    const auto rep = load_report((run / "reports" / "test.report").string());
    report("end-to-end", rep.mean_ap >= 0.80 && secs <= 1800,
           fmt("mAP %.4f (>= 0.80), runtime %.1f s (<= 1800 s)", rep.mean_ap, secs));
}

void proposal_recall_check(const fs::path& run) {
    const auto m = load_manifest((run / "data" / "test.manifest").string());
    const auto ps = read_proposals(run / "proposals" / "test.txt", m);
    std::size_t most = 0;
    for (const auto& b : ps.boxes) most = std::max(most, b.size());
    const double r = proposal_recall(m, ps, 0.5);
    report("proposal recall", r >= 0.90 && most <= 2000,
           fmt("recall@0.5 %.4f (>= 0.90), max %.0f proposals/image (<= 2000), mean %.1f", r, double(most),
               double(ps.total()) / m.images.size()));
}

void fusion_ablation(const fs::path& run) {
    StageOptions o;
    o.out_dir = run.string();
    o.manifest = (run / "data" / "test.manifest").string();
    const ArtifactPaths paths{run};
    bool ok = true;
    std::string detail;
    for (bool prior : {true, false}) {
        o.use_prior = prior;
        double fused = 0, best = 0;
        std::string best_name;
        for (const std::string mode : {"fused", "cnn", "hog", "ifv"}) {
            o.mode = mode;
            stages::detect(o);
            stages::eval(o);
            const double v = load_report(paths.report("test", variant_suffix(o)).string()).mean_ap;
            if (mode == "fused")
                fused = v;
            else if (v > best)
                best = v, best_name = mode;
        }
        ok = ok && fused >= best - 0.02;
        detail += (prior ? "gated: " : "; ungated: ") + fmt("fused %.4f vs ", fused) + best_name + fmt(" %.4f", best);
    }
    report("fusion ablation", ok, detail + " (fused >= best single - 0.02)");
}

void context_gating(const fs::path& run) {
    const auto m = load_manifest((run / "data" / "test.manifest").string());
    const auto prior = prior_from_file(ModelFile::load((run / "models" / "prior.model").string()));
    const auto image_features = load_feature_matrix(run / "features" / "test.image_ifv.bin");
    const auto dets = load_dets(run / "detections" / "test.txt");

    // first (image, class) pair whose class is absent and whose gate is closed
    std::size_t candidates = 0, closed = 0, pick_image = m.images.size();
    int pick_class = -1;
    Vector pick_presence;
    for (std::size_t i = 0; i < m.images.size(); ++i) {
        const auto presence = presence_scores(image_features.row(i), prior);
        for (int c = 0; c < static_cast<int>(m.num_categories()); ++c) {
            bool present = false;
            for (const auto& g : m.images[i].ground_truths) present = present || g.category_id == c;
            if (present) continue;
            ++candidates;
            if (presence[c] >= prior.thresholds[c]) continue;
            ++closed;
            if (pick_class < 0) pick_image = i, pick_class = c, pick_presence = presence;
        }
    }
    if (pick_class < 0) return report("context gating", false, "no absent class is gated closed on any test image");

    const auto& im = m.images[pick_image];
    double top = 0;
    for (const auto& d : dets) top = std::max(top, d.score);
    std::vector<Detection> planted;
    for (int k = 0; k < 3; ++k)
        planted.push_back(Detection{im.image_id, Box{4.0 + 20 * k, 8, 28.0 + 20 * k, 32}, pick_class, top + 1 + k});

    std::vector<Detection> with_planted = dets, image_dets;
    with_planted.insert(with_planted.end(), planted.begin(), planted.end());
    std::vector<Detection> gated;
    for (const auto& d : with_planted) (d.image_id == im.image_id ? image_dets : gated).push_back(d);
    const auto kept = filter_detections(image_dets, pick_presence, prior.thresholds);
    std::size_t survivors = 0;
    for (const auto& d : kept)
        for (const auto& p : planted) survivors += d == p;
    gated.insert(gated.end(), kept.begin(), kept.end());

    const double before = map_of(dets, m), ungated = map_of(with_planted, m), after = map_of(gated, m);
    const bool ok = survivors == 0 && after >= before && after >= ungated;
    report("context gating", ok,
           im.image_id + " class " + m.category_names[pick_class] +
               fmt(": %.0f/3 planted removed; mAP clean %.4f, planted ungated %.4f, planted gated %.4f", 3.0 - survivors,
                   before, ungated, after) +
               fmt(" (gate closed on %.0f of %.0f absent pairs)", double(closed), double(candidates)));
}

void oracle_equivalence() {
    Rng rng(2024);
    std::size_t bad_iou = 0, bad_nms = 0, bad_match = 0, bad_ap = 0;
    const auto half = oracle::Rational::make(1, 2);
    for (int t = 0; t < 1000; ++t) {
        const auto in = oracle::random_instance(rng, 6);
        std::vector<Box> boxes;
        for (const auto& d : in.dets) boxes.push_back(d.box);
        for (const auto& g : in.gts) boxes.push_back(g.box);
        for (const auto& a : boxes)
            for (const auto& b : boxes) bad_iou += iou(a, b) != oracle::iou(a, b).value();

        std::map<std::pair<std::string, int>, std::vector<Detection>> groups;
        for (const auto& d : in.dets) groups[{d.image_id, d.category_id}].push_back(d);
        for (const auto& [key, g] : groups) {
            (void)key;
            bad_nms += nms(g, 0.5) != oracle::nms(g, half);
            bad_nms += nms(g, 0.3) != oracle::nms(g, oracle::Rational::make(3, 10));
        }

        const auto tp = match_detections(in.dets, in.gts, 0.5).true_positive;
        const auto want = oracle::match(in.dets, in.gts, half);
        bad_match += tp != want;

        const auto rep = per_class_report(in.dets, in.gts, {"c0", "c1"}, 0.5);
        std::size_t row = 0;
        for (int c = 0; c < 2; ++c) {
            std::int64_t n = 0;
            for (const auto& g : in.gts) n += g.category_id == c;
            if (n == 0) continue;
            std::vector<bool> flags;
            for (std::size_t i : oracle::rank(in.dets, c)) flags.push_back(want[i]);
            bad_ap += row >= rep.rows.size() || rep.rows[row].ap != oracle::average_precision(flags, n).value();
            ++row;
        }
    }
    report("oracle equivalence", bad_iou + bad_nms + bad_match + bad_ap == 0,
           fmt("1000 instances: mismatches iou %.0f, nms %.0f, match %.0f, ap %.0f", double(bad_iou), double(bad_nms),
               double(bad_match), double(bad_ap)));
}

void ap_fixture() {
    const double ap = average_precision({true, false, true}, 2);
    const auto exact = oracle::average_precision({true, false, true}, 2);
    report("AP fixture", ap == 5.0 / 6.0 && exact == oracle::Rational::make(5, 6),
           fmt("[TP, FP, TP], num_gt 2 -> %.17g (5/6 = %.17g)", ap, 5.0 / 6.0));
}

VectorList blobs(Rng& rng, std::size_t n, std::size_t d, int centers) {
    VectorList c(centers, Vector(d));
    for (auto& v : c)
        for (auto& e : v) e = rng.gaussian() * 4;
    VectorList out;
    for (std::size_t i = 0; i < n; ++i) {
        Vector x = c[rng.index(c.size())];
        for (auto& e : x) e += rng.gaussian();
        out.push_back(x);
    }
    return out;
}

void numerical_suites() {
    std::vector<std::string> failed;

    // EM log-likelihood never decreases
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(1000 + seed);
        const auto data = blobs(rng, 60 + rng.index(60), 1 + rng.index(4), 1 + static_cast<int>(rng.index(4)));
        GmmFitOptions opt;
        opt.K = 1 + rng.index(4);
        opt.max_iters = 30;
        opt.tol = 0;
        opt.seed = seed;
        const auto ll = gmm_fit_report(data, opt).log_likelihoods;
        for (std::size_t i = 1; i < ll.size(); ++i)
            if (ll[i] < ll[i - 1] - 1e-9) {
                failed.push_back("em-monotone");
                seed = 100;
                break;
            }
    }

    // K = 1 equals the closed-form MLE
    {
        Rng rng(7);
        const auto data = blobs(rng, 300, 4, 2);
        const auto g = gmm_fit(data, 1, 20, 0, 3);
        bool ok = g.weights[0] == 1.0;
        for (std::size_t d = 0; d < 4; ++d) {
            long double mean = 0, var = 0;
            for (const auto& x : data) mean += x[d];
            mean /= data.size();
            for (const auto& x : data) var += (x[d] - mean) * (x[d] - mean);
            var /= data.size();
            ok = ok && std::abs(g.means[d] - double(mean)) <= 1e-9 &&
                 std::abs(g.variances[d] - std::max(double(var), kDefaultVarianceFloor)) <= 1e-9;
        }
        if (!ok) failed.push_back("gmm-k1");
    }

    // Fisher vector: unit norm, permutation invariant, (2D+1)K long
    {
        Rng rng(8);
        const auto train = blobs(rng, 500, 6, 3);
        const auto g = gmm_fit(train, 5, 30, 1e-8, 4);
        bool ok = fisher_length(64, 16) == 2064;
        for (int t = 0; t < 20 && ok; ++t) {
            VectorList desc(train.begin() + t * 20, train.begin() + t * 20 + 5 + rng.index(15));
            const auto fv = fisher_encode(desc, g);
            ok = fv.size() == (2 * 6 + 1) * 5 && std::abs(l2_norm(fv) - 1.0) <= 1e-6;
            rng.shuffle(desc);
            const auto again = fisher_encode(desc, g);
            for (std::size_t i = 0; i < fv.size() && ok; ++i) ok = std::abs(again[i] - fv[i]) <= 1e-12;
        }
        if (!ok) failed.push_back("fisher");
    }

    // bbox targets round trip
    {
        Rng rng(9);
        bool ok = true;
        for (int i = 0; i < 1000 && ok; ++i) {
            auto box = [&] {
                const double x = rng.uniform() * 100, y = rng.uniform() * 100;
                return Box{x, y, x + 0.5 + rng.uniform() * 80, y + 0.5 + rng.uniform() * 80};
            };
            const Box p = box(), g = box();
            const Box r = apply_targets(p, bbox_targets(p, g));
            ok = std::abs(r.x_min - g.x_min) <= 1e-9 && std::abs(r.y_min - g.y_min) <= 1e-9 &&
                 std::abs(r.x_max - g.x_max) <= 1e-9 && std::abs(r.y_max - g.y_max) <= 1e-9;
        }
        if (!ok) failed.push_back("bbox-roundtrip");
    }

    // ridge normal-equation residual
    {
        bool ok = true;
        for (std::uint64_t seed = 0; seed < 20 && ok; ++seed) {
            Rng rng(500 + seed);
            const int n = 40, d = 8;
            const double lambda = 0.01 + rng.uniform() * 10;
            VectorList x;
            std::vector<double> t;
            for (int i = 0; i < n; ++i) {
                Vector v(d);
                for (auto& e : v) e = rng.gaussian() * 3;
                x.push_back(v);
                t.push_back(rng.gaussian());
            }
            const auto s = ridge_fit(x, t, lambda);
            std::vector<long double> lhs(d + 1, 0), rhs(d + 1, 0);
            for (int i = 0; i < n; ++i) {
                Vector a = x[i];
                a.push_back(1.0);
                long double pred = 0;
                for (int k = 0; k <= d; ++k) pred += a[k] * s.coef[k];
                for (int k = 0; k <= d; ++k) {
                    lhs[k] += a[k] * pred;
                    rhs[k] += a[k] * t[i];
                }
            }
            for (int k = 0; k < d; ++k) lhs[k] += lambda * s.coef[k];
            long double num = 0, den = 0;
            for (int k = 0; k <= d; ++k) num += (lhs[k] - rhs[k]) * (lhs[k] - rhs[k]), den += rhs[k] * rhs[k];
            ok = std::sqrt(num) <= 1e-8 * std::max<long double>(1, std::sqrt(den));
        }
        if (!ok) failed.push_back("ridge");
    }

    // SVM reaches accuracy 1.0 on separable fixtures
    {
        bool ok = true;
        for (std::uint64_t seed = 0; seed < 10 && ok; ++seed) {
            Rng rng(700 + seed);
            Vector dir(5);
            for (auto& v : dir) v = rng.gaussian();
            const double nd = l2_norm(dir);
            VectorList x;
            std::vector<int> y;
            for (int i = 0; i < 100; ++i) {
                const int label = i % 2 ? 1 : -1;
                Vector p(5);
                for (auto& v : p) v = rng.gaussian() * 0.3;
                const double along = dot(p, dir) / nd;
                for (std::size_t j = 0; j < 5; ++j) p[j] += (label * (1.0 + rng.uniform()) - along) * dir[j] / nd;
                x.push_back(p);
                y.push_back(label);
            }
            const auto model = train_svm(x, y, 1e-3, 30, seed);
            for (std::size_t i = 0; i < x.size(); ++i) ok = ok && (model.decision(x[i]) > 0 ? 1 : -1) == y[i];
        }
        if (!ok) failed.push_back("svm-separable");
    }

    std::string detail = "em-monotone, gmm-k1, fisher, bbox-roundtrip, ridge, svm-separable";
    if (!failed.empty()) {
        detail = "failed:";
        for (const auto& f : failed) detail += " " + f;
    }
    report("numerical suites", failed.empty(), detail);
}

void determinism(const fs::path& a, const fs::path& b, double secs) {
    if (secs < 0) return report("determinism", false, "second `hkdet all` failed");
    std::size_t files = 0, differ = 0;
    for (const auto& e : fs::directory_iterator(a / "reports")) {
        ++files;
        differ += slurp(e.path()) != slurp(b / "reports" / e.path().filename());
    }
    const bool dets_same = slurp(a / "detections" / "test.txt") == slurp(b / "detections" / "test.txt");
    report("determinism", files >= 1 && differ == 0 && dets_same,
           fmt("report files identical: %.0f/%.0f; detection dumps identical: ", double(files - differ),
               double(files)) +
               (dets_same ? "yes" : "no"));
}

void dimension_check() {
    const auto fused = fuse_scores(Vector(200, 0.1), Vector(200, 0.2), Vector(200, 0.3));
    report("fusion dimension", fused.size() == 600, fmt("N=200 -> fused length %.0f (600)", double(fused.size())));
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path work = fs::absolute(argc > 1 ? argv[1] : "acceptance_work");
    fs::create_directories(work);
    const auto run1 = work / "run1", run2 = work / "run2";

    const double secs1 = run_all_cli(run1);
    end_to_end(run1, secs1);
    const bool have_run = secs1 >= 0;
    if (have_run) {
        proposal_recall_check(run1);
        context_gating(run1);
    } else {
        report("proposal recall", false, "no pipeline run");
        report("context gating", false, "no pipeline run");
    }
    oracle_equivalence();
    ap_fixture();
    numerical_suites();
    determinism(run1, run2, have_run ? run_all_cli(run2) : -1);
    dimension_check();
    // ablation last: it adds detection variants to run1
    if (have_run)
        fusion_ablation(run1);
    else
        report("fusion ablation", false, "no pipeline run");

    std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
    return failures ? 1 : 0;
}
