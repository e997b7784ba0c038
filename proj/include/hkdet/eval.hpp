#pragma once

// Detection matching, all-point interpolated AP, mAP and the cross-run
// "categories won" comparison.

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hkdet/core.hpp"
#include "hkdet/model_io.hpp"

namespace hkdet {

struct MatchResult {
    std::vector<bool> true_positive;    // aligned with the input detections
    std::map<int, std::size_t> num_gt;  // per category
};

/// Within each (image, category), detections are visited by descending score
/// (ties as in nms); each takes the unmatched ground truth with the highest
/// IoU if that IoU reaches the threshold, otherwise it is a false positive.
inline MatchResult match_detections(const std::vector<Detection>& detections, const std::vector<GroundTruth>& gts,
                                    double iou_threshold = 0.5) {
    MatchResult res;
    res.true_positive.assign(detections.size(), false);
    for (const auto& g : gts) ++res.num_gt[g.category_id];

    std::map<std::pair<std::string, int>, std::vector<std::size_t>> gt_groups, det_groups;
    for (std::size_t i = 0; i < gts.size(); ++i) gt_groups[{gts[i].image_id, gts[i].category_id}].push_back(i);
    for (std::size_t i = 0; i < detections.size(); ++i)
        det_groups[{detections[i].image_id, detections[i].category_id}].push_back(i);

    for (auto& [key, dets] : det_groups) {
        std::stable_sort(dets.begin(), dets.end(), [&](std::size_t a, std::size_t b) {
            return detection_rank_less(detections[a], detections[b]);
        });
        auto git = gt_groups.find(key);
        if (git == gt_groups.end()) continue;
        const auto& cand = git->second;
        std::vector<bool> used(cand.size(), false);
        for (std::size_t di : dets) {
            double best = -1;
            std::size_t best_j = cand.size();
            for (std::size_t j = 0; j < cand.size(); ++j) {
                if (used[j]) continue;
                const double o = iou(detections[di].box, gts[cand[j]].box);
                if (o > best) {
                    best = o;
                    best_j = j;
                }
            }
            if (best_j < cand.size() && best >= iou_threshold) {
                used[best_j] = true;
                res.true_positive[di] = true;
            }
        }
    }
    return res;
}

/// Area under the PR curve with precision made non-increasing from the right.
/// flags are TP/FP in descending score order.
inline double average_precision(const std::vector<bool>& flags, std::size_t num_gt) {
    if (num_gt == 0) throw Error("average_precision: category has no ground truth");
    const std::size_t n = flags.size();
    std::vector<long double> prec(n);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
        tp += flags[i];
        prec[i] = static_cast<long double>(tp) / static_cast<long double>(i + 1);
    }
    for (std::size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
    // recall only moves at true positives, by 1/num_gt each time
    long double sum = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (flags[i]) sum += prec[i];
    return static_cast<double>(sum / static_cast<long double>(num_gt));
}

/// Global ranking of detections within one category: score desc, then
/// image id, x_min, y_min.
inline bool eval_rank_less(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    if (a.box.x_min != b.box.x_min) return a.box.x_min < b.box.x_min;
    return a.box.y_min < b.box.y_min;
}

struct CategoryAp {
    std::string category;
    double ap = 0;
    std::size_t num_gt = 0;
};

struct PerClassReport {
    std::vector<CategoryAp> rows;  // categories with at least one ground truth
    double mean_ap = 0;
};

inline double mean_ap(const std::vector<CategoryAp>& rows) {
    if (rows.empty()) throw Error("mean_ap: no evaluated categories");
    long double s = 0;
    for (const auto& r : rows) s += r.ap;
    return static_cast<double>(s / static_cast<long double>(rows.size()));
}

inline double mean_ap(const PerClassReport& report) { return mean_ap(report.rows); }

inline PerClassReport per_class_report(const std::vector<Detection>& detections, const std::vector<GroundTruth>& gts,
                                       const std::vector<std::string>& category_names, double iou_threshold = 0.5) {
    const auto match = match_detections(detections, gts, iou_threshold);
    PerClassReport rep;
    for (std::size_t c = 0; c < category_names.size(); ++c) {
        auto it = match.num_gt.find(static_cast<int>(c));
        if (it == match.num_gt.end() || it->second == 0) continue;
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < detections.size(); ++i)
            if (detections[i].category_id == static_cast<int>(c)) idx.push_back(i);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return eval_rank_less(detections[a], detections[b]); });
        std::vector<bool> flags;
        flags.reserve(idx.size());
        for (std::size_t i : idx) flags.push_back(match.true_positive[i]);
        rep.rows.push_back(CategoryAp{category_names[c], average_precision(flags, it->second), it->second});
    }
    rep.mean_ap = mean_ap(rep.rows);
    return rep;
}

// Report file: `category ap num_gt` header, one row per category, `mAP <v>`.

inline void write_report(std::ostream& os, const PerClassReport& rep) {
    os << "category ap num_gt\n";
    for (const auto& r : rep.rows) os << r.category << ' ' << format_real(r.ap) << ' ' << r.num_gt << '\n';
    os << "mAP " << format_real(rep.mean_ap) << '\n';
}

inline PerClassReport read_report(std::istream& is) {
    PerClassReport rep;
    std::string line;
    std::size_t line_no = 0;
    bool have_map = false;
    auto fail = [&](const std::string& msg) { return Error("report line " + std::to_string(line_no) + ": " + msg); };
    if (!std::getline(is, line)) throw Error("report is empty");
    ++line_no;
    {
        std::istringstream hs(line);
        std::string a, b, c;
        hs >> a >> b >> c;
        if (a != "category" || b != "ap" || c != "num_gt") throw fail("expected header `category ap num_gt`");
    }
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (have_map) throw fail("content after the mAP line");
        std::istringstream ls(line);
        std::string name, tok;
        ls >> name >> tok;
        if (name == "mAP") {
            try {
                rep.mean_ap = parse_real(tok);
            } catch (const Error& e) {
                throw fail(e.what());
            }
            have_map = true;
            continue;
        }
        CategoryAp row;
        row.category = name;
        try {
            row.ap = parse_real(tok);
        } catch (const Error& e) {
            throw fail(e.what());
        }
        if (!(ls >> row.num_gt)) throw fail("missing num_gt");
        rep.rows.push_back(row);
    }
    if (!have_map) throw Error("report has no mAP line");
    return rep;
}

inline PerClassReport load_report(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open report " + path);
    try {
        return read_report(is);
    } catch (const Error& e) {
        throw Error(path + ": " + e.what());
    }
}

struct NamedReport {
    std::string name;
    PerClassReport report;
};

/// A category is won by the report with the strictly highest AP; ties at the
/// top award nothing.
inline std::map<std::string, int> categories_won(const std::vector<NamedReport>& reports) {
    std::map<std::string, int> wins;
    for (const auto& r : reports) wins[r.name] = 0;
    if (reports.empty()) return wins;

    std::vector<std::map<std::string, double>> aps;
    for (const auto& r : reports) {
        std::map<std::string, double> m;
        for (const auto& row : r.report.rows) m[row.category] = row.ap;
        aps.push_back(std::move(m));
    }
    for (std::size_t i = 1; i < aps.size(); ++i) {
        bool same = aps[i].size() == aps[0].size();
        for (auto it = aps[i].begin(), jt = aps[0].begin(); same && it != aps[i].end(); ++it, ++jt)
            same = it->first == jt->first;
        if (!same) throw Error("categories_won: report '" + reports[i].name + "' covers a different category set");
    }
    for (const auto& [category, ap0] : aps[0]) {
        (void)ap0;
        double best = -1;
        std::size_t winner = 0, count = 0;
        for (std::size_t i = 0; i < aps.size(); ++i) {
            const double ap = aps[i].at(category);
            if (ap > best) {
                best = ap;
                winner = i;
                count = 1;
            } else if (ap == best) {
                ++count;
            }
        }
        if (count == 1) ++wins[reports[winner].name];
    }
    return wins;
}

}  // namespace hkdet
