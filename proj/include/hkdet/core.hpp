#pragma once

// Geometry, detection records, IoU and greedy non-maximum suppression.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace hkdet {

/// Every failure in the library surfaces as this exception type.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Axis-aligned box with continuous corners, origin top-left.
/// Construction through make() enforces strictly positive area.
struct Box {
    double x_min = 0, y_min = 0, x_max = 1, y_max = 1;

    static Box make(double x0, double y0, double x1, double y1) {
        if (!(std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1)))
            throw Error("box has non-finite coordinates");
        if (!(x0 < x1 && y0 < y1)) {
            std::ostringstream os;
            os << "box (" << x0 << "," << y0 << "," << x1 << "," << y1 << ") has no area";
            throw Error(os.str());
        }
        return Box{x0, y0, x1, y1};
    }

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    double center_x() const { return 0.5 * (x_min + x_max); }
    double center_y() const { return 0.5 * (y_min + y_max); }

    friend bool operator==(const Box&, const Box&) = default;
};

struct Detection {
    std::string image_id;
    Box box;
    int category_id = 0;
    double score = 0;

    friend bool operator==(const Detection&, const Detection&) = default;
};

struct GroundTruth {
    std::string image_id;
    Box box;
    int category_id = 0;

    friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
    const double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (w <= 0 || h <= 0) return 0.0;
    return w * h;
}

/// Intersection over union. Boxes that only share an edge give 0.
inline double iou(const Box& a, const Box& b) {
    const double inter = intersection_area(a, b);
    if (inter == 0.0) return 0.0;
    const double uni = a.area() + b.area() - inter;
    return std::clamp(inter / uni, 0.0, 1.0);
}

/// Smallest box enclosing both.
inline Box box_union(const Box& a, const Box& b) {
    return Box{std::min(a.x_min, b.x_min), std::min(a.y_min, b.y_min),
               std::max(a.x_max, b.x_max), std::max(a.y_max, b.y_max)};
}

inline Box clip_box(const Box& b, double width, double height) {
    const double x0 = std::clamp(b.x_min, 0.0, width);
    const double y0 = std::clamp(b.y_min, 0.0, height);
    const double x1 = std::clamp(b.x_max, 0.0, width);
    const double y1 = std::clamp(b.y_max, 0.0, height);
    if (!(x0 < x1 && y0 < y1)) throw Error("box lies entirely outside the image");
    return Box{x0, y0, x1, y1};
}

/// Total order used wherever detections are ranked: score desc, x_min asc, y_min asc.
inline bool detection_rank_less(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x_min != b.box.x_min) return a.box.x_min < b.box.x_min;
    return a.box.y_min < b.box.y_min;
}

/// Greedy NMS over detections of one image and category. A detection is
/// suppressed when its IoU with an already kept one exceeds the threshold.
inline std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold) {
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw Error("nms threshold must be in (0,1]");
    for (std::size_t i = 1; i < detections.size(); ++i) {
        if (detections[i].image_id != detections[0].image_id ||
            detections[i].category_id != detections[0].category_id)
            throw Error("nms input mixes images or categories");
    }
    std::stable_sort(detections.begin(), detections.end(), detection_rank_less);

    std::vector<Detection> kept;
    std::vector<char> suppressed(detections.size(), 0);
    for (std::size_t i = 0; i < detections.size(); ++i) {
        if (suppressed[i]) continue;
        kept.push_back(detections[i]);
        for (std::size_t j = i + 1; j < detections.size(); ++j) {
            if (!suppressed[j] && iou(detections[i].box, detections[j].box) > iou_threshold)
                suppressed[j] = 1;
        }
    }
    return kept;
}

/// Applies nms independently to every (image, category) group. Output is
/// grouped by first appearance of the group in the input.
inline std::vector<Detection> nms_grouped(const std::vector<Detection>& detections, double iou_threshold) {
    std::vector<std::pair<std::string, int>> keys;
    std::vector<std::vector<Detection>> groups;
    for (const auto& d : detections) {
        std::size_t g = 0;
        for (; g < keys.size(); ++g)
            if (keys[g].first == d.image_id && keys[g].second == d.category_id) break;
        if (g == keys.size()) {
            keys.emplace_back(d.image_id, d.category_id);
            groups.emplace_back();
        }
        groups[g].push_back(d);
    }
    std::vector<Detection> out;
    for (auto& g : groups) {
        auto kept = nms(std::move(g), iou_threshold);
        out.insert(out.end(), kept.begin(), kept.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Detection dump: `image_id category_id score x_min y_min x_max y_max`,
// reals with 6 decimals.

inline std::string format_fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline void write_detections(std::ostream& os, const std::vector<Detection>& detections) {
    for (const auto& d : detections) {
        os << d.image_id << ' ' << d.category_id << ' ' << format_fixed6(d.score) << ' '
           << format_fixed6(d.box.x_min) << ' ' << format_fixed6(d.box.y_min) << ' '
           << format_fixed6(d.box.x_max) << ' ' << format_fixed6(d.box.y_max) << '\n';
    }
}

inline std::vector<Detection> read_detections(std::istream& is) {
    std::vector<Detection> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        Detection d;
        double x0, y0, x1, y1;
        std::string extra;
        if (!(ls >> d.image_id >> d.category_id >> d.score >> x0 >> y0 >> x1 >> y1) || (ls >> extra))
            throw Error("detection dump line " + std::to_string(line_no) + ": malformed record");
        try {
            d.box = Box::make(x0, y0, x1, y1);
        } catch (const Error& e) {
            throw Error("detection dump line " + std::to_string(line_no) + ": " + e.what());
        }
        out.push_back(std::move(d));
    }
    return out;
}

}  // namespace hkdet
