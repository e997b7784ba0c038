#pragma once

// Graph-based over-segmentation followed by selective-search hierarchical
// grouping. Produces class-agnostic candidate boxes for an image.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <tuple>
#include <utility>
#include <vector>

#include "hkdet/core.hpp"
#include "hkdet/image.hpp"

namespace hkdet {

struct SegmentationMap {
    int width = 0, height = 0;
    int region_count = 0;
    std::vector<int> labels;  // row-major, ids contiguous from 0

    int at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }
};

struct Region {
    static constexpr int kColorBins = 25;
    static constexpr int kTextureBins = 10;

    int id = 0;
    int pixel_count = 0;
    Box bbox;
    std::vector<double> color_hist;    // kColorBins per channel, sums to 1
    std::vector<double> texture_hist;  // kTextureBins per channel, sums to 1
};

struct ProposalConfig {
    double k = 300.0;
    int min_size = 50;
    double sigma = 0.8;
    int max_proposals = 2000;  // 0 keeps every box
    double min_box_side = 1.0;
};

namespace detail {

// Union-find with the adaptive merge threshold of the graph segmenter.
class SegmentForest {
public:
    SegmentForest(int n, double k) : parent_(n), rank_(n, 0), size_(n, 1), threshold_(n, k), k_(k) {
        std::iota(parent_.begin(), parent_.end(), 0);
    }

    int find(int x) {
        int root = x;
        while (parent_[root] != root) root = parent_[root];
        while (parent_[x] != root) {
            int next = parent_[x];
            parent_[x] = root;
            x = next;
        }
        return root;
    }

    int join(int a, int b) {
        if (rank_[a] < rank_[b]) std::swap(a, b);
        parent_[b] = a;
        size_[a] += size_[b];
        if (rank_[a] == rank_[b]) ++rank_[a];
        return a;
    }

    int size(int root) const { return size_[root]; }
    double threshold(int root) const { return threshold_[root]; }
    void set_internal(int root, double w) { threshold_[root] = w + k_ / size_[root]; }

private:
    std::vector<int> parent_, rank_, size_;
    std::vector<double> threshold_;
    double k_;
};

struct GraphEdge {
    int a, b;
    double w;
};

inline std::vector<double> gaussian_kernel(double sigma) {
    const int len = static_cast<int>(std::ceil(sigma * 4.0)) + 1;
    std::vector<double> k(len);
    for (int i = 0; i < len; ++i) k[i] = std::exp(-0.5 * (i / sigma) * (i / sigma));
    double sum = k[0];
    for (int i = 1; i < len; ++i) sum += 2 * k[i];
    for (auto& v : k) v /= sum;
    return k;
}

inline Plane smooth(const Plane& in, double sigma) {
    if (sigma <= 0) return in;
    const auto k = gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size()) - 1;
    Plane tmp(in.width, in.height), out(in.width, in.height);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x) {
            double s = k[0] * in(x, y);
            for (int i = 1; i <= r; ++i)
                s += k[i] * (in(std::max(x - i, 0), y) + in(std::min(x + i, in.width - 1), y));
            tmp(x, y) = s;
        }
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x) {
            double s = k[0] * tmp(x, y);
            for (int i = 1; i <= r; ++i)
                s += k[i] * (tmp(x, std::max(y - i, 0)) + tmp(x, std::min(y + i, in.height - 1)));
            out(x, y) = s;
        }
    return out;
}

}  // namespace detail

/// Felzenszwalb-Huttenlocher segmentation on an 8-connected pixel graph.
/// sigma <= 0 disables the pre-smoothing.
inline SegmentationMap segment_graph(const Image& img, double k, int min_size, double sigma) {
    if (img.empty()) throw Error("cannot segment an empty image");
    if (!(k > 0)) throw Error("segmentation k must be positive");
    if (min_size < 1) throw Error("segmentation min_size must be >= 1");
    const int w = img.width(), h = img.height();

    std::vector<Plane> planes;
    for (int c = 0; c < img.channels(); ++c) planes.push_back(detail::smooth(channel_plane(img, c), sigma));

    auto weight = [&](int x0, int y0, int x1, int y1) {
        double s = 0;
        for (const auto& p : planes) {
            const double d = p(x0, y0) - p(x1, y1);
            s += d * d;
        }
        return std::sqrt(s);
    };

    std::vector<detail::GraphEdge> edges;
    edges.reserve(static_cast<std::size_t>(w) * h * 4);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int id = y * w + x;
            if (x + 1 < w) edges.push_back({id, id + 1, weight(x, y, x + 1, y)});
            if (y + 1 < h) edges.push_back({id, id + w, weight(x, y, x, y + 1)});
            if (x + 1 < w && y + 1 < h) edges.push_back({id, id + w + 1, weight(x, y, x + 1, y + 1)});
            if (x + 1 < w && y > 0) edges.push_back({id, id - w + 1, weight(x, y, x + 1, y - 1)});
        }
    std::stable_sort(edges.begin(), edges.end(),
                     [](const detail::GraphEdge& a, const detail::GraphEdge& b) { return a.w < b.w; });

    detail::SegmentForest forest(w * h, k);
    for (const auto& e : edges) {
        int a = forest.find(e.a), b = forest.find(e.b);
        if (a == b) continue;
        if (e.w <= forest.threshold(a) && e.w <= forest.threshold(b)) {
            const int root = forest.join(a, b);
            forest.set_internal(root, e.w);
        }
    }
    for (const auto& e : edges) {
        int a = forest.find(e.a), b = forest.find(e.b);
        if (a != b && (forest.size(a) < min_size || forest.size(b) < min_size)) forest.join(a, b);
    }

    SegmentationMap seg;
    seg.width = w;
    seg.height = h;
    seg.labels.resize(static_cast<std::size_t>(w) * h);
    std::vector<int> remap(static_cast<std::size_t>(w) * h, -1);
    for (int i = 0; i < w * h; ++i) {
        const int root = forest.find(i);
        if (remap[root] < 0) remap[root] = seg.region_count++;
        seg.labels[i] = remap[root];
    }
    return seg;
}

/// Per-region size, tight box, color and gradient-orientation histograms.
inline std::vector<Region> region_descriptors(const Image& img, const SegmentationMap& seg) {
    if (seg.width != img.width() || seg.height != img.height())
        throw Error("segmentation does not match image dimensions");
    const int C = img.channels();
    const int n = seg.region_count;

    std::vector<Region> regions(n);
    std::vector<double> x0(n, img.width()), y0(n, img.height()), x1(n, 0), y1(n, 0);
    for (int r = 0; r < n; ++r) {
        regions[r].id = r;
        regions[r].color_hist.assign(Region::kColorBins * C, 0.0);
        regions[r].texture_hist.assign(Region::kTextureBins * C, 0.0);
    }

    std::vector<Plane> planes;
    for (int c = 0; c < C; ++c) planes.push_back(channel_plane(img, c));
    constexpr double kTwoPi = 6.283185307179586;

    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            const int r = seg.at(x, y);
            Region& reg = regions[r];
            ++reg.pixel_count;
            x0[r] = std::min<double>(x0[r], x);
            y0[r] = std::min<double>(y0[r], y);
            x1[r] = std::max<double>(x1[r], x + 1);
            y1[r] = std::max<double>(y1[r], y + 1);
            for (int c = 0; c < C; ++c) {
                const int v = img.at(x, y, c);
                reg.color_hist[c * Region::kColorBins + v * Region::kColorBins / 256] += 1.0;

                const auto& p = planes[c];
                const double dx = p(std::min(x + 1, p.width - 1), y) - p(std::max(x - 1, 0), y);
                const double dy = p(x, std::min(y + 1, p.height - 1)) - p(x, std::max(y - 1, 0));
                const double mag = std::hypot(dx, dy);
                if (mag > 0) {
                    double ang = std::atan2(dy, dx);
                    if (ang < 0) ang += kTwoPi;
                    int bin = static_cast<int>(ang / kTwoPi * Region::kTextureBins);
                    bin = std::min(bin, Region::kTextureBins - 1);
                    reg.texture_hist[c * Region::kTextureBins + bin] += mag;
                }
            }
        }

    for (int r = 0; r < n; ++r) {
        Region& reg = regions[r];
        reg.bbox = Box::make(x0[r], y0[r], x1[r], y1[r]);
        const double cn = static_cast<double>(reg.pixel_count) * C;
        for (auto& v : reg.color_hist) v /= cn;
        const double tsum = std::accumulate(reg.texture_hist.begin(), reg.texture_hist.end(), 0.0);
        if (tsum > 0) {
            for (auto& v : reg.texture_hist) v /= tsum;
        } else {
            // flat region: no orientation preference
            std::fill(reg.texture_hist.begin(), reg.texture_hist.end(), 1.0 / reg.texture_hist.size());
        }
    }
    return regions;
}

inline double histogram_intersection(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw Error("histogram length mismatch");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::min(a[i], b[i]);
    return s;
}

struct SimilarityTerms {
    double color = 0, texture = 0, size = 0, fill = 0;
    double total() const { return color + texture + size + fill; }
};

inline SimilarityTerms similarity_terms(const Region& a, const Region& b, double image_area) {
    SimilarityTerms t;
    const double sa = a.pixel_count, sb = b.pixel_count;
    t.color = std::clamp(histogram_intersection(a.color_hist, b.color_hist), 0.0, 1.0);
    t.texture = std::clamp(histogram_intersection(a.texture_hist, b.texture_hist), 0.0, 1.0);
    t.size = std::clamp(1.0 - (sa + sb) / image_area, 0.0, 1.0);
    t.fill = std::clamp(1.0 - (box_union(a.bbox, b.bbox).area() - sa - sb) / image_area, 0.0, 1.0);
    return t;
}

/// Sum of color, texture, size and fill similarity; in [0,4].
inline double similarity(const Region& a, const Region& b, double image_area) {
    return similarity_terms(a, b, image_area).total();
}

/// Region formed by merging two regions; histograms are pixel-count-weighted.
inline Region merge_regions(const Region& a, const Region& b, int new_id) {
    Region m;
    m.id = new_id;
    m.pixel_count = a.pixel_count + b.pixel_count;
    m.bbox = box_union(a.bbox, b.bbox);
    const double wa = static_cast<double>(a.pixel_count) / m.pixel_count;
    const double wb = static_cast<double>(b.pixel_count) / m.pixel_count;
    m.color_hist.resize(a.color_hist.size());
    m.texture_hist.resize(a.texture_hist.size());
    for (std::size_t i = 0; i < m.color_hist.size(); ++i) m.color_hist[i] = wa * a.color_hist[i] + wb * b.color_hist[i];
    for (std::size_t i = 0; i < m.texture_hist.size(); ++i)
        m.texture_hist[i] = wa * a.texture_hist[i] + wb * b.texture_hist[i];
    return m;
}

/// Pairs of region ids (lo, hi) that touch under 8-connectivity.
inline std::set<std::pair<int, int>> region_adjacency(const SegmentationMap& seg) {
    std::set<std::pair<int, int>> adj;
    auto link = [&](int a, int b) {
        if (a != b) adj.emplace(std::min(a, b), std::max(a, b));
    };
    for (int y = 0; y < seg.height; ++y)
        for (int x = 0; x < seg.width; ++x) {
            const int l = seg.at(x, y);
            if (x + 1 < seg.width) link(l, seg.at(x + 1, y));
            if (y + 1 < seg.height) link(l, seg.at(x, y + 1));
            if (x + 1 < seg.width && y + 1 < seg.height) link(l, seg.at(x + 1, y + 1));
            if (x + 1 < seg.width && y > 0) link(l, seg.at(x + 1, y - 1));
        }
    return adj;
}

struct GroupingResult {
    int initial_regions = 0;
    int merges = 0;
    std::vector<Region> regions;  // every region ever created, indexed by id
};

/// Hierarchical grouping: repeatedly merges the most similar adjacent pair
/// (ties to the smallest id pair) until a single region remains.
inline GroupingResult hierarchical_grouping(const Image& img, const SegmentationMap& seg) {
    GroupingResult out;
    out.regions = region_descriptors(img, seg);
    out.initial_regions = seg.region_count;
    const double image_area = static_cast<double>(img.width()) * img.height();

    std::vector<std::set<int>> neighbors(out.regions.size());
    std::map<std::pair<int, int>, double> sims;
    for (const auto& [a, b] : region_adjacency(seg)) {
        neighbors[a].insert(b);
        neighbors[b].insert(a);
        sims[{a, b}] = similarity(out.regions[a], out.regions[b], image_area);
    }

    while (!sims.empty()) {
        auto best = sims.begin();
        for (auto it = std::next(sims.begin()); it != sims.end(); ++it)
            if (it->second > best->second) best = it;
        const auto [a, b] = best->first;

        const int t = static_cast<int>(out.regions.size());
        out.regions.push_back(merge_regions(out.regions[a], out.regions[b], t));
        ++out.merges;

        std::set<int> merged_neighbors;
        for (int src : {a, b}) {
            for (int n : neighbors[src]) {
                sims.erase({std::min(src, n), std::max(src, n)});
                neighbors[n].erase(src);
                if (n != a && n != b) merged_neighbors.insert(n);
            }
            neighbors[src].clear();
        }
        neighbors.emplace_back();
        for (int n : merged_neighbors) {
            neighbors[n].insert(t);
            neighbors[t].insert(n);
            sims[{n, t}] = similarity(out.regions[n], out.regions[t], image_area);
        }
    }
    return out;
}

/// Candidate boxes: the box of every grouped region, newest first,
/// duplicates dropped, then filtered by min side and truncated to budget.
inline std::vector<Box> selective_search(const Image& img, const ProposalConfig& cfg) {
    const auto seg = segment_graph(img, cfg.k, cfg.min_size, cfg.sigma);
    const auto grouping = hierarchical_grouping(img, seg);

    std::vector<Box> boxes;
    std::set<std::tuple<double, double, double, double>> seen;
    for (auto it = grouping.regions.rbegin(); it != grouping.regions.rend(); ++it) {
        const Box& b = it->bbox;
        if (!seen.emplace(b.x_min, b.y_min, b.x_max, b.y_max).second) continue;
        if (b.width() < cfg.min_box_side || b.height() < cfg.min_box_side) continue;
        boxes.push_back(b);
        if (cfg.max_proposals > 0 && static_cast<int>(boxes.size()) >= cfg.max_proposals) break;
    }
    return boxes;
}

}  // namespace hkdet
