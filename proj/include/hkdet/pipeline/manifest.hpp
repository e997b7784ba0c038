#pragma once

// Dataset manifest:
//   N <name_0> ... <name_{N-1}>
//   <image_id> <path> <gt_count>
//   <category_id> <x_min> <y_min> <x_max> <y_max> [difficult]
//   ...
// Image paths are resolved relative to the manifest's directory. The
// optional trailing difficult flag is accepted and ignored.

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hkdet/core.hpp"
#include "hkdet/model_io.hpp"

namespace hkdet {

struct ManifestImage {
    std::string image_id;
    std::string path;  // as written in the manifest
    std::vector<GroundTruth> ground_truths;
};

struct DatasetManifest {
    std::vector<std::string> category_names;
    std::vector<ManifestImage> images;
    std::filesystem::path base_dir;

    std::size_t num_categories() const { return category_names.size(); }

    std::string image_path(const ManifestImage& im) const {
        std::filesystem::path p(im.path);
        return p.is_absolute() ? p.string() : (base_dir / p).string();
    }

    std::vector<GroundTruth> all_ground_truths() const {
        std::vector<GroundTruth> out;
        for (const auto& im : images) out.insert(out.end(), im.ground_truths.begin(), im.ground_truths.end());
        return out;
    }
};

inline DatasetManifest read_manifest(std::istream& is) {
    DatasetManifest m;
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& msg) { return Error("manifest line " + std::to_string(line_no) + ": " + msg); };
    auto next = [&]() {
        while (std::getline(is, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") != std::string::npos) return true;
        }
        return false;
    };
    if (!next()) throw Error("manifest is empty");
    {
        std::istringstream hs(line);
        long long n = -1;
        if (!(hs >> n) || n < 1) throw fail("expected header `N <category names>`");
        std::string name;
        while (hs >> name) m.category_names.push_back(name);
        if (static_cast<long long>(m.category_names.size()) != n)
            throw fail("header declares " + std::to_string(n) + " categories but names " +
                       std::to_string(m.category_names.size()));
    }
    std::set<std::string> ids;
    while (next()) {
        std::istringstream ls(line);
        ManifestImage im;
        long long count = -1;
        std::string extra;
        if (!(ls >> im.image_id >> im.path >> count) || count < 0 || (ls >> extra))
            throw fail("expected `image_id path gt_count`");
        if (!ids.insert(im.image_id).second) throw fail("duplicate image_id '" + im.image_id + "'");
        for (long long g = 0; g < count; ++g) {
            if (!next()) throw fail("missing ground-truth lines for image '" + im.image_id + "'");
            std::istringstream gs(line);
            long long cat = -1;
            double x0, y0, x1, y1;
            if (!(gs >> cat >> x0 >> y0 >> x1 >> y1)) throw fail("expected `category_id x_min y_min x_max y_max`");
            int difficult = 0;
            if (gs >> difficult) {
                if (gs >> extra) throw fail("too many fields in ground-truth line");
            }
            if (cat < 0 || cat >= static_cast<long long>(m.category_names.size()))
                throw fail("category id " + std::to_string(cat) + " out of range");
            GroundTruth gt;
            gt.image_id = im.image_id;
            gt.category_id = static_cast<int>(cat);
            try {
                gt.box = Box::make(x0, y0, x1, y1);
            } catch (const Error& e) {
                throw fail(e.what());
            }
            im.ground_truths.push_back(gt);
        }
        m.images.push_back(std::move(im));
    }
    return m;
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open manifest " + path);
    DatasetManifest m;
    try {
        m = read_manifest(is);
    } catch (const Error& e) {
        throw Error(path + ": " + e.what());
    }
    m.base_dir = std::filesystem::path(path).parent_path();
    return m;
}

inline void write_manifest(std::ostream& os, const DatasetManifest& m) {
    os << m.category_names.size();
    for (const auto& n : m.category_names) os << ' ' << n;
    os << '\n';
    for (const auto& im : m.images) {
        os << im.image_id << ' ' << im.path << ' ' << im.ground_truths.size() << '\n';
        for (const auto& g : im.ground_truths)
            os << g.category_id << ' ' << format_real(g.box.x_min) << ' ' << format_real(g.box.y_min) << ' '
               << format_real(g.box.x_max) << ' ' << format_real(g.box.y_max) << '\n';
    }
}

}  // namespace hkdet
