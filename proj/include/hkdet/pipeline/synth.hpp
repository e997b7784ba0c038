#pragma once

// Synthetic detection dataset: colored, textured shapes on cluttered
// backgrounds with exact ground-truth boxes. Each class has its own
// geometry, hue and texture so every feature channel has signal to learn.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hkdet/core.hpp"
#include "hkdet/image.hpp"
#include "hkdet/pipeline/manifest.hpp"
#include "hkdet/rng.hpp"

namespace hkdet {

inline const std::vector<std::string>& synth_class_names() {
    static const std::vector<std::string> names{"disk", "square", "triangle", "diamond", "cross", "ring"};
    return names;
}

struct SynthSpec {
    int classes = 3;
    int images = 1;
    int max_shapes = 4;
    double noise = 8.0;
    int width = 96;
    int height = 96;
    std::uint64_t seed = 0;
};

struct SynthShape {
    int category = 0;
    double cx = 0, cy = 0, rx = 0, ry = 0;
    std::array<double, 3> color{};
};

struct SynthScene {
    Image image;
    std::vector<SynthShape> shapes;
    std::vector<Box> boxes;                       // tight extent of each shape's pixels
    std::vector<std::vector<std::uint8_t>> masks;  // per shape, width*height
};

namespace detail {

// Membership of a pixel center in the unit shape; u, v are offsets divided
// by the radii.
inline bool synth_inside(int category, double u, double v) {
    const double au = std::abs(u), av = std::abs(v);
    switch (category) {
        case 0: return u * u + v * v <= 1.0;
        case 1: return au <= 0.85 && av <= 0.85;
        case 2: return v >= -1.0 && v <= 1.0 && au <= 0.5 * (v + 1.0);
        case 3: return au + av <= 1.0;
        case 4: return (au <= 0.36 && av <= 1.0) || (av <= 0.36 && au <= 1.0);
        default: {
            const double r2 = u * u + v * v;
            return r2 <= 1.0 && r2 >= 0.3;
        }
    }
}

// Class texture as a signed modulation around the base color.
inline double synth_texture(int category, int x, int y) {
    switch (category) {
        case 0: return (y / 3) % 2 ? 1.0 : -1.0;                // horizontal stripes
        case 1: return ((x / 4) + (y / 4)) % 2 ? 1.0 : -1.0;    // checkerboard
        case 2: return ((x + y) / 3) % 2 ? 1.0 : -1.0;          // diagonal stripes
        case 3: return (x / 3) % 2 ? 1.0 : -1.0;                // vertical stripes
        case 4: return (x % 4 < 2 && y % 4 < 2) ? 1.0 : -0.3;   // dots
        default: return 0.0;                                    // flat
    }
}

inline std::array<double, 3> synth_base_color(int category) {
    static const std::array<std::array<double, 3>, 6> colors{{
        {205, 60, 50}, {55, 180, 70}, {60, 90, 215}, {225, 200, 45}, {190, 65, 200}, {55, 200, 205}}};
    return colors[static_cast<std::size_t>(category)];
}

inline std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace detail

/// Draws one scene. The first shape always fits; later shapes are placed by
/// rejection sampling so boxes never overlap (3 px margin).
inline SynthScene render_scene(Rng& rng, const SynthSpec& spec) {
    if (spec.classes < 1 || spec.classes > static_cast<int>(synth_class_names().size()))
        throw Error("synthetic spec: classes must be in [1, " + std::to_string(synth_class_names().size()) + "]");
    if (spec.max_shapes < 1) throw Error("synthetic spec: max_shapes must be >= 1");
    if (spec.width < 48 || spec.height < 48) throw Error("synthetic spec: images must be at least 48x48");
    const int W = spec.width, H = spec.height;

    // background: muted base color, linear gradient, low-contrast clutter
    std::vector<double> bg(static_cast<std::size_t>(W) * H * 3);
    const double base = rng.uniform(80, 160);
    std::array<double, 3> tint{};
    for (auto& t : tint) t = base + rng.uniform(-15, 15);
    const double gx = rng.uniform(-25, 25), gy = rng.uniform(-25, 25);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)
                bg[(static_cast<std::size_t>(y) * W + x) * 3 + c] =
                    tint[c] + gx * (x / double(W) - 0.5) + gy * (y / double(H) - 0.5);
    const int clutter = rng.uniform_int(4, 8);
    for (int i = 0; i < clutter; ++i) {
        const double cx = rng.uniform(0, W), cy = rng.uniform(0, H);
        const double rx = rng.uniform(4, W / 5.0), ry = rng.uniform(4, H / 5.0);
        const double shift = rng.uniform(-30, 30);
        const bool ellipse = rng.uniform() < 0.5;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double u = (x + 0.5 - cx) / rx, v = (y + 0.5 - cy) / ry;
                const bool in = ellipse ? u * u + v * v <= 1 : std::abs(u) <= 1 && std::abs(v) <= 1;
                if (!in) continue;
                for (int c = 0; c < 3; ++c) bg[(static_cast<std::size_t>(y) * W + x) * 3 + c] += shift;
            }
    }

    SynthScene scene;
    const int want = rng.uniform_int(1, spec.max_shapes);
    std::vector<Box> occupied;
    for (int s = 0; s < want; ++s) {
        for (int attempt = 0; attempt < 60; ++attempt) {
            SynthShape sh;
            sh.category = rng.uniform_int(0, spec.classes - 1);
            const double r = rng.uniform(10, 20);
            const double aspect = rng.uniform(0.8, 1.25);
            sh.rx = r * std::sqrt(aspect);
            sh.ry = r / std::sqrt(aspect);
            sh.cx = rng.uniform(sh.rx + 1, W - sh.rx - 1);
            sh.cy = rng.uniform(sh.ry + 1, H - sh.ry - 1);
            const auto bc = detail::synth_base_color(sh.category);
            for (int c = 0; c < 3; ++c) sh.color[c] = bc[c] + rng.uniform(-20, 20);
            const Box extent{sh.cx - sh.rx - 3, sh.cy - sh.ry - 3, sh.cx + sh.rx + 3, sh.cy + sh.ry + 3};
            bool clash = false;
            for (const auto& o : occupied) clash = clash || intersection_area(o, extent) > 0;
            if (clash) continue;

            std::vector<std::uint8_t> mask(static_cast<std::size_t>(W) * H, 0);
            int x0 = W, y0 = H, x1 = 0, y1 = 0;
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    if (!detail::synth_inside(sh.category, (x + 0.5 - sh.cx) / sh.rx, (y + 0.5 - sh.cy) / sh.ry)) continue;
                    mask[static_cast<std::size_t>(y) * W + x] = 1;
                    x0 = std::min(x0, x);
                    y0 = std::min(y0, y);
                    x1 = std::max(x1, x + 1);
                    y1 = std::max(y1, y + 1);
                }
            if (x0 >= x1 || y0 >= y1) continue;
            occupied.push_back(extent);
            scene.shapes.push_back(sh);
            scene.boxes.push_back(Box::make(x0, y0, x1, y1));
            scene.masks.push_back(std::move(mask));
            break;
        }
    }

    Image img(W, H, 3);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * W + x;
            std::array<double, 3> v{bg[p * 3], bg[p * 3 + 1], bg[p * 3 + 2]};
            for (std::size_t s = 0; s < scene.shapes.size(); ++s) {
                if (!scene.masks[s][p]) continue;
                const auto& sh = scene.shapes[s];
                const double t = 35.0 * detail::synth_texture(sh.category, x, y);
                for (int c = 0; c < 3; ++c) v[c] = sh.color[c] + t;
            }
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = detail::to_u8(v[c] + spec.noise * rng.gaussian());
        }
    scene.image = std::move(img);
    return scene;
}

/// Writes `<dir>/images/<prefix>_NNNN.ppm` and `<dir>/<prefix>.manifest`;
/// returns the manifest path. Identical spec and seed give identical bytes.
inline std::string synth_generate(const SynthSpec& spec, const std::string& dir, const std::string& prefix) {
    if (spec.images < 1) throw Error("synthetic spec: images must be >= 1");
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    Rng rng(spec.seed);
    DatasetManifest m;
    m.category_names.assign(synth_class_names().begin(), synth_class_names().begin() + spec.classes);
    for (int i = 0; i < spec.images; ++i) {
        char id[64];
        std::snprintf(id, sizeof id, "%s_%04d", prefix.c_str(), i);
        const SynthScene scene = render_scene(rng, spec);
        const std::string rel = std::string("images/") + id + ".ppm";
        save_pnm((fs::path(dir) / rel).string(), scene.image);
        ManifestImage im;
        im.image_id = id;
        im.path = rel;
        for (std::size_t s = 0; s < scene.shapes.size(); ++s)
            im.ground_truths.push_back(GroundTruth{id, scene.boxes[s], scene.shapes[s].category});
        m.images.push_back(std::move(im));
    }
    const std::string path = (fs::path(dir) / (prefix + ".manifest")).string();
    std::ofstream os(path);
    if (!os) throw Error("cannot write manifest " + path);
    write_manifest(os, m);
    return path;
}

}  // namespace hkdet
