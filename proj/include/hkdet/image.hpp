#pragma once

// 8-bit raster images and binary PPM (P6) / PGM (P5) I/O.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "hkdet/core.hpp"

namespace hkdet {

/// Row-major, interleaved 8-bit image with 1 or 3 channels.
class Image {
public:
    Image() = default;
    Image(int width, int height, int channels, std::uint8_t fill = 0)
        : width_(width), height_(height), channels_(channels) {
        if (width <= 0 || height <= 0) throw Error("image has a zero dimension");
        if (channels != 1 && channels != 3) throw Error("image must have 1 or 3 channels");
        pixels_.assign(static_cast<std::size_t>(width) * height * channels, fill);
    }
    Image(int width, int height, int channels, std::vector<std::uint8_t> pixels)
        : Image(width, height, channels) {
        if (pixels.size() != pixels_.size()) throw Error("pixel buffer length does not match dimensions");
        pixels_ = std::move(pixels);
    }

    int width() const { return width_; }
    int height() const { return height_; }
    int channels() const { return channels_; }
    bool empty() const { return pixels_.empty(); }

    std::uint8_t at(int x, int y, int c = 0) const { return pixels_[index(x, y, c)]; }
    std::uint8_t& at(int x, int y, int c = 0) { return pixels_[index(x, y, c)]; }

    const std::vector<std::uint8_t>& pixels() const { return pixels_; }

    friend bool operator==(const Image&, const Image&) = default;

private:
    std::size_t index(int x, int y, int c) const {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int width_ = 0, height_ = 0, channels_ = 0;
    std::vector<std::uint8_t> pixels_;
};

/// Dense single-channel float plane, row-major.
struct Plane {
    int width = 0, height = 0;
    std::vector<double> data;

    Plane() = default;
    Plane(int w, int h, double fill = 0.0) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}
    double& operator()(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    double operator()(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

inline Plane channel_plane(const Image& img, int c) {
    Plane p(img.width(), img.height());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) p(x, y) = img.at(x, y, c);
    return p;
}

/// Luma with Rec.601 weights; single-channel images are returned as-is.
inline Plane gray_plane(const Image& img) {
    if (img.channels() == 1) return channel_plane(img, 0);
    Plane p(img.width(), img.height());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            p(x, y) = 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
    return p;
}

/// Bilinear sample at continuous position (pixel centers at integer + 0.5),
/// clamped to the border.
inline double sample_bilinear(const Plane& p, double x, double y) {
    double fx = x - 0.5, fy = y - 0.5;
    fx = std::clamp(fx, 0.0, static_cast<double>(p.width - 1));
    fy = std::clamp(fy, 0.0, static_cast<double>(p.height - 1));
    const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
    const int x1 = std::min(x0 + 1, p.width - 1), y1 = std::min(y0 + 1, p.height - 1);
    const double ax = fx - x0, ay = fy - y0;
    const double top = p(x0, y0) * (1 - ax) + p(x1, y0) * ax;
    const double bot = p(x0, y1) * (1 - ax) + p(x1, y1) * ax;
    return top * (1 - ay) + bot * ay;
}

/// Resamples the window region of a plane onto an out_w x out_h grid.
inline Plane resample(const Plane& p, const Box& window, int out_w, int out_h) {
    Plane out(out_w, out_h);
    const double sx = window.width() / out_w, sy = window.height() / out_h;
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x)
            out(x, y) = sample_bilinear(p, window.x_min + (x + 0.5) * sx, window.y_min + (y + 0.5) * sy);
    return out;
}

// ---------------------------------------------------------------------------
// Netpbm

namespace detail {

inline void skip_pnm_space(std::istream& is) {
    for (;;) {
        int c = is.peek();
        if (c == '#') {
            std::string comment;
            std::getline(is, comment);
        } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
            is.get();
        } else {
            return;
        }
    }
}

inline int read_pnm_int(std::istream& is) {
    skip_pnm_space(is);
    int v = 0;
    bool any = false;
    while (std::isdigit(is.peek())) {
        v = v * 10 + (is.get() - '0');
        any = true;
        if (v > 1 << 24) throw Error("netpbm header value too large");
    }
    if (!any) throw Error("malformed netpbm header");
    return v;
}

}  // namespace detail

inline Image read_pnm(std::istream& is) {
    char magic[2];
    if (!is.read(magic, 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
        throw Error("not a binary PGM/PPM stream");
    const int channels = magic[1] == '6' ? 3 : 1;
    const int w = detail::read_pnm_int(is);
    const int h = detail::read_pnm_int(is);
    const int maxval = detail::read_pnm_int(is);
    if (maxval != 255) throw Error("only 8-bit netpbm (maxval 255) is supported");
    // exactly one whitespace byte separates the header from the raster
    const int sep = is.get();
    if (sep != ' ' && sep != '\n' && sep != '\r' && sep != '\t') throw Error("malformed netpbm header");
    std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h * channels);
    if (!is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size())))
        throw Error("truncated netpbm raster");
    return Image(w, h, channels, std::move(px));
}

inline void write_pnm(std::ostream& os, const Image& img) {
    os << (img.channels() == 3 ? "P6" : "P5") << '\n' << img.width() << ' ' << img.height() << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels().data()), static_cast<std::streamsize>(img.pixels().size()));
}

inline Image load_pnm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open image " + path);
    try {
        return read_pnm(f);
    } catch (const Error& e) {
        throw Error(path + ": " + e.what());
    }
}

inline void save_pnm(const std::string& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write image " + path);
    write_pnm(f, img);
}

}  // namespace hkdet
