#pragma once

// Per-proposal feature channels: HOG templates, improved Fisher vectors over
// dense gradient patches, and ingested CNN vectors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hkdet/core.hpp"
#include "hkdet/image.hpp"
#include "hkdet/model_io.hpp"
#include "hkdet/rng.hpp"

namespace hkdet {

using Vector = std::vector<double>;
using VectorList = std::vector<Vector>;

inline double dot(const Vector& a, const Vector& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(const Vector& v) { return std::sqrt(dot(v, v)); }

// ===========================================================================
// HOG

inline constexpr int kHogCellPixels = 8;
inline constexpr int kHogOrientations = 9;
inline constexpr double kHogClamp = 0.2;

inline std::size_t hog_length(int cells_x, int cells_y) {
    return static_cast<std::size_t>(cells_x) * cells_y * 4 * kHogOrientations;
}

/// HOG over a window of a grayscale plane. The window is resampled to
/// (cells_x*8) x (cells_y*8); each cell's 9 unsigned-orientation bins are
/// normalized against each of the four 2x2 blocks that contain it, giving 36
/// values per cell. Block normalization is L2, clamp at 0.2, L2 again.
inline Vector hog(const Plane& gray, const Box& window, int cells_x, int cells_y) {
    if (cells_x < 1 || cells_y < 1) throw Error("hog needs at least one cell per axis");
    if (!(window.width() > 0 && window.height() > 0)) throw Error("hog window is degenerate");
    if (window.x_max <= 0 || window.y_max <= 0 || window.x_min >= gray.width || window.y_min >= gray.height)
        throw Error("hog window lies outside the image");

    const int W = cells_x * kHogCellPixels, H = cells_y * kHogCellPixels;
    const Plane patch = resample(gray, window, W, H);

    std::vector<double> cells(static_cast<std::size_t>(cells_x) * cells_y * kHogOrientations, 0.0);
    auto cell = [&](int cx, int cy) { return &cells[(static_cast<std::size_t>(cy) * cells_x + cx) * kHogOrientations]; };
    constexpr double kPi = 3.141592653589793;
    constexpr double kBinWidth = kPi / kHogOrientations;

    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double dx = patch(std::min(x + 1, W - 1), y) - patch(std::max(x - 1, 0), y);
            const double dy = patch(x, std::min(y + 1, H - 1)) - patch(x, std::max(y - 1, 0));
            const double mag = std::hypot(dx, dy);
            if (mag == 0) continue;
            double ang = std::atan2(dy, dx);
            if (ang < 0) ang += kPi;
            if (ang >= kPi) ang -= kPi;
            // bins are centered on multiples of pi/9
            const double fb = ang / kBinWidth;
            int b0 = static_cast<int>(std::floor(fb));
            const double ob = fb - b0;
            b0 %= kHogOrientations;
            const int b1 = (b0 + 1) % kHogOrientations;

            // spatial bilinear weights over cell centers
            const double fx = (x + 0.5) / kHogCellPixels - 0.5;
            const double fy = (y + 0.5) / kHogCellPixels - 0.5;
            const int cx0 = static_cast<int>(std::floor(fx)), cy0 = static_cast<int>(std::floor(fy));
            const double ax = fx - cx0, ay = fy - cy0;
            for (int j = 0; j < 2; ++j)
                for (int i = 0; i < 2; ++i) {
                    const int cx = cx0 + i, cy = cy0 + j;
                    if (cx < 0 || cy < 0 || cx >= cells_x || cy >= cells_y) continue;
                    const double ws = (i ? ax : 1 - ax) * (j ? ay : 1 - ay);
                    double* h = cell(cx, cy);
                    h[b0] += mag * ws * (1 - ob);
                    h[b1] += mag * ws * ob;
                }
        }

    constexpr double kEps = 1e-3;
    Vector out(hog_length(cells_x, cells_y), 0.0);
    std::vector<double> block(4 * kHogOrientations);
    for (int cy = 0; cy < cells_y; ++cy)
        for (int cx = 0; cx < cells_x; ++cx) {
            double* dst = &out[(static_cast<std::size_t>(cy) * cells_x + cx) * 4 * kHogOrientations];
            int slot = 0;
            for (int by = cy - 1; by <= cy; ++by)
                for (int bx = cx - 1; bx <= cx; ++bx, ++slot) {
                    // gather the 2x2 block whose top-left cell is (bx, by); outside cells are zero
                    int own = 0;
                    for (int j = 0; j < 2; ++j)
                        for (int i = 0; i < 2; ++i) {
                            const int qx = bx + i, qy = by + j;
                            double* b = &block[(j * 2 + i) * kHogOrientations];
                            if (qx == cx && qy == cy) own = j * 2 + i;
                            if (qx < 0 || qy < 0 || qx >= cells_x || qy >= cells_y) {
                                std::fill(b, b + kHogOrientations, 0.0);
                            } else {
                                const double* src = cell(qx, qy);
                                std::copy(src, src + kHogOrientations, b);
                            }
                        }
                    double n2 = 0;
                    for (double v : block) n2 += v * v;
                    double s = 1.0 / std::sqrt(n2 + kEps * kEps);
                    n2 = 0;
                    for (auto& v : block) {
                        v = std::min(v * s, kHogClamp);
                        n2 += v * v;
                    }
                    s = 1.0 / std::sqrt(n2 + kEps * kEps);
                    for (int o = 0; o < kHogOrientations; ++o)
                        dst[slot * kHogOrientations + o] = block[own * kHogOrientations + o] * s;
                }
        }
    return out;
}

inline Vector hog(const Image& img, const Box& window, int cells_x, int cells_y) {
    return hog(gray_plane(img), window, cells_x, cells_y);
}

// ===========================================================================
// Dense local descriptors

/// Per-pixel central-difference gradients of a grayscale plane.
struct GradientField {
    int width = 0, height = 0;
    std::vector<double> dx, dy;

    explicit GradientField(const Plane& g) : width(g.width), height(g.height), dx(g.data.size()), dy(g.data.size()) {
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * width + x;
                dx[i] = 0.5 * (g(std::min(x + 1, width - 1), y) - g(std::max(x - 1, 0), y));
                dy[i] = 0.5 * (g(x, std::min(y + 1, height - 1)) - g(x, std::max(y - 1, 0)));
            }
    }
};

/// Integer pixel span of a window after rounding and clipping to the image.
struct PixelSpan {
    int x0, y0, x1, y1;
    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
};

inline PixelSpan pixel_span(const Box& window, int width, int height) {
    PixelSpan s{static_cast<int>(std::lround(window.x_min)), static_cast<int>(std::lround(window.y_min)),
                static_cast<int>(std::lround(window.x_max)), static_cast<int>(std::lround(window.y_max))};
    s.x0 = std::clamp(s.x0, 0, width);
    s.x1 = std::clamp(s.x1, 0, width);
    s.y0 = std::clamp(s.y0, 0, height);
    s.y1 = std::clamp(s.y1, 0, height);
    return s;
}

inline int dense_grid_count(int extent, int patch, int stride) {
    if (extent < patch) return 0;
    return (extent - patch) / stride + 1;
}

/// Gradient-patch descriptors on a regular grid inside the window. Each is
/// the (dx, dy) pairs of a patch x patch block, scaled to unit L2 norm
/// (flat patches stay zero).
inline VectorList dense_descriptors(const GradientField& grad, const Box& window, int stride, int patch) {
    if (stride < 1 || patch < 1) throw Error("dense grid needs positive stride and patch");
    const PixelSpan s = pixel_span(window, grad.width, grad.height);
    const int nx = dense_grid_count(s.width(), patch, stride);
    const int ny = dense_grid_count(s.height(), patch, stride);
    VectorList out;
    out.reserve(static_cast<std::size_t>(nx) * ny);
    for (int gy = 0; gy < ny; ++gy)
        for (int gx = 0; gx < nx; ++gx) {
            const int ox = s.x0 + gx * stride, oy = s.y0 + gy * stride;
            Vector d(2 * static_cast<std::size_t>(patch) * patch);
            std::size_t k = 0;
            for (int y = oy; y < oy + patch; ++y)
                for (int x = ox; x < ox + patch; ++x) {
                    const std::size_t i = static_cast<std::size_t>(y) * grad.width + x;
                    d[k++] = grad.dx[i];
                    d[k++] = grad.dy[i];
                }
            const double n = l2_norm(d);
            if (n > 1e-9)
                for (auto& v : d) v /= n;
            else
                std::fill(d.begin(), d.end(), 0.0);
            out.push_back(std::move(d));
        }
    return out;
}

inline VectorList dense_descriptors(const Image& img, const Box& window, int stride, int patch) {
    return dense_descriptors(GradientField(gray_plane(img)), window, stride, patch);
}

// ===========================================================================
// PCA

struct PcaModel {
    std::size_t raw_dim = 0, dim = 0;
    Vector mean;
    std::vector<double> basis;  // raw_dim x dim, row-major, orthonormal columns
    Vector eigenvalues;         // descending, length dim

    double basis_at(std::size_t r, std::size_t c) const { return basis[r * dim + c]; }
};

/// Top-`dim` principal axes of the sample covariance (n-1 normalization).
/// When max_samples > 0 and there are more descriptors, a seeded subset is used.
inline PcaModel pca_fit(const VectorList& descriptors, std::size_t dim, std::uint64_t seed, std::size_t max_samples = 0) {
    if (descriptors.empty()) throw Error("pca_fit needs samples");
    if (dim == 0) throw Error("pca target dimension must be positive");
    const std::size_t raw = descriptors[0].size();
    if (dim > raw) throw Error("pca target dimension exceeds input dimension");

    std::vector<std::size_t> idx(descriptors.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (max_samples > 0 && idx.size() > max_samples) {
        Rng rng(seed);
        rng.shuffle(idx);
        idx.resize(max_samples);
        std::sort(idx.begin(), idx.end());
    }
    const std::size_t n = idx.size();

    Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(raw));
    for (std::size_t i : idx) {
        if (descriptors[i].size() != raw) throw Error("pca_fit: descriptors have mixed dimensions");
        mean += Eigen::Map<const Eigen::VectorXd>(descriptors[i].data(), static_cast<Eigen::Index>(raw));
    }
    mean /= static_cast<double>(n);
    Eigen::MatrixXd centered(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(raw));
    for (std::size_t r = 0; r < n; ++r)
        centered.row(static_cast<Eigen::Index>(r)) =
            Eigen::Map<const Eigen::VectorXd>(descriptors[idx[r]].data(), static_cast<Eigen::Index>(raw)) - mean;
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / std::max<double>(1.0, static_cast<double>(n) - 1.0);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw Error("pca eigendecomposition failed");
    const Eigen::VectorXd vals = eig.eigenvalues();  // ascending
    const Eigen::MatrixXd vecs = eig.eigenvectors();
    const double top = std::max(vals(vals.size() - 1), 0.0);
    std::size_t rank = 0;
    for (Eigen::Index i = 0; i < vals.size(); ++i)
        if (vals(i) > 1e-10 * top && vals(i) > 0) ++rank;
    if (rank < dim)
        throw Error("pca_fit: samples span rank " + std::to_string(rank) + ", fewer than the requested " +
                    std::to_string(dim) + " dimensions");

    PcaModel m;
    m.raw_dim = raw;
    m.dim = dim;
    m.mean.assign(mean.data(), mean.data() + raw);
    m.basis.assign(raw * dim, 0.0);
    m.eigenvalues.resize(dim);
    for (std::size_t c = 0; c < dim; ++c) {
        const Eigen::Index src = vals.size() - 1 - static_cast<Eigen::Index>(c);
        Eigen::VectorXd v = vecs.col(src);
        // sign convention: largest-magnitude entry positive
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        for (std::size_t r = 0; r < raw; ++r) m.basis[r * dim + c] = v(static_cast<Eigen::Index>(r));
        m.eigenvalues[c] = vals(src);
    }
    return m;
}

inline Vector pca_apply(const PcaModel& m, const Vector& x) {
    if (x.size() != m.raw_dim) throw Error("pca_apply: dimension mismatch");
    Vector out(m.dim, 0.0);
    for (std::size_t r = 0; r < m.raw_dim; ++r) {
        const double v = x[r] - m.mean[r];
        if (v == 0) continue;
        const double* row = &m.basis[r * m.dim];
        for (std::size_t c = 0; c < m.dim; ++c) out[c] += v * row[c];
    }
    return out;
}

inline ModelFile pca_to_file(const PcaModel& m) {
    ModelFile f("pca");
    f.set_int("raw_dim", static_cast<std::int64_t>(m.raw_dim));
    f.set_int("dim", static_cast<std::int64_t>(m.dim));
    f.set_matrix("mean", 1, m.raw_dim, m.mean);
    f.set_matrix("basis", m.raw_dim, m.dim, m.basis);
    f.set_matrix("eigenvalues", 1, m.dim, m.eigenvalues);
    return f;
}

inline PcaModel pca_from_file(const ModelFile& f) {
    f.expect_kind("pca");
    PcaModel m;
    m.raw_dim = static_cast<std::size_t>(f.get_int("raw_dim"));
    m.dim = static_cast<std::size_t>(f.get_int("dim"));
    m.mean = f.get_matrix("mean").data;
    m.basis = f.get_matrix("basis").data;
    m.eigenvalues = f.get_matrix("eigenvalues").data;
    if (m.mean.size() != m.raw_dim || m.basis.size() != m.raw_dim * m.dim || m.eigenvalues.size() != m.dim)
        throw Error("pca model dimensions are inconsistent");
    return m;
}

// ===========================================================================
// Diagonal-covariance GMM

inline constexpr double kDefaultVarianceFloor = 1e-4;

struct GmmModel {
    std::size_t K = 0, D = 0;
    Vector weights;    // K
    Vector means;      // K x D
    Vector variances;  // K x D

    const double* mean(std::size_t k) const { return &means[k * D]; }
    const double* variance(std::size_t k) const { return &variances[k * D]; }
};

struct GmmFitOptions {
    std::size_t K = 16;
    int max_iters = 100;
    double tol = 1e-6;
    std::uint64_t seed = 0;
    double variance_floor = kDefaultVarianceFloor;
};

struct GmmFitResult {
    GmmModel model;
    std::vector<double> log_likelihoods;  // mean per-sample, one per E-step
};

namespace detail {

/// Per-component log joint densities log(w_k N(x | k)); returns the log-sum.
inline double gmm_log_joint(const GmmModel& g, const std::vector<double>& log_norm, const double* x, double* out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < g.K; ++k) {
        const double* mu = g.mean(k);
        const double* var = g.variance(k);
        double q = 0;
        for (std::size_t d = 0; d < g.D; ++d) {
            const double diff = x[d] - mu[d];
            q += diff * diff / var[d];
        }
        out[k] = log_norm[k] - 0.5 * q;
        mx = std::max(mx, out[k]);
    }
    double s = 0;
    for (std::size_t k = 0; k < g.K; ++k) s += std::exp(out[k] - mx);
    return mx + std::log(s);
}

inline std::vector<double> gmm_log_norms(const GmmModel& g) {
    constexpr double kLog2Pi = 1.8378770664093453;
    std::vector<double> ln(g.K);
    for (std::size_t k = 0; k < g.K; ++k) {
        double s = std::log(g.weights[k]);
        for (std::size_t d = 0; d < g.D; ++d) s -= 0.5 * (kLog2Pi + std::log(g.variance(k)[d]));
        ln[k] = s;
    }
    return ln;
}

}  // namespace detail

/// Posterior component probabilities for one descriptor (sums to 1).
inline Vector gmm_posteriors(const GmmModel& g, const Vector& x) {
    if (x.size() != g.D) throw Error("gmm_posteriors: dimension mismatch");
    const auto ln = detail::gmm_log_norms(g);
    Vector p(g.K);
    const double lse = detail::gmm_log_joint(g, ln, x.data(), p.data());
    for (auto& v : p) v = std::exp(v - lse);
    return p;
}

/// Mean per-sample log-likelihood.
inline double gmm_log_likelihood(const GmmModel& g, const VectorList& data) {
    const auto ln = detail::gmm_log_norms(g);
    std::vector<double> tmp(g.K);
    double s = 0;
    for (const auto& x : data) s += detail::gmm_log_joint(g, ln, x.data(), tmp.data());
    return s / static_cast<double>(data.size());
}

/// EM for a diagonal GMM, initialized from k-means++ seeds. Stops after
/// max_iters M-steps or when the mean log-likelihood gains less than tol.
inline GmmFitResult gmm_fit_report(const VectorList& data, const GmmFitOptions& opt) {
    const std::size_t N = data.size(), K = opt.K;
    if (K == 0) throw Error("gmm_fit: K must be positive");
    if (N < K) throw Error("gmm_fit: " + std::to_string(N) + " samples is fewer than K=" + std::to_string(K));
    const std::size_t D = data[0].size();
    if (D == 0) throw Error("gmm_fit: zero-dimensional data");
    for (const auto& x : data)
        if (x.size() != D) throw Error("gmm_fit: samples have mixed dimensions");

    auto sqdist = [&](const double* a, const double* b) {
        double s = 0;
        for (std::size_t d = 0; d < D; ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
        return s;
    };

    // k-means++ seeding
    Rng rng(opt.seed);
    std::vector<std::size_t> centers{static_cast<std::size_t>(rng.index(N))};
    std::vector<double> d2(N);
    for (std::size_t i = 0; i < N; ++i) d2[i] = sqdist(data[i].data(), data[centers[0]].data());
    while (centers.size() < K) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        std::size_t pick = 0;
        if (total > 0) {
            double r = rng.uniform() * total;
            pick = N - 1;
            for (std::size_t i = 0; i < N; ++i) {
                r -= d2[i];
                if (r < 0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<std::size_t>(rng.index(N));
        }
        centers.push_back(pick);
        for (std::size_t i = 0; i < N; ++i) d2[i] = std::min(d2[i], sqdist(data[i].data(), data[pick].data()));
    }

    GmmModel g;
    g.K = K;
    g.D = D;
    g.weights.assign(K, 0.0);
    g.means.assign(K * D, 0.0);
    g.variances.assign(K * D, 0.0);
    for (std::size_t k = 0; k < K; ++k) std::copy(data[centers[k]].begin(), data[centers[k]].end(), g.means.begin() + k * D);

    // hard assignment to the seeds gives initial weights and variances
    {
        Vector global_mean(D, 0.0), global_var(D, 0.0);
        for (const auto& x : data)
            for (std::size_t d = 0; d < D; ++d) global_mean[d] += x[d];
        for (auto& v : global_mean) v /= static_cast<double>(N);
        for (const auto& x : data)
            for (std::size_t d = 0; d < D; ++d) global_var[d] += (x[d] - global_mean[d]) * (x[d] - global_mean[d]);
        for (auto& v : global_var) v = std::max(v / static_cast<double>(N), opt.variance_floor);

        std::vector<std::size_t> count(K, 0);
        Vector acc(K * D, 0.0);
        for (const auto& x : data) {
            std::size_t best = 0;
            double bd = sqdist(x.data(), g.mean(0));
            for (std::size_t k = 1; k < K; ++k) {
                const double dd = sqdist(x.data(), g.mean(k));
                if (dd < bd) {
                    bd = dd;
                    best = k;
                }
            }
            ++count[best];
            for (std::size_t d = 0; d < D; ++d) acc[best * D + d] += (x[d] - g.mean(best)[d]) * (x[d] - g.mean(best)[d]);
        }
        for (std::size_t k = 0; k < K; ++k) {
            g.weights[k] = std::max<double>(count[k], 1.0);
            for (std::size_t d = 0; d < D; ++d)
                g.variances[k * D + d] =
                    count[k] >= 2 ? std::max(acc[k * D + d] / count[k], opt.variance_floor) : global_var[d];
        }
        const double ws = std::accumulate(g.weights.begin(), g.weights.end(), 0.0);
        for (auto& w : g.weights) w /= ws;
    }

    GmmFitResult res;
    std::vector<double> resp(N * K);
    auto e_step = [&]() {
        const auto ln = detail::gmm_log_norms(g);
        double ll = 0;
        for (std::size_t i = 0; i < N; ++i) {
            double* r = &resp[i * K];
            const double lse = detail::gmm_log_joint(g, ln, data[i].data(), r);
            for (std::size_t k = 0; k < K; ++k) r[k] = std::exp(r[k] - lse);
            ll += lse;
        }
        return ll / static_cast<double>(N);
    };

    double ll_prev = e_step();
    res.log_likelihoods.push_back(ll_prev);
    for (int it = 0; it < opt.max_iters; ++it) {
        Vector nk(K, 0.0), sx(K * D, 0.0);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t k = 0; k < K; ++k) {
                const double r = resp[i * K + k];
                nk[k] += r;
                for (std::size_t d = 0; d < D; ++d) sx[k * D + d] += r * data[i][d];
            }
        for (std::size_t k = 0; k < K; ++k) {
            const double n = std::max(nk[k], std::numeric_limits<double>::min());
            for (std::size_t d = 0; d < D; ++d) g.means[k * D + d] = sx[k * D + d] / n;
        }
        Vector sv(K * D, 0.0);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t k = 0; k < K; ++k) {
                const double r = resp[i * K + k];
                if (r == 0) continue;
                for (std::size_t d = 0; d < D; ++d) {
                    const double diff = data[i][d] - g.means[k * D + d];
                    sv[k * D + d] += r * diff * diff;
                }
            }
        for (std::size_t k = 0; k < K; ++k) {
            const double n = std::max(nk[k], std::numeric_limits<double>::min());
            for (std::size_t d = 0; d < D; ++d) g.variances[k * D + d] = std::max(sv[k * D + d] / n, opt.variance_floor);
            g.weights[k] = std::max(nk[k] / static_cast<double>(N), std::numeric_limits<double>::min());
        }

        const double ll = e_step();
        res.log_likelihoods.push_back(ll);
        if (ll - ll_prev < opt.tol) break;
        ll_prev = ll;
    }
    res.model = std::move(g);
    return res;
}

inline GmmModel gmm_fit(const VectorList& data, std::size_t K, int max_iters, double tol, std::uint64_t seed) {
    GmmFitOptions opt;
    opt.K = K;
    opt.max_iters = max_iters;
    opt.tol = tol;
    opt.seed = seed;
    return gmm_fit_report(data, opt).model;
}

inline ModelFile gmm_to_file(const GmmModel& g) {
    ModelFile f("gmm");
    f.set_int("K", static_cast<std::int64_t>(g.K));
    f.set_int("D", static_cast<std::int64_t>(g.D));
    f.set_matrix("weights", 1, g.K, g.weights);
    f.set_matrix("means", g.K, g.D, g.means);
    f.set_matrix("variances", g.K, g.D, g.variances);
    return f;
}

inline GmmModel gmm_from_file(const ModelFile& f) {
    f.expect_kind("gmm");
    GmmModel g;
    g.K = static_cast<std::size_t>(f.get_int("K"));
    g.D = static_cast<std::size_t>(f.get_int("D"));
    g.weights = f.get_matrix("weights").data;
    g.means = f.get_matrix("means").data;
    g.variances = f.get_matrix("variances").data;
    if (g.weights.size() != g.K || g.means.size() != g.K * g.D || g.variances.size() != g.K * g.D)
        throw Error("gmm model dimensions are inconsistent");
    return g;
}

// ===========================================================================
// Improved Fisher vector

inline std::size_t fisher_length(std::size_t D, std::size_t K) { return (2 * D + 1) * K; }

/// Normalized GMM log-likelihood gradients before power/L2 normalization.
/// Layout: K weight terms, then K*D mean terms, then K*D variance terms.
inline Vector fisher_gradient(const VectorList& descriptors, const GmmModel& g) {
    if (descriptors.empty()) throw Error("fisher_encode: no descriptors");
    const std::size_t K = g.K, D = g.D;
    Vector fv(fisher_length(D, K), 0.0);
    double* gw = fv.data();
    double* gm = fv.data() + K;
    double* gv = fv.data() + K + K * D;

    const auto ln = detail::gmm_log_norms(g);
    std::vector<double> post(K);
    std::vector<double> inv_sigma(K * D);
    for (std::size_t i = 0; i < K * D; ++i) inv_sigma[i] = 1.0 / std::sqrt(g.variances[i]);

    for (const auto& x : descriptors) {
        if (x.size() != D) throw Error("fisher_encode: descriptor dimension mismatch");
        const double lse = detail::gmm_log_joint(g, ln, x.data(), post.data());
        for (std::size_t k = 0; k < K; ++k) {
            const double p = std::exp(post[k] - lse);
            gw[k] += p - g.weights[k];
            if (p < 1e-12) continue;
            const double* mu = g.mean(k);
            for (std::size_t d = 0; d < D; ++d) {
                const double z = (x[d] - mu[d]) * inv_sigma[k * D + d];
                gm[k * D + d] += p * z;
                gv[k * D + d] += p * (z * z - 1.0);
            }
        }
    }
    const double n = static_cast<double>(descriptors.size());
    for (std::size_t k = 0; k < K; ++k) {
        const double sw = std::sqrt(g.weights[k]);
        gw[k] /= n * sw;
        for (std::size_t d = 0; d < D; ++d) {
            gm[k * D + d] /= n * sw;
            gv[k * D + d] /= n * sw * std::sqrt(2.0);
        }
    }
    return fv;
}

/// Signed square root followed by L2 normalization.
inline Vector fisher_finalize(Vector fv) {
    for (auto& v : fv) v = v < 0 ? -std::sqrt(-v) : std::sqrt(v);
    const double n = l2_norm(fv);
    if (!(n > 0) || !std::isfinite(n)) throw Error("fisher_encode: raw Fisher vector is all zero");
    for (auto& v : fv) v /= n;
    return fv;
}

inline Vector fisher_encode(const VectorList& descriptors, const GmmModel& g) {
    return fisher_finalize(fisher_gradient(descriptors, g));
}

// ===========================================================================
// Downsampled pixel embedding (stand-in for an ingested CNN vector)

/// Window resampled to side x side per channel, scaled to [0,1], mean
/// removed, then L2-normalized (flat windows give zeros).
inline Vector pixel_embedding(const std::vector<Plane>& channels, const Box& window, int side) {
    Vector v;
    v.reserve(channels.size() * side * side);
    for (const auto& p : channels) {
        const Plane r = resample(p, window, side, side);
        for (double x : r.data) v.push_back(x / 255.0);
    }
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    for (auto& x : v) x -= m;
    const double n = l2_norm(v);
    if (n > 1e-12)
        for (auto& x : v) x /= n;
    else
        std::fill(v.begin(), v.end(), 0.0);
    return v;
}

// ===========================================================================
// CNN feature ingestion: `image_id proposal_index v1 ... vM` per line.

class CnnFeatureTable {
public:
    using Key = std::pair<std::string, int>;

    std::size_t size() const { return rows_.size(); }
    std::size_t dim() const { return dim_; }
    bool empty() const { return rows_.empty(); }

    void insert(const std::string& image_id, int proposal_index, Vector v) {
        if (rows_.empty()) {
            dim_ = v.size();
        } else if (v.size() != dim_) {
            throw Error("cnn feature length " + std::to_string(v.size()) + " differs from table length " +
                        std::to_string(dim_));
        }
        if (!rows_.emplace(Key{image_id, proposal_index}, std::move(v)).second)
            throw Error("duplicate cnn feature key (" + image_id + ", " + std::to_string(proposal_index) + ")");
    }

    const Vector& at(const std::string& image_id, int proposal_index) const {
        auto it = rows_.find(Key{image_id, proposal_index});
        if (it == rows_.end())
            throw Error("no cnn feature for (" + image_id + ", " + std::to_string(proposal_index) + ")");
        return it->second;
    }

    bool contains(const std::string& image_id, int proposal_index) const {
        return rows_.count(Key{image_id, proposal_index}) != 0;
    }

    const std::map<Key, Vector>& rows() const { return rows_; }

private:
    std::size_t dim_ = 0;
    std::map<Key, Vector> rows_;
};

inline CnnFeatureTable read_cnn_features(std::istream& is) {
    CnnFeatureTable table;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto fail = [&](const std::string& msg) {
            return Error("cnn features line " + std::to_string(line_no) + ": " + msg);
        };
        std::istringstream ls(line);
        std::string image_id, tok;
        long long index = -1;
        if (!(ls >> image_id >> index) || index < 0) throw fail("expected `image_id proposal_index values...`");
        Vector v;
        while (ls >> tok) {
            try {
                v.push_back(parse_real(tok));
            } catch (const Error& e) {
                throw fail(e.what());
            }
        }
        if (v.empty()) throw fail("row has no feature values");
        try {
            table.insert(image_id, static_cast<int>(index), std::move(v));
        } catch (const Error& e) {
            throw fail(e.what());
        }
    }
    return table;
}

inline CnnFeatureTable load_cnn_features(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open cnn feature file " + path);
    try {
        return read_cnn_features(is);
    } catch (const Error& e) {
        throw Error(path + ": " + e.what());
    }
}

inline void write_cnn_row(std::ostream& os, const std::string& image_id, int proposal_index, const Vector& v) {
    os << image_id << ' ' << proposal_index;
    for (double x : v) os << ' ' << format_real(x);
    os << '\n';
}

}  // namespace hkdet
