#pragma once

// Per-category bounding-box refinement: center-offset / log-size targets and
// closed-form ridge regressors predicting them from a proposal feature.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hkdet/core.hpp"
#include "hkdet/features.hpp"
#include "hkdet/model_io.hpp"

namespace hkdet {

struct BoxTargets {
    double tx = 0, ty = 0, tw = 0, th = 0;
};

inline BoxTargets bbox_targets(const Box& p, const Box& g) {
    return BoxTargets{(g.center_x() - p.center_x()) / p.width(), (g.center_y() - p.center_y()) / p.height(),
                      std::log(g.width() / p.width()), std::log(g.height() / p.height())};
}

inline Box apply_targets(const Box& p, const BoxTargets& t) {
    const double cx = p.width() * t.tx + p.center_x();
    const double cy = p.height() * t.ty + p.center_y();
    const double w = p.width() * std::exp(t.tw);
    const double h = p.height() * std::exp(t.th);
    return Box::make(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
}

/// Ridge weights for one target coordinate; the last entry is the bias.
struct RidgeSolution {
    Vector coef;  // dim + 1

    double predict(const Vector& x) const {
        double s = coef.back();
        for (std::size_t i = 0; i < x.size(); ++i) s += coef[i] * x[i];
        return s;
    }
};

/// Solves (A^T A + lambda R) w = A^T t where A is x with a constant 1 column
/// appended and R is the identity with a zero at the bias position.
inline RidgeSolution ridge_fit(const VectorList& x, const std::vector<double>& t, double lambda) {
    if (x.empty() || x.size() != t.size()) throw Error("ridge_fit: feature and target counts differ");
    if (!(lambda >= 0)) throw Error("ridge_fit: lambda must be non-negative");
    const auto dim = static_cast<Eigen::Index>(x[0].size());
    Eigen::MatrixXd ata = Eigen::MatrixXd::Zero(dim + 1, dim + 1);
    Eigen::VectorXd atb = Eigen::VectorXd::Zero(dim + 1);
    Eigen::VectorXd row(dim + 1);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (static_cast<Eigen::Index>(x[i].size()) != dim) throw Error("ridge_fit: features have mixed dimensions");
        for (Eigen::Index d = 0; d < dim; ++d) row(d) = x[i][static_cast<std::size_t>(d)];
        row(dim) = 1.0;
        ata.selfadjointView<Eigen::Lower>().rankUpdate(row);
        atb += t[i] * row;
    }
    ata = ata.selfadjointView<Eigen::Lower>();
    for (Eigen::Index d = 0; d < dim; ++d) ata(d, d) += lambda;

    Eigen::VectorXd w;
    Eigen::LLT<Eigen::MatrixXd> llt(ata);
    if (llt.info() == Eigen::Success) {
        w = llt.solve(atb);
    } else {
        // singular system (e.g. lambda = 0 with collinear features)
        w = ata.ldlt().solve(atb);
    }
    return RidgeSolution{Vector(w.data(), w.data() + w.size())};
}

struct CategoryRegressor {
    bool trained = false;
    RidgeSolution tx, ty, tw, th;

    BoxTargets predict(const Vector& f) const { return {tx.predict(f), ty.predict(f), tw.predict(f), th.predict(f)}; }
};

struct BoxRegressor {
    std::size_t dim = 0;
    std::vector<CategoryRegressor> categories;
};

/// One training pair for the regressor.
struct RegressionSample {
    Vector feature;
    Box proposal;
    Box ground_truth;
    int category_id = 0;
};

/// Pairs whose IoU falls below min_iou are skipped; categories without pairs
/// stay untrained.
inline BoxRegressor train_bbox_regressor(const std::vector<RegressionSample>& samples, std::size_t num_categories,
                                         double ridge_lambda, double min_iou = 0.6) {
    BoxRegressor r;
    r.categories.resize(num_categories);
    for (const auto& s : samples) {
        if (r.dim == 0) r.dim = s.feature.size();
        if (s.feature.size() != r.dim) throw Error("train_bbox_regressor: features have mixed dimensions");
        if (s.category_id < 0 || static_cast<std::size_t>(s.category_id) >= num_categories)
            throw Error("train_bbox_regressor: category id out of range");
    }
    for (std::size_t c = 0; c < num_categories; ++c) {
        VectorList x;
        std::vector<double> tx, ty, tw, th;
        for (const auto& s : samples) {
            if (static_cast<std::size_t>(s.category_id) != c || iou(s.proposal, s.ground_truth) < min_iou) continue;
            const auto t = bbox_targets(s.proposal, s.ground_truth);
            x.push_back(s.feature);
            tx.push_back(t.tx);
            ty.push_back(t.ty);
            tw.push_back(t.tw);
            th.push_back(t.th);
        }
        if (x.empty()) continue;
        auto& cr = r.categories[c];
        cr.trained = true;
        cr.tx = ridge_fit(x, tx, ridge_lambda);
        cr.ty = ridge_fit(x, ty, ridge_lambda);
        cr.tw = ridge_fit(x, tw, ridge_lambda);
        cr.th = ridge_fit(x, th, ridge_lambda);
    }
    return r;
}

/// Replaces each detection's box by its category's prediction, clipped to
/// the image. Untrained categories pass through unchanged, as do boxes
/// whose prediction is degenerate or falls outside the image.
inline std::vector<Detection> refine(const std::vector<Detection>& detections, const VectorList& features,
                                     const BoxRegressor& reg, double image_width, double image_height) {
    if (features.size() != detections.size()) throw Error("refine: one feature per detection is required");
    std::vector<Detection> out = detections;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const int c = out[i].category_id;
        if (c < 0 || static_cast<std::size_t>(c) >= reg.categories.size())
            throw Error("refine: category " + std::to_string(c) + " out of range");
        const auto& cr = reg.categories[static_cast<std::size_t>(c)];
        if (!cr.trained) continue;
        if (features[i].size() != reg.dim) throw Error("refine: feature dimension mismatch");
        // a degenerate prediction or one entirely off-image keeps the proposal
        try {
            out[i].box = clip_box(apply_targets(out[i].box, cr.predict(features[i])), image_width, image_height);
        } catch (const Error&) {
        }
    }
    return out;
}

inline ModelFile regressor_to_file(const BoxRegressor& r) {
    ModelFile f("box_regressor");
    f.set_int("N", static_cast<std::int64_t>(r.categories.size()));
    f.set_int("dim", static_cast<std::int64_t>(r.dim));
    std::vector<double> trained;
    std::vector<double> coef;
    for (const auto& c : r.categories) {
        trained.push_back(c.trained ? 1.0 : 0.0);
        for (const auto* s : {&c.tx, &c.ty, &c.tw, &c.th}) {
            if (c.trained)
                coef.insert(coef.end(), s->coef.begin(), s->coef.end());
            else
                coef.insert(coef.end(), r.dim + 1, 0.0);
        }
    }
    f.set_matrix("trained", 1, r.categories.size(), std::move(trained));
    f.set_matrix("coefficients", 4 * r.categories.size(), r.dim + 1, std::move(coef));
    return f;
}

inline BoxRegressor regressor_from_file(const ModelFile& f) {
    f.expect_kind("box_regressor");
    BoxRegressor r;
    const auto n = static_cast<std::size_t>(f.get_int("N"));
    r.dim = static_cast<std::size_t>(f.get_int("dim"));
    const auto& trained = f.get_matrix("trained");
    const auto& coef = f.get_matrix("coefficients");
    if (trained.data.size() != n || coef.rows != 4 * n || coef.cols != r.dim + 1)
        throw Error("box regressor dimensions are inconsistent");
    r.categories.resize(n);
    for (std::size_t c = 0; c < n; ++c) {
        auto& cr = r.categories[c];
        cr.trained = trained.data[c] != 0.0;
        RidgeSolution* slots[] = {&cr.tx, &cr.ty, &cr.tw, &cr.th};
        for (std::size_t k = 0; k < 4; ++k) {
            const auto begin = coef.data.begin() + static_cast<std::ptrdiff_t>((4 * c + k) * coef.cols);
            slots[k]->coef.assign(begin, begin + static_cast<std::ptrdiff_t>(coef.cols));
        }
    }
    return r;
}

}  // namespace hkdet
