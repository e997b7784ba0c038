#pragma once

// Linear SVMs: per-category banks over one feature channel, concatenation of
// the three channel score vectors, and the stacked one-vs-rest fusion model.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "hkdet/core.hpp"
#include "hkdet/features.hpp"
#include "hkdet/model_io.hpp"
#include "hkdet/rng.hpp"

namespace hkdet {

struct LinearModel {
    Vector weights;
    double bias = 0;

    double decision(const Vector& x) const {
        if (x.size() != weights.size())
            throw Error("linear model expects dimension " + std::to_string(weights.size()) + ", got " +
                        std::to_string(x.size()));
        return dot(weights, x) + bias;
    }

    friend bool operator==(const LinearModel&, const LinearModel&) = default;
};

struct SvmParams {
    double lambda = 1e-4;
    int epochs = 10;
    std::uint64_t seed = 0;
};

struct SvmTrainResult {
    LinearModel model;
    std::vector<double> epoch_objectives;  // objective after each epoch
};

/// lambda/2 |w|^2 + mean hinge loss. The bias is not regularized.
inline double svm_objective(const LinearModel& m, const VectorList& x, const std::vector<int>& y, double lambda) {
    double loss = 0;
    for (std::size_t i = 0; i < x.size(); ++i) loss += std::max(0.0, 1.0 - y[i] * m.decision(x[i]));
    return 0.5 * lambda * dot(m.weights, m.weights) + loss / static_cast<double>(x.size());
}

/// Primal subgradient descent on the hinge objective. Each epoch visits the
/// samples in a seeded permutation; the step at update t is 1/(lambda*(t+t0))
/// with t0 = 1/lambda so the first steps have unit size. At the end of every
/// epoch the epoch-averaged iterate and the last iterate are scored, and the
/// best model seen so far (starting from the all-zero model, objective 1) is
/// kept, so the recorded objectives never increase.
inline SvmTrainResult train_svm_report(const VectorList& x, const std::vector<int>& y, const SvmParams& p) {
    if (x.empty() || x.size() != y.size()) throw Error("train_svm: features and labels differ in length");
    if (!(p.lambda > 0)) throw Error("train_svm: lambda must be positive");
    if (p.epochs < 1) throw Error("train_svm: epochs must be >= 1");
    const std::size_t dim = x[0].size();
    std::size_t pos = 0, neg = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i].size() != dim) throw Error("train_svm: features have mixed dimensions");
        if (y[i] == 1)
            ++pos;
        else if (y[i] == -1)
            ++neg;
        else
            throw Error("train_svm: labels must be +1 or -1");
    }
    if (pos == 0 || neg == 0) throw Error("train_svm: training data contains a single class");

    // w = scale * v keeps the shrink step O(1)
    Vector v(dim, 0.0);
    double scale = 1.0, bias = 0.0;
    const double t0 = 1.0 / p.lambda;
    double t = 0;

    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(p.seed);

    SvmTrainResult res;
    res.model = LinearModel{Vector(dim, 0.0), 0.0};
    double best = 1.0;  // objective of the zero model
    Vector avg_w(dim);
    for (int epoch = 0; epoch < p.epochs; ++epoch) {
        rng.shuffle(order);
        std::fill(avg_w.begin(), avg_w.end(), 0.0);
        double avg_b = 0;
        for (std::size_t i : order) {
            const double eta = 1.0 / (p.lambda * (t + t0));
            t += 1;
            const double margin = y[i] * (scale * dot(v, x[i]) + bias);
            scale *= 1.0 - eta * p.lambda;
            if (margin < 1.0) {
                const double step = eta * y[i] / scale;
                const Vector& xi = x[i];
                for (std::size_t d = 0; d < dim; ++d) v[d] += step * xi[d];
                bias += eta * y[i];
            }
            if (scale < 1e-9) {
                for (auto& e : v) e *= scale;
                scale = 1.0;
            }
            for (std::size_t d = 0; d < dim; ++d) avg_w[d] += scale * v[d];
            avg_b += bias;
        }
        const double n = static_cast<double>(order.size());
        LinearModel averaged{avg_w, avg_b / n};
        for (auto& e : averaged.weights) e /= n;
        LinearModel last{v, bias};
        for (auto& e : last.weights) e *= scale;
        for (LinearModel* cand : {&averaged, &last}) {
            const double obj = svm_objective(*cand, x, y, p.lambda);
            if (obj < best) {
                best = obj;
                res.model = *cand;
            }
        }
        res.epoch_objectives.push_back(best);
    }
    return res;
}

inline LinearModel train_svm(const VectorList& x, const std::vector<int>& y, double lambda, int epochs,
                             std::uint64_t seed) {
    return train_svm_report(x, y, SvmParams{lambda, epochs, seed}).model;
}

// ---------------------------------------------------------------------------
// Banks

struct SvmBank {
    std::string channel;  // cnn | hog | ifv
    std::size_t dim = 0;
    std::vector<LinearModel> models;

    std::size_t size() const { return models.size(); }
};

inline Vector score_bank(const Vector& feature, const SvmBank& bank) {
    if (feature.size() != bank.dim)
        throw Error("score_bank: " + bank.channel + " bank expects dimension " + std::to_string(bank.dim) + ", got " +
                    std::to_string(feature.size()));
    Vector s(bank.models.size());
    for (std::size_t i = 0; i < bank.models.size(); ++i) s[i] = dot(bank.models[i].weights, feature) + bank.models[i].bias;
    return s;
}

/// One-vs-rest labels: +1 where label == category, -1 elsewhere.
inline std::vector<int> one_vs_rest(const std::vector<int>& labels, int category) {
    std::vector<int> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] == category ? 1 : -1;
    return y;
}

/// Trains one model per category on a channel. labels are category ids in
/// [0,N) or -1 for background. Every category uses the same seed, so a
/// category's model depends only on its own label vector.
inline SvmBank train_bank(const std::string& channel, const VectorList& x, const std::vector<int>& labels,
                          std::size_t num_categories, const SvmParams& p) {
    if (x.empty()) throw Error("train_bank: no samples for channel " + channel);
    SvmBank bank;
    bank.channel = channel;
    bank.dim = x[0].size();
    for (std::size_t c = 0; c < num_categories; ++c) {
        try {
            bank.models.push_back(train_svm_report(x, one_vs_rest(labels, static_cast<int>(c)), p).model);
        } catch (const Error& e) {
            throw Error(channel + " category " + std::to_string(c) + ": " + e.what());
        }
    }
    return bank;
}

// ---------------------------------------------------------------------------
// Fusion

inline Vector fuse_scores(const Vector& cnn, const Vector& hog_scores, const Vector& ifv) {
    if (cnn.size() != hog_scores.size() || cnn.size() != ifv.size())
        throw Error("fuse_scores: channel score vectors differ in length");
    Vector out;
    out.reserve(3 * cnn.size());
    out.insert(out.end(), cnn.begin(), cnn.end());
    out.insert(out.end(), hog_scores.begin(), hog_scores.end());
    out.insert(out.end(), ifv.begin(), ifv.end());
    return out;
}

/// Per-coordinate affine standardization (x - mean) / scale.
struct Standardizer {
    Vector mean, scale;

    static Standardizer identity(std::size_t dim) { return Standardizer{Vector(dim, 0.0), Vector(dim, 1.0)}; }

    static Standardizer fit(const VectorList& x) {
        if (x.empty()) throw Error("standardizer needs samples");
        const std::size_t dim = x[0].size();
        Standardizer s{Vector(dim, 0.0), Vector(dim, 0.0)};
        for (const auto& v : x)
            for (std::size_t d = 0; d < dim; ++d) s.mean[d] += v[d];
        for (auto& m : s.mean) m /= static_cast<double>(x.size());
        for (const auto& v : x)
            for (std::size_t d = 0; d < dim; ++d) s.scale[d] += (v[d] - s.mean[d]) * (v[d] - s.mean[d]);
        for (auto& sc : s.scale) {
            sc = std::sqrt(sc / static_cast<double>(x.size()));
            if (!(sc > 1e-12)) sc = 1.0;
        }
        return s;
    }

    Vector apply(const Vector& x) const {
        if (x.size() != mean.size()) throw Error("standardizer dimension mismatch");
        Vector out(x.size());
        for (std::size_t d = 0; d < x.size(); ++d) out[d] = (x[d] - mean[d]) / scale[d];
        return out;
    }
};

struct FusionModel {
    Standardizer standardizer;  // over the 3N fused vector
    std::vector<LinearModel> models;

    std::size_t num_categories() const { return models.size(); }
};

/// labels: category id in [0,N) or -1 for background.
inline FusionModel train_fusion(const VectorList& fused, const std::vector<int>& labels, std::size_t num_categories,
                                const SvmParams& p, bool standardize = true) {
    if (fused.empty()) throw Error("train_fusion: no samples");
    for (const auto& v : fused)
        if (v.size() != 3 * num_categories) throw Error("train_fusion: fused vectors must have length 3N");
    FusionModel fm;
    fm.standardizer = standardize ? Standardizer::fit(fused) : Standardizer::identity(3 * num_categories);
    VectorList z;
    z.reserve(fused.size());
    for (const auto& v : fused) z.push_back(fm.standardizer.apply(v));
    for (std::size_t c = 0; c < num_categories; ++c) {
        try {
            fm.models.push_back(train_svm_report(z, one_vs_rest(labels, static_cast<int>(c)), p).model);
        } catch (const Error& e) {
            throw Error("fusion category " + std::to_string(c) + ": " + e.what());
        }
    }
    return fm;
}

inline double final_score(const Vector& fused, const FusionModel& fm, int category) {
    if (category < 0 || static_cast<std::size_t>(category) >= fm.models.size())
        throw Error("final_score: category " + std::to_string(category) + " out of range");
    return fm.models[static_cast<std::size_t>(category)].decision(fm.standardizer.apply(fused));
}

inline Vector final_scores(const Vector& fused, const FusionModel& fm) {
    const Vector z = fm.standardizer.apply(fused);
    Vector s(fm.models.size());
    for (std::size_t c = 0; c < s.size(); ++c) s[c] = fm.models[c].decision(z);
    return s;
}

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

inline void put_models(ModelFile& f, const std::vector<LinearModel>& models, std::size_t dim) {
    std::vector<double> w, b;
    w.reserve(models.size() * dim);
    for (const auto& m : models) {
        w.insert(w.end(), m.weights.begin(), m.weights.end());
        b.push_back(m.bias);
    }
    f.set_int("N", static_cast<std::int64_t>(models.size()));
    f.set_int("dim", static_cast<std::int64_t>(dim));
    f.set_matrix("weights", models.size(), dim, std::move(w));
    f.set_matrix("biases", 1, models.size(), std::move(b));
}

inline std::vector<LinearModel> get_models(const ModelFile& f, std::size_t& dim) {
    const auto n = static_cast<std::size_t>(f.get_int("N"));
    dim = static_cast<std::size_t>(f.get_int("dim"));
    const auto& w = f.get_matrix("weights");
    const auto& b = f.get_matrix("biases");
    if (w.rows != n || w.cols != dim || b.data.size() != n) throw Error("linear model block dimensions are inconsistent");
    std::vector<LinearModel> models(n);
    for (std::size_t i = 0; i < n; ++i) {
        models[i].weights.assign(w.data.begin() + static_cast<std::ptrdiff_t>(i * dim),
                                 w.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
        models[i].bias = b.data[i];
    }
    return models;
}

}  // namespace detail

inline ModelFile bank_to_file(const SvmBank& bank) {
    ModelFile f("svm_bank");
    f.set_string("channel", bank.channel);
    detail::put_models(f, bank.models, bank.dim);
    return f;
}

inline SvmBank bank_from_file(const ModelFile& f) {
    f.expect_kind("svm_bank");
    SvmBank bank;
    bank.channel = f.get_string("channel");
    bank.models = detail::get_models(f, bank.dim);
    return bank;
}

inline ModelFile fusion_to_file(const FusionModel& fm) {
    ModelFile f("fusion");
    detail::put_models(f, fm.models, 3 * fm.models.size());
    f.set_matrix("standardize_mean", 1, fm.standardizer.mean.size(), fm.standardizer.mean);
    f.set_matrix("standardize_scale", 1, fm.standardizer.scale.size(), fm.standardizer.scale);
    return f;
}

inline FusionModel fusion_from_file(const ModelFile& f) {
    f.expect_kind("fusion");
    FusionModel fm;
    std::size_t dim = 0;
    fm.models = detail::get_models(f, dim);
    if (dim != 3 * fm.models.size()) throw Error("fusion model input dimension must be 3N");
    fm.standardizer.mean = f.get_matrix("standardize_mean").data;
    fm.standardizer.scale = f.get_matrix("standardize_scale").data;
    if (fm.standardizer.mean.size() != dim || fm.standardizer.scale.size() != dim)
        throw Error("fusion standardization length must be 3N");
    return fm;
}

}  // namespace hkdet
