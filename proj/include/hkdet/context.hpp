#pragma once

// Presence prior: a multi-label whole-image classifier whose per-category
// margins gate the detections of that image.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "hkdet/classify.hpp"
#include "hkdet/core.hpp"
#include "hkdet/model_io.hpp"

namespace hkdet {

inline constexpr double kGateOpen = -std::numeric_limits<double>::infinity();

struct PresencePrior {
    std::size_t dim = 0;
    std::vector<LinearModel> models;
    std::vector<bool> gated;  // false: category always passes
    Vector thresholds;        // per category; -inf when the gate is open

    std::size_t num_categories() const { return models.size(); }
};

struct PresenceTrainingImage {
    std::string image_id;
    Vector feature;
    std::vector<int> categories;  // categories present in the image
};

struct PresenceTrainResult {
    PresencePrior prior;
    std::vector<std::string> warnings;
};

/// One-vs-rest presence classifiers. Images are sorted by id before training,
/// so the model does not depend on input order. Categories present in every
/// image or in none cannot be discriminated; their gates stay open.
inline PresenceTrainResult train_presence_prior(std::vector<PresenceTrainingImage> images, std::size_t num_categories,
                                                const SvmParams& p) {
    if (images.empty()) throw Error("train_presence_prior: no training images");
    std::sort(images.begin(), images.end(),
              [](const PresenceTrainingImage& a, const PresenceTrainingImage& b) { return a.image_id < b.image_id; });
    PresenceTrainResult res;
    auto& prior = res.prior;
    prior.dim = images[0].feature.size();
    VectorList x;
    for (const auto& im : images) {
        if (im.feature.size() != prior.dim) throw Error("train_presence_prior: image features have mixed dimensions");
        x.push_back(im.feature);
    }
    for (std::size_t c = 0; c < num_categories; ++c) {
        std::vector<int> y;
        std::size_t present = 0;
        for (const auto& im : images) {
            const bool has = std::find(im.categories.begin(), im.categories.end(), static_cast<int>(c)) != im.categories.end();
            y.push_back(has ? 1 : -1);
            present += has;
        }
        if (present == 0 || present == images.size()) {
            res.warnings.push_back("presence prior: category " + std::to_string(c) +
                                   (present == 0 ? " never appears" : " appears in every image") +
                                   " in training images; gate disabled");
            prior.models.push_back(LinearModel{Vector(prior.dim, 0.0), present == 0 ? -1.0 : 1.0});
            prior.gated.push_back(false);
            prior.thresholds.push_back(kGateOpen);
            continue;
        }
        prior.models.push_back(train_svm_report(x, y, p).model);
        prior.gated.push_back(true);
        prior.thresholds.push_back(0.0);
    }
    return res;
}

/// Raw margins w_c . x + b_c.
inline Vector presence_scores(const Vector& image_feature, const PresencePrior& prior) {
    Vector s(prior.models.size());
    for (std::size_t c = 0; c < s.size(); ++c) s[c] = prior.models[c].decision(image_feature);
    return s;
}

/// Largest threshold that keeps at least `recall` of the given positive
/// scores; -inf when there are none.
inline double threshold_at_recall(std::vector<double> positive_scores, double recall) {
    if (!(recall > 0 && recall <= 1)) throw Error("presence recall target must be in (0,1]");
    if (positive_scores.empty()) return kGateOpen;
    std::sort(positive_scores.begin(), positive_scores.end(), std::greater<>());
    const auto keep = static_cast<std::size_t>(std::ceil(recall * static_cast<double>(positive_scores.size()) - 1e-12));
    return positive_scores[std::max<std::size_t>(keep, 1) - 1];
}

/// Per-category threshold keeping `recall` of held-out images that contain
/// the category. Categories without held-out positives keep their gate open.
inline void select_thresholds(PresencePrior& prior, const std::vector<PresenceTrainingImage>& heldout, double recall) {
    if (!(recall > 0 && recall <= 1)) throw Error("presence recall target must be in (0,1]");
    for (std::size_t c = 0; c < prior.num_categories(); ++c) {
        if (!prior.gated[c]) continue;
        std::vector<double> pos;
        for (const auto& im : heldout)
            if (std::find(im.categories.begin(), im.categories.end(), static_cast<int>(c)) != im.categories.end())
                pos.push_back(prior.models[c].decision(im.feature));
        prior.thresholds[c] = threshold_at_recall(std::move(pos), recall);
    }
}

/// Keeps a detection iff presence[category] >= tau[category]; order and
/// scores are untouched.
inline std::vector<Detection> filter_detections(const std::vector<Detection>& detections, const Vector& presence,
                                                const Vector& tau) {
    std::vector<Detection> out;
    out.reserve(detections.size());
    for (const auto& d : detections) {
        const auto c = static_cast<std::size_t>(d.category_id);
        if (d.category_id < 0 || c >= presence.size() || c >= tau.size())
            throw Error("filter_detections: category " + std::to_string(d.category_id) + " out of range");
        if (presence[c] >= tau[c]) out.push_back(d);
    }
    return out;
}

inline ModelFile prior_to_file(const PresencePrior& prior) {
    ModelFile f("presence_prior");
    detail::put_models(f, prior.models, prior.dim);
    std::vector<double> gated(prior.gated.begin(), prior.gated.end());
    const std::size_t n = gated.size();
    f.set_matrix("gated", 1, n, std::move(gated));
    f.set_matrix("thresholds", 1, prior.thresholds.size(), prior.thresholds);
    return f;
}

inline PresencePrior prior_from_file(const ModelFile& f) {
    f.expect_kind("presence_prior");
    PresencePrior prior;
    prior.models = detail::get_models(f, prior.dim);
    const auto& g = f.get_matrix("gated");
    prior.thresholds = f.get_matrix("thresholds").data;
    if (g.data.size() != prior.models.size() || prior.thresholds.size() != prior.models.size())
        throw Error("presence prior dimensions are inconsistent");
    for (double v : g.data) prior.gated.push_back(v != 0.0);
    return prior;
}

}  // namespace hkdet
