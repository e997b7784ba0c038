#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "hkdet/context.hpp"
#include "hkdet/rng.hpp"

using namespace hkdet;

namespace {

// Category 0 images sit near +e0, category 1 images near +e1.
std::vector<PresenceTrainingImage> disjoint_images(Rng& rng, int n) {
    std::vector<PresenceTrainingImage> out;
    for (int i = 0; i < n; ++i) {
        const int c = i % 2;
        Vector f(3);
        for (auto& v : f) v = 0.1 * rng.gaussian();
        f[c] += 1.0;
        out.push_back(PresenceTrainingImage{"im" + std::to_string(100 + i), f, {c}});
    }
    return out;
}

std::vector<Detection> random_detections(Rng& rng, int n, int categories) {
    std::vector<Detection> out;
    for (int i = 0; i < n; ++i) {
        const double x = rng.uniform() * 10, y = rng.uniform() * 10;
        out.push_back(Detection{"a", Box{x, y, x + 1, y + 1}, rng.uniform_int(0, categories - 1), rng.gaussian()});
    }
    return out;
}

bool is_subsequence(const std::vector<Detection>& sub, const std::vector<Detection>& full) {
    std::size_t j = 0;
    for (const auto& d : full)
        if (j < sub.size() && sub[j] == d) ++j;
    return j == sub.size();
}

}  // namespace

TEST(PresencePrior, CategoryInEveryImageHasOpenGate) {
    Rng rng(1);
    auto images = disjoint_images(rng, 10);
    for (auto& im : images) im.categories.push_back(2);
    const auto res = train_presence_prior(images, 4, SvmParams{1e-2, 10, 0});
    ASSERT_EQ(res.prior.num_categories(), 4u);
    EXPECT_FALSE(res.prior.gated[2]);
    EXPECT_EQ(res.prior.thresholds[2], kGateOpen);
    for (const auto& im : images) EXPECT_GT(presence_scores(im.feature, res.prior)[2], 0);
    EXPECT_FALSE(res.prior.gated[3]);
    ASSERT_EQ(res.warnings.size(), 2u);
    EXPECT_NE(res.warnings[0].find("category 2"), std::string::npos);
    EXPECT_NE(res.warnings[1].find("category 3"), std::string::npos);
}

TEST(PresencePrior, SeparableImagesReachFullAccuracy) {
    Rng rng(2);
    const auto images = disjoint_images(rng, 40);
    const auto res = train_presence_prior(images, 2, SvmParams{1e-3, 20, 3});
    EXPECT_TRUE(res.warnings.empty());
    for (const auto& im : images) {
        const auto s = presence_scores(im.feature, res.prior);
        const int c = im.categories[0];
        EXPECT_GT(s[c], 0);
        EXPECT_LT(s[1 - c], 0);
    }
}

TEST(PresencePrior, TrainingOrderDoesNotMatter) {
    Rng rng(3);
    auto images = disjoint_images(rng, 30);
    const auto a = train_presence_prior(images, 2, SvmParams{1e-2, 5, 7});
    std::reverse(images.begin(), images.end());
    Rng shuf(9);
    shuf.shuffle(images);
    const auto b = train_presence_prior(images, 2, SvmParams{1e-2, 5, 7});
    for (std::size_t c = 0; c < 2; ++c) {
        EXPECT_EQ(a.prior.models[c].weights, b.prior.models[c].weights);
        EXPECT_EQ(a.prior.models[c].bias, b.prior.models[c].bias);
    }
}

TEST(PresencePrior, RejectsEmptyOrMixedInput) {
    EXPECT_THROW(train_presence_prior({}, 2, SvmParams{}), Error);
    std::vector<PresenceTrainingImage> mixed{{"a", {1, 0}, {0}}, {"b", {1}, {}}};
    EXPECT_THROW(train_presence_prior(mixed, 1, SvmParams{}), Error);
}

TEST(PresenceScores, Fixtures) {
    PresencePrior p;
    p.dim = 2;
    p.models = {LinearModel{{1, 2}, 0.5}, LinearModel{{-1, 0}, -3}};
    EXPECT_EQ(presence_scores({0, 0}, p), (Vector{0.5, -3}));
    EXPECT_EQ(presence_scores({2, 1}, p), (Vector{1 * 2 + 2 * 1 + 0.5, -2 - 3}));
    EXPECT_THROW(presence_scores({1}, p), Error);
    EXPECT_TRUE(presence_scores({1, 2}, PresencePrior{}).empty());
}

TEST(Threshold, KeepsRequestedRecall) {
    EXPECT_EQ(threshold_at_recall({}, 0.95), kGateOpen);
    EXPECT_EQ(threshold_at_recall({3, 1, 2, 4}, 1.0), 1);
    EXPECT_EQ(threshold_at_recall({3, 1, 2, 4}, 0.75), 2);
    EXPECT_EQ(threshold_at_recall({3, 1, 2, 4}, 0.5), 3);
    EXPECT_EQ(threshold_at_recall({3, 1, 2, 4}, 0.01), 4);
    EXPECT_THROW(threshold_at_recall({1}, 0.0), Error);
    EXPECT_THROW(threshold_at_recall({1}, 1.5), Error);
    // achieved recall is at least the target
    Rng rng(4);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> s(rng.uniform_int(1, 30));
        for (auto& v : s) v = rng.uniform_int(0, 5);
        const double r = 0.05 + 0.95 * rng.uniform();
        const double tau = threshold_at_recall(s, r);
        const auto kept = std::count_if(s.begin(), s.end(), [&](double v) { return v >= tau; });
        EXPECT_GE(static_cast<double>(kept) / s.size(), r - 1e-12);
    }
}

TEST(Filter, OpenGatesAreIdentity) {
    Rng rng(5);
    const auto dets = random_detections(rng, 20, 3);
    EXPECT_EQ(filter_detections(dets, {-5, 0, 7}, Vector(3, kGateOpen)), dets);
}

TEST(Filter, ClosedCategoryIsRemovedOthersUntouched) {
    Rng rng(6);
    const auto dets = random_detections(rng, 30, 3);
    const auto out = filter_detections(dets, {1, -1, 1}, {0, 0, 0});
    std::vector<Detection> want;
    for (const auto& d : dets)
        if (d.category_id != 1) want.push_back(d);
    EXPECT_EQ(out, want);
    EXPECT_THROW(filter_detections({Detection{"a", Box{0, 0, 1, 1}, 3, 1}}, {1, 1, 1}, {0, 0, 0}), Error);
}

TEST(Filter, Properties) {
    Rng rng(7);
    for (int trial = 0; trial < 300; ++trial) {
        const auto dets = random_detections(rng, rng.uniform_int(0, 15), 3);
        Vector presence(3), tau(3);
        for (auto& v : presence) v = rng.uniform_int(-2, 2);
        for (auto& v : tau) v = rng.uniform_int(-2, 2);
        const auto out = filter_detections(dets, presence, tau);
        // brute-force per-detection check
        std::vector<Detection> want;
        for (const auto& d : dets)
            if (!(presence[d.category_id] < tau[d.category_id])) want.push_back(d);
        EXPECT_EQ(out, want);
        EXPECT_TRUE(is_subsequence(out, dets));
        EXPECT_EQ(filter_detections(out, presence, tau), out);
        // raising a threshold never grows the kept set
        Vector higher = tau;
        higher[rng.index(3)] += rng.uniform_int(0, 2);
        EXPECT_TRUE(is_subsequence(filter_detections(dets, presence, higher), out));
    }
}

TEST(Persistence, PriorRoundTrip) {
    Rng rng(8);
    const auto res = train_presence_prior(disjoint_images(rng, 20), 3, SvmParams{1e-2, 5, 0});
    auto prior = res.prior;
    prior.thresholds[0] = -0.25;
    std::stringstream ss;
    prior_to_file(prior).write(ss);
    const auto back = prior_from_file(ModelFile::read(ss));
    EXPECT_EQ(back.gated, prior.gated);
    EXPECT_EQ(back.thresholds, prior.thresholds);
    EXPECT_EQ(back.dim, prior.dim);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(back.models[c].weights, prior.models[c].weights);
}
