#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "fundus/error.hpp"
#include "fundus/explain.hpp"
#include "support/toy_training.hpp"

using namespace fundus;
using TD = ad::Tensor<double>;

namespace {

imaging::Image random_image(std::size_t side, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    imaging::Image img(side, side);
    for (auto& v : img.data) v = u(rng);
    return img;
}

/// score(x) = sum_i w_i x_i
explain::ScoreFn<double> linear_score(const std::vector<double>& w, std::size_t side) {
    const auto wt = TD::from({1, 3, side, side}, w);
    return [wt, side](const TD& x) { return ad::sum(ad::reshape(x * wt, {x.dim(0), 3 * side * side}), 1); };
}

/// score(x) = sum_j sigmoid(w_j . x - 1) over a few non-negative directions.
explain::ScoreFn<double> smooth_score(std::size_t side, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t n = 3 * side * side;
    auto w = ad::abs(TD::randn({n, 4}, rng, 0.3 / std::sqrt(double(n)))).detach();
    return [w, n](const TD& x) { return ad::sum(ad::sigmoid(ad::matmul(ad::reshape(x, {x.dim(0), n}), w) + -1.0), 1); };
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(SaliencyMap, NormalizedRange) {
    explain::SaliencyMap m{2, 2, {-1.0, 0.0, 1.0, 3.0}, "t"};
    m.record_range();
    EXPECT_EQ(m.raw_min, -1.0);
    EXPECT_EQ(m.raw_max, 3.0);
    EXPECT_EQ(m.normalized(), (std::vector<double>{0.0, 0.25, 0.5, 1.0}));
    explain::SaliencyMap flat{1, 2, {2.0, 2.0}, "t"};
    flat.record_range();
    EXPECT_EQ(flat.normalized(), (std::vector<double>{0.0, 0.0}));
}

TEST(SaliencyMap, RejectsNonFinite) {
    explain::SaliencyMap m{1, 1, {std::nan("")}, "t"};
    EXPECT_THROW(m.record_range(), DomainError);
}

TEST(Occlusion, ConstantModelGivesZeroImpact) {
    const auto img = random_image(32, 1);
    explain::ScoreFn<double> constant = [](const TD& x) { return TD::full({x.dim(0)}, 0.7); };
    const auto r = explain::occlusion(img, constant, 8, 0.5f);
    for (double v : r.impact.values) EXPECT_EQ(v, 0.0);
}

TEST(Occlusion, TopDecileMarksCeilTenthOfPatches) {
    const auto img = random_image(64, 2);
    const auto r = explain::occlusion(img, linear_score(std::vector<double>(3 * 64 * 64, 1.0), 64), 8, 0.0f);
    std::size_t marked = 0;
    for (std::size_t py = 0; py < 8; ++py)
        for (std::size_t px = 0; px < 8; ++px) marked += r.p90[py * 8 * 64 + px * 8];
    EXPECT_EQ(marked, 7u);
    EXPECT_EQ(std::count(r.p90.begin(), r.p90.end(), 1), 7 * 64);
}

TEST(Occlusion, TiesBreakByIndex) {
    const imaging::Image img(64, 64, 0.5f);
    const auto r = explain::occlusion(img, linear_score(std::vector<double>(3 * 64 * 64, 1.0), 64), 8, 0.0f);
    std::size_t marked = 0;
    for (std::size_t k = 0; k < 64; ++k) marked += r.p90[(k / 8) * 8 * 64 + (k % 8) * 8];
    EXPECT_EQ(marked, 7u);
    // equal impacts everywhere: the highest patch indices win
    for (std::size_t k = 57; k < 64; ++k) EXPECT_EQ(r.p90[(k / 8) * 8 * 64 + (k % 8) * 8], 1) << k;
}

TEST(Occlusion, LinearPatchMeanOracle) {
    const std::size_t side = 32, patch = 8;
    const std::size_t target_y = 1, target_x = 2;  // patch (1,2)
    std::vector<double> w(3 * side * side, 0.0);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = target_y * patch; y < (target_y + 1) * patch; ++y)
            for (std::size_t x = target_x * patch; x < (target_x + 1) * patch; ++x)
                w[(c * side + y) * side + x] = 1.0 / double(3 * patch * patch);
    const auto img = random_image(side, 3);
    const float baseline = 0.25f;
    double patch_mean = 0;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = target_y * patch; y < (target_y + 1) * patch; ++y)
            for (std::size_t x = target_x * patch; x < (target_x + 1) * patch; ++x)
                patch_mean += img.at(c, y, x) / double(3 * patch * patch);

    const auto r = explain::occlusion(img, linear_score(w, side), patch, baseline);
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            const bool inside = y / patch == target_y && x / patch == target_x;
            EXPECT_NEAR(r.impact.values[y * side + x], inside ? patch_mean - baseline : 0.0, 1e-7);
        }
}

TEST(Occlusion, OwnContentBaselineIsZeroMap) {
    const imaging::Image img(32, 32, 0.3f);
    const auto r = explain::occlusion(img, smooth_score(32, 4), 16, 0.3f);
    for (double v : r.impact.values) EXPECT_EQ(v, 0.0);
}

TEST(Occlusion, RejectsIndivisibleSide) {
    const auto img = random_image(20, 5);
    explain::ScoreFn<double> constant = [](const TD& x) { return TD::zeros({x.dim(0)}); };
    EXPECT_THROW(explain::occlusion(img, constant, 8, 0.0f), ShapeError);
}

TEST(IntegratedGradients, BaselineEqualToImageIsZero) {
    const auto img = random_image(16, 6);
    const auto m = explain::integrated_gradients(img, smooth_score(16, 7), img, 16);
    for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(IntegratedGradients, LinearModelClosedForm) {
    const std::size_t side = 16;
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n;
    std::vector<double> w(3 * side * side);
    for (auto& v : w) v = n(rng);
    const auto img = random_image(side, 9);
    const imaging::Image black(side, side, 0.0f);
    for (std::size_t steps : {8u, 256u}) {
        const auto m = explain::integrated_gradients(img, linear_score(w, side), black, steps);
        for (std::size_t p = 0; p < side * side; ++p) {
            double expect = 0;
            for (std::size_t c = 0; c < 3; ++c) expect += w[c * side * side + p] * img.data[c * side * side + p];
            EXPECT_NEAR(m.values[p], expect, 1e-9);
        }
    }
}

TEST(IntegratedGradients, CompletenessOnSmoothModel) {
    const std::size_t side = 16;
    const auto score = smooth_score(side, 10);
    const imaging::Image black(side, side, 0.0f);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto img = random_image(side, 100 + seed);
        const auto m = explain::integrated_gradients(img, score, black, 256);
        ad::NoGradGuard guard;
        const std::vector<imaging::Image> pair{img, black};
        const auto s = score(imaging::to_tensor<double>(pair));
        const double gap = s.data()[0] - s.data()[1];
        EXPECT_LE(std::abs(m.sum() - gap), 0.02 * std::abs(gap)) << seed;
    }
}

TEST(IntegratedGradients, Errors) {
    const auto img = random_image(16, 11);
    EXPECT_THROW(explain::integrated_gradients(img, smooth_score(16, 1), img, 4), DomainError);
    EXPECT_THROW(explain::integrated_gradients(img, smooth_score(16, 1), imaging::Image(8, 8), 16), ShapeError);
}

TEST(GradCam, InvalidBlock) {
    vit::ViT<double> m({16, 4, 8, 2, 2, 2, 2}, 1);
    EXPECT_THROW(explain::grad_cam(random_image(16, 1), m, 2, 0), DomainError);
    EXPECT_THROW(explain::grad_cam(random_image(16, 1), m, 0, 2), DomainError);
}

TEST(GradCam, ZeroGradientGivesZeroMap) {
    vit::ViT<double> m({16, 4, 8, 2, 2, 2, 2}, 2);
    ASSERT_NE(m.params().find("head.weight"), nullptr);
    auto head = *m.params().find("head.weight");
    std::fill(head.mutable_data().begin(), head.mutable_data().end(), 0.0);
    const auto map = explain::grad_cam(random_image(16, 3), m, 1, 1);
    for (double v : map.values) EXPECT_EQ(v, 0.0);
}

TEST(GradCam, ConstantWithinPatchCells) {
    vit::ViT<double> m({16, 4, 8, 2, 2, 2, 2}, 3);
    const auto map = explain::grad_cam(random_image(16, 4), m, 0, 0);
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x)
            EXPECT_EQ(map.values[y * 16 + x], map.values[(y / 4 * 4) * 16 + x / 4 * 4]);
    for (double v : map.values) EXPECT_GE(v, 0.0);
}

TEST(Panel, WidthAndDeterminism) {
    const auto img = random_image(64, 12);
    std::vector<explain::SaliencyMap> maps;
    for (int k = 0; k < 5; ++k) {
        explain::SaliencyMap m{64, 64, std::vector<double>(64 * 64), "m" + std::to_string(k)};
        for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = double((i * (k + 3)) % 97);
        m.record_range();
        maps.push_back(m);
    }
    const auto panel = explain::make_panel(img, maps);
    EXPECT_EQ(panel.width, 6u * 64u);
    EXPECT_EQ(panel.height, 64u);

    const auto dir = std::filesystem::temp_directory_path() / "fundus_panel_test";
    std::filesystem::create_directories(dir);
    explain::export_panel(dir / "a.png", img, maps);
    explain::export_panel(dir / "b.png", img, maps);
    EXPECT_EQ(slurp(dir / "a.png"), slurp(dir / "b.png"));
    std::filesystem::remove_all(dir);
}

TEST(Panel, Errors) {
    const auto img = random_image(32, 13);
    EXPECT_THROW(explain::make_panel(img, {}), DomainError);
    explain::SaliencyMap small{16, 16, std::vector<double>(256, 0.0), "small"};
    EXPECT_THROW(explain::make_panel(img, {small}), ShapeError);
}

TEST(ModelMaps, MaskAndReconstructionShapes) {
    const auto img = random_image(32, 14);
    unet::MaskUNet<float> masker({.base_width = 4, .image_side = 32}, 1);
    const auto mask = explain::attention_mask(img, masker);
    EXPECT_EQ(mask.values.size(), 32u * 32u);
    EXPECT_GE(mask.raw_min, 0.0);
    EXPECT_LE(mask.raw_max, 1.0);

    ganomaly::GanomalyConfig cfg;
    cfg.image_side = 32;
    ganomaly::Generator<float> g(cfg, 2);
    const auto rec = explain::reconstruction_error(img, g);
    EXPECT_EQ(rec.values.size(), 32u * 32u);
    EXPECT_GE(rec.raw_min, 0.0);
}

class TrainedToy : public ::testing::Test {
protected:
    static void SetUpTestSuite() { model_ = new vit::ViT<float>(check::train_toy_on_shapes(31, 40, 300)); }
    static void TearDownTestSuite() {
        delete model_;
        model_ = nullptr;
    }
    static vit::ViT<float>* model_;
};
vit::ViT<float>* TrainedToy::model_ = nullptr;

TEST_F(TrainedToy, GradCamLocalisesLesions) {
    const auto test = check::held_out_shapes(32, 20);
    std::size_t hits = 0, total = 0;
    for (const auto& s : test) {
        if (!s.anomalous) continue;
        const auto map = explain::grad_cam(s.image, *model_, model_->config().depth - 1, 1);
        double in = 0, out = 0;
        std::size_t n_in = 0, n_out = 0;
        for (std::size_t p = 0; p < map.values.size(); ++p)
            if (s.lesion_mask[p] > 0) in += map.values[p], ++n_in;
            else out += map.values[p], ++n_out;
        ++total;
        if (in / double(n_in) > out / double(n_out)) ++hits;
    }
    EXPECT_GE(double(hits), 0.6 * double(total)) << hits << "/" << total;
}

TEST_F(TrainedToy, OcclusionFindsLesionPatches) {
    const auto test = check::held_out_shapes(33, 10);
    std::size_t hits = 0, total = 0;
    for (const auto& s : test) {
        if (!s.anomalous) continue;
        const auto r = explain::occlusion(s.image, explain::class_probability(*model_, 1), 8, 0.0f);
        double in = 0, out = 0;
        std::size_t n_in = 0, n_out = 0;
        for (std::size_t p = 0; p < r.impact.values.size(); ++p)
            if (s.lesion_mask[p] > 0) in += r.impact.values[p], ++n_in;
            else out += r.impact.values[p], ++n_out;
        ++total;
        if (in / double(n_in) > out / double(n_out)) ++hits;
    }
    EXPECT_GE(double(hits), 0.6 * double(total)) << hits << "/" << total;
}
