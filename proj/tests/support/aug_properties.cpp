#include "aug_properties.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fundus/imaging.hpp"

namespace fundus::check {

namespace {

using imaging::Image;

Image random_image(std::mt19937_64& rng, std::size_t side, int kind) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Image img(side, side);
    if (kind == 0) {
        for (auto& v : img.data) v = u(rng);
    } else if (kind == 1) {
        const float a = u(rng), b = u(rng), c = u(rng);
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t y = 0; y < side; ++y)
                for (std::size_t x = 0; x < side; ++x)
                    img.at(ch, y, x) = std::clamp(a + (b - 0.5f) * float(x) / float(side) +
                                                      (c - 0.5f) * float(y) / float(side),
                                                  0.0f, 1.0f);
    } else {
        // a few quantised levels, so ties are common
        std::uniform_int_distribution<int> lvl(0, 4);
        for (auto& v : img.data) v = float(lvl(rng)) / 4.0f;
    }
    return img;
}

bool in_range(const Image& img) {
    return std::all_of(img.data.begin(), img.data.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
}

// a <= b pre-map implies a' <= b' post-map, within each channel.
bool monotone(const Image& before, const Image& after) {
    const std::size_t n = before.plane();
    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(),
                  [&](auto i, auto j) { return before.data[c * n + i] < before.data[c * n + j]; });
        for (std::size_t k = 1; k < n; ++k)
            if (after.data[c * n + idx[k]] < after.data[c * n + idx[k - 1]]) return false;
    }
    return true;
}

}  // namespace

PropertyTally run_augmentation_trials(std::size_t trials, std::uint64_t seed) {
    PropertyTally t;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> side_d(4, 24);
    std::uniform_int_distribution<int> kind_d(0, 2), stage_d(0, 4);
    std::uniform_real_distribution<double> u(0, 1);
    auto fail = [&](std::size_t trial, const std::string& what) {
        ++t.violations;
        if (t.examples.size() < 5) t.examples.push_back("trial " + std::to_string(trial) + ": " + what);
    };

    for (std::size_t i = 0; i < trials; ++i) {
        ++t.trials;
        const std::size_t side = side_d(rng);
        const Image img = random_image(rng, side, kind_d(rng));
        imaging::AugmentationPolicy p;
        p.stage = imaging::Stage(stage_d(rng));
        p.seed = rng();
        p.interp = u(rng) < 0.5 ? imaging::Interp::bilinear : imaging::Interp::nearest;
        p.laplace_strength = 3.0 * u(rng);
        p.blur_sigma_max = 3.0 * u(rng);

        const Image a = imaging::augment(img, p, i, i % 7);
        const Image b = imaging::augment(img, p, i, i % 7);
        if (!in_range(a)) fail(i, "augment output outside [0,1] for stage " + imaging::stage_name(p.stage));
        if (a.data != b.data) fail(i, "augment not deterministic for fixed seed");

        const Image eq = imaging::hist_equalize(img);
        if (!in_range(eq)) fail(i, "hist_equalize outside [0,1]");
        if (!monotone(img, eq)) fail(i, "hist_equalize not monotone");

        const float v = float(u(rng));
        const Image flat(side, side, v);
        const Image blurred = imaging::gaussian_blur(flat, 0.1 + 2.9 * u(rng));
        for (float x : blurred.data)
            if (std::abs(x - v) > 1e-6f) {
                fail(i, "blur moved a constant image");
                break;
            }
        if (imaging::laplace_enhance(flat, 5.0 * u(rng)).data != flat.data)
            fail(i, "laplace moved a constant image");
    }
    return t;
}

}  // namespace fundus::check
