#pragma once

// Central finite-difference oracle for the autodiff engine. Independent of the
// backward rules: it only ever evaluates forward passes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "fundus/tensor.hpp"

namespace fundus::check {

using ad::Tensor;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t refined = 0;  // entries re-evaluated at h / 10 (kink inside [x - h, x + h])
};

/// Relative error with a small absolute floor so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
inline double rel_error(double analytic, double numeric, double floor = 1e-4) {
    return std::abs(analytic - numeric) /
           std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backward() against (f(x+h) - f(x-h)) / 2h for every element of
/// every leaf (or a random subset of `sample` elements when sample > 0).
///
/// Piecewise-smooth losses (|.|, leaky ReLU) have kinks; when one lies inside
/// [x - h, x + h] the two one-sided differences disagree and the central
/// difference does not estimate the derivative at x. On a smooth region the
/// central miss is O(h^2) against an O(h) one-sided gap; straddling a kink
/// makes the miss a sizeable fraction of the gap. Entries whose miss exceeds
/// 1e-5 (relative), whose gap exceeds 1e-4 and whose miss is at least 10% of
/// the gap are re-evaluated with step h / 10 and judged on that estimate, so a
/// wrong backward rule still fails.
inline GradCheckResult grad_check(const std::vector<Tensor<double>>& leaves,
                                  const std::function<Tensor<double>()>& loss_fn,
                                  double h = 1e-5, std::size_t sample = 0,
                                  std::uint64_t sample_seed = 0) {
    for (auto leaf : leaves) leaf.zero_grad();
    auto loss = loss_fn();
    loss.backward();
    const double f0 = loss.item();

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t l = 0; l < leaves.size(); ++l)
        for (std::size_t i = 0; i < leaves[l].numel(); ++i) coords.emplace_back(l, i);
    if (sample > 0 && sample < coords.size()) {
        std::mt19937_64 rng(sample_seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(sample);
    }

    GradCheckResult r;
    for (auto [l, i] : coords) {
        auto leaf = leaves[l];
        auto data = leaf.mutable_data();
        const double analytic = leaf.has_grad() ? leaf.grad()[i] : 0.0;
        const double orig = data[i];
        auto central = [&](double step, double* right, double* left) {
            data[i] = orig + step;
            const double fp = loss_fn().item();
            data[i] = orig - step;
            const double fm = loss_fn().item();
            data[i] = orig;
            *right = (fp - f0) / step;
            *left = (f0 - fm) / step;
            return (fp - fm) / (2 * step);
        };
        double right, left;
        double numeric = central(h, &right, &left);
        const double gap = std::abs(right - left);
        if (rel_error(analytic, numeric) > 1e-5 && rel_error(right, left) > 1e-4 &&
            std::abs(numeric - analytic) >= 0.1 * gap) {
            numeric = central(h / 10, &right, &left);
            ++r.refined;
        }
        r.max_rel_error = std::max(r.max_rel_error, rel_error(analytic, numeric));
        ++r.checked;
    }
    return r;
}

inline Tensor<double> random_leaf(ad::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    return Tensor<double>::randn(std::move(shape), rng, scale, true);
}

}  // namespace fundus::check
