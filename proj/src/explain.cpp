#include "fundus/explain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fundus/error.hpp"

namespace fundus::explain {

void SaliencyMap::record_range() {
    if (values.empty()) throw DomainError("empty saliency map");
    for (double v : values)
        if (!std::isfinite(v)) throw DomainError("non-finite saliency value in " + method);
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    raw_min = *lo;
    raw_max = *hi;
}

std::vector<double> SaliencyMap::normalized() const {
    std::vector<double> out(values.size(), 0.0);
    const double span = raw_max - raw_min;
    if (span > 0)
        for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - raw_min) / span;
    return out;
}

double SaliencyMap::sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }

namespace {

template <typename T>
Tensor<T> class_column(const Tensor<T>& scores, int cls) {
    if (cls < 0 || std::size_t(cls) >= scores.dim(1))
        throw DomainError("class " + std::to_string(cls) + " outside [0, " + std::to_string(scores.dim(1)) + ")");
    return ad::reshape(ad::slice(scores, 1, std::size_t(cls), 1), {scores.dim(0)});
}

SaliencyMap make_map(std::size_t h, std::size_t w, std::vector<double> values, std::string method) {
    SaliencyMap m;
    m.height = h;
    m.width = w;
    m.values = std::move(values);
    m.method = std::move(method);
    m.record_range();
    return m;
}

template <typename T>
std::vector<double> evaluate(const ScoreFn<T>& score, const std::vector<imaging::Image>& images, std::size_t batch) {
    ad::NoGradGuard guard;
    std::vector<double> out;
    out.reserve(images.size());
    for (std::size_t start = 0; start < images.size(); start += batch) {
        const std::size_t n = std::min(batch, images.size() - start);
        const auto s = score(imaging::to_tensor<T>(std::span(images).subspan(start, n)));
        if (s.numel() != n) throw ShapeError("score function must return one value per image");
        for (T v : s.data()) out.push_back(double(v));
    }
    return out;
}

}  // namespace

template <typename T>
ScoreFn<T> class_probability(const vit::ViT<T>& model, int cls) {
    return [&model, cls](const Tensor<T>& x) { return class_column(ad::softmax(model.forward(x), 1), cls); };
}

template <typename T>
ScoreFn<T> class_logit(const vit::ViT<T>& model, int cls) {
    return [&model, cls](const Tensor<T>& x) { return class_column(model.forward(x), cls); };
}

template <typename T>
OcclusionResult occlusion(const imaging::Image& img, const ScoreFn<T>& score, std::size_t patch,
                          float baseline_value, std::size_t batch) {
    if (patch == 0 || img.height % patch || img.width % patch)
        throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         " is not divisible into " + std::to_string(patch) + "-pixel patches");
    const std::size_t gh = img.height / patch, gw = img.width / patch;
    std::vector<imaging::Image> images{img};
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            auto occluded = img;
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t y = py * patch; y < (py + 1) * patch; ++y)
                    for (std::size_t x = px * patch; x < (px + 1) * patch; ++x) occluded.at(c, y, x) = baseline_value;
            images.push_back(std::move(occluded));
        }
    const auto scores = evaluate(score, images, batch);

    std::vector<double> impacts(gh * gw);
    for (std::size_t k = 0; k < impacts.size(); ++k) impacts[k] = scores[0] - scores[k + 1];
    const auto top = ganomaly::p90_select(impacts);

    OcclusionResult r;
    r.patch = patch;
    std::vector<double> values(img.plane());
    r.p90.assign(img.plane(), 0);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const std::size_t k = (y / patch) * gw + x / patch;
            values[y * img.width + x] = impacts[k];
            r.p90[y * img.width + x] = top[k];
        }
    r.impact = make_map(img.height, img.width, std::move(values), "occlusion" + std::to_string(patch));
    return r;
}

template <typename T>
SaliencyMap integrated_gradients(const imaging::Image& img, const ScoreFn<T>& score,
                                 const imaging::Image& baseline, std::size_t steps, std::size_t batch) {
    if (steps < 8) throw DomainError("integrated gradients needs at least 8 steps");
    if (baseline.height != img.height || baseline.width != img.width)
        throw ShapeError("baseline shape differs from the image");
    const std::size_t n = img.data.size();
    std::vector<double> grad_sum(n, 0.0);
    for (std::size_t k0 = 1; k0 <= steps; k0 += batch) {
        const std::size_t b = std::min(batch, steps - k0 + 1);
        std::vector<T> path(b * n);
        for (std::size_t j = 0; j < b; ++j) {
            const double alpha = double(k0 + j) / double(steps);
            for (std::size_t i = 0; i < n; ++i)
                path[j * n + i] = T(baseline.data[i] + alpha * (double(img.data[i]) - baseline.data[i]));
        }
        auto x = Tensor<T>::from({b, 3, img.height, img.width}, std::move(path), true);
        auto s = score(x);
        if (s.numel() != b) throw ShapeError("score function must return one value per image");
        ad::sum(s).backward();
        const auto g = x.grad();
        for (std::size_t j = 0; j < b; ++j)
            for (std::size_t i = 0; i < n; ++i) grad_sum[i] += double(g[j * n + i]);
    }
    std::vector<double> values(img.plane(), 0.0);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < img.plane(); ++p) {
            const std::size_t i = c * img.plane() + p;
            values[p] += (double(img.data[i]) - baseline.data[i]) * grad_sum[i] / double(steps);
        }
    return make_map(img.height, img.width, std::move(values), "intgrad");
}

template <typename T>
SaliencyMap grad_cam(const imaging::Image& img, const vit::ViT<T>& model, std::size_t block_index, int cls) {
    const auto& cfg = model.config();
    if (block_index >= cfg.depth)
        throw DomainError("block index " + std::to_string(block_index) + " outside depth " + std::to_string(cfg.depth));
    vit::ViTTrace<T> trace;
    const auto logits = model.forward(imaging::to_tensor<T>(std::span(&img, 1)), &trace);
    class_column(logits, cls).backward();

    const auto& act = trace.block_inputs[block_index];
    const std::size_t tokens = cfg.tokens(), dim = cfg.embed_dim;
    std::vector<double> weights(dim, 0.0);
    const bool has_grad = act.has_grad();
    if (has_grad)
        for (std::size_t t = 1; t <= tokens; ++t)
            for (std::size_t d = 0; d < dim; ++d) weights[d] += double(act.grad()[t * dim + d]) / double(tokens);
    std::vector<double> cell(tokens, 0.0);
    for (std::size_t t = 0; t < tokens; ++t) {
        double s = 0;
        for (std::size_t d = 0; d < dim; ++d) s += weights[d] * double(act.data()[(t + 1) * dim + d]);
        cell[t] = std::max(s, 0.0);
    }
    const std::size_t grid = cfg.grid(), p = cfg.patch_size;
    std::vector<double> values(img.plane());
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            values[y * img.width + x] = cell[std::min(grid - 1, y / p) * grid + std::min(grid - 1, x / p)];
    return make_map(img.height, img.width, std::move(values), "gradcam");
}

template <typename T>
SaliencyMap attention_mask(const imaging::Image& img, const unet::MaskUNet<T>& masker) {
    ad::NoGradGuard guard;
    const auto m = masker.forward(imaging::to_tensor<T>(std::span(&img, 1)));
    return make_map(img.height, img.width, {m.data().begin(), m.data().end()}, "mask");
}

template <typename T>
SaliencyMap reconstruction_error(const imaging::Image& img, const ganomaly::Generator<T>& g) {
    const auto recs = ganomaly::anomaly_score(g, imaging::to_tensor<T>(std::span(&img, 1)));
    const auto& r = recs.front();
    return make_map(r.height, r.width, {r.error_map.begin(), r.error_map.end()}, "recon");
}

imaging::Image make_panel(const imaging::Image& img, const std::vector<SaliencyMap>& maps) {
    if (maps.empty()) throw DomainError("panel needs at least one map");
    std::vector<imaging::Image> tiles{img};
    for (const auto& m : maps) {
        if (m.height != img.height || m.width != img.width)
            throw ShapeError("map '" + m.method + "' is " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                             ", image is " + std::to_string(img.height) + "x" + std::to_string(img.width));
        const auto norm = m.normalized();
        const std::vector<float> gray(norm.begin(), norm.end());
        tiles.push_back(imaging::gray_to_rgb(gray, m.height, m.width));
    }
    return imaging::hconcat(tiles);
}

void export_panel(const std::filesystem::path& path, const imaging::Image& img, const std::vector<SaliencyMap>& maps) {
    imaging::write_png(path, make_panel(img, maps));
}

void export_map(const std::filesystem::path& path, const SaliencyMap& map) {
    const auto norm = map.normalized();
    const std::vector<float> gray(norm.begin(), norm.end());
    imaging::write_gray_png(path, gray, map.height, map.width);
}

#define FUNDUS_INSTANTIATE(T)                                                                                \
    template ScoreFn<T> class_probability(const vit::ViT<T>&, int);                                         \
    template ScoreFn<T> class_logit(const vit::ViT<T>&, int);                                               \
    template OcclusionResult occlusion(const imaging::Image&, const ScoreFn<T>&, std::size_t, float,        \
                                       std::size_t);                                                        \
    template SaliencyMap integrated_gradients(const imaging::Image&, const ScoreFn<T>&,                    \
                                              const imaging::Image&, std::size_t, std::size_t);             \
    template SaliencyMap grad_cam(const imaging::Image&, const vit::ViT<T>&, std::size_t, int);             \
    template SaliencyMap attention_mask(const imaging::Image&, const unet::MaskUNet<T>&);                   \
    template SaliencyMap reconstruction_error(const imaging::Image&, const ganomaly::Generator<T>&);
FUNDUS_INSTANTIATE(float)
FUNDUS_INSTANTIATE(double)
#undef FUNDUS_INSTANTIATE

}  // namespace fundus::explain
