#include "support/model_cases.hpp"

#include "fundus/ganomaly.hpp"
#include "fundus/unet.hpp"
#include "fundus/vit.hpp"
#include "support/gradcheck.hpp"

namespace fundus::check {

namespace {

using T = Tensor<double>;

// Biases start at zero; random values exercise their gradients too.
void jitter_biases(nn::ParamList<double>& params, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 0.1);
    for (auto& p : params.items())
        if (p.name.ends_with(".bias") || p.name.ends_with(".gate") || p.name.ends_with(".beta"))
            for (auto& v : p.tensor.mutable_data()) v += g(rng);
}

std::vector<T> leaves_of(std::initializer_list<const nn::ParamList<double>*> lists) {
    std::vector<T> out;
    for (const auto* l : lists)
        for (const auto& p : l->items()) out.push_back(p.tensor);
    return out;
}

GradCheckResult masked_classifier(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    vit::ViT<double> clf({8, 4, 4, 1, 2, 2, 3}, seed * 2 + 1);
    unet::MaskUNet<double> masker({.base_width = 2, .image_side = 8, .output_bias = 0.0}, seed * 2 + 2);
    jitter_biases(clf.params(), rng);
    jitter_biases(masker.params(), rng);
    auto x = T::uniform({2, 3, 8, 8}, rng, 0.0, 1.0);
    const std::vector<int> labels{int(seed % 3), int((seed + 1) % 3)};
    auto lambda = T::scalar(0.01, true);
    auto leaves = leaves_of({&clf.params(), &masker.params()});
    leaves.push_back(lambda);
    return grad_check(leaves, [&] { return unet::composite_loss(clf, masker, x, labels, lambda).total; }, 1e-5,
                      200, seed);
}

GradCheckResult ganomaly_total(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ganomaly::GanomalyConfig cfg;
    cfg.image_side = 16;
    cfg.latent_dim = 3;
    cfg.widths = {2, 3, 4, 4};
    cfg.variant = ganomaly::Variant::kl_mask;
    ganomaly::Generator<double> g(cfg, seed * 2 + 1);
    ganomaly::Discriminator<double> d(cfg, seed * 2 + 2);
    jitter_biases(g.params(), rng);
    jitter_biases(d.params(), rng);
    for (auto& p : g.params().items())
        if (p.name.find(".logvar.weight") != std::string::npos)
            for (auto& v : p.tensor.mutable_data()) v = std::normal_distribution<double>(0.0, 0.1)(rng);
    auto x = T::uniform({2, 3, 16, 16}, rng, 0.0, 1.0);
    auto mask = T::uniform({2, 1, 16, 16}, rng, 0.0, 1.0);
    auto eps = T::randn({2, 3}, rng);
    auto leaves = leaves_of({&g.params(), &d.params()});
    return grad_check(leaves, [&] {
        auto out = g.forward(x, &eps);
        auto masked = ganomaly::masked_percentile_loss(x, out.x_hat, mask);
        auto real = d.forward(x).features, fake = d.forward(out.x_hat).features;
        return ganomaly::generator_losses(x, out, real, fake, cfg, &masked).total;
    }, 1e-5, 200, seed);
}

}  // namespace

const std::vector<OpCase>& model_cases() {
    static const std::vector<OpCase> cases{{"masked_classifier_objective", 1e-4, masked_classifier},
                                           {"ganomaly_total_loss", 1e-4, ganomaly_total}};
    return cases;
}

}  // namespace fundus::check
