#include "support/toy_training.hpp"

#include "fundus/optim.hpp"

namespace fundus::check {

vit::ViT<float> train_toy_on_shapes(std::uint64_t seed, std::size_t n_per_class, int steps) {
    auto samples = datasets::generate_shapes(
        {.n_healthy = n_per_class, .n_anomalous = n_per_class, .side = 64, .seed = seed});
    std::vector<imaging::Image> images;
    std::vector<int> labels;
    for (std::size_t i = 0; i < n_per_class; ++i)
        for (std::size_t k : {i, i + n_per_class}) {
            images.push_back(samples[k].image);
            labels.push_back(samples[k].anomalous ? 1 : 0);
        }
    const auto x = imaging::to_tensor<float>(images);
    vit::ViT<float> model(vit::ViTConfig::toy(2), seed + 1);
    optim::Adam<float> adam(model.params());
    const std::size_t batch = 8, n = images.size();
    for (int step = 0; step < steps; ++step) {
        const std::size_t start = (std::size_t(step) * batch) % (n - n % batch);
        std::vector<int> y(labels.begin() + long(start), labels.begin() + long(start + batch));
        vit::classification_loss(model.forward(ad::slice(x, 0, start, batch)), y).backward();
        adam.step(1e-3);
        model.params().zero_grad();
    }
    return model;
}

std::vector<datasets::ShapesSample> held_out_shapes(std::uint64_t seed, std::size_t n_per_class, std::size_t side) {
    return datasets::generate_shapes({.n_healthy = n_per_class, .n_anomalous = n_per_class, .side = side, .seed = seed});
}

}  // namespace fundus::check
