#include "fundus/vit.hpp"

#include "fundus/error.hpp"

namespace fundus::vit {

ViTConfig ViTConfig::b16(std::size_t n_classes) { return {224, 16, 768, 12, 12, 4, n_classes}; }
ViTConfig ViTConfig::toy(std::size_t n_classes) { return {64, 8, 64, 4, 4, 4, n_classes}; }

void ViTConfig::validate() const {
    if (patch_size == 0 || image_side == 0 || image_side % patch_size != 0)
        throw ConfigError("image_side must be a positive multiple of patch_size");
    if (heads == 0 || embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
    if (depth == 0 || n_classes < 2 || mlp_ratio == 0) throw ConfigError("invalid ViT depth, mlp_ratio or class count");
}

std::size_t parameter_count(const ViTConfig& c) {
    const std::size_t d = c.embed_dim, h = d * c.mlp_ratio, p = 3 * c.patch_size * c.patch_size;
    const std::size_t block = 2 * 2 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
    return (p * d + d) + d + (c.tokens() + 1) * d + c.depth * block + 2 * d + (d * c.n_classes + c.n_classes);
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t patch) {
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != x.dim(3))
        throw ShapeError("patchify expects [B,3,S,S], got " + ad::shape_str(x.shape()));
    const std::size_t b = x.dim(0), s = x.dim(2);
    if (patch == 0 || s % patch != 0) throw ShapeError("image side not divisible by patch size");
    const std::size_t n = s / patch;
    auto y = ad::reshape(x, {b, 3, n, patch, n, patch});
    y = ad::permute(y, {0, 2, 4, 1, 3, 5});
    return ad::reshape(y, {b, n * n, 3 * patch * patch});
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& p, std::size_t patch, std::size_t side) {
    if (patch == 0 || side % patch != 0) throw ShapeError("image side not divisible by patch size");
    const std::size_t n = side / patch;
    if (p.rank() != 3 || p.dim(1) != n * n || p.dim(2) != 3 * patch * patch)
        throw ShapeError("unpatchify shape mismatch: " + ad::shape_str(p.shape()));
    auto y = ad::reshape(p, {p.dim(0), n, n, 3, patch, patch});
    y = ad::permute(y, {0, 3, 1, 4, 2, 5});
    return ad::reshape(y, {p.dim(0), 3, side, side});
}

template <typename T>
ViT<T>::ViT(const ViTConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    nn::Rng rng(seed);
    const std::size_t d = cfg_.embed_dim;
    embed_ = nn::Linear<T>(params_, "embed", 3 * cfg_.patch_size * cfg_.patch_size, d, rng);
    cls_ = params_.add("cls_token", Tensor<T>::randn({1, 1, d}, rng, T(0.02)));
    pos_ = params_.add("pos_embed", Tensor<T>::randn({1, cfg_.tokens() + 1, d}, rng, T(0.02)));
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
        const std::string name = "block" + std::to_string(i);
        Block blk;
        blk.norm1 = nn::LayerNorm<T>(params_, name + ".norm1", d);
        blk.attn = nn::MultiHeadAttention<T>(params_, name + ".attn", d, cfg_.heads, rng);
        blk.norm2 = nn::LayerNorm<T>(params_, name + ".norm2", d);
        blk.fc1 = nn::Linear<T>(params_, name + ".fc1", d, d * cfg_.mlp_ratio, rng);
        blk.fc2 = nn::Linear<T>(params_, name + ".fc2", d * cfg_.mlp_ratio, d, rng);
        blocks_.push_back(std::move(blk));
    }
    norm_ = nn::LayerNorm<T>(params_, "norm", d);
    head_ = nn::Linear<T>(params_, "head", d, cfg_.n_classes, rng);
}

template <typename T>
Tensor<T> ViT<T>::forward(const Tensor<T>& x, ViTTrace<T>* trace) const {
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != cfg_.image_side || x.dim(3) != cfg_.image_side)
        throw ShapeError("ViT expects [B,3," + std::to_string(cfg_.image_side) + "," +
                         std::to_string(cfg_.image_side) + "], got " + ad::shape_str(x.shape()));
    const std::size_t b = x.dim(0), d = cfg_.embed_dim;
    auto tokens = embed_(patchify(x, cfg_.patch_size));
    auto cls = Tensor<T>::zeros({b, 1, d}) + cls_;
    auto h = ad::concat<T>({cls, tokens}, 1) + pos_;
    for (const auto& blk : blocks_) {
        if (trace) trace->block_inputs.push_back(h);
        auto n1 = blk.norm1(h);
        h = h + blk.attn(n1, n1, n1);
        h = h + blk.fc2(ad::gelu(blk.fc1(blk.norm2(h))));
    }
    auto cls_out = ad::reshape(ad::slice(norm_(h), 1, 0, 1), {b, d});
    return head_(cls_out);
}

template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size())
        throw ShapeError("logits/labels mismatch");
    for (int l : labels)
        if (l < 0 || std::size_t(l) >= logits.dim(1))
            throw DomainError("label " + std::to_string(l) + " outside [0," + std::to_string(logits.dim(1)) + ")");
    return ad::cross_entropy(logits, labels);
}

#define FUNDUS_INSTANTIATE(T)                                                                   \
    template Tensor<T> patchify(const Tensor<T>&, std::size_t);                                 \
    template Tensor<T> unpatchify(const Tensor<T>&, std::size_t, std::size_t);                  \
    template class ViT<T>;                                                                      \
    template Tensor<T> classification_loss(const Tensor<T>&, const std::vector<int>&);
FUNDUS_INSTANTIATE(float)
FUNDUS_INSTANTIATE(double)
#undef FUNDUS_INSTANTIATE

}  // namespace fundus::vit
