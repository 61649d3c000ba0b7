#include "fundus/unet.hpp"

#include "fundus/error.hpp"

namespace fundus::unet {

void UNetConfig::validate() const {
    if (base_width == 0) throw ConfigError("unet base_width must be positive");
    if (image_side < 8 || image_side % 8 != 0) throw ConfigError("unet image_side must be a multiple of 8");
}

const std::array<const char*, 11>& stage_names() {
    static const std::array<const char*, 11> names{"Input", "Down1", "Down2", "Down3", "Down4", "Middle",
                                                   "Up4",   "Up3",   "Up2",   "Up1",   "Output"};
    return names;
}

template <typename T>
ResBlock<T>::ResBlock(nn::ParamList<T>& params, const std::string& name, std::size_t in, std::size_t out,
                      nn::Rng& rng)
    : project(in != out) {
    norm1 = nn::AdaptiveNorm<T>(params, name + ".norm1", in, true);
    conv1 = nn::Conv2d<T>(params, name + ".conv1", in, out, 3, 1, 1, rng);
    norm2 = nn::AdaptiveNorm<T>(params, name + ".norm2", out, true);
    conv2 = nn::Conv2d<T>(params, name + ".conv2", out, out, 3, 1, 1, rng);
    if (project) skip = nn::Conv2d<T>(params, name + ".skip", in, out, 1, 1, 0, rng);
}

template <typename T>
Tensor<T> ResBlock<T>::operator()(const Tensor<T>& x) const {
    auto h = conv1(ad::gelu(norm1(x)));
    h = conv2(ad::gelu(norm2(h)));
    return (project ? skip(x) : x) + h;
}

template <typename T>
MaskUNet<T>::MaskUNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    nn::Rng rng(seed);
    const std::size_t w = cfg_.base_width;
    const std::array<std::size_t, 5> ch{w, w, 2 * w, 4 * w, 4 * w};  // input, down1..down4 outputs
    in_norm_ = nn::AdaptiveNorm<T>(params_, "input.norm", 3, true);
    in_conv_ = nn::Conv2d<T>(params_, "input.conv", 3, ch[0], 3, 1, 1, rng);
    for (std::size_t i = 0; i < 4; ++i) {
        const std::string name = "down" + std::to_string(i + 1);
        down_[i] = ResBlock<T>(params_, name + ".res", ch[i], ch[i + 1], rng);
        if (i < 3) downsample_[i] = nn::Conv2d<T>(params_, name + ".down", ch[i + 1], ch[i + 1], 3, 2, 1, rng);
    }
    mid_ = ResBlock<T>(params_, "middle.res", ch[4], ch[4], rng);
    mid_norm_ = nn::AdaptiveNorm<T>(params_, "middle.attn_norm", ch[4], false);
    mid_attn_ = nn::MultiHeadAttention<T>(params_, "middle.attn", ch[4], 1, rng);
    // Up4..Up1: input = previous output + skip of the matching down stage.
    const std::array<std::size_t, 4> up_in{ch[4] + ch[4], 4 * w + ch[3], 2 * w + ch[2], w + ch[1]};
    const std::array<std::size_t, 4> up_out{4 * w, 2 * w, w, w};
    for (std::size_t i = 0; i < 4; ++i) {
        const std::string name = "up" + std::to_string(4 - i);
        up_[i] = ResBlock<T>(params_, name + ".res", up_in[i], up_out[i], rng);
        if (i < 3) upsample_[i] = nn::Conv2d<T>(params_, name + ".up", up_out[i], up_out[i], 3, 1, 1, rng);
    }
    out_norm_ = nn::AdaptiveNorm<T>(params_, "output.norm", w, true);
    out_conv_ = nn::Conv2d<T>(params_, "output.conv", w, 1, 3, 1, 1, rng);
    std::fill(out_conv_.weight.mutable_data().begin(), out_conv_.weight.mutable_data().end(), T(0));
    std::fill(out_conv_.bias.mutable_data().begin(), out_conv_.bias.mutable_data().end(), T(cfg_.output_bias));
}

template <typename T>
Tensor<T> MaskUNet<T>::forward(const Tensor<T>& x, std::vector<StageTrace>* trace) const {
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != cfg_.image_side || x.dim(3) != cfg_.image_side)
        throw ShapeError("mask network expects [B,3," + std::to_string(cfg_.image_side) + "," +
                         std::to_string(cfg_.image_side) + "], got " + ad::shape_str(x.shape()));
    const auto& names = stage_names();
    std::size_t stage = 0;
    auto record = [&](std::size_t in, const Tensor<T>& out) {
        if (trace) trace->push_back({names[stage], in, out.dim(1), out.dim(2)});
        ++stage;
    };

    auto h = in_conv_(in_norm_(x));
    record(3, h);
    std::array<Tensor<T>, 4> skips;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t in = h.dim(1);
        skips[i] = down_[i](h);
        h = i < 3 ? downsample_[i](skips[i]) : skips[i];
        record(in, h);
    }
    {
        const std::size_t in = h.dim(1);
        h = mid_(h);
        const std::size_t b = h.dim(0), c = h.dim(1), s = h.dim(2);
        auto tokens = ad::transpose(ad::reshape(h, {b, c, s * s}), 1, 2);
        auto n = mid_norm_(tokens);
        auto attended = ad::reshape(ad::transpose(mid_attn_(n, n, n), 1, 2), {b, c, s, s});
        h = h + attended;
        record(in, h);
    }
    for (std::size_t i = 0; i < 4; ++i) {
        auto cat = ad::concat<T>({h, skips[3 - i]}, 1);
        h = up_[i](cat);
        if (i < 3) h = upsample_[i](ad::upsample_nearest(h, 2));
        record(cat.dim(1), h);
    }
    auto m = ad::sigmoid(out_conv_(ad::gelu(out_norm_(h))));
    record(h.dim(1), m);
    return m;
}

template <typename T>
Tensor<T> apply_mask(const Tensor<T>& mask, const Tensor<T>& x) {
    if (mask.rank() != 4 || x.rank() != 4 || mask.dim(1) != 1 || mask.dim(0) != x.dim(0) ||
        mask.dim(2) != x.dim(2) || mask.dim(3) != x.dim(3))
        throw ShapeError("mask " + ad::shape_str(mask.shape()) + " does not match image " + ad::shape_str(x.shape()));
    return mask * x;
}

template <typename T>
Tensor<T> mask_l1(const Tensor<T>& mask) {
    return ad::sum(ad::abs(mask)) * T(1.0 / double(mask.dim(0)));
}

template <typename T>
CompositeLoss<T> composite_loss(const vit::ViT<T>& classifier, const MaskUNet<T>& masker, const Tensor<T>& x,
                                const std::vector<int>& labels, const Tensor<T>& lambda) {
    if (lambda.numel() != 1 || lambda.data()[0] < 0) throw DomainError("lambda must be a non-negative scalar");
    CompositeLoss<T> out;
    out.mask = masker.forward(x);
    out.logits = classifier.forward(apply_mask(out.mask, x));
    out.ce = vit::classification_loss(out.logits, labels);
    out.l1 = mask_l1(out.mask);
    out.total = out.ce + ad::reshape(lambda, {}) * out.l1;
    return out;
}

template <typename T>
CompositeLoss<T> composite_loss(const vit::ViT<T>& classifier, const MaskUNet<T>& masker, const Tensor<T>& x,
                                const std::vector<int>& labels, double lambda) {
    return composite_loss(classifier, masker, x, labels, Tensor<T>::scalar(T(lambda)));
}

#define FUNDUS_INSTANTIATE(T)                                                                           \
    template class ResBlock<T>;                                                                         \
    template class MaskUNet<T>;                                                                         \
    template Tensor<T> apply_mask(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> mask_l1(const Tensor<T>&);                                                       \
    template CompositeLoss<T> composite_loss(const vit::ViT<T>&, const MaskUNet<T>&, const Tensor<T>&,  \
                                             const std::vector<int>&, const Tensor<T>&);                \
    template CompositeLoss<T> composite_loss(const vit::ViT<T>&, const MaskUNet<T>&, const Tensor<T>&,  \
                                             const std::vector<int>&, double);
FUNDUS_INSTANTIATE(float)
FUNDUS_INSTANTIATE(double)
#undef FUNDUS_INSTANTIATE

}  // namespace fundus::unet
