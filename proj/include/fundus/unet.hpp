#pragma once

// Constrained-attention mask network g(x) -> M in (0,1) and the joint
// classifier objective CE(f(M * x), y) + lambda * |M|_1.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fundus/nn.hpp"
#include "fundus/vit.hpp"

namespace fundus::unet {

using ad::Tensor;

struct UNetConfig {
    /// Channels of the first stage; later stages use 1, 1, 2, 4, 4 times this.
    std::size_t base_width = 32;
    std::size_t image_side = 64;
    /// The output conv starts with zero weights and this bias, so the first
    /// mask is a uniform sigmoid(2) ~ 0.88.
    double output_bias = 2.0;

    void validate() const;
};

/// Stage names in forward order: Input, Down1..Down4, Middle, Up4..Up1, Output.
const std::array<const char*, 11>& stage_names();

struct StageTrace {
    std::string name;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t side = 0;  // output spatial extent
};

template <typename T>
class ResBlock {
public:
    ResBlock() = default;
    ResBlock(nn::ParamList<T>& params, const std::string& name, std::size_t in, std::size_t out,
             nn::Rng& rng);
    Tensor<T> operator()(const Tensor<T>& x) const;

    nn::AdaptiveNorm<T> norm1, norm2;
    nn::Conv2d<T> conv1, conv2, skip;
    bool project = false;
};

template <typename T>
class MaskUNet {
public:
    MaskUNet(const UNetConfig& cfg, std::uint64_t seed);

    /// x[B,3,S,S] -> M[B,1,S,S] in (0,1).
    Tensor<T> forward(const Tensor<T>& x, std::vector<StageTrace>* trace = nullptr) const;

    const UNetConfig& config() const { return cfg_; }
    nn::ParamList<T>& params() { return params_; }
    const nn::ParamList<T>& params() const { return params_; }

private:
    UNetConfig cfg_;
    nn::ParamList<T> params_;
    nn::AdaptiveNorm<T> in_norm_;
    nn::Conv2d<T> in_conv_;
    std::array<ResBlock<T>, 4> down_;
    std::array<nn::Conv2d<T>, 3> downsample_;
    ResBlock<T> mid_;
    nn::AdaptiveNorm<T> mid_norm_;
    nn::MultiHeadAttention<T> mid_attn_;
    std::array<ResBlock<T>, 4> up_;  // Up4, Up3, Up2, Up1
    std::array<nn::Conv2d<T>, 3> upsample_;
    nn::AdaptiveNorm<T> out_norm_;
    nn::Conv2d<T> out_conv_;
};

/// M[B,1,H,W] broadcast over the channels of x[B,C,H,W].
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& mask, const Tensor<T>& x);

/// Per-image L1 norm (pixel sum, M >= 0) averaged over the batch.
template <typename T>
Tensor<T> mask_l1(const Tensor<T>& mask);

template <typename T>
struct CompositeLoss {
    Tensor<T> total, ce, l1, mask, logits;
};

/// CE(f(M * x), y) + lambda * |M|_1 with M = g(x); lambda is a tensor so its
/// gradient can be inspected. DomainError for lambda < 0.
template <typename T>
CompositeLoss<T> composite_loss(const vit::ViT<T>& classifier, const MaskUNet<T>& masker,
                                const Tensor<T>& x, const std::vector<int>& labels,
                                const Tensor<T>& lambda);
template <typename T>
CompositeLoss<T> composite_loss(const vit::ViT<T>& classifier, const MaskUNet<T>& masker,
                                const Tensor<T>& x, const std::vector<int>& labels, double lambda);

}  // namespace fundus::unet
