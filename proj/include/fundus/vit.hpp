#pragma once

// Vision Transformer classifier with a class-token readout.

#include <cstdint>
#include <string>
#include <vector>

#include "fundus/nn.hpp"

namespace fundus::vit {

using ad::Tensor;

struct ViTConfig {
    std::size_t image_side = 64;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t n_classes = 7;

    /// side 224, patch 16, dim 768, depth 12, heads 12
    static ViTConfig b16(std::size_t n_classes = 7);
    /// side 64, patch 8, dim 64, depth 4, heads 4
    static ViTConfig toy(std::size_t n_classes = 7);

    std::size_t grid() const { return image_side / patch_size; }
    std::size_t tokens() const { return grid() * grid(); }
    void validate() const;
};

/// Closed-form trainable parameter count.
std::size_t parameter_count(const ViTConfig& cfg);

/// [B,3,S,S] -> [B,T,3*p*p], patches row-major, channel-major inside a patch.
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t patch);
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::size_t patch, std::size_t side);

/// Token activations captured during forward for Grad-CAM.
template <typename T>
struct ViTTrace {
    std::vector<Tensor<T>> block_inputs;  // [B, T+1, D] entering each block
};

template <typename T>
class ViT {
public:
    ViT(const ViTConfig& cfg, std::uint64_t seed);

    /// x[B,3,S,S] -> logits[B,n_classes].
    Tensor<T> forward(const Tensor<T>& x, ViTTrace<T>* trace = nullptr) const;

    const ViTConfig& config() const { return cfg_; }
    nn::ParamList<T>& params() { return params_; }
    const nn::ParamList<T>& params() const { return params_; }

private:
    struct Block {
        nn::LayerNorm<T> norm1, norm2;
        nn::MultiHeadAttention<T> attn;
        nn::Linear<T> fc1, fc2;
    };

    ViTConfig cfg_;
    nn::ParamList<T> params_;
    nn::Linear<T> embed_;
    Tensor<T> cls_, pos_;
    std::vector<Block> blocks_;
    nn::LayerNorm<T> norm_;
    nn::Linear<T> head_;
};

/// Mean cross-entropy of logits against labels; DomainError for a label
/// outside [0, classes).
template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, const std::vector<int>& labels);

}  // namespace fundus::vit
