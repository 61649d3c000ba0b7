#pragma once

// Parameter containers and the small set of layers shared by the models.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fundus/tensor.hpp"

namespace fundus::nn {

using ad::Shape;
using ad::Tensor;

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
};

/// Ordered, named collection of trainable leaves. Order is registration
/// order and is what checkpoints and optimizer state are keyed on.
template <typename T>
class ParamList {
public:
    Tensor<T> add(const std::string& name, Tensor<T> t);

    const std::vector<NamedParam<T>>& items() const { return items_; }
    std::vector<NamedParam<T>>& items() { return items_; }
    std::size_t size() const { return items_.size(); }
    /// Total number of scalars.
    std::size_t scalar_count() const;
    void zero_grad();
    const Tensor<T>* find(const std::string& name) const;
    /// Copies values from another list with identical names and shapes.
    void copy_values_from(const ParamList& other);

private:
    std::vector<NamedParam<T>> items_;
};

/// Deterministic weight initialisation stream.
using Rng = std::mt19937_64;

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(ParamList<T>& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
    /// x[..., in] -> [..., out]
    Tensor<T> operator()(const Tensor<T>& x) const;

    Tensor<T> weight, bias;
};

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(ParamList<T>& params, const std::string& name, std::size_t in, std::size_t out,
           std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng);
    Tensor<T> operator()(const Tensor<T>& x) const;

    Tensor<T> weight, bias;
    ad::Conv2dOptions options;
};

/// Zero mean / unit variance over the last axis, then gamma * y + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::size_t from_axis);

/// alpha * layer_norm(x) + (1 - alpha) * x, alpha a scalar in [0, 1].
template <typename T>
Tensor<T> adaptive_norm(const Tensor<T>& x, const Tensor<T>& alpha, const Tensor<T>& gamma,
                        const Tensor<T>& beta, std::size_t from_axis);

template <typename T>
class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(ParamList<T>& params, const std::string& name, std::size_t features);
    Tensor<T> operator()(const Tensor<T>& x) const;

    Tensor<T> gamma, beta;
};

/// Learnable gate between normalised and raw activations. For feature maps
/// [N,C,H,W] the statistics are taken per sample over (C,H,W) and the affine
/// parameters are per channel; for token tensors [..., D] over the last axis.
template <typename T>
class AdaptiveNorm {
public:
    AdaptiveNorm() = default;
    AdaptiveNorm(ParamList<T>& params, const std::string& name, std::size_t channels,
                 bool spatial);
    Tensor<T> operator()(const Tensor<T>& x) const;
    /// sigmoid(gate): the current blend weight.
    Tensor<T> alpha() const;

    Tensor<T> gate, gamma, beta;
    bool spatial = true;
};

/// softmax(q k^T / sqrt(d)) v on [B, T, d] operands (B may fold heads).
/// The attention matrix [B, Tq, Tk] is written to weights_out when given.
template <typename T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                       Tensor<T>* weights_out = nullptr);

template <typename T>
class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(ParamList<T>& params, const std::string& name, std::size_t dim,
                       std::size_t heads, Rng& rng);
    /// q, k, v: [B, T, D] -> [B, T, D]. weights_out receives [B*heads, T, T].
    Tensor<T> operator()(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         Tensor<T>* weights_out = nullptr) const;

    Linear<T> wq, wk, wv, wo;
    std::size_t dim = 0, heads = 1;
};

}  // namespace fundus::nn
