#include "fundus/nn.hpp"

#include <cmath>

namespace fundus::nn {

template <typename T>
Tensor<T> ParamList<T>::add(const std::string& name, Tensor<T> t) {
    for (const auto& p : items_)
        if (p.name == name) throw std::logic_error("duplicate parameter name " + name);
    t.set_requires_grad(true);
    items_.push_back({name, t});
    return t;
}

template <typename T>
std::size_t ParamList<T>::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.tensor.numel();
    return n;
}

template <typename T>
void ParamList<T>::zero_grad() {
    for (auto& p : items_) p.tensor.zero_grad();
}

template <typename T>
const Tensor<T>* ParamList<T>::find(const std::string& name) const {
    for (const auto& p : items_)
        if (p.name == name) return &p.tensor;
    return nullptr;
}

template <typename T>
void ParamList<T>::copy_values_from(const ParamList& other) {
    for (auto& p : items_) {
        const Tensor<T>* src = other.find(p.name);
        if (!src) throw std::invalid_argument("parameter " + p.name + " missing in source");
        if (src->shape() != p.tensor.shape())
            throw ShapeError("parameter " + p.name + " shape mismatch");
        auto dst = p.tensor.mutable_data();
        std::copy(src->data().begin(), src->data().end(), dst.begin());
    }
}

template <typename T>
Linear<T>::Linear(ParamList<T>& params, const std::string& name, std::size_t in, std::size_t out,
                  Rng& rng) {
    const T std_dev = T(std::sqrt(2.0 / double(in + out)));
    weight = params.add(name + ".weight", Tensor<T>::randn({in, out}, rng, std_dev));
    bias = params.add(name + ".bias", Tensor<T>::zeros({out}));
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
    return ad::matmul(x, weight) + bias;
}

template <typename T>
Conv2d<T>::Conv2d(ParamList<T>& params, const std::string& name, std::size_t in, std::size_t out,
                  std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng)
    : options{stride, padding} {
    const T std_dev = T(std::sqrt(2.0 / double(in * kernel * kernel)));
    weight = params.add(name + ".weight", Tensor<T>::randn({out, in, kernel, kernel}, rng, std_dev));
    bias = params.add(name + ".bias", Tensor<T>::zeros({out}));
}

template <typename T>
Tensor<T> Conv2d<T>::operator()(const Tensor<T>& x) const {
    return ad::conv2d(x, weight, bias, options);
}

namespace {

// Affine parameters shaped to broadcast against x: [C,1,1] for feature maps
// normalised from axis 1, [D] for token tensors.
template <typename T>
Tensor<T> affine_view(const Tensor<T>& p, const Tensor<T>& x, std::size_t from_axis) {
    if (from_axis + 1 == x.rank()) return p;
    Shape s(x.rank() - from_axis, 1);
    s[0] = p.numel();
    return ad::reshape(p, s);
}

}  // namespace

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::size_t from_axis) {
    auto y = ad::standardize(x, from_axis);
    return y * affine_view(gamma, x, from_axis) + affine_view(beta, x, from_axis);
}

template <typename T>
Tensor<T> adaptive_norm(const Tensor<T>& x, const Tensor<T>& alpha, const Tensor<T>& gamma,
                        const Tensor<T>& beta, std::size_t from_axis) {
    auto normed = layer_norm(x, gamma, beta, from_axis);
    auto one_minus = ad::add_scalar(ad::neg(alpha), T(1));
    return normed * alpha + x * one_minus;
}

template <typename T>
LayerNorm<T>::LayerNorm(ParamList<T>& params, const std::string& name, std::size_t features) {
    gamma = params.add(name + ".gamma", Tensor<T>::ones({features}));
    beta = params.add(name + ".beta", Tensor<T>::zeros({features}));
}

template <typename T>
Tensor<T> LayerNorm<T>::operator()(const Tensor<T>& x) const {
    return layer_norm(x, gamma, beta, x.rank() - 1);
}

template <typename T>
AdaptiveNorm<T>::AdaptiveNorm(ParamList<T>& params, const std::string& name, std::size_t channels,
                              bool spatial_)
    : spatial(spatial_) {
    gate = params.add(name + ".gate", Tensor<T>::zeros({}));
    gamma = params.add(name + ".gamma", Tensor<T>::ones({channels}));
    beta = params.add(name + ".beta", Tensor<T>::zeros({channels}));
}

template <typename T>
Tensor<T> AdaptiveNorm<T>::alpha() const {
    return ad::sigmoid(gate);
}

template <typename T>
Tensor<T> AdaptiveNorm<T>::operator()(const Tensor<T>& x) const {
    return adaptive_norm(x, alpha(), gamma, beta, spatial ? 1 : x.rank() - 1);
}

template <typename T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                       Tensor<T>* weights_out) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
        throw ShapeError("attention operands must be [B,T,d]");
    const T scale = T(1) / std::sqrt(T(q.dim(2)));
    auto scores = ad::mul_scalar(ad::matmul(q, ad::transpose(k, 1, 2)), scale);
    auto w = ad::softmax(scores, 2);
    if (weights_out) *weights_out = w;
    return ad::matmul(w, v);
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParamList<T>& params, const std::string& name,
                                          std::size_t dim_, std::size_t heads_, Rng& rng)
    : dim(dim_), heads(heads_) {
    if (heads == 0 || dim % heads != 0)
        throw ShapeError("attention dim " + std::to_string(dim) + " not divisible by " +
                         std::to_string(heads) + " heads");
    wq = Linear<T>(params, name + ".q", dim, dim, rng);
    wk = Linear<T>(params, name + ".k", dim, dim, rng);
    wv = Linear<T>(params, name + ".v", dim, dim, rng);
    wo = Linear<T>(params, name + ".out", dim, dim, rng);
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::operator()(const Tensor<T>& q, const Tensor<T>& k,
                                            const Tensor<T>& v, Tensor<T>* weights_out) const {
    if (q.rank() != 3 || q.dim(2) != dim) throw ShapeError("attention input must be [B,T,D]");
    const std::size_t B = q.dim(0), Tq = q.dim(1), Tk = k.dim(1), dh = dim / heads;
    auto split = [&](const Tensor<T>& t, std::size_t len) {
        // [B,T,D] -> [B,T,H,dh] -> [B,H,T,dh] -> [B*H,T,dh]
        auto r = ad::reshape(t, {B, len, heads, dh});
        return ad::reshape(ad::permute(r, {0, 2, 1, 3}), {B * heads, len, dh});
    };
    auto qh = split(wq(q), Tq);
    auto kh = split(wk(k), Tk);
    auto vh = split(wv(v), Tk);
    auto o = scaled_dot_product_attention(qh, kh, vh, weights_out);
    auto merged = ad::reshape(ad::permute(ad::reshape(o, {B, heads, Tq, dh}), {0, 2, 1, 3}),
                              {B, Tq, dim});
    return wo(merged);
}

#define FUNDUS_INSTANTIATE_NN_LAYERS(T)                                                          \
    template class ParamList<T>;                                                                 \
    template class Linear<T>;                                                                    \
    template class Conv2d<T>;                                                                    \
    template class LayerNorm<T>;                                                                 \
    template class AdaptiveNorm<T>;                                                              \
    template class MultiHeadAttention<T>;                                                        \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                  std::size_t);                                                  \
    template Tensor<T> adaptive_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                     const Tensor<T>&, std::size_t);                             \
    template Tensor<T> scaled_dot_product_attention(const Tensor<T>&, const Tensor<T>&,          \
                                                    const Tensor<T>&, Tensor<T>*);

FUNDUS_INSTANTIATE_NN_LAYERS(float)
FUNDUS_INSTANTIATE_NN_LAYERS(double)

}  // namespace fundus::nn
