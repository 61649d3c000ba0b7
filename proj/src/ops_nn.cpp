#include <algorithm>
#include <cmath>
#include <limits>

#include "ops_common.hpp"

namespace fundus::ad {

using detail::make_result;
using detail::require;

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    require(axis < x.rank(), "softmax: axis out of range");
    const auto sp = detail::split_axis(x.shape(), axis);
    std::vector<T> y(x.numel());
    const T* xv = x.data().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.extent * sp.inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t k = 0; k < sp.extent; ++k) mx = std::max(mx, xv[base + k * sp.inner]);
            T z = T(0);
            for (std::size_t k = 0; k < sp.extent; ++k) {
                const T e = std::exp(xv[base + k * sp.inner] - mx);
                y[base + k * sp.inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < sp.extent; ++k) y[base + k * sp.inner] /= z;
        }
    return make_result<T>(x.shape(), std::move(y), {&x}, "softmax", [sp](Node<T>& self) {
        T* gx = self.parents[0]->grad_buffer().data();
        const T* g = self.grad.data();
        const T* y = self.value.data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.extent * sp.inner + i;
                T dot = T(0);
                for (std::size_t k = 0; k < sp.extent; ++k)
                    dot += g[base + k * sp.inner] * y[base + k * sp.inner];
                for (std::size_t k = 0; k < sp.extent; ++k) {
                    const std::size_t j = base + k * sp.inner;
                    gx[j] += y[j] * (g[j] - dot);
                }
            }
    });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
    require(axis < x.rank(), "log_softmax: axis out of range");
    const auto sp = detail::split_axis(x.shape(), axis);
    std::vector<T> y(x.numel());
    const T* xv = x.data().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.extent * sp.inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t k = 0; k < sp.extent; ++k) mx = std::max(mx, xv[base + k * sp.inner]);
            T z = T(0);
            for (std::size_t k = 0; k < sp.extent; ++k) z += std::exp(xv[base + k * sp.inner] - mx);
            const T lse = mx + std::log(z);
            for (std::size_t k = 0; k < sp.extent; ++k)
                y[base + k * sp.inner] = xv[base + k * sp.inner] - lse;
        }
    return make_result<T>(x.shape(), std::move(y), {&x}, "log_softmax", [sp](Node<T>& self) {
        T* gx = self.parents[0]->grad_buffer().data();
        const T* g = self.grad.data();
        const T* y = self.value.data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.extent * sp.inner + i;
                T gs = T(0);
                for (std::size_t k = 0; k < sp.extent; ++k) gs += g[base + k * sp.inner];
                for (std::size_t k = 0; k < sp.extent; ++k) {
                    const std::size_t j = base + k * sp.inner;
                    gx[j] += g[j] - std::exp(y[j]) * gs;
                }
            }
    });
}

template <typename T>
Tensor<T> standardize(const Tensor<T>& x, std::size_t from_axis, std::type_identity_t<T> eps) {
    require(from_axis < x.rank(), "standardize: axis out of range");
    std::size_t groups = 1;
    for (std::size_t i = 0; i < from_axis; ++i) groups *= x.dim(i);
    const std::size_t width = x.numel() / std::max<std::size_t>(groups, 1);
    require(width > 0, "standardize: empty feature dimension");
    std::vector<T> y(x.numel());
    std::vector<T> inv_std(groups);
    const T* xv = x.data().data();
    for (std::size_t gi = 0; gi < groups; ++gi) {
        const T* row = xv + gi * width;
        T mu = T(0);
        for (std::size_t j = 0; j < width; ++j) mu += row[j];
        mu /= T(width);
        T var = T(0);
        for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= T(width);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[gi] = is;
        for (std::size_t j = 0; j < width; ++j) y[gi * width + j] = (row[j] - mu) * is;
    }
    return make_result<T>(x.shape(), std::move(y), {&x}, "standardize",
                          [groups, width, inv_std = std::move(inv_std)](Node<T>& self) {
        T* gx = self.parents[0]->grad_buffer().data();
        const T* g = self.grad.data();
        const T* y = self.value.data();
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t off = gi * width;
            T gm = T(0), gy = T(0);
            for (std::size_t j = 0; j < width; ++j) {
                gm += g[off + j];
                gy += g[off + j] * y[off + j];
            }
            gm /= T(width);
            gy /= T(width);
            for (std::size_t j = 0; j < width; ++j)
                gx[off + j] += inv_std[gi] * (g[off + j] - gm - y[off + j] * gy);
        }
    });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    require(logits.rank() == 2, "cross_entropy: logits must be [B,C]");
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    require(labels.size() == B, "cross_entropy: label count != batch");
    require(B > 0, "cross_entropy: empty batch");
    for (int l : labels)
        if (l < 0 || std::size_t(l) >= C)
            throw std::out_of_range("cross_entropy: label " + std::to_string(l) +
                                    " outside [0," + std::to_string(C) + ")");
    std::vector<T> probs(B * C);
    T loss = T(0);
    const T* xv = logits.data().data();
    for (std::size_t b = 0; b < B; ++b) {
        const T* row = xv + b * C;
        const T mx = *std::max_element(row, row + C);
        T z = T(0);
        for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
        const T lse = mx + std::log(z);
        for (std::size_t c = 0; c < C; ++c) probs[b * C + c] = std::exp(row[c] - lse);
        loss += lse - row[labels[b]];
    }
    loss /= T(B);
    return make_result<T>({}, {loss}, {&logits}, "cross_entropy",
                          [B, C, labels, probs = std::move(probs)](Node<T>& self) {
        T* gx = self.parents[0]->grad_buffer().data();
        const T g = self.grad[0] / T(B);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                gx[b * C + c] += g * (probs[b * C + c] - (int(c) == labels[b] ? T(1) : T(0)));
    });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& targets) {
    require(logits.numel() == targets.size(), "bce_with_logits: target count mismatch");
    require(!targets.empty(), "bce_with_logits: empty input");
    const std::size_t n = targets.size();
    T loss = T(0);
    const T* xv = logits.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        const T x = xv[i];
        loss += std::max(x, T(0)) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
    }
    loss /= T(n);
    return make_result<T>({}, {loss}, {&logits}, "bce_with_logits", [n, targets](Node<T>& self) {
        auto& p = *self.parents[0];
        T* gx = p.grad_buffer().data();
        const T g = self.grad[0] / T(n);
        for (std::size_t i = 0; i < n; ++i) {
            const T x = p.value[i];
            const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
            gx[i] += g * (s - targets[i]);
        }
    });
}

#define FUNDUS_INSTANTIATE_NN(T)                                                  \
    template Tensor<T> softmax(const Tensor<T>&, std::size_t);                  \
    template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);              \
    template Tensor<T> standardize(const Tensor<T>&, std::size_t, T);           \
    template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<int>&); \
    template Tensor<T> bce_with_logits(const Tensor<T>&, const std::vector<T>&);

FUNDUS_INSTANTIATE_NN(float)
FUNDUS_INSTANTIATE_NN(double)

}  // namespace fundus::ad
