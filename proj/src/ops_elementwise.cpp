#include <cmath>
#include <numbers>

#include "fundus/kernels.hpp"
#include "ops_common.hpp"

namespace fundus::ad {

using detail::for_each_broadcast;
using detail::make_result;

namespace {

// Forward: out = F(a, b). Backward: partials (da, db) at each element given
// (a, b, out). Broadcast axes are summed back into the smaller operand.
template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, Fwd fwd, Da da, Db db) {
    Shape out_shape = broadcast_shapes(a.shape(), b.shape());
    std::vector<T> out(numel(out_shape));
    const T* av = a.data().data();
    const T* bv = b.data().data();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    } else {
        for_each_broadcast(out_shape, a.shape(), b.shape(),
                           [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(av[i], bv[j]); });
    }
    const Shape sa = a.shape(), sb = b.shape();
    return make_result<T>(
        out_shape, std::move(out), {&a, &b}, op, [sa, sb, da, db](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            const T* g = self.grad.data();
            const T* y = self.value.data();
            const T* av = pa.value.data();
            const T* bv = pb.value.data();
            T* ga = pa.requires_grad ? pa.grad_buffer().data() : nullptr;
            T* gb = pb.requires_grad ? pb.grad_buffer().data() : nullptr;
            if (sa == sb) {
                for (std::size_t i = 0; i < self.value.size(); ++i) {
                    if (ga) ga[i] += g[i] * da(av[i], bv[i], y[i]);
                    if (gb) gb[i] += g[i] * db(av[i], bv[i], y[i]);
                }
                return;
            }
            for_each_broadcast(self.shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
                if (ga) ga[i] += g[o] * da(av[i], bv[j], y[o]);
                if (gb) gb[j] += g[o] * db(av[i], bv[j], y[o]);
            });
        });
}

// Forward: y = F(x). Backward: dy/dx given (x, y).
template <typename T, typename Fwd, typename D>
Tensor<T> unary(const Tensor<T>& x, const char* op, Fwd fwd, D d) {
    std::vector<T> out(x.numel());
    const T* xv = x.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
    return make_result<T>(x.shape(), std::move(out), {&x}, op, [d](Node<T>& self) {
        auto& p = *self.parents[0];
        T* gx = p.grad_buffer().data();
        const T* g = self.grad.data();
        const T* xv = p.value.data();
        const T* y = self.value.data();
        for (std::size_t i = 0; i < self.value.size(); ++i) gx[i] += g[i] * d(xv[i], y[i]);
    });
}

template <typename T>
T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
bool is_integer(T v) {
    return std::nearbyint(v) == v;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
        [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    for (T v : b.data())
        if (v == T(0)) throw DomainError("div: division by zero");
    return binary(
        a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T x, T y, T) { return -x / (y * y); });
}

template <typename T>
Tensor<T> pow(const Tensor<T>& a, const Tensor<T>& b) {
    Shape s = broadcast_shapes(a.shape(), b.shape());
    const T* av = a.data().data();
    const T* bv = b.data().data();
    bool bad = false;
    for_each_broadcast(s, a.shape(), b.shape(), [&](std::size_t, std::size_t i, std::size_t j) {
        if (av[i] < T(0) && !is_integer(bv[j])) bad = true;
        if (av[i] == T(0) && bv[j] < T(0)) bad = true;
    });
    if (bad) throw DomainError("pow: negative base with non-integer exponent, or 0^negative");
    if (b.requires_grad()) {
        for (T v : a.data())
            if (v <= T(0)) throw DomainError("pow: exponent gradient needs a positive base");
    }
    return binary(
        a, b, "pow", [](T x, T y) { return std::pow(x, y); },
        [](T x, T y, T) { return y == T(0) ? T(0) : y * std::pow(x, y - T(1)); },
        [](T x, T, T out) { return x > T(0) ? out * std::log(x) : T(0); });
}

template <typename T>
Tensor<T> pow(const Tensor<T>& a, std::type_identity_t<T> exponent) {
    return pow(a, Tensor<T>::scalar(exponent));
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return unary(x, "neg", [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    for (T v : x.data())
        if (!(v > T(0))) throw DomainError("log: non-positive argument");
    return unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary(x, "sigmoid", [](T v) { return stable_sigmoid(v); },
                 [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
    return unary(x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return unary(x, "relu", [](T v) { return v > T(0) ? v : T(0); },
                 [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, std::type_identity_t<T> slope) {
    return unary(x, "leaky_relu", [slope](T v) { return v > T(0) ? v : slope * v; },
                 [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    return unary(
        x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
        [](T v, T) {
            return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) +
                   v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
    return unary(x, "abs", [](T v) { return std::abs(v); },
                 [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    return unary(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    for (T v : x.data())
        if (v < T(0)) throw DomainError("sqrt: negative argument");
    return unary(x, "sqrt", [](T v) { return std::sqrt(v); },
                 [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, std::type_identity_t<T> c) {
    return unary(x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, std::type_identity_t<T> c) {
    return unary(x, "mul_scalar", [c](T v) { return v * c; }, [c](T, T) { return c; });
}

// ---- reductions ------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    return make_result<T>({}, {acc}, {&x}, "sum", [](Node<T>& self) {
        auto& p = *self.parents[0];
        const T g = self.grad[0];
        for (auto& gx : p.grad_buffer()) gx += g;
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis, bool keepdim) {
    detail::require(axis < x.rank(), "sum: axis out of range");
    const auto sp = detail::split_axis(x.shape(), axis);
    std::vector<T> out(sp.outer * sp.inner, T(0));
    const T* xv = x.data().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < sp.extent; ++k) {
            const T* src = xv + (o * sp.extent + k) * sp.inner;
            T* dst = out.data() + o * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
    Shape s = x.shape();
    if (keepdim)
        s[axis] = 1;
    else
        s.erase(s.begin() + long(axis));
    return make_result<T>(s, std::move(out), {&x}, "sum_axis", [sp](Node<T>& self) {
        auto& p = *self.parents[0];
        T* gx = p.grad_buffer().data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t k = 0; k < sp.extent; ++k) {
                const T* g = self.grad.data() + o * sp.inner;
                T* dst = gx + (o * sp.extent + k) * sp.inner;
                for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += g[i];
            }
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw ShapeError("mean of empty tensor");
    return mul_scalar(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis, bool keepdim) {
    detail::require(axis < x.rank() && x.dim(axis) > 0, "mean: bad axis");
    return mul_scalar(sum(x, axis, keepdim), T(1) / T(x.dim(axis)));
}

#define FUNDUS_INSTANTIATE_ELEMENTWISE(T)                                                 \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> pow(const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> pow(const Tensor<T>&, T);                                        \
    template Tensor<T> neg(const Tensor<T>&);                                           \
    template Tensor<T> exp(const Tensor<T>&);                                           \
    template Tensor<T> log(const Tensor<T>&);                                           \
    template Tensor<T> sigmoid(const Tensor<T>&);                                       \
    template Tensor<T> tanh(const Tensor<T>&);                                          \
    template Tensor<T> relu(const Tensor<T>&);                                          \
    template Tensor<T> leaky_relu(const Tensor<T>&, T);                                 \
    template Tensor<T> gelu(const Tensor<T>&);                                          \
    template Tensor<T> abs(const Tensor<T>&);                                           \
    template Tensor<T> square(const Tensor<T>&);                                        \
    template Tensor<T> sqrt(const Tensor<T>&);                                          \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                 \
    template Tensor<T> mul_scalar(const Tensor<T>&, T);                                 \
    template Tensor<T> sum(const Tensor<T>&);                                           \
    template Tensor<T> sum(const Tensor<T>&, std::size_t, bool);                        \
    template Tensor<T> mean(const Tensor<T>&);                                          \
    template Tensor<T> mean(const Tensor<T>&, std::size_t, bool);

FUNDUS_INSTANTIATE_ELEMENTWISE(float)
FUNDUS_INSTANTIATE_ELEMENTWISE(double)

}  // namespace fundus::ad
