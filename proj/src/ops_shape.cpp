#include <algorithm>
#include <numeric>

#include "ops_common.hpp"

namespace fundus::ad {

using detail::make_result;
using detail::require;

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    require(numel(shape) == x.numel(),
            "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<T> v(x.data().begin(), x.data().end());
    return make_result<T>(std::move(shape), std::move(v), {&x}, "reshape", [](Node<T>& self) {
        auto& p = *self.parents[0];
        auto gx = p.grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    });
}

namespace {

// Gather map: out[i] = in[src[i]] for a permutation of axes.
std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& axes,
                                       Shape& out_shape) {
    const std::size_t r = in.size();
    out_shape.resize(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[axes[i]];
    const auto in_st = detail::strides_of(in);
    std::vector<std::size_t> st(r);
    for (std::size_t i = 0; i < r; ++i) st[i] = in_st[axes[i]];
    std::vector<std::size_t> map(numel(in));
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < map.size(); ++o) {
        map[o] = off;
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            off += st[ax];
            if (idx[ax] < out_shape[ax]) break;
            off -= st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    return map;
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    require(axes.size() == x.rank(), "permute: axes rank mismatch");
    std::vector<std::size_t> sorted = axes;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
        require(sorted[i] == i, "permute: axes are not a permutation");
    Shape out_shape;
    auto map = permute_index(x.shape(), axes, out_shape);
    std::vector<T> v(map.size());
    const T* xv = x.data().data();
    for (std::size_t o = 0; o < v.size(); ++o) v[o] = xv[map[o]];
    return make_result<T>(out_shape, std::move(v), {&x}, "permute",
                          [map = std::move(map)](Node<T>& self) {
                              T* gx = self.parents[0]->grad_buffer().data();
                              for (std::size_t o = 0; o < map.size(); ++o) gx[map[o]] += self.grad[o];
                          });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t a0, std::size_t a1) {
    require(a0 < x.rank() && a1 < x.rank(), "transpose: axis out of range");
    std::vector<std::size_t> axes(x.rank());
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[a0], axes[a1]);
    return permute(x, axes);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
    require(axis < x.rank(), "slice: axis out of range");
    require(start + length <= x.dim(axis), "slice: range exceeds extent");
    const auto sp = detail::split_axis(x.shape(), axis);
    Shape s = x.shape();
    s[axis] = length;
    std::vector<T> v(sp.outer * length * sp.inner);
    const T* xv = x.data().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(xv + (o * sp.extent + start) * sp.inner, length * sp.inner,
                    v.data() + o * length * sp.inner);
    return make_result<T>(s, std::move(v), {&x}, "slice", [sp, start, length](Node<T>& self) {
        T* gx = self.parents[0]->grad_buffer().data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            const T* g = self.grad.data() + o * length * sp.inner;
            T* dst = gx + (o * sp.extent + start) * sp.inner;
            for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += g[i];
        }
    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    require(!parts.empty(), "concat: no inputs");
    const Shape& first = parts.front().shape();
    require(axis < first.size(), "concat: axis out of range");
    std::size_t total = 0;
    for (const auto& p : parts) {
        require(p.rank() == first.size(), "concat: rank mismatch");
        for (std::size_t i = 0; i < first.size(); ++i)
            if (i != axis)
                require(p.dim(i) == first[i], "concat: extent mismatch " + shape_str(p.shape()) +
                                                  " vs " + shape_str(first));
        total += p.dim(axis);
    }
    Shape s = first;
    s[axis] = total;
    const auto sp = detail::split_axis(s, axis);
    std::vector<T> v(numel(s));
    std::vector<std::size_t> extents;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t e = p.dim(axis);
        extents.push_back(e);
        const T* pv = p.data().data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(pv + o * e * sp.inner, e * sp.inner,
                        v.data() + (o * total + offset) * sp.inner);
        offset += e;
    }
    return detail::make_result_n<T>(
        s, std::move(v), parts, "concat", [sp, total, extents](Node<T>& self) {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                auto& p = *self.parents[k];
                const std::size_t e = extents[k];
                if (p.requires_grad) {
                    T* gx = p.grad_buffer().data();
                    for (std::size_t o = 0; o < sp.outer; ++o) {
                        const T* g = self.grad.data() + (o * total + offset) * sp.inner;
                        T* dst = gx + o * e * sp.inner;
                        for (std::size_t i = 0; i < e * sp.inner; ++i) dst[i] += g[i];
                    }
                }
                offset += e;
            }
        });
}

#define FUNDUS_INSTANTIATE_SHAPE(T)                                                    \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                             \
    template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);   \
    template Tensor<T> transpose(const Tensor<T>&, std::size_t, std::size_t);         \
    template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t); \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);

FUNDUS_INSTANTIATE_SHAPE(float)
FUNDUS_INSTANTIATE_SHAPE(double)

}  // namespace fundus::ad
