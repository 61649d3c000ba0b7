#pragma once

// Internal helpers shared by the op implementations.

#include <initializer_list>
#include <string>
#include <vector>

#include "fundus/tensor.hpp"

namespace fundus::ad::detail {

/// Wires a freshly computed value into the graph. When gradient recording is
/// on and any input requires grad, the result records its parents and the
/// backward rule; otherwise it is a plain constant leaf.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs, const char* op,
                      std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool needs = false;
    if (grad_enabled())
        for (const Tensor<T>* in : inputs) needs = needs || in->requires_grad();
    if (needs) {
        node->requires_grad = true;
        for (const Tensor<T>* in : inputs) node->parents.push_back(in->node());
        node->backward_fn = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result_n(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                        const char* op, std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool needs = false;
    if (grad_enabled())
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->parents.push_back(in.node());
        node->backward_fn = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

/// Row-major strides.
inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

/// Strides of `in` viewed inside the broadcast shape `out` (0 on stretched axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> st(out.size(), 0);
    const auto base = strides_of(in);
    const std::size_t off = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i)
        st[off + i] = in[i] == 1 ? 0 : base[i];
    return st;
}

/// Visits every output index of a broadcast binary op with the matching
/// input offsets: f(out_index, a_index, b_index). Fixed visiting order.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
    const std::size_t total = numel(out);
    if (total == 0) return;
    const std::size_t r = out.size();
    if (r == 0) {
        f(std::size_t(0), std::size_t(0), std::size_t(0));
        return;
    }
    const auto sa = broadcast_strides(a, out);
    const auto sb = broadcast_strides(b, out);
    const std::size_t inner = out[r - 1];
    const std::size_t ia_step = sa[r - 1], ib_step = sb[r - 1];
    std::vector<std::size_t> idx(r, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t o = 0; o < total; o += inner) {
        std::size_t pa = oa, pb = ob;
        for (std::size_t j = 0; j < inner; ++j, pa += ia_step, pb += ib_step) f(o + j, pa, pb);
        // advance the odometer over the outer axes
        for (std::size_t ax = r - 1; ax-- > 0;) {
            ++idx[ax];
            oa += sa[ax];
            ob += sb[ax];
            if (idx[ax] < out[ax]) break;
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Splits a shape around `axis` into (outer, extent, inner) block sizes.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};
inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace fundus::ad::detail
