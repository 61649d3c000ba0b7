#include <algorithm>

#include "fundus/kernels.hpp"
#include "ops_common.hpp"

namespace fundus::ad {

namespace k = fundus::kernels::parallel;
using detail::make_result;
using detail::require;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() >= 2 && b.rank() >= 2, "matmul: operands need rank >= 2");
    const std::size_t m = a.dim(a.rank() - 2), kk = a.dim(a.rank() - 1);
    const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    require(kk == kb, "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));

    // Either b is a plain matrix shared by every leading index of a, or both
    // carry identical leading (batch) dims.
    const bool shared_rhs = b.rank() == 2;
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < a.rank(); ++i) batch *= a.dim(i);
    if (!shared_rhs) {
        require(a.rank() == b.rank() &&
                    std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()),
                "matmul: batch dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);

    std::vector<T> out(batch * m * n);
    const T* av = a.data().data();
    const T* bv = b.data().data();
    if (shared_rhs) {
        k::gemm(batch * m, n, kk, av, bv, out.data(), false);
    } else {
        for (std::size_t s = 0; s < batch; ++s)
            k::gemm(m, n, kk, av + s * m * kk, bv + s * kk * n, out.data() + s * m * n, false);
    }

    return make_result<T>(out_shape, std::move(out), {&a, &b}, "matmul",
                          [=](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const T* g = self.grad.data();
        const std::size_t rows = shared_rhs ? batch * m : m;
        const std::size_t reps = shared_rhs ? 1 : batch;
        std::vector<T> scratch;
        for (std::size_t s = 0; s < reps; ++s) {
            const T* as = pa.value.data() + s * rows * kk;
            const T* bs = pb.value.data() + s * kk * n;
            const T* gs = g + s * rows * n;
            if (pa.requires_grad) {
                // dA += dC * B^T
                scratch.resize(n * kk);
                k::transpose(kk, n, bs, scratch.data());
                k::gemm(rows, kk, n, gs, scratch.data(), pa.grad_buffer().data() + s * rows * kk,
                        true);
            }
            if (pb.requires_grad) {
                // dB += A^T * dC
                scratch.resize(kk * rows);
                k::transpose(rows, kk, as, scratch.data());
                k::gemm(kk, n, rows, scratch.data(), gs, pb.grad_buffer().data() + s * kk * n,
                        true);
            }
        }
    });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions opt) {
    require(x.rank() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
    require(weight.rank() == 4, "conv2d: weight must be [O,C,kh,kw]");
    require(weight.dim(1) == x.dim(1), "conv2d: channel mismatch " + shape_str(x.shape()) +
                                           " vs weight " + shape_str(weight.shape()));
    require(opt.stride >= 1, "conv2d: stride must be >= 1");
    const bool has_bias = bias.defined();
    const std::size_t N = x.dim(0), O = weight.dim(0);
    kernels::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3),
                            opt.stride, opt.padding};
    require(g.height + 2 * g.padding >= g.kernel_h && g.width + 2 * g.padding >= g.kernel_w,
            "conv2d: kernel larger than padded input");
    if (has_bias) require(bias.rank() == 1 && bias.dim(0) == O, "conv2d: bias must be [O]");

    const std::size_t rows = g.col_rows(), P = g.col_cols();
    const std::size_t in_sz = g.channels * g.height * g.width;
    const bool direct = g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
    std::vector<T> out(N * O * P);
    std::vector<T> col(direct ? 0 : rows * P);
    const T* xv = x.data().data();
    const T* wv = weight.data().data();
    for (std::size_t s = 0; s < N; ++s) {
        const T* cs = xv + s * in_sz;
        if (!direct) {
            k::im2col(g, cs, col.data());
            cs = col.data();
        }
        T* os = out.data() + s * O * P;
        k::gemm(O, P, rows, wv, cs, os, false);
        if (has_bias)
            for (std::size_t o = 0; o < O; ++o) {
                const T bo = bias.data()[o];
                for (std::size_t p = 0; p < P; ++p) os[o * P + p] += bo;
            }
    }

    Shape out_shape{N, O, g.out_h(), g.out_w()};
    auto backward = [=](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        Node<T>* pb = has_bias ? self.parents[2].get() : nullptr;
        const T* gout = self.grad.data();
        std::vector<T> colbuf(direct ? 0 : rows * P), colT(P * rows), wT, dcol;
        if (px.requires_grad) {
            wT.resize(rows * O);
            k::transpose(O, rows, pw.value.data(), wT.data());
            dcol.resize(rows * P);
        }
        for (std::size_t s = 0; s < N; ++s) {
            const T* gs = gout + s * O * P;
            if (pw.requires_grad) {
                const T* cs = px.value.data() + s * in_sz;
                if (!direct) {
                    k::im2col(g, cs, colbuf.data());
                    cs = colbuf.data();
                }
                k::transpose(rows, P, cs, colT.data());
                k::gemm(O, rows, P, gs, colT.data(), pw.grad_buffer().data(), true);
            }
            if (px.requires_grad) {
                T* gx = px.grad_buffer().data() + s * in_sz;
                if (direct) {
                    k::gemm(rows, P, O, wT.data(), gs, gx, true);
                } else {
                    k::gemm(rows, P, O, wT.data(), gs, dcol.data(), false);
                    k::col2im(g, dcol.data(), gx);
                }
            }
            if (pb && pb->requires_grad) {
                T* gb = pb->grad_buffer().data();
                for (std::size_t o = 0; o < O; ++o) {
                    T acc = T(0);
                    for (std::size_t p = 0; p < P; ++p) acc += gs[o * P + p];
                    gb[o] += acc;
                }
            }
        }
    };
    if (has_bias)
        return make_result<T>(out_shape, std::move(out), {&x, &weight, &bias}, "conv2d",
                              backward);
    return make_result<T>(out_shape, std::move(out), {&x, &weight}, "conv2d", backward);
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
    require(x.rank() >= 2 && factor >= 1, "upsample_nearest: need rank >= 2 and factor >= 1");
    const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
    const std::size_t planes = x.numel() / (H * W);
    const std::size_t OH = H * factor, OW = W * factor;
    Shape s = x.shape();
    s[s.size() - 2] = OH;
    s[s.size() - 1] = OW;
    std::vector<T> v(planes * OH * OW);
    const T* xv = x.data().data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < OH; ++y) {
            const T* src = xv + (p * H + y / factor) * W;
            T* dst = v.data() + (p * OH + y) * OW;
            for (std::size_t xx = 0; xx < OW; ++xx) dst[xx] = src[xx / factor];
        }
    return make_result<T>(s, std::move(v), {&x}, "upsample_nearest",
                          [=](Node<T>& self) {
        T* gx = self.parents[0]->grad_buffer().data();
        const T* g = self.grad.data();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < OH; ++y) {
                T* dst = gx + (p * H + y / factor) * W;
                const T* src = g + (p * OH + y) * OW;
                for (std::size_t xx = 0; xx < OW; ++xx) dst[xx / factor] += src[xx];
            }
    });
}

#define FUNDUS_INSTANTIATE_LINALG(T)                                                     \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                     \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                              Conv2dOptions);                                          \
    template Tensor<T> upsample_nearest(const Tensor<T>&, std::size_t);

FUNDUS_INSTANTIATE_LINALG(float)
FUNDUS_INSTANTIATE_LINALG(double)

}  // namespace fundus::ad
