#include "fundus/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstring>

namespace fundus::kernels {

namespace serial {

template <typename T>
void gemm(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
          bool accumulate) {
    for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t j = 0; j < N; ++j) {
            T acc = accumulate ? C[i * N + j] : T(0);
            for (std::size_t p = 0; p < K; ++p) acc += A[i * K + p] * B[p * N + j];
            C[i * N + j] = acc;
        }
    }
}

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const std::size_t row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                for (std::size_t y = 0; y < oh; ++y)
                    for (std::size_t x = 0; x < ow; ++x) {
                        const long iy = long(y * g.stride + ky) - long(g.padding);
                        const long ix = long(x * g.stride + kx) - long(g.padding);
                        const bool inside =
                            iy >= 0 && ix >= 0 && iy < long(g.height) && ix < long(g.width);
                        col[row * oh * ow + y * ow + x] =
                            inside ? image[(c * g.height + iy) * g.width + ix] : T(0);
                    }
            }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* image) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const std::size_t row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                for (std::size_t y = 0; y < oh; ++y)
                    for (std::size_t x = 0; x < ow; ++x) {
                        const long iy = long(y * g.stride + ky) - long(g.padding);
                        const long ix = long(x * g.stride + kx) - long(g.padding);
                        if (iy >= 0 && ix >= 0 && iy < long(g.height) && ix < long(g.width))
                            image[(c * g.height + iy) * g.width + ix] +=
                                col[row * oh * ow + y * ow + x];
                    }
            }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace serial

namespace parallel {

namespace {

constexpr std::size_t kBlockN = 512;
constexpr std::size_t kBlockK = 256;
constexpr std::size_t kRows = 4;
constexpr std::size_t kParallelWork = 1u << 15;

// Accumulates rows [i0, i0+nr) of C over the (k0..k1, j0..j1) block.
template <typename T>
inline void row_block(std::size_t i0, std::size_t nr, std::size_t j0, std::size_t j1,
                      std::size_t k0, std::size_t k1, std::size_t N, std::size_t K,
                      const T* __restrict A, const T* __restrict B, T* __restrict C) {
    const std::size_t nj = j1 - j0;
    if (nr == kRows) {
        T* __restrict c0 = C + (i0 + 0) * N + j0;
        T* __restrict c1 = C + (i0 + 1) * N + j0;
        T* __restrict c2 = C + (i0 + 2) * N + j0;
        T* __restrict c3 = C + (i0 + 3) * N + j0;
        for (std::size_t p = k0; p < k1; ++p) {
            const T a0 = A[(i0 + 0) * K + p];
            const T a1 = A[(i0 + 1) * K + p];
            const T a2 = A[(i0 + 2) * K + p];
            const T a3 = A[(i0 + 3) * K + p];
            const T* __restrict b = B + p * N + j0;
            for (std::size_t j = 0; j < nj; ++j) {
                const T bj = b[j];
                c0[j] += a0 * bj;
                c1[j] += a1 * bj;
                c2[j] += a2 * bj;
                c3[j] += a3 * bj;
            }
        }
        return;
    }
    for (std::size_t r = 0; r < nr; ++r) {
        T* __restrict c = C + (i0 + r) * N + j0;
        for (std::size_t p = k0; p < k1; ++p) {
            const T a = A[(i0 + r) * K + p];
            const T* __restrict b = B + p * N + j0;
            for (std::size_t j = 0; j < nj; ++j) c[j] += a * b[j];
        }
    }
}

}  // namespace

template <typename T>
void gemm(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
          bool accumulate) {
    if (!accumulate) std::fill(C, C + M * N, T(0));
    if (M == 0 || N == 0 || K == 0) return;
    const long row_groups = long((M + kRows - 1) / kRows);
    const bool go_parallel = M * N * K >= kParallelWork && omp_get_max_threads() > 1;
    for (std::size_t j0 = 0; j0 < N; j0 += kBlockN) {
        const std::size_t j1 = std::min(N, j0 + kBlockN);
        for (std::size_t k0 = 0; k0 < K; k0 += kBlockK) {
            const std::size_t k1 = std::min(K, k0 + kBlockK);
#pragma omp parallel for schedule(static) if (go_parallel)
            for (long g = 0; g < row_groups; ++g) {
                const std::size_t i0 = std::size_t(g) * kRows;
                row_block(i0, std::min(kRows, M - i0), j0, j1, k0, k1, N, K, A, B, C);
            }
        }
    }
}

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const long rows = long(g.col_rows());
    const std::size_t kk = g.kernel_h * g.kernel_w;
#pragma omp parallel for schedule(static) if (std::size_t(rows) * oh * ow >= kParallelWork)
    for (long row = 0; row < rows; ++row) {
        const std::size_t c = std::size_t(row) / kk;
        const std::size_t ky = (std::size_t(row) % kk) / g.kernel_w;
        const std::size_t kx = std::size_t(row) % g.kernel_w;
        T* out = col + std::size_t(row) * oh * ow;
        const T* plane = image + c * g.height * g.width;
        for (std::size_t y = 0; y < oh; ++y) {
            const long iy = long(y * g.stride + ky) - long(g.padding);
            T* dst = out + y * ow;
            if (iy < 0 || iy >= long(g.height)) {
                std::fill(dst, dst + ow, T(0));
                continue;
            }
            const T* src_row = plane + std::size_t(iy) * g.width;
            for (std::size_t x = 0; x < ow; ++x) {
                const long ix = long(x * g.stride + kx) - long(g.padding);
                dst[x] = (ix >= 0 && ix < long(g.width)) ? src_row[ix] : T(0);
            }
        }
    }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* image) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const long channels = long(g.channels);
    // Each thread owns whole channel planes, so no two threads write the same pixel.
#pragma omp parallel for schedule(static) if (g.col_rows() * oh * ow >= kParallelWork)
    for (long c = 0; c < channels; ++c) {
        T* plane = image + std::size_t(c) * g.height * g.width;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const std::size_t row = (std::size_t(c) * g.kernel_h + ky) * g.kernel_w + kx;
                const T* src = col + row * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const long iy = long(y * g.stride + ky) - long(g.padding);
                    if (iy < 0 || iy >= long(g.height)) continue;
                    T* dst_row = plane + std::size_t(iy) * g.width;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const long ix = long(x * g.stride + kx) - long(g.padding);
                        if (ix >= 0 && ix < long(g.width)) dst_row[ix] += src[y * ow + x];
                    }
                }
            }
    }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
    constexpr std::size_t tile = 32;
    const long row_tiles = long((rows + tile - 1) / tile);
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
    for (long rt = 0; rt < row_tiles; ++rt) {
        const std::size_t r0 = std::size_t(rt) * tile, r1 = std::min(rows, r0 + tile);
        for (std::size_t c0 = 0; c0 < cols; c0 += tile) {
            const std::size_t c1 = std::min(cols, c0 + tile);
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
        }
    }
}

template <typename T>
void axpy(std::size_t n, T a, const T* __restrict x, T* __restrict y) {
#pragma omp parallel for schedule(static) if (n >= kParallelWork)
    for (long i = 0; i < long(n); ++i) y[i] += a * x[i];
}

}  // namespace parallel

int thread_count() { return omp_get_max_threads(); }
void set_thread_count(int n) { omp_set_num_threads(n < 1 ? 1 : n); }

#define FUNDUS_INSTANTIATE_KERNELS(NS, T)                                                   \
    template void NS::gemm<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, \
                              bool);                                                         \
    template void NS::im2col<T>(const ConvGeometry&, const T*, T*);                          \
    template void NS::col2im<T>(const ConvGeometry&, const T*, T*);                          \
    template void NS::transpose<T>(std::size_t, std::size_t, const T*, T*);

FUNDUS_INSTANTIATE_KERNELS(serial, float)
FUNDUS_INSTANTIATE_KERNELS(serial, double)
FUNDUS_INSTANTIATE_KERNELS(parallel, float)
FUNDUS_INSTANTIATE_KERNELS(parallel, double)
template void parallel::axpy<float>(std::size_t, float, const float*, float*);
template void parallel::axpy<double>(std::size_t, double, const double*, double*);

}  // namespace fundus::kernels
