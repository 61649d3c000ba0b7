#pragma once

// Dense numeric kernels behind the tensor engine.
//
// Two implementations of every kernel live here:
//   serial::   straightforward loops, kept as the reference for tests
//   parallel:: cache-blocked, OpenMP-parallel versions used by the engine
//
// The parallel kernels partition work over output elements only, so every
// output value is produced by a fixed sequence of operations regardless of
// the thread count. Results are therefore bitwise reproducible across runs
// and thread counts (but not bitwise equal to serial::, which sums in a
// different order).

#include <cstddef>

namespace fundus::kernels {

/// Geometry of a 2-D convolution on a single image plane stack.
struct ConvGeometry {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_h() const { return (height + 2 * padding - kernel_h) / stride + 1; }
    std::size_t out_w() const { return (width + 2 * padding - kernel_w) / stride + 1; }
    std::size_t col_rows() const { return channels * kernel_h * kernel_w; }
    std::size_t col_cols() const { return out_h() * out_w(); }
};

namespace serial {

// C[M,N] = A[M,K] * B[K,N]  (C += ... when accumulate is set). Row-major.
template <typename T>
void gemm(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
          bool accumulate);

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col);

// Scatter-add of columns back onto the image (adjoint of im2col).
template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* image);

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst);

}  // namespace serial

namespace parallel {

template <typename T>
void gemm(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
          bool accumulate);

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col);

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* image);

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst);

// y[i] = a * x[i] + y[i]
template <typename T>
void axpy(std::size_t n, T a, const T* x, T* y);

}  // namespace parallel

/// Number of OpenMP threads the parallel kernels will use.
int thread_count();
void set_thread_count(int n);

}  // namespace fundus::kernels
