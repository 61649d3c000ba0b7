#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "fundus/kernels.hpp"

using namespace fundus::kernels;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(-1, 1);
    std::vector<T> v(n);
    for (auto& x : v) x = T(d(rng));
    return v;
}

}  // namespace

TEST(Kernels, GemmParallelMatchesSerialReference) {
    std::mt19937_64 rng(3);
    for (auto [M, N, K] : {std::tuple{1, 1, 1}, {5, 7, 3}, {33, 65, 17}, {64, 600, 300}, {7, 1, 9}}) {
        auto A = random_vec<double>(M * K, rng);
        auto B = random_vec<double>(K * N, rng);
        std::vector<double> c_ref(M * N), c_par(M * N);
        serial::gemm<double>(M, N, K, A.data(), B.data(), c_ref.data(), false);
        parallel::gemm<double>(M, N, K, A.data(), B.data(), c_par.data(), false);
        for (std::size_t i = 0; i < c_ref.size(); ++i) EXPECT_NEAR(c_ref[i], c_par[i], 1e-12);
    }
}

TEST(Kernels, GemmAccumulates) {
    std::vector<float> A{1, 2, 3, 4}, B{5, 6, 7, 8}, C{1, 1, 1, 1};
    parallel::gemm<float>(2, 2, 2, A.data(), B.data(), C.data(), true);
    EXPECT_EQ(C, (std::vector<float>{20, 23, 44, 51}));
}

TEST(Kernels, ParallelGemmIsBitwiseStableAcrossThreadCounts) {
    std::mt19937_64 rng(11);
    const std::size_t M = 97, N = 130, K = 700;
    auto A = random_vec<float>(M * K, rng);
    auto B = random_vec<float>(K * N, rng);
    std::vector<float> c1(M * N), c4(M * N);
    const int before = thread_count();
    set_thread_count(1);
    parallel::gemm<float>(M, N, K, A.data(), B.data(), c1.data(), false);
    set_thread_count(4);
    parallel::gemm<float>(M, N, K, A.data(), B.data(), c4.data(), false);
    set_thread_count(before);
    EXPECT_EQ(c1, c4);
}

TEST(Kernels, Im2colAndCol2imMatchSerial) {
    std::mt19937_64 rng(5);
    for (ConvGeometry g : {ConvGeometry{2, 5, 6, 3, 3, 1, 1}, ConvGeometry{3, 8, 8, 3, 3, 2, 1},
                           ConvGeometry{1, 4, 4, 1, 1, 1, 0}, ConvGeometry{4, 7, 5, 2, 3, 2, 0}}) {
        auto img = random_vec<double>(g.channels * g.height * g.width, rng);
        std::vector<double> c_ref(g.col_rows() * g.col_cols()), c_par(c_ref.size());
        serial::im2col(g, img.data(), c_ref.data());
        parallel::im2col(g, img.data(), c_par.data());
        EXPECT_EQ(c_ref, c_par);

        auto cols = random_vec<double>(c_ref.size(), rng);
        std::vector<double> i_ref(img.size(), 0.0), i_par(img.size(), 0.0);
        serial::col2im(g, cols.data(), i_ref.data());
        parallel::col2im(g, cols.data(), i_par.data());
        for (std::size_t i = 0; i < i_ref.size(); ++i) EXPECT_NEAR(i_ref[i], i_par[i], 1e-12);
    }
}

TEST(Kernels, Col2imIsAdjointOfIm2col) {
    // <im2col(x), c> == <x, col2im(c)>
    std::mt19937_64 rng(9);
    ConvGeometry g{3, 9, 7, 3, 3, 2, 1};
    auto x = random_vec<double>(g.channels * g.height * g.width, rng);
    auto c = random_vec<double>(g.col_rows() * g.col_cols(), rng);
    std::vector<double> cx(c.size()), xc(x.size(), 0.0);
    parallel::im2col(g, x.data(), cx.data());
    parallel::col2im(g, c.data(), xc.data());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < c.size(); ++i) lhs += cx[i] * c[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * xc[i];
    EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Kernels, TransposeMatchesSerial) {
    std::mt19937_64 rng(1);
    auto src = random_vec<float>(70 * 45, rng);
    std::vector<float> a(src.size()), b(src.size());
    serial::transpose<float>(70, 45, src.data(), a.data());
    parallel::transpose<float>(70, 45, src.data(), b.data());
    EXPECT_EQ(a, b);
}
