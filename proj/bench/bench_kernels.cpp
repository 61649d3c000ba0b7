// Serial reference kernels against their OpenMP counterparts.
//
//   ./bench_kernels --benchmark_filter=Gemm
//   OMP_NUM_THREADS=4 ./bench_kernels

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "fundus/kernels.hpp"

namespace {

using namespace fundus;

std::vector<float> random_buffer(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

template <bool Parallel>
void Gemm(benchmark::State& state) {
    const auto n = std::size_t(state.range(0));
    const auto a = random_buffer(n * n, 1), b = random_buffer(n * n, 2);
    std::vector<float> c(n * n);
    for (auto _ : state) {
        if constexpr (Parallel)
            kernels::parallel::gemm(n, n, n, a.data(), b.data(), c.data(), false);
        else
            kernels::serial::gemm(n, n, n, a.data(), b.data(), c.data(), false);
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["GFLOP/s"] =
        benchmark::Counter(2.0 * double(n) * double(n) * double(n), benchmark::Counter::kIsIterationInvariantRate,
                           benchmark::Counter::kIs1000);
}
BENCHMARK(Gemm<false>)->Name("Gemm/serial")->Arg(64)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);
BENCHMARK(Gemm<true>)->Name("Gemm/parallel")->Arg(64)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

// One 3x3 convolution layer as im2col followed by gemm, the way the engine runs it.
template <bool Parallel>
void Conv3x3(benchmark::State& state) {
    const auto ch = std::size_t(state.range(0)), side = std::size_t(state.range(1));
    const kernels::ConvGeometry g{ch, side, side, 3, 3, 1, 1};
    const auto image = random_buffer(ch * side * side, 3), weight = random_buffer(ch * g.col_rows(), 4);
    std::vector<float> col(g.col_rows() * g.col_cols()), out(ch * g.col_cols());
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::parallel::im2col(g, image.data(), col.data());
            kernels::parallel::gemm(ch, g.col_cols(), g.col_rows(), weight.data(), col.data(), out.data(), false);
        } else {
            kernels::serial::im2col(g, image.data(), col.data());
            kernels::serial::gemm(ch, g.col_cols(), g.col_rows(), weight.data(), col.data(), out.data(), false);
        }
        benchmark::DoNotOptimize(out.data());
    }
}
BENCHMARK(Conv3x3<false>)->Name("Conv3x3/serial")->Args({16, 64})->Args({64, 32})->Unit(benchmark::kMillisecond);
BENCHMARK(Conv3x3<true>)->Name("Conv3x3/parallel")->Args({16, 64})->Args({64, 32})->Unit(benchmark::kMillisecond);

template <bool Parallel>
void Col2im(benchmark::State& state) {
    const kernels::ConvGeometry g{32, 64, 64, 3, 3, 1, 1};
    const auto col = random_buffer(g.col_rows() * g.col_cols(), 5);
    std::vector<float> image(32 * 64 * 64);
    for (auto _ : state) {
        std::fill(image.begin(), image.end(), 0.0f);
        if constexpr (Parallel)
            kernels::parallel::col2im(g, col.data(), image.data());
        else
            kernels::serial::col2im(g, col.data(), image.data());
        benchmark::DoNotOptimize(image.data());
    }
}
BENCHMARK(Col2im<false>)->Name("Col2im/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(Col2im<true>)->Name("Col2im/parallel")->Unit(benchmark::kMillisecond);

template <bool Parallel>
void Transpose(benchmark::State& state) {
    const std::size_t r = 768, c = 3072;
    const auto src = random_buffer(r * c, 6);
    std::vector<float> dst(r * c);
    for (auto _ : state) {
        if constexpr (Parallel)
            kernels::parallel::transpose(r, c, src.data(), dst.data());
        else
            kernels::serial::transpose(r, c, src.data(), dst.data());
        benchmark::DoNotOptimize(dst.data());
    }
}
BENCHMARK(Transpose<false>)->Name("Transpose/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(Transpose<true>)->Name("Transpose/parallel")->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
