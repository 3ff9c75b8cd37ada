// Serial reference versus OpenMP kernels on shapes seen during training
// (64x64 inputs, 32-channel features, 2x2 prototype windows).

#include <benchmark/benchmark.h>

#include <vector>

#include "protoseg/kernels.hpp"
#include "protoseg/random.hpp"

using namespace protoseg;
namespace k = protoseg::kernels;

namespace {

std::vector<Real> random_buffer(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<Real> v(n);
    for (auto& x : v) x = uniform(rng, -1, 1);
    return v;
}

template <bool Parallel>
void gemm(benchmark::State& st)
{
    const int m = static_cast<int>(st.range(0)), n = m * 8, kk = m;
    const auto a = random_buffer(std::size_t(m) * kk, 1), b = random_buffer(std::size_t(kk) * n, 2);
    std::vector<Real> c(std::size_t(m) * n);
    for (auto _ : st) {
        if constexpr (Parallel) k::parallel::gemm(false, false, m, n, kk, a.data(), b.data(), c.data(), false);
        else k::serial::gemm(false, false, m, n, kk, a.data(), b.data(), c.data(), false);
        benchmark::DoNotOptimize(c.data());
    }
    st.SetItemsProcessed(st.iterations() * std::int64_t(m) * n * kk);
}

k::ConvGeometry conv3x3(int channels, int size)
{
    k::ConvGeometry g;
    g.channels = channels;
    g.height = g.width = size;
    g.kernel_h = g.kernel_w = 3;
    g.pad = 1;
    return g;
}

template <bool Parallel>
void im2col(benchmark::State& st)
{
    const auto g = conv3x3(static_cast<int>(st.range(0)), 64);
    const auto img = random_buffer(std::size_t(g.channels) * g.height * g.width, 3);
    std::vector<Real> cols(std::size_t(g.col_rows()) * g.col_cols());
    for (auto _ : st) {
        if constexpr (Parallel) k::parallel::im2col(g, img.data(), cols.data());
        else k::serial::im2col(g, img.data(), cols.data());
        benchmark::DoNotOptimize(cols.data());
    }
}

template <bool Parallel>
void cosine_maps(benchmark::State& st)
{
    const int protos = static_cast<int>(st.range(0)), dim = 32, pixels = 64 * 64;
    const auto p = random_buffer(std::size_t(protos) * dim, 4), f = random_buffer(std::size_t(dim) * pixels, 5);
    std::vector<Real> out(std::size_t(protos) * pixels);
    for (auto _ : st) {
        if constexpr (Parallel) k::parallel::cosine_maps(protos, dim, pixels, p.data(), f.data(), 20, 1e-8, out.data());
        else k::serial::cosine_maps(protos, dim, pixels, p.data(), f.data(), 20, 1e-8, out.data());
        benchmark::DoNotOptimize(out.data());
    }
}

template <bool Parallel>
void window_mean(benchmark::State& st)
{
    const int c = static_cast<int>(st.range(0)), h = 64, w = 64;
    const auto in = random_buffer(std::size_t(c) * h * w, 6);
    std::vector<Real> out(std::size_t(c) * k::window_count(h, 2) * k::window_count(w, 2));
    for (auto _ : st) {
        if constexpr (Parallel) k::parallel::window_mean(c, h, w, 2, 2, in.data(), out.data());
        else k::serial::window_mean(c, h, w, 2, 2, in.data(), out.data());
        benchmark::DoNotOptimize(out.data());
    }
}

template <bool Parallel>
void resize_bilinear(benchmark::State& st)
{
    const int c = static_cast<int>(st.range(0)), h = 32, w = 32, oh = 64, ow = 64;
    const auto in = random_buffer(std::size_t(c) * h * w, 7);
    std::vector<Real> out(std::size_t(c) * oh * ow);
    for (auto _ : st) {
        if constexpr (Parallel) k::parallel::resize_bilinear(c, h, w, oh, ow, in.data(), out.data());
        else k::serial::resize_bilinear(c, h, w, oh, ow, in.data(), out.data());
        benchmark::DoNotOptimize(out.data());
    }
}

}  // namespace

BENCHMARK(gemm<false>)->Name("gemm/serial")->Arg(32)->Arg(128);
BENCHMARK(gemm<true>)->Name("gemm/parallel")->Arg(32)->Arg(128);
BENCHMARK(im2col<false>)->Name("im2col/serial")->Arg(16)->Arg(32);
BENCHMARK(im2col<true>)->Name("im2col/parallel")->Arg(16)->Arg(32);
BENCHMARK(cosine_maps<false>)->Name("cosine_maps/serial")->Arg(2)->Arg(64);
BENCHMARK(cosine_maps<true>)->Name("cosine_maps/parallel")->Arg(2)->Arg(64);
BENCHMARK(window_mean<false>)->Name("window_mean/serial")->Arg(32);
BENCHMARK(window_mean<true>)->Name("window_mean/parallel")->Arg(32);
BENCHMARK(resize_bilinear<false>)->Name("resize_bilinear/serial")->Arg(2)->Arg(32);
BENCHMARK(resize_bilinear<true>)->Name("resize_bilinear/parallel")->Arg(2)->Arg(32);

BENCHMARK_MAIN();
