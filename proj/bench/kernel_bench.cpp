// Parallel kernels against their serial reference implementations on
// inference-sized workloads. Run with --benchmark_filter=conv to narrow down.
#include <benchmark/benchmark.h>

#include "dseg/ops.hpp"
#include "dseg/rng.hpp"
#include "ref/reference.hpp"

namespace {

dseg::Tensor4 random_tensor(int n, int c, int h, int w, std::uint64_t seed) {
    dseg::Tensor4 t(n, c, h, w);
    dseg::Rng rng(seed);
    for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
    return t;
}

dseg::ConvParams random_conv(int oc, int ic, int k, std::uint64_t seed, int padding) {
    dseg::ConvParams p;
    p.weight = dseg::Tensor4(oc, ic, k, k);
    dseg::Rng rng(seed);
    for (auto& v : p.weight.data) v = rng.uniform(-0.2, 0.2);
    p.bias.assign(oc, 0.01);
    p.padding = padding;
    return p;
}

const dseg::Tensor4& conv_input() {
    static const dseg::Tensor4 t = random_tensor(1, 16, 64, 64, 1);
    return t;
}

const dseg::ConvParams& conv_params() {
    static const dseg::ConvParams p = random_conv(32, 16, 3, 2, 1);
    return p;
}

const dseg::Tensor4& conv_out_grad() {
    static const dseg::Tensor4 t = random_tensor(1, 32, 64, 64, 3);
    return t;
}

}  // namespace

static void conv2d_parallel(benchmark::State& state) {
    for (auto _ : state) {
        benchmark::DoNotOptimize(dseg::conv2d(conv_input(), conv_params()));
    }
}
BENCHMARK(conv2d_parallel);

static void conv2d_serial_reference(benchmark::State& state) {
    for (auto _ : state) {
        benchmark::DoNotOptimize(dseg::ref::conv2d_naive(conv_input(), conv_params()));
    }
}
BENCHMARK(conv2d_serial_reference);

static void backward_conv2d_parallel(benchmark::State& state) {
    for (auto _ : state) {
        benchmark::DoNotOptimize(
            dseg::backward_conv2d(conv_input(), conv_params(), conv_out_grad()));
    }
}
BENCHMARK(backward_conv2d_parallel);

static void backward_conv2d_serial_reference(benchmark::State& state) {
    for (auto _ : state) {
        benchmark::DoNotOptimize(
            dseg::ref::backward_conv2d_naive(conv_input(), conv_params(), conv_out_grad()));
    }
}
BENCHMARK(backward_conv2d_serial_reference);

static void bilinear_resize_parallel(benchmark::State& state) {
    const dseg::Tensor4 in = random_tensor(1, 8, 32, 32, 4);
    for (auto _ : state) {
        benchmark::DoNotOptimize(dseg::bilinear_resize(in, 64, 64));
    }
}
BENCHMARK(bilinear_resize_parallel);

static void bilinear_resize_serial_reference(benchmark::State& state) {
    const dseg::Tensor4 in = random_tensor(1, 8, 32, 32, 4);
    for (auto _ : state) {
        benchmark::DoNotOptimize(dseg::ref::bilinear_resize_naive(in, 64, 64));
    }
}
BENCHMARK(bilinear_resize_serial_reference);

BENCHMARK_MAIN();
