// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "ada/tensor.hpp"

using namespace ada;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, Rng& rng, bool grad = false) {
    std::vector<double> v(rows * cols);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from({rows, cols}, std::move(v), grad);
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
    Rng rng(1);
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    Tensor a = random_matrix(n, n, rng);
    Tensor b = random_matrix(n, n, rng);
    Tape tape(false);
    for (auto _ : state) {
        Tensor c = matmul(tape, a, b);
        benchmark::DoNotOptimize(c);
    }
}
BENCHMARK(BM_Matmul)->Arg(8)->Arg(32)->Arg(128);

static void BM_MatmulBackward(benchmark::State& state) {
    Rng rng(2);
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    Tensor a = random_matrix(n, n, rng, true);
    Tensor b = random_matrix(n, n, rng, true);
    for (auto _ : state) {
        Tape tape;
        Tensor loss = sum_all(tape, matmul(tape, a, b));
        tape.backward(loss);
        benchmark::DoNotOptimize(loss);
    }
}
BENCHMARK(BM_MatmulBackward)->Arg(8)->Arg(32);

static void BM_LayerNorm(benchmark::State& state) {
    Rng rng(3);
    Tensor x = random_matrix(16, 32, rng);
    Tensor gain = Tensor::full({16, 32}, 1.0);
    Tensor bias = Tensor::zeros({16, 32});
    Tape tape(false);
    for (auto _ : state) {
        Tensor y = layer_norm(tape, x, gain, bias);
        benchmark::DoNotOptimize(y);
    }
}
BENCHMARK(BM_LayerNorm);

static void BM_SoftmaxMasked(benchmark::State& state) {
    Rng rng(4);
    std::vector<double> v(64);
    for (double& x : v) x = rng.uniform(-3.0, 3.0);
    Tensor scores = Tensor::from({64}, std::move(v));
    std::vector<bool> keep(64, true);
    for (std::size_t i = 0; i < 64; i += 3) keep[i] = false;
    Tape tape(false);
    for (auto _ : state) {
        Tensor y = softmax_masked(tape, scores, &keep);
        benchmark::DoNotOptimize(y);
    }
}
BENCHMARK(BM_SoftmaxMasked);

BENCHMARK_MAIN();
