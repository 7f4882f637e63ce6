// Parallel kernels against their serial references, at the shapes the
// model uses during training and analysis.

#include <benchmark/benchmark.h>

#include <random>

#include "arithlens/engine.hpp"
#include "arithlens/exprgen.hpp"
#include "arithlens/kernels.hpp"
#include "arithlens/model.hpp"

using namespace arithlens;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Matrix m(rows, cols);
    for (auto& v : m.values()) v = g(rng);
    return m;
}

// rows = tokens in a packed batch (32 sequences of ~8 tokens), k x m = weight shape
template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto k = static_cast<std::size_t>(state.range(1));
    const auto m = static_cast<std::size_t>(state.range(2));
    const auto a = random_matrix(n, k, 1), b = random_matrix(k, m, 2);
    Matrix c(n, m);
    for (auto _ : state) {
        if constexpr (Parallel) kernels::matmul(a.ref(), b.ref(), c.ref());
        else kernels::matmul_serial(a.ref(), b.ref(), c.ref());
        benchmark::DoNotOptimize(c.values().data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * k * m));
}

template <bool Parallel>
void BM_MatmulBt(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto k = static_cast<std::size_t>(state.range(1));
    const auto m = static_cast<std::size_t>(state.range(2));
    const auto a = random_matrix(n, k, 3), b = random_matrix(m, k, 4);
    Matrix c(n, m);
    for (auto _ : state) {
        if constexpr (Parallel) kernels::matmul_bt(a.ref(), b.ref(), c.ref());
        else kernels::matmul_bt_serial(a.ref(), b.ref(), c.ref());
        benchmark::DoNotOptimize(c.values().data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * k * m));
}

template <bool Parallel>
void BM_MatmulAtAcc(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto k = static_cast<std::size_t>(state.range(1));
    const auto m = static_cast<std::size_t>(state.range(2));
    const auto a = random_matrix(n, k, 5), b = random_matrix(n, m, 6);
    Matrix c(k, m, 0.0);
    for (auto _ : state) {
        if constexpr (Parallel) kernels::matmul_at_acc(a.ref(), b.ref(), c.ref());
        else kernels::matmul_at_acc_serial(a.ref(), b.ref(), c.ref());
        benchmark::DoNotOptimize(c.values().data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * k * m));
}

template <bool Parallel>
void BM_PairwiseDistances(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto x = random_matrix(n, 128, 7);
    Matrix d(n, n);
    for (auto _ : state) {
        if constexpr (Parallel) kernels::pairwise_distances(x.ref(), x.ref(), d.ref());
        else kernels::pairwise_distances_serial(x.ref(), x.ref(), d.ref());
        benchmark::DoNotOptimize(d.values().data());
    }
}

void BM_TrainingStep(benchmark::State& state) {
    const auto model = ModelBundle::initialized(ModelConfig{});
    const auto data = enumerate_default_dataset();
    engine::Batch batch;
    std::vector<int> targets;
    for (std::size_t i = 0; i < 32; ++i) {
        auto tokens = tokenize(data[i * 211].text);
        tokens.push_back(static_cast<int>(data[i * 211].final_value));
        batch.add(std::span<const int>(tokens).first(tokens.size() - 1));
        targets.insert(targets.end(), tokens.begin() + 1, tokens.end());
    }
    engine::Tape tape;
    std::vector<double> grad(model.parameters().size());
    for (auto _ : state) {
        std::fill(grad.begin(), grad.end(), 0.0);
        benchmark::DoNotOptimize(engine::loss_and_grad(model, batch, targets, tape, grad));
    }
}

#define GEMM_SHAPES Args({256, 128, 128})->Args({256, 128, 512})->Args({256, 512, 128})->Args({256, 128, 172})

BENCHMARK(BM_Matmul<true>)->GEMM_SHAPES;
BENCHMARK(BM_Matmul<false>)->GEMM_SHAPES;
BENCHMARK(BM_MatmulBt<true>)->GEMM_SHAPES;
BENCHMARK(BM_MatmulBt<false>)->GEMM_SHAPES;
BENCHMARK(BM_MatmulAtAcc<true>)->GEMM_SHAPES;
BENCHMARK(BM_MatmulAtAcc<false>)->GEMM_SHAPES;
BENCHMARK(BM_PairwiseDistances<true>)->Arg(512)->Arg(2048);
BENCHMARK(BM_PairwiseDistances<false>)->Arg(512)->Arg(2048);
BENCHMARK(BM_TrainingStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
