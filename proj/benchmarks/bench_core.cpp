#include <benchmark/benchmark.h>

#include "thermosr/autodiff.hpp"
#include "thermosr/rng.hpp"

using namespace thermosr;

static Tensor random_tensor(std::vector<int> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
    return t;
}

static void BM_MatmulForwardBackward(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    Rng rng(1);
    auto a = ad::leaf(random_tensor({n, n}, rng), true);
    auto b = ad::leaf(random_tensor({n, n}, rng), true);
    for (auto _ : state) {
        auto y = ad::mean_all(ad::matmul(a, b));
        ad::backward(y);
        a->zero_grad();
        b->zero_grad();
        benchmark::DoNotOptimize(y->value.data[0]);
    }
}
BENCHMARK(BM_MatmulForwardBackward)->Arg(64)->Arg(128)->Arg(256);

BENCHMARK_MAIN();
