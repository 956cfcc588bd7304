#include <benchmark/benchmark.h>

#include "forge15/checkpoint.hpp"

using namespace forge15;

namespace {

ModelConfig bench_config() {
    ModelConfig cfg;
    cfg.n_layers = 4;
    cfg.d_model = 64;
    cfg.n_heads = 8;
    cfg.d_ff = 128;
    cfg.vocab_size = 264;
    cfg.max_seq_len = 256;
    return cfg;
}

}  // namespace

static void BM_serialize(benchmark::State& state) {
    const Checkpoint ckpt = init_checkpoint(bench_config(), 1);
    for (auto _ : state) {
        benchmark::DoNotOptimize(serialize_checkpoint(ckpt));
    }
}
BENCHMARK(BM_serialize);

static void BM_fingerprint(benchmark::State& state) {
    const Checkpoint ckpt = init_checkpoint(bench_config(), 1);
    for (auto _ : state) {
        benchmark::DoNotOptimize(fingerprint(ckpt));
    }
}
BENCHMARK(BM_fingerprint);

BENCHMARK_MAIN();
