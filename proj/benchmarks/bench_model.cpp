#include <benchmark/benchmark.h>

#include "forge15/checkpoint.hpp"
#include "forge15/model.hpp"
#include "forge15/rng.hpp"

using namespace forge15;

namespace {

ModelConfig bench_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.d_ff = 64;
    cfg.vocab_size = 264;
    cfg.max_seq_len = 256;
    return cfg;
}

TokenBatch random_batch(int len, uint64_t seed) {
    Rng rng(seed);
    TokenBatch b;
    for (int t = 0; t < len; ++t) {
        b.tokens.push_back(static_cast<int>(rng.bounded(256)));
        b.doc_ids.push_back(0);
        b.loss_mask.push_back(1);
    }
    return b;
}

}  // namespace

static void BM_forward(benchmark::State& state) {
    const auto len = static_cast<int>(state.range(0));
    const Checkpoint ckpt = init_checkpoint(bench_config(), 1);
    const TokenBatch batch = random_batch(len, 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(forward(ckpt, batch));
    }
    state.SetItemsProcessed(state.iterations() * len);
}
BENCHMARK(BM_forward)->Arg(64)->Arg(128)->Arg(256);

static void BM_grad(benchmark::State& state) {
    const auto len = static_cast<int>(state.range(0));
    const Checkpoint ckpt = init_checkpoint(bench_config(), 1);
    const TokenBatch batch = random_batch(len, 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(grad(ckpt, batch));
    }
    state.SetItemsProcessed(state.iterations() * len);
}
BENCHMARK(BM_grad)->Arg(64)->Arg(128);

static void BM_sample(benchmark::State& state) {
    const auto new_tokens = static_cast<int>(state.range(0));
    const Checkpoint ckpt = init_checkpoint(bench_config(), 1);
    const std::vector<int> prompt = {256, 258, 'h', 'i', 259};
    uint64_t seed = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(sample(ckpt, prompt, 1.0, 0.95, new_tokens, seed++));
    }
    state.SetItemsProcessed(state.iterations() * new_tokens);
}
BENCHMARK(BM_sample)->Arg(32)->Arg(128);
