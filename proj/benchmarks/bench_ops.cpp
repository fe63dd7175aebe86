#include <dynshuffle/models.hpp>
#include <dynshuffle/ops.hpp>
#include <dynshuffle/tape.hpp>

#include <benchmark/benchmark.h>

using namespace dynshuffle;

namespace {

void BM_GroupedConv1x1(benchmark::State& state) {
    const std::size_t c = state.range(0), g = state.range(1);
    Rng rng(1);
    const Tensor x = normal_tensor({8, c, 16, 16}, 1.0f, rng);
    const Tensor w = normal_tensor({c, c / g, 1, 1}, 0.1f, rng);
    for (auto _ : state) benchmark::DoNotOptimize(conv2d_grouped(x, w, g, 1, 0));
}

void BM_DepthwiseConv3x3(benchmark::State& state) {
    const std::size_t c = state.range(0);
    Rng rng(1);
    const Tensor x = normal_tensor({8, c, 16, 16}, 1.0f, rng);
    const Tensor w = normal_tensor({c, 1, 3, 3}, 0.1f, rng);
    for (auto _ : state) benchmark::DoNotOptimize(conv2d_grouped(x, w, c, 1, 1));
}

// One forward/backward step of the desk-scale model on a batch of 32.
void BM_TinyTrainStep(benchmark::State& state) {
    ModelConfig cfg = model_preset("v1-tiny");
    cfg.shuffle = state.range(0) ? ShuffleMode::dynamic : ShuffleMode::manual;
    auto model = build_model(cfg);
    Rng rng(3);
    const Tensor x = normal_tensor({32, 3, 32, 32}, 1.0f, rng);
    std::vector<std::int32_t> labels(32);
    for (std::size_t i = 0; i < 32; ++i) labels[i] = static_cast<std::int32_t>(i % 10);
    for (auto _ : state) {
        Tape tape;
        Tensor loss;
        {
            Tape::Recording rec(tape);
            ForwardContext ctx;
            loss = cross_entropy_mean(model->forward(x, ctx), labels);
        }
        tape.backward(loss);
    }
}

}  // namespace

BENCHMARK(BM_GroupedConv1x1)->Args({48, 3})->Args({96, 3})->Args({240, 3});
BENCHMARK(BM_DepthwiseConv3x3)->Arg(24)->Arg(60);
BENCHMARK(BM_TinyTrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
