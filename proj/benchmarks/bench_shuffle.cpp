#include <dynshuffle/dynshuffle.hpp>

#include <benchmark/benchmark.h>

#include <algorithm>
#include <numeric>

using namespace dynshuffle;

namespace {

PermutationMatrix random_perm(std::size_t n, Rng& rng) {
    std::vector<std::size_t> m(n);
    std::iota(m.begin(), m.end(), 0);
    std::shuffle(m.begin(), m.end(), rng);
    return PermutationMatrix(m);
}

// Dense C×C product against the index gather, at the full-size shuffle widths.
void BM_ChannelMatmul(benchmark::State& state) {
    const std::size_t c = state.range(0);
    Rng rng(1);
    const Tensor dense = random_perm(c, rng).dense();
    const Tensor f = normal_tensor({1, c, 32, 32}, 1.0f, rng);
    for (auto _ : state) benchmark::DoNotOptimize(apply_channel_matrix(dense, f));
}

void BM_ChannelShift(benchmark::State& state) {
    const std::size_t c = state.range(0);
    Rng rng(1);
    const PermutationMatrix p = random_perm(c, rng);
    const Tensor f = normal_tensor({1, c, 32, 32}, 1.0f, rng);
    for (auto _ : state) benchmark::DoNotOptimize(apply_shift(p, f));
}

void BM_DynshuffleForward(benchmark::State& state) {
    const AuxNetConfig cfg = generator_config(GeneratorNet::v1_g3, static_cast<int>(state.range(0)));
    Rng rng(2);
    AuxNetState st(cfg, rng);
    const Tensor f = normal_tensor({8, cfg.input_channels, 8, 8}, 1.0f, rng);
    for (auto _ : state) benchmark::DoNotOptimize(dynshuffle_forward(f, st, cfg, Mode::eval).output);
}

void BM_ComposeSelection(benchmark::State& state) {
    const AuxNetConfig cfg = generator_config(GeneratorNet::v1_g3, static_cast<int>(state.range(0)));
    std::vector<std::size_t> s1(cfg.m1_rows), s2(cfg.m2_rows);
    std::iota(s1.begin(), s1.end(), 0);
    std::iota(s2.begin(), s2.end(), 0);
    for (auto _ : state) benchmark::DoNotOptimize(compose_selection(s1, s2, cfg));
}

}  // namespace

BENCHMARK(BM_ChannelMatmul)->Arg(58)->Arg(60)->Arg(120)->Arg(240)->Arg(384);
BENCHMARK(BM_ChannelShift)->Arg(58)->Arg(60)->Arg(120)->Arg(240)->Arg(384);
BENCHMARK(BM_DynshuffleForward)->DenseRange(2, 4);
BENCHMARK(BM_ComposeSelection)->DenseRange(2, 4);
