#include <benchmark/benchmark.h>

#include <random>

#include "expnet/attention.hpp"
#include "expnet/expansion.hpp"
#include "expnet/model.hpp"
#include "expnet/ops.hpp"

using namespace expnet;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, bool requires_grad = false) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = normal(rng);
  return Tensor({rows, cols}, std::move(v), requires_grad);
}

ModelConfig bench_config() {
  ModelConfig c;
  c.vocab_size = 30;
  return c;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  const auto a = random_matrix(n, n, rng), b = random_matrix(n, n, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

static void BM_ExpansionForward(benchmark::State& state) {
  const auto kind = static_cast<ExpansionKind>(state.range(0));
  const auto t = static_cast<std::size_t>(state.range(1));
  std::mt19937_64 rng(2);
  const auto params = ExpansionParams::init(64, {kind, kind == ExpansionKind::Static ? 16u : 4u}, rng);
  const auto x = random_matrix(t, 64, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(expansion_layer(x, params));
  state.SetLabel(to_string(kind));
}
BENCHMARK(BM_ExpansionForward)
    ->Args({static_cast<int>(ExpansionKind::Static), 16})
    ->Args({static_cast<int>(ExpansionKind::DynamicBidirectional), 16})
    ->Args({static_cast<int>(ExpansionKind::DynamicCausal), 16});

static void BM_ExpansionBackward(benchmark::State& state) {
  std::mt19937_64 rng(3);
  const auto params = ExpansionParams::init(64, {ExpansionKind::DynamicCausal, 4}, rng);
  const auto x = random_matrix(16, 64, rng, true);
  for (auto _ : state) {
    auto loss = sum(expansion_layer(x, params));
    backward(loss);
  }
}
BENCHMARK(BM_ExpansionBackward);

static void BM_AttentionForward(benchmark::State& state) {
  std::mt19937_64 rng(4);
  const auto params = AttentionParams::init(64, 4, rng);
  const auto x = random_matrix(16, 64, rng);
  const auto mask = Mask::causal(16);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(multi_head_attention(x, x, params, &mask));
}
BENCHMARK(BM_AttentionForward);

static void BM_GreedyDecode(benchmark::State& state) {
  CaptionModel model(bench_config(), 5);
  std::mt19937_64 rng(6);
  const auto features = random_matrix(4, model.config().d_feature, rng);
  for (auto _ : state) benchmark::DoNotOptimize(model.greedy_decode(features));
}
BENCHMARK(BM_GreedyDecode)->Unit(benchmark::kMillisecond);

static void BM_BeamSearch(benchmark::State& state) {
  CaptionModel model(bench_config(), 7);
  std::mt19937_64 rng(8);
  const auto features = random_matrix(4, model.config().d_feature, rng);
  const auto width = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(model.beam_search(features, width));
}
BENCHMARK(BM_BeamSearch)->Arg(2)->Arg(5)->Unit(benchmark::kMillisecond);

static void BM_XeTrainingStep(benchmark::State& state) {
  CaptionModel model(bench_config(), 9);
  std::mt19937_64 rng(10);
  const auto features = random_matrix(4, model.config().d_feature, rng);
  const TokenSequence input{kSos, 5, 6, 7, 8, 9, 10}, target{5, 6, 7, 8, 9, 10, kEos};
  for (auto _ : state) {
    model.zero_grad();
    const auto logits = model.decode_logits(input, model.encode(features));
    backward(neg(mean(pick(log_softmax_rows(logits), std::vector<std::size_t>(target.begin(), target.end())))));
  }
}
BENCHMARK(BM_XeTrainingStep)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
