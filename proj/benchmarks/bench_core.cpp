#include <benchmark/benchmark.h>

#include "tsae/sae.hpp"
#include "tsae/training.hpp"

using namespace tsae;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(r, c);
  for (float& v : m.values()) v = static_cast<float>(rng.normal());
  return m;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256)->Arg(512);

void BM_LmForward(benchmark::State& state) {
  Rng rng(3);
  const auto lm = init_lm(LmConfig{}, rng);
  std::vector<TokenId> tokens{0};
  for (std::size_t i = 1; i < lm.config.ctx_len; ++i) tokens.push_back(static_cast<TokenId>(1 + rng.below(255)));
  for (auto _ : state) benchmark::DoNotOptimize(lm_forward(lm, std::span<const TokenId>(tokens)));
}
BENCHMARK(BM_LmForward);

void BM_SaeStep(benchmark::State& state) {
  SaeConfig cfg;
  cfg.d_model = 64;
  cfg.expansion = 8;
  cfg.variant = state.range(0) ? SaeVariant::vanilla : SaeVariant::topk;
  cfg.lambda = 1e-3;
  cfg.tokenized = true;
  const Matrix table = random_matrix(256, 64, 4);
  Rng rng(5);
  const auto sae = init_sae(cfg, &table, rng);
  const auto acts = random_matrix(1024, 64, 6);
  std::vector<TokenId> toks(1024);
  for (auto& t : toks) t = static_cast<TokenId>(rng.below(256));
  for (auto _ : state) {
    const auto fwd = forward_batch(sae.params, acts, toks, cfg);
    benchmark::DoNotOptimize(backward(sae.params, acts, toks, cfg, fwd));
  }
  state.SetLabel(to_string(cfg.variant));
}
BENCHMARK(BM_SaeStep)->Arg(0)->Arg(1);

}  // namespace

BENCHMARK_MAIN();
