#include <benchmark/benchmark.h>

#include "attnkit/attention.hpp"
#include "attnkit/multihead.hpp"
#include "attnkit/rng.hpp"

using namespace attnkit;

namespace {

void BM_AttentionForward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const int d = 64;
  Rng rng(1);
  const Matrix q = gaussian_fill(rng, n, d, 0.0, 1.0);
  const Matrix k = gaussian_fill(rng, n, d, 0.0, 1.0);
  const Matrix v = gaussian_fill(rng, n, d, 0.0, 1.0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(attention_batch(q, k, v, Mask::none(), true).output.data());
  }
  state.SetItemsProcessed(state.iterations() * 4ll * n * n * d);
}
BENCHMARK(BM_AttentionForward)->Arg(128)->Arg(256)->Arg(512)->Arg(1024)->Arg(2048);

void BM_CausalAttention(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const int d = 64;
  Rng rng(2);
  const Matrix q = gaussian_fill(rng, n, d, 0.0, 1.0);
  const Matrix k = gaussian_fill(rng, n, d, 0.0, 1.0);
  const Matrix v = gaussian_fill(rng, n, d, 0.0, 1.0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(attention_batch(q, k, v, Mask::causal(), true).output.data());
  }
}
BENCHMARK(BM_CausalAttention)->Arg(256)->Arg(512);

// Head-count sweep at fixed d_model; the analytic FLOP count is identical
// across rows, so timing differences are pure overhead.
void BM_MhaHeads(benchmark::State& state) {
  const int h = static_cast<int>(state.range(0));
  const int n = 256, d_model = 256;
  Rng rng(3);
  MhaParams params;
  params.wq = gaussian_fill(rng, d_model, d_model, 0.0, 0.06);
  params.wk = gaussian_fill(rng, d_model, d_model, 0.0, 0.06);
  params.wv = gaussian_fill(rng, d_model, d_model, 0.0, 0.06);
  params.wo = gaussian_fill(rng, d_model, d_model, 0.0, 0.06);
  params.h = h;
  const Matrix x = gaussian_fill(rng, n, d_model, 0.0, 1.0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(mha_forward(x, x, x, params, Mask::none()).output.data());
  }
}
BENCHMARK(BM_MhaHeads)->Arg(1)->Arg(2)->Arg(4)->Arg(8)->Arg(16);

}  // namespace
