// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "cmoe/backbone.hpp"
#include "cmoe/moe.hpp"
#include "cmoe/objective.hpp"
#include "cmoe/ops.hpp"
#include "cmoe/ptl.hpp"
#include "cmoe/rng.hpp"
#include "cmoe/tasks.hpp"

using namespace cmoe;

namespace {

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = Tensor::uniform({n, n}, 1.0, rng), b = Tensor::uniform({n, n}, 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_MoeLayerForward(benchmark::State& state) {
  const auto n_experts = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  moe::MoeLayer layer(Tensor::uniform({128, 64}, 0.1, rng), 4, "bench");
  layer.append_experts(n_experts, moe::ExpertInit::zero_b(), 0, rng);
  layer.activate(moe::make_router(n_experts, 64, 2, 0, rng));
  const Tensor x = Tensor::uniform({16 * 8, 64}, 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(layer.forward(x));
}
BENCHMARK(BM_MoeLayerForward)->Arg(4)->Arg(8)->Arg(16);

// One training step's forward and backward through the full desk-size model.
void BM_BackboneStep(benchmark::State& state) {
  Rng rng(3);
  moe::Backbone model(moe::BackboneConfig{}, rng);
  moe::RouterSet routers;
  for (std::size_t h = 0; h < model.n_layers(); ++h) {
    model.layer(h).append_experts(4, moe::ExpertInit::zero_b(), 0, rng);
    routers.push_back(moe::make_router(4, 64, 2, 0, rng));
  }
  model.activate(routers);
  const tasks::TaskSpec spec = tasks::generate_stream({})[0];
  const tasks::Batch batch = tasks::sample_batch(spec, tasks::Split::kTrain, 16, rng);
  for (auto _ : state) {
    Tensor loss = ops::mean(model.forward(batch.view()));
    backward(loss);
    for (Tensor p : harness::trainable_parameters(model)) p.clear_grad();
  }
}
BENCHMARK(BM_BackboneStep)->Unit(benchmark::kMillisecond);

void BM_RecLogprob(benchmark::State& state) {
  Rng rng(4);
  const ptl::VaeModel vae = ptl::VaeModel::init(64, 16, 0, rng);
  const Tensor f = Tensor::uniform({200, 64}, 1.0, rng);
  const auto n_rep = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(ptl::score(vae, f, n_rep, rng));
}
BENCHMARK(BM_RecLogprob)->Arg(1)->Arg(10);

}  // namespace

BENCHMARK_MAIN();
