// Microbenchmarks for the hot paths of the mining pipeline, at the stock
// experiment scale. The coupled mining step dominates the full comparison
// run's budget, so its per-call time is the number to watch.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "stylemine/data.hpp"
#include "stylemine/miner.hpp"
#include "stylemine/models.hpp"
#include "stylemine/rng.hpp"
#include "stylemine/stats.hpp"
#include "stylemine/tensor.hpp"

namespace {

using namespace stylemine;

models::NetConfig stock_config() {
  models::NetConfig nc;
  nc.side = 16;
  nc.channels = 16;
  nc.latent = 8;
  nc.classes = 10;
  nc.penultimate = 64;
  nc.vae_hidden = 64;
  return nc;
}

struct MiningFixture {
  models::NetConfig nc = stock_config();
  models::Generator<float> g;
  models::TaskModel<float> task;
  data::LabeledDataset ds;
  miner::MineBatch<float> batch;
  Tensor32 eps, anchor_eta;
  miner::MiningConfig mc;

  MiningFixture()
      : g(models::build_generator<float>(nc, 11)),
        task(models::build_task_model<float>(nc, 12)),
        ds(data::gen_digits(8, nc.side, 13)),
        eps({1, nc.latent}),
        anchor_eta({1, nc.latent}) {
    g.trained = true;
    batch = miner::make_mine_batch(g, ds.images, ds.labels, {0, 1, 2, 3});
    Rng rng(14);
    rng.fill_normal(eps);
    rng.fill_normal(anchor_eta);
  }
};

MiningFixture& fixture() {
  static MiningFixture f;
  return f;
}

void BM_encode_batch(benchmark::State& state) {
  auto& f = fixture();
  for (auto _ : state) {
    Tensor32 out = models::encode_values(f.g, f.batch.raw);
    benchmark::DoNotOptimize(out.data.data());
  }
}
BENCHMARK(BM_encode_batch)->Unit(benchmark::kMillisecond);

void BM_mine_step(benchmark::State& state) {
  auto& f = fixture();
  for (auto _ : state) {
    miner::StepResult r = miner::mine_step(f.task, f.g, f.batch, f.eps, f.anchor_eta, f.mc, 2.5e-4, 0.9, 5e-4);
    benchmark::DoNotOptimize(r.l_m);
  }
}
BENCHMARK(BM_mine_step)->Unit(benchmark::kMillisecond);

void BM_plain_step(benchmark::State& state) {
  auto& f = fixture();
  for (auto _ : state) {
    miner::StepResult r = miner::plain_step(f.task, f.batch, 2.5e-4, 0.9, 5e-4);
    benchmark::DoNotOptimize(r.l_m);
  }
}
BENCHMARK(BM_plain_step)->Unit(benchmark::kMillisecond);

void BM_adain(benchmark::State& state) {
  auto& f = fixture();
  Tensor32 feats = models::encode_values(f.g, f.batch.raw);
  auto targets = channel_stats(feats);
  for (auto _ : state) {
    Tensor32 out = adain(feats, std::span<const ChannelStats32>(targets));
    benchmark::DoNotOptimize(out.data.data());
  }
}
BENCHMARK(BM_adain)->Unit(benchmark::kMicrosecond);

void BM_task_loss(benchmark::State& state) {
  Rng rng(15);
  Tensor32 logits({256, 10});
  rng.fill_normal(logits);
  std::vector<int> labels(256);
  for (size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 10);
  for (auto _ : state) {
    float l = miner::task_loss(logits, labels);
    benchmark::DoNotOptimize(l);
  }
}
BENCHMARK(BM_task_loss)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
