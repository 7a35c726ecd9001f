// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "blockbatch/decoding.hpp"
#include "blockbatch/kvspace.hpp"
#include "blockbatch/scheduler.hpp"

using namespace blockbatch;

namespace {

struct Fixture {
  Vocab vocab{32};
  ModelParams params = build_model(1, vocab);
  Task task;
  Fixture(int gen) : task(make_task(3, 32, gen, vocab)) {}
};

void BM_FullForward(benchmark::State& state) {
  Fixture f(static_cast<int>(state.range(0)));
  const PlantedDenoiser m(f.params, f.task);
  const auto row = f.task.initial_row(f.vocab);
  for (auto _ : state) benchmark::DoNotOptimize(m.full_forward(row));
  state.SetLabel("L=" + std::to_string(row.length()));
}
BENCHMARK(BM_FullForward)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_BlockForward(benchmark::State& state) {
  Fixture f(256);
  const PlantedDenoiser m(f.params, f.task);
  const auto row = f.task.initial_row(f.vocab);
  const auto init = m.full_forward(row);
  const int b = static_cast<int>(state.range(0));
  const BlockWindow w{32, 32 + b};
  const auto q = masked_positions(row, w, f.vocab);
  for (auto _ : state) benchmark::DoNotOptimize(m.block_forward(row, init.cache, w, q));
}
BENCHMARK(BM_BlockForward)->RangeMultiplier(2)->Range(4, 128)->Unit(benchmark::kMicrosecond);

void BM_BatchedBlockForward(benchmark::State& state) {
  Fixture f(256);
  const PlantedDenoiser m(f.params, f.task);
  SchedulerConfig c;
  BranchSet set;
  const auto row = f.task.initial_row(f.vocab);
  const auto init = m.full_forward(row);
  for (std::size_t k = 0; k < c.block_sizes.size(); ++k) {
    set.rows.push_back(row);
    set.caches.push_back(init.cache);
    set.branches.push_back(make_branch(static_cast<int>(k), c.block_sizes[k], row, f.vocab.output_size()));
  }
  const auto active = scheduler::get_active_branches(set, f.vocab);
  const auto packed = scheduler::pack_active_blocks(set, active, f.vocab);
  NfeCounter nfe;
  for (auto _ : state) {
    BranchSet copy = set;
    benchmark::DoNotOptimize(scheduler::batched_block_forward(m, packed, copy, nfe));
  }
  state.SetLabel(std::to_string(active.size()) + " branches");
}
BENCHMARK(BM_BatchedBlockForward)->Unit(benchmark::kMillisecond);

void BM_RunBlockBatch(benchmark::State& state) {
  Fixture f(static_cast<int>(state.range(0)));
  const PlantedDenoiser m(f.params, f.task);
  SchedulerConfig c;
  c.gen_len = static_cast<int>(state.range(0));
  std::int64_t nfe = 0;
  for (auto _ : state) {
    auto run = run_blockbatch(m, f.task, c);
    nfe = run.result.nfe.total();
    benchmark::DoNotOptimize(run);
  }
  state.counters["nfe"] = static_cast<double>(nfe);
}
BENCHMARK(BM_RunBlockBatch)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_SingleBranch(benchmark::State& state) {
  Fixture f(256);
  const PlantedDenoiser m(f.params, f.task);
  DecodeConfig c;
  c.block_size = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(decoding::single_branch_decode(m, f.task, c));
}
BENCHMARK(BM_SingleBranch)->Arg(4)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_ConsistencyError(benchmark::State& state) {
  Fixture f(256);
  const PlantedDenoiser m(f.params, f.task);
  const auto row = f.task.initial_row(f.vocab);
  const auto init = m.full_forward(row);
  for (auto _ : state) benchmark::DoNotOptimize(cache_consistency_error(m, row, init.cache));
}
BENCHMARK(BM_ConsistencyError)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
