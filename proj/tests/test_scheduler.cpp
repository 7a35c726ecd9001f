// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "blockbatch/errors.hpp"
#include "blockbatch/scheduler.hpp"
#include "merge_oracle.hpp"
#include "support.hpp"

using namespace blockbatch;

namespace {

struct Env {
  Vocab vocab{32};
  ModelParams params = build_model(1, vocab);
};

SchedulerConfig small_config(int gen_len = 64) {
  SchedulerConfig c;
  c.gen_len = gen_len;
  c.block_sizes = {4, 8, 16, 32};
  c.refresh_interval = 8;
  return c;
}

}  // namespace

TEST(SchedulerConfig, Validation) {
  SchedulerConfig c;
  EXPECT_NO_THROW(c.validate());
  c.block_sizes = {};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.block_sizes = {8, 8};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.block_sizes = {0};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.tau_merge = 1.2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.tau_sync = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.refresh_interval = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Compatible, MatchesBruteForce) {
  SplitMix64 rng(5);
  const Vocab v(4);
  for (int t = 0; t < 3000; ++t) {
    SequenceRow a, b;
    a.prompt_len = b.prompt_len = 1;
    for (int p = 0; p < 8; ++p) {
      a.tokens.push_back(rng.unit() < 0.5 ? v.mask_id() : static_cast<Token>(rng.below(3)));
      b.tokens.push_back(rng.unit() < 0.5 ? v.mask_id() : static_cast<Token>(rng.below(3)));
    }
    EXPECT_EQ(scheduler::compatible(a, b, v), bbtest::brute_force_compatible(a, b, v));
    EXPECT_EQ(scheduler::compatible(a, b, v), scheduler::compatible(b, a, v));
  }
}

TEST(MergeSync, FuzzedStatesSatisfyContracts) {
  SplitMix64 rng(77);
  std::size_t merges = 0, syncs = 0;
  for (int t = 0; t < 2000; ++t) {
    const Vocab v(4 + static_cast<int>(rng.below(5)));
    auto set = bbtest::random_branch_set(rng, v, 3, 24);
    SchedulerConfig cfg;
    cfg.block_sizes.clear();
    cfg.tau_merge = rng.unit();
    cfg.tau_sync = static_cast<std::int64_t>(rng.below(10));
    cfg.merge_enabled = rng.unit() < 0.8;
    cfg.sync_enabled = rng.unit() < 0.8;
    const auto before = set;
    const auto actions = scheduler::merge_sync(set, cfg, v);
    const auto r = bbtest::check_merge_sync(before, set, actions, cfg, v);
    ASSERT_TRUE(r.ok()) << "trial " << t << ": " << r.messages.front();
    merges += r.merges;
    syncs += r.syncs;
  }
  EXPECT_GT(merges, 100u);
  EXPECT_GT(syncs, 100u);
}

TEST(MergeSync, NothingBeforeFirstCommit) {
  const Vocab v(4);
  SplitMix64 rng(1);
  auto set = bbtest::random_branch_set(rng, v, 2, 8);
  for (std::size_t k = 0; k < set.size(); ++k) {
    for (int p = 2; p < 10; ++p) set.rows[k].tokens[static_cast<std::size_t>(p)] = v.mask_id();
    set.branches[k].tokens_decoded = 0;
  }
  SchedulerConfig cfg;
  cfg.tau_merge = 0;
  cfg.tau_sync = 0;
  EXPECT_TRUE(scheduler::merge_sync(set, cfg, v).empty());
}

TEST(MergeSync, SyncCopiesLeaderState) {
  const Vocab v(4);
  const std::vector<Token> prompt{0, 1};
  BranchSet set;
  for (int k = 0; k < 2; ++k) {
    auto row = SequenceRow::masked(prompt, 12, v);
    set.rows.push_back(row);
    set.caches.emplace_back(1, 14, 1);
    set.branches.push_back(make_branch(k, k == 0 ? 2 : 4, row, v.output_size()));
  }
  for (int p = 2; p < 8; ++p) set.rows[1].tokens[static_cast<std::size_t>(p)] = 3;
  set.branches[1].tokens_decoded = 6;
  set.rows[0].tokens[2] = 2;  // incompatible with the leader
  set.branches[0].tokens_decoded = 1;
  set.caches[1].raw_mut()[0] = 42;
  SchedulerConfig cfg;
  cfg.tau_sync = 4;
  const auto actions = scheduler::merge_sync(set, cfg, v);
  ASSERT_EQ(actions.size(), 1u);
  EXPECT_EQ(actions[0].kind, EventKind::kSync);
  EXPECT_EQ(actions[0].gap, 5);
  EXPECT_EQ(set.rows[0], set.rows[1]);
  EXPECT_EQ(set.caches[0], set.caches[1]);
  EXPECT_EQ(set.branches[0].tokens_decoded, 6);
  EXPECT_EQ(set.branches[0].window, (BlockWindow{8, 10}));
}

TEST(MergeSync, GapEqualToThresholdDoesNotSync) {
  const Vocab v(4);
  const std::vector<Token> prompt{0};
  BranchSet set;
  for (int k = 0; k < 2; ++k) {
    auto row = SequenceRow::masked(prompt, 10, v);
    set.rows.push_back(row);
    set.caches.emplace_back(1, 11, 1);
    set.branches.push_back(make_branch(k, 4, row, v.output_size()));
  }
  for (int p = 1; p < 5; ++p) set.rows[1].tokens[static_cast<std::size_t>(p)] = 1;
  set.branches[1].tokens_decoded = 4;
  SchedulerConfig cfg;
  cfg.merge_enabled = false;
  cfg.tau_sync = 4;
  EXPECT_TRUE(scheduler::merge_sync(set, cfg, v).empty());
  cfg.tau_sync = 3;
  EXPECT_EQ(scheduler::merge_sync(set, cfg, v).size(), 1u);
}

TEST(Leader, MostProgressThenSmallestBlock) {
  BranchSet set;
  for (int k = 0; k < 3; ++k) set.branches.push_back(BranchState{k, 32 >> k, {}, false, 0, 0, {}});
  set.branches[0].tokens_decoded = 5;
  set.branches[1].tokens_decoded = 7;
  set.branches[2].tokens_decoded = 7;
  EXPECT_EQ(scheduler::leader_of(set), 2);
}

TEST(Pack, ActiveBranchesQueryTheirMaskedWindowPositions) {
  const Vocab v(4);
  SplitMix64 rng(9);
  for (int t = 0; t < 200; ++t) {
    auto set = bbtest::random_branch_set(rng, v, 2, 16);
    const auto active = scheduler::get_active_branches(set, v);
    for (int k : active) EXPECT_FALSE(set.branches[static_cast<std::size_t>(k)].done);
    if (active.empty()) continue;
    const auto packed = scheduler::pack_active_blocks(set, active, v);
    ASSERT_EQ(packed.offsets.size(), packed.branches.size() + 1);
    for (std::size_t i = 0; i < packed.branches.size(); ++i) {
      const auto k = static_cast<std::size_t>(packed.branches[i]);
      const auto q = packed.queries_of(i);
      EXPECT_EQ(std::vector<int>(q.begin(), q.end()), masked_positions(set.rows[k], packed.windows[i], v));
      EXPECT_FALSE(q.empty());
    }
  }
}

TEST(Refresh, FiresAtIntervalAndRestoresConsistency) {
  Env e;
  const Task task = make_task(1, 16, 32, e.vocab);
  const PlantedDenoiser m(e.params, task);
  BranchSet set;
  for (int k = 0; k < 2; ++k) {
    auto row = task.initial_row(e.vocab);
    row.tokens[static_cast<std::size_t>(16 + k)] = 4;
    set.rows.push_back(row);
    set.caches.push_back(m.full_forward(task.initial_row(e.vocab)).cache);
    set.branches.push_back(make_branch(k, 4 << k, row, e.vocab.output_size()));
  }
  set.branches[1].done = true;
  NfeCounter nfe;
  int events = 2;
  EXPECT_TRUE(scheduler::refresh_if_needed(m, set, 3, events, nfe).empty());
  EXPECT_EQ(events, 2);
  events = 3;
  const auto r = scheduler::refresh_if_needed(m, set, 3, events, nfe);
  EXPECT_EQ(r, (std::vector<int>{0}));
  EXPECT_EQ(events, 0);
  EXPECT_EQ(nfe.refresh, 1);
  EXPECT_EQ(set.caches[0], m.full_forward(set.rows[0]).cache);
  EXPECT_NE(set.caches[1], m.full_forward(set.rows[1]).cache);
}

TEST(BlockBatch, NfeExactAndTraceWellFormed) {
  Env e;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const Task task = make_task(seed, 16, 64, e.vocab);
    const PlantedDenoiser m(e.params, task);
    const auto run = run_blockbatch(m, task, small_config());
    EXPECT_EQ(run.forward_calls, run.result.nfe.total());
    EXPECT_EQ(run.result.nfe.init, 1);
    std::int64_t prev = -1;
    for (const auto& ev : run.trace.events) {
      EXPECT_EQ(ev.calls, ev.nfe.total());
      EXPECT_GT(ev.step, prev);
      prev = ev.step;
      if (ev.kind == EventKind::kMerge) {
        EXPECT_GT(ev.p_dest, 0.5);
        EXPECT_TRUE(ev.compatible);
      }
      if (ev.kind == EventKind::kSync) {
        EXPECT_GT(ev.gap, 8);
      }
    }
    const auto& fin = run.trace.events.back();
    EXPECT_EQ(fin.kind, EventKind::kFinish);
    EXPECT_EQ(fin.winner, run.result.branch);
    EXPECT_EQ(fin.winner_block_size, run.result.block_size);
  }
}

TEST(BlockBatch, BlockForwardCountEqualsBatchEvents) {
  Env e;
  const Task task = make_task(6, 16, 64, e.vocab);
  const PlantedDenoiser m(e.params, task);
  int batches = 0;
  BlockBatchOptions opt;
  opt.on_batch = [&](const PackedQuery& q, const BranchSet&) {
    EXPECT_FALSE(q.branches.empty());
    ++batches;
  };
  const auto run = run_blockbatch(m, task, small_config(), opt);
  EXPECT_EQ(run.result.nfe.block, batches);
}

TEST(BlockBatch, SingletonWithoutMergeSyncEqualsSingleBranch) {
  Env e;
  for (int b : {4, 16, 64}) {
    for (std::uint64_t seed : {3u, 4u}) {
      const Task task = make_task(seed, 16, 64, e.vocab);
      const PlantedDenoiser m(e.params, task);
      SchedulerConfig sc;
      sc.gen_len = 64;
      sc.block_sizes = {b};
      sc.merge_enabled = false;
      sc.sync_enabled = false;
      DecodeConfig dc;
      dc.gen_len = 64;
      dc.block_size = b;
      const auto bb = run_blockbatch(m, task, sc);
      const auto sb = decoding::single_branch_decode(m, task, dc);
      EXPECT_EQ(bb.result.row, sb.result.row) << "b=" << b;
      EXPECT_EQ(bb.result.nfe, sb.result.nfe);
    }
  }
}

TEST(BlockBatch, IsDeterministic) {
  Env e;
  const Task task = make_task(8, 16, 64, e.vocab);
  const PlantedDenoiser m(e.params, task);
  const auto a = run_blockbatch(m, task, small_config());
  const auto b = run_blockbatch(m, task, small_config());
  EXPECT_EQ(a.trace, b.trace);
  EXPECT_EQ(a.result.row, b.result.row);
}

TEST(BlockBatch, RejectsMismatchedTask) {
  Env e;
  const Task task = make_task(8, 16, 64, e.vocab);
  const PlantedDenoiser m(e.params, task);
  auto c = small_config(32);
  EXPECT_THROW((void)run_blockbatch(m, task, c), ConfigError);
}
