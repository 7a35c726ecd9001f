// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "blockbatch/decoding.hpp"
#include "blockbatch/errors.hpp"
#include "support.hpp"

using namespace blockbatch;

namespace {

DenoiseOutput rows_of(std::vector<int> positions, std::vector<std::vector<double>> probs) {
  DenoiseOutput o;
  o.width = static_cast<int>(probs.front().size());
  o.positions = std::move(positions);
  for (const auto& r : probs)
    for (double p : r) {
      o.probs.push_back(p);
      o.logits.push_back(std::log(p));
    }
  return o;
}

SequenceRow masked_row(int prompt, int gen, const Vocab& v) {
  std::vector<Token> pr(static_cast<std::size_t>(prompt), 0);
  return SequenceRow::masked(pr, gen, v);
}

}  // namespace

TEST(Transition, ConfidentPositionCommitsAlone) {
  const Vocab v(4);  // output width 5
  auto row = masked_row(5, 5, v);
  const std::vector<double> u{0.2, 0.2, 0.2, 0.2, 0.2};
  const auto out = rows_of({5, 6, 7, 8, 9}, {{0.95, 0.02, 0.01, 0.01, 0.01}, {0.30, 0.30, 0.20, 0.10, 0.10}, u, u, u});
  const auto c = decoding::confidence_transition(out, row, {5, 10}, 0.9, v);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0], (Commit{5, 0}));
  EXPECT_EQ(row.tokens[5], 0);
}

TEST(Transition, ThresholdOneCommitsExactlyTheMostConfident) {
  const Vocab v(4);
  const auto row = masked_row(2, 3, v);
  const auto out = rows_of({2, 3, 4}, {{0.4, 0.2, 0.2, 0.1, 0.1}, {0.1, 0.7, 0.1, 0.05, 0.05}, {0.5, 0.5, 0, 0, 0}});
  const auto c = decoding::evaluate_transition(out, row, {2, 5}, 1.0, v);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0], (Commit{3, 1}));
}

TEST(Transition, UniformTiesGoToLowestPositionAndToken) {
  const Vocab v(4);
  const auto row = masked_row(2, 3, v);
  const std::vector<double> u{0.2, 0.2, 0.2, 0.2, 0.2};
  const auto c = decoding::evaluate_transition(rows_of({2, 3, 4}, {u, u, u}), row, {2, 5}, 0.9, v);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0], (Commit{2, 0}));
}

TEST(Transition, OutputMustCoverMaskedWindowPositions) {
  const Vocab v(4);
  auto row = masked_row(2, 4, v);
  row.tokens[3] = 1;
  const std::vector<double> u{0.2, 0.2, 0.2, 0.2, 0.2};
  EXPECT_THROW((void)decoding::evaluate_transition(rows_of({2, 3, 4}, {u, u, u}), row, {2, 5}, 0.9, v),
               ContractError);
  EXPECT_NO_THROW((void)decoding::evaluate_transition(rows_of({2, 4}, {u, u}), row, {2, 5}, 0.9, v));
}

TEST(Transition, MatchesBruteForceOnRandomInstances) {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 2000; ++trial) {
    const Vocab v(4 + static_cast<int>(rng.below(6)));
    auto row = masked_row(3, 12, v);
    for (int p = 3; p < 15; ++p)
      if (rng.unit() < 0.3) row.tokens[static_cast<std::size_t>(p)] = 0;
    const int start = 3 + static_cast<int>(rng.below(10));
    const BlockWindow w{start, std::min(15, start + 1 + static_cast<int>(rng.below(6)))};
    const auto out = bbtest::random_output(rng, masked_positions(row, w, v), v.output_size(), trial % 3 == 0);
    const double tau = rng.unit();
    EXPECT_EQ(decoding::evaluate_transition(out, row, w, tau, v), bbtest::brute_force_commits(out, tau));
  }
}

TEST(Transition, MaskCountStrictlyDecreases) {
  SplitMix64 rng(3);
  const Vocab v(5);
  auto row = masked_row(2, 8, v);
  const BlockWindow w{2, 10};
  int masks = count_masks(row, w, v);
  while (masks > 0) {
    const auto out = bbtest::random_output(rng, masked_positions(row, w, v), v.output_size());
    decoding::confidence_transition(out, row, w, 1.0, v);
    const int now = count_masks(row, w, v);
    EXPECT_EQ(now, masks - 1);
    masks = now;
  }
}

TEST(Branch, WindowsAdvanceAndClip) {
  const Vocab v(4);
  auto row = masked_row(4, 10, v);
  auto b = make_branch(0, 4, row, v.output_size());
  EXPECT_EQ(b.window, (BlockWindow{4, 8}));
  EXPECT_THROW(decoding::advance_block(b, row, v), ContractError);
  for (int p = 4; p < 12; ++p) row.tokens[static_cast<std::size_t>(p)] = 1;
  decoding::advance_completed(b, row, v);
  EXPECT_EQ(b.window, (BlockWindow{12, 14}));
  EXPECT_FALSE(b.done);
  row.tokens[12] = row.tokens[13] = 2;
  decoding::advance_completed(b, row, v);
  EXPECT_TRUE(b.done);
  EXPECT_TRUE(make_branch(0, 8, masked_row(4, 0, v), v.output_size()).done);
}

TEST(Branch, RealignMovesToFirstMask) {
  const Vocab v(4);
  auto row = masked_row(2, 10, v);
  for (int p = 2; p < 7; ++p) row.tokens[static_cast<std::size_t>(p)] = 0;
  auto b = make_branch(0, 4, row, v.output_size());
  decoding::realign_window(b, row, v);
  EXPECT_EQ(b.window, (BlockWindow{7, 11}));
}

TEST(Eos, StatusAndDecodeWindow) {
  const Vocab v(4);
  auto row = masked_row(2, 8, v);
  EXPECT_EQ(decoding::check_eos(row, v), decoding::EosStatus::kNone);
  row.tokens[6] = v.eos_id();
  EXPECT_EQ(decoding::check_eos(row, v), decoding::EosStatus::kPending);
  auto b = make_branch(0, 8, row, v.output_size());
  EXPECT_EQ(decoding::decode_window(b, row, v), (BlockWindow{2, 6}));
  for (int p = 2; p < 6; ++p) row.tokens[static_cast<std::size_t>(p)] = 1;
  EXPECT_EQ(decoding::check_eos(row, v), decoding::EosStatus::kReady);
  row.tokens[4] = v.eos_id();
  EXPECT_EQ(*decoding::earliest_eos(row, v), 4);
}

TEST(ProbMap, KeepsLatestSnapshot) {
  ProbMap m(6, 3);
  EXPECT_FALSE(m.has(2));
  DenoiseOutput o;
  o.width = 3;
  o.positions = {2, 4};
  o.probs = {0.2, 0.3, 0.5, 1, 0, 0};
  o.logits = o.probs;
  m.update(o);
  EXPECT_TRUE(m.has(2));
  EXPECT_DOUBLE_EQ(m.at(2, 2), 0.5);
  o.positions = {2};
  o.probs = {0.9, 0.05, 0.05};
  o.logits = o.probs;
  m.update(o);
  EXPECT_DOUBLE_EQ(m.at(2, 0), 0.9);
  EXPECT_DOUBLE_EQ(m.at(4, 0), 1.0);
}

TEST(DecodeConfig, Validation) {
  DecodeConfig c;
  EXPECT_NO_THROW(c.validate());
  c.block_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.tau_conf = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.refresh_interval = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

namespace {

struct Suite {
  Vocab vocab{32};
  ModelParams params = build_model(1, vocab);
};

}  // namespace

TEST(SingleBranch, NfeMatchesForwardCallsAtEveryEvent) {
  Suite s;
  for (int b : {4, 16, 64}) {
    const Task task = make_task(9, 16, 64, s.vocab);
    const PlantedDenoiser m(s.params, task);
    DecodeConfig c;
    c.gen_len = 64;
    c.block_size = b;
    c.refresh_interval = 4;
    const auto run = decoding::single_branch_decode(m, task, c);
    EXPECT_EQ(run.forward_calls, run.result.nfe.total());
    EXPECT_EQ(run.result.nfe.init, 1);
    for (const auto& ev : run.trace.events) EXPECT_EQ(ev.calls, ev.nfe.total());
    EXPECT_EQ(run.trace.events.back().kind, EventKind::kFinish);
    EXPECT_EQ(run.result.block_size, b);
  }
}

TEST(SingleBranch, RefreshCountFollowsInterval) {
  Suite s;
  const Task task = make_task(2, 16, 64, s.vocab);
  const PlantedDenoiser m(s.params, task);
  DecodeConfig c;
  c.gen_len = 64;
  c.block_size = 4;
  c.refresh_interval = 3;
  const auto run = decoding::single_branch_decode(m, task, c);
  // A refresh follows every third block forward unless the run ended first.
  const auto full = run.result.nfe.block / 3;
  EXPECT_TRUE(run.result.nfe.refresh == full || (run.result.nfe.block % 3 == 0 && run.result.nfe.refresh == full - 1))
      << run.result.nfe.block << " " << run.result.nfe.refresh;
}

TEST(SingleBranch, SeededRowKeepsSeeds) {
  Suite s;
  const Task task = make_task(4, 16, 64, s.vocab);
  const PlantedDenoiser m(s.params, task);
  DecodeConfig c;
  c.gen_len = 64;
  DecodeOptions o;
  o.initial_row = task.initial_row(s.vocab);
  o.initial_row->tokens[20] = 7;
  const auto run = decoding::single_branch_decode(m, task, c, o);
  EXPECT_EQ(run.result.row.tokens[20], 7);
}

TEST(Vanilla, OneCommitPerForward) {
  Suite s;
  const Task task = make_task(1, 16, 48, s.vocab);
  const PlantedDenoiser m(s.params, task);
  const auto run = decoding::vanilla_decode(m, task, 48);
  EXPECT_EQ(run.forward_calls, run.result.nfe.total());
  EXPECT_EQ(run.result.nfe.refresh, 0);
  std::size_t commits = 0;
  for (const auto& ev : run.trace.events)
    if (ev.kind == EventKind::kDecode) {
      EXPECT_EQ(ev.commits.size(), 1u);
      ++commits;
    }
  EXPECT_EQ(static_cast<std::int64_t>(commits), run.result.nfe.total());
}
