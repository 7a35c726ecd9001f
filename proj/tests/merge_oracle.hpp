// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

// Replays merge/sync actions on a copy of the pre-state and checks each
// against the contracts position by position.

#pragma once

#include <string>
#include <vector>

#include "support.hpp"

namespace bbtest {

struct MergeSyncViolations {
  std::vector<std::string> messages;
  std::size_t merges = 0;
  std::size_t syncs = 0;
  bool ok() const { return messages.empty(); }
};

inline MergeSyncViolations check_merge_sync(const BranchSet& before, const BranchSet& after,
                                            const std::vector<MergeSyncAction>& actions, const SchedulerConfig& cfg,
                                            const Vocab& vocab) {
  MergeSyncViolations out;
  auto fail = [&](std::string m) { out.messages.push_back(std::move(m)); };
  BranchSet replay = before;
  bool seen_sync = false;
  for (const auto& a : actions) {
    const auto d = static_cast<std::size_t>(a.dest);
    if (a.kind == EventKind::kMerge) {
      ++out.merges;
      if (seen_sync) fail("merge after a sync");
      if (!cfg.merge_enabled) fail("merge while merging is disabled");
      const auto s = static_cast<std::size_t>(a.source);
      const auto& drow = replay.rows[d];
      const auto& srow = replay.rows[s];
      if (!brute_force_compatible(drow, srow, vocab)) fail("merge from an incompatible source");
      if (!drow.is_mask(a.pos, vocab)) fail("merge into a committed position");
      if (srow.tokens[static_cast<std::size_t>(a.pos)] != a.token) fail("merged token differs from the source");
      const auto& pm = before.branches[d].prob_map;
      if (!pm.has(a.pos)) fail("merge without a destination probability");
      else if (!(pm.at(a.pos, a.token) > cfg.tau_merge)) fail("merged token at or below the merge threshold");
      else if (pm.at(a.pos, a.token) != a.p_dest) fail("reported probability differs");
      if (before.branches[d].done) fail("merge into a finished branch");
      replay.rows[d].tokens[static_cast<std::size_t>(a.pos)] = a.token;
      replay.branches[d].tokens_decoded += 1;
    } else {
      ++out.syncs;
      seen_sync = true;
      if (!cfg.sync_enabled) fail("sync while syncing is disabled");
      const auto l = static_cast<std::size_t>(a.leader);
      const int gap = replay.branches[l].tokens_decoded - replay.branches[d].tokens_decoded;
      if (gap != a.gap) fail("reported gap differs");
      if (!(gap > cfg.tau_sync)) fail("sync at or below the sync threshold");
      replay.rows[d] = replay.rows[l];
      replay.branches[d].tokens_decoded = replay.branches[l].tokens_decoded;
    }
  }
  for (std::size_t k = 0; k < after.size(); ++k) {
    if (replay.rows[k] != after.rows[k]) fail("final row differs from the replay of the actions");
    if (replay.branches[k].tokens_decoded != after.branches[k].tokens_decoded) fail("progress differs from replay");
    if (after.branches[k].tokens_decoded != count_committed_generation(after.rows[k], vocab))
      fail("progress is not the committed count");
  }
  if (cfg.sync_enabled) {
    int lead = 0;
    for (std::size_t k = 0; k < after.size(); ++k)
      lead = std::max(lead, after.branches[k].tokens_decoded);
    for (std::size_t k = 0; k < after.size(); ++k)
      if (!after.branches[k].done && lead - after.branches[k].tokens_decoded > cfg.tau_sync)
        fail("post-sync gap above the sync threshold");
  }
  return out;
}

}  // namespace bbtest
