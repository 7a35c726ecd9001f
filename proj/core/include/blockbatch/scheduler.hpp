// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "blockbatch/decoding.hpp"
#include "blockbatch/model.hpp"
#include "blockbatch/trace.hpp"

namespace blockbatch {

struct SchedulerConfig {
  std::vector<int> block_sizes{4, 8, 16, 32, 64, 128};
  double tau_conf = 0.9;
  double tau_merge = 0.5;
  std::int64_t tau_sync = 8;
  int refresh_interval = 32;
  int gen_len = 256;
  bool merge_enabled = true;
  bool sync_enabled = true;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Token rows, cache rows and branch states of one request. Branch k owns
/// rows[k] and caches[k]; only sync copies across branches.
struct BranchSet {
  std::vector<SequenceRow> rows;
  std::vector<KvCache> caches;
  std::vector<BranchState> branches;

  std::size_t size() const { return branches.size(); }
};

/// Masked query positions of the active branches packed back to back.
/// offsets has one more entry than branches; branch k's queries are
/// positions[offsets[k] .. offsets[k+1]).
struct PackedQuery {
  std::vector<int> branches;
  std::vector<int> positions;
  std::vector<std::size_t> offsets;
  std::vector<BlockWindow> windows;

  std::span<const int> queries_of(std::size_t k) const {
    return {positions.data() + offsets[k], offsets[k + 1] - offsets[k]};
  }
};

/// Outcome of one merge or sync action, for tracing and re-checking.
struct MergeSyncAction {
  EventKind kind = EventKind::kMerge;
  int dest = -1;
  // merge
  int source = -1;
  int pos = -1;
  Token token = -1;
  double p_dest = 0.0;
  bool compatible = false;
  // sync
  int leader = -1;
  int gap = 0;
};

namespace scheduler {

struct InitResult {
  std::vector<DenoiseOutput> outputs;  // per branch, restricted to its initial window
  KvCache cache;
};

/// One full forward on the shared initial row; the cache is broadcast to every
/// branch. ContractError if the rows differ.
InitResult init_full_forward(const Denoiser& model, BranchSet& set, NfeCounter& nfe);

/// Not done and at least one masked position in the current (eos-clipped)
/// window, ascending index.
std::vector<int> get_active_branches(const BranchSet& set, const Vocab& vocab);

/// ContractError when `active` is empty.
PackedQuery pack_active_blocks(const BranchSet& set, std::span<const int> active, const Vocab& vocab);

/// One batched forward (one NFE) that recomputes every packed branch's window
/// against its own cache row. Caches are updated in place.
std::vector<DenoiseOutput> batched_block_forward(const Denoiser& model, const PackedQuery& packed, BranchSet& set,
                                                 NfeCounter& nfe);

/// Source s is compatible with d iff every position committed in both rows
/// carries the same token.
bool compatible(const SequenceRow& dest, const SequenceRow& source, const Vocab& vocab);

/// Confidence-gated merge followed by leader sync. No-op when the leader
/// has decoded nothing.
std::vector<MergeSyncAction> merge_sync(BranchSet& set, const SchedulerConfig& cfg, const Vocab& vocab);

/// Leader: most tokens decoded, ties to the smallest block size.
int leader_of(const BranchSet& set);

/// Refresh every not-done branch once `block_events` reaches R; returns the
/// refreshed branch indices (empty when no refresh happened).
std::vector<int> refresh_if_needed(const Denoiser& model, BranchSet& set, int refresh_interval, int& block_events,
                                   NfeCounter& nfe);

/// Among eos-ready branches: most tokens decoded, then smallest block size.
/// ContractError when no branch is ready.
int select_eos_winner(const BranchSet& set, const Vocab& vocab);

}  // namespace scheduler

struct BlockBatchRun {
  GenerationResult result;
  Trace trace;
  std::int64_t forward_calls = 0;
};

struct BlockBatchOptions {
  CacheObserver* observer = nullptr;
  /// Called with every packed batch and the state right before the batched
  /// forward; used by replay tests.
  std::function<void(const PackedQuery&, const BranchSet&)> on_batch;
};

/// Fused multi-branch decoding over one request.
BlockBatchRun run_blockbatch(const Denoiser& model, const Task& task, const SchedulerConfig& cfg,
                             const BlockBatchOptions& options = {});

}  // namespace blockbatch
