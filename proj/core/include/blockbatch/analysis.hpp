// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "blockbatch/decoding.hpp"
#include "blockbatch/model.hpp"
#include "blockbatch/types.hpp"

namespace blockbatch {

/// Length of the common prefix, compared up to the shorter sequence.
int bifurcation_length(std::span<const Token> a, std::span<const Token> b);

struct BifurcationRecord {
  int i = 0;
  int j = 0;
  int block_i = 0;
  int block_j = 0;
  int prefix = 0;
  /// First mismatching position; none when the shorter sequence is a prefix of the longer.
  std::optional<int> divergence;
};

/// One record per unordered pair i < j.
std::vector<BifurcationRecord> bifurcation_records(const std::vector<std::vector<Token>>& outputs,
                                                   std::span<const int> block_sizes);

/// Per generation position: the branch tokens, the modal token (ties to the
/// lowest id) and how many branches carry it. A branch is absent past the end
/// of its output.
struct ConsensusMap {
  int branches = 0;
  std::vector<std::vector<std::optional<Token>>> tokens;  // [branch][position]
  std::vector<Token> modal;                               // -1 where no branch is present
  std::vector<int> count;
  std::vector<int> present;

  int length() const { return static_cast<int>(modal.size()); }
  bool full(int pos) const {
    return count[static_cast<std::size_t>(pos)] == branches && branches > 0;
  }
};

/// ContractError for fewer than two outputs.
ConsensusMap consensus_map(const std::vector<std::vector<Token>>& outputs);

/// Full-agreement positions strictly after the earliest pairwise divergence.
std::vector<int> later_stage_consensus(const ConsensusMap& map, std::span<const BifurcationRecord> records);

struct CategoryProfile {
  TokenCategory category = TokenCategory::kOther;
  /// Mean number of positions per map whose modal token is in the category.
  double positions = 0;
  /// histogram[k-1]: positions with agreement k, summed over maps.
  std::vector<std::int64_t> histogram;
  /// Mean of count / branches over those positions.
  double mean_agreement = 0;
};

/// Rows for populated categories only, in category order.
std::vector<CategoryProfile> category_agreement_profile(std::span<const ConsensusMap> maps, const Vocab& vocab);
std::vector<CategoryProfile> category_agreement_profile(const ConsensusMap& map, const Vocab& vocab);

struct SeededReport {
  GenerationResult baseline;
  GenerationResult seeded;
  /// seeded - baseline
  int delta_acc = 0;
  /// baseline - seeded; positive means fewer evaluations.
  std::int64_t delta_nfe = 0;
};

/// Absolute-position seeds committed into the row before decoding.
/// ContractError for a seed inside the prompt or a repeated position,
/// RangeError past the end of the row.
SeededReport seeded_consensus_run(const Denoiser& model, const Task& task, const DecodeConfig& cfg,
                                  std::span<const Commit> seeds);

struct OracleRow {
  int block_size = 0;
  bool correct = false;
  NfeCounter nfe;
  std::vector<Token> generated;
};

struct OracleResult {
  int best_block_size = 0;
  std::size_t best_index = 0;
  std::vector<OracleRow> rows;
};

/// Per-sample best block size: correct first, then lower NFE, then smaller size.
OracleResult select_oracle(std::vector<OracleRow> rows);

/// Runs single_branch_decode for each size and selects the best.
OracleResult oracle_block_size(const Denoiser& model, const Task& task, const DecodeConfig& base,
                               std::span<const int> block_sizes);

}  // namespace blockbatch
