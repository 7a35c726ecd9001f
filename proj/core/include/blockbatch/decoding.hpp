// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "blockbatch/model.hpp"
#include "blockbatch/trace.hpp"
#include "blockbatch/types.hpp"

namespace blockbatch {

struct DecodeConfig {
  double tau_conf = 0.9;
  int gen_len = 256;
  int refresh_interval = 32;
  int block_size = 32;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Probability snapshot per position from the most recent forward whose
/// query set covered it. Positions never covered have no entry.
class ProbMap {
 public:
  ProbMap() = default;
  ProbMap(int length, int width);

  bool has(int pos) const { return has_[static_cast<std::size_t>(pos)] != 0; }
  /// P(pos, token); requires has(pos).
  double at(int pos, Token token) const;
  std::span<const double> row(int pos) const;
  void update(const DenoiseOutput& output);
  int length() const { return static_cast<int>(has_.size()); }
  int width() const { return width_; }

  friend bool operator==(const ProbMap&, const ProbMap&) = default;

 private:
  int width_ = 0;
  std::vector<double> probs_;
  std::vector<unsigned char> has_;
};

/// One block-size branch.
struct BranchState {
  int index = 0;
  int block_size = 1;
  BlockWindow window;
  bool done = false;
  int tokens_decoded = 0;
  int tokens_merged = 0;
  ProbMap prob_map;

  friend bool operator==(const BranchState&, const BranchState&) = default;
};

/// Branch at the start of generation: window [L_p, min(L_p + b, L)).
BranchState make_branch(int index, int block_size, const SequenceRow& row, int output_width);

namespace decoding {

/// Commits chosen by the confidence rule without touching the row.
/// For each masked window position i with c_i = max_v p(v), commit argmax_v
/// when c_i >= tau or i is the most confident masked position (ties: lowest
/// token id, lowest position). `output` must cover exactly the masked
/// positions of `window`; otherwise ContractError.
std::vector<Commit> evaluate_transition(const DenoiseOutput& output, const SequenceRow& row, BlockWindow window,
                                        double tau, const Vocab& vocab);

/// evaluate_transition, then apply the commits to `row`.
std::vector<Commit> confidence_transition(const DenoiseOutput& output, SequenceRow& row, BlockWindow window,
                                          double tau, const Vocab& vocab);

bool window_complete(const SequenceRow& row, BlockWindow window, const Vocab& vocab);

/// Slide the window by one block. ContractError when the window still has masks.
void advance_block(BranchState& branch, const SequenceRow& row, const Vocab& vocab);
/// Advance while the current window is complete and the branch is not done.
void advance_completed(BranchState& branch, const SequenceRow& row, const Vocab& vocab);
/// Move the window to the first masked generation position (done if none).
void realign_window(BranchState& branch, const SequenceRow& row, const Vocab& vocab);

enum class EosStatus { kNone, kPending, kReady };

/// Earliest committed eos in the generation region, if any.
std::optional<int> earliest_eos(const SequenceRow& row, const Vocab& vocab);
/// kReady iff an eos is committed at e and [L_p, e) has no mask; kPending if
/// a mask precedes it; kNone without eos.
EosStatus check_eos(const SequenceRow& row, const Vocab& vocab);
inline EosStatus check_eos(const BranchState&, const SequenceRow& row, const Vocab& vocab) {
  return check_eos(row, vocab);
}

/// Window a branch decodes this step: during the eos cycle the window is
/// clipped to positions before the earliest eos.
BlockWindow decode_window(const BranchState& branch, const SequenceRow& row, const Vocab& vocab);

}  // namespace decoding

enum class StopReason { kEos, kExhausted };

struct GenerationResult {
  SequenceRow row;
  std::vector<Token> generated;
  int branch = 0;
  int block_size = 0;
  int tokens_decoded = 0;
  StopReason stop = StopReason::kExhausted;
  NfeCounter nfe;
  bool correct = false;
};

struct DecodeRun {
  GenerationResult result;
  Trace trace;
  /// Instrumented model-forward invocations.
  std::int64_t forward_calls = 0;
};

struct DecodeOptions {
  /// Starting row; defaults to task.initial_row(). Used for seeded runs.
  std::optional<SequenceRow> initial_row;
  CacheObserver* observer = nullptr;
};

namespace decoding {

/// Single-branch block decoding with approximate (block-local) KV reuse:
/// initial full forward, repeated block forwards with the confidence rule,
/// a full refresh every refresh_interval block forwards, eos cycle.
DecodeRun single_branch_decode(const Denoiser& model, const Task& task, const DecodeConfig& cfg,
                               const DecodeOptions& options = {});

/// Baseline without cache reuse: one full forward per round over the whole
/// generation region, committing only the most confident position (the
/// threshold is pinned to 1). The first forward counts as NFE_init, the
/// rest as NFE_block.
DecodeRun vanilla_decode(const Denoiser& model, const Task& task, int gen_len, const DecodeOptions& options = {});

}  // namespace decoding
}  // namespace blockbatch
