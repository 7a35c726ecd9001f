// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "blockbatch/kv_cache.hpp"
#include "blockbatch/types.hpp"

namespace blockbatch {

/// Dimensions and planted-target settings of the synthetic denoiser.
struct ModelConfig {
  int layers = 2;
  int d_model = 32;
  int max_len = 320;
  /// Weight of the planted-target boost added to the target logit.
  double gamma = 8.0;
  /// Half-width of the neighbourhood used by the agreement term.
  int radius = 4;
  /// Multiplier on the vocabulary-head logits.
  double head_gain = 6.0;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Seeded parameters of a single-head bidirectional attention stack.
/// All matrices are row-major with entries N(0,1)/sqrt(d_model) drawn from
/// CounterRng(seed, stream) where stream identifies the tensor:
///   0 embeddings, 1 positional, 2 head, 16 + 4*layer + {0:q, 1:k, 2:v, 3:o}.
struct ModelParams {
  struct Layer {
    std::vector<double> wq, wk, wv, wo;  // d x d
    friend bool operator==(const Layer&, const Layer&) = default;
  };

  std::uint64_t seed = 0;
  Vocab vocab;
  ModelConfig config;
  std::vector<double> embeddings;  // vocab.extended_size() x d
  std::vector<double> positional;  // max_len x d
  std::vector<Layer> layers;
  std::vector<double> head;        // vocab.output_size() x d

  int d() const { return config.d_model; }
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Throws ConfigError on zero layers, zero width, zero max_len or negative radius.
ModelParams build_model(std::uint64_t seed, const Vocab& vocab, const ModelConfig& config = {});

enum class DumpFormat { kBinary, kText };

/// Dump order: embeddings, positional, per layer (wq, wk, wv, wo), head.
/// Binary is little-endian IEEE-754 doubles with no header; text is one
/// value per line printed with 17 significant digits.
void dump_params(const ModelParams& params, std::ostream& out, DumpFormat format);

/// Per-position categorical outputs of one forward. Rows cover the output
/// vocabulary (regular tokens + eos) in the order of `positions`.
struct DenoiseOutput {
  int width = 0;
  std::vector<int> positions;
  std::vector<double> logits;
  std::vector<double> probs;

  std::size_t size() const { return positions.size(); }
  std::span<const double> logits_row(std::size_t i) const;
  std::span<const double> probs_row(std::size_t i) const;
  /// Rows whose position lies in `w`, order preserved.
  DenoiseOutput restricted_to(BlockWindow w) const;

  friend bool operator==(const DenoiseOutput&, const DenoiseOutput&) = default;
};

struct ForwardPass {
  DenoiseOutput output;
  KvCache cache;
};

/// Recompute every position with full bidirectional attention. Outputs cover
/// every masked position. `planted` is the full-length target sequence
/// (prompt followed by target tokens).
ForwardPass full_forward(const ModelParams& params, const SequenceRow& row,
                         std::span<const Token> planted);

/// Recompute only `window` at every layer, attending to `cache` elsewhere.
/// The returned cache equals `cache` except for the window rows. `query`
/// selects the output rows and must be masked positions inside the window.
ForwardPass block_forward(const ModelParams& params, const SequenceRow& row, const KvCache& cache,
                          BlockWindow window, std::span<const Token> planted,
                          std::span<const int> query);

/// Same, querying every masked position in the window.
ForwardPass block_forward(const ModelParams& params, const SequenceRow& row, const KvCache& cache,
                          BlockWindow window, std::span<const Token> planted);

/// Fraction of committed positions within `radius` of `pos` (excluding pos)
/// whose token equals the planted token. Zero when none is committed.
double planted_agreement(const SequenceRow& row, std::span<const Token> planted, int pos,
                         int radius, const Vocab& vocab);

/// A synthetic request: prompt plus the planted ground-truth continuation.
struct Task {
  std::uint64_t seed = 0;
  Token eos_id = -1;
  std::vector<Token> prompt;
  /// gen_len tokens; when an eos is planted every later position is eos too.
  std::vector<Token> target;

  int gen_len() const { return static_cast<int>(target.size()); }
  /// Index of the first eos inside target, or -1.
  int eos_index() const;
  /// Prompt followed by target; what the denoiser boosts toward.
  std::vector<Token> planted() const;
  /// Target truncated before its first eos; the exact-match reference.
  std::vector<Token> reference() const;
  SequenceRow initial_row(const Vocab& vocab) const;
};

/// Deterministic task. Half of the seeds plant an eos at an index drawn
/// uniformly from [gen_len/2, gen_len). Throws ConfigError on zero lengths.
Task make_task(std::uint64_t seed, int prompt_len, int gen_len, const Vocab& vocab);

/// Generated tokens truncated before the first eos (masks kept as-is).
std::vector<Token> generated_tokens(const SequenceRow& row, const Vocab& vocab);
/// Exact match of generated_tokens against task.reference().
bool exact_match(const SequenceRow& row, const Task& task, const Vocab& vocab);

// ---------------------------------------------------------------------------
// Pluggable denoiser interface consumed by decoding, scheduler and kvspace.

struct BlockQuery {
  const SequenceRow* row = nullptr;
  const KvCache* cache = nullptr;
  BlockWindow window;
  std::span<const int> positions;
};

/// A model bound to one request. Each top-level call is one model forward;
/// batched calls are one forward regardless of batch size.
class Denoiser {
 public:
  virtual ~Denoiser() = default;

  virtual const Vocab& vocab() const = 0;
  virtual ForwardPass full_forward(const SequenceRow& row) const = 0;
  virtual ForwardPass block_forward(const SequenceRow& row, const KvCache& cache, BlockWindow window,
                                    std::span<const int> query) const = 0;

  /// Defaults evaluate each member independently, which keeps per-branch
  /// semantics exact.
  virtual std::vector<ForwardPass> batched_full_forward(std::span<const SequenceRow* const> rows) const;
  virtual std::vector<ForwardPass> batched_block_forward(std::span<const BlockQuery> queries) const;
};

/// The synthetic model paired with one task's planted target.
class PlantedDenoiser final : public Denoiser {
 public:
  PlantedDenoiser(const ModelParams& params, const Task& task);
  PlantedDenoiser(const ModelParams& params, std::vector<Token> planted);

  const Vocab& vocab() const override { return params_.vocab; }
  ForwardPass full_forward(const SequenceRow& row) const override;
  ForwardPass block_forward(const SequenceRow& row, const KvCache& cache, BlockWindow window,
                            std::span<const int> query) const override;

  const ModelParams& params() const { return params_; }
  std::span<const Token> planted() const { return planted_; }

 private:
  const ModelParams& params_;
  std::vector<Token> planted_;
};

/// Counts top-level forward invocations of the wrapped denoiser.
class CountingDenoiser final : public Denoiser {
 public:
  explicit CountingDenoiser(const Denoiser& inner) : inner_(inner) {}

  const Vocab& vocab() const override { return inner_.vocab(); }
  ForwardPass full_forward(const SequenceRow& row) const override;
  ForwardPass block_forward(const SequenceRow& row, const KvCache& cache, BlockWindow window,
                            std::span<const int> query) const override;
  std::vector<ForwardPass> batched_full_forward(std::span<const SequenceRow* const> rows) const override;
  std::vector<ForwardPass> batched_block_forward(std::span<const BlockQuery> queries) const override;

  std::int64_t calls() const { return calls_; }

 private:
  const Denoiser& inner_;
  mutable std::int64_t calls_ = 0;
};

}  // namespace blockbatch
