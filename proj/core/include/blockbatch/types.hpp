// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace blockbatch {

using Token = std::int32_t;

/// Token categories used by the agreement profiles. Regular tokens are split
/// into four contiguous ranges; eos falls into kOther.
enum class TokenCategory : std::uint8_t { kDigit = 0, kOperator, kWhitespace, kWord, kOther };
inline constexpr int kNumCategories = 5;

std::string_view category_name(TokenCategory c);

/// Extended vocabulary. Regular tokens are [0, size); eos_id = size and
/// mask_id = size + 1. Model outputs cover [0, size] (regular + eos), never
/// the mask token.
class Vocab {
 public:
  explicit Vocab(int size = 32);

  int size() const { return size_; }
  Token eos_id() const { return size_; }
  Token mask_id() const { return size_ + 1; }
  /// Number of ids a denoiser can emit (regular tokens plus eos).
  int output_size() const { return size_ + 1; }
  /// Number of ids including the mask token (embedding table rows).
  int extended_size() const { return size_ + 2; }

  bool is_regular(Token t) const { return t >= 0 && t < size_; }
  TokenCategory category_of(Token t) const;

  friend bool operator==(const Vocab&, const Vocab&) = default;

 private:
  int size_;
};

/// Half-open absolute position range [start, end).
struct BlockWindow {
  int start = 0;
  int end = 0;

  int size() const { return end - start; }
  bool empty() const { return end <= start; }
  bool contains(int p) const { return p >= start && p < end; }
  friend bool operator==(const BlockWindow&, const BlockWindow&) = default;
};

/// One branch's token buffer: prompt followed by the generation region.
struct SequenceRow {
  std::vector<Token> tokens;
  int prompt_len = 0;

  int length() const { return static_cast<int>(tokens.size()); }
  int gen_len() const { return length() - prompt_len; }
  bool is_mask(int p, const Vocab& v) const { return tokens[static_cast<std::size_t>(p)] == v.mask_id(); }

  /// Prompt followed by gen_len mask tokens.
  static SequenceRow masked(std::span<const Token> prompt, int gen_len, const Vocab& v);

  friend bool operator==(const SequenceRow&, const SequenceRow&) = default;
};

struct Commit {
  int pos = 0;
  Token token = 0;
  friend bool operator==(const Commit&, const Commit&) = default;
};

int count_masks(const SequenceRow& row, BlockWindow w, const Vocab& v);
/// Masked positions of `w`, ascending.
std::vector<int> masked_positions(const SequenceRow& row, BlockWindow w, const Vocab& v);
/// Non-mask positions in the generation region.
int count_committed_generation(const SequenceRow& row, const Vocab& v);

}  // namespace blockbatch
