// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockbatch/types.hpp"

#include "blockbatch/errors.hpp"

namespace blockbatch {

std::string_view category_name(TokenCategory c) {
  switch (c) {
    case TokenCategory::kDigit:
      return "digit";
    case TokenCategory::kOperator:
      return "operator";
    case TokenCategory::kWhitespace:
      return "whitespace";
    case TokenCategory::kWord:
      return "word";
    case TokenCategory::kOther:
      return "other";
  }
  return "other";
}

Vocab::Vocab(int size) : size_(size) {
  if (size < 4) throw ConfigError("vocab size must be at least 4, got " + std::to_string(size));
}

TokenCategory Vocab::category_of(Token t) const {
  if (!is_regular(t)) return TokenCategory::kOther;
  // Four contiguous ranges of (almost) equal width.
  const int c = static_cast<int>((static_cast<long long>(t) * 4) / size_);
  return static_cast<TokenCategory>(c);
}

SequenceRow SequenceRow::masked(std::span<const Token> prompt, int gen_len, const Vocab& v) {
  SequenceRow row;
  row.prompt_len = static_cast<int>(prompt.size());
  row.tokens.assign(prompt.begin(), prompt.end());
  row.tokens.resize(prompt.size() + static_cast<std::size_t>(gen_len), v.mask_id());
  return row;
}

int count_masks(const SequenceRow& row, BlockWindow w, const Vocab& v) {
  int n = 0;
  for (int p = w.start; p < w.end; ++p) n += row.is_mask(p, v) ? 1 : 0;
  return n;
}

std::vector<int> masked_positions(const SequenceRow& row, BlockWindow w, const Vocab& v) {
  std::vector<int> out;
  for (int p = w.start; p < w.end; ++p)
    if (row.is_mask(p, v)) out.push_back(p);
  return out;
}

int count_committed_generation(const SequenceRow& row, const Vocab& v) {
  return row.gen_len() - count_masks(row, {row.prompt_len, row.length()}, v);
}

}  // namespace blockbatch
