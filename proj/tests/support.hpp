// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

// Independent reference implementations and random-state generators shared
// by the unit tests and the acceptance binary.

#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "blockbatch/decoding.hpp"
#include "blockbatch/model.hpp"
#include "blockbatch/prng.hpp"
#include "blockbatch/scheduler.hpp"

namespace bbtest {

using namespace blockbatch;

/// Commit rule evaluated one position at a time.
inline std::vector<Commit> brute_force_commits(const DenoiseOutput& out, double tau) {
  std::vector<Commit> all;
  std::vector<double> conf;
  for (std::size_t k = 0; k < out.size(); ++k) {
    const auto p = out.probs_row(k);
    Token best = 0;
    for (int v = 1; v < out.width; ++v)
      if (p[static_cast<std::size_t>(v)] > p[static_cast<std::size_t>(best)]) best = v;
    all.push_back({out.positions[k], best});
    conf.push_back(p[static_cast<std::size_t>(best)]);
  }
  if (all.empty()) return {};
  std::size_t star = 0;
  for (std::size_t k = 1; k < all.size(); ++k)
    if (conf[k] > conf[star]) star = k;
  std::vector<Commit> chosen;
  for (std::size_t k = 0; k < all.size(); ++k)
    if (conf[k] >= tau || k == star) chosen.push_back(all[k]);
  return chosen;
}

/// Two rows agree wherever both are committed.
inline bool brute_force_compatible(const SequenceRow& a, const SequenceRow& b, const Vocab& v) {
  if (a.length() != b.length()) return false;
  for (int p = 0; p < a.length(); ++p)
    if (!a.is_mask(p, v) && !b.is_mask(p, v) && a.tokens[static_cast<std::size_t>(p)] != b.tokens[static_cast<std::size_t>(p)])
      return false;
  return true;
}

/// Random probability rows over `positions`; `ties` makes equal rows likely.
inline DenoiseOutput random_output(SplitMix64& rng, std::vector<int> positions, int width, bool ties = false) {
  DenoiseOutput out;
  out.width = width;
  out.positions = std::move(positions);
  for (std::size_t k = 0; k < out.positions.size(); ++k) {
    std::vector<double> w(static_cast<std::size_t>(width));
    double sum = 0;
    for (auto& x : w) {
      x = ties ? static_cast<double>(rng.below(3)) : std::pow(rng.unit(), 4.0);
      sum += x;
    }
    if (sum == 0) {
      w[0] = 1;
      sum = 1;
    }
    for (auto& x : w) {
      out.probs.push_back(x / sum);
      out.logits.push_back(std::log(x / sum + 1e-300));
    }
  }
  return out;
}

/// Random merge/sync state: branches share a prompt and commit random
/// subsets of a common truth, with occasional disagreeing tokens.
inline BranchSet random_branch_set(SplitMix64& rng, const Vocab& vocab, int prompt_len, int gen_len) {
  const int len = prompt_len + gen_len;
  std::vector<Token> truth(static_cast<std::size_t>(len));
  for (auto& t : truth) t = static_cast<Token>(rng.below(static_cast<std::uint64_t>(vocab.size())));
  static const int kSizes[] = {1, 2, 4, 8, 16};
  const int nb = 2 + static_cast<int>(rng.below(4));
  std::vector<int> sizes;
  for (int k = 0; k < nb; ++k) sizes.push_back(kSizes[rng.below(5)]);
  std::sort(sizes.begin(), sizes.end());

  BranchSet set;
  const double density = rng.unit();
  const double noise = rng.unit() < 0.5 ? 0.0 : 0.1 * rng.unit();
  for (int k = 0; k < nb; ++k) {
    SequenceRow row;
    row.prompt_len = prompt_len;
    row.tokens.assign(static_cast<std::size_t>(len), vocab.mask_id());
    for (int p = 0; p < prompt_len; ++p) row.tokens[static_cast<std::size_t>(p)] = truth[static_cast<std::size_t>(p)];
    for (int p = prompt_len; p < len; ++p) {
      if (rng.unit() >= density * rng.unit() * 2) continue;
      row.tokens[static_cast<std::size_t>(p)] =
          rng.unit() < noise ? static_cast<Token>(rng.below(static_cast<std::uint64_t>(vocab.output_size())))
                             : truth[static_cast<std::size_t>(p)];
    }
    BranchState b = make_branch(k, sizes[static_cast<std::size_t>(k)], row, vocab.output_size());
    decoding::realign_window(b, row, vocab);
    b.tokens_decoded = count_committed_generation(row, vocab);
    std::vector<int> covered;
    for (int p = prompt_len; p < len; ++p)
      if (rng.unit() < 0.8) covered.push_back(p);
    b.prob_map.update(random_output(rng, covered, vocab.output_size()));
    set.rows.push_back(std::move(row));
    set.caches.emplace_back(1, len, 1);
    set.branches.push_back(std::move(b));
  }
  return set;
}

}  // namespace bbtest
