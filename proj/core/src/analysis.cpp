// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockbatch/analysis.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "blockbatch/errors.hpp"

namespace blockbatch {

int bifurcation_length(std::span<const Token> a, std::span<const Token> b) {
  const std::size_t n = std::min(a.size(), b.size());
  std::size_t k = 0;
  while (k < n && a[k] == b[k]) ++k;
  return static_cast<int>(k);
}

std::vector<BifurcationRecord> bifurcation_records(const std::vector<std::vector<Token>>& outputs,
                                                   std::span<const int> block_sizes) {
  if (block_sizes.size() != outputs.size()) throw ContractError("one block size per output is required");
  std::vector<BifurcationRecord> out;
  for (std::size_t i = 0; i < outputs.size(); ++i)
    for (std::size_t j = i + 1; j < outputs.size(); ++j) {
      BifurcationRecord r;
      r.i = static_cast<int>(i);
      r.j = static_cast<int>(j);
      r.block_i = block_sizes[i];
      r.block_j = block_sizes[j];
      r.prefix = bifurcation_length(outputs[i], outputs[j]);
      if (static_cast<std::size_t>(r.prefix) < std::min(outputs[i].size(), outputs[j].size())) r.divergence = r.prefix;
      out.push_back(r);
    }
  return out;
}

ConsensusMap consensus_map(const std::vector<std::vector<Token>>& outputs) {
  if (outputs.size() < 2) throw ContractError("consensus_map needs at least two outputs");
  ConsensusMap m;
  m.branches = static_cast<int>(outputs.size());
  std::size_t len = 0;
  for (const auto& o : outputs) len = std::max(len, o.size());
  m.tokens.assign(outputs.size(), std::vector<std::optional<Token>>(len));
  m.modal.assign(len, -1);
  m.count.assign(len, 0);
  m.present.assign(len, 0);
  for (std::size_t b = 0; b < outputs.size(); ++b)
    for (std::size_t p = 0; p < outputs[b].size(); ++p) m.tokens[b][p] = outputs[b][p];
  for (std::size_t p = 0; p < len; ++p) {
    std::map<Token, int> tally;
    for (std::size_t b = 0; b < outputs.size(); ++b)
      if (m.tokens[b][p]) ++tally[*m.tokens[b][p]];
    for (const auto& [tok, n] : tally) {
      m.present[p] += n;
      if (n > m.count[p]) {
        m.count[p] = n;
        m.modal[p] = tok;
      }
    }
  }
  return m;
}

std::vector<int> later_stage_consensus(const ConsensusMap& map, std::span<const BifurcationRecord> records) {
  std::optional<int> first;
  for (const auto& r : records)
    if (r.divergence) first = first ? std::min(*first, *r.divergence) : *r.divergence;
  std::vector<int> out;
  if (!first) return out;
  for (int p = *first + 1; p < map.length(); ++p)
    if (map.full(p)) out.push_back(p);
  return out;
}

std::vector<CategoryProfile> category_agreement_profile(std::span<const ConsensusMap> maps, const Vocab& vocab) {
  if (maps.empty()) return {};
  const int branches = maps.front().branches;
  std::vector<CategoryProfile> rows(kNumCategories);
  std::vector<std::int64_t> positions(kNumCategories, 0);
  std::vector<double> score(kNumCategories, 0.0);
  for (int c = 0; c < kNumCategories; ++c) {
    rows[static_cast<std::size_t>(c)].category = static_cast<TokenCategory>(c);
    rows[static_cast<std::size_t>(c)].histogram.assign(static_cast<std::size_t>(branches), 0);
  }
  for (const auto& m : maps) {
    if (m.branches != branches) throw ContractError("consensus maps disagree on the branch count");
    for (int p = 0; p < m.length(); ++p) {
      const auto up = static_cast<std::size_t>(p);
      if (m.present[up] == 0) continue;
      const auto c = static_cast<std::size_t>(vocab.category_of(m.modal[up]));
      ++positions[c];
      ++rows[c].histogram[static_cast<std::size_t>(m.count[up] - 1)];
      score[c] += static_cast<double>(m.count[up]) / static_cast<double>(branches);
    }
  }
  std::vector<CategoryProfile> out;
  for (int c = 0; c < kNumCategories; ++c) {
    const auto uc = static_cast<std::size_t>(c);
    if (positions[uc] == 0) continue;
    rows[uc].positions = static_cast<double>(positions[uc]) / static_cast<double>(maps.size());
    rows[uc].mean_agreement = score[uc] / static_cast<double>(positions[uc]);
    out.push_back(rows[uc]);
  }
  return out;
}

std::vector<CategoryProfile> category_agreement_profile(const ConsensusMap& map, const Vocab& vocab) {
  return category_agreement_profile(std::span<const ConsensusMap>(&map, 1), vocab);
}

SeededReport seeded_consensus_run(const Denoiser& model, const Task& task, const DecodeConfig& cfg,
                                  std::span<const Commit> seeds) {
  const Vocab& vocab = model.vocab();
  SequenceRow row = task.initial_row(vocab);
  std::set<int> seen;
  for (const auto& s : seeds) {
    if (s.pos < 0 || s.pos >= row.length()) throw RangeError("seed position outside the sequence");
    if (s.pos < row.prompt_len) throw ContractError("seed position lies inside the prompt");
    if (!seen.insert(s.pos).second) throw ContractError("seed position repeated");
    if (s.token < 0 || s.token >= vocab.output_size()) throw ContractError("seed token is not an output token");
    row.tokens[static_cast<std::size_t>(s.pos)] = s.token;
  }
  SeededReport r;
  r.baseline = decoding::single_branch_decode(model, task, cfg).result;
  DecodeOptions opt;
  opt.initial_row = row;
  r.seeded = decoding::single_branch_decode(model, task, cfg, opt).result;
  r.delta_acc = static_cast<int>(r.seeded.correct) - static_cast<int>(r.baseline.correct);
  r.delta_nfe = r.baseline.nfe.total() - r.seeded.nfe.total();
  return r;
}

OracleResult select_oracle(std::vector<OracleRow> rows) {
  if (rows.empty()) throw ContractError("oracle needs at least one block size");
  OracleResult out;
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const auto& a = rows[k];
    const auto& b = rows[out.best_index];
    if (a.correct != b.correct) {
      if (a.correct) out.best_index = k;
    } else if (a.nfe.total() != b.nfe.total()) {
      if (a.nfe.total() < b.nfe.total()) out.best_index = k;
    } else if (a.block_size < b.block_size) {
      out.best_index = k;
    }
  }
  out.best_block_size = rows[out.best_index].block_size;
  out.rows = std::move(rows);
  return out;
}

OracleResult oracle_block_size(const Denoiser& model, const Task& task, const DecodeConfig& base,
                               std::span<const int> block_sizes) {
  std::vector<OracleRow> rows;
  for (int b : block_sizes) {
    DecodeConfig cfg = base;
    cfg.block_size = b;
    auto run = decoding::single_branch_decode(model, task, cfg);
    rows.push_back({b, run.result.correct, run.result.nfe, run.result.generated});
  }
  return select_oracle(std::move(rows));
}

}  // namespace blockbatch
