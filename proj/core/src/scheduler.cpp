// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockbatch/scheduler.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <string>

#include "blockbatch/errors.hpp"

namespace blockbatch {

void SchedulerConfig::validate() const {
  if (block_sizes.empty()) throw ConfigError("block_sizes must not be empty");
  std::set<int> seen;
  for (int b : block_sizes) {
    if (b <= 0) throw ConfigError("block_sizes must be positive");
    if (!seen.insert(b).second) throw ConfigError("block_sizes must be distinct");
  }
  if (!(tau_conf >= 0.0 && tau_conf <= 1.0)) throw ConfigError("tau_conf must lie in [0, 1]");
  if (!(tau_merge >= 0.0 && tau_merge <= 1.0)) throw ConfigError("tau_merge must lie in [0, 1]");
  if (sync_enabled && tau_sync < 0) throw ConfigError("tau_sync must be non-negative");
  if (refresh_interval < 1) throw ConfigError("refresh_interval must be at least 1");
  if (gen_len < 1) throw ConfigError("gen_len must be at least 1");
}

namespace scheduler {

InitResult init_full_forward(const Denoiser& model, BranchSet& set, NfeCounter& nfe) {
  if (set.rows.empty()) throw ContractError("init_full_forward needs at least one branch");
  for (const auto& r : set.rows)
    if (r != set.rows.front()) throw ContractError("init_full_forward requires identical rows");

  auto pass = model.full_forward(set.rows.front());
  nfe.init += 1;
  InitResult out;
  set.caches.assign(set.rows.size(), pass.cache);
  for (auto& b : set.branches) {
    b.prob_map.update(pass.output);
    out.outputs.push_back(pass.output.restricted_to(b.window));
  }
  out.cache = std::move(pass.cache);
  return out;
}

std::vector<int> get_active_branches(const BranchSet& set, const Vocab& vocab) {
  std::vector<int> active;
  for (std::size_t k = 0; k < set.size(); ++k) {
    const auto& b = set.branches[k];
    if (b.done) continue;
    if (count_masks(set.rows[k], decoding::decode_window(b, set.rows[k], vocab), vocab) > 0)
      active.push_back(static_cast<int>(k));
  }
  return active;
}

PackedQuery pack_active_blocks(const BranchSet& set, std::span<const int> active, const Vocab& vocab) {
  if (active.empty()) throw ContractError("pack_active_blocks needs at least one active branch");
  PackedQuery p;
  p.offsets.push_back(0);
  for (int k : active) {
    const auto& b = set.branches[static_cast<std::size_t>(k)];
    const auto& row = set.rows[static_cast<std::size_t>(k)];
    const auto qs = masked_positions(row, decoding::decode_window(b, row, vocab), vocab);
    p.branches.push_back(k);
    p.windows.push_back(b.window);
    p.positions.insert(p.positions.end(), qs.begin(), qs.end());
    p.offsets.push_back(p.positions.size());
  }
  return p;
}

std::vector<DenoiseOutput> batched_block_forward(const Denoiser& model, const PackedQuery& packed, BranchSet& set,
                                                 NfeCounter& nfe) {
  std::vector<BlockQuery> queries;
  queries.reserve(packed.branches.size());
  for (std::size_t i = 0; i < packed.branches.size(); ++i) {
    const auto k = static_cast<std::size_t>(packed.branches[i]);
    queries.push_back({&set.rows[k], &set.caches[k], packed.windows[i], packed.queries_of(i)});
  }
  auto passes = model.batched_block_forward(queries);
  nfe.block += 1;
  std::vector<DenoiseOutput> outs;
  outs.reserve(passes.size());
  for (std::size_t i = 0; i < passes.size(); ++i) {
    set.caches[static_cast<std::size_t>(packed.branches[i])] = std::move(passes[i].cache);
    outs.push_back(std::move(passes[i].output));
  }
  return outs;
}

bool compatible(const SequenceRow& dest, const SequenceRow& source, const Vocab& vocab) {
  if (dest.length() != source.length()) return false;
  const Token m = vocab.mask_id();
  for (std::size_t p = 0; p < dest.tokens.size(); ++p) {
    const Token a = dest.tokens[p];
    const Token b = source.tokens[p];
    if (a != m && b != m && a != b) return false;
  }
  return true;
}

int leader_of(const BranchSet& set) {
  int lead = 0;
  for (std::size_t k = 1; k < set.size(); ++k) {
    const auto& b = set.branches[k];
    const auto& l = set.branches[static_cast<std::size_t>(lead)];
    if (b.tokens_decoded > l.tokens_decoded ||
        (b.tokens_decoded == l.tokens_decoded && b.block_size < l.block_size))
      lead = static_cast<int>(k);
  }
  return lead;
}

std::vector<MergeSyncAction> merge_sync(BranchSet& set, const SchedulerConfig& cfg, const Vocab& vocab) {
  std::vector<MergeSyncAction> actions;
  if (set.size() == 0) return actions;
  if (set.branches[static_cast<std::size_t>(leader_of(set))].tokens_decoded == 0) return actions;
  const Token mask = vocab.mask_id();

  if (cfg.merge_enabled) {
    std::vector<int> order;
    for (std::size_t k = 0; k < set.size(); ++k)
      if (!set.branches[k].done) order.push_back(static_cast<int>(k));
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return set.branches[static_cast<std::size_t>(a)].tokens_decoded <
             set.branches[static_cast<std::size_t>(b)].tokens_decoded;
    });

    for (int d : order) {
      auto& dest = set.branches[static_cast<std::size_t>(d)];
      auto& drow = set.rows[static_cast<std::size_t>(d)];
      if (dest.done) continue;
      std::vector<int> sources;
      for (int s : order)
        if (s != d && compatible(drow, set.rows[static_cast<std::size_t>(s)], vocab)) sources.push_back(s);
      if (sources.empty()) continue;

      std::vector<unsigned char> in_union(static_cast<std::size_t>(drow.length()), 0);
      for (int s : sources) {
        const auto w = set.branches[static_cast<std::size_t>(s)].window;
        for (int p = w.start; p < w.end; ++p) in_union[static_cast<std::size_t>(p)] = 1;
      }
      // A fill can make a source disagree with the destination; such a
      // source is dropped for the rest of this destination's pass.
      std::vector<unsigned char> still_compatible(sources.size(), 1);
      for (int i = 0; i < drow.length(); ++i) {
        const auto ui = static_cast<std::size_t>(i);
        if (!in_union[ui] || drow.tokens[ui] != mask || !dest.prob_map.has(i)) continue;
        int best = -1;
        double best_p = -1.0;
        for (std::size_t si = 0; si < sources.size(); ++si) {
          if (!still_compatible[si]) continue;
          const Token v = set.rows[static_cast<std::size_t>(sources[si])].tokens[ui];
          if (v == mask) continue;
          const double pv = dest.prob_map.at(i, v);
          if (pv > best_p) {
            best_p = pv;
            best = static_cast<int>(si);
          }
        }
        if (best < 0 || !(best_p > cfg.tau_merge)) continue;
        const int s = sources[static_cast<std::size_t>(best)];
        const Token v = set.rows[static_cast<std::size_t>(s)].tokens[ui];
        drow.tokens[ui] = v;
        dest.tokens_merged += 1;
        dest.tokens_decoded += 1;
        actions.push_back({EventKind::kMerge, d, s, i, v, best_p, true, -1, 0});
        for (std::size_t si = 0; si < sources.size(); ++si) {
          const Token w = set.rows[static_cast<std::size_t>(sources[si])].tokens[ui];
          if (w != mask && w != v) still_compatible[si] = 0;
        }
      }
      decoding::advance_completed(dest, drow, vocab);
    }
  }

  if (cfg.sync_enabled) {
    const int lead = leader_of(set);
    const auto ul = static_cast<std::size_t>(lead);
    for (std::size_t d = 0; d < set.size(); ++d) {
      if (static_cast<int>(d) == lead || set.branches[d].done) continue;
      const int gap = set.branches[ul].tokens_decoded - set.branches[d].tokens_decoded;
      if (gap <= cfg.tau_sync) continue;
      set.rows[d] = set.rows[ul];
      set.caches[d] = set.caches[ul];
      set.branches[d].prob_map = set.branches[ul].prob_map;
      decoding::realign_window(set.branches[d], set.rows[d], vocab);
      set.branches[d].tokens_decoded = set.branches[ul].tokens_decoded;
      MergeSyncAction a;
      a.kind = EventKind::kSync;
      a.dest = static_cast<int>(d);
      a.leader = lead;
      a.gap = gap;
      actions.push_back(a);
    }
  }
  return actions;
}

std::vector<int> refresh_if_needed(const Denoiser& model, BranchSet& set, int refresh_interval, int& block_events,
                                   NfeCounter& nfe) {
  if (block_events < refresh_interval) return {};
  std::vector<int> targets;
  std::vector<const SequenceRow*> rows;
  for (std::size_t k = 0; k < set.size(); ++k) {
    if (set.branches[k].done) continue;
    targets.push_back(static_cast<int>(k));
    rows.push_back(&set.rows[k]);
  }
  if (targets.empty()) return {};
  auto passes = model.batched_full_forward(rows);
  nfe.refresh += 1;
  block_events = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto k = static_cast<std::size_t>(targets[i]);
    set.branches[k].prob_map.update(passes[i].output);
    set.caches[k] = std::move(passes[i].cache);
  }
  return targets;
}

int select_eos_winner(const BranchSet& set, const Vocab& vocab) {
  int winner = -1;
  for (std::size_t k = 0; k < set.size(); ++k) {
    if (decoding::check_eos(set.rows[k], vocab) != decoding::EosStatus::kReady) continue;
    if (winner < 0) {
      winner = static_cast<int>(k);
      continue;
    }
    const auto& b = set.branches[k];
    const auto& w = set.branches[static_cast<std::size_t>(winner)];
    if (b.tokens_decoded > w.tokens_decoded || (b.tokens_decoded == w.tokens_decoded && b.block_size < w.block_size))
      winner = static_cast<int>(k);
  }
  if (winner < 0) throw ContractError("select_eos_winner: no branch is eos-ready");
  return winner;
}

}  // namespace scheduler

namespace {

class Run {
 public:
  Run(const Denoiser& model, const Task& task, const SchedulerConfig& cfg, const BlockBatchOptions& options)
      : counter_(model), task_(task), cfg_(cfg), options_(options), vocab_(model.vocab()) {}

  BlockBatchRun execute();

 private:
  TraceEvent& emit(EventKind kind, int branch) {
    TraceEvent ev;
    ev.step = step_++;
    ev.kind = kind;
    ev.branch = branch;
    for (const auto& b : set_.branches) ev.decoded.push_back(b.tokens_decoded);
    ev.nfe = nfe_;
    ev.calls = counter_.calls();
    trace_.events.push_back(std::move(ev));
    return trace_.events.back();
  }

  void observe(TraceEvent& ev, int branch, const KvCache* before) {
    if (!options_.observer) return;
    const auto k = static_cast<std::size_t>(branch);
    CacheEvent ce{ev.kind, ev.step, branch, &set_.rows[k], before, &set_.caches[k]};
    if (auto m = options_.observer->on_cache_event(ce)) ev.kv.push_back(*m);
  }

  void decode(int k, const DenoiseOutput& out) {
    auto& b = set_.branches[static_cast<std::size_t>(k)];
    auto& row = set_.rows[static_cast<std::size_t>(k)];
    const BlockWindow dw = decoding::decode_window(b, row, vocab_);
    auto commits = decoding::confidence_transition(out.restricted_to(dw), row, dw, cfg_.tau_conf, vocab_);
    b.tokens_decoded += static_cast<int>(commits.size());
    auto& ev = emit(EventKind::kDecode, k);
    ev.window = dw;
    ev.commits = std::move(commits);
  }

  void advance_all() {
    for (std::size_t k = 0; k < set_.size(); ++k) decoding::advance_completed(set_.branches[k], set_.rows[k], vocab_);
  }

  void merge_sync_step() {
    std::vector<KvCache> before;
    if (options_.observer) before = set_.caches;
    for (const auto& a : scheduler::merge_sync(set_, cfg_, vocab_)) {
      auto& ev = emit(a.kind, a.dest);
      if (a.kind == EventKind::kMerge) {
        ev.source = a.source;
        ev.pos = a.pos;
        ev.token = a.token;
        ev.p_dest = a.p_dest;
        ev.compatible = a.compatible;
      } else {
        ev.leader = a.leader;
        ev.gap = a.gap;
        ev.window = set_.branches[static_cast<std::size_t>(a.dest)].window;
        observe(ev, a.dest, options_.observer ? &before[static_cast<std::size_t>(a.dest)] : nullptr);
      }
    }
  }

  void refresh_step() {
    std::vector<KvCache> before;
    if (options_.observer && block_events_ >= cfg_.refresh_interval) before = set_.caches;
    const auto refreshed = scheduler::refresh_if_needed(counter_, set_, cfg_.refresh_interval, block_events_, nfe_);
    if (refreshed.empty()) return;
    auto& ev = emit(EventKind::kRefresh, -1);
    for (int k : refreshed) observe(ev, k, options_.observer ? &before[static_cast<std::size_t>(k)] : nullptr);
  }

  BlockBatchRun finish(int winner, StopReason stop) {
    auto& ev = emit(EventKind::kFinish, winner);
    ev.winner = winner;
    ev.winner_block_size = set_.branches[static_cast<std::size_t>(winner)].block_size;
    ev.reason = stop == StopReason::kEos ? "eos" : "exhausted";
    if (options_.observer) options_.observer->on_finish(trace_);

    const auto& row = set_.rows[static_cast<std::size_t>(winner)];
    BlockBatchRun out;
    out.result.row = row;
    out.result.generated = generated_tokens(row, vocab_);
    out.result.branch = winner;
    out.result.block_size = set_.branches[static_cast<std::size_t>(winner)].block_size;
    out.result.tokens_decoded = set_.branches[static_cast<std::size_t>(winner)].tokens_decoded;
    out.result.stop = stop;
    out.result.nfe = nfe_;
    out.result.correct = exact_match(row, task_, vocab_);
    out.trace = std::move(trace_);
    out.forward_calls = counter_.calls();
    return out;
  }

  CountingDenoiser counter_;
  const Task& task_;
  SchedulerConfig cfg_;
  const BlockBatchOptions& options_;
  const Vocab& vocab_;
  BranchSet set_;
  NfeCounter nfe_;
  Trace trace_;
  std::int64_t step_ = 0;
  int block_events_ = 0;
};

BlockBatchRun Run::execute() {
  cfg_.validate();
  if (cfg_.gen_len != task_.gen_len()) throw ConfigError("gen_len does not match the task");
  std::sort(cfg_.block_sizes.begin(), cfg_.block_sizes.end());

  auto& h = trace_.header;
  h.mode = "blockbatch";
  h.task_seed = task_.seed;
  h.block_sizes = cfg_.block_sizes;
  h.tau_conf = cfg_.tau_conf;
  h.tau_merge = cfg_.tau_merge;
  h.tau_sync = cfg_.sync_enabled ? cfg_.tau_sync : -1;
  h.merge_enabled = cfg_.merge_enabled;
  h.refresh_interval = cfg_.refresh_interval;
  h.prompt_len = static_cast<int>(task_.prompt.size());
  h.gen_len = cfg_.gen_len;

  const SequenceRow initial = task_.initial_row(vocab_);
  for (std::size_t k = 0; k < cfg_.block_sizes.size(); ++k) {
    set_.rows.push_back(initial);
    set_.branches.push_back(make_branch(static_cast<int>(k), cfg_.block_sizes[k], initial, vocab_.output_size()));
  }
  const std::int64_t cap =
      static_cast<std::int64_t>(cfg_.gen_len) * static_cast<std::int64_t>(cfg_.block_sizes.size()) * 4;

  auto init = scheduler::init_full_forward(counter_, set_, nfe_);
  {
    auto& ev = emit(EventKind::kInit, -1);
    for (std::size_t k = 0; k < set_.size(); ++k) observe(ev, static_cast<int>(k), nullptr);
  }
  advance_all();
  for (std::size_t k = 0; k < set_.size(); ++k)
    if (!set_.branches[k].done) decode(static_cast<int>(k), init.outputs[k]);
  advance_all();
  merge_sync_step();
  refresh_step();

  std::vector<decoding::EosStatus> last(set_.size(), decoding::EosStatus::kNone);
  while (std::any_of(set_.branches.begin(), set_.branches.end(), [](const BranchState& b) { return !b.done; })) {
    if (counter_.calls() >= cap) throw RunawayError("blockbatch exceeded its forward budget");
    const auto active = scheduler::get_active_branches(set_, vocab_);
    if (active.empty()) throw StateError("unfinished branches but nothing to decode");
    const auto packed = scheduler::pack_active_blocks(set_, active, vocab_);
    if (options_.on_batch) options_.on_batch(packed, set_);

    std::vector<KvCache> before;
    if (options_.observer)
      for (int k : active) before.push_back(set_.caches[static_cast<std::size_t>(k)]);
    const auto outs = scheduler::batched_block_forward(counter_, packed, set_, nfe_);
    ++block_events_;
    {
      auto& ev = emit(EventKind::kBlockForward, -1);
      for (std::size_t i = 0; i < active.size(); ++i)
        observe(ev, active[i], options_.observer ? &before[i] : nullptr);
    }

    bool any_ready = false;
    for (std::size_t i = 0; i < active.size(); ++i) {
      const int k = active[i];
      const auto uk = static_cast<std::size_t>(k);
      decode(k, outs[i]);
      set_.branches[uk].prob_map.update(outs[i]);
      const auto status = decoding::check_eos(set_.rows[uk], vocab_);
      if (status == decoding::EosStatus::kPending && last[uk] != decoding::EosStatus::kPending)
        emit(EventKind::kEosPending, k).eos_pos = *decoding::earliest_eos(set_.rows[uk], vocab_);
      last[uk] = status;
      any_ready = any_ready || status == decoding::EosStatus::kReady;
    }
    if (any_ready) {
      for (std::size_t k = 0; k < set_.size(); ++k)
        if (decoding::check_eos(set_.rows[k], vocab_) == decoding::EosStatus::kReady)
          emit(EventKind::kEosReady, static_cast<int>(k)).eos_pos = *decoding::earliest_eos(set_.rows[k], vocab_);
      const int winner = scheduler::select_eos_winner(set_, vocab_);
      set_.branches[static_cast<std::size_t>(winner)].done = true;
      return finish(winner, StopReason::kEos);
    }

    advance_all();
    merge_sync_step();
    refresh_step();
  }

  int winner = 0;
  for (std::size_t k = 1; k < set_.size(); ++k)
    if (set_.branches[k].tokens_decoded > set_.branches[static_cast<std::size_t>(winner)].tokens_decoded)
      winner = static_cast<int>(k);
  return finish(winner, StopReason::kExhausted);
}

}  // namespace

BlockBatchRun run_blockbatch(const Denoiser& model, const Task& task, const SchedulerConfig& cfg,
                             const BlockBatchOptions& options) {
  Run run(model, task, cfg, options);
  return run.execute();
}

}  // namespace blockbatch
