// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockbatch/decoding.hpp"

#include <algorithm>
#include <string>

#include "blockbatch/errors.hpp"

namespace blockbatch {

void DecodeConfig::validate() const {
  if (!(tau_conf >= 0.0 && tau_conf <= 1.0)) throw ConfigError("tau_conf must lie in [0, 1]");
  if (gen_len < 1) throw ConfigError("gen_len must be at least 1");
  if (refresh_interval < 1) throw ConfigError("refresh_interval must be at least 1");
  if (block_size < 1) throw ConfigError("block_size must be positive");
}

ProbMap::ProbMap(int length, int width)
    : width_(width),
      probs_(static_cast<std::size_t>(length) * static_cast<std::size_t>(width), 0.0),
      has_(static_cast<std::size_t>(length), 0) {}

double ProbMap::at(int pos, Token token) const {
  return probs_[static_cast<std::size_t>(pos) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(token)];
}

std::span<const double> ProbMap::row(int pos) const {
  return {probs_.data() + static_cast<std::size_t>(pos) * static_cast<std::size_t>(width_),
          static_cast<std::size_t>(width_)};
}

void ProbMap::update(const DenoiseOutput& output) {
  if (output.width != width_) throw ContractError("probability map width mismatch");
  for (std::size_t i = 0; i < output.size(); ++i) {
    const auto src = output.probs_row(i);
    const auto p = static_cast<std::size_t>(output.positions[i]);
    std::copy(src.begin(), src.end(), probs_.begin() + static_cast<std::ptrdiff_t>(p * static_cast<std::size_t>(width_)));
    has_[p] = 1;
  }
}

BranchState make_branch(int index, int block_size, const SequenceRow& row, int output_width) {
  BranchState b;
  b.index = index;
  b.block_size = block_size;
  b.window = {row.prompt_len, std::min(row.prompt_len + block_size, row.length())};
  b.done = b.window.empty();
  b.prob_map = ProbMap(row.length(), output_width);
  return b;
}

namespace decoding {

std::vector<Commit> evaluate_transition(const DenoiseOutput& output, const SequenceRow& row, BlockWindow window,
                                        double tau, const Vocab& vocab) {
  const auto expected = masked_positions(row, window, vocab);
  if (output.positions != expected)
    throw ContractError("denoise output does not cover exactly the masked window positions");

  struct Choice {
    int pos;
    Token token;
    double conf;
  };
  std::vector<Choice> choices;
  choices.reserve(expected.size());
  for (std::size_t i = 0; i < output.size(); ++i) {
    const auto probs = output.probs_row(i);
    const auto best = std::max_element(probs.begin(), probs.end());  // first max: lowest id
    choices.push_back({output.positions[i], static_cast<Token>(best - probs.begin()), *best});
  }
  if (choices.empty()) return {};

  std::size_t star = 0;
  for (std::size_t i = 1; i < choices.size(); ++i)
    if (choices[i].conf > choices[star].conf) star = i;

  std::vector<Commit> commits;
  for (std::size_t i = 0; i < choices.size(); ++i)
    if (choices[i].conf >= tau || i == star) commits.push_back({choices[i].pos, choices[i].token});
  return commits;
}

std::vector<Commit> confidence_transition(const DenoiseOutput& output, SequenceRow& row, BlockWindow window,
                                          double tau, const Vocab& vocab) {
  auto commits = evaluate_transition(output, row, window, tau, vocab);
  for (const Commit& c : commits) row.tokens[static_cast<std::size_t>(c.pos)] = c.token;
  return commits;
}

bool window_complete(const SequenceRow& row, BlockWindow window, const Vocab& vocab) {
  return count_masks(row, window, vocab) == 0;
}

void advance_block(BranchState& branch, const SequenceRow& row, const Vocab& vocab) {
  if (!window_complete(row, branch.window, vocab)) throw ContractError("advance_block on an incomplete window");
  const int len = row.length();
  branch.window.start = branch.window.end;
  branch.window.end = std::min(branch.window.start + branch.block_size, len);
  if (branch.window.start >= len) {
    branch.window = {len, len};
    branch.done = true;
  }
}

void advance_completed(BranchState& branch, const SequenceRow& row, const Vocab& vocab) {
  while (!branch.done && window_complete(row, branch.window, vocab)) advance_block(branch, row, vocab);
}

void realign_window(BranchState& branch, const SequenceRow& row, const Vocab& vocab) {
  const int len = row.length();
  int first = len;
  for (int p = row.prompt_len; p < len; ++p) {
    if (row.is_mask(p, vocab)) {
      first = p;
      break;
    }
  }
  branch.window = {first, std::min(first + branch.block_size, len)};
  branch.done = first >= len;
}

std::optional<int> earliest_eos(const SequenceRow& row, const Vocab& vocab) {
  for (int p = row.prompt_len; p < row.length(); ++p)
    if (row.tokens[static_cast<std::size_t>(p)] == vocab.eos_id()) return p;
  return std::nullopt;
}

EosStatus check_eos(const SequenceRow& row, const Vocab& vocab) {
  const auto e = earliest_eos(row, vocab);
  if (!e) return EosStatus::kNone;
  return count_masks(row, {row.prompt_len, *e}, vocab) == 0 ? EosStatus::kReady : EosStatus::kPending;
}

BlockWindow decode_window(const BranchState& branch, const SequenceRow& row, const Vocab& vocab) {
  BlockWindow w = branch.window;
  const auto e = earliest_eos(row, vocab);
  if (e && *e > w.start && count_masks(row, {row.prompt_len, *e}, vocab) > 0) w.end = std::min(w.end, *e);
  return w;
}

namespace {

// Event bookkeeping shared by the single-branch decoders.
class Recorder {
 public:
  Recorder(const CountingDenoiser& counter, CacheObserver* observer) : counter_(counter), observer_(observer) {}

  TraceEvent& emit(EventKind kind, int branch, int decoded, const NfeCounter& nfe) {
    TraceEvent ev;
    ev.step = step_++;
    ev.kind = kind;
    ev.branch = branch;
    ev.decoded = {decoded};
    ev.nfe = nfe;
    ev.calls = counter_.calls();
    trace.events.push_back(std::move(ev));
    return trace.events.back();
  }

  void observe(TraceEvent& ev, const SequenceRow& row, const KvCache* before, const KvCache& after) {
    if (!observer_) return;
    CacheEvent ce{ev.kind, ev.step, 0, &row, before, &after};
    if (auto m = observer_->on_cache_event(ce)) ev.kv.push_back(*m);
  }

  void finish() {
    if (observer_) observer_->on_finish(trace);
  }

  Trace trace;

 private:
  const CountingDenoiser& counter_;
  CacheObserver* observer_;
  std::int64_t step_ = 0;
};

GenerationResult make_result(const SequenceRow& row, const Task& task, int block_size, StopReason stop,
                             const NfeCounter& nfe, const Vocab& vocab) {
  GenerationResult r;
  r.row = row;
  r.generated = generated_tokens(row, vocab);
  r.block_size = block_size;
  r.tokens_decoded = count_committed_generation(row, vocab);
  r.stop = stop;
  r.nfe = nfe;
  r.correct = exact_match(row, task, vocab);
  return r;
}

}  // namespace

DecodeRun single_branch_decode(const Denoiser& model, const Task& task, const DecodeConfig& cfg,
                               const DecodeOptions& options) {
  cfg.validate();
  if (cfg.gen_len != task.gen_len()) throw ConfigError("gen_len does not match the task");
  const Vocab& vocab = model.vocab();
  CountingDenoiser counter(model);
  Recorder rec(counter, options.observer);

  SequenceRow row = options.initial_row ? *options.initial_row : task.initial_row(vocab);
  if (row.prompt_len != static_cast<int>(task.prompt.size()) || row.gen_len() != cfg.gen_len)
    throw ContractError("initial row does not match the task shape");
  const std::int64_t cap = static_cast<std::int64_t>(cfg.gen_len) * 4 + 8;

  NfeCounter nfe;
  BranchState branch = make_branch(0, cfg.block_size, row, vocab.output_size());
  branch.tokens_decoded = count_committed_generation(row, vocab);

  auto pass = counter.full_forward(row);
  nfe.init += 1;
  KvCache cache = std::move(pass.cache);
  {
    auto& ev = rec.emit(EventKind::kInit, -1, branch.tokens_decoded, nfe);
    rec.observe(ev, row, nullptr, cache);
  }

  auto decode = [&](const DenoiseOutput& out, BlockWindow dw) {
    auto commits = confidence_transition(out.restricted_to(dw), row, dw, cfg.tau_conf, vocab);
    branch.tokens_decoded += static_cast<int>(commits.size());
    auto& ev = rec.emit(EventKind::kDecode, 0, branch.tokens_decoded, nfe);
    ev.window = dw;
    ev.commits = std::move(commits);
  };

  advance_completed(branch, row, vocab);
  if (!branch.done) decode(pass.output, decode_window(branch, row, vocab));
  advance_completed(branch, row, vocab);

  int since_refresh = 0;
  EosStatus last_status = EosStatus::kNone;
  while (!branch.done) {
    if (counter.calls() >= cap) throw RunawayError("single-branch decode exceeded its forward budget");
    const BlockWindow dw = decode_window(branch, row, vocab);
    const auto query = masked_positions(row, dw, vocab);
    if (query.empty()) throw StateError("active branch has nothing to decode");

    auto step = counter.block_forward(row, cache, branch.window, query);
    nfe.block += 1;
    ++since_refresh;
    {
      auto& ev = rec.emit(EventKind::kBlockForward, -1, branch.tokens_decoded, nfe);
      rec.observe(ev, row, &cache, step.cache);
    }
    cache = std::move(step.cache);
    decode(step.output, dw);

    const EosStatus status = check_eos(row, vocab);
    if (status == EosStatus::kPending && last_status != EosStatus::kPending) {
      rec.emit(EventKind::kEosPending, 0, branch.tokens_decoded, nfe).eos_pos = *earliest_eos(row, vocab);
    }
    last_status = status;
    if (status == EosStatus::kReady) {
      rec.emit(EventKind::kEosReady, 0, branch.tokens_decoded, nfe).eos_pos = *earliest_eos(row, vocab);
      branch.done = true;
      auto& fin = rec.emit(EventKind::kFinish, 0, branch.tokens_decoded, nfe);
      fin.winner = 0;
      fin.winner_block_size = cfg.block_size;
      fin.reason = "eos";
      rec.finish();
      return {make_result(row, task, cfg.block_size, StopReason::kEos, nfe, vocab), std::move(rec.trace),
              counter.calls()};
    }

    advance_completed(branch, row, vocab);
    if (!branch.done && since_refresh >= cfg.refresh_interval) {
      auto fresh = counter.full_forward(row);
      nfe.refresh += 1;
      since_refresh = 0;
      branch.prob_map.update(fresh.output);
      auto& ev = rec.emit(EventKind::kRefresh, -1, branch.tokens_decoded, nfe);
      rec.observe(ev, row, &cache, fresh.cache);
      cache = std::move(fresh.cache);
    }
  }

  auto& fin = rec.emit(EventKind::kFinish, 0, branch.tokens_decoded, nfe);
  fin.winner = 0;
  fin.winner_block_size = cfg.block_size;
  fin.reason = "exhausted";
  rec.finish();
  return {make_result(row, task, cfg.block_size, StopReason::kExhausted, nfe, vocab), std::move(rec.trace),
          counter.calls()};
}

DecodeRun vanilla_decode(const Denoiser& model, const Task& task, int gen_len, const DecodeOptions& options) {
  if (gen_len != task.gen_len()) throw ConfigError("gen_len does not match the task");
  const Vocab& vocab = model.vocab();
  CountingDenoiser counter(model);
  Recorder rec(counter, nullptr);

  SequenceRow row = options.initial_row ? *options.initial_row : task.initial_row(vocab);
  BranchState branch = make_branch(0, gen_len, row, vocab.output_size());
  branch.tokens_decoded = count_committed_generation(row, vocab);
  NfeCounter nfe;
  StopReason stop = StopReason::kExhausted;
  EosStatus last_status = EosStatus::kNone;

  advance_completed(branch, row, vocab);
  while (!branch.done) {
    const BlockWindow dw = decode_window(branch, row, vocab);
    auto pass = counter.full_forward(row);
    (nfe.init == 0 ? nfe.init : nfe.block) += 1;
    rec.emit(nfe.block == 0 ? EventKind::kInit : EventKind::kBlockForward, -1, branch.tokens_decoded, nfe);
    auto commits = confidence_transition(pass.output.restricted_to(dw), row, dw, 1.0, vocab);
    branch.tokens_decoded += static_cast<int>(commits.size());
    auto& ev = rec.emit(EventKind::kDecode, 0, branch.tokens_decoded, nfe);
    ev.window = dw;
    ev.commits = std::move(commits);

    const EosStatus status = check_eos(row, vocab);
    if (status == EosStatus::kPending && last_status != EosStatus::kPending)
      rec.emit(EventKind::kEosPending, 0, branch.tokens_decoded, nfe).eos_pos = *earliest_eos(row, vocab);
    last_status = status;
    if (status == EosStatus::kReady) {
      rec.emit(EventKind::kEosReady, 0, branch.tokens_decoded, nfe).eos_pos = *earliest_eos(row, vocab);
      stop = StopReason::kEos;
      break;
    }
    advance_completed(branch, row, vocab);
  }
  auto& fin = rec.emit(EventKind::kFinish, 0, branch.tokens_decoded, nfe);
  fin.winner = 0;
  fin.winner_block_size = gen_len;
  fin.reason = stop == StopReason::kEos ? "eos" : "exhausted";
  return {make_result(row, task, gen_len, stop, nfe, vocab), std::move(rec.trace), counter.calls()};
}

}  // namespace decoding
}  // namespace blockbatch
