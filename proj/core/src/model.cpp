// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockbatch/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <ostream>
#include <string>

#include "blockbatch/errors.hpp"
#include "blockbatch/prng.hpp"

namespace blockbatch {
namespace {

constexpr std::uint64_t kStreamEmbed = 0;
constexpr std::uint64_t kStreamPos = 1;
constexpr std::uint64_t kStreamHead = 2;
constexpr std::uint64_t kStreamLayerBase = 16;

std::vector<double> gaussian_matrix(std::uint64_t seed, std::uint64_t stream, std::size_t n, double scale) {
  const CounterRng rng(seed, stream);
  std::vector<double> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = rng.normal(i) * scale;
  return m;
}

// y = W x for a d x d row-major W.
void matvec(const std::vector<double>& w, int d, const double* x, double* y) {
  for (int r = 0; r < d; ++r) {
    const double* wr = w.data() + static_cast<std::size_t>(r) * d;
    double s = 0.0;
    for (int c = 0; c < d; ++c) s += wr[c] * x[c];
    y[r] = s;
  }
}

void softmax_into(std::span<const double> logits, std::span<double> probs) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - mx);
    sum += probs[i];
  }
  for (double& p : probs) p /= sum;
}

void check_inputs(const ModelParams& params, const SequenceRow& row, std::span<const Token> planted) {
  const int len = row.length();
  if (len <= 0 || len > params.config.max_len)
    throw ConfigError("sequence length " + std::to_string(len) + " outside (0, " +
                      std::to_string(params.config.max_len) + "]");
  if (static_cast<int>(planted.size()) != len)
    throw ContractError("planted target length does not match the sequence length");
  for (Token t : row.tokens)
    if (t < 0 || t >= params.vocab.extended_size()) throw ContractError("token id outside the extended vocabulary");
}

// Shared kernel: recompute `window` at every layer against `cache`. A full
// forward is this kernel with window [0, L), so the two agree bit-for-bit.
ForwardPass run_window(const ModelParams& params, const SequenceRow& row, KvCache cache, BlockWindow window,
                       std::span<const Token> planted, std::span<const int> query) {
  const int d = params.d();
  const int len = row.length();
  const int nw = window.size();
  const Vocab& vocab = params.vocab;

  std::vector<double> h(static_cast<std::size_t>(nw) * d);
  for (int i = 0; i < nw; ++i) {
    const int p = window.start + i;
    const double* e = params.embeddings.data() + static_cast<std::size_t>(row.tokens[p]) * d;
    const double* pe = params.positional.data() + static_cast<std::size_t>(p) * d;
    for (int c = 0; c < d; ++c) h[static_cast<std::size_t>(i) * d + c] = e[c] + pe[c];
  }

  std::vector<double> q(static_cast<std::size_t>(nw) * d);
  std::vector<double> scores(static_cast<std::size_t>(len));
  std::vector<double> attn(static_cast<std::size_t>(d));
  std::vector<double> proj(static_cast<std::size_t>(d));
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  for (int l = 0; l < params.config.layers; ++l) {
    const auto& layer = params.layers[static_cast<std::size_t>(l)];
    for (int i = 0; i < nw; ++i) {
      const int p = window.start + i;
      const double* x = h.data() + static_cast<std::size_t>(i) * d;
      matvec(layer.wk, d, x, cache.key(l, p).data());
      matvec(layer.wv, d, x, cache.value(l, p).data());
      matvec(layer.wq, d, x, q.data() + static_cast<std::size_t>(i) * d);
    }
    for (int i = 0; i < nw; ++i) {
      const double* qi = q.data() + static_cast<std::size_t>(i) * d;
      double mx = -INFINITY;
      for (int j = 0; j < len; ++j) {
        const double* kj = cache.key(l, j).data();
        double s = 0.0;
        for (int c = 0; c < d; ++c) s += qi[c] * kj[c];
        s *= scale;
        scores[static_cast<std::size_t>(j)] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (int j = 0; j < len; ++j) {
        scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
        z += scores[static_cast<std::size_t>(j)];
      }
      std::fill(attn.begin(), attn.end(), 0.0);
      for (int j = 0; j < len; ++j) {
        const double w = scores[static_cast<std::size_t>(j)] / z;
        const double* vj = cache.value(l, j).data();
        for (int c = 0; c < d; ++c) attn[static_cast<std::size_t>(c)] += w * vj[c];
      }
      matvec(layer.wo, d, attn.data(), proj.data());
      double* hi = h.data() + static_cast<std::size_t>(i) * d;
      for (int c = 0; c < d; ++c) hi[c] += proj[static_cast<std::size_t>(c)];
    }
  }
  for (int p = window.start; p < window.end; ++p) cache.set_valid(p, true);

  ForwardPass out;
  out.cache = std::move(cache);
  DenoiseOutput& o = out.output;
  const int nv = vocab.output_size();
  o.width = nv;
  o.positions.assign(query.begin(), query.end());
  o.logits.resize(query.size() * static_cast<std::size_t>(nv));
  o.probs.resize(o.logits.size());
  for (std::size_t qi = 0; qi < query.size(); ++qi) {
    const int p = query[qi];
    const double* hp = h.data() + static_cast<std::size_t>(p - window.start) * d;
    double* lg = o.logits.data() + qi * static_cast<std::size_t>(nv);
    for (int v = 0; v < nv; ++v) {
      const double* hv = params.head.data() + static_cast<std::size_t>(v) * d;
      double s = 0.0;
      for (int c = 0; c < d; ++c) s += hv[c] * hp[c];
      lg[v] = params.config.head_gain * s;
    }
    const Token target = planted[static_cast<std::size_t>(p)];
    if (target >= 0 && target < nv)
      lg[target] += params.config.gamma * planted_agreement(row, planted, p, params.config.radius, vocab);
    softmax_into({lg, static_cast<std::size_t>(nv)}, {o.probs.data() + qi * static_cast<std::size_t>(nv),
                                                      static_cast<std::size_t>(nv)});
  }
  return out;
}

void write_text(std::ostream& out, const std::vector<double>& m) {
  for (double x : m) out << std::setprecision(17) << x << '\n';
}

void write_binary(std::ostream& out, const std::vector<double>& m) {
  for (double x : m) {
    auto bits = std::bit_cast<std::uint64_t>(x);
    unsigned char buf[8];
    for (int b = 0; b < 8; ++b) buf[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), 8);
  }
}

}  // namespace

ModelParams build_model(std::uint64_t seed, const Vocab& vocab, const ModelConfig& config) {
  if (config.layers <= 0) throw ConfigError("model needs at least one layer");
  if (config.d_model <= 0) throw ConfigError("model width must be positive");
  if (config.max_len <= 0) throw ConfigError("model max_len must be positive");
  if (config.radius < 0) throw ConfigError("planted radius must be non-negative");

  ModelParams p;
  p.seed = seed;
  p.vocab = vocab;
  p.config = config;
  const auto d = static_cast<std::size_t>(config.d_model);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  p.embeddings = gaussian_matrix(seed, kStreamEmbed, static_cast<std::size_t>(vocab.extended_size()) * d, scale);
  p.positional = gaussian_matrix(seed, kStreamPos, static_cast<std::size_t>(config.max_len) * d, scale);
  for (int l = 0; l < config.layers; ++l) {
    const std::uint64_t base = kStreamLayerBase + 4 * static_cast<std::uint64_t>(l);
    ModelParams::Layer layer;
    layer.wq = gaussian_matrix(seed, base + 0, d * d, scale);
    layer.wk = gaussian_matrix(seed, base + 1, d * d, scale);
    layer.wv = gaussian_matrix(seed, base + 2, d * d, scale);
    layer.wo = gaussian_matrix(seed, base + 3, d * d, scale);
    p.layers.push_back(std::move(layer));
  }
  p.head = gaussian_matrix(seed, kStreamHead, static_cast<std::size_t>(vocab.output_size()) * d, scale);
  return p;
}

void dump_params(const ModelParams& params, std::ostream& out, DumpFormat format) {
  auto emit = [&](const std::vector<double>& m) {
    if (format == DumpFormat::kBinary)
      write_binary(out, m);
    else
      write_text(out, m);
  };
  emit(params.embeddings);
  emit(params.positional);
  for (const auto& l : params.layers) {
    emit(l.wq);
    emit(l.wk);
    emit(l.wv);
    emit(l.wo);
  }
  emit(params.head);
}

std::span<const double> DenoiseOutput::logits_row(std::size_t i) const {
  return {logits.data() + i * static_cast<std::size_t>(width), static_cast<std::size_t>(width)};
}

std::span<const double> DenoiseOutput::probs_row(std::size_t i) const {
  return {probs.data() + i * static_cast<std::size_t>(width), static_cast<std::size_t>(width)};
}

DenoiseOutput DenoiseOutput::restricted_to(BlockWindow w) const {
  DenoiseOutput out;
  out.width = width;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (!w.contains(positions[i])) continue;
    out.positions.push_back(positions[i]);
    const auto lr = logits_row(i);
    const auto pr = probs_row(i);
    out.logits.insert(out.logits.end(), lr.begin(), lr.end());
    out.probs.insert(out.probs.end(), pr.begin(), pr.end());
  }
  return out;
}

double planted_agreement(const SequenceRow& row, std::span<const Token> planted, int pos, int radius,
                         const Vocab& vocab) {
  const int lo = std::max(0, pos - radius);
  const int hi = std::min(row.length() - 1, pos + radius);
  int committed = 0;
  int matches = 0;
  for (int j = lo; j <= hi; ++j) {
    if (j == pos || row.is_mask(j, vocab)) continue;
    ++committed;
    if (row.tokens[static_cast<std::size_t>(j)] == planted[static_cast<std::size_t>(j)]) ++matches;
  }
  return committed == 0 ? 0.0 : static_cast<double>(matches) / committed;
}

ForwardPass full_forward(const ModelParams& params, const SequenceRow& row, std::span<const Token> planted) {
  check_inputs(params, row, planted);
  const auto query = masked_positions(row, {0, row.length()}, params.vocab);
  return run_window(params, row, KvCache(params.config.layers, row.length(), params.d()), {0, row.length()},
                    planted, query);
}

ForwardPass block_forward(const ModelParams& params, const SequenceRow& row, const KvCache& cache,
                          BlockWindow window, std::span<const Token> planted, std::span<const int> query) {
  check_inputs(params, row, planted);
  const int len = row.length();
  if (window.start < 0 || window.end > len || window.start > window.end)
    throw RangeError("block window [" + std::to_string(window.start) + ", " + std::to_string(window.end) +
                     ") outside sequence of length " + std::to_string(len));
  if (cache.layers() != params.config.layers || cache.length() != len || cache.width() != params.d())
    throw ContractError("cache dimensions do not match the model and sequence");
  if (!cache.valid_outside(window)) throw ContractError("cache must be valid outside the active window");
  for (std::size_t i = 0; i < query.size(); ++i) {
    const int p = query[i];
    if (!window.contains(p) || !row.is_mask(p, params.vocab))
      throw ContractError("query position " + std::to_string(p) + " is not a masked window position");
    if (i > 0 && query[i - 1] >= p) throw ContractError("query positions must be strictly ascending");
  }
  return run_window(params, row, cache, window, planted, query);
}

ForwardPass block_forward(const ModelParams& params, const SequenceRow& row, const KvCache& cache,
                          BlockWindow window, std::span<const Token> planted) {
  if (window.start < 0 || window.end > row.length() || window.start > window.end)
    throw RangeError("block window outside sequence");
  const auto query = masked_positions(row, window, params.vocab);
  return block_forward(params, row, cache, window, planted, query);
}

int Task::eos_index() const {
  for (std::size_t i = 0; i < target.size(); ++i)
    if (target[i] == eos_id) return static_cast<int>(i);
  return -1;
}

std::vector<Token> Task::planted() const {
  std::vector<Token> out(prompt);
  out.insert(out.end(), target.begin(), target.end());
  return out;
}

std::vector<Token> Task::reference() const {
  const int e = eos_index();
  return {target.begin(), e < 0 ? target.end() : target.begin() + e};
}

SequenceRow Task::initial_row(const Vocab& vocab) const { return SequenceRow::masked(prompt, gen_len(), vocab); }

Task make_task(std::uint64_t seed, int prompt_len, int gen_len, const Vocab& vocab) {
  if (prompt_len <= 0) throw ConfigError("prompt_len must be positive");
  if (gen_len <= 0) throw ConfigError("gen_len must be positive");
  SplitMix64 rng(mix64(seed ^ 0x7461736bULL));
  Task t;
  t.seed = seed;
  t.eos_id = vocab.eos_id();
  t.prompt.resize(static_cast<std::size_t>(prompt_len));
  for (auto& tok : t.prompt) tok = static_cast<Token>(rng.below(static_cast<std::uint64_t>(vocab.size())));
  t.target.resize(static_cast<std::size_t>(gen_len));
  for (auto& tok : t.target) tok = static_cast<Token>(rng.below(static_cast<std::uint64_t>(vocab.size())));
  if (rng.below(2) == 1) {
    const int lo = gen_len / 2;
    const int e = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(gen_len - lo)));
    std::fill(t.target.begin() + e, t.target.end(), vocab.eos_id());
  }
  return t;
}

std::vector<Token> generated_tokens(const SequenceRow& row, const Vocab& vocab) {
  std::vector<Token> out;
  for (int p = row.prompt_len; p < row.length(); ++p) {
    const Token t = row.tokens[static_cast<std::size_t>(p)];
    if (t == vocab.eos_id()) break;
    out.push_back(t);
  }
  return out;
}

bool exact_match(const SequenceRow& row, const Task& task, const Vocab& vocab) {
  return generated_tokens(row, vocab) == task.reference();
}

std::vector<ForwardPass> Denoiser::batched_full_forward(std::span<const SequenceRow* const> rows) const {
  std::vector<ForwardPass> out;
  out.reserve(rows.size());
  for (const SequenceRow* r : rows) out.push_back(full_forward(*r));
  return out;
}

std::vector<ForwardPass> Denoiser::batched_block_forward(std::span<const BlockQuery> queries) const {
  std::vector<ForwardPass> out;
  out.reserve(queries.size());
  for (const BlockQuery& q : queries) out.push_back(block_forward(*q.row, *q.cache, q.window, q.positions));
  return out;
}

PlantedDenoiser::PlantedDenoiser(const ModelParams& params, const Task& task)
    : params_(params), planted_(task.planted()) {}

PlantedDenoiser::PlantedDenoiser(const ModelParams& params, std::vector<Token> planted)
    : params_(params), planted_(std::move(planted)) {}

ForwardPass PlantedDenoiser::full_forward(const SequenceRow& row) const {
  return blockbatch::full_forward(params_, row, planted_);
}

ForwardPass PlantedDenoiser::block_forward(const SequenceRow& row, const KvCache& cache, BlockWindow window,
                                           std::span<const int> query) const {
  return blockbatch::block_forward(params_, row, cache, window, planted_, query);
}

ForwardPass CountingDenoiser::full_forward(const SequenceRow& row) const {
  ++calls_;
  return inner_.full_forward(row);
}

ForwardPass CountingDenoiser::block_forward(const SequenceRow& row, const KvCache& cache, BlockWindow window,
                                            std::span<const int> query) const {
  ++calls_;
  return inner_.block_forward(row, cache, window, query);
}

std::vector<ForwardPass> CountingDenoiser::batched_full_forward(std::span<const SequenceRow* const> rows) const {
  ++calls_;
  return inner_.batched_full_forward(rows);
}

std::vector<ForwardPass> CountingDenoiser::batched_block_forward(std::span<const BlockQuery> queries) const {
  ++calls_;
  return inner_.batched_block_forward(queries);
}

}  // namespace blockbatch
