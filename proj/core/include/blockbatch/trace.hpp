// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "blockbatch/kv_cache.hpp"
#include "blockbatch/types.hpp"

namespace blockbatch {

/// NFE_total = NFE_init + NFE_block + NFE_refresh; a batched forward is one NFE.
struct NfeCounter {
  std::int64_t init = 0;
  std::int64_t block = 0;
  std::int64_t refresh = 0;

  std::int64_t total() const { return init + block + refresh; }
  friend bool operator==(const NfeCounter&, const NfeCounter&) = default;
};

enum class EventKind : std::uint8_t {
  kInit,
  kBlockForward,
  kDecode,
  kMerge,
  kSync,
  kRefresh,
  kEosPending,
  kEosReady,
  kFinish,
};

std::string_view event_kind_name(EventKind k);
/// Throws ContractError on unknown names.
EventKind parse_event_kind(std::string_view name);

/// Cache diagnostics for one branch at one cache-changing event.
/// e_pre / e_post are ||K - F(x)|| before / after the event on the token
/// state current at the event; delta_norm is ||K_after - K_before||.
struct KvMetrics {
  int branch = -1;
  double e_pre = 0.0;
  double e_post = 0.0;
  double delta_norm = 0.0;
  /// Record index into the kv dump side file, or -1.
  std::int64_t dump_index = -1;
  friend bool operator==(const KvMetrics&, const KvMetrics&) = default;
};

struct TraceEvent {
  std::int64_t step = 0;
  EventKind kind = EventKind::kInit;
  int branch = -1;  // -1: all branches
  std::vector<int> decoded;
  NfeCounter nfe;
  /// Instrumented model-forward count at the time of the event.
  std::int64_t calls = 0;

  // decode / sync
  std::optional<BlockWindow> window;
  std::vector<Commit> commits;
  // merge
  int source = -1;
  int pos = -1;
  Token token = -1;
  double p_dest = 0.0;
  bool compatible = false;
  // sync
  int leader = -1;
  int gap = 0;
  // eos_pending / eos_ready
  int eos_pos = -1;
  // finish
  int winner = -1;
  int winner_block_size = 0;
  std::string reason;

  std::vector<KvMetrics> kv;

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

/// Per-vector tangent coordinates around the anchor (see kvspace).
struct TangentRecord {
  std::int64_t step = 0;
  int branch = -1;
  EventKind kind = EventKind::kBlockForward;
  double z = 0, a = 0, q = 0, h_norm = 0;
  /// ||K - c0||, for the Pythagorean self-check.
  double r_norm = 0;
  friend bool operator==(const TangentRecord&, const TangentRecord&) = default;
};

/// Full vs projected distance of two branches' caches after one block event.
struct PairRecord {
  std::int64_t step = 0;
  int i = -1;
  int j = -1;
  double d = 0, d_proj = 0, h_dist = 0;
  friend bool operator==(const PairRecord&, const PairRecord&) = default;
};

struct DispersionRecord {
  std::int64_t step = 0;
  int branches = 0;
  double value = 0;
  friend bool operator==(const DispersionRecord&, const DispersionRecord&) = default;
};

enum class TraceLevel : std::uint8_t {
  kEvents,  // scheduler events only
  kNorms,   // + consistency errors, update norms, tangent coordinates
  kFullKv,  // + raw cache vectors in a side file
};

std::string_view trace_level_name(TraceLevel l);
TraceLevel parse_trace_level(std::string_view name);

inline constexpr int kTraceSchemaVersion = 1;

struct TraceHeader {
  int version = kTraceSchemaVersion;
  std::string mode;
  std::uint64_t model_seed = 0;
  std::uint64_t task_seed = 0;
  std::vector<int> block_sizes;
  double tau_conf = 0.9;
  double tau_merge = 0.5;
  /// Negative when sync is disabled.
  std::int64_t tau_sync = 8;
  bool merge_enabled = true;
  int refresh_interval = 32;
  int prompt_len = 0;
  int gen_len = 0;
  TraceLevel level = TraceLevel::kEvents;
  std::int64_t kv_dim = 0;
  friend bool operator==(const TraceHeader&, const TraceHeader&) = default;
};

/// A complete run record. Serialized as JSON lines: the header (schema and
/// version first) followed by one line per event and then the diagnostic
/// records, each tagged with a "record" field.
struct Trace {
  TraceHeader header;
  std::vector<TraceEvent> events;
  std::vector<TangentRecord> tangents;
  std::vector<PairRecord> pairs;
  std::vector<DispersionRecord> dispersion;

  void write(std::ostream& out) const;
  /// Throws ContractError on malformed input or an unknown schema version.
  static Trace read(std::istream& in);

  friend bool operator==(const Trace&, const Trace&) = default;
};

/// A cache-changing event seen by an observer. `before` is null for the
/// initial prefill.
struct CacheEvent {
  EventKind kind = EventKind::kBlockForward;
  std::int64_t step = 0;
  int branch = -1;
  const SequenceRow* row = nullptr;
  const KvCache* before = nullptr;
  const KvCache* after = nullptr;
};

/// Hook for cache diagnostics. Implementations must not call back into the
/// scheduler and must not affect NFE accounting.
class CacheObserver {
 public:
  virtual ~CacheObserver() = default;
  virtual std::optional<KvMetrics> on_cache_event(const CacheEvent& event) = 0;
  /// Called once after the run; may append diagnostic records.
  virtual void on_finish(Trace& trace) { (void)trace; }
};

}  // namespace blockbatch
