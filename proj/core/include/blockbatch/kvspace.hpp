// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "blockbatch/kv_cache.hpp"
#include "blockbatch/model.hpp"
#include "blockbatch/trace.hpp"

namespace blockbatch {

/// Shape of a vectorized cache; see KvCache for the ordering.
struct KvLayout {
  int layers = 0;
  int length = 0;
  int width = 0;

  std::size_t dim() const {
    return static_cast<std::size_t>(layers) * static_cast<std::size_t>(length) * 2 * static_cast<std::size_t>(width);
  }
  static KvLayout of(const KvCache& c) { return {c.layers(), c.length(), c.width()}; }
};

double norm(std::span<const double> v);
double distance(std::span<const double> a, std::span<const double> b);

/// E = ||vec(cache) - vec(F(row))||.
double cache_consistency_error(const Denoiser& model, const SequenceRow& row, const KvCache& cache);

struct ProjectionBasis {
  std::vector<double> c0;
  std::vector<double> u0;
  std::vector<double> e1;
  std::vector<double> e2;
  /// Residuals span fewer than two directions; missing directions were completed.
  bool rank_deficient = false;
  /// Residuals vanish entirely (every sample equals the sample mean).
  bool degenerate = false;
};

/// u0 = c0/||c0||; e1, e2 are the top-2 principal directions of the
/// samples centred at their mean and projected onto u0-perp.
/// DegenerateError for a zero anchor, ContractError for fewer than two
/// samples or mismatched dimensions.
ProjectionBasis fit_basis(std::span<const double> anchor, const std::vector<std::vector<double>>& samples);

struct TangentCoords {
  double z = 0, a = 0, q = 0, h_norm = 0;
};

TangentCoords tangent_projection(std::span<const double> k, const ProjectionBasis& basis);
/// (K - c0) minus its components along u0, e1, e2.
std::vector<double> tangent_residual(std::span<const double> k, const ProjectionBasis& basis);

struct PairDistance {
  double d = 0;
  double d_proj = 0;
  double h_dist = 0;
};

PairDistance projected_and_full_distance(std::span<const double> ki, std::span<const double> kj,
                                         const ProjectionBasis& basis);

/// D = 1/(B(B-1)) * sum over ordered pairs i != j of ||K_i - K_j||^2.
/// ContractError for fewer than two vectors.
double branch_dispersion(const std::vector<std::vector<double>>& ks);

/// Per-position squared norms of a vectorized cache.
std::vector<double> position_energies(std::span<const double> v, const KvLayout& layout);

/// v restricted to the positions in `window` (zero elsewhere).
std::vector<double> project_positions(std::span<const double> v, const KvLayout& layout, BlockWindow window);

/// r = delta_blk - P_B delta_full for the block B = window.
std::vector<double> block_residual(std::span<const double> delta_blk, std::span<const double> delta_full,
                                   const KvLayout& layout, BlockWindow window);

enum class BlockSampling { kUniformSubset, kContiguous };

struct EnergyEstimate {
  std::int64_t trials = 0;
  /// Mean and standard error of ||P_B v||^2 / ||v||^2.
  double mean = 0;
  double se = 0;
  /// Mean and standard error of ||P_B v|| / ||v||.
  double norm_mean = 0;
  double norm_se = 0;
};

/// Monte-Carlo estimate of the projected energy fraction over random
/// position blocks of size m. Uniform subsets have inclusion probability
/// m/L for every position; contiguous windows start uniformly in [0, L-m].
/// RangeError unless 1 <= m <= L; DegenerateError for v = 0.
EnergyEstimate block_projection_energy_mc(std::span<const double> v, const KvLayout& layout, int m,
                                          std::int64_t trials, std::uint64_t seed,
                                          BlockSampling sampling = BlockSampling::kUniformSubset);

/// Tightest non-negative (slope excess, offset) with y <= (s0 + slope) x + offset
/// on every pair: minimises the total slack, ties to the smaller slope.
struct LinearBound {
  double slope = 0;
  double offset = 0;
};
LinearBound fit_linear_bound(std::span<const double> x, std::span<const double> y, double base_slope);

struct RefreshRecurrenceParams {
  double lambda_b = 0;
  double beta = 0;
  double eps_b = 0;
  double eps_f = 0;
  int refresh_interval = 1;

  double a() const { return 1.0 + lambda_b; }
  /// rho = beta * a^R
  double rho() const;
  /// c = beta * eps_B * sum_{i<R} a^i + eps_F
  double c() const;
};

/// Consistency errors of one branch between syncs. Each cycle holds the
/// errors at its cache events: values[0] is the error at the first block
/// event (Y_n), later values follow each block event; a cycle closed by a
/// refresh also carries that refresh's pre/post errors.
struct ErrorCycle {
  std::vector<double> values;
  std::optional<double> refresh_pre;
  std::optional<double> refresh_post;
};

struct ErrorChain {
  int branch = -1;
  std::vector<ErrorCycle> cycles;

  /// Y_0 .. Y_n: the first value of each cycle.
  std::vector<double> boundary() const;
};

struct ErrorSeries {
  std::vector<ErrorChain> chains;
  std::vector<double> block_x, block_y;
  std::vector<double> refresh_x, refresh_y;
};

/// Builds error chains from the kv metrics of a trace. Transitions spanning
/// a sync of the branch are dropped and a new chain starts.
ErrorSeries extract_error_series(const Trace& trace);

/// Fits (lambda_b, eps_B) on the block transitions and (beta, eps_F) on the
/// refresh transitions. InsufficientDataError when there is no refresh.
RefreshRecurrenceParams estimate_recurrence_params(const ErrorSeries& series, int refresh_interval);

struct BoundReport {
  double rho = 0;
  double c = 0;
  bool applicable = false;  // rho < 1
  double limit = 0;         // c / (1 - rho)
  std::vector<double> bound;
  std::vector<std::size_t> violations;
};

/// Y_n <= rho^n Y_0 + c (1 - rho^n)/(1 - rho), with relative tolerance `tol`.
BoundReport verify_refresh_bound(const RefreshRecurrenceParams& params, std::span<const double> y,
                                 double tol = 1e-9);

/// E_{t_n + r} <= a^r Y_n + eps_B sum_{i<r} a^i for every r in the cycle.
BoundReport within_cycle_bound_check(const RefreshRecurrenceParams& params, std::span<const double> cycle,
                                     double y_n, double tol = 1e-9);

struct Prop1Report {
  bool applicable = false;
  double mean_block_delta = 0;
  double mean_refresh_delta = 0;
  std::size_t block_events = 0;
  std::size_t refresh_events = 0;
  bool holds = false;
};

/// Mean ||delta_blk|| over block events against mean ||delta_full|| over
/// refresh events; not applicable without a non-trivial refresh.
Prop1Report prop1_check(const Trace& trace);

/// Observer that logs consistency errors and update norms for every cache
/// event and, on finish, the tangent, pair and dispersion records.
/// `reference` must be an uninstrumented model over the same task.
class KvRecorder final : public CacheObserver {
 public:
  /// Block-event steps whose vectors are kept for the basis fit.
  static constexpr std::size_t kMaxKeptSteps = 32;

  KvRecorder(const Denoiser& reference, TraceLevel level, std::ostream* kv_dump = nullptr);

  std::optional<KvMetrics> on_cache_event(const CacheEvent& event) override;
  void on_finish(Trace& trace) override;

  std::int64_t dumped() const { return dumped_; }

 private:
  struct Kept {
    std::int64_t step;
    int branch;
    EventKind kind;
    std::vector<double> vec;
  };

  void close_step();
  void thin();

  const Denoiser& reference_;
  TraceLevel level_;
  std::ostream* dump_;
  std::int64_t dumped_ = 0;
  std::vector<double> anchor_;
  std::vector<Kept> kept_;
  std::int64_t stride_ = 1;
  std::int64_t block_steps_ = 0;
  std::map<std::int64_t, std::int64_t> step_index_;
  std::int64_t open_step_ = -1;
  std::vector<std::vector<double>> open_vectors_;
  std::vector<DispersionRecord> dispersion_;
};

/// Reads record `index` of a full-kv side file.
std::vector<double> read_kv_dump(std::istream& in, std::int64_t index, std::size_t dim);

}  // namespace blockbatch
