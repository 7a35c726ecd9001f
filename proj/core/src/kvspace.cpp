// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockbatch/kvspace.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>

#include "blockbatch/errors.hpp"
#include "blockbatch/prng.hpp"

namespace blockbatch {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void scale(std::span<double> v, double s) {
  for (double& x : v) x *= s;
}

void require_same_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ContractError(std::string(what) + ": dimension mismatch");
}

// Orthogonalise v against `basis` twice and normalise. Returns the norm
// before normalisation.
double orthonormalize(std::vector<double>& v, std::initializer_list<const std::vector<double>*> basis) {
  for (int pass = 0; pass < 2; ++pass)
    for (const auto* b : basis) axpy(-dot(v, *b), *b, v);
  const double n = norm(v);
  if (n > 0) scale(v, 1.0 / n);
  return n;
}

std::vector<double> complete_direction(std::size_t dim, std::initializer_list<const std::vector<double>*> basis) {
  for (std::size_t c = 0; c < dim; ++c) {
    std::vector<double> v(dim, 0.0);
    v[c] = 1.0;
    if (orthonormalize(v, basis) > 0.5) return v;
  }
  throw DegenerateError("cannot complete an orthonormal basis");
}

template <typename F>
void for_each_position_slice(const KvLayout& layout, F&& f) {
  const auto w = static_cast<std::size_t>(layout.width);
  for (int l = 0; l < layout.layers; ++l)
    for (int p = 0; p < layout.length; ++p)
      f(p, ((static_cast<std::size_t>(l) * static_cast<std::size_t>(layout.length) + static_cast<std::size_t>(p)) *
            2) *
               w,
        2 * w);
}

}  // namespace

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double distance(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a.size(), b.size(), "distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double cache_consistency_error(const Denoiser& model, const SequenceRow& row, const KvCache& cache) {
  const auto fresh = model.full_forward(row).cache.vectorize();
  return distance(cache.vectorize(), fresh);
}

ProjectionBasis fit_basis(std::span<const double> anchor, const std::vector<std::vector<double>>& samples) {
  if (samples.size() < 2) throw ContractError("fit_basis needs at least two samples");
  const std::size_t dim = anchor.size();
  for (const auto& s : samples) require_same_dim(s.size(), dim, "fit_basis");
  const double an = norm(anchor);
  if (!(an > 0)) throw DegenerateError("fit_basis: zero anchor");

  ProjectionBasis b;
  b.c0.assign(anchor.begin(), anchor.end());
  b.u0 = b.c0;
  scale(b.u0, 1.0 / an);

  const std::size_t n = samples.size();
  std::vector<double> mean(dim, 0.0);
  for (const auto& s : samples) axpy(1.0, s, mean);
  scale(mean, 1.0 / static_cast<double>(n));

  std::vector<std::vector<double>> res(n);
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    res[k] = samples[k];
    axpy(-1.0, mean, res[k]);
    axpy(-dot(res[k], b.u0), b.u0, res[k]);
    total += dot(samples[k], samples[k]);
  }
  Eigen::MatrixXd gram(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      const double g = dot(res[i], res[j]);
      gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = g;
      gram(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = g;
    }
  const double spread = gram.trace();
  if (!(spread > 1e-20 * std::max(total, 1e-300))) {
    b.degenerate = true;
    b.rank_deficient = true;
    b.e1 = complete_direction(dim, {&b.u0});
    b.e2 = complete_direction(dim, {&b.u0, &b.e1});
    return b;
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  const auto& values = eig.eigenvalues();
  const auto& vectors = eig.eigenvectors();
  const auto top = static_cast<Eigen::Index>(n) - 1;
  auto direction = [&](Eigen::Index col) {
    std::vector<double> e(dim, 0.0);
    for (std::size_t k = 0; k < n; ++k) axpy(vectors(static_cast<Eigen::Index>(k), col), res[k], e);
    return e;
  };
  b.e1 = direction(top);
  orthonormalize(b.e1, {&b.u0});
  if (values(top - 1) > 1e-12 * values(top)) {
    b.e2 = direction(top - 1);
    if (orthonormalize(b.e2, {&b.u0, &b.e1}) > 0) return b;
  }
  b.rank_deficient = true;
  b.e2 = complete_direction(dim, {&b.u0, &b.e1});
  return b;
}

std::vector<double> tangent_residual(std::span<const double> k, const ProjectionBasis& basis) {
  require_same_dim(k.size(), basis.c0.size(), "tangent_residual");
  std::vector<double> r(k.begin(), k.end());
  axpy(-1.0, basis.c0, r);
  const double z = dot(r, basis.u0);
  const double a = dot(r, basis.e1);
  const double q = dot(r, basis.e2);
  axpy(-z, basis.u0, r);
  axpy(-a, basis.e1, r);
  axpy(-q, basis.e2, r);
  return r;
}

TangentCoords tangent_projection(std::span<const double> k, const ProjectionBasis& basis) {
  require_same_dim(k.size(), basis.c0.size(), "tangent_projection");
  std::vector<double> r(k.begin(), k.end());
  axpy(-1.0, basis.c0, r);
  TangentCoords t;
  t.z = dot(r, basis.u0);
  t.a = dot(r, basis.e1);
  t.q = dot(r, basis.e2);
  t.h_norm = norm(tangent_residual(k, basis));
  return t;
}

PairDistance projected_and_full_distance(std::span<const double> ki, std::span<const double> kj,
                                         const ProjectionBasis& basis) {
  require_same_dim(ki.size(), kj.size(), "projected_and_full_distance");
  const auto ti = tangent_projection(ki, basis);
  const auto tj = tangent_projection(kj, basis);
  PairDistance out;
  out.d = distance(ki, kj);
  out.d_proj = std::sqrt((ti.z - tj.z) * (ti.z - tj.z) + (ti.a - tj.a) * (ti.a - tj.a) + (ti.q - tj.q) * (ti.q - tj.q));
  out.h_dist = distance(tangent_residual(ki, basis), tangent_residual(kj, basis));
  return out;
}

double branch_dispersion(const std::vector<std::vector<double>>& ks) {
  if (ks.size() < 2) throw ContractError("branch_dispersion needs at least two vectors");
  double s = 0.0;
  for (std::size_t i = 0; i < ks.size(); ++i)
    for (std::size_t j = i + 1; j < ks.size(); ++j) {
      const double d = distance(ks[i], ks[j]);
      s += 2.0 * d * d;
    }
  const double b = static_cast<double>(ks.size());
  return s / (b * (b - 1.0));
}

std::vector<double> position_energies(std::span<const double> v, const KvLayout& layout) {
  require_same_dim(v.size(), layout.dim(), "position_energies");
  std::vector<double> e(static_cast<std::size_t>(layout.length), 0.0);
  for_each_position_slice(layout, [&](int p, std::size_t off, std::size_t len) {
    e[static_cast<std::size_t>(p)] += dot(v.subspan(off, len), v.subspan(off, len));
  });
  return e;
}

std::vector<double> project_positions(std::span<const double> v, const KvLayout& layout, BlockWindow window) {
  require_same_dim(v.size(), layout.dim(), "project_positions");
  std::vector<double> out(v.size(), 0.0);
  for_each_position_slice(layout, [&](int p, std::size_t off, std::size_t len) {
    if (window.contains(p)) std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(off), len, out.begin() + static_cast<std::ptrdiff_t>(off));
  });
  return out;
}

std::vector<double> block_residual(std::span<const double> delta_blk, std::span<const double> delta_full,
                                   const KvLayout& layout, BlockWindow window) {
  require_same_dim(delta_blk.size(), delta_full.size(), "block_residual");
  auto r = project_positions(delta_full, layout, window);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = delta_blk[i] - r[i];
  return r;
}

EnergyEstimate block_projection_energy_mc(std::span<const double> v, const KvLayout& layout, int m,
                                          std::int64_t trials, std::uint64_t seed, BlockSampling sampling) {
  const int len = layout.length;
  if (m < 1 || m > len) throw RangeError("block size must satisfy 1 <= m <= L");
  if (trials < 1) throw ContractError("trials must be positive");
  const auto energy = position_energies(v, layout);
  const double total = std::accumulate(energy.begin(), energy.end(), 0.0);
  if (!(total > 0)) throw DegenerateError("energy fraction undefined for a zero vector");

  SplitMix64 rng(mix64(seed) ^ static_cast<std::uint64_t>(m));
  std::vector<int> perm(static_cast<std::size_t>(len));
  std::iota(perm.begin(), perm.end(), 0);
  double mean = 0, m2 = 0, nmean = 0, nm2 = 0;
  for (std::int64_t t = 0; t < trials; ++t) {
    double e = 0.0;
    if (sampling == BlockSampling::kUniformSubset) {
      for (int i = 0; i < m; ++i) {
        const auto j = static_cast<std::size_t>(i) + rng.below(static_cast<std::uint64_t>(len - i));
        std::swap(perm[static_cast<std::size_t>(i)], perm[j]);
        e += energy[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
      }
    } else {
      const auto start = rng.below(static_cast<std::uint64_t>(len - m + 1));
      for (int i = 0; i < m; ++i) e += energy[start + static_cast<std::size_t>(i)];
    }
    const double f = e / total;
    const double g = std::sqrt(f);
    const double k = static_cast<double>(t + 1);
    const double d1 = f - mean;
    mean += d1 / k;
    m2 += d1 * (f - mean);
    const double d2 = g - nmean;
    nmean += d2 / k;
    nm2 += d2 * (g - nmean);
  }
  EnergyEstimate out;
  out.trials = trials;
  out.mean = mean;
  out.norm_mean = nmean;
  if (trials > 1) {
    const double n = static_cast<double>(trials);
    out.se = std::sqrt(m2 / (n - 1.0) / n);
    out.norm_se = std::sqrt(nm2 / (n - 1.0) / n);
  }
  return out;
}

LinearBound fit_linear_bound(std::span<const double> x, std::span<const double> y, double base_slope) {
  require_same_dim(x.size(), y.size(), "fit_linear_bound");
  const std::size_t n = x.size();
  if (n == 0) return {};
  for (double xi : x)
    if (xi < 0) throw ContractError("fit_linear_bound expects non-negative errors");

  // Slack objective f(s) = s*sum(x) + n*eps(s) with eps(s) = max(0, max_t c_t - s x_t)
  // is convex piecewise linear in s; its minimum sits at s = 0 or at a
  // vertex of the upper envelope of the lines c_t - s x_t and 0.
  std::vector<double> c(n);
  for (std::size_t t = 0; t < n; ++t) c[t] = y[t] - base_slope * x[t];
  const double sx = std::accumulate(x.begin(), x.end(), 0.0);
  auto eps_at = [&](double s) {
    double e = 0.0;
    for (std::size_t t = 0; t < n; ++t) e = std::max(e, c[t] - s * x[t]);
    return e;
  };

  struct Line {
    double m, b;
  };
  std::vector<Line> lines;
  lines.reserve(n + 1);
  lines.push_back({0.0, 0.0});
  for (std::size_t t = 0; t < n; ++t) lines.push_back({-x[t], c[t]});
  std::sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) { return a.m < b.m || (a.m == b.m && a.b < b.b); });
  std::vector<Line> hull;
  auto cross = [](const Line& a, const Line& b) { return (a.b - b.b) / (b.m - a.m); };
  for (const auto& l : lines) {
    if (!hull.empty() && hull.back().m == l.m) hull.pop_back();
    while (hull.size() >= 2 && cross(hull[hull.size() - 2], l) <= cross(hull[hull.size() - 2], hull.back()))
      hull.pop_back();
    hull.push_back(l);
  }
  std::vector<double> candidates{0.0};
  for (std::size_t k = 0; k + 1 < hull.size(); ++k) {
    const double s = cross(hull[k], hull[k + 1]);
    if (s > 0 && std::isfinite(s)) candidates.push_back(s);
  }
  std::sort(candidates.begin(), candidates.end());

  LinearBound best{0.0, eps_at(0.0)};
  double best_f = static_cast<double>(n) * best.offset;
  for (double s : candidates) {
    const double e = eps_at(s);
    const double f = s * sx + static_cast<double>(n) * e;
    if (f < best_f) {
      best_f = f;
      best = {s, e};
    }
  }
  return best;
}

double RefreshRecurrenceParams::rho() const { return beta * std::pow(a(), refresh_interval); }

double RefreshRecurrenceParams::c() const {
  double sum = 0.0;
  for (int i = 0; i < refresh_interval; ++i) sum += std::pow(a(), i);
  return beta * eps_b * sum + eps_f;
}

std::vector<double> ErrorChain::boundary() const {
  std::vector<double> y;
  for (const auto& c : cycles) y.push_back(c.values.front());
  return y;
}

ErrorSeries extract_error_series(const Trace& trace) {
  struct State {
    ErrorChain chain;
    ErrorCycle cur;
    bool after_refresh = false;
  };
  std::map<int, State> states;
  ErrorSeries out;

  auto close_chain = [&](State& s, bool keep_open_cycle) {
    if (keep_open_cycle && !s.cur.values.empty()) s.chain.cycles.push_back(s.cur);
    if (!s.chain.cycles.empty()) out.chains.push_back(s.chain);
    s.chain.cycles.clear();
    s.cur = {};
    s.after_refresh = false;
  };
  auto append = [&](State& s, double v) {
    if (s.cur.values.empty()) {
      s.cur.values.push_back(v);
      return;
    }
    if (s.after_refresh && s.cur.values.size() == 1 && s.cur.values.front() == v) {
      s.after_refresh = false;
      return;
    }
    s.after_refresh = false;
    out.block_x.push_back(s.cur.values.back());
    out.block_y.push_back(v);
    s.cur.values.push_back(v);
  };

  for (const auto& ev : trace.events) {
    for (const auto& m : ev.kv) {
      auto& s = states[m.branch];
      s.chain.branch = m.branch;
      switch (ev.kind) {
        case EventKind::kBlockForward:
          append(s, m.e_pre);
          break;
        case EventKind::kRefresh:
          append(s, m.e_pre);
          out.refresh_x.push_back(m.e_pre);
          out.refresh_y.push_back(m.e_post);
          s.cur.refresh_pre = m.e_pre;
          s.cur.refresh_post = m.e_post;
          s.chain.cycles.push_back(s.cur);
          s.cur = {};
          s.cur.values.push_back(m.e_post);
          s.after_refresh = true;
          break;
        case EventKind::kSync:
          close_chain(s, false);
          break;
        default:
          break;
      }
    }
  }
  for (auto& [branch, s] : states) {
    if (s.after_refresh && s.cur.values.size() == 1) s.cur = {};
    close_chain(s, true);
  }
  return out;
}

RefreshRecurrenceParams estimate_recurrence_params(const ErrorSeries& series, int refresh_interval) {
  if (series.refresh_x.empty()) throw InsufficientDataError("no refresh events to fit beta and eps_F");
  if (refresh_interval < 1) throw ConfigError("refresh_interval must be at least 1");
  RefreshRecurrenceParams p;
  p.refresh_interval = refresh_interval;
  const auto blk = fit_linear_bound(series.block_x, series.block_y, 1.0);
  p.lambda_b = blk.slope;
  p.eps_b = blk.offset;
  const auto ref = fit_linear_bound(series.refresh_x, series.refresh_y, 0.0);
  p.beta = std::min(ref.slope, std::nextafter(1.0, 0.0));
  p.eps_f = ref.offset;
  return p;
}

BoundReport verify_refresh_bound(const RefreshRecurrenceParams& params, std::span<const double> y, double tol) {
  if (y.empty()) throw ContractError("verify_refresh_bound needs at least one boundary error");
  BoundReport r;
  r.rho = params.rho();
  r.c = params.c();
  r.applicable = r.rho < 1.0;
  if (!r.applicable) return r;
  r.limit = r.c / (1.0 - r.rho);
  for (std::size_t n = 0; n < y.size(); ++n) {
    const double rn = std::pow(r.rho, static_cast<double>(n));
    const double b = rn * y[0] + r.c * (1.0 - rn) / (1.0 - r.rho);
    r.bound.push_back(b);
    if (y[n] > b + tol * std::max(1.0, std::abs(b))) r.violations.push_back(n);
  }
  return r;
}

BoundReport within_cycle_bound_check(const RefreshRecurrenceParams& params, std::span<const double> cycle,
                                     double y_n, double tol) {
  BoundReport r;
  r.rho = params.rho();
  r.c = params.c();
  r.applicable = true;
  double ar = 1.0;
  double sum = 0.0;
  for (std::size_t k = 0; k < cycle.size(); ++k) {
    const double b = ar * y_n + params.eps_b * sum;
    r.bound.push_back(b);
    if (cycle[k] > b + tol * std::max(1.0, std::abs(b))) r.violations.push_back(k);
    sum += ar;
    ar *= params.a();
  }
  return r;
}

Prop1Report prop1_check(const Trace& trace) {
  Prop1Report r;
  double blk = 0.0, full = 0.0;
  for (const auto& ev : trace.events) {
    for (const auto& m : ev.kv) {
      if (ev.kind == EventKind::kBlockForward) {
        blk += m.delta_norm;
        ++r.block_events;
      } else if (ev.kind == EventKind::kRefresh) {
        full += m.delta_norm;
        ++r.refresh_events;
      }
    }
  }
  if (r.block_events > 0) r.mean_block_delta = blk / static_cast<double>(r.block_events);
  if (r.refresh_events > 0) r.mean_refresh_delta = full / static_cast<double>(r.refresh_events);
  r.applicable = r.block_events > 0 && r.refresh_events > 0 && r.mean_refresh_delta > 1e-12;
  r.holds = r.applicable && r.mean_block_delta < r.mean_refresh_delta;
  return r;
}

KvRecorder::KvRecorder(const Denoiser& reference, TraceLevel level, std::ostream* kv_dump)
    : reference_(reference), level_(level), dump_(kv_dump) {
  if (level_ == TraceLevel::kFullKv && dump_ == nullptr)
    throw ConfigError("full-kv trace level requires a dump stream");
}

std::optional<KvMetrics> KvRecorder::on_cache_event(const CacheEvent& event) {
  if (level_ == TraceLevel::kEvents) return std::nullopt;
  const auto fresh = reference_.full_forward(*event.row).cache.vectorize();
  auto after = event.after->vectorize();
  KvMetrics m;
  m.branch = event.branch;
  m.e_post = distance(after, fresh);
  if (event.before != nullptr) {
    const auto before = event.before->vectorize();
    m.e_pre = distance(before, fresh);
    m.delta_norm = distance(after, before);
  } else {
    m.e_pre = m.e_post;
  }
  if (level_ == TraceLevel::kFullKv) {
    for (double x : after) {
      const auto bits = std::bit_cast<std::uint64_t>(x);
      char buf[8];
      for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
      dump_->write(buf, 8);
    }
    m.dump_index = dumped_++;
  }

  switch (event.kind) {
    case EventKind::kInit:
      if (anchor_.empty()) anchor_ = after;
      break;
    case EventKind::kBlockForward: {
      if (event.step != open_step_) {
        close_step();
        open_step_ = event.step;
        step_index_[event.step] = block_steps_++;
      }
      open_vectors_.push_back(after);
      if (step_index_[event.step] % stride_ == 0) {
        kept_.push_back({event.step, event.branch, event.kind, std::move(after)});
        thin();
      }
      break;
    }
    case EventKind::kRefresh:
    case EventKind::kSync:
      kept_.push_back({event.step, event.branch, event.kind, std::move(after)});
      break;
    default:
      break;
  }
  return m;
}

void KvRecorder::close_step() {
  if (open_vectors_.size() >= 2)
    dispersion_.push_back({open_step_, static_cast<int>(open_vectors_.size()), branch_dispersion(open_vectors_)});
  open_vectors_.clear();
}

void KvRecorder::thin() {
  auto kept_steps = [&] {
    std::size_t count = 0;
    std::int64_t last = -1;
    for (const auto& k : kept_)
      if (k.kind == EventKind::kBlockForward && k.step != last) {
        ++count;
        last = k.step;
      }
    return count;
  };
  while (kept_steps() > kMaxKeptSteps) {
    stride_ *= 2;
    std::erase_if(kept_, [&](const Kept& k) {
      return k.kind == EventKind::kBlockForward && step_index_.at(k.step) % stride_ != 0;
    });
  }
}

void KvRecorder::on_finish(Trace& trace) {
  close_step();
  trace.dispersion = dispersion_;
  trace.header.level = level_;
  if (level_ == TraceLevel::kEvents || anchor_.empty()) return;
  trace.header.kv_dim = static_cast<std::int64_t>(anchor_.size());
  if (kept_.size() < 2) return;

  std::vector<std::vector<double>> samples;
  samples.reserve(kept_.size());
  for (const auto& k : kept_) samples.push_back(k.vec);
  ProjectionBasis basis;
  try {
    basis = fit_basis(anchor_, samples);
  } catch (const DegenerateError&) {
    return;
  }
  for (const auto& k : kept_) {
    const auto t = tangent_projection(k.vec, basis);
    trace.tangents.push_back({k.step, k.branch, k.kind, t.z, t.a, t.q, t.h_norm, distance(k.vec, basis.c0)});
  }
  for (std::size_t i = 0; i < kept_.size(); ++i) {
    if (kept_[i].kind != EventKind::kBlockForward) continue;
    for (std::size_t j = i + 1; j < kept_.size() && kept_[j].step == kept_[i].step; ++j) {
      const auto pd = projected_and_full_distance(kept_[i].vec, kept_[j].vec, basis);
      trace.pairs.push_back({kept_[i].step, kept_[i].branch, kept_[j].branch, pd.d, pd.d_proj, pd.h_dist});
    }
  }
}

std::vector<double> read_kv_dump(std::istream& in, std::int64_t index, std::size_t dim) {
  in.clear();
  in.seekg(static_cast<std::streamoff>(index) * static_cast<std::streamoff>(dim) * 8);
  std::vector<double> v(dim);
  char buf[8];
  for (std::size_t i = 0; i < dim; ++i) {
    if (!in.read(buf, 8)) throw ContractError("kv dump is truncated");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[b])) << (8 * b);
    v[i] = std::bit_cast<double>(bits);
  }
  return v;
}

}  // namespace blockbatch
