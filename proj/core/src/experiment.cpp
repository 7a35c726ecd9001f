// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockbatch/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "blockbatch/errors.hpp"
#include "blockbatch/kvspace.hpp"
#include "blockbatch/prng.hpp"

namespace blockbatch {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, std::string_view seps) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || seps.find(s[i]) != std::string_view::npos) {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  const std::string t = trim(text);
  T v{};
  const auto* end = t.data() + t.size();
  const auto [ptr, ec] = std::from_chars(t.data(), end, v);
  if (t.empty() || ec != std::errc() || ptr != end)
    throw ConfigError(std::string(key) + ": cannot parse '" + t + "'");
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  const std::string t = trim(text);
  if (t == "true" || t == "on" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "off" || t == "0" || t == "no") return false;
  throw ConfigError(std::string(key) + ": expected true or false, got '" + t + "'");
}

std::string fmt(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  (void)ec;
  return std::string(buf, ptr);
}

std::string join_ints(const std::vector<int>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += sep;
    s += std::to_string(v[i]);
  }
  return s;
}

std::string seed_list_text(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  std::size_t i = 0;
  while (i < seeds.size()) {
    std::size_t j = i;
    while (j + 1 < seeds.size() && seeds[j + 1] == seeds[j] + 1) ++j;
    if (!s.empty()) s += ',';
    s += std::to_string(seeds[i]);
    if (j > i) s += '-' + std::to_string(seeds[j]);
    i = j + 1;
  }
  return s;
}

std::ofstream open_out(const fs::path& p, std::ios::openmode mode = std::ios::out) {
  std::ofstream f(p, mode);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  return f;
}

std::string stop_name(StopReason s) { return s == StopReason::kEos ? "eos" : "exhausted"; }

void stamp_header(Trace& t, const RunConfig& cfg, const Task& task, std::string mode, std::vector<int> sizes,
                  bool multi_branch) {
  auto& h = t.header;
  h.mode = std::move(mode);
  h.model_seed = cfg.model_seed;
  h.task_seed = task.seed;
  h.block_sizes = std::move(sizes);
  h.tau_conf = cfg.scheduler.tau_conf;
  h.tau_merge = cfg.scheduler.tau_merge;
  h.tau_sync = multi_branch && cfg.scheduler.sync_enabled ? cfg.scheduler.tau_sync : -1;
  h.merge_enabled = multi_branch && cfg.scheduler.merge_enabled;
  h.refresh_interval = cfg.scheduler.refresh_interval;
  h.prompt_len = static_cast<int>(task.prompt.size());
  h.gen_len = task.gen_len();
  if (cfg.trace_level == TraceLevel::kEvents) h.level = TraceLevel::kEvents;
}

void check_nfe(const Trace& t, std::int64_t calls, const NfeCounter& nfe) {
  for (const auto& ev : t.events)
    if (ev.calls != ev.nfe.total())
      throw StateError("NFE accounting diverged from forward calls at step " + std::to_string(ev.step));
  if (calls != nfe.total()) throw StateError("NFE total does not match forward calls");
}

/// Observer and files for one trace.
class TraceSink {
 public:
  TraceSink(const RunConfig& cfg, const Denoiser& reference, const fs::path& path) : path_(path) {
    if (!cfg.write_traces || cfg.trace_level == TraceLevel::kEvents) return;
    if (cfg.trace_level == TraceLevel::kFullKv) {
      auto dump = path_;
      dump.replace_filename(dump.filename().string().substr(0, dump.filename().string().find('.')) +
                            suffix_of(path_) + ".kv.bin");
      dump_ = std::make_unique<std::ofstream>(open_out(dump, std::ios::binary));
    }
    recorder_ = std::make_unique<KvRecorder>(reference, cfg.trace_level, dump_.get());
  }

  CacheObserver* observer() { return recorder_.get(); }

  void write(const RunConfig& cfg, const Trace& t) {
    if (!cfg.write_traces) return;
    auto f = open_out(path_);
    t.write(f);
  }

  /// "task_7.b32.trace.jsonl" -> ".b32"
  static std::string suffix_of(const fs::path& p) {
    const std::string name = p.filename().string();
    const auto first = name.find('.');
    const auto tr = name.find(".trace.jsonl");
    if (first == std::string::npos || tr == std::string::npos || tr <= first) return {};
    return name.substr(first, tr - first);
  }

 private:
  fs::path path_;
  std::unique_ptr<std::ofstream> dump_;
  std::unique_ptr<KvRecorder> recorder_;
};

fs::path trace_path(const RunConfig& cfg, std::uint64_t seed, const std::string& suffix = {}) {
  return cfg.out / "traces" / ("task_" + std::to_string(seed) + suffix + ".trace.jsonl");
}

SuiteSummary summarize(std::string label, const std::vector<const GenerationResult*>& rs) {
  SuiteSummary s;
  s.label = std::move(label);
  s.tasks = rs.size();
  if (rs.empty()) return s;
  for (const auto* r : rs) {
    s.accuracy += r->correct ? 1.0 : 0.0;
    s.mean_nfe_total += static_cast<double>(r->nfe.total());
    s.mean_nfe_init += static_cast<double>(r->nfe.init);
    s.mean_nfe_block += static_cast<double>(r->nfe.block);
    s.mean_nfe_refresh += static_cast<double>(r->nfe.refresh);
  }
  const double n = static_cast<double>(rs.size());
  s.accuracy /= n;
  s.mean_nfe_total /= n;
  s.mean_nfe_init /= n;
  s.mean_nfe_block /= n;
  s.mean_nfe_refresh /= n;
  return s;
}

constexpr std::string_view kSuiteHeader =
    "label,tasks,accuracy,mean_nfe_total,mean_nfe_init,mean_nfe_block,mean_nfe_refresh";

void write_suite_row(std::ostream& o, const SuiteSummary& s) {
  o << s.label << ',' << s.tasks << ',' << fmt(s.accuracy) << ',' << fmt(s.mean_nfe_total) << ','
    << fmt(s.mean_nfe_init) << ',' << fmt(s.mean_nfe_block) << ',' << fmt(s.mean_nfe_refresh) << '\n';
}

std::string tokens_text(const std::vector<Token>& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(t[i]);
  }
  return s;
}

}  // namespace

std::string RunConfig::mode_name() const {
  switch (mode) {
    case RunMode::kBlockBatch:
      return "blockbatch";
    case RunMode::kSingle:
      return "single:" + std::to_string(single_block);
    case RunMode::kOracle:
      return "oracle";
    case RunMode::kVanilla:
      return "vanilla";
  }
  return "?";
}

void RunConfig::validate() const {
  scheduler.validate();
  if (vocab_size < 4) throw ConfigError("model.vocab must be at least 4");
  if (model.layers < 1) throw ConfigError("model.layers must be positive");
  if (model.d_model < 1) throw ConfigError("model.d_model must be positive");
  if (prompt_len < 1) throw ConfigError("task.prompt_len must be positive");
  if (prompt_len + scheduler.gen_len > model.max_len)
    throw ConfigError("task.prompt_len + task.gen_len exceeds model.max_len");
  if (task_seeds.empty()) throw ConfigError("task.seeds must not be empty");
  if (std::set<std::uint64_t>(task_seeds.begin(), task_seeds.end()).size() != task_seeds.size())
    throw ConfigError("task.seeds must be distinct");
  if (mode == RunMode::kSingle && single_block < 1) throw ConfigError("run.mode single block size must be positive");
  if (jobs < 1) throw ConfigError("run.jobs must be at least 1");
}

fs::path default_output_dir() {
  if (const char* env = std::getenv("BLOCKBATCH_OUT"); env != nullptr && *env != '\0') return env;
  return "blockbatch_out";
}

std::vector<std::uint64_t> parse_seed_list(std::string_view text) {
  std::vector<std::uint64_t> out;
  if (trim(text).empty()) return out;
  for (const auto& part : split(text, ",")) {
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      out.push_back(parse_number<std::uint64_t>("task.seeds", part));
      continue;
    }
    const auto lo = parse_number<std::uint64_t>("task.seeds", std::string_view(part).substr(0, dash));
    const auto hi = parse_number<std::uint64_t>("task.seeds", std::string_view(part).substr(dash + 1));
    if (hi < lo) throw ConfigError("task.seeds: empty range '" + part + "'");
    for (std::uint64_t s = lo; s <= hi; ++s) out.push_back(s);
  }
  return out;
}

std::vector<int> parse_int_list(std::string_view text) {
  std::vector<int> out;
  for (const auto& part : split(text, ",+")) out.push_back(parse_number<int>("list", part));
  return out;
}

void parse_mode(std::string_view text, RunConfig& cfg) {
  const std::string t = trim(text);
  if (t == "blockbatch") {
    cfg.mode = RunMode::kBlockBatch;
  } else if (t == "oracle") {
    cfg.mode = RunMode::kOracle;
  } else if (t == "vanilla") {
    cfg.mode = RunMode::kVanilla;
  } else if (t.rfind("single:", 0) == 0) {
    cfg.mode = RunMode::kSingle;
    cfg.single_block = parse_number<int>("run.mode", std::string_view(t).substr(7));
  } else {
    throw ConfigError("run.mode: expected blockbatch, single:<b>, oracle or vanilla, got '" + t + "'");
  }
}

std::vector<std::string> config_keys() {
  return {"model.seed",           "model.vocab",           "model.layers",        "model.d_model",
          "model.max_len",        "model.gamma",           "model.radius",        "model.head_gain",
          "task.seeds",           "task.prompt_len",       "task.gen_len",        "scheduler.block_sizes",
          "scheduler.tau_conf",   "scheduler.tau_merge",   "scheduler.tau_sync",  "scheduler.refresh_interval",
          "scheduler.merge",      "run.mode",              "run.trace_level",     "run.out",
          "run.jobs",             "run.write_traces"};
}

void apply_setting(RunConfig& cfg, std::string_view key_in, std::string_view value) {
  const std::string key = trim(key_in);
  const std::string v = trim(value);
  if (key == "model.seed") {
    cfg.model_seed = parse_number<std::uint64_t>(key, v);
  } else if (key == "model.vocab") {
    cfg.vocab_size = parse_number<int>(key, v);
  } else if (key == "model.layers") {
    cfg.model.layers = parse_number<int>(key, v);
  } else if (key == "model.d_model") {
    cfg.model.d_model = parse_number<int>(key, v);
  } else if (key == "model.max_len") {
    cfg.model.max_len = parse_number<int>(key, v);
  } else if (key == "model.gamma") {
    cfg.model.gamma = parse_number<double>(key, v);
  } else if (key == "model.radius") {
    cfg.model.radius = parse_number<int>(key, v);
  } else if (key == "model.head_gain") {
    cfg.model.head_gain = parse_number<double>(key, v);
  } else if (key == "task.seeds") {
    cfg.task_seeds = parse_seed_list(v);
  } else if (key == "task.prompt_len") {
    cfg.prompt_len = parse_number<int>(key, v);
  } else if (key == "task.gen_len") {
    cfg.scheduler.gen_len = parse_number<int>(key, v);
  } else if (key == "scheduler.block_sizes") {
    try {
      cfg.scheduler.block_sizes = parse_int_list(v);
    } catch (const ConfigError&) {
      throw ConfigError(key + ": cannot parse '" + v + "'");
    }
  } else if (key == "scheduler.tau_conf") {
    cfg.scheduler.tau_conf = parse_number<double>(key, v);
  } else if (key == "scheduler.tau_merge") {
    cfg.scheduler.tau_merge = parse_number<double>(key, v);
  } else if (key == "scheduler.tau_sync") {
    if (v == "off" || v == "inf") {
      cfg.scheduler.sync_enabled = false;
    } else {
      cfg.scheduler.sync_enabled = true;
      cfg.scheduler.tau_sync = parse_number<std::int64_t>(key, v);
    }
  } else if (key == "scheduler.refresh_interval") {
    cfg.scheduler.refresh_interval = parse_number<int>(key, v);
  } else if (key == "scheduler.merge") {
    cfg.scheduler.merge_enabled = parse_bool(key, v);
  } else if (key == "run.mode") {
    parse_mode(v, cfg);
  } else if (key == "run.trace_level") {
    cfg.trace_level = parse_trace_level(v);
  } else if (key == "run.out") {
    cfg.out = v;
  } else if (key == "run.jobs") {
    cfg.jobs = parse_number<int>(key, v);
  } else if (key == "run.write_traces") {
    cfg.write_traces = parse_bool(key, v);
  } else {
    throw ConfigError("unknown configuration key '" + key + "'");
  }
}

void apply_config_file(RunConfig& cfg, std::istream& in) {
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": malformed section");
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    apply_setting(cfg, section.empty() ? key : section + "." + key, std::string_view(t).substr(eq + 1));
  }
}

void apply_config_file(RunConfig& cfg, const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  apply_config_file(cfg, f);
}

void write_config(const RunConfig& cfg, std::ostream& o) {
  o << "[model]\n"
    << "seed = " << cfg.model_seed << '\n'
    << "vocab = " << cfg.vocab_size << '\n'
    << "layers = " << cfg.model.layers << '\n'
    << "d_model = " << cfg.model.d_model << '\n'
    << "max_len = " << cfg.model.max_len << '\n'
    << "gamma = " << fmt(cfg.model.gamma) << '\n'
    << "radius = " << cfg.model.radius << '\n'
    << "head_gain = " << fmt(cfg.model.head_gain) << "\n\n"
    << "[task]\n"
    << "seeds = " << seed_list_text(cfg.task_seeds) << '\n'
    << "prompt_len = " << cfg.prompt_len << '\n'
    << "gen_len = " << cfg.scheduler.gen_len << "\n\n"
    << "[scheduler]\n"
    << "block_sizes = " << join_ints(cfg.scheduler.block_sizes, ',') << '\n'
    << "tau_conf = " << fmt(cfg.scheduler.tau_conf) << '\n'
    << "tau_merge = " << fmt(cfg.scheduler.tau_merge) << '\n'
    << "tau_sync = " << (cfg.scheduler.sync_enabled ? std::to_string(cfg.scheduler.tau_sync) : "off") << '\n'
    << "refresh_interval = " << cfg.scheduler.refresh_interval << '\n'
    << "merge = " << (cfg.scheduler.merge_enabled ? "true" : "false") << "\n\n"
    << "[run]\n"
    << "mode = " << cfg.mode_name() << '\n'
    << "trace_level = " << trace_level_name(cfg.trace_level) << '\n'
    << "write_traces = " << (cfg.write_traces ? "true" : "false") << '\n';
}

TaskOutcome run_task(const RunConfig& cfg, const ModelParams& params, std::uint64_t seed) {
  const Vocab& vocab = params.vocab;
  const Task task = make_task(seed, cfg.prompt_len, cfg.gen_len(), vocab);
  const PlantedDenoiser model(params, task);
  const auto t0 = std::chrono::steady_clock::now();
  TaskOutcome out;
  out.seed = seed;

  DecodeConfig dc;
  dc.tau_conf = cfg.scheduler.tau_conf;
  dc.gen_len = cfg.gen_len();
  dc.refresh_interval = cfg.scheduler.refresh_interval;

  auto single = [&](int b, const std::string& suffix) {
    dc.block_size = b;
    TraceSink sink(cfg, model, trace_path(cfg, seed, suffix));
    DecodeOptions opt;
    opt.observer = sink.observer();
    auto run = decoding::single_branch_decode(model, task, dc, opt);
    check_nfe(run.trace, run.forward_calls, run.result.nfe);
    stamp_header(run.trace, cfg, task, "single", {b}, false);
    sink.write(cfg, run.trace);
    return run.result;
  };

  switch (cfg.mode) {
    case RunMode::kBlockBatch: {
      TraceSink sink(cfg, model, trace_path(cfg, seed));
      BlockBatchOptions opt;
      opt.observer = sink.observer();
      auto run = run_blockbatch(model, task, cfg.scheduler, opt);
      check_nfe(run.trace, run.forward_calls, run.result.nfe);
      auto sizes = cfg.scheduler.block_sizes;
      std::sort(sizes.begin(), sizes.end());
      stamp_header(run.trace, cfg, task, "blockbatch", sizes, true);
      for (const auto& ev : run.trace.events) {
        out.merges += ev.kind == EventKind::kMerge;
        out.syncs += ev.kind == EventKind::kSync;
      }
      sink.write(cfg, run.trace);
      out.result = std::move(run.result);
      break;
    }
    case RunMode::kSingle:
      out.result = single(cfg.single_block, {});
      break;
    case RunMode::kVanilla: {
      TraceSink sink(cfg, model, trace_path(cfg, seed));
      DecodeOptions opt;
      opt.observer = sink.observer();
      auto run = decoding::vanilla_decode(model, task, cfg.gen_len(), opt);
      check_nfe(run.trace, run.forward_calls, run.result.nfe);
      stamp_header(run.trace, cfg, task, "vanilla", {cfg.gen_len()}, false);
      sink.write(cfg, run.trace);
      out.result = std::move(run.result);
      break;
    }
    case RunMode::kOracle: {
      std::vector<GenerationResult> results;
      for (int b : cfg.scheduler.block_sizes) {
        results.push_back(single(b, ".b" + std::to_string(b)));
        const auto& r = results.back();
        out.oracle_rows.push_back({b, r.correct, r.nfe, r.generated});
      }
      const auto pick = select_oracle(out.oracle_rows);
      out.result = results[pick.best_index];
      break;
    }
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

RunSummary cmd_run(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  if (cfg.out.empty()) cfg.out = default_output_dir();
  cfg.validate();
  fs::create_directories(cfg.out);
  if (cfg.write_traces) fs::create_directories(cfg.out / "traces");

  const Vocab vocab(cfg.vocab_size);
  const ModelParams params = build_model(cfg.model_seed, vocab, cfg.model);

  RunSummary summary;
  summary.tasks.resize(cfg.task_seeds.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < cfg.task_seeds.size(); i = next++) {
      try {
        summary.tasks[i] = run_task(cfg, params, cfg.task_seeds[i]);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = cfg.task_seeds.size();
      }
    }
  };
  const int threads = std::min<int>(cfg.jobs, static_cast<int>(cfg.task_seeds.size()));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<const GenerationResult*> all;
  for (const auto& t : summary.tasks) all.push_back(&t.result);
  summary.suite = summarize(cfg.mode_name(), all);

  {
    auto f = open_out(cfg.out / "summary.csv");
    f << "task_seed,mode,block_size,correct,nfe_init,nfe_block,nfe_refresh,nfe_total,tokens_decoded,generated_len,"
         "stop,merges,syncs\n";
    for (const auto& t : summary.tasks) {
      const auto& r = t.result;
      f << t.seed << ',' << cfg.mode_name() << ',' << r.block_size << ',' << (r.correct ? 1 : 0) << ','
        << r.nfe.init << ',' << r.nfe.block << ',' << r.nfe.refresh << ',' << r.nfe.total() << ','
        << r.tokens_decoded << ',' << r.generated.size() << ',' << stop_name(r.stop) << ',' << t.merges << ','
        << t.syncs << '\n';
    }
  }
  {
    auto f = open_out(cfg.out / "outputs.csv");
    f << "task_seed,block_size,correct,nfe_total,tokens\n";
    for (const auto& t : summary.tasks) {
      if (cfg.mode == RunMode::kOracle) {
        for (const auto& row : t.oracle_rows)
          f << t.seed << ',' << row.block_size << ',' << (row.correct ? 1 : 0) << ',' << row.nfe.total() << ','
            << tokens_text(row.generated) << '\n';
      } else {
        f << t.seed << ',' << t.result.block_size << ',' << (t.result.correct ? 1 : 0) << ','
          << t.result.nfe.total() << ',' << tokens_text(t.result.generated) << '\n';
      }
    }
  }
  {
    auto f = open_out(cfg.out / "timing.csv");
    f << "task_seed,seconds\n";
    for (const auto& t : summary.tasks) f << t.seed << ',' << fmt(t.seconds) << '\n';
  }
  {
    auto f = open_out(cfg.out / "suite.csv");
    f << kSuiteHeader << '\n';
    write_suite_row(f, summary.suite);
  }
  {
    auto f = open_out(cfg.out / "run.cfg");
    write_config(cfg, f);
  }
  if (cfg.mode == RunMode::kOracle) {
    auto f = open_out(cfg.out / "oracle_table.csv");
    f << "task_seed,block_size,correct,nfe_total,selected\n";
    for (const auto& t : summary.tasks)
      for (const auto& row : t.oracle_rows)
        f << t.seed << ',' << row.block_size << ',' << (row.correct ? 1 : 0) << ',' << row.nfe.total() << ','
          << (row.block_size == t.result.block_size ? 1 : 0) << '\n';

    std::vector<GenerationResult> tmp;
    for (std::size_t k = 0; k < cfg.scheduler.block_sizes.size(); ++k) {
      std::vector<GenerationResult> col;
      for (const auto& t : summary.tasks) {
        GenerationResult g;
        g.correct = t.oracle_rows[k].correct;
        g.nfe = t.oracle_rows[k].nfe;
        col.push_back(g);
      }
      std::vector<const GenerationResult*> ptrs;
      for (const auto& g : col) ptrs.push_back(&g);
      summary.per_size.push_back(summarize("b" + std::to_string(cfg.scheduler.block_sizes[k]), ptrs));
    }
    summary.per_size.push_back(summarize("oracle", all));
    auto g = open_out(cfg.out / "oracle_summary.csv");
    g << kSuiteHeader << '\n';
    for (const auto& s : summary.per_size) write_suite_row(g, s);
  }
  return summary;
}

SweepAxis parse_sweep_axis(std::string_view name) {
  if (name == "tau_sync") return SweepAxis::kTauSync;
  if (name == "refresh_interval") return SweepAxis::kRefreshInterval;
  if (name == "block_subset") return SweepAxis::kBlockSubset;
  throw ConfigError("sweep axis must be tau_sync, refresh_interval or block_subset");
}

std::string_view sweep_axis_name(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kTauSync:
      return "tau_sync";
    case SweepAxis::kRefreshInterval:
      return "refresh_interval";
    case SweepAxis::kBlockSubset:
      return "block_subset";
  }
  return "?";
}

std::vector<std::vector<int>> enumerate_subsets(std::vector<int> sizes) {
  std::sort(sizes.begin(), sizes.end());
  const std::size_t n = sizes.size();
  if (n == 0 || n > 20) throw ConfigError("block subset enumeration needs 1..20 sizes");
  std::vector<std::vector<int>> out;
  for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
    std::vector<int> s;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (1u << i)) s.push_back(sizes[i]);
    out.push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.size() != b.size() ? a.size() < b.size() : a < b;
  });
  return out;
}

std::vector<SweepRow> cmd_sweep(const SweepSpec& spec) {
  RunConfig base = spec.base;
  if (base.out.empty()) base.out = default_output_dir();
  if (base.mode != RunMode::kBlockBatch) throw ConfigError("sweeps run in blockbatch mode");
  base.validate();

  std::vector<std::string> values = spec.values;
  if (spec.axis == SweepAxis::kBlockSubset && spec.all_subsets) {
    values.clear();
    for (const auto& s : enumerate_subsets(base.scheduler.block_sizes)) values.push_back(join_ints(s, '+'));
  }
  if (values.empty()) throw ConfigError("sweep needs at least one value");

  const std::set<int> universe(base.scheduler.block_sizes.begin(), base.scheduler.block_sizes.end());
  std::vector<RunConfig> runs;
  for (const auto& v : values) {
    RunConfig cfg = base;
    switch (spec.axis) {
      case SweepAxis::kTauSync:
        apply_setting(cfg, "scheduler.tau_sync", v);
        break;
      case SweepAxis::kRefreshInterval:
        apply_setting(cfg, "scheduler.refresh_interval", v);
        break;
      case SweepAxis::kBlockSubset: {
        apply_setting(cfg, "scheduler.block_sizes", v);
        for (int b : cfg.scheduler.block_sizes)
          if (!universe.count(b)) throw ConfigError("block subset " + v + " is not a subset of the base block sizes");
        break;
      }
    }
    cfg.out = base.out / (std::string(sweep_axis_name(spec.axis)) + "=" + v);
    cfg.validate();
    runs.push_back(std::move(cfg));
  }

  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < runs.size(); ++i) rows.push_back({values[i], cmd_run(runs[i]).suite});

  fs::create_directories(base.out);
  auto f = open_out(base.out / "sweep.csv");
  f << "axis,value,tasks,accuracy,mean_nfe_total,mean_nfe_init,mean_nfe_block,mean_nfe_refresh\n";
  for (const auto& r : rows)
    f << sweep_axis_name(spec.axis) << ',' << r.value << ',' << r.summary.tasks << ',' << fmt(r.summary.accuracy) << ','
      << fmt(r.summary.mean_nfe_total) << ',' << fmt(r.summary.mean_nfe_init) << ','
      << fmt(r.summary.mean_nfe_block) << ',' << fmt(r.summary.mean_nfe_refresh) << '\n';
  return rows;
}

std::string_view check_status_name(CheckStatus s) {
  switch (s) {
    case CheckStatus::kPass:
      return "pass";
    case CheckStatus::kFail:
      return "fail";
    case CheckStatus::kSkip:
      return "skip";
    case CheckStatus::kInfo:
      return "info";
  }
  return "?";
}

bool DiagnoseReport::ok() const {
  return std::none_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.status == CheckStatus::kFail; });
}

std::vector<CheckResult> diagnose_trace(const Trace& trace, const std::string& source, const DiagnoseOptions& opt,
                                        std::istream* kv_dump) {
  std::vector<CheckResult> out;
  auto add = [&](std::string name, bool pass, double value, std::string detail) {
    out.push_back({source, std::move(name), pass ? CheckStatus::kPass : CheckStatus::kFail, value, std::move(detail)});
  };
  auto skip = [&](std::string name, std::string detail) {
    out.push_back({source, std::move(name), CheckStatus::kSkip, 0, std::move(detail)});
  };
  const auto& h = trace.header;

  {
    std::size_t bad = 0;
    for (const auto& ev : trace.events) bad += ev.calls != ev.nfe.total();
    add("nfe_exact", bad == 0, static_cast<double>(bad), std::to_string(trace.events.size()) + " events");
  }
  {
    std::size_t bad = 0;
    for (std::size_t i = 1; i < trace.events.size(); ++i) {
      const auto& a = trace.events[i - 1];
      const auto& b = trace.events[i];
      bad += !(b.step > a.step) || b.nfe.total() < a.nfe.total();
    }
    add("trace_order", bad == 0, static_cast<double>(bad), "strict steps, non-decreasing nfe");
  }
  {
    std::size_t merges = 0, bad = 0;
    for (const auto& ev : trace.events)
      if (ev.kind == EventKind::kMerge) {
        ++merges;
        bad += !(ev.p_dest > h.tau_merge) || !ev.compatible;
      }
    add("merge_gate", bad == 0, static_cast<double>(bad), std::to_string(merges) + " merges");
  }
  {
    std::size_t syncs = 0, bad = 0;
    for (const auto& ev : trace.events)
      if (ev.kind == EventKind::kSync) {
        ++syncs;
        bad += h.tau_sync < 0 || !(ev.gap > h.tau_sync);
      }
    add("sync_gap", bad == 0, static_cast<double>(bad), std::to_string(syncs) + " syncs");
  }

  const bool has_kv = std::any_of(trace.events.begin(), trace.events.end(), [](const TraceEvent& e) { return !e.kv.empty(); });
  if (!has_kv) {
    for (const char* n : {"refresh_exact", "tangent_identity", "pythagorean", "dispersion", "recurrence_bound", "prop1"})
      skip(n, "trace has no kv metrics");
  } else {
    {
      double worst = 0;
      std::size_t n = 0;
      for (const auto& ev : trace.events)
        if (ev.kind == EventKind::kRefresh)
          for (const auto& m : ev.kv) {
            worst = std::max(worst, m.e_post);
            ++n;
          }
      if (n == 0)
        skip("refresh_exact", "no refresh events");
      else
        add("refresh_exact", worst <= opt.refresh_tol, worst, std::to_string(n) + " refreshed caches");
    }
    {
      double worst = 0;
      for (const auto& t : trace.tangents) {
        const double lhs = t.r_norm * t.r_norm;
        const double rhs = t.z * t.z + t.a * t.a + t.q * t.q + t.h_norm * t.h_norm;
        worst = std::max(worst, std::abs(lhs - rhs) / std::max(lhs, 1e-300));
      }
      if (trace.tangents.empty())
        skip("tangent_identity", "no tangent records");
      else
        add("tangent_identity", worst <= opt.rel_tol, worst, std::to_string(trace.tangents.size()) + " records");
    }
    {
      double worst = 0;
      std::size_t above = 0;
      for (const auto& p : trace.pairs) {
        const double lhs = p.d * p.d;
        const double rhs = p.d_proj * p.d_proj + p.h_dist * p.h_dist;
        worst = std::max(worst, std::abs(lhs - rhs) / std::max(lhs, 1e-300));
        above += p.d_proj > p.d * (1 + 1e-9) + 1e-12;
      }
      if (trace.pairs.empty())
        skip("pythagorean", "no pair records");
      else
        add("pythagorean", worst <= opt.rel_tol && above == 0, worst,
            std::to_string(trace.pairs.size()) + " pairs, " + std::to_string(above) + " with d_proj > d");
    }
    {
      std::size_t bad = 0;
      for (const auto& d : trace.dispersion) bad += !(d.value >= 0) || !std::isfinite(d.value);
      if (trace.dispersion.empty())
        skip("dispersion", "no dispersion records");
      else
        add("dispersion", bad == 0, static_cast<double>(bad), std::to_string(trace.dispersion.size()) + " steps");
    }
    {
      const auto series = extract_error_series(trace);
      if (series.refresh_x.empty()) {
        skip("recurrence_bound", "no refresh events");
      } else {
        const auto p = estimate_recurrence_params(series, h.refresh_interval);
        std::size_t violations = 0, checked = 0;
        bool applicable = true;
        for (const auto& chain : series.chains) {
          const auto y = chain.boundary();
          const auto rep = verify_refresh_bound(p, y);
          applicable = applicable && rep.applicable;
          violations += rep.violations.size();
          checked += y.size();
          for (const auto& cyc : chain.cycles) {
            const auto w = within_cycle_bound_check(p, cyc.values, cyc.values.front());
            violations += w.violations.size();
            checked += cyc.values.size();
          }
        }
        std::ostringstream d;
        d << "lambda_b=" << fmt(p.lambda_b) << " eps_B=" << fmt(p.eps_b) << " beta=" << fmt(p.beta)
          << " eps_F=" << fmt(p.eps_f) << " rho=" << fmt(p.rho()) << " c=" << fmt(p.c()) << " checked=" << checked
          << (applicable ? "" : " (rho >= 1: boundary bound inapplicable)");
        add("recurrence_bound", violations == 0, static_cast<double>(violations), d.str());
      }
    }
    {
      const auto r = prop1_check(trace);
      std::ostringstream d;
      d << "mean block delta " << fmt(r.mean_block_delta) << " vs mean refresh delta " << fmt(r.mean_refresh_delta);
      if (!r.applicable)
        skip("prop1", "no non-trivial refresh; " + d.str());
      else
        add("prop1", r.holds, r.mean_block_delta / r.mean_refresh_delta, d.str());
    }
  }

  if (opt.require_full_kv && (h.level != TraceLevel::kFullKv || kv_dump == nullptr))
    throw InsufficientDataError(source + ": full-kv checks need a full-kv trace with its dump file");
  if (h.level == TraceLevel::kFullKv && kv_dump != nullptr) {
    const auto dim = static_cast<std::size_t>(h.kv_dim);
    std::map<std::int64_t, double> recorded;
    for (const auto& d : trace.dispersion) recorded[d.step] = d.value;
    double worst = 0;
    std::size_t checked = 0;
    for (const auto& ev : trace.events) {
      if (ev.kind != EventKind::kBlockForward || ev.kv.size() < 2) continue;
      std::vector<std::vector<double>> vs;
      for (const auto& m : ev.kv) {
        if (m.dump_index < 0) throw InsufficientDataError(source + ": kv metric without a dump index");
        vs.push_back(read_kv_dump(*kv_dump, m.dump_index, dim));
      }
      const auto it = recorded.find(ev.step);
      if (it == recorded.end()) {
        worst = INFINITY;
        continue;
      }
      worst = std::max(worst, std::abs(branch_dispersion(vs) - it->second) / std::max(it->second, 1e-300));
      ++checked;
    }
    if (checked == 0)
      skip("kv_dump_dispersion", "no multi-branch block events");
    else
      add("kv_dump_dispersion", worst <= 1e-9, worst, std::to_string(checked) + " steps recomputed from dumps");
  }
  return out;
}

std::vector<CheckResult> diagnose_lemma(const DiagnoseOptions& opt) {
  std::vector<CheckResult> out;
  const KvLayout layout{2, 256, 32};
  SplitMix64 rng(opt.lemma_seed);
  std::vector<double> v(layout.dim());
  for (double& x : v) x = rng.normal();
  for (int m : {4, 8, 16, 32, 64, 128}) {
    const double expect = static_cast<double>(m) / layout.length;
    const auto e = block_projection_energy_mc(v, layout, m, opt.lemma_trials, opt.lemma_seed + static_cast<std::uint64_t>(m));
    const double rel = std::abs(e.mean - expect) / expect;
    const bool pass = rel <= 0.01 && std::abs(e.mean - expect) <= 3 * e.se;
    std::ostringstream d;
    d << "m/L=" << fmt(expect) << " mean=" << fmt(e.mean) << " se=" << fmt(e.se) << " rel=" << fmt(rel);
    out.push_back({"lemma", "energy_m" + std::to_string(m), pass ? CheckStatus::kPass : CheckStatus::kFail, e.mean, d.str()});
    const double jensen = std::sqrt(expect);
    out.push_back({"lemma", "jensen_m" + std::to_string(m),
                   e.norm_mean <= jensen + 3 * e.norm_se ? CheckStatus::kPass : CheckStatus::kFail, e.norm_mean,
                   "sqrt(m/L)=" + fmt(jensen)});
    const auto c = block_projection_energy_mc(v, layout, m, opt.lemma_trials, opt.lemma_seed + static_cast<std::uint64_t>(m),
                                              BlockSampling::kContiguous);
    out.push_back({"lemma", "contiguous_m" + std::to_string(m), CheckStatus::kInfo, c.mean,
                   "contiguous windows: mean=" + fmt(c.mean) + " se=" + fmt(c.se)});
  }
  return out;
}

DiagnoseReport cmd_diagnose(const DiagnoseOptions& opt) {
  if (opt.traces.empty() && !opt.lemma) throw ConfigError("diagnose needs trace files or --lemma");
  DiagnoseReport report;
  if (opt.lemma) report.checks = diagnose_lemma(opt);
  for (const auto& path : opt.traces) {
    std::ifstream in(path);
    if (!in) throw ContractError("cannot read trace " + path.string());
    const Trace t = Trace::read(in);
    std::string name = path.filename().string();
    fs::path dump = path;
    const auto pos = name.rfind(".trace.jsonl");
    std::unique_ptr<std::ifstream> dump_in;
    if (pos != std::string::npos) {
      dump.replace_filename(name.substr(0, pos) + ".kv.bin");
      if (fs::exists(dump)) dump_in = std::make_unique<std::ifstream>(dump, std::ios::binary);
    }
    auto checks = diagnose_trace(t, name, opt, dump_in.get());
    report.checks.insert(report.checks.end(), checks.begin(), checks.end());
  }
  return report;
}

void write_report_csv(const DiagnoseReport& report, std::ostream& o) {
  o << "source,check,status,value,detail\n";
  for (const auto& c : report.checks)
    o << c.source << ',' << c.name << ',' << check_status_name(c.status) << ',' << fmt(c.value) << ",\"" << c.detail
      << "\"\n";
}

std::vector<OutputRecord> read_outputs_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != "task_seed,block_size,correct,nfe_total,tokens")
    throw ContractError("outputs.csv: unexpected header");
  std::vector<OutputRecord> out;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto f = split(line, ",");
    if (f.size() != 5) throw ContractError("outputs.csv: malformed row '" + line + "'");
    OutputRecord r;
    r.task_seed = parse_number<std::uint64_t>("task_seed", f[0]);
    r.block_size = parse_number<int>("block_size", f[1]);
    r.correct = f[2] == "1";
    r.nfe_total = parse_number<std::int64_t>("nfe_total", f[3]);
    std::istringstream ts(f[4]);
    for (Token t; ts >> t;) r.tokens.push_back(t);
    out.push_back(std::move(r));
  }
  return out;
}

void cmd_analyze(const AnalyzeOptions& opt) {
  if (opt.inputs.empty()) throw ConfigError("analyze needs at least one run directory");
  std::map<std::uint64_t, std::map<int, OutputRecord>> by_task;
  for (const auto& dir : opt.inputs) {
    std::ifstream in(dir / "outputs.csv");
    if (!in) throw ContractError("cannot read " + (dir / "outputs.csv").string());
    for (auto& r : read_outputs_csv(in)) {
      auto& slot = by_task[r.task_seed];
      if (!slot.emplace(r.block_size, r).second)
        throw ContractError("duplicate output for task " + std::to_string(r.task_seed) + " block size " +
                            std::to_string(r.block_size));
    }
  }
  if (by_task.empty()) throw ContractError("no outputs to analyze");
  std::vector<int> sizes;
  for (const auto& [b, r] : by_task.begin()->second) sizes.push_back(b);
  for (const auto& [seed, m] : by_task) {
    std::vector<int> s;
    for (const auto& [b, r] : m) s.push_back(b);
    if (s != sizes)
      throw ContractError("task seeds differ across block sizes (task " + std::to_string(seed) + ")");
  }
  if (sizes.size() < 2) throw ContractError("analysis needs outputs for at least two block sizes");

  fs::path out = opt.out.empty() ? default_output_dir() / "analysis" : opt.out;
  fs::create_directories(out);

  RunConfig rc;
  bool have_cfg = false;
  if (fs::exists(opt.inputs.front() / "run.cfg")) {
    apply_config_file(rc, opt.inputs.front() / "run.cfg");
    have_cfg = true;
  }
  const Vocab vocab(rc.vocab_size);

  auto bif = open_out(out / "bifurcation.csv");
  auto con = open_out(out / "consensus.csv");
  bif << "task_seed";
  for (std::size_t i = 0; i < sizes.size(); ++i)
    for (std::size_t j = i + 1; j < sizes.size(); ++j) bif << ",b" << sizes[i] << "-b" << sizes[j];
  bif << '\n';
  con << "task_seed,position,modal,count,present,full,later_stage";
  for (int b : sizes) con << ",b" << b;
  con << '\n';

  const std::size_t npairs = sizes.size() * (sizes.size() - 1) / 2;
  std::vector<double> pair_sum(npairs, 0.0);
  std::vector<ConsensusMap> maps;
  std::map<std::uint64_t, std::vector<int>> later;
  for (const auto& [seed, m] : by_task) {
    std::vector<std::vector<Token>> outputs;
    for (const auto& [b, r] : m) outputs.push_back(r.tokens);
    const auto recs = bifurcation_records(outputs, sizes);
    bif << seed;
    for (std::size_t k = 0; k < recs.size(); ++k) {
      bif << ',' << recs[k].prefix;
      pair_sum[k] += recs[k].prefix;
    }
    bif << '\n';
    auto map = consensus_map(outputs);
    const auto ls = later_stage_consensus(map, recs);
    const std::set<int> ls_set(ls.begin(), ls.end());
    for (int p = 0; p < map.length(); ++p) {
      const auto up = static_cast<std::size_t>(p);
      con << seed << ',' << p << ',' << map.modal[up] << ',' << map.count[up] << ',' << map.present[up] << ','
          << (map.full(p) ? 1 : 0) << ',' << (ls_set.count(p) ? 1 : 0);
      for (std::size_t b = 0; b < sizes.size(); ++b) {
        con << ',';
        if (map.tokens[b][up]) con << *map.tokens[b][up];
      }
      con << '\n';
    }
    later[seed] = ls;
    maps.push_back(std::move(map));
  }
  bif << "mean";
  for (double s : pair_sum) bif << ',' << fmt(s / static_cast<double>(by_task.size()));
  bif << '\n';

  {
    auto cat = open_out(out / "category.csv");
    cat << "category,positions,mean_agreement";
    for (std::size_t k = 1; k <= sizes.size(); ++k) cat << ",agree_" << k;
    cat << '\n';
    for (const auto& row : category_agreement_profile(maps, vocab)) {
      cat << category_name(row.category) << ',' << fmt(row.positions) << ',' << fmt(row.mean_agreement);
      for (auto h : row.histogram) cat << ',' << h;
      cat << '\n';
    }
  }
  {
    auto ora = open_out(out / "oracle.csv");
    ora << "label,tasks,accuracy,mean_nfe_total\n";
    const double n = static_cast<double>(by_task.size());
    std::vector<double> acc(sizes.size(), 0.0), nfe(sizes.size(), 0.0);
    double oacc = 0, onfe = 0;
    for (const auto& [seed, m] : by_task) {
      std::vector<OracleRow> rows;
      std::size_t k = 0;
      for (const auto& [b, r] : m) {
        acc[k] += r.correct;
        nfe[k] += static_cast<double>(r.nfe_total);
        NfeCounter c;
        c.block = r.nfe_total;
        rows.push_back({b, r.correct, c, {}});
        ++k;
      }
      const auto pick = select_oracle(rows);
      oacc += pick.rows[pick.best_index].correct;
      onfe += static_cast<double>(pick.rows[pick.best_index].nfe.total());
    }
    for (std::size_t k = 0; k < sizes.size(); ++k)
      ora << 'b' << sizes[k] << ',' << by_task.size() << ',' << fmt(acc[k] / n) << ',' << fmt(nfe[k] / n) << '\n';
    ora << "oracle," << by_task.size() << ',' << fmt(oacc / n) << ',' << fmt(onfe / n) << '\n';
  }
  if (opt.seeded) {
    if (!have_cfg) throw ContractError("seeded analysis needs run.cfg in the first run directory");
    const ModelParams params = build_model(rc.model_seed, vocab, rc.model);
    DecodeConfig dc;
    dc.tau_conf = rc.scheduler.tau_conf;
    dc.gen_len = rc.gen_len();
    dc.refresh_interval = rc.scheduler.refresh_interval;
    dc.block_size = opt.seeded_block_size;
    auto sd = open_out(out / "seeded.csv");
    sd << "task_seed,block_size,seeds,baseline_correct,seeded_correct,delta_acc,baseline_nfe,seeded_nfe,delta_nfe\n";
    double dacc = 0, dnfe = 0;
    std::size_t idx = 0;
    for (const auto& [seed, m] : by_task) {
      const Task task = make_task(seed, rc.prompt_len, rc.gen_len(), vocab);
      const PlantedDenoiser model(params, task);
      std::vector<Commit> seeds;
      for (int p : later[seed]) seeds.push_back({rc.prompt_len + p, maps[idx].modal[static_cast<std::size_t>(p)]});
      const auto r = seeded_consensus_run(model, task, dc, seeds);
      sd << seed << ',' << dc.block_size << ',' << seeds.size() << ',' << (r.baseline.correct ? 1 : 0) << ','
         << (r.seeded.correct ? 1 : 0) << ',' << r.delta_acc << ',' << r.baseline.nfe.total() << ','
         << r.seeded.nfe.total() << ',' << r.delta_nfe << '\n';
      dacc += r.delta_acc;
      dnfe += static_cast<double>(r.delta_nfe);
      ++idx;
    }
    const double n = static_cast<double>(by_task.size());
    sd << "mean," << dc.block_size << ",,,," << fmt(dacc / n) << ",,," << fmt(dnfe / n) << '\n';
  }
}

}  // namespace blockbatch
