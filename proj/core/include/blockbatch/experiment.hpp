// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "blockbatch/analysis.hpp"
#include "blockbatch/model.hpp"
#include "blockbatch/scheduler.hpp"
#include "blockbatch/trace.hpp"

namespace blockbatch {

enum class RunMode { kBlockBatch, kSingle, kOracle, kVanilla };

/// Everything a suite run depends on. Defaults follow the reference
/// settings (tau_conf 0.9, tau_merge 0.5, tau_sync 8, R 32, G 256).
struct RunConfig {
  std::uint64_t model_seed = 1;
  int vocab_size = 32;
  ModelConfig model;
  std::vector<std::uint64_t> task_seeds;
  int prompt_len = 32;
  SchedulerConfig scheduler;
  RunMode mode = RunMode::kBlockBatch;
  /// Block size of single mode.
  int single_block = 32;
  TraceLevel trace_level = TraceLevel::kNorms;
  bool write_traces = true;
  std::filesystem::path out;
  int jobs = 1;

  int gen_len() const { return scheduler.gen_len; }
  std::string mode_name() const;
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Default output directory: $BLOCKBATCH_OUT, else "blockbatch_out".
std::filesystem::path default_output_dir();

/// Applies one "section.key = value" setting; ConfigError on unknown keys
/// or malformed values. Keys are listed by config_keys().
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);
std::vector<std::string> config_keys();

/// Reads "[section]" headers and "key = value" lines; '#' starts a comment.
void apply_config_file(RunConfig& cfg, std::istream& in);
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);
/// The effective configuration in the file format, one key per line.
void write_config(const RunConfig& cfg, std::ostream& out);

/// "0-9,15" style lists.
std::vector<std::uint64_t> parse_seed_list(std::string_view text);
/// "4,8,16" (or '+' separated).
std::vector<int> parse_int_list(std::string_view text);
/// "blockbatch", "single:<b>", "oracle", "vanilla".
void parse_mode(std::string_view text, RunConfig& cfg);

struct TaskOutcome {
  std::uint64_t seed = 0;
  GenerationResult result;
  int merges = 0;
  int syncs = 0;
  /// Oracle mode: one row per block size.
  std::vector<OracleRow> oracle_rows;
  double seconds = 0;
};

struct SuiteSummary {
  std::string label;
  std::size_t tasks = 0;
  double accuracy = 0;
  double mean_nfe_total = 0;
  double mean_nfe_init = 0;
  double mean_nfe_block = 0;
  double mean_nfe_refresh = 0;
};

struct RunSummary {
  std::vector<TaskOutcome> tasks;
  SuiteSummary suite;
  /// Oracle mode: each fixed block size, then the oracle.
  std::vector<SuiteSummary> per_size;
};

/// Runs one task of the suite in the configured mode. Writes its trace when
/// the config asks for it.
TaskOutcome run_task(const RunConfig& cfg, const ModelParams& params, std::uint64_t seed);

/// Runs the suite and writes traces/, summary.csv, outputs.csv, suite.csv,
/// timing.csv, run.cfg (and oracle_table.csv, oracle_summary.csv in oracle
/// mode) under cfg.out.
RunSummary cmd_run(const RunConfig& cfg);

enum class SweepAxis { kTauSync, kRefreshInterval, kBlockSubset };
SweepAxis parse_sweep_axis(std::string_view name);
std::string_view sweep_axis_name(SweepAxis axis);

struct SweepSpec {
  SweepAxis axis = SweepAxis::kTauSync;
  /// Axis values as text; block subsets are written "4+8+16".
  std::vector<std::string> values;
  RunConfig base;
  /// Block-subset axis: enumerate every non-empty subset of the base block sizes.
  bool all_subsets = false;
};

struct SweepRow {
  std::string value;
  SuiteSummary summary;
};

/// Runs one suite per value under out/<axis>=<value>/ and writes sweep.csv.
std::vector<SweepRow> cmd_sweep(const SweepSpec& spec);

/// Every non-empty subset, by size and then lexicographically.
std::vector<std::vector<int>> enumerate_subsets(std::vector<int> sizes);

enum class CheckStatus { kPass, kFail, kSkip, kInfo };
std::string_view check_status_name(CheckStatus s);

struct CheckResult {
  std::string source;
  std::string name;
  CheckStatus status = CheckStatus::kSkip;
  double value = 0;
  std::string detail;
};

struct DiagnoseOptions {
  std::vector<std::filesystem::path> traces;
  bool lemma = false;
  bool require_full_kv = false;
  std::int64_t lemma_trials = 100000;
  std::uint64_t lemma_seed = 2026;
  double rel_tol = 1e-6;
  double refresh_tol = 1e-9;
};

struct DiagnoseReport {
  std::vector<CheckResult> checks;
  bool ok() const;
};

/// Checks on a parsed trace; `kv_dump` (optional) is the full-kv side file.
std::vector<CheckResult> diagnose_trace(const Trace& trace, const std::string& source, const DiagnoseOptions& opt,
                                        std::istream* kv_dump = nullptr);
std::vector<CheckResult> diagnose_lemma(const DiagnoseOptions& opt);
/// InsufficientDataError when a full-kv check is required but a trace lacks dumps.
DiagnoseReport cmd_diagnose(const DiagnoseOptions& opt);
void write_report_csv(const DiagnoseReport& report, std::ostream& out);

struct AnalyzeOptions {
  /// Run directories holding outputs.csv (one oracle run or several single runs).
  std::vector<std::filesystem::path> inputs;
  std::filesystem::path out;
  bool seeded = true;
  int seeded_block_size = 32;
};

struct OutputRecord {
  std::uint64_t task_seed = 0;
  int block_size = 0;
  bool correct = false;
  std::int64_t nfe_total = 0;
  std::vector<Token> tokens;
};

std::vector<OutputRecord> read_outputs_csv(std::istream& in);

/// Writes bifurcation.csv, consensus.csv, category.csv, oracle.csv and
/// seeded.csv. ContractError when the task seeds differ across block sizes.
void cmd_analyze(const AnalyzeOptions& opt);

}  // namespace blockbatch
