// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "blockbatch/errors.hpp"
#include "blockbatch/experiment.hpp"

namespace bb = blockbatch;

namespace {

constexpr int kExitFailedChecks = 1;
constexpr int kExitUsage = 2;
constexpr int kExitError = 3;

/// Flags shared by run and sweep. Values are kept as text and applied on
/// top of the config file.
struct RunFlags {
  std::optional<std::string> config;
  std::vector<std::pair<std::string, std::optional<std::string>>> settings{
      {"scheduler.block_sizes", {}}, {"scheduler.tau_conf", {}},       {"scheduler.tau_merge", {}},
      {"scheduler.tau_sync", {}},    {"scheduler.refresh_interval", {}}, {"task.gen_len", {}},
      {"task.prompt_len", {}},       {"model.seed", {}},                {"task.seeds", {}},
      {"run.mode", {}},              {"run.trace_level", {}},           {"run.out", {}},
      {"run.jobs", {}},              {"scheduler.merge", {}}};

  void add(CLI::App* app) {
    static const char* const names[] = {"--block-sizes", "--tau-conf",  "--tau-merge",   "--tau-sync",
                                        "--refresh-interval", "--gen-len", "--prompt-len", "--model-seed",
                                        "--task-seeds", "--mode",      "--trace-level", "--out",
                                        "--jobs",       "--merge"};
    static const char* const help[] = {"block-size set, e.g. 4,8,16,32,64,128",
                                       "confidence threshold",
                                       "merge threshold",
                                       "sync threshold (integer, or off)",
                                       "block forwards between refreshes",
                                       "generation length",
                                       "prompt length",
                                       "model seed",
                                       "task seeds, e.g. 0-99 or 1,5,9",
                                       "blockbatch | single:<b> | oracle | vanilla",
                                       "events | norms | full-kv",
                                       "output directory (default $BLOCKBATCH_OUT or blockbatch_out)",
                                       "parallel tasks",
                                       "enable merging (true/false)"};
    app->add_option("--config", config, "config file (key = value sections)");
    for (std::size_t i = 0; i < settings.size(); ++i) app->add_option(names[i], settings[i].second, help[i]);
  }

  bb::RunConfig build() const {
    bb::RunConfig cfg;
    if (config) bb::apply_config_file(cfg, std::filesystem::path(*config));
    for (const auto& [key, value] : settings)
      if (value) bb::apply_setting(cfg, key, *value);
    if (cfg.out.empty()) cfg.out = bb::default_output_dir();
    return cfg;
  }
};

void print_suite(const bb::SuiteSummary& s) {
  std::cout << s.label << ": tasks=" << s.tasks << " accuracy=" << s.accuracy << " mean_nfe=" << s.mean_nfe_total
            << " (init " << s.mean_nfe_init << ", block " << s.mean_nfe_block << ", refresh " << s.mean_nfe_refresh
            << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Branch-parallel block diffusion decoding on a synthetic denoiser"};
  app.require_subcommand(1);

  RunFlags run_flags;
  bool no_traces = false;
  auto* run = app.add_subcommand("run", "run a task suite in one mode");
  run_flags.add(run);
  run->add_flag("--no-traces", no_traces, "skip per-task trace files");

  RunFlags sweep_flags;
  std::string axis;
  std::vector<std::string> values;
  bool all_subsets = false;
  bool keep_traces = false;
  auto* sweep = app.add_subcommand("sweep", "run one suite per value of an ablation axis");
  sweep_flags.add(sweep);
  sweep->add_option("--axis", axis, "tau_sync | refresh_interval | block_subset")->required();
  sweep->add_option("--values", values, "axis values; block subsets as 4+8+16")->delimiter(',');
  sweep->add_flag("--all-subsets", all_subsets, "enumerate every non-empty subset of the block sizes");
  sweep->add_flag("--keep-traces", keep_traces, "write per-task traces for every value");

  bb::DiagnoseOptions diag;
  std::vector<std::string> trace_files;
  std::optional<std::string> report_path;
  auto* diagnose = app.add_subcommand("diagnose", "verify cache-space invariants on traces");
  diagnose->add_option("traces", trace_files, "trace files (*.trace.jsonl)");
  diagnose->add_flag("--lemma", diag.lemma, "run the Monte-Carlo block-energy checks");
  diagnose->add_flag("--require-full-kv", diag.require_full_kv, "fail unless full cache dumps are present");
  diagnose->add_option("--lemma-trials", diag.lemma_trials, "Monte-Carlo trials per block size");
  diagnose->add_option("--lemma-seed", diag.lemma_seed, "Monte-Carlo seed");
  diagnose->add_option("--report", report_path, "write the report as CSV");

  bb::AnalyzeOptions an;
  std::vector<std::string> inputs;
  std::optional<std::string> analyze_out;
  bool no_seeded = false;
  auto* analyze = app.add_subcommand("analyze", "cross-block-size output analysis");
  analyze->add_option("inputs", inputs, "run directories holding outputs.csv")->required();
  analyze->add_option("--out", analyze_out, "output directory");
  analyze->add_option("--seeded-block-size", an.seeded_block_size, "block size of the seeded rerun");
  analyze->add_flag("--no-seeded", no_seeded, "skip the seeded rerun");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    if (*run) {
      auto cfg = run_flags.build();
      if (no_traces) cfg.write_traces = false;
      const auto summary = bb::cmd_run(cfg);
      if (summary.per_size.empty()) print_suite(summary.suite);
      for (const auto& s : summary.per_size) print_suite(s);
      std::cout << "wrote " << cfg.out.string() << '\n';
      return 0;
    }
    if (*sweep) {
      bb::SweepSpec spec;
      spec.axis = bb::parse_sweep_axis(axis);
      spec.values = values;
      spec.all_subsets = all_subsets;
      spec.base = sweep_flags.build();
      spec.base.write_traces = keep_traces;
      for (const auto& row : bb::cmd_sweep(spec)) {
        std::cout << bb::sweep_axis_name(spec.axis) << '=' << row.value << "  ";
        print_suite(row.summary);
      }
      return 0;
    }
    if (*diagnose) {
      for (const auto& t : trace_files) diag.traces.emplace_back(t);
      const auto report = bb::cmd_diagnose(diag);
      bb::write_report_csv(report, std::cout);
      if (report_path) {
        std::ofstream f(*report_path);
        if (!f) throw std::runtime_error("cannot write " + *report_path);
        bb::write_report_csv(report, f);
      }
      if (!report.ok()) {
        std::cerr << "diagnose: invariant check failed\n";
        return kExitFailedChecks;
      }
      return 0;
    }
    if (*analyze) {
      for (const auto& i : inputs) an.inputs.emplace_back(i);
      an.out = analyze_out ? std::filesystem::path(*analyze_out) : bb::default_output_dir() / "analysis";
      an.seeded = !no_seeded;
      bb::cmd_analyze(an);
      std::cout << "wrote " << an.out.string() << '\n';
      return 0;
    }
  } catch (const bb::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const bb::InsufficientDataError& e) {
    std::cerr << "insufficient trace data: " << e.what() << '\n';
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return 0;
}
