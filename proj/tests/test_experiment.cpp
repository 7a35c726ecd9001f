// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "blockbatch/errors.hpp"
#include "blockbatch/experiment.hpp"

using namespace blockbatch;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("blockbatch_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

RunConfig small(const fs::path& out) {
  RunConfig c;
  c.task_seeds = {0, 1, 2};
  c.prompt_len = 16;
  c.scheduler.gen_len = 64;
  c.scheduler.block_sizes = {4, 8, 16, 32};
  c.scheduler.refresh_interval = 4;
  c.out = out;
  return c;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(f, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(Config, ParsesSectionsAndComments) {
  RunConfig c;
  std::istringstream in(
      "# comment\n[model]\nseed = 9\n\n[task]\nseeds = 0-3,7\nprompt_len = 8\ngen_len = 40\n"
      "[scheduler]\nblock_sizes = 4,8\ntau_sync = off\nmerge = false\n[run]\nmode = single:8  # trailing\n");
  apply_config_file(c, in);
  EXPECT_EQ(c.model_seed, 9u);
  EXPECT_EQ(c.task_seeds, (std::vector<std::uint64_t>{0, 1, 2, 3, 7}));
  EXPECT_EQ(c.prompt_len, 8);
  EXPECT_EQ(c.gen_len(), 40);
  EXPECT_EQ(c.scheduler.block_sizes, (std::vector<int>{4, 8}));
  EXPECT_FALSE(c.scheduler.sync_enabled);
  EXPECT_FALSE(c.scheduler.merge_enabled);
  EXPECT_EQ(c.mode, RunMode::kSingle);
  EXPECT_EQ(c.single_block, 8);
}

TEST(Config, ErrorsNameTheField) {
  RunConfig c;
  try {
    apply_setting(c, "scheduler.tau_conf", "high");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("tau_conf"), std::string::npos);
  }
  EXPECT_THROW(apply_setting(c, "scheduler.bogus", "1"), ConfigError);
  EXPECT_THROW(apply_setting(c, "run.mode", "turbo"), ConfigError);
  EXPECT_THROW(apply_setting(c, "task.seeds", "5-2"), ConfigError);
  std::istringstream bad("[model\nseed = 1\n");
  EXPECT_THROW(apply_config_file(c, bad), ConfigError);
  std::istringstream noeq("[model]\nseed 1\n");
  EXPECT_THROW(apply_config_file(c, noeq), ConfigError);
}

TEST(Config, ValidationRejectsInconsistentRuns) {
  RunConfig c;
  EXPECT_THROW(c.validate(), ConfigError);  // empty task list
  c.task_seeds = {1, 1};
  EXPECT_THROW(c.validate(), ConfigError);
  c.task_seeds = {1};
  EXPECT_NO_THROW(c.validate());
  c.prompt_len = 100;
  EXPECT_THROW(c.validate(), ConfigError);
  c.prompt_len = 32;
  c.jobs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, WrittenConfigReadsBack) {
  RunConfig a = small("x");
  a.scheduler.tau_conf = 0.85;
  a.scheduler.sync_enabled = false;
  a.mode = RunMode::kOracle;
  a.model.head_gain = 5.5;
  std::stringstream s;
  write_config(a, s);
  RunConfig b;
  apply_config_file(b, s);
  std::stringstream t;
  write_config(b, t);
  EXPECT_EQ(s.str(), t.str());
  EXPECT_EQ(b.task_seeds, a.task_seeds);
  EXPECT_EQ(b.scheduler.tau_conf, 0.85);
  EXPECT_EQ(b.model.head_gain, 5.5);
}

TEST(Config, KeysAreAllSettable) {
  for (const auto& k : config_keys()) {
    if (k == "run.out" || k == "run.jobs") continue;  // not part of the recorded config
    RunConfig c;
    std::stringstream s;
    write_config(c, s);
    EXPECT_NE(s.str().find(k.substr(k.find('.') + 1) + " = "), std::string::npos) << k;
  }
}

TEST(Config, DefaultOutputDirectoryFromEnvironment) {
  ::setenv("BLOCKBATCH_OUT", "/tmp/somewhere", 1);
  EXPECT_EQ(default_output_dir(), fs::path("/tmp/somewhere"));
  ::unsetenv("BLOCKBATCH_OUT");
  EXPECT_EQ(default_output_dir(), fs::path("blockbatch_out"));
}

TEST(Run, WritesSummariesWithNfeBreakdown) {
  const auto out = scratch("run");
  const auto s = cmd_run(small(out));
  ASSERT_EQ(s.tasks.size(), 3u);
  for (const char* f : {"summary.csv", "outputs.csv", "suite.csv", "timing.csv", "run.cfg"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  for (std::uint64_t seed : {0, 1, 2})
    EXPECT_TRUE(fs::exists(out / "traces" / ("task_" + std::to_string(seed) + ".trace.jsonl")));
  const auto rows = read_csv(out / "summary.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0][4], "nfe_init");
  for (std::size_t i = 1; i < rows.size(); ++i)
    EXPECT_EQ(std::stoll(rows[i][7]), std::stoll(rows[i][4]) + std::stoll(rows[i][5]) + std::stoll(rows[i][6]));
}

TEST(Run, ReproducibleAcrossRunsAndJobCounts) {
  const auto a = scratch("repro_a"), b = scratch("repro_b");
  auto ca = small(a);
  auto cb = small(b);
  cb.jobs = 3;
  cmd_run(ca);
  cmd_run(cb);
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().filename() == "timing.csv") continue;
    const auto rel = fs::relative(e.path(), a);
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++compared;
  }
  EXPECT_GE(compared, 7u);
}

TEST(Run, VanillaCostsAtLeastEveryOtherMode) {
  const auto base = scratch("modes");
  auto c = small(base / "bb");
  c.write_traces = false;
  const auto bb = cmd_run(c);
  c.out = base / "vanilla";
  c.mode = RunMode::kVanilla;
  const auto va = cmd_run(c);
  c.out = base / "oracle";
  c.mode = RunMode::kOracle;
  const auto orc = cmd_run(c);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_GE(va.tasks[i].result.nfe.total(), bb.tasks[i].result.nfe.total());
    for (const auto& r : orc.tasks[i].oracle_rows) EXPECT_GE(va.tasks[i].result.nfe.total(), r.nfe.total());
  }
  EXPECT_TRUE(fs::exists(base / "oracle" / "oracle_summary.csv"));
  ASSERT_EQ(orc.per_size.size(), 5u);
  for (std::size_t k = 0; k + 1 < orc.per_size.size(); ++k) EXPECT_GE(orc.per_size.back().accuracy, orc.per_size[k].accuracy);
}

TEST(Sweep, SingletonSubsetsEqualSingleBranchRuns) {
  const auto out = scratch("sweep");
  SweepSpec spec;
  spec.axis = SweepAxis::kBlockSubset;
  spec.values = {"4", "16"};
  spec.base = small(out);
  spec.base.write_traces = false;
  const auto rows = cmd_sweep(spec);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    auto c = small(out / ("single" + r.value));
    c.write_traces = false;
    c.mode = RunMode::kSingle;
    c.single_block = std::stoi(r.value);
    const auto s = cmd_run(c).suite;
    EXPECT_EQ(s.accuracy, r.summary.accuracy);
    EXPECT_EQ(s.mean_nfe_total, r.summary.mean_nfe_total);
  }
  EXPECT_EQ(read_csv(out / "sweep.csv").size(), 3u);
}

TEST(Sweep, ValuesAreValidated) {
  SweepSpec spec;
  spec.axis = SweepAxis::kBlockSubset;
  spec.values = {"4+12"};
  spec.base = small(scratch("sweep_bad"));
  EXPECT_THROW(cmd_sweep(spec), ConfigError);
  spec.axis = SweepAxis::kRefreshInterval;
  spec.values = {"0"};
  EXPECT_THROW(cmd_sweep(spec), ConfigError);
  EXPECT_THROW((void)parse_sweep_axis("gamma"), ConfigError);
}

TEST(Sweep, EnumeratesAllSubsets) {
  const auto s = enumerate_subsets({16, 4, 8});
  ASSERT_EQ(s.size(), 7u);
  EXPECT_EQ(s.front(), (std::vector<int>{4}));
  EXPECT_EQ(s.back(), (std::vector<int>{4, 8, 16}));
  EXPECT_EQ(enumerate_subsets({4, 8, 16, 32, 64, 128}).size(), 63u);
}

TEST(Diagnose, HealthyRunPassesAndTamperingFails) {
  const auto out = scratch("diag");
  auto c = small(out);
  c.task_seeds = {3};
  cmd_run(c);
  const auto trace = out / "traces" / "task_3.trace.jsonl";
  DiagnoseOptions o;
  o.traces = {trace};
  const auto good = cmd_diagnose(o);
  EXPECT_TRUE(good.ok());

  std::ifstream in(trace);
  auto t = Trace::read(in);
  ASSERT_FALSE(t.pairs.empty());
  t.pairs[0].h_dist *= 1.5;
  const auto bad = diagnose_trace(t, "tampered", o);
  bool failed = false;
  for (const auto& r : bad)
    if (r.name == "pythagorean") failed = r.status == CheckStatus::kFail;
  EXPECT_TRUE(failed);

  o.require_full_kv = true;
  EXPECT_THROW(cmd_diagnose(o), InsufficientDataError);
}

TEST(Diagnose, FullKvChecksUseDumps) {
  const auto out = scratch("diag_full");
  auto c = small(out);
  c.task_seeds = {4};
  c.trace_level = TraceLevel::kFullKv;
  cmd_run(c);
  DiagnoseOptions o;
  o.traces = {out / "traces" / "task_4.trace.jsonl"};
  o.require_full_kv = true;
  const auto r = cmd_diagnose(o);
  EXPECT_TRUE(r.ok());
  bool saw = false;
  for (const auto& x : r.checks) saw = saw || (x.name == "kv_dump_dispersion" && x.status == CheckStatus::kPass);
  EXPECT_TRUE(saw);
}

TEST(Diagnose, LemmaRunsStandalone) {
  DiagnoseOptions o;
  o.lemma = true;
  o.lemma_trials = 20000;
  const auto r = cmd_diagnose(o);
  EXPECT_EQ(r.checks.size(), 18u);
  EXPECT_TRUE(r.ok());
  EXPECT_THROW(cmd_diagnose(DiagnoseOptions{}), ConfigError);
}

TEST(Analyze, WritesReportsForSingleRuns) {
  const auto base = scratch("analyze");
  AnalyzeOptions a;
  for (int b : {4, 8, 16}) {
    auto c = small(base / ("b" + std::to_string(b)));
    c.mode = RunMode::kSingle;
    c.single_block = b;
    c.write_traces = false;
    cmd_run(c);
    a.inputs.push_back(c.out);
  }
  a.out = base / "analysis";
  cmd_analyze(a);
  for (const char* f : {"bifurcation.csv", "consensus.csv", "category.csv", "oracle.csv", "seeded.csv"})
    EXPECT_TRUE(fs::exists(a.out / f)) << f;
  const auto bif = read_csv(a.out / "bifurcation.csv");
  ASSERT_EQ(bif.size(), 5u);  // header, three tasks, mean
  EXPECT_EQ(bif[0].size(), 4u);
  EXPECT_EQ(bif.back()[0], "mean");
}

TEST(Analyze, MismatchedSeedsAreRejected) {
  const auto base = scratch("analyze_bad");
  auto c1 = small(base / "a");
  c1.mode = RunMode::kSingle;
  c1.single_block = 4;
  c1.write_traces = false;
  auto c2 = c1;
  c2.out = base / "b";
  c2.single_block = 8;
  c2.task_seeds = {0, 1, 5};
  cmd_run(c1);
  cmd_run(c2);
  AnalyzeOptions a;
  a.inputs = {c1.out, c2.out};
  a.out = base / "analysis";
  EXPECT_THROW(cmd_analyze(a), ContractError);
}

TEST(Analyze, OutputsCsvRoundTrip) {
  std::istringstream in("task_seed,block_size,correct,nfe_total,tokens\n3,8,1,40,1 2 3\n");
  const auto r = read_outputs_csv(in);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].tokens, (std::vector<Token>{1, 2, 3}));
  std::istringstream bad("seed,tokens\n");
  EXPECT_THROW((void)read_outputs_csv(bad), ContractError);
}
