// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "blockbatch/errors.hpp"
#include "blockbatch/kvspace.hpp"
#include "blockbatch/scheduler.hpp"

using namespace blockbatch;

namespace {

Trace sample_trace(TraceLevel level) {
  const Vocab vocab(32);
  const auto params = build_model(1, vocab);
  const Task task = make_task(2, 16, 32, vocab);
  const PlantedDenoiser m(params, task);
  SchedulerConfig c;
  c.gen_len = 32;
  c.refresh_interval = 3;
  c.block_sizes = {4, 8};
  KvRecorder rec(m, level);
  BlockBatchOptions o;
  if (level != TraceLevel::kEvents) o.observer = &rec;
  auto t = run_blockbatch(m, task, c, o).trace;
  t.header.level = level;
  return t;
}

}  // namespace

TEST(Trace, RoundTripsExactly) {
  for (auto level : {TraceLevel::kEvents, TraceLevel::kNorms}) {
    const auto t = sample_trace(level);
    std::stringstream s;
    t.write(s);
    const auto back = Trace::read(s);
    EXPECT_EQ(back, t);
  }
}

TEST(Trace, StartsWithSchemaLine) {
  std::stringstream s;
  sample_trace(TraceLevel::kEvents).write(s);
  std::string first;
  std::getline(s, first);
  EXPECT_EQ(first.rfind("{\"schema\":\"blockbatch-trace\",\"version\":1", 0), 0u) << first;
}

TEST(Trace, RejectsBadInput) {
  std::stringstream bad1("{\"schema\":\"other\",\"version\":1}\n");
  EXPECT_THROW((void)Trace::read(bad1), ContractError);
  std::stringstream s;
  sample_trace(TraceLevel::kEvents).write(s);
  std::string text = s.str();
  const auto pos = text.find("\"version\":1");
  std::string v2 = text;
  v2.replace(pos, 11, "\"version\":9");
  std::stringstream bad2(v2);
  EXPECT_THROW((void)Trace::read(bad2), ContractError);
  std::stringstream bad3(text + "{\"record\":\"mystery\"}\n");
  EXPECT_THROW((void)Trace::read(bad3), ContractError);
  std::stringstream bad4(text + "{not json\n");
  EXPECT_THROW((void)Trace::read(bad4), ContractError);
  std::stringstream empty("");
  EXPECT_THROW((void)Trace::read(empty), ContractError);
}

TEST(Trace, NamesRoundTrip) {
  for (auto k : {EventKind::kInit, EventKind::kBlockForward, EventKind::kDecode, EventKind::kMerge, EventKind::kSync,
                 EventKind::kRefresh, EventKind::kEosPending, EventKind::kEosReady, EventKind::kFinish})
    EXPECT_EQ(parse_event_kind(event_kind_name(k)), k);
  for (auto l : {TraceLevel::kEvents, TraceLevel::kNorms, TraceLevel::kFullKv})
    EXPECT_EQ(parse_trace_level(trace_level_name(l)), l);
  EXPECT_THROW((void)parse_trace_level("verbose"), ConfigError);
}
