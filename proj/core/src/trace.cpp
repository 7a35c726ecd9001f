// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockbatch/trace.hpp"

#include <array>
#include <istream>
#include <nlohmann/json.hpp>
#include <ostream>
#include <string>

#include "blockbatch/errors.hpp"

namespace blockbatch {

using json = nlohmann::ordered_json;

namespace {

constexpr std::array<std::string_view, 9> kEventNames = {
    "init", "block_forward", "decode", "merge", "sync", "refresh", "eos_pending", "eos_ready", "finish"};
constexpr std::array<std::string_view, 3> kLevelNames = {"events", "norms", "full-kv"};

json nfe_to_json(const NfeCounter& n) { return json{{"init", n.init}, {"block", n.block}, {"refresh", n.refresh}}; }

NfeCounter nfe_from_json(const json& j) {
  return {j.at("init").get<std::int64_t>(), j.at("block").get<std::int64_t>(), j.at("refresh").get<std::int64_t>()};
}

json event_to_json(const TraceEvent& e) {
  json j;
  j["record"] = "event";
  j["step"] = e.step;
  j["kind"] = event_kind_name(e.kind);
  j["branch"] = e.branch;
  j["decoded"] = e.decoded;
  j["nfe"] = nfe_to_json(e.nfe);
  j["calls"] = e.calls;
  if (e.window) j["window"] = {e.window->start, e.window->end};
  if (!e.commits.empty()) {
    json c = json::array();
    for (const auto& cm : e.commits) c.push_back({cm.pos, cm.token});
    j["commits"] = std::move(c);
  }
  switch (e.kind) {
    case EventKind::kMerge:
      j["source"] = e.source;
      j["pos"] = e.pos;
      j["token"] = e.token;
      j["p_dest"] = e.p_dest;
      j["compatible"] = e.compatible;
      break;
    case EventKind::kSync:
      j["leader"] = e.leader;
      j["gap"] = e.gap;
      break;
    case EventKind::kEosPending:
    case EventKind::kEosReady:
      j["eos_pos"] = e.eos_pos;
      break;
    case EventKind::kFinish:
      j["winner"] = e.winner;
      j["winner_block_size"] = e.winner_block_size;
      j["reason"] = e.reason;
      break;
    default:
      break;
  }
  if (!e.kv.empty()) {
    json kv = json::array();
    for (const auto& m : e.kv) {
      json r{{"branch", m.branch}, {"e_pre", m.e_pre}, {"e_post", m.e_post}, {"delta", m.delta_norm}};
      if (m.dump_index >= 0) r["dump"] = m.dump_index;
      kv.push_back(std::move(r));
    }
    j["kv"] = std::move(kv);
  }
  return j;
}

TraceEvent event_from_json(const json& j) {
  TraceEvent e;
  e.step = j.at("step").get<std::int64_t>();
  e.kind = parse_event_kind(j.at("kind").get<std::string>());
  e.branch = j.at("branch").get<int>();
  e.decoded = j.at("decoded").get<std::vector<int>>();
  e.nfe = nfe_from_json(j.at("nfe"));
  e.calls = j.at("calls").get<std::int64_t>();
  if (j.contains("window")) e.window = BlockWindow{j["window"].at(0).get<int>(), j["window"].at(1).get<int>()};
  if (j.contains("commits"))
    for (const auto& c : j["commits"]) e.commits.push_back({c.at(0).get<int>(), c.at(1).get<Token>()});
  e.source = j.value("source", -1);
  e.pos = j.value("pos", -1);
  e.token = j.value("token", Token{-1});
  e.p_dest = j.value("p_dest", 0.0);
  e.compatible = j.value("compatible", false);
  e.leader = j.value("leader", -1);
  e.gap = j.value("gap", 0);
  e.eos_pos = j.value("eos_pos", -1);
  e.winner = j.value("winner", -1);
  e.winner_block_size = j.value("winner_block_size", 0);
  e.reason = j.value("reason", std::string{});
  if (j.contains("kv"))
    for (const auto& r : j["kv"])
      e.kv.push_back({r.at("branch").get<int>(), r.at("e_pre").get<double>(), r.at("e_post").get<double>(),
                      r.at("delta").get<double>(), r.value("dump", std::int64_t{-1})});
  return e;
}

}  // namespace

std::string_view event_kind_name(EventKind k) { return kEventNames.at(static_cast<std::size_t>(k)); }

EventKind parse_event_kind(std::string_view name) {
  for (std::size_t i = 0; i < kEventNames.size(); ++i)
    if (kEventNames[i] == name) return static_cast<EventKind>(i);
  throw ContractError("unknown event kind: " + std::string(name));
}

std::string_view trace_level_name(TraceLevel l) { return kLevelNames.at(static_cast<std::size_t>(l)); }

TraceLevel parse_trace_level(std::string_view name) {
  for (std::size_t i = 0; i < kLevelNames.size(); ++i)
    if (kLevelNames[i] == name) return static_cast<TraceLevel>(i);
  throw ConfigError("unknown trace level: " + std::string(name));
}

void Trace::write(std::ostream& out) const {
  json h;
  h["schema"] = "blockbatch-trace";
  h["version"] = header.version;
  h["mode"] = header.mode;
  h["model_seed"] = header.model_seed;
  h["task_seed"] = header.task_seed;
  h["block_sizes"] = header.block_sizes;
  h["tau_conf"] = header.tau_conf;
  h["tau_merge"] = header.tau_merge;
  h["tau_sync"] = header.tau_sync;
  h["merge_enabled"] = header.merge_enabled;
  h["refresh_interval"] = header.refresh_interval;
  h["prompt_len"] = header.prompt_len;
  h["gen_len"] = header.gen_len;
  h["level"] = trace_level_name(header.level);
  h["kv_dim"] = header.kv_dim;
  out << h.dump() << '\n';
  for (const auto& e : events) out << event_to_json(e).dump() << '\n';
  for (const auto& t : tangents)
    out << json{{"record", "tangent"}, {"step", t.step},     {"branch", t.branch}, {"kind", event_kind_name(t.kind)},
                {"z", t.z},            {"a", t.a},           {"q", t.q},           {"h_norm", t.h_norm},
                {"r_norm", t.r_norm}}
               .dump()
        << '\n';
  for (const auto& p : pairs)
    out << json{{"record", "pair"}, {"step", p.step}, {"i", p.i},          {"j", p.j},
                {"d", p.d},         {"d_proj", p.d_proj}, {"h_dist", p.h_dist}}
               .dump()
        << '\n';
  for (const auto& d : dispersion)
    out << json{{"record", "dispersion"}, {"step", d.step}, {"branches", d.branches}, {"value", d.value}}.dump()
        << '\n';
}

Trace Trace::read(std::istream& in) {
  Trace t;
  std::string line;
  bool have_header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      if (!have_header) {
        if (j.value("schema", std::string{}) != "blockbatch-trace")
          throw ContractError("not a blockbatch trace");
        auto& h = t.header;
        h.version = j.at("version").get<int>();
        if (h.version != kTraceSchemaVersion)
          throw ContractError("unsupported trace version " + std::to_string(h.version));
        h.mode = j.at("mode").get<std::string>();
        h.model_seed = j.at("model_seed").get<std::uint64_t>();
        h.task_seed = j.at("task_seed").get<std::uint64_t>();
        h.block_sizes = j.at("block_sizes").get<std::vector<int>>();
        h.tau_conf = j.at("tau_conf").get<double>();
        h.tau_merge = j.at("tau_merge").get<double>();
        h.tau_sync = j.at("tau_sync").get<std::int64_t>();
        h.merge_enabled = j.at("merge_enabled").get<bool>();
        h.refresh_interval = j.at("refresh_interval").get<int>();
        h.prompt_len = j.at("prompt_len").get<int>();
        h.gen_len = j.at("gen_len").get<int>();
        h.level = parse_trace_level(j.at("level").get<std::string>());
        h.kv_dim = j.at("kv_dim").get<std::int64_t>();
        have_header = true;
        continue;
      }
      const auto rec = j.at("record").get<std::string>();
      if (rec == "event") {
        t.events.push_back(event_from_json(j));
      } else if (rec == "tangent") {
        t.tangents.push_back({j.at("step").get<std::int64_t>(), j.at("branch").get<int>(),
                              parse_event_kind(j.at("kind").get<std::string>()), j.at("z").get<double>(),
                              j.at("a").get<double>(), j.at("q").get<double>(), j.at("h_norm").get<double>(),
                              j.at("r_norm").get<double>()});
      } else if (rec == "pair") {
        t.pairs.push_back({j.at("step").get<std::int64_t>(), j.at("i").get<int>(), j.at("j").get<int>(),
                           j.at("d").get<double>(), j.at("d_proj").get<double>(), j.at("h_dist").get<double>()});
      } else if (rec == "dispersion") {
        t.dispersion.push_back(
            {j.at("step").get<std::int64_t>(), j.at("branches").get<int>(), j.at("value").get<double>()});
      } else {
        throw ContractError("unknown record type: " + rec);
      }
    } catch (const json::exception& ex) {
      throw ContractError("trace line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  if (!have_header) throw ContractError("trace has no header");
  return t;
}

}  // namespace blockbatch
