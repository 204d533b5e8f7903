#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "json_io.hpp"
#include "stagesim/session.hpp"

namespace stagesim {

int SessionConfig::input_channels() const {
  int n = 0;
  for (const PlayerConfig& p : players) n = std::max(n, p.mic_channel + 1);
  return n;
}

int SessionConfig::output_channels() const {
  int n = 0;
  for (const ListenerConfig& l : listeners) n = std::max({n, l.headphone_channels[0] + 1, l.headphone_channels[1] + 1});
  return n;
}

std::size_t SessionConfig::scenario_index(const std::string& id) const {
  for (std::size_t i = 0; i < scenarios.size(); ++i)
    if (scenarios[i].id == id) return i;
  throw ValidationError("unknown scenario '" + id + "'");
}

namespace {

void check_structure(const SessionConfig& c, bool check_files) {
  if (!(c.sample_rate > 0.0)) throw ValidationError("session: sample_rate must be positive");
  if (c.block_size < 1 || c.block_size > 8192) throw ValidationError("session: block_size out of range");
  if (!(c.latency_s >= 0.0)) throw ValidationError("session: latency_s must be >= 0");
  if (!(c.c > 0.0)) throw ValidationError("session: c must be positive");
  if (!(c.crossfade_s >= 0.0)) throw ValidationError("session: crossfade_s must be >= 0");
  if (c.latency_source != "declared" && c.latency_source != "measured")
    throw ValidationError("session: latency_source must be declared or measured");
  if (c.players.empty() || c.listeners.empty()) throw ValidationError("session: needs players and listeners");
  if (c.players.size() > 64) throw ValidationError("session: at most 64 players");
  if (c.scenarios.empty()) throw ValidationError("session: needs at least one scenario");
  std::set<int> pid, lid;
  for (const PlayerConfig& p : c.players) {
    if (!pid.insert(p.id).second) throw ValidationError("session: duplicate player id " + std::to_string(p.id));
    if (p.mic_channel < 0) throw ValidationError("session: negative mic channel");
    if (!(p.d_ms >= 0.0)) throw ValidationError("session: d_ms_m must be >= 0");
    if (check_files && !p.directivity.empty() && !std::filesystem::exists(c.base_dir / p.directivity))
      throw ValidationError("session: missing directivity file " + p.directivity);
  }
  for (const ListenerConfig& l : c.listeners) {
    if (!lid.insert(l.id).second) throw ValidationError("session: duplicate listener id " + std::to_string(l.id));
    if (l.headphone_channels[0] < 0 || l.headphone_channels[1] < 0)
      throw ValidationError("session: negative headphone channel");
    if (check_files && !l.headphone_response.empty() && !std::filesystem::exists(c.base_dir / l.headphone_response))
      throw ValidationError("session: missing headphone response " + l.headphone_response);
  }
  std::set<std::string> sid;
  for (const ScenarioConfig& s : c.scenarios) {
    if (s.id.empty()) throw ValidationError("session: scenario without id");
    if (!sid.insert(s.id).second) throw ValidationError("session: duplicate scenario id " + s.id);
    std::set<std::pair<int, int>> pairs;
    for (const BrirRef& b : s.brirs) {
      if (!pid.count(b.source) || !lid.count(b.listener))
        throw ValidationError("session: scenario " + s.id + " references unknown pair (" +
                              std::to_string(b.source) + ", " + std::to_string(b.listener) + ")");
      if (!pairs.insert({b.source, b.listener}).second)
        throw ValidationError("session: scenario " + s.id + " has two BRIRs for pair (" +
                              std::to_string(b.source) + ", " + std::to_string(b.listener) + ")");
      if (check_files && !std::filesystem::exists(c.base_dir / b.path))
        throw ValidationError("session: missing BRIR " + (c.base_dir / b.path).string());
    }
    if (pairs.size() != c.players.size() * c.listeners.size())
      throw ValidationError("session: scenario " + s.id + " does not cover every (player, listener) pair");
  }
  for (const std::string& id : c.scenario_order)
    if (!sid.count(id)) throw ValidationError("session: scenario_order names unknown scenario " + id);
}

}  // namespace

SessionConfig parse_session_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  detail::require_schema(j, 1, "session");
  SessionConfig c;
  c.base_dir = base_dir;
  try {
    c.sample_rate = j.at("sample_rate").get<double>();
    c.block_size = j.at("block_size").get<Eigen::Index>();
    c.latency_s = j.value("latency_s", 0.0);
    c.latency_source = j.value("latency_source", "declared");
    c.c = j.value("c", 343.0);
    for (const auto& p : j.at("players"))
      c.players.push_back({p.at("id").get<int>(), p.value("mic_channel", 0), p.value("d_ms_m", 1.0),
                           p.value("directivity", "")});
    for (const auto& l : j.at("listeners")) {
      ListenerConfig lc;
      lc.id = l.at("id").get<int>();
      if (l.contains("headphone_channels")) {
        const auto ch = l.at("headphone_channels").get<std::vector<int>>();
        if (ch.size() != 2) throw ValidationError("session: headphone_channels needs two entries");
        lc.headphone_channels = {ch[0], ch[1]};
      }
      lc.headphone_response = l.value("headphone_response", "");
      c.listeners.push_back(lc);
    }
    for (const auto& s : j.at("scenarios")) {
      ScenarioConfig sc;
      sc.id = s.at("id").get<std::string>();
      sc.name = s.value("name", sc.id);
      for (const auto& b : s.at("brirs"))
        sc.brirs.push_back({b.at("source").get<int>(), b.at("listener").get<int>(), b.at("path").get<std::string>()});
      c.scenarios.push_back(std::move(sc));
    }
    c.scenario_order = j.value("scenario_order", std::vector<std::string>{});
    if (j.contains("geometry")) {
      const auto& g = j.at("geometry");
      StageGeometry sg;
      sg.min_distance_m = g.value("min_distance_m", sg.min_distance_m);
      sg.receiver_height_m = g.value("receiver_height_m", sg.receiver_height_m);
      sg.self_horizontal_m = g.value("self_horizontal_m", 0.0);
      if (g.contains("self_source_height_m")) sg.self_source_height_m = g.at("self_source_height_m").get<double>();
      c.geometry = sg;
    }
    if (j.contains("feasibility_override") && !j.at("feasibility_override").is_null()) {
      const auto& o = j.at("feasibility_override");
      c.feasibility_override = FeasibilityOverride{o.at("reason").get<std::string>(), o.value("operator", "")};
      if (c.feasibility_override->reason.empty()) throw ValidationError("session: override needs a reason");
    }
    c.crossfade_s = j.value("crossfade_s", 0.05);
    if (j.contains("talkback")) {
      c.talkback_enabled = j.at("talkback").value("enabled", false);
      c.talkback_gain = j.at("talkback").value("gain", 0.5);
    }
    if (j.contains("event_log")) c.event_log = j.at("event_log").get<std::string>();
    if (j.contains("simulated_device")) {
      const auto& d = j.at("simulated_device");
      c.simulated_device.paced = d.value("paced", true);
      c.simulated_device.loopback_output = d.value("loopback_output", 0);
      c.simulated_device.loopback_input = d.value("loopback_input", 0);
      c.simulated_device.loopback_delay_samples = d.value("loopback_delay_samples", Eigen::Index(0));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("session: ") + e.what());
  }
  check_structure(c, !base_dir.empty());
  return c;
}

SessionConfig read_session_config(const std::filesystem::path& path) {
  const nlohmann::json j = detail::load_json(path, "session config");
  std::filesystem::path base = path.parent_path();
  if (base.empty()) base = ".";
  return parse_session_config(j, base);
}

nlohmann::json to_json(const SessionConfig& c) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["sample_rate"] = c.sample_rate;
  j["block_size"] = c.block_size;
  j["latency_s"] = c.latency_s;
  j["latency_source"] = c.latency_source;
  j["c"] = c.c;
  j["players"] = nlohmann::json::array();
  for (const PlayerConfig& p : c.players)
    j["players"].push_back(
        {{"id", p.id}, {"mic_channel", p.mic_channel}, {"d_ms_m", p.d_ms}, {"directivity", p.directivity}});
  j["listeners"] = nlohmann::json::array();
  for (const ListenerConfig& l : c.listeners)
    j["listeners"].push_back({{"id", l.id},
                              {"headphone_channels", {l.headphone_channels[0], l.headphone_channels[1]}},
                              {"headphone_response", l.headphone_response}});
  j["scenarios"] = nlohmann::json::array();
  for (const ScenarioConfig& s : c.scenarios) {
    nlohmann::json b = nlohmann::json::array();
    for (const BrirRef& r : s.brirs)
      b.push_back({{"source", r.source}, {"listener", r.listener}, {"path", r.path.generic_string()}});
    j["scenarios"].push_back({{"id", s.id}, {"name", s.name}, {"brirs", b}});
  }
  j["scenario_order"] = c.scenario_order;
  if (c.geometry)
    j["geometry"] = {{"min_distance_m", c.geometry->min_distance_m},
                     {"receiver_height_m", c.geometry->receiver_height_m}};
  if (c.feasibility_override)
    j["feasibility_override"] = {{"reason", c.feasibility_override->reason},
                                 {"operator", c.feasibility_override->operator_name}};
  j["crossfade_s"] = c.crossfade_s;
  j["talkback"] = {{"enabled", c.talkback_enabled}, {"gain", c.talkback_gain}};
  if (!c.event_log.empty()) j["event_log"] = c.event_log.generic_string();
  j["simulated_device"] = {{"paced", c.simulated_device.paced},
                           {"loopback_output", c.simulated_device.loopback_output},
                           {"loopback_input", c.simulated_device.loopback_input},
                           {"loopback_delay_samples", c.simulated_device.loopback_delay_samples}};
  return j;
}

FeasibilityReport session_feasibility(const SessionConfig& c) {
  StageGeometry g = c.geometry.value_or(StageGeometry{});
  double d_ms = std::numeric_limits<double>::infinity();
  for (const PlayerConfig& p : c.players) d_ms = std::min(d_ms, p.d_ms);
  g.d_ms = std::isfinite(d_ms) ? d_ms : 0.0;
  return check_feasibility(c.latency_s, g, c.c);
}

LoadedSession make_session(SessionConfig config, std::vector<LoadedScenario> scenarios) {
  check_structure(config, false);
  const std::size_t M = config.players.size(), N = config.listeners.size();
  if (scenarios.size() != config.scenarios.size()) throw ValidationError("session: scenario count mismatch");
  for (std::size_t s = 0; s < scenarios.size(); ++s) {
    const LoadedScenario& sc = scenarios[s];
    if (sc.id != config.scenarios[s].id) throw ValidationError("session: scenario order mismatch");
    if (sc.ir.size() != M) throw ValidationError("session: scenario " + sc.id + " needs one row per player");
    for (std::size_t m = 0; m < M; ++m) {
      if (sc.ir[m].size() != N) throw ValidationError("session: scenario " + sc.id + " needs one IR per listener");
      for (std::size_t n = 0; n < N; ++n) {
        const ImpulseResponse& h = sc.ir[m][n];
        const int pid = config.players[m].id, lid = config.listeners[n].id;
        const std::string where =
            "session: scenario " + sc.id + " pair (" + std::to_string(pid) + ", " + std::to_string(lid) + ")";
        if (h.kind() != IrKind::adapted) throw ValidationError(where + ": BRIR is not adapted");
        if (h.sample_rate() != config.sample_rate) throw ValidationError(where + ": sample rate differs");
        if (h.channels() != 2) throw ValidationError(where + ": BRIR must have two channels");
        if ((h.source_id() != 0 && h.source_id() != pid) || (h.listener_id() != 0 && h.listener_id() != lid))
          throw ValidationError(where + ": BRIR carries a different pair");
        if (h.direct_sound_skipped() != (pid == lid))
          throw ValidationError(where + (pid == lid ? ": hearing-oneself BRIR must skip the direct sound"
                                                    : ": direct sound skipped on a hearing-others BRIR"));
      }
    }
  }
  LoadedSession out;
  out.feasibility = session_feasibility(config);
  if (!out.feasibility.feasible()) {
    if (!config.feasibility_override)
      throw InfeasibleLatency("session: latency " + std::to_string(config.latency_s * 1e3) +
                                  " ms is infeasible for the stage geometry; musicians must be at least " +
                                  std::to_string(out.feasibility.min_feasible_distance_m) + " m apart",
                              0.0, out.feasibility.equivalent_distance_m);
    out.override_used = true;
  }
  out.config = std::move(config);
  out.scenarios = std::move(scenarios);
  return out;
}

LoadedSession load_session(const SessionConfig& config) {
  std::vector<LoadedScenario> scenarios;
  for (const ScenarioConfig& sc : config.scenarios) {
    LoadedScenario ls;
    ls.id = sc.id;
    ls.name = sc.name;
    ls.ir.resize(config.players.size());
    for (std::size_t m = 0; m < config.players.size(); ++m) {
      for (std::size_t n = 0; n < config.listeners.size(); ++n) {
        const auto it = std::find_if(sc.brirs.begin(), sc.brirs.end(), [&](const BrirRef& b) {
          return b.source == config.players[m].id && b.listener == config.listeners[n].id;
        });
        ls.ir[m].push_back(read_adapted_ir(config.base_dir / it->path));
      }
    }
    scenarios.push_back(std::move(ls));
  }
  return make_session(config, std::move(scenarios));
}

std::vector<std::string> presentation_order(const SessionConfig& config, std::optional<unsigned> seed) {
  std::vector<std::string> order = config.scenario_order;
  if (order.empty())
    for (const ScenarioConfig& s : config.scenarios) order.push_back(s.id);
  if (seed) {
    std::mt19937 rng(*seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  return order;
}

}  // namespace stagesim
