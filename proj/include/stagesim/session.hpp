#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stagesim/adapt.hpp"
#include "stagesim/signal.hpp"

namespace stagesim {

struct PlayerConfig {
  int id = 1;
  int mic_channel = 0;      // device input channel
  double d_ms = 1.0;        // m
  std::string directivity;  // optional directivity file
};

struct ListenerConfig {
  int id = 1;
  std::array<int, 2> headphone_channels{0, 1};  // device output channels L, R
  std::string headphone_response;               // optional HpTF file
};

struct BrirRef {
  int source = 1;
  int listener = 1;
  std::filesystem::path path;  // adapted WAV with a sidecar
};

struct ScenarioConfig {
  std::string id;
  std::string name;
  std::vector<BrirRef> brirs;
};

struct FeasibilityOverride {
  std::string reason;
  std::string operator_name;
};

struct SimulatedDeviceConfig {
  bool paced = true;                  // run at the real block rate
  int loopback_output = 0;            // used by latency checks
  int loopback_input = 0;
  Eigen::Index loopback_delay_samples = 0;
};

/* Session configuration, JSON, paths relative to the file:
 *
 *   {"schema_version": 1, "sample_rate": 44100, "block_size": 64,
 *    "latency_s": 0.004, "latency_source": "declared", "c": 343,
 *    "players":   [{"id": 1, "mic_channel": 0, "d_ms_m": 1.0, "directivity": "trumpet.json"}],
 *    "listeners": [{"id": 1, "headphone_channels": [0, 1], "headphone_response": "hp1.csv"}],
 *    "scenarios": [{"id": "M", "name": "medium hall",
 *                   "brirs": [{"source": 1, "listener": 1, "path": "M/h_1_1.wav"}]}],
 *    "scenario_order": ["M", "S", "M"],
 *    "geometry": {"min_distance_m": 2.0, "receiver_height_m": 1.3},
 *    "feasibility_override": {"reason": "...", "operator": "..."},
 *    "crossfade_s": 0.05,
 *    "talkback": {"enabled": false, "gain": 0.5},
 *    "event_log": "events.jsonl",
 *    "simulated_device": {"paced": true, "loopback_output": 0, "loopback_input": 0,
 *                         "loopback_delay_samples": 176}}
 */
struct SessionConfig {
  double sample_rate = 44100.0;
  Eigen::Index block_size = 64;
  double latency_s = 0.0;
  std::string latency_source = "declared";
  double c = 343.0;
  std::vector<PlayerConfig> players;
  std::vector<ListenerConfig> listeners;
  std::vector<ScenarioConfig> scenarios;
  std::vector<std::string> scenario_order;
  std::optional<StageGeometry> geometry;
  std::optional<FeasibilityOverride> feasibility_override;
  double crossfade_s = 0.05;
  bool talkback_enabled = false;
  double talkback_gain = 0.5;
  std::filesystem::path event_log;
  SimulatedDeviceConfig simulated_device;
  std::filesystem::path base_dir;

  int input_channels() const;   // 1 + largest mic channel
  int output_channels() const;  // 1 + largest headphone channel
  std::size_t scenario_index(const std::string& id) const;  // throws ValidationError
};

// Parses and checks structure: schema version, unique ids, one BRIR per
// (source, listener) pair and scenario, referenced files present.
SessionConfig parse_session_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
SessionConfig read_session_config(const std::filesystem::path& path);
nlohmann::json to_json(const SessionConfig& config);

// Feasibility of the configured latency for the configured geometry;
// d_ms is the smallest player distance.
FeasibilityReport session_feasibility(const SessionConfig& config);

struct LoadedScenario {
  std::string id;
  std::string name;
  // ir[m][n]: player index m to listener index n.
  std::vector<std::vector<ImpulseResponse>> ir;
};

struct LoadedSession {
  SessionConfig config;
  std::vector<LoadedScenario> scenarios;
  FeasibilityReport feasibility;
  bool override_used = false;
};

// Reads every BRIR and checks it: adapted kind, sample rate, direct sound
// skipped exactly for m == n. Throws InfeasibleLatency when the feasibility
// report fails and no override is recorded.
LoadedSession load_session(const SessionConfig& config);

// Builds a session from in-memory IRs (tests and tools). Same checks.
LoadedSession make_session(SessionConfig config, std::vector<LoadedScenario> scenarios);

// Presentation order: the configured order, or all scenarios as listed.
// A seed shuffles it with mt19937.
std::vector<std::string> presentation_order(const SessionConfig& config, std::optional<unsigned> seed);

}  // namespace stagesim
