#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "json.hpp"
#include "stagesim/engine.hpp"
#include "stagesim/latency.hpp"
#include "stagesim/transport.hpp"

namespace stagesim {

struct HostOptions {
  std::chrono::milliseconds pump_interval{10};
  std::chrono::milliseconds meter_interval{100};   // 10 Hz meter frames
  std::chrono::milliseconds heartbeat_interval{2000};
  LatencyOptions latency;
  EngineOptions engine;
};

/* Owns a running session: the engine, its block transport and an event pump
 * that appends engine events to the JSON-lines log and forwards them, meter
 * frames and heartbeats to subscribers. Every method is thread-safe.
 *
 * Subscriber messages are serialized JSON objects:
 *   {"type": "event", "event": {...}}        engine event, log order
 *   {"type": "meters", "sample": .., "input_rms_db": [..], ...}
 *   {"type": "heartbeat", "t_mono_s": .., "state": {...}}
 */
class SessionHost {
 public:
  using Subscriber = std::function<void(const std::string& message)>;

  // Without a transport, a simulated device is built from the session's
  // simulated_device section.
  explicit SessionHost(LoadedSession session, HostOptions options = {});
  SessionHost(LoadedSession session, std::unique_ptr<BlockTransport> transport, HostOptions options = {});
  ~SessionHost();
  SessionHost(const SessionHost&) = delete;
  SessionHost& operator=(const SessionHost&) = delete;

  Engine& engine() { return *engine_; }
  const SessionConfig& config() const { return engine_->session().config; }

  void start();
  void stop();
  bool running() const;

  // Latency check on the configured loopback pair. Needs a stopped transport.
  LatencyResult run_latency_check();

  nlohmann::json state_json() const;
  nlohmann::json meters_json() const;

  int subscribe(Subscriber s);
  void unsubscribe(int id);

  // Pumps pending events now (also done periodically).
  void flush_events();

 private:
  void pump_main();
  void broadcast(const std::string& message);

  HostOptions options_;
  std::unique_ptr<Engine> engine_;
  std::unique_ptr<BlockTransport> transport_;
  mutable std::mutex transport_mutex_;

  std::ofstream log_;
  std::mutex pump_mutex_;  // serializes draining, logging and forwarding
  std::mutex subscriber_mutex_;
  std::map<int, Subscriber> subscribers_;
  int next_subscriber_ = 1;

  std::mutex wake_mutex_;
  std::condition_variable wake_;
  bool stopping_ = false;
  std::thread pump_;
};

nlohmann::json to_json(const EngineState& s);
nlohmann::json to_json(const MeterFrame& f);

// Simulated device options matching a session's routing and its
// simulated_device section.
SimulatedDeviceOptions simulated_device_options(const SessionConfig& config);

}  // namespace stagesim
