#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "json.hpp"
#include "stagesim/host.hpp"

namespace stagesim {

constexpr int kControlSchemaVersion = 1;

/* Control protocol, schema version 1. One JSON object per WebSocket text
 * frame.
 *
 * Requests:  {"type": <request>, "id": <any, echoed>, ...parameters}
 *   get_state                      -> state object
 *   get_meters                     -> meter frame
 *   switch_scenario {"scenario"}   -> {"scenario", "applies": "next_block" | "immediate"}
 *   set_talkback    {"on": bool}   -> {"talkback"}
 *   start / stop                   -> state object
 *   run_latency_check              -> {"t_l_s", "samples", "e_d_m", ...}
 *   log_marker      {"text"}       -> {"logged": true}
 *
 * Every request gets exactly one reply:
 *   {"type": "reply", "id", "request", "ok": true,  "result": {...}}
 *   {"type": "reply", "id", "request", "ok": false, "error": {"code", "message"}}
 * Error codes: malformed, unknown_request, invalid_argument,
 * unknown_scenario, busy, measurement_failed, internal.
 *
 * Server pushes: "hello" on connect (schema_version, state), "event"
 * (engine events in log order), "meters" at 10 Hz while running and
 * "heartbeat" every 2 s.
 */
class ControlProtocol {
 public:
  explicit ControlProtocol(SessionHost& host) : host_(host) {}

  nlohmann::json handle(const std::string& text);
  nlohmann::json handle(const nlohmann::json& request);
  nlohmann::json hello() const;

 private:
  SessionHost& host_;
};

// Machine-readable summary of the message set, served at /api/schema.
nlohmann::json control_schema();

struct ControlServerOptions {
  std::string address = "127.0.0.1";
  std::uint16_t port = 8088;  // 0 picks a free port
  std::filesystem::path static_dir;  // served over HTTP GET; empty disables
  int threads = 2;
};

// WebSocket control endpoint and static file server on one port.
class ControlServer {
 public:
  ControlServer(SessionHost& host, ControlServerOptions options);
  ~ControlServer();
  ControlServer(const ControlServer&) = delete;
  ControlServer& operator=(const ControlServer&) = delete;

  // Binds and starts serving; throws Error("port busy ...") when bind fails.
  void start();
  void stop();
  std::uint16_t port() const;

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace stagesim
