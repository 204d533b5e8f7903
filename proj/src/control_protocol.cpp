#include "stagesim/control.hpp"

namespace stagesim {

namespace {

struct RequestError {
  std::string code;
  std::string message;
};

const nlohmann::json& param(const nlohmann::json& r, const char* key) {
  if (!r.contains(key)) throw RequestError{"invalid_argument", std::string("missing parameter '") + key + "'"};
  return r.at(key);
}

}  // namespace

nlohmann::json ControlProtocol::hello() const {
  return {{"type", "hello"},
          {"protocol", "stagesim.control"},
          {"schema_version", kControlSchemaVersion},
          {"state", host_.state_json()}};
}

nlohmann::json ControlProtocol::handle(const std::string& text) {
  nlohmann::json request;
  try {
    request = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    return {{"type", "reply"},
            {"id", nullptr},
            {"request", nullptr},
            {"ok", false},
            {"error", {{"code", "malformed"}, {"message", std::string("not JSON: ") + e.what()}}}};
  }
  return handle(request);
}

nlohmann::json ControlProtocol::handle(const nlohmann::json& request) {
  nlohmann::json reply{{"type", "reply"}, {"id", nullptr}, {"request", nullptr}};
  try {
    if (!request.is_object()) throw RequestError{"malformed", "request must be a JSON object"};
    if (request.contains("id")) reply["id"] = request.at("id");
    if (!request.contains("type") || !request.at("type").is_string())
      throw RequestError{"malformed", "request needs a string 'type'"};
    const std::string type = request.at("type").get<std::string>();
    reply["request"] = type;
    Engine& engine = host_.engine();
    nlohmann::json result;

    if (type == "get_state") {
      result = host_.state_json();
    } else if (type == "get_meters") {
      result = host_.meters_json();
    } else if (type == "switch_scenario") {
      const auto& s = param(request, "scenario");
      if (!s.is_string()) throw RequestError{"invalid_argument", "'scenario' must be a string"};
      const std::string id = s.get<std::string>();
      try {
        host_.config().scenario_index(id);
      } catch (const ValidationError& e) {
        throw RequestError{"unknown_scenario", e.what()};
      }
      const bool running = engine.processing();
      engine.switch_scenario(id);
      result = {{"scenario", id}, {"applies", running ? "next_block" : "immediate"}};
    } else if (type == "set_talkback") {
      const auto& on = param(request, "on");
      if (!on.is_boolean()) throw RequestError{"invalid_argument", "'on' must be a boolean"};
      engine.set_talkback(on.get<bool>());
      result = {{"talkback", on.get<bool>()}};
    } else if (type == "start") {
      host_.start();
      result = host_.state_json();
    } else if (type == "stop") {
      host_.stop();
      result = host_.state_json();
    } else if (type == "run_latency_check") {
      if (host_.running()) throw RequestError{"busy", "stop the transport before a latency check"};
      try {
        result = to_json(host_.run_latency_check());
      } catch (const InsufficientSnr& e) {
        throw RequestError{"measurement_failed", e.what()};
      }
    } else if (type == "log_marker") {
      const auto& t = param(request, "text");
      if (!t.is_string()) throw RequestError{"invalid_argument", "'text' must be a string"};
      engine.log_marker(t.get<std::string>());
      result = {{"logged", true}};
    } else {
      throw RequestError{"unknown_request", "unknown request type '" + type + "'"};
    }
    reply["ok"] = true;
    reply["result"] = std::move(result);
  } catch (const RequestError& e) {
    reply["ok"] = false;
    reply["error"] = {{"code", e.code}, {"message", e.message}};
  } catch (const std::exception& e) {
    reply["ok"] = false;
    reply["error"] = {{"code", "internal"}, {"message", e.what()}};
  }
  return reply;
}

nlohmann::json control_schema() {
  return {
      {"protocol", "stagesim.control"},
      {"schema_version", kControlSchemaVersion},
      {"endpoint", "/ws"},
      {"requests",
       {{"get_state", nlohmann::json::object()},
        {"get_meters", nlohmann::json::object()},
        {"switch_scenario", {{"scenario", "string"}}},
        {"set_talkback", {{"on", "boolean"}}},
        {"start", nlohmann::json::object()},
        {"stop", nlohmann::json::object()},
        {"run_latency_check", nlohmann::json::object()},
        {"log_marker", {{"text", "string"}}}}},
      {"reply", {"type", "id", "request", "ok", "result|error"}},
      {"errors", {"malformed", "unknown_request", "invalid_argument", "unknown_scenario", "busy", "measurement_failed",
                  "internal"}},
      {"pushes", {"hello", "event", "meters", "heartbeat"}},
      {"event_types", {"transport_start", "transport_stop", "scenario_switch", "scenario_noop", "talkback", "xrun",
                       "marker", "feasibility_override", "latency_check"}},
      {"meter_rate_hz", 10},
      {"heartbeat_s", 2}};
}

}  // namespace stagesim
