#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "doctest.h"
#include "session_fixtures.hpp"
#include "stagesim/control.hpp"

using namespace stagesim;
using namespace fixture;
using Eigen::MatrixXd;
using json = nlohmann::json;
using namespace std::chrono_literals;

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using clock_type = std::chrono::steady_clock;

namespace {

LoadedSession small_session(bool paced = true, Eigen::Index loop_delay = 48) {
  SessionConfig c = grid_config(2, 2, {"S", "M", "L"}, 64);
  c.simulated_device.paced = paced;
  c.simulated_device.loopback_output = 0;
  c.simulated_device.loopback_input = 0;
  c.simulated_device.loopback_delay_samples = loop_delay;
  std::mt19937 rng(1);
  std::vector<std::vector<std::vector<MatrixXd>>> g(3, std::vector<std::vector<MatrixXd>>(2));
  for (auto& s : g)
    for (auto& row : s)
      for (int n = 0; n < 2; ++n) row.push_back(random_stereo_ir(rng, 2048));
  return grid_session(c, g);
}

// Blocking WebSocket client with a reader thread.
class Client {
 public:
  explicit Client(std::uint16_t port) : ws_(ioc_) {
    tcp::resolver resolver(ioc_);
    net::connect(ws_.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
    ws_.handshake("127.0.0.1", "/ws");
    reader_ = std::thread([this] {
      try {
        for (;;) {
          beast::flat_buffer buf;
          ws_.read(buf);
          json j = json::parse(beast::buffers_to_string(buf.data()));
          std::lock_guard<std::mutex> lock(m_);
          inbox_.push_back({clock_type::now(), std::move(j)});
          cv_.notify_all();
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(m_);
        closed_ = true;
        cv_.notify_all();
      }
    });
  }
  ~Client() {
    beast::error_code ec;
    ws_.next_layer().shutdown(tcp::socket::shutdown_both, ec);
    ws_.next_layer().close(ec);
    reader_.join();
  }

  void send_text(const std::string& s) {
    std::lock_guard<std::mutex> lock(write_m_);
    ws_.text(true);
    ws_.write(net::buffer(s));
  }
  void send(const json& j) { send_text(j.dump()); }

  struct Received {
    clock_type::time_point at;
    json msg;
  };

  // Waits for the first message satisfying pred and removes it.
  std::optional<Received> wait_for(const std::function<bool(const json&)>& pred,
                                   std::chrono::milliseconds timeout = 3000ms) {
    std::unique_lock<std::mutex> lock(m_);
    std::optional<Received> out;
    cv_.wait_for(lock, timeout, [&] {
      for (auto it = inbox_.begin(); it != inbox_.end(); ++it)
        if (pred(it->msg)) {
          out = *it;
          inbox_.erase(it);
          return true;
        }
      return closed_;
    });
    return out;
  }

  json request(json r, std::chrono::milliseconds timeout = 5000ms) {
    static std::atomic<int> next{1};
    const int id = next++;
    r["id"] = id;
    send(r);
    auto got = wait_for([&](const json& m) { return m["type"] == "reply" && m["id"] == id; }, timeout);
    REQUIRE(got.has_value());
    return got->msg;
  }

  std::vector<json> all() {
    std::lock_guard<std::mutex> lock(m_);
    std::vector<json> v;
    for (auto& r : inbox_) v.push_back(r.msg);
    return v;
  }

 private:
  net::io_context ioc_;
  websocket::stream<tcp::socket> ws_;
  std::thread reader_;
  std::mutex m_, write_m_;
  std::condition_variable cv_;
  std::deque<Received> inbox_;
  bool closed_ = false;
};

std::pair<int, std::string> http_get(std::uint16_t port, const std::string& target) {
  net::io_context ioc;
  tcp::socket sock(ioc);
  tcp::resolver resolver(ioc);
  net::connect(sock, resolver.resolve("127.0.0.1", std::to_string(port)));
  http::request<http::empty_body> req{http::verb::get, target, 11};
  req.set(http::field::host, "127.0.0.1");
  http::write(sock, req);
  beast::flat_buffer buf;
  http::response<http::string_body> res;
  http::read(sock, buf, res);
  return {static_cast<int>(res.result_int()), res.body()};
}

}  // namespace

TEST_CASE("protocol replies on an idle session") {
  SessionHost host(small_session(false));
  ControlProtocol p(host);
  json r = p.handle(json{{"type", "get_state"}, {"id", 7}});
  CHECK(r["ok"] == true);
  CHECK(r["id"] == 7);
  CHECK(r["result"]["transport"] == "idle");
  CHECK(r["result"]["active_scenario"] == "S");

  r = p.handle(json{{"type", "switch_scenario"}, {"scenario", "L"}});
  CHECK(r["result"]["applies"] == "immediate");
  CHECK(p.handle(json{{"type", "get_state"}})["result"]["active_scenario"] == "L");

  CHECK(p.handle(std::string("{not json"))["error"]["code"] == "malformed");
  CHECK(p.handle(json::array({1, 2}))["error"]["code"] == "malformed");
  CHECK(p.handle(json{{"id", 1}})["error"]["code"] == "malformed");
  CHECK(p.handle(json{{"type", "dance"}})["error"]["code"] == "unknown_request");
  CHECK(p.handle(json{{"type", "switch_scenario"}})["error"]["code"] == "invalid_argument");
  CHECK(p.handle(json{{"type", "switch_scenario"}, {"scenario", 3}})["error"]["code"] == "invalid_argument");
  CHECK(p.handle(json{{"type", "switch_scenario"}, {"scenario", "XL"}})["error"]["code"] == "unknown_scenario");
  CHECK(p.handle(json{{"type", "set_talkback"}, {"on", "yes"}})["error"]["code"] == "invalid_argument");
  CHECK(p.handle(json{{"type", "log_marker"}, {"text", "q1"}})["result"]["logged"] == true);

  r = p.handle(json{{"type", "get_meters"}});
  CHECK(r["result"]["input_rms"].size() == 2);
  CHECK(r["result"]["output_peak_db"].size() == 4);

  const json hello = p.hello();
  CHECK(hello["schema_version"] == kControlSchemaVersion);
  CHECK(hello["state"]["scenarios"].size() == 3);
}

TEST_CASE("latency check through the protocol") {
  SessionHost host(small_session(false, 48));
  ControlProtocol p(host);
  json r = p.handle(json{{"type", "run_latency_check"}});
  REQUIRE(r["ok"] == true);
  CHECK(std::abs(r["result"]["samples"].get<int>() - 48) <= 1);
  CHECK(r["result"]["e_d_m"].get<double>() == doctest::Approx(343.0 * 48 / 44100.0).epsilon(0.03));

  p.handle(json{{"type", "start"}});
  CHECK(p.handle(json{{"type", "get_state"}})["result"]["transport"] == "running");
  CHECK(p.handle(json{{"type", "run_latency_check"}})["error"]["code"] == "busy");
  CHECK(p.handle(json{{"type", "stop"}})["result"]["transport"] == "idle");
  host.flush_events();
}

TEST_CASE("event log and subscriber stream carry the same events in order") {
  const auto dir = std::filesystem::temp_directory_path() / "stagesim_control_log";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  LoadedSession s = small_session(true);
  s.config.event_log = dir / "events.jsonl";
  std::vector<json> seen;
  std::mutex m;
  {
    HostOptions ho;
    ho.heartbeat_interval = 200ms;
    SessionHost host(std::move(s), ho);
    host.subscribe([&](const std::string& msg) {
      std::lock_guard<std::mutex> lock(m);
      seen.push_back(json::parse(msg));
    });
    host.start();
    host.engine().switch_scenario("M");
    host.engine().log_marker("questionnaire start");
    std::this_thread::sleep_for(700ms);
    host.engine().switch_scenario("M");
    host.stop();
  }
  std::vector<json> logged;
  std::ifstream in(dir / "events.jsonl");
  for (std::string line; std::getline(in, line);) logged.push_back(json::parse(line));
  std::vector<json> streamed;
  int meters = 0, beats = 0;
  for (const json& j : seen) {
    if (j["type"] == "event") streamed.push_back(j["event"]);
    meters += j["type"] == "meters";
    beats += j["type"] == "heartbeat";
  }
  CHECK(logged == streamed);
  REQUIRE(logged.size() == 5);
  CHECK(logged[0]["type"] == "transport_start");
  CHECK(logged[1]["type"] == "scenario_switch");
  CHECK(logged[2]["type"] == "marker");
  CHECK(logged[3]["type"] == "scenario_noop");
  CHECK(logged[4]["type"] == "transport_stop");
  for (std::size_t i = 1; i < logged.size(); ++i)
    CHECK(logged[i]["t_mono_s"].get<double>() >= logged[i - 1]["t_mono_s"].get<double>());
  CHECK(meters >= 5);   // 10 Hz over ~0.7 s
  CHECK(meters <= 9);
  CHECK(beats >= 2);
  std::filesystem::remove_all(dir);
}

TEST_CASE("websocket: hello, malformed input keeps the connection, two clients") {
  SessionHost host(small_session(true));
  ControlServerOptions o;
  o.port = 0;
  ControlServer server(host, o);
  server.start();
  REQUIRE(server.port() != 0);

  Client a(server.port()), b(server.port());
  REQUIRE(a.wait_for([](const json& m) { return m["type"] == "hello"; }));
  REQUIRE(b.wait_for([](const json& m) { return m["type"] == "hello"; }));

  a.send_text("this is not json");
  auto err = a.wait_for([](const json& m) { return m["type"] == "reply" && m["ok"] == false; });
  REQUIRE(err);
  CHECK(err->msg["error"]["code"] == "malformed");
  CHECK(a.request({{"type", "get_state"}})["result"]["transport"] == "idle");

  CHECK(a.request({{"type", "start"}})["ok"] == true);
  std::this_thread::sleep_for(100ms);
  const auto sent = clock_type::now();
  CHECK(a.request({{"type", "switch_scenario"}, {"scenario", "L"}})["result"]["applies"] == "next_block");
  auto ev = b.wait_for([](const json& m) { return m["type"] == "event" && m["event"]["type"] == "scenario_switch"; });
  REQUIRE(ev);
  const double ms = std::chrono::duration<double, std::milli>(ev->at - sent).count();
  MESSAGE("switch observed by the second client after " << ms << " ms");
  CHECK(ms < 100.0);
  CHECK(ev->msg["event"]["to"] == "L");
  CHECK(b.request({{"type", "get_state"}})["result"]["active_scenario"] == "L");

  REQUIRE(b.wait_for([](const json& m) { return m["type"] == "meters"; }, 500ms));
  CHECK(a.request({{"type", "stop"}})["result"]["transport"] == "idle");
  server.stop();
}

TEST_CASE("websocket: 100 msg/s control flood causes no xruns") {
  SessionHost host(small_session(true));
  ControlServerOptions o;
  o.port = 0;
  ControlServer server(host, o);
  server.start();
  Client a(server.port()), b(server.port());
  a.request({{"type", "start"}});

  const char* ids[] = {"S", "M", "L", "M"};
  const int total = 300;  // 3 s at 100 msg/s
  auto next = clock_type::now();
  for (int i = 0; i < total; ++i) {
    Client& c = i % 2 ? b : a;
    json r;
    switch (i % 5) {
      case 0: r = {{"type", "switch_scenario"}, {"scenario", ids[(i / 5) % 4]}}; break;
      case 1: r = {{"type", "get_meters"}}; break;
      case 2: r = {{"type", "set_talkback"}, {"on", i % 2 == 0}}; break;
      case 3: r = {{"type", "log_marker"}, {"text", "m" + std::to_string(i)}}; break;
      default: r = {{"type", "get_state"}}; break;
    }
    r["id"] = 10000 + i;
    c.send(r);
    next += 10ms;
    std::this_thread::sleep_until(next);
  }
  // Exactly one reply per request.
  int replies = 0;
  for (int i = 0; i < total; ++i) {
    Client& c = i % 2 ? b : a;
    const int id = 10000 + i;
    if (c.wait_for([&](const json& m) { return m["type"] == "reply" && m["id"] == id; }, 2000ms)) ++replies;
  }
  CHECK(replies == total);
  for (Client* c : {&a, &b})
    for (const json& m : c->all()) CHECK_FALSE((m["type"] == "reply" && m["id"].is_number() && m["id"] >= 10000));
  const json st = a.request({{"type", "get_state"}})["result"];
  MESSAGE("blocks " << st["blocks"] << ", xruns " << st["xruns"] << ", headroom " << st["dsp_headroom"]);
  CHECK(st["xruns"] == 0);
  CHECK(st["blocks"].get<int>() > 1500);
  a.request({{"type", "stop"}});
  server.stop();
}

TEST_CASE("static files and API documents over HTTP on the same port") {
  const auto dir = std::filesystem::temp_directory_path() / "stagesim_static";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "assets");
  std::ofstream(dir / "index.html") << "<html>panel</html>";
  std::ofstream(dir / "assets" / "app.js") << "console.log(1);";
  SessionHost host(small_session(true));
  ControlServerOptions o;
  o.port = 0;
  o.static_dir = dir;
  ControlServer server(host, o);
  server.start();
  CHECK(http_get(server.port(), "/") == std::pair<int, std::string>{200, "<html>panel</html>"});
  CHECK(http_get(server.port(), "/assets/app.js").second == "console.log(1);");
  CHECK(http_get(server.port(), "/missing.js").first == 404);
  CHECK(http_get(server.port(), "/../etc/passwd").first == 404);
  const auto schema = http_get(server.port(), "/api/schema");
  CHECK(schema.first == 200);
  CHECK(json::parse(schema.second)["schema_version"] == kControlSchemaVersion);
  CHECK(json::parse(http_get(server.port(), "/api/state").second)["transport"] == "idle");
  server.stop();
  std::filesystem::remove_all(dir);
}

TEST_CASE("second server on a busy port fails cleanly") {
  SessionHost host(small_session(true));
  ControlServerOptions o;
  o.port = 0;
  ControlServer first(host, o);
  first.start();
  o.port = first.port();
  ControlServer second(host, o);
  CHECK_THROWS_WITH_AS(second.start(), doctest::Contains("port busy"), Error);
}
