#include "stagesim/host.hpp"

#include <cmath>

namespace stagesim {

namespace {

double db_fs(double v) { return v > 1e-6 ? 20.0 * std::log10(v) : -120.0; }

nlohmann::json db_array(const std::vector<double>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (double x : v) a.push_back(db_fs(x));
  return a;
}

}  // namespace

nlohmann::json to_json(const EngineState& s) {
  return {{"transport", s.running ? "running" : "idle"},
          {"active_scenario", s.active_scenario},
          {"crossfading", s.crossfading},
          {"talkback", s.talkback},
          {"blocks", s.blocks},
          {"xruns", s.xruns},
          {"dsp_headroom", s.dsp_headroom},
          {"events_dropped", s.events_dropped}};
}

nlohmann::json to_json(const MeterFrame& f) {
  return {{"sample", f.sample},
          {"input_rms", f.input_rms},
          {"input_peak", f.input_peak},
          {"output_rms", f.output_rms},
          {"output_peak", f.output_peak},
          {"input_rms_db", db_array(f.input_rms)},
          {"input_peak_db", db_array(f.input_peak)},
          {"output_rms_db", db_array(f.output_rms)},
          {"output_peak_db", db_array(f.output_peak)}};
}

SimulatedDeviceOptions simulated_device_options(const SessionConfig& c) {
  SimulatedDeviceOptions o;
  o.sample_rate = c.sample_rate;
  o.block_size = c.block_size;
  const SimulatedDeviceConfig& d = c.simulated_device;
  o.paced = d.paced;
  o.input_channels = std::max(c.input_channels(), d.loopback_input + 1);
  o.output_channels = std::max(c.output_channels(), d.loopback_output + 1);
  return o;
}

SessionHost::SessionHost(LoadedSession session, HostOptions options)
    : SessionHost(std::move(session), nullptr, std::move(options)) {}

SessionHost::SessionHost(LoadedSession session, std::unique_ptr<BlockTransport> transport, HostOptions options)
    : options_(std::move(options)),
      engine_(std::make_unique<Engine>(std::move(session), options_.engine)),
      transport_(std::move(transport)) {
  const SessionConfig& c = engine_->session().config;
  if (!transport_) transport_ = std::make_unique<SimulatedDevice>(simulated_device_options(c));
  if (!c.event_log.empty()) {
    const std::filesystem::path p = c.event_log.is_absolute() ? c.event_log : c.base_dir / c.event_log;
    log_.open(p, std::ios::app);
    if (!log_) throw ValidationError("SessionHost: cannot open event log " + p.string());
  }
  pump_ = std::thread(&SessionHost::pump_main, this);
}

SessionHost::~SessionHost() {
  try {
    stop();
  } catch (...) {
  }
  {
    std::lock_guard<std::mutex> lock(wake_mutex_);
    stopping_ = true;
  }
  wake_.notify_all();
  if (pump_.joinable()) pump_.join();
  flush_events();
}

void SessionHost::start() {
  std::lock_guard<std::mutex> lock(transport_mutex_);
  if (transport_->running()) return;
  start_engine(*engine_, *transport_);
}

void SessionHost::stop() {
  std::lock_guard<std::mutex> lock(transport_mutex_);
  if (!engine_->processing()) return;
  stop_engine(*engine_, *transport_);
}

bool SessionHost::running() const {
  std::lock_guard<std::mutex> lock(transport_mutex_);
  return engine_->processing();
}

LatencyResult SessionHost::run_latency_check() {
  std::lock_guard<std::mutex> lock(transport_mutex_);
  if (engine_->processing()) throw Error("latency check needs a stopped transport");
  const SimulatedDeviceConfig& d = engine_->session().config.simulated_device;
  LatencyOptions lo = options_.latency;
  lo.c = engine_->session().config.c;
  // A simulated device only closes its loopback for the measurement, so
  // the running session never feeds back into itself.
  auto* sim = dynamic_cast<SimulatedDevice*>(transport_.get());
  if (sim) sim->set_loopback(Loopback{d.loopback_output, d.loopback_input, d.loopback_delay_samples});
  try {
    const LatencyResult r = measure_latency(*transport_, d.loopback_output, d.loopback_input, lo);
    if (sim) sim->set_loopback(std::nullopt);
    engine_->log_latency_check(r.t_l_s, r.samples, r.e_d_m);
    return r;
  } catch (...) {
    if (sim) sim->set_loopback(std::nullopt);
    throw;
  }
}

nlohmann::json SessionHost::state_json() const {
  nlohmann::json j = to_json(engine_->state());
  const LoadedSession& s = engine_->session();
  nlohmann::json sc = nlohmann::json::array();
  for (const ScenarioConfig& c : s.config.scenarios) sc.push_back({{"id", c.id}, {"name", c.name}});
  j["scenarios"] = sc;
  j["sample_rate"] = s.config.sample_rate;
  j["block_size"] = s.config.block_size;
  j["latency_s"] = s.config.latency_s;
  j["latency_source"] = s.config.latency_source;
  j["feasibility"] = {{"feasible", s.feasibility.feasible()},
                      {"override_used", s.override_used},
                      {"equivalent_distance_m", s.feasibility.equivalent_distance_m},
                      {"min_feasible_distance_m", s.feasibility.min_feasible_distance_m}};
  nlohmann::json players = nlohmann::json::array(), listeners = nlohmann::json::array();
  for (const PlayerConfig& p : s.config.players) players.push_back({{"id", p.id}, {"mic_channel", p.mic_channel}});
  for (const ListenerConfig& l : s.config.listeners)
    listeners.push_back({{"id", l.id}, {"headphone_channels", {l.headphone_channels[0], l.headphone_channels[1]}}});
  j["players"] = players;
  j["listeners"] = listeners;
  return j;
}

nlohmann::json SessionHost::meters_json() const { return to_json(engine_->meters()); }

int SessionHost::subscribe(Subscriber s) {
  std::lock_guard<std::mutex> lock(subscriber_mutex_);
  const int id = next_subscriber_++;
  subscribers_.emplace(id, std::move(s));
  return id;
}

void SessionHost::unsubscribe(int id) {
  std::lock_guard<std::mutex> lock(subscriber_mutex_);
  subscribers_.erase(id);
}

void SessionHost::broadcast(const std::string& message) {
  std::lock_guard<std::mutex> lock(subscriber_mutex_);
  for (auto& [id, s] : subscribers_) s(message);
}

void SessionHost::flush_events() {
  std::lock_guard<std::mutex> lock(pump_mutex_);
  engine_->drain_events([&](const nlohmann::json& e) {
    if (log_) {
      log_ << e.dump() << '\n';
      log_.flush();
    }
    broadcast(nlohmann::json{{"type", "event"}, {"event", e}}.dump());
  });
}

void SessionHost::pump_main() {
  using clock = std::chrono::steady_clock;
  auto next_meter = clock::now() + options_.meter_interval;
  auto next_beat = clock::now() + options_.heartbeat_interval;
  std::unique_lock<std::mutex> lock(wake_mutex_);
  while (!stopping_) {
    wake_.wait_for(lock, options_.pump_interval, [&] { return stopping_; });
    if (stopping_) break;
    lock.unlock();
    flush_events();
    const auto now = clock::now();
    if (now >= next_meter) {
      next_meter += options_.meter_interval;
      if (next_meter < now) next_meter = now + options_.meter_interval;
      if (engine_->processing()) {
        nlohmann::json m = meters_json();
        m["type"] = "meters";
        broadcast(m.dump());
      }
    }
    if (now >= next_beat) {
      next_beat += options_.heartbeat_interval;
      if (next_beat < now) next_beat = now + options_.heartbeat_interval;
      const double t = std::chrono::duration<double>(now.time_since_epoch()).count();
      broadcast(nlohmann::json{{"type", "heartbeat"}, {"t_mono_s", t}, {"state", to_json(engine_->state())}}.dump());
    }
    lock.lock();
  }
}

}  // namespace stagesim
