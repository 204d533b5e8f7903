#include "stagesim/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

namespace stagesim {

ConvolutionMatrix::ConvolutionMatrix(const LoadedScenario& scenario, Eigen::Index block_size)
    : players_(scenario.ir.size()), listeners_(scenario.ir.empty() ? 0 : scenario.ir.front().size()) {
  cells_.reserve(players_ * listeners_);
  for (std::size_t m = 0; m < players_; ++m) {
    if (scenario.ir[m].size() != listeners_) throw ValidationError("ConvolutionMatrix: ragged IR grid");
    for (std::size_t n = 0; n < listeners_; ++n) {
      const Eigen::MatrixXd& h = scenario.ir[m][n].data().samples();
      if (h.cols() != 2) throw ValidationError("ConvolutionMatrix: BRIR must have two channels");
      Cell cell;
      for (int e = 0; e < 2; ++e) cell.ear[e] = PartitionedFilter<double>(h.col(e), block_size);
      cells_.push_back(std::move(cell));
    }
  }
}

Eigen::Index ConvolutionMatrix::max_partitions() const {
  Eigen::Index p = 1;
  for (const Cell& c : cells_) p = std::max({p, c.ear[0].partitions(), c.ear[1].partitions()});
  return p;
}

const char* to_string(EventType t) {
  switch (t) {
    case EventType::transport_start: return "transport_start";
    case EventType::transport_stop: return "transport_stop";
    case EventType::scenario_switch: return "scenario_switch";
    case EventType::scenario_noop: return "scenario_noop";
    case EventType::talkback: return "talkback";
    case EventType::xrun: return "xrun";
    case EventType::marker: return "marker";
    case EventType::feasibility_override: return "feasibility_override";
    case EventType::latency_check: return "latency_check";
  }
  return "unknown";
}

namespace {

void copy_text(char (&dst)[128], const std::string& src) {
  const std::size_t n = std::min(src.size(), sizeof(dst) - 1);
  std::memcpy(dst, src.data(), n);
  dst[n] = '\0';
}

}  // namespace

Engine::Engine(LoadedSession session, EngineOptions options)
    : session_(std::move(session)),
      options_(options),
      fs_(session_.config.sample_rate),
      block_(session_.config.block_size),
      M_(session_.config.players.size()),
      N_(session_.config.listeners.size()),
      ifft_(block_),
      commands_(options.command_capacity),
      events_(options.event_capacity),
      epoch_(std::chrono::steady_clock::now()) {
  const SessionConfig& cfg = session_.config;
  if (session_.scenarios.size() != cfg.scenarios.size() || session_.scenarios.empty())
    throw ValidationError("Engine: session has no loaded scenarios");

  for (const PlayerConfig& p : cfg.players) mic_ch_.push_back(p.mic_channel);
  for (const ListenerConfig& l : cfg.listeners) {
    hp_ch_.push_back(l.headphone_channels);
    int idx = -1;
    for (std::size_t m = 0; m < M_; ++m)
      if (cfg.players[m].id == l.id) idx = static_cast<int>(m);
    player_of_listener_.push_back(idx);
  }

  matrices_.reserve(session_.scenarios.size());
  Eigen::Index depth = 1;
  for (const LoadedScenario& s : session_.scenarios) {
    matrices_.emplace_back(s, block_);
    depth = std::max(depth, matrices_.back().max_partitions());
  }
  history_.reserve(M_);
  for (std::size_t m = 0; m < M_; ++m) history_.emplace_back(block_, depth);

  acc_ = ComplexVectorX<double>::Zero(ifft_.bins());
  cur_ = Eigen::VectorXd::Zero(block_);
  prev_ = Eigen::VectorXd::Zero(block_);
  fade_gain_ = Eigen::VectorXd::Ones(block_);

  if (!cfg.scenario_order.empty()) active_ = static_cast<int>(cfg.scenario_index(cfg.scenario_order.front()));
  pub_active_.store(active_);
  fade_len_ = static_cast<Eigen::Index>(std::llround(cfg.crossfade_s * fs_));
  talkback_ = cfg.talkback_enabled;
  talkback_gain_ = cfg.talkback_gain;
  pub_talkback_.store(talkback_);

  const double period = block_ / fs_;
  rms_blocks_ = std::max<Eigen::Index>(1, std::llround(options_.meter_rms_s / period));
  hold_blocks_ = std::max<Eigen::Index>(1, std::llround(options_.peak_hold_s / period));
  const Eigen::Index meters = static_cast<Eigen::Index>(M_ + 2 * N_);
  block_energy_ = Eigen::MatrixXd::Zero(rms_blocks_, meters);
  energy_sum_ = Eigen::VectorXd::Zero(meters);
  held_peak_ = Eigen::VectorXd::Zero(meters);
  hold_left_ = Eigen::VectorXi::Zero(meters);
  worst_compute_ = Eigen::VectorXd::Zero(hold_blocks_);
  meter_rms_ = std::make_unique<std::atomic<double>[]>(meters);
  meter_peak_ = std::make_unique<std::atomic<double>[]>(meters);

  if (session_.override_used) {
    EngineEvent e;
    e.type = EventType::feasibility_override;
    e.value = cfg.latency_s;
    e.value2 = session_.feasibility.min_feasible_distance_m;
    copy_text(e.text, cfg.feasibility_override ? cfg.feasibility_override->reason : std::string());
    push_event(e);
  }
}

std::int64_t Engine::now_ns() const {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - epoch_).count();
}

void Engine::push_event(EngineEvent e) {
  e.sample = sample_;
  e.t_mono_ns = now_ns();
  if (!events_.push(e)) dropped_events_.fetch_add(1, std::memory_order_relaxed);
}

// ---------------------------------------------------------------------------
// Processing context

void Engine::mix_scenario(std::size_t s, std::size_t n, int ear, double* out) {
  acc_.setZero();
  const ConvolutionMatrix& mat = matrices_[s];
  for (std::size_t m = 0; m < M_; ++m) accumulate(history_[m], mat.cell(m, n).ear[ear], acc_);
  ifft_.emit(acc_, out);
}

void Engine::start_switch(int target) {
  if (target == active_) {
    EngineEvent e;
    e.type = EventType::scenario_noop;
    e.a = target;
    push_event(e);
    return;
  }
  EngineEvent e;
  e.type = EventType::scenario_switch;
  e.a = active_;
  e.b = target;
  e.value = fade_len_ / fs_;
  push_event(e);
  previous_ = active_;
  active_ = target;
  fade_pos_ = 0;
  if (fade_len_ == 0) previous_ = -1;
  pub_active_.store(active_, std::memory_order_relaxed);
  pub_crossfading_.store(previous_ >= 0, std::memory_order_relaxed);
}

void Engine::apply(const Command& c) {
  switch (c.kind) {
    case CommandKind::switch_scenario: {
      const int target = static_cast<int>(c.arg);
      if (previous_ >= 0) {
        // A fade is running; the newest request waits for it to end.
        deferred_ = target;
      } else {
        start_switch(target);
      }
      break;
    }
    case CommandKind::talkback: {
      talkback_ = c.arg != 0;
      pub_talkback_.store(talkback_, std::memory_order_relaxed);
      EngineEvent e;
      e.type = EventType::talkback;
      e.a = talkback_ ? 1 : 0;
      push_event(e);
      break;
    }
    case CommandKind::marker: {
      EngineEvent e;
      e.type = EventType::marker;
      std::memcpy(e.text, c.text, sizeof(e.text));
      push_event(e);
      break;
    }
    case CommandKind::latency_check: {
      EngineEvent e;
      e.type = EventType::latency_check;
      e.value = c.value;
      e.value2 = c.value2;
      e.mask = static_cast<std::uint64_t>(c.arg);
      push_event(e);
      break;
    }
  }
}

void Engine::process(const Eigen::Ref<const Eigen::MatrixXd>& in, Eigen::Ref<Eigen::MatrixXd> out,
                     std::uint64_t missing) {
  if (previous_ >= 0 && fade_pos_ >= fade_len_) {
    previous_ = -1;
    pub_crossfading_.store(false, std::memory_order_relaxed);
    if (deferred_ >= 0) {
      const int t = deferred_;
      deferred_ = -1;
      start_switch(t);
    }
  }
  Command c;
  while (commands_.pop(c)) apply(c);

  for (std::size_t m = 0; m < M_; ++m) {
    const int ch = mic_ch_[m];
    const bool gone = ch >= 64 ? false : ((missing >> ch) & 1u) != 0;
    history_[m].push(gone ? nullptr : in.col(ch).data());
  }

  const bool fading = previous_ >= 0;
  if (fading) {
    for (Eigen::Index i = 0; i < block_; ++i) {
      const Eigen::Index t = fade_pos_ + i;
      fade_gain_(i) = t >= fade_len_ ? 1.0 : 0.5 - 0.5 * std::cos(std::numbers::pi * t / fade_len_);
    }
  }

  out.setZero();
  for (std::size_t n = 0; n < N_; ++n) {
    for (int ear = 0; ear < 2; ++ear) {
      auto dst = out.col(hp_ch_[n][ear]);
      mix_scenario(active_, n, ear, cur_.data());
      if (fading) {
        mix_scenario(previous_, n, ear, prev_.data());
        dst.array() += fade_gain_.array() * cur_.array() + (1.0 - fade_gain_.array()) * prev_.array();
      } else {
        dst += cur_;
      }
    }
    if (talkback_) {
      for (std::size_t m = 0; m < M_; ++m) {
        if (static_cast<int>(m) == player_of_listener_[n]) continue;
        const int ch = mic_ch_[m];
        if (ch < 64 && ((missing >> ch) & 1u)) continue;
        for (int ear = 0; ear < 2; ++ear) out.col(hp_ch_[n][ear]) += talkback_gain_ * in.col(ch);
      }
    }
  }

  if (fading) fade_pos_ += block_;

  if (missing) report_xrun(XrunKind::underrun, missing);
  update_meters(in, missing, out);
  sample_ += block_;
  pub_blocks_.fetch_add(1, std::memory_order_relaxed);
}

void Engine::report_xrun(XrunKind kind, std::uint64_t mask) {
  EngineEvent e;
  e.type = EventType::xrun;
  e.a = static_cast<std::int32_t>(kind);
  e.mask = mask;
  push_event(e);
  pub_xruns_.fetch_add(1, std::memory_order_relaxed);
}

void Engine::note_compute_time(double seconds) {
  worst_compute_(compute_pos_) = seconds;
  compute_pos_ = (compute_pos_ + 1) % worst_compute_.size();
  pub_headroom_.store(1.0 - worst_compute_.maxCoeff() * fs_ / block_, std::memory_order_relaxed);
}

void Engine::update_meters(const Eigen::Ref<const Eigen::MatrixXd>& in, std::uint64_t missing,
                           const Eigen::Ref<const Eigen::MatrixXd>& out) {
  const Eigen::Index meters = energy_sum_.size();
  for (Eigen::Index k = 0; k < meters; ++k) {
    double energy = 0.0, peak = 0.0;
    if (k < static_cast<Eigen::Index>(M_)) {
      const int ch = mic_ch_[k];
      if (!(ch < 64 && ((missing >> ch) & 1u))) {
        energy = in.col(ch).squaredNorm();
        peak = in.col(ch).cwiseAbs().maxCoeff();
      }
    } else {
      const Eigen::Index j = k - static_cast<Eigen::Index>(M_);
      const int ch = hp_ch_[j / 2][j % 2];
      energy = out.col(ch).squaredNorm();
      peak = out.col(ch).cwiseAbs().maxCoeff();
    }
    block_energy_(ring_pos_, k) = energy;
    // Peak hold: a new maximum restarts the hold, afterwards the meter
    // falls back to the current block peak.
    if (peak >= held_peak_(k)) {
      held_peak_(k) = peak;
      hold_left_(k) = static_cast<int>(hold_blocks_);
    } else if (hold_left_(k) > 0) {
      --hold_left_(k);
    } else {
      held_peak_(k) = peak;
    }
  }
  ring_pos_ = (ring_pos_ + 1) % rms_blocks_;
  energy_sum_.noalias() = block_energy_.colwise().sum().transpose();

  const double window = static_cast<double>(rms_blocks_ * block_);
  const std::uint32_t s = meter_seq_.load(std::memory_order_relaxed);
  meter_seq_.store(s + 1, std::memory_order_relaxed);
  std::atomic_thread_fence(std::memory_order_release);
  for (Eigen::Index k = 0; k < meters; ++k) {
    meter_rms_[k].store(std::sqrt(std::max(0.0, energy_sum_(k)) / window), std::memory_order_relaxed);
    meter_peak_[k].store(held_peak_(k), std::memory_order_relaxed);
  }
  meter_sample_.store(sample_ + block_, std::memory_order_relaxed);
  meter_seq_.store(s + 2, std::memory_order_release);
}

// ---------------------------------------------------------------------------
// Transport

void Engine::begin_processing() {
  std::lock_guard<std::mutex> lock(control_mutex_);
  if (processing_.load()) return;
  EngineEvent e;
  e.type = EventType::transport_start;
  push_event(e);
  processing_.store(true, std::memory_order_release);
}

void Engine::end_processing() {
  std::lock_guard<std::mutex> lock(control_mutex_);
  if (!processing_.load()) return;
  processing_.store(false, std::memory_order_release);
  Command c;
  while (commands_.pop(c)) apply(c);
  EngineEvent e;
  e.type = EventType::transport_stop;
  push_event(e);
}

// ---------------------------------------------------------------------------
// Control plane

void Engine::post(const Command& c) {
  std::lock_guard<std::mutex> lock(control_mutex_);
  if (processing_.load(std::memory_order_acquire)) {
    if (!commands_.push(c)) throw Error("Engine: command queue full");
  } else {
    apply(c);
  }
}

void Engine::switch_scenario(const std::string& id) {
  Command c;
  c.kind = CommandKind::switch_scenario;
  c.arg = static_cast<std::int64_t>(session_.config.scenario_index(id));
  post(c);
}

void Engine::set_talkback(bool on) {
  Command c;
  c.kind = CommandKind::talkback;
  c.arg = on ? 1 : 0;
  post(c);
}

void Engine::log_marker(const std::string& text) {
  Command c;
  c.kind = CommandKind::marker;
  copy_text(c.text, text);
  post(c);
}

void Engine::log_latency_check(double t_l_s, Eigen::Index samples, double e_d_m) {
  Command c;
  c.kind = CommandKind::latency_check;
  c.arg = samples;
  c.value = t_l_s;
  c.value2 = e_d_m;
  post(c);
}

EngineState Engine::state() const {
  EngineState s;
  s.running = processing_.load(std::memory_order_acquire);
  s.active_scenario = session_.config.scenarios[pub_active_.load(std::memory_order_relaxed)].id;
  s.crossfading = pub_crossfading_.load(std::memory_order_relaxed);
  s.talkback = pub_talkback_.load(std::memory_order_relaxed);
  s.blocks = pub_blocks_.load(std::memory_order_relaxed);
  s.xruns = pub_xruns_.load(std::memory_order_relaxed);
  s.dsp_headroom = pub_headroom_.load(std::memory_order_relaxed);
  s.events_dropped = dropped_events_.load(std::memory_order_relaxed);
  return s;
}

MeterFrame Engine::meters() const {
  MeterFrame f;
  f.input_rms.resize(M_);
  f.input_peak.resize(M_);
  f.output_rms.resize(2 * N_);
  f.output_peak.resize(2 * N_);
  for (;;) {
    const std::uint32_t s1 = meter_seq_.load(std::memory_order_acquire);
    if (s1 & 1u) continue;
    for (std::size_t k = 0; k < M_; ++k) {
      f.input_rms[k] = meter_rms_[k].load(std::memory_order_relaxed);
      f.input_peak[k] = meter_peak_[k].load(std::memory_order_relaxed);
    }
    for (std::size_t k = 0; k < 2 * N_; ++k) {
      f.output_rms[k] = meter_rms_[M_ + k].load(std::memory_order_relaxed);
      f.output_peak[k] = meter_peak_[M_ + k].load(std::memory_order_relaxed);
    }
    f.sample = meter_sample_.load(std::memory_order_relaxed);
    std::atomic_thread_fence(std::memory_order_acquire);
    if (meter_seq_.load(std::memory_order_relaxed) == s1) return f;
  }
}

std::size_t Engine::drain_events(const std::function<void(const nlohmann::json&)>& sink) {
  std::lock_guard<std::mutex> lock(drain_mutex_);
  std::size_t n = 0;
  EngineEvent e;
  while (events_.pop(e)) {
    sink(event_json(e, ++event_seq_));
    ++n;
  }
  return n;
}

nlohmann::json Engine::event_json(const EngineEvent& e, std::uint64_t seq) const {
  const SessionConfig& cfg = session_.config;
  nlohmann::json j{{"seq", seq},
                   {"type", to_string(e.type)},
                   {"sample", e.sample},
                   {"t_audio_s", e.sample / fs_},
                   {"t_mono_s", e.t_mono_ns * 1e-9}};
  switch (e.type) {
    case EventType::scenario_switch:
      j["from"] = cfg.scenarios[e.a].id;
      j["to"] = cfg.scenarios[e.b].id;
      j["crossfade_s"] = e.value;
      break;
    case EventType::scenario_noop:
      j["scenario"] = cfg.scenarios[e.a].id;
      break;
    case EventType::talkback:
      j["on"] = e.a != 0;
      break;
    case EventType::xrun: {
      j["kind"] = e.a == static_cast<int>(XrunKind::overrun) ? "overrun" : "underrun";
      std::vector<int> chans;
      for (int c = 0; c < 64; ++c)
        if ((e.mask >> c) & 1u) chans.push_back(c);
      j["missing_channels"] = chans;
      break;
    }
    case EventType::marker:
      j["text"] = std::string(e.text);
      break;
    case EventType::feasibility_override:
      j["latency_s"] = e.value;
      j["min_feasible_distance_m"] = e.value2;
      j["reason"] = std::string(e.text);
      j["operator"] = cfg.feasibility_override ? cfg.feasibility_override->operator_name : std::string();
      break;
    case EventType::latency_check:
      j["t_l_s"] = e.value;
      j["samples"] = e.mask;
      j["e_d_m"] = e.value2;
      break;
    case EventType::transport_start:
    case EventType::transport_stop:
      break;
  }
  return j;
}

}  // namespace stagesim
