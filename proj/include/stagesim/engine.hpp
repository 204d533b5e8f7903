#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "stagesim/partitioned_convolver.hpp"
#include "stagesim/session.hpp"
#include "stagesim/spsc_queue.hpp"

namespace stagesim {

// grid[m][n]: one partitioned filter per ear for each player m and listener n.
class ConvolutionMatrix {
 public:
  struct Cell {
    PartitionedFilter<double> ear[2];
  };

  ConvolutionMatrix(const LoadedScenario& scenario, Eigen::Index block_size);

  std::size_t players() const { return players_; }
  std::size_t listeners() const { return listeners_; }
  const Cell& cell(std::size_t m, std::size_t n) const { return cells_[m * listeners_ + n]; }
  Eigen::Index max_partitions() const;

 private:
  std::size_t players_ = 0, listeners_ = 0;
  std::vector<Cell> cells_;
};

enum class EventType : std::uint8_t {
  transport_start,
  transport_stop,
  scenario_switch,
  scenario_noop,
  talkback,
  xrun,
  marker,
  feasibility_override,
  latency_check,
};

const char* to_string(EventType t);

enum class XrunKind : std::uint8_t { underrun, overrun };

// Fixed-size record passed from the processing context to the control plane.
struct EngineEvent {
  EventType type = EventType::marker;
  std::int64_t sample = 0;      // engine position of the block boundary
  std::int64_t t_mono_ns = 0;   // steady clock, relative to engine creation
  std::int32_t a = -1, b = -1;  // scenario indices, on/off, xrun kind
  std::uint64_t mask = 0;       // missing input channels for xruns
  double value = 0.0;
  double value2 = 0.0;
  char text[128] = {};
};

struct MeterFrame {
  std::int64_t sample = 0;
  std::vector<double> input_rms, input_peak;    // per player, linear full scale
  std::vector<double> output_rms, output_peak;  // per listener ear: 2n, 2n + 1
};

struct EngineState {
  bool running = false;
  std::string active_scenario;
  bool crossfading = false;
  bool talkback = false;
  std::int64_t blocks = 0;
  std::int64_t xruns = 0;
  double dsp_headroom = 1.0;  // 1 - worst block compute time / block period
  std::int64_t events_dropped = 0;
};

struct EngineOptions {
  double meter_rms_s = 0.3;
  double peak_hold_s = 1.5;
  std::size_t command_capacity = 1024;
  std::size_t event_capacity = 16384;
};

/* Real-time M x N mixer, s_o,n = sum_m h_mn * s_i,m per listener ear.
 *
 * process() belongs to one processing context and does not allocate, lock
 * or block. Control calls may come from any thread: while processing is
 * active they are queued and applied at the next block boundary, otherwise
 * they apply at once. Events leave through a wait-free ring and are read
 * with drain_events().
 */
class Engine {
 public:
  explicit Engine(LoadedSession session, EngineOptions options = {});
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  const LoadedSession& session() const { return session_; }
  Eigen::Index block_size() const { return block_; }
  double sample_rate() const { return fs_; }
  int input_channels() const { return session_.config.input_channels(); }
  int output_channels() const { return session_.config.output_channels(); }

  // Processing context. `in` is block_size x input_channels, `out` is
  // block_size x output_channels. Bit c of `missing` marks input channel c
  // as not delivered: it is treated as silence and an xrun is logged.
  void process(const Eigen::Ref<const Eigen::MatrixXd>& in, Eigen::Ref<Eigen::MatrixXd> out,
               std::uint64_t missing = 0);
  void report_xrun(XrunKind kind, std::uint64_t mask = 0);
  void note_compute_time(double seconds);

  // Transport, driven by the block transport that calls process().
  void begin_processing();
  void end_processing();
  bool processing() const { return processing_.load(std::memory_order_acquire); }

  // Control plane.
  void switch_scenario(const std::string& id);  // throws ValidationError for unknown ids
  void set_talkback(bool on);
  void log_marker(const std::string& text);
  void log_latency_check(double t_l_s, Eigen::Index samples, double e_d_m);

  EngineState state() const;
  MeterFrame meters() const;
  // Pops every pending event in order and hands it to `sink` as JSON.
  std::size_t drain_events(const std::function<void(const nlohmann::json&)>& sink);
  nlohmann::json event_json(const EngineEvent& e, std::uint64_t seq) const;

 private:
  enum class CommandKind : std::uint8_t { switch_scenario, talkback, marker, latency_check };
  struct Command {
    CommandKind kind = CommandKind::marker;
    std::int64_t arg = 0;
    double value = 0.0, value2 = 0.0;
    char text[128] = {};
  };

  void post(const Command& c);
  void apply(const Command& c);
  void start_switch(int target);
  void push_event(EngineEvent e);
  std::int64_t now_ns() const;
  void mix_scenario(std::size_t s, std::size_t n, int ear, double* out);
  void update_meters(const Eigen::Ref<const Eigen::MatrixXd>& in, std::uint64_t missing,
                     const Eigen::Ref<const Eigen::MatrixXd>& out);

  LoadedSession session_;
  EngineOptions options_;
  double fs_;
  Eigen::Index block_;
  std::size_t M_, N_;
  std::vector<int> mic_ch_;
  std::vector<std::array<int, 2>> hp_ch_;
  std::vector<int> player_of_listener_;  // player index with the same id, or -1
  std::vector<ConvolutionMatrix> matrices_;
  std::vector<SpectralHistory<double>> history_;
  OverlapSaveOutput<double> ifft_;
  ComplexVectorX<double> acc_;
  Eigen::VectorXd cur_, prev_, fade_gain_;

  // Processing-context state.
  int active_ = 0;
  int previous_ = -1;
  int deferred_ = -1;
  Eigen::Index fade_pos_ = 0;
  Eigen::Index fade_len_ = 0;
  bool talkback_ = false;
  double talkback_gain_ = 0.5;
  std::int64_t sample_ = 0;

  // Meter ballistics (processing context).
  Eigen::Index rms_blocks_ = 1;
  Eigen::Index hold_blocks_ = 1;
  Eigen::Index ring_pos_ = 0;
  Eigen::MatrixXd block_energy_;  // rms_blocks x meters
  Eigen::VectorXd energy_sum_, held_peak_;
  Eigen::VectorXi hold_left_;
  Eigen::VectorXd worst_compute_;  // ring over hold_blocks
  Eigen::Index compute_pos_ = 0;

  // Published snapshots.
  std::atomic<std::uint32_t> meter_seq_{0};
  std::unique_ptr<std::atomic<double>[]> meter_rms_, meter_peak_;
  std::atomic<std::int64_t> meter_sample_{0};
  std::atomic<int> pub_active_{0};
  std::atomic<bool> pub_crossfading_{false};
  std::atomic<bool> pub_talkback_{false};
  std::atomic<std::int64_t> pub_blocks_{0};
  std::atomic<std::int64_t> pub_xruns_{0};
  std::atomic<double> pub_headroom_{1.0};
  std::atomic<bool> processing_{false};

  SpscQueue<Command> commands_;
  SpscQueue<EngineEvent> events_;
  std::atomic<std::int64_t> dropped_events_{0};
  std::mutex control_mutex_;
  std::mutex drain_mutex_;
  std::uint64_t event_seq_ = 0;
  std::chrono::steady_clock::time_point epoch_;
};

}  // namespace stagesim
