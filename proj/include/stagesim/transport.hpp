#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <thread>

#include <Eigen/Core>

#include "stagesim/engine.hpp"

namespace stagesim {

using BlockCallback = std::function<void(const Eigen::Ref<const Eigen::MatrixXd>& in,
                                         Eigen::Ref<Eigen::MatrixXd> out, std::uint64_t missing)>;

struct TransportHooks {
  BlockCallback process;                      // required
  std::function<void(double)> compute_time;   // seconds spent in process, per block
  std::function<void()> overrun;              // process took longer than a block period
};

// Abstract block-based audio device. One processing context calls
// hooks.process once per block between start() and stop().
class BlockTransport {
 public:
  virtual ~BlockTransport() = default;

  virtual Eigen::Index block_size() const = 0;
  virtual double sample_rate() const = 0;
  virtual int input_channels() const = 0;
  virtual int output_channels() const = 0;
  // Turnaround between writing an output sample and capturing it again on
  // an ideal loopback, in samples. Latency checks subtract it.
  virtual Eigen::Index processing_delay() const = 0;

  virtual void start(TransportHooks hooks) = 0;
  virtual void stop() = 0;
  virtual bool running() const = 0;
};

struct Loopback {
  int output = 0;
  int input = 0;
  Eigen::Index delay_samples = 0;  // external delay on top of processing_delay()
};

struct SimulatedDeviceOptions {
  double sample_rate = 44100.0;
  Eigen::Index block_size = 64;
  int input_channels = 1;
  int output_channels = 2;
  bool paced = true;  // sleep to the real block rate; false runs as fast as possible
  // Ask for SCHED_FIFO on the paced processing thread; falls back silently when refused.
  bool realtime_priority = true;
  std::optional<Loopback> loopback;
  Eigen::Index record_frames = 0;      // output capture capacity
  std::optional<std::int64_t> max_blocks;  // stop by itself after this many blocks
  // Per-block mask of input channels that fail to arrive (test hook).
  std::function<std::uint64_t(std::int64_t block)> underruns;
  // Runs first thing on the processing thread (test hook).
  std::function<void()> on_thread_start;
};

/* File-driven reference backend. Input comes from a preloaded matrix (silence
 * after its end), outputs are captured into a preallocated buffer, and an
 * optional loopback feeds one output back to one input: an output sample
 * written at position s is captured at s + block_size + delay.
 */
class SimulatedDevice : public BlockTransport {
 public:
  explicit SimulatedDevice(SimulatedDeviceOptions options);
  ~SimulatedDevice() override;

  Eigen::Index block_size() const override { return options_.block_size; }
  double sample_rate() const override { return options_.sample_rate; }
  // True once the processing thread obtained real-time scheduling.
  bool realtime_scheduled() const { return realtime_.load(std::memory_order_acquire); }
  int input_channels() const override { return options_.input_channels; }
  int output_channels() const override { return options_.output_channels; }
  Eigen::Index processing_delay() const override { return options_.block_size; }

  // frames x input_channels. Only while stopped.
  void set_input(Eigen::MatrixXd input);
  // Connects or removes the loopback. Only while stopped.
  void set_loopback(std::optional<Loopback> loopback);

  void start(TransportHooks hooks) override;
  void stop() override;
  bool running() const override { return running_.load(std::memory_order_acquire); }
  // Blocks until a max_blocks run has finished, then joins.
  void wait();

  // Runs `blocks` blocks on the calling thread.
  void run(const TransportHooks& hooks, std::int64_t blocks);

  std::int64_t blocks_processed() const { return blocks_.load(std::memory_order_acquire); }
  std::int64_t overruns() const { return overruns_.load(std::memory_order_acquire); }
  // First min(record_frames, frames processed) output frames.
  Eigen::MatrixXd recorded() const;

 private:
  void reset_state();
  void step(const TransportHooks& hooks);
  void thread_main(TransportHooks hooks);

  SimulatedDeviceOptions options_;
  Eigen::MatrixXd input_;
  Eigen::MatrixXd in_block_, out_block_, record_;
  Eigen::VectorXd loop_ring_;
  std::int64_t position_ = 0;
  std::atomic<std::int64_t> blocks_{0};
  std::atomic<std::int64_t> overruns_{0};
  std::atomic<bool> running_{false};
  std::atomic<bool> stop_requested_{false};
  std::atomic<bool> realtime_{false};
  std::thread thread_;
};

// Connects an engine to a transport: process, compute time and overruns.
TransportHooks engine_hooks(Engine& engine);

// Starts the engine on the transport (begin_processing, then start).
void start_engine(Engine& engine, BlockTransport& transport);
// Stops the transport, then the engine (end_processing).
void stop_engine(Engine& engine, BlockTransport& transport);

// Offline render through the real-time path on an unpaced simulated device.
// input is frames x engine.input_channels(); the result holds one
// (frames + longest IR - 1) x 2 matrix per listener.
std::vector<Eigen::MatrixXd> render_offline(Engine& engine, const Eigen::MatrixXd& input);

}  // namespace stagesim
