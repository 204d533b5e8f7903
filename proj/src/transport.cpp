#include "stagesim/transport.hpp"

#include <chrono>

#include <pthread.h>
#include <sched.h>

namespace stagesim {

SimulatedDevice::SimulatedDevice(SimulatedDeviceOptions options) : options_(std::move(options)) {
  const auto& o = options_;
  if (!(o.sample_rate > 0.0)) throw ValidationError("SimulatedDevice: sample rate must be positive");
  if (o.block_size < 1) throw ValidationError("SimulatedDevice: block size < 1");
  if (o.input_channels < 1 || o.output_channels < 1) throw ValidationError("SimulatedDevice: needs channels");
  if (o.record_frames < 0) throw ValidationError("SimulatedDevice: negative record length");
  set_loopback(o.loopback);
  in_block_ = Eigen::MatrixXd::Zero(o.block_size, o.input_channels);
  out_block_ = Eigen::MatrixXd::Zero(o.block_size, o.output_channels);
  record_ = Eigen::MatrixXd::Zero(o.record_frames, o.output_channels);
}

SimulatedDevice::~SimulatedDevice() { stop(); }

void SimulatedDevice::set_input(Eigen::MatrixXd input) {
  if (running()) throw Error("SimulatedDevice: set_input while running");
  if (input.size() > 0 && input.cols() != options_.input_channels)
    throw ValidationError("SimulatedDevice: input has " + std::to_string(input.cols()) + " channels, device has " +
                          std::to_string(options_.input_channels));
  input_ = std::move(input);
}

void SimulatedDevice::set_loopback(std::optional<Loopback> loopback) {
  if (running()) throw Error("SimulatedDevice: set_loopback while running");
  const auto& o = options_;
  if (loopback) {
    const Loopback& l = *loopback;
    if (l.output < 0 || l.output >= o.output_channels || l.input < 0 || l.input >= o.input_channels)
      throw ValidationError("SimulatedDevice: loopback channel out of range");
    if (l.delay_samples < 0) throw ValidationError("SimulatedDevice: negative loopback delay");
    loop_ring_ = Eigen::VectorXd::Zero(2 * o.block_size + l.delay_samples);
  }
  options_.loopback = loopback;
}

void SimulatedDevice::reset_state() {
  position_ = 0;
  blocks_.store(0);
  overruns_.store(0);
  if (loop_ring_.size()) loop_ring_.setZero();
  record_.setZero();
}

void SimulatedDevice::step(const TransportHooks& hooks) {
  const Eigen::Index B = options_.block_size;
  const Eigen::Index avail = std::clamp<Eigen::Index>(input_.rows() - position_, 0, B);
  if (avail > 0) in_block_.topRows(avail) = input_.middleRows(position_, avail);
  if (avail < B) in_block_.bottomRows(B - avail).setZero();

  if (options_.loopback) {
    const Loopback& l = *options_.loopback;
    const Eigen::Index L = loop_ring_.size();
    for (Eigen::Index i = 0; i < B; ++i) {
      double& slot = loop_ring_((position_ + i) % L);
      in_block_(i, l.input) += slot;
      slot = 0.0;
    }
  }

  const std::uint64_t missing = options_.underruns ? options_.underruns(blocks_.load(std::memory_order_relaxed)) : 0;
  for (int c = 0; c < options_.input_channels && c < 64; ++c)
    if ((missing >> c) & 1u) in_block_.col(c).setZero();

  const auto t0 = std::chrono::steady_clock::now();
  hooks.process(in_block_, out_block_, missing);
  const double spent = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (hooks.compute_time) hooks.compute_time(spent);
  if (spent > B / options_.sample_rate) {
    overruns_.fetch_add(1, std::memory_order_relaxed);
    if (hooks.overrun) hooks.overrun();
  }

  if (options_.loopback) {
    const Loopback& l = *options_.loopback;
    const Eigen::Index L = loop_ring_.size();
    for (Eigen::Index i = 0; i < B; ++i) loop_ring_((position_ + i + B + l.delay_samples) % L) += out_block_(i, l.output);
  }

  const Eigen::Index keep = std::clamp<Eigen::Index>(record_.rows() - position_, 0, B);
  if (keep > 0) record_.middleRows(position_, keep) = out_block_.topRows(keep);

  position_ += B;
  blocks_.fetch_add(1, std::memory_order_release);
}

void SimulatedDevice::run(const TransportHooks& hooks, std::int64_t blocks) {
  if (!hooks.process) throw ValidationError("SimulatedDevice: no process callback");
  if (running()) throw Error("SimulatedDevice: already running");
  reset_state();
  running_.store(true, std::memory_order_release);
  for (std::int64_t k = 0; k < blocks; ++k) step(hooks);
  running_.store(false, std::memory_order_release);
}

void SimulatedDevice::thread_main(TransportHooks hooks) {
  if (options_.paced && options_.realtime_priority) {
    sched_param sp{};
    sp.sched_priority = sched_get_priority_min(SCHED_FIFO) + 10;
    realtime_.store(pthread_setschedparam(pthread_self(), SCHED_FIFO, &sp) == 0, std::memory_order_release);
  }
  if (options_.on_thread_start) options_.on_thread_start();
  const auto period = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
      std::chrono::duration<double>(options_.block_size / options_.sample_rate));
  auto next = std::chrono::steady_clock::now();
  while (!stop_requested_.load(std::memory_order_acquire)) {
    if (options_.max_blocks && blocks_.load(std::memory_order_relaxed) >= *options_.max_blocks) break;
    step(hooks);
    if (options_.paced) {
      next += period;
      std::this_thread::sleep_until(next);
    }
  }
  running_.store(false, std::memory_order_release);
}

void SimulatedDevice::start(TransportHooks hooks) {
  if (!hooks.process) throw ValidationError("SimulatedDevice: no process callback");
  if (thread_.joinable()) {
    if (running()) throw Error("SimulatedDevice: already running");
    thread_.join();
  }
  reset_state();
  stop_requested_.store(false);
  running_.store(true, std::memory_order_release);
  thread_ = std::thread(&SimulatedDevice::thread_main, this, std::move(hooks));
}

void SimulatedDevice::stop() {
  stop_requested_.store(true, std::memory_order_release);
  if (thread_.joinable()) thread_.join();
}

void SimulatedDevice::wait() {
  if (!options_.max_blocks) throw Error("SimulatedDevice: wait() needs max_blocks");
  if (thread_.joinable()) thread_.join();
}

Eigen::MatrixXd SimulatedDevice::recorded() const {
  const Eigen::Index n = std::min<Eigen::Index>(record_.rows(), blocks_processed() * options_.block_size);
  return record_.topRows(n);
}

TransportHooks engine_hooks(Engine& engine) {
  TransportHooks h;
  h.process = [&engine](const Eigen::Ref<const Eigen::MatrixXd>& in, Eigen::Ref<Eigen::MatrixXd> out,
                        std::uint64_t missing) { engine.process(in, out, missing); };
  h.compute_time = [&engine](double s) { engine.note_compute_time(s); };
  h.overrun = [&engine] { engine.report_xrun(XrunKind::overrun); };
  return h;
}

namespace {

void check_compatible(const Engine& engine, const BlockTransport& t) {
  if (t.block_size() != engine.block_size() || t.sample_rate() != engine.sample_rate())
    throw ValidationError("transport block size or sample rate differs from the session");
  if (t.input_channels() < engine.input_channels() || t.output_channels() < engine.output_channels())
    throw ValidationError("transport has fewer channels than the session routes");
}

}  // namespace

void start_engine(Engine& engine, BlockTransport& transport) {
  check_compatible(engine, transport);
  engine.begin_processing();
  try {
    transport.start(engine_hooks(engine));
  } catch (...) {
    engine.end_processing();
    throw;
  }
}

void stop_engine(Engine& engine, BlockTransport& transport) {
  transport.stop();
  engine.end_processing();
}

std::vector<Eigen::MatrixXd> render_offline(Engine& engine, const Eigen::MatrixXd& input) {
  if (engine.processing()) throw Error("render_offline: engine is already processing");
  if (input.cols() != engine.input_channels())
    throw ValidationError("render_offline: input has " + std::to_string(input.cols()) + " channels, session needs " +
                          std::to_string(engine.input_channels()));
  Eigen::Index longest = 1;
  for (const LoadedScenario& s : engine.session().scenarios)
    for (const auto& row : s.ir)
      for (const ImpulseResponse& h : row) longest = std::max(longest, h.frames());
  const Eigen::Index frames = input.rows() + longest - 1;
  const Eigen::Index B = engine.block_size();
  const std::int64_t blocks = (frames + B - 1) / B;

  SimulatedDeviceOptions o;
  o.sample_rate = engine.sample_rate();
  o.block_size = B;
  o.input_channels = engine.input_channels();
  o.output_channels = engine.output_channels();
  o.paced = false;
  o.record_frames = blocks * B;
  SimulatedDevice dev(o);
  dev.set_input(input);

  engine.begin_processing();
  try {
    dev.run(engine_hooks(engine), blocks);
  } catch (...) {
    engine.end_processing();
    throw;
  }
  engine.end_processing();

  const Eigen::MatrixXd rec = dev.recorded();
  std::vector<Eigen::MatrixXd> out;
  for (const ListenerConfig& l : engine.session().config.listeners) {
    Eigen::MatrixXd y(frames, 2);
    y.col(0) = rec.col(l.headphone_channels[0]).head(frames);
    y.col(1) = rec.col(l.headphone_channels[1]).head(frames);
    out.push_back(std::move(y));
  }
  return out;
}

}  // namespace stagesim
