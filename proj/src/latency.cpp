#include "stagesim/latency.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <thread>

namespace stagesim {

Eigen::VectorXd exponential_sweep(double f0, double f1, double duration_s, double fs, double level) {
  if (!(f0 > 0.0) || !(f1 > f0) || !(duration_s > 0.0) || !(fs > 0.0))
    throw ValidationError("exponential_sweep: need 0 < f0 < f1, positive duration and rate");
  const Eigen::Index n = std::max<Eigen::Index>(2, std::llround(duration_s * fs));
  const double T = n / fs;
  const double k = std::log(f1 / f0);
  const Eigen::Index fade = std::min<Eigen::Index>(n / 4, std::llround(0.01 * fs));
  Eigen::VectorXd x(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = i / fs;
    x(i) = level * std::sin(2.0 * std::numbers::pi * f0 * T / k * (std::exp(t * k / T) - 1.0));
  }
  for (Eigen::Index i = 0; i < fade; ++i) {
    const double w = 0.5 - 0.5 * std::cos(std::numbers::pi * i / fade);
    x(i) *= w;
    x(n - 1 - i) *= w;
  }
  return x;
}

LatencyResult estimate_delay(const Eigen::Ref<const Eigen::VectorXd>& excitation,
                             const Eigen::Ref<const Eigen::VectorXd>& captured, double fs,
                             Eigen::Index processing_delay, const LatencyOptions& options) {
  const Eigen::Index nx = excitation.size(), ny = captured.size();
  if (nx < 2 || ny < nx) throw ValidationError("estimate_delay: capture shorter than the excitation");
  const Eigen::Index n_fft = next_pow2(nx + ny);
  Eigen::VectorXcd X = spectrum(excitation, n_fft);
  const Eigen::VectorXcd Y = spectrum(captured, n_fft);
  X = Y.array() * X.array().conjugate();
  const Eigen::VectorXd r = inverse_spectrum(X);

  // Non-negative lags only; the capture cannot precede the excitation.
  const Eigen::Index lags = ny - nx + 1;
  Eigen::Index peak = 0;
  r.head(lags).cwiseAbs().maxCoeff(&peak);
  const double peak_value = std::abs(r(peak));

  const Eigen::Index guard = std::llround(0.005 * fs);
  double floor_energy = 0.0;
  Eigen::Index floor_count = 0;
  for (Eigen::Index k = 0; k < lags; ++k) {
    if (std::abs(k - peak) <= guard) continue;
    floor_energy += r(k) * r(k);
    ++floor_count;
  }
  const double floor_rms = floor_count ? std::sqrt(floor_energy / floor_count) : 0.0;
  const double snr_db = peak_value > 0.0 ? (floor_rms > 0.0 ? to_db(peak_value / floor_rms) : 300.0) : -300.0;
  if (!(snr_db >= options.min_snr_db))
    throw InsufficientSnr("measure_latency: correlation peak only " + std::to_string(snr_db) +
                              " dB above the floor; check the loopback connection",
                          snr_db);

  double frac = static_cast<double>(peak);
  if (peak > 0 && peak + 1 < lags) {
    const double a = r(peak - 1), b = r(peak), c = r(peak + 1);
    const double den = a - 2.0 * b + c;
    if (den != 0.0) frac += std::clamp(0.5 * (a - c) / den, -0.5, 0.5);
  }

  LatencyResult out;
  out.round_trip_samples = peak;
  out.samples = std::max<Eigen::Index>(0, peak - processing_delay);
  out.fractional_samples = std::max(0.0, frac - processing_delay);
  out.t_l_s = out.samples / fs;
  out.e_d_m = options.c * out.t_l_s;
  out.snr_db = snr_db;
  return out;
}

LatencyResult measure_latency(BlockTransport& transport, int out_channel, int in_channel,
                              const LatencyOptions& options) {
  if (transport.running()) throw Error("measure_latency: transport is busy");
  if (out_channel < 0 || out_channel >= transport.output_channels() || in_channel < 0 ||
      in_channel >= transport.input_channels())
    throw ValidationError("measure_latency: loopback channel out of range");
  const double fs = transport.sample_rate();
  const Eigen::Index B = transport.block_size();
  const double f1 = std::min(options.f_stop_hz, 0.45 * fs);
  const Eigen::VectorXd sweep = exponential_sweep(options.f_start_hz, f1, options.sweep_s, fs, options.level);
  const Eigen::Index total = sweep.size() + std::llround(options.tail_s * fs) + transport.processing_delay();
  Eigen::VectorXd capture = Eigen::VectorXd::Zero(total);

  std::atomic<Eigen::Index> pos{0};
  std::atomic<bool> done{false};
  TransportHooks hooks;
  hooks.process = [&](const Eigen::Ref<const Eigen::MatrixXd>& in, Eigen::Ref<Eigen::MatrixXd> out, std::uint64_t) {
    out.setZero();
    const Eigen::Index p = pos.load(std::memory_order_relaxed);
    if (p >= total) return;
    for (Eigen::Index i = 0; i < B; ++i) {
      const Eigen::Index t = p + i;
      if (t < sweep.size()) out(i, out_channel) = sweep(t);
      if (t < total) capture(t) = in(i, in_channel);
    }
    pos.store(p + B, std::memory_order_relaxed);
    if (p + B >= total) done.store(true, std::memory_order_release);
  };
  transport.start(hooks);
  while (!done.load(std::memory_order_acquire) && transport.running())
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  transport.stop();
  if (!done.load(std::memory_order_acquire)) throw Error("measure_latency: transport stopped early");
  return estimate_delay(sweep, capture, fs, transport.processing_delay(), options);
}

nlohmann::json to_json(const LatencyResult& r) {
  return {{"t_l_s", r.t_l_s},
          {"samples", r.samples},
          {"fractional_samples", r.fractional_samples},
          {"round_trip_samples", r.round_trip_samples},
          {"e_d_m", r.e_d_m},
          {"snr_db", r.snr_db}};
}

}  // namespace stagesim
