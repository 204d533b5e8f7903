#pragma once

#include <Eigen/Core>

#include "json.hpp"
#include "stagesim/transport.hpp"

namespace stagesim {

struct LatencyOptions {
  double sweep_s = 1.0;
  double f_start_hz = 40.0;
  double f_stop_hz = 16000.0;  // clamped below Nyquist
  double level = 0.5;          // sweep amplitude, full scale
  double tail_s = 0.5;         // capture after the sweep ends
  double min_snr_db = 20.0;    // correlation peak over the correlation floor
  double c = 343.0;
};

struct LatencyResult {
  double t_l_s = 0.0;
  Eigen::Index samples = 0;             // S_B, latency in whole samples
  double fractional_samples = 0.0;      // parabolic peak estimate
  Eigen::Index round_trip_samples = 0;  // before subtracting the processing delay
  double e_d_m = 0.0;                   // c * t_l
  double snr_db = 0.0;
};

// Exponential sine sweep from f0 to f1 with a short raised-cosine fade at
// both ends.
Eigen::VectorXd exponential_sweep(double f0, double f1, double duration_s, double fs, double level);

// Plays a sweep on out_channel of an idle transport, captures in_channel,
// finds the round trip from the cross-correlation peak and subtracts the
// transport's processing delay. Throws InsufficientSnr when the peak is
// less than min_snr_db above the correlation floor.
LatencyResult measure_latency(BlockTransport& transport, int out_channel, int in_channel,
                              const LatencyOptions& options = {});

// Same analysis on already captured signals (round trip in samples).
LatencyResult estimate_delay(const Eigen::Ref<const Eigen::VectorXd>& excitation,
                             const Eigen::Ref<const Eigen::VectorXd>& captured, double fs,
                             Eigen::Index processing_delay, const LatencyOptions& options = {});

nlohmann::json to_json(const LatencyResult& r);

}  // namespace stagesim
