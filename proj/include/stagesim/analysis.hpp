#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "stagesim/signal.hpp"

namespace stagesim {

struct EnvelopeResult {
  Eigen::VectorXd time_s;
  Eigen::MatrixXd envelope;     // frames x channels, linear, >= 0
  Eigen::MatrixXd envelope_db;  // 20 log10, floored at kEnvelopeFloorDb
  double f_lo_hz = 0.0;
  double f_hi_hz = 0.0;
};

constexpr double kEnvelopeFloorDb = -200.0;

// Band-pass to [f_lo, f_hi] and take the analytic-signal magnitude. Both
// steps act on one zero-padded spectrum: positive-frequency bins in the band
// are doubled, bins outside fall off with a 1/6-octave raised cosine.
EnvelopeResult hilbert_envelope(const ImpulseResponse& h, double f_lo_hz, double f_hi_hz);

// Writes time_s followed by one envelope_db column per channel.
void write_envelope_csv(const std::filesystem::path& path, const EnvelopeResult& e);

// Index of the first sample whose magnitude (any channel) reaches
// threshold_db below the peak.
Eigen::Index direct_sound_index(const Eigen::Ref<const Eigen::MatrixXd>& x, double threshold_db = -20.0);

constexpr double kStageSupportFloorDb = -99.0;

struct StageSupportOptions {
  std::vector<double> band_centres_hz{250.0, 500.0, 1000.0, 2000.0};
  double onset_threshold_db = -20.0;
  bool reverberation_time = true;  // also fit T20 per band
};

struct BandMetrics {
  double centre_hz = 0.0;
  double st_early_db = 0.0;
  double st_late_db = 0.0;
  bool st_early_floored = false;
  bool st_late_floored = false;
  std::optional<double> rt_s;  // empty when the decay range is too small
};

struct StageMetrics {
  std::vector<BandMetrics> bands;
  double st_early_db = 0.0;  // arithmetic mean of the band values, dB
  double st_late_db = 0.0;
  bool st_early_floored = false;  // any band hit the floor
  bool st_late_floored = false;
  std::optional<double> rt_s;  // mean over bands with a valid fit
  double onset_s = 0.0;
};

// ST_E = 10 log10(E[20, 100 ms] / E[0, 10 ms]) and ST_L with [100, 1000 ms]
// per octave band (6th-order Butterworth), windows anchored at the direct
// sound. Channels are summed in energy. Ratios below kStageSupportFloorDb,
// or whose window is below it in the unfiltered IR, are reported as the
// floor with the floored flag set. Throws ValidationError
// when the IR ends before onset + 1 s.
StageMetrics stage_support(const ImpulseResponse& h_1m, const StageSupportOptions& options = {});

// Averages per-position results (same band list required).
StageMetrics average_stage_metrics(const std::vector<StageMetrics>& positions);

struct DecayOptions {
  double start_db = -5.0;
  double end_db = -25.0;
  double min_range_db = 35.0;  // peak over noise needed
  double onset_threshold_db = -20.0;
};

// T20 by Schroeder backward integration and a least-squares line between
// start_db and end_db, extrapolated to 60 dB. With a band the IR is octave
// filtered first. The range is the peak 10 ms mean square over the mean
// square of the last tenth of the IR; below min_range_db throws
// InsufficientSnr.
double reverberation_time(const ImpulseResponse& h, std::optional<double> band_centre_hz = std::nullopt,
                          const DecayOptions& options = {});

// Schroeder backward integral of an energy sequence, dB re the total.
Eigen::VectorXd schroeder_curve_db(const Eigen::Ref<const Eigen::VectorXd>& energy);

nlohmann::json to_json(const StageMetrics& m);
nlohmann::json to_json(const EnvelopeResult& e);  // band and summary only

}  // namespace stagesim
