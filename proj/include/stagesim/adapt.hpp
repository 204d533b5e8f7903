#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stagesim/calibration.hpp"
#include "stagesim/signal.hpp"

namespace stagesim {

// Crop of the direct sound for BRIRs that were simulated with it. Not part
// of the regular workflow, where the simulator already omits it.
struct DirectSoundWindow {
  double first_reflection_s = 0.0;  // fade-in ends here
  double edge_s = 0.5e-3;           // raised-cosine fade-in length
};

// Zeroes everything before first_reflection_s - edge_s and fades in with a
// raised cosine over edge_s. The result is flagged direct_sound_skipped.
ImpulseResponse remove_direct_sound(const ImpulseResponse& h, const DirectSoundWindow& window);

// How to turn a simulated BRIR h' of pair (source, listener) into the
// playback-ready h: advance by t_l + d_ms / c and filter with K.
struct AdaptationPlan {
  int source = 1;
  int listener = 1;
  double t_l = 0.0;   // interface round-trip latency, s
  double d_ms = 0.0;  // source-microphone distance, m
  double c = 343.0;
  CalibrationFilter calibration = identity_calibration(44100.0);
  // Advance by the bulk delay of a linear-phase K as well, so the net shift
  // is -(t_l + d_ms / c). When false the bulk delay stays in the output.
  bool compensate_bulk_delay = true;
  double energy_loss_tolerance_db = 60.0;
  std::optional<DirectSoundWindow> direct_window;

  // Hearing oneself: the real direct sound reaches the ear through the
  // headphones, so h' must not contain it.
  bool skip_direct() const { return source == listener; }
  int extra_bulk_delay() const { return calibration.bulk_delay_samples; }
  // Advance applied by the fractional delay, in samples at rate fs.
  double advance_samples(double fs) const;
  // Net time shift of the output relative to h', s.
  double net_shift_seconds() const;
};

// h = h' * sinc(t - t_l - d_ms / c) * k on both channels. Throws
// ValidationError on a kind, pair or sample-rate mismatch, and
// InfeasibleLatency (min_feasible_distance_m = c t_l) when the advance would
// drop more than the tolerated energy.
ImpulseResponse adapt(const ImpulseResponse& h_prime, const AdaptationPlan& plan);

// Undo of adapt: delays by the plan's advance and filters with 1/|K|.
// Returns a raw_simulated IR.
ImpulseResponse adapt_inverse(const ImpulseResponse& h, const AdaptationPlan& plan);

// Geometry for the latency feasibility check, metres.
struct StageGeometry {
  double min_distance_m = 2.0;     // closest pair of musicians
  double receiver_height_m = 1.3;  // ear height over the reflecting floor
  double d_ms = 1.0;
  // Own instrument relative to the ear; defaults put it at the ear.
  double self_horizontal_m = 0.0;
  std::optional<double> self_source_height_m;
};

struct FeasibilityReport {
  double t_l = 0.0;
  double c = 343.0;
  double equivalent_distance_m = 0.0;  // c t_l
  double others_budget_s = 0.0;        // (d_min + d_ms) / c
  double self_direct_path_m = 0.0;
  double self_floor_path_m = 0.0;
  double self_budget_s = 0.0;          // (floor - direct + d_ms) / c
  bool hearing_others_feasible = false;
  bool hearing_self_feasible = false;
  // Smallest musician spacing the latency allows, c t_l - d_ms.
  double min_feasible_distance_m = 0.0;
  bool feasible() const { return hearing_others_feasible && hearing_self_feasible; }
};

// Throws ValidationError for negative latency or non-positive geometry.
FeasibilityReport check_feasibility(double t_l, const StageGeometry& geometry, double c = 343.0);

/* Batch manifest for cmd_adapt, JSON with paths relative to the manifest:
 *
 *   {"schema_version": 1,
 *    "items": [{"brir_in": "raw/h_1_2.wav", "brir_out": "adapted/h_1_2.wav",
 *               "plan": {"source": 1, "listener": 2, "t_l_s": 0.004, "d_ms_m": 1.0,
 *                        "c": 343, "calibration": "k_1_2.json",
 *                        "compensate_bulk_delay": true, "energy_loss_tolerance_db": 60,
 *                        "direct_sound_excluded": true,
 *                        "direct_window": {"first_reflection_s": 0.0076, "edge_s": 0.0005}}}]}
 *
 * calibration may be omitted for K = 1. direct_sound_excluded states that
 * the simulator left out the direct sound (needed when source == listener).
 */
struct AdaptItem {
  std::filesystem::path brir_in;
  std::filesystem::path brir_out;
  AdaptationPlan plan;
  std::filesystem::path calibration_path;  // empty for K = 1
  bool direct_sound_excluded = false;
};

std::vector<AdaptItem> read_adapt_manifest(const std::filesystem::path& path);

// Sidecar provenance record written next to each output as <brir_out>.json.
void write_adaptation_sidecar(const std::filesystem::path& path, const ImpulseResponse& h,
                              const AdaptationPlan& plan, const std::filesystem::path& brir_in);

// Reads an adapted BRIR back with the metadata from its sidecar.
ImpulseResponse read_adapted_ir(const std::filesystem::path& wav_path);

std::filesystem::path sidecar_path(const std::filesystem::path& wav_path);

}  // namespace stagesim
