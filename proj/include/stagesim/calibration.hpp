#pragma once

#include <complex>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stagesim/error.hpp"
#include "stagesim/frequency_response.hpp"
#include "stagesim/signal.hpp"

namespace stagesim {

// Inputs of the calibration filter for one (source m, listener n) pair.
struct CalibrationSpec {
  std::string id;
  int source = 1;
  int listener = 1;
  double d_ms = 1.0;  // single-value source-microphone distance estimate, m
  double d_es = 1.0;  // single-value source-ear distance estimate, m
  FrequencyResponse mic_response = FrequencyResponse::flat(1.0, ResponseReference::fs_per_pa);
  FrequencyResponse headphone_response = FrequencyResponse::flat(1.0, ResponseReference::pa_per_fs);
  // Directional factor towards the pickup microphone; unity by convention.
  FrequencyResponse gamma_mic = FrequencyResponse::flat(1.0);
  FrequencyResponse e_k = FrequencyResponse::flat(1.0);
  double c = 343.0;
  double rho = 1.2;
};

enum class FirPhase { linear, minimum };

struct SynthesisOptions {
  double sample_rate = 44100.0;
  Eigen::Index fir_length = 4096;    // power of two
  double floor_db = -40.0;           // inversion floor re in-band peak
  double band_lo_hz = 50.0;
  double band_hi_hz = 16000.0;
  double cap_db = 24.0;              // max gain re median in-band gain
  double smoothing_fraction = 12.0;  // 1/n octave; 0 disables
  double max_unreliable_octaves = 1.0 / 3.0;
  FirPhase phase = FirPhase::linear;
};

struct CalibrationFilter {
  std::string id;
  int source = 1;
  int listener = 1;
  FrequencyResponse response;  // |K| on the FIR bin grid
  Eigen::VectorXd fir;
  double sample_rate = 44100.0;
  int bulk_delay_samples = 0;
  std::vector<FrequencyBand> unreliable_bands;
  SynthesisOptions options;
  double d_ms = 1.0;
  double d_es = 1.0;

  bool reliable() const { return unreliable_bands.empty(); }
  // Median of 20 log10 |K| over the in-band bins.
  double broadband_offset_db() const;
  // Largest |20 log10 |FFT(fir)| - 20 log10 |K|| over in-band grid points,
  // with the FIR spectrum evaluated on a 4x zero-padded transform.
  double fir_max_deviation_db() const;
  ImpulseResponse as_impulse_response() const;
};

// K = d_MS E_K / (H_E S_M Gamma(Omega_MS)) evaluated per frequency, realized
// as an FIR. H_E and S_M are inverted against a floor of floor_db below their
// in-band peak; runs below the floor wider than max_unreliable_octaves are
// reported in unreliable_bands.
CalibrationFilter synthesize_k(const CalibrationSpec& spec, const SynthesisOptions& options = {});

// Identity filter (K = 1, single tap, no bulk delay).
CalibrationFilter identity_calibration(double sample_rate);

// Filter whose magnitude is 1/|K| of the given one, on the same grid and
// with the same realization options.
CalibrationFilter invert(const CalibrationFilter& k);

// FIR with the given magnitude on the n/2+1 bin grid of an n-point transform.
// Linear phase puts the centre tap at n/2; minimum phase has no bulk delay.
Eigen::VectorXd magnitude_to_fir(const Eigen::Ref<const Eigen::VectorXd>& bin_magnitude, FirPhase phase);

// Filter a signal with a magnitude response (zero-phase target with the
// linear-phase bulk delay removed, so output and input stay aligned).
SampledSignal apply_response(const SampledSignal& x, const FrequencyResponse& response,
                             const SynthesisOptions& options = {});

// Playback-chain equalization only: divides by H_E with the synthesize_k
// floor. Throws UnreliableCalibration when H_E cannot be inverted.
SampledSignal apply_inverse_headphone(const SampledSignal& s_o, const FrequencyResponse& h_e,
                                      const SynthesisOptions& options = {});

/* Calibration filter files are JSON:
 *
 *   {"schema_version": 1, "id": "k_1_2", "source": 1, "listener": 2,
 *    "sample_rate": 44100, "bulk_delay_samples": 2048, "d_ms": 1, "d_es": 1,
 *    "options": {"fir_length": 4096, "floor_db": -40, "band_lo_hz": 50,
 *                "band_hi_hz": 16000, "cap_db": 24, "smoothing_fraction": 12,
 *                "max_unreliable_octaves": 0.333, "phase": "linear"},
 *    "unreliable_bands": [{"lo_hz": 4000, "hi_hz": 8000}],
 *    "response": {"frequency_hz": [...], "magnitude": [...]},
 *    "fir": [...]}
 */
void write_calibration_json(const std::filesystem::path& path, const CalibrationFilter& k);
CalibrationFilter read_calibration_json(const std::filesystem::path& path);

/* Batch manifest for cmd_calibrate, JSON with paths relative to the manifest:
 *
 *   {"schema_version": 1, "sample_rate": 44100,
 *    "options": {"fir_length": 4096, "phase": "linear"},
 *    "items": [{"id": "k_1_2", "source": 1, "listener": 2, "d_ms_m": 0.9, "d_es_m": 2.0,
 *               "mic_response": "mic1.csv", "headphone_response": "hp2.csv",
 *               "gamma_mic": null, "e_k": null, "options": {}, "out": "k_1_2.json"}]}
 *
 * Omitted responses are flat (unity). Item options override the top-level
 * ones, keys as in the filter file.
 */
struct CalibrationItem {
  CalibrationSpec spec;
  SynthesisOptions options;
  std::filesystem::path out;
};

std::vector<CalibrationItem> read_calibration_manifest(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Closed forms of the calibration chain

// E_K = (1 + R1) / (1 + R2) with R1 = e1 / d_MS and R2 = e2 / d_ES.
double distance_error_effect(double r1, double r2);
inline double distance_error_effect_db(double r1, double r2) {
  return 20.0 * std::log10(std::abs(distance_error_effect(r1, r2)));
}
// Rows follow r1, columns follow r2; entries in dB.
Eigen::MatrixXd distance_error_grid_db(const Eigen::Ref<const Eigen::VectorXd>& r1,
                                       const Eigen::Ref<const Eigen::VectorXd>& r2);

// Free-field squared pressure rho c W Q / (4 pi d^2), Pa^2.
double free_field_pressure_oracle(double power_w, double q, double d, double rho, double c);

// Per-frequency terms of the anechoic mic-to-headphone path.
struct AnechoicPath {
  double d_ms = 1.0;
  double d_es = 1.0;
  double gamma_es = 1.0;  // directional factor towards the listener
  double gamma_ms = 1.0;  // directional factor towards the microphone
  std::complex<double> h_e = 1.0;  // HpTF
  std::complex<double> s_m = 1.0;  // recording sensitivity
  std::complex<double> h_s = 1.0;  // HRTF
  std::complex<double> latency_compensation = 1.0;
};

// K for one frequency, Eq.-style quotient with explicit E_K.
std::complex<double> calibration_value(const AnechoicPath& p, double e_k = 1.0);
// Anechoic binaural response Gamma_ES H_S / d_ES (the part carried by the BRIR).
std::complex<double> anechoic_brir_value(const AnechoicPath& p);
// Output per unit input: d_MS Gamma_ES H_S l / (H_E S_M d_ES Gamma_MS).
std::complex<double> anechoic_output_per_input(const AnechoicPath& p);

// ---------------------------------------------------------------------------
// Response measurement by comparison

struct ComparisonOptions {
  double window_seconds = 0.015;
  double smoothing_fraction = 12.0;
  double min_snr_db = 20.0;
  ResponseReference reference = ResponseReference::fs_per_pa;
  Eigen::Index n_fft = 0;  // 0 picks max(4096, next_pow2(window))
};

struct ComparisonResult {
  FrequencyResponse response;
  std::vector<FrequencyBand> unreliable_bands;  // 1/3-octave bands below min_snr_db
};

// |spectrum(dut window)| / |spectrum(reference window)|, each recording cut
// by a rectangular window centred on its own direct-sound peak, then
// fractional-octave smoothed.
ComparisonResult ingest_response_by_comparison(const SampledSignal& dut, const SampledSignal& reference,
                                               const ComparisonOptions& options = {});

}  // namespace stagesim
