#pragma once

#include <cmath>
#include <complex>
#include <optional>
#include <string>

#include <Eigen/Core>

#include "stagesim/error.hpp"
#include "stagesim/fft.hpp"

namespace stagesim {

// Sampled one- or two-channel signal. Samples are stored frames x channels in
// full-scale digital units.
class SampledSignal {
 public:
  SampledSignal() = default;
  SampledSignal(Eigen::MatrixXd samples, double sample_rate);

  static SampledSignal mono(const Eigen::VectorXd& samples, double sample_rate) {
    return SampledSignal(Eigen::MatrixXd(samples), sample_rate);
  }

  Eigen::Index frames() const { return samples_.rows(); }
  int channels() const { return static_cast<int>(samples_.cols()); }
  double sample_rate() const { return sample_rate_; }
  double duration() const { return frames() / sample_rate_; }

  const Eigen::MatrixXd& samples() const { return samples_; }
  Eigen::VectorXd channel(int c) const { return samples_.col(c); }
  double energy() const { return samples_.squaredNorm(); }

 private:
  Eigen::MatrixXd samples_;
  double sample_rate_ = 0.0;
};

enum class IrKind { raw_simulated, adapted, anechoic };

const char* to_string(IrKind kind);
IrKind ir_kind_from_string(const std::string& s);

// What brir-adapt did to produce an adapted IR.
struct AdaptationRecord {
  double shift_seconds = 0.0;       // net shift of the output relative to h'
  double advance_samples = 0.0;     // fractional-delay advance that was applied
  std::string calibration_id;       // empty for identity calibration
  int bulk_delay_samples = 0;       // bulk delay of the calibration FIR
  bool bulk_delay_compensated = true;
  double dropped_energy_db = -300.0;
  double energy_loss_tolerance_db = 60.0;
};

class ImpulseResponse {
 public:
  ImpulseResponse() = default;
  ImpulseResponse(SampledSignal data, IrKind kind, int source_id = 0,
                  int listener_id = 0, bool direct_sound_skipped = false,
                  std::optional<AdaptationRecord> adaptation = std::nullopt);

  const SampledSignal& data() const { return data_; }
  IrKind kind() const { return kind_; }
  int source_id() const { return source_id_; }
  int listener_id() const { return listener_id_; }
  bool direct_sound_skipped() const { return direct_sound_skipped_; }
  const std::optional<AdaptationRecord>& adaptation() const { return adaptation_; }

  Eigen::Index frames() const { return data_.frames(); }
  int channels() const { return data_.channels(); }
  double sample_rate() const { return data_.sample_rate(); }

 private:
  SampledSignal data_;
  IrKind kind_ = IrKind::raw_simulated;
  int source_id_ = 0;
  int listener_id_ = 0;
  bool direct_sound_skipped_ = false;
  std::optional<AdaptationRecord> adaptation_;
};

// ---------------------------------------------------------------------------
// Spectra

// Full n_fft-point forward DFT of x (zero padded). Requires n_fft >= len(x).
Eigen::VectorXcd spectrum(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Index n_fft);

// Real part of the inverse DFT; inverse_spectrum(spectrum(x, n)) == x padded to n.
Eigen::VectorXd inverse_spectrum(const Eigen::Ref<const Eigen::VectorXcd>& X);

// ---------------------------------------------------------------------------
// Convolution

// Linear convolution via zero-padded FFT; output length len(x)+len(h)-1.
template <typename DerivedX, typename DerivedH>
VectorX<typename DerivedX::Scalar> convolve(const Eigen::MatrixBase<DerivedX>& x,
                                            const Eigen::MatrixBase<DerivedH>& h) {
  using Scalar = typename DerivedX::Scalar;
  const Eigen::Index nx = x.size();
  const Eigen::Index nh = h.size();
  if (nx == 0 || nh == 0) throw ValidationError("convolve: empty input");
  const Eigen::Index n_out = nx + nh - 1;
  const Eigen::Index n_fft = std::max<Eigen::Index>(4, next_pow2(n_out));

  RealFft<Scalar> fft(n_fft);
  VectorX<Scalar> a = VectorX<Scalar>::Zero(n_fft);
  VectorX<Scalar> b = VectorX<Scalar>::Zero(n_fft);
  a.head(nx) = x.template cast<Scalar>();
  b.head(nh) = h.template cast<Scalar>();
  ComplexVectorX<Scalar> A(fft.bins()), B(fft.bins());
  fft.forward(a.data(), A.data());
  fft.forward(b.data(), B.data());
  A.array() *= B.array();
  fft.inverse(A.data(), a.data());
  return a.head(n_out);
}

// Channel-wise convolution of signals. A mono x against a stereo h (or the
// reverse) yields stereo. Sample rates must match exactly.
SampledSignal convolve(const SampledSignal& x, const SampledSignal& h);

// ---------------------------------------------------------------------------
// Band-limited fractional delay

struct FractionalDelayOptions {
  int half_width = 64;                 // taps per side of the windowed sinc
  double kaiser_beta = 0.1102 * (90.0 - 8.7);
  double energy_loss_tolerance_db = 60.0;  // max energy dropped by an advance
  double integer_tolerance = 1e-9;     // |frac| below this is an exact shift
  // When false the output keeps every kernel tap, including those before
  // t = 0, and first_index tells where row 0 sits. Nothing is dropped.
  bool crop_negative_time = true;
};

inline double kaiser_window(double t, double half_width, double beta) {
  const double r = t / half_width;
  if (std::abs(r) > 1.0) return 0.0;
  return std::cyl_bessel_i(0.0, beta * std::sqrt(1.0 - r * r)) / std::cyl_bessel_i(0.0, beta);
}

// Kaiser-windowed sinc evaluated at t samples.
inline double windowed_sinc(double t, double half_width, double beta) {
  const double s = (t == 0.0) ? 1.0 : std::sin(M_PI * t) / (M_PI * t);
  return s * kaiser_window(t, half_width, beta);
}

struct DelayedChannels {
  Eigen::MatrixXd samples;
  double dropped_energy_db = -300.0;  // energy advanced past t = 0, re total
  Eigen::Index first_index = 0;        // input-time index of output row 0
};

// Shift every column by shift_samples (positive = later). Output length is
// frames + floor(shift) (+ half_width for fractional shifts), clamped at 0 from
// the left. Throws InfeasibleLatency when the dropped energy exceeds
// -energy_loss_tolerance_db re total.
DelayedChannels delay_channels(const Eigen::Ref<const Eigen::MatrixXd>& x, double shift_samples,
                               const FractionalDelayOptions& options = {});

// Signal-level form: shift given in seconds, metadata preserved.
ImpulseResponse fractional_delay(const ImpulseResponse& h, double shift_seconds,
                                 const FractionalDelayOptions& options = {});

// Helpers shared across modules.
inline double to_db_power(double ratio) { return 10.0 * std::log10(ratio); }
inline double to_db(double amplitude) { return 20.0 * std::log10(amplitude); }
inline double from_db(double db) { return std::pow(10.0, db / 20.0); }

// ||a - b|| / ||b||, the shorter vector zero padded to the longer length.
double relative_l2_error(const Eigen::Ref<const Eigen::VectorXd>& a,
                         const Eigen::Ref<const Eigen::VectorXd>& b);

}  // namespace stagesim
