#include "stagesim/signal.hpp"

#include <algorithm>
#include <cmath>

namespace stagesim {

SampledSignal::SampledSignal(Eigen::MatrixXd samples, double sample_rate)
    : samples_(std::move(samples)), sample_rate_(sample_rate) {
  if (!(sample_rate_ > 0.0) || !std::isfinite(sample_rate_))
    throw ValidationError("SampledSignal: sample rate must be positive");
  if (samples_.cols() != 1 && samples_.cols() != 2)
    throw ValidationError("SampledSignal: 1 or 2 channels required");
  if (!samples_.allFinite()) throw ValidationError("SampledSignal: non-finite sample");
}

const char* to_string(IrKind kind) {
  switch (kind) {
    case IrKind::raw_simulated: return "raw_simulated";
    case IrKind::adapted: return "adapted";
    case IrKind::anechoic: return "anechoic";
  }
  return "raw_simulated";
}

IrKind ir_kind_from_string(const std::string& s) {
  if (s == "raw_simulated") return IrKind::raw_simulated;
  if (s == "adapted") return IrKind::adapted;
  if (s == "anechoic") return IrKind::anechoic;
  throw ValidationError("unknown impulse response kind '" + s + "'");
}

ImpulseResponse::ImpulseResponse(SampledSignal data, IrKind kind, int source_id,
                                 int listener_id, bool direct_sound_skipped,
                                 std::optional<AdaptationRecord> adaptation)
    : data_(std::move(data)),
      kind_(kind),
      source_id_(source_id),
      listener_id_(listener_id),
      direct_sound_skipped_(direct_sound_skipped),
      adaptation_(std::move(adaptation)) {
  if (data_.frames() < 1) throw ValidationError("ImpulseResponse: empty");
  if (kind_ == IrKind::adapted && !adaptation_)
    throw ValidationError("ImpulseResponse: adapted IR without adaptation record");
}

Eigen::VectorXcd spectrum(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Index n_fft) {
  if (n_fft < x.size() || n_fft < 1) throw ValidationError("spectrum: n_fft < len(x)");
  Eigen::VectorXd padded = Eigen::VectorXd::Zero(n_fft);
  padded.head(x.size()) = x;
  Eigen::FFT<double> fft;
  Eigen::VectorXcd X(n_fft);
  fft.fwd(X.data(), padded.data(), n_fft);
  return X;
}

Eigen::VectorXd inverse_spectrum(const Eigen::Ref<const Eigen::VectorXcd>& X) {
  Eigen::FFT<double> fft;
  Eigen::VectorXcd y(X.size());
  Eigen::VectorXcd src = X;
  fft.inv(y.data(), src.data(), X.size());
  return y.real();
}

SampledSignal convolve(const SampledSignal& x, const SampledSignal& h) {
  if (x.frames() == 0 || h.frames() == 0) throw ValidationError("convolve: empty input");
  if (x.sample_rate() != h.sample_rate())
    throw ValidationError("convolve: sample-rate mismatch");
  const int channels = std::max(x.channels(), h.channels());
  Eigen::MatrixXd out(x.frames() + h.frames() - 1, channels);
  for (int c = 0; c < channels; ++c) {
    const int cx = x.channels() == 1 ? 0 : c;
    const int ch = h.channels() == 1 ? 0 : c;
    out.col(c) = convolve(x.samples().col(cx), h.samples().col(ch));
  }
  return SampledSignal(std::move(out), x.sample_rate());
}

DelayedChannels delay_channels(const Eigen::Ref<const Eigen::MatrixXd>& x, double shift_samples,
                               const FractionalDelayOptions& options) {
  if (!std::isfinite(shift_samples)) throw ValidationError("fractional_delay: non-finite shift");
  const Eigen::Index frames = x.rows();
  const Eigen::Index channels = x.cols();
  if (frames == 0) throw ValidationError("fractional_delay: empty input");

  const double rounded = std::round(shift_samples);
  const bool integer = std::abs(shift_samples - rounded) < options.integer_tolerance;

  // Full (uncropped) output occupies indices [first, first + full.rows()).
  Eigen::Index first = 0;
  Eigen::MatrixXd full;
  if (integer) {
    first = static_cast<Eigen::Index>(rounded);
    full = x;
  } else {
    const double whole = std::floor(shift_samples);
    const double frac = shift_samples - whole;
    const int hw = options.half_width;
    Eigen::VectorXd kernel(2 * hw);
    for (int k = -hw + 1; k <= hw; ++k)
      kernel(k + hw - 1) = windowed_sinc(k - frac, hw, options.kaiser_beta);
    first = static_cast<Eigen::Index>(whole) - hw + 1;
    full.resize(frames + kernel.size() - 1, channels);
    for (Eigen::Index c = 0; c < channels; ++c) full.col(c) = convolve(x.col(c), kernel);
  }

  DelayedChannels result;
  if (!options.crop_negative_time) {
    result.samples = std::move(full);
    result.first_index = first;
    return result;
  }

  const double total = full.squaredNorm();
  const Eigen::Index drop = std::clamp<Eigen::Index>(-first, 0, full.rows());
  const double dropped = full.topRows(drop).squaredNorm();
  result.dropped_energy_db = (dropped > 0.0 && total > 0.0) ? to_db_power(dropped / total) : -300.0;
  if (result.dropped_energy_db > -options.energy_loss_tolerance_db) {
    throw InfeasibleLatency("fractional_delay: advance of " + std::to_string(-shift_samples) +
                                " samples would drop energy at " +
                                std::to_string(result.dropped_energy_db) + " dB re total",
                            result.dropped_energy_db, 0.0);
  }

  const Eigen::Index lead = std::max<Eigen::Index>(first, 0);
  const Eigen::Index kept = full.rows() - drop;
  result.samples = Eigen::MatrixXd::Zero(std::max<Eigen::Index>(lead + kept, 1), channels);
  if (kept > 0) result.samples.middleRows(lead, kept) = full.bottomRows(kept);
  return result;
}

ImpulseResponse fractional_delay(const ImpulseResponse& h, double shift_seconds,
                                 const FractionalDelayOptions& options) {
  const double fs = h.sample_rate();
  FractionalDelayOptions cropped = options;
  cropped.crop_negative_time = true;
  DelayedChannels d = delay_channels(h.data().samples(), shift_seconds * fs, cropped);
  return ImpulseResponse(SampledSignal(std::move(d.samples), fs), h.kind(), h.source_id(),
                         h.listener_id(), h.direct_sound_skipped(), h.adaptation());
}

double relative_l2_error(const Eigen::Ref<const Eigen::VectorXd>& a,
                         const Eigen::Ref<const Eigen::VectorXd>& b) {
  const Eigen::Index n = std::max(a.size(), b.size());
  Eigen::VectorXd pa = Eigen::VectorXd::Zero(n), pb = Eigen::VectorXd::Zero(n);
  pa.head(a.size()) = a;
  pb.head(b.size()) = b;
  const double ref = pb.norm();
  return ref > 0.0 ? (pa - pb).norm() / ref : (pa - pb).norm();
}

}  // namespace stagesim
