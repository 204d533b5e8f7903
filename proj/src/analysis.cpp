#include "stagesim/analysis.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <unsupported/Eigen/FFT>

#include "stagesim/filters.hpp"

namespace stagesim {
namespace {

constexpr double kTaperOctaves = 1.0 / 6.0;

double band_weight(double f, double lo, double hi) {
  if (f >= lo && f <= hi) return 1.0;
  if (f <= 0.0) return 0.0;
  const double oct = f < lo ? std::log2(lo / f) : std::log2(f / hi);
  if (oct >= kTaperOctaves) return 0.0;
  return 0.5 + 0.5 * std::cos(M_PI * oct / kTaperOctaves);
}

// Sum over channels of the squared (optionally octave-filtered) signal.
Eigen::VectorXd channel_energy(const ImpulseResponse& h, std::optional<double> centre) {
  Eigen::VectorXd e = Eigen::VectorXd::Zero(h.frames());
  if (!centre) {
    e = h.data().samples().rowwise().squaredNorm();
    return e;
  }
  const BiquadCascade f = butterworth_bandpass(octave_lo(*centre), octave_hi(*centre), h.sample_rate());
  for (int c = 0; c < h.channels(); ++c) e += f.filter(h.data().channel(c)).array().square().matrix();
  return e;
}

double window_energy(const Eigen::VectorXd& e, Eigen::Index onset, double fs, double a_s, double b_s) {
  const Eigen::Index i0 = onset + static_cast<Eigen::Index>(std::llround(a_s * fs));
  const Eigen::Index i1 = std::min<Eigen::Index>(e.size(), onset + static_cast<Eigen::Index>(std::llround(b_s * fs)));
  return i1 > i0 ? e.segment(i0, i1 - i0).sum() : 0.0;
}

// 10 log10(num / den), floored.
double ratio_db(double num, double den, bool& floored) {
  const double v = (num > 0.0 && den > 0.0) ? 10.0 * std::log10(num / den) : -std::numeric_limits<double>::infinity();
  floored = !(v >= kStageSupportFloorDb);
  return floored ? kStageSupportFloorDb : v;
}

double decay_time(const Eigen::VectorXd& e, Eigen::Index onset, double fs, const DecayOptions& o) {
  const Eigen::Index tail = std::max<Eigen::Index>(1, e.size() / 10);
  const double noise = e.tail(tail).mean();
  // Peak of the 10 ms running mean, so a lone direct-sound sample does not
  // count as decay range.
  const Eigen::Index w = std::max<Eigen::Index>(1, std::min<Eigen::Index>(e.size(), std::llround(0.010 * fs)));
  double run = e.head(w).sum(), peak = run;
  for (Eigen::Index i = w; i < e.size(); ++i) peak = std::max(peak, run += e(i) - e(i - w));
  peak /= w;
  if (!(peak > 0.0)) throw InsufficientSnr("reverberation_time: silent impulse response", -300.0);
  const double range = noise > 0.0 ? 10.0 * std::log10(peak / noise) : std::numeric_limits<double>::infinity();
  if (range < o.min_range_db)
    throw InsufficientSnr("reverberation_time: decay range " + std::to_string(range) + " dB below " +
                              std::to_string(o.min_range_db) + " dB",
                          range);
  const Eigen::VectorXd s = schroeder_curve_db(e.tail(e.size() - onset));
  Eigen::Index i0 = -1, i1 = -1;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (i0 < 0 && s(i) <= o.start_db) i0 = i;
    if (s(i) <= o.end_db) {
      i1 = i;
      break;
    }
  }
  if (i0 < 0 || i1 <= i0 + 1) throw InsufficientSnr("reverberation_time: decay does not reach the fit range", range);
  const Eigen::Index n = i1 - i0 + 1;
  const Eigen::ArrayXd t = Eigen::ArrayXd::LinSpaced(n, double(i0), double(i1)) / fs;
  const Eigen::ArrayXd y = s.segment(i0, n).array();
  const double tm = t.mean(), ym = y.mean();
  const double slope = ((t - tm) * (y - ym)).sum() / (t - tm).square().sum();
  if (!(slope < 0.0)) throw InsufficientSnr("reverberation_time: no decay", range);
  return -60.0 / slope;
}

}  // namespace

EnvelopeResult hilbert_envelope(const ImpulseResponse& h, double f_lo, double f_hi) {
  const double fs = h.sample_rate();
  if (!(f_lo > 0.0 && f_hi > f_lo && f_hi < fs / 2.0))
    throw ValidationError("hilbert_envelope: need 0 < f_lo < f_hi < fs/2");
  const Eigen::Index frames = h.frames();
  const Eigen::Index n = next_pow2(2 * frames);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
  for (Eigen::Index k = 1; k <= n / 2; ++k) w(k) = (k < n / 2 ? 2.0 : 1.0) * band_weight(k * fs / n, f_lo, f_hi);

  EnvelopeResult r;
  r.f_lo_hz = f_lo;
  r.f_hi_hz = f_hi;
  r.time_s = Eigen::VectorXd::LinSpaced(frames, 0.0, (frames - 1) / fs);
  r.envelope.resize(frames, h.channels());
  Eigen::FFT<double> fft;
  Eigen::VectorXd x(n);
  Eigen::VectorXcd X(n), a(n);
  for (int c = 0; c < h.channels(); ++c) {
    x.setZero();
    x.head(frames) = h.data().channel(c);
    fft.fwd(X.data(), x.data(), n);
    X.array() *= w.array();
    fft.inv(a.data(), X.data(), n);
    r.envelope.col(c) = a.head(frames).cwiseAbs();
  }
  r.envelope_db = r.envelope.unaryExpr([](double v) {
    return v > 0.0 ? std::max(kEnvelopeFloorDb, 20.0 * std::log10(v)) : kEnvelopeFloorDb;
  });
  return r;
}

void write_envelope_csv(const std::filesystem::path& path, const EnvelopeResult& e) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "time_s";
  for (Eigen::Index c = 0; c < e.envelope.cols(); ++c) out << ",envelope_db_ch" << c;
  out << '\n';
  out.precision(10);
  for (Eigen::Index i = 0; i < e.time_s.size(); ++i) {
    out << e.time_s(i);
    for (Eigen::Index c = 0; c < e.envelope.cols(); ++c) out << ',' << e.envelope_db(i, c);
    out << '\n';
  }
  if (!out) throw ValidationError("write failed for " + path.string());
}

Eigen::Index direct_sound_index(const Eigen::Ref<const Eigen::MatrixXd>& x, double threshold_db) {
  const Eigen::VectorXd mag = x.cwiseAbs().rowwise().maxCoeff();
  const double peak = mag.maxCoeff();
  if (!(peak > 0.0)) throw ValidationError("direct_sound_index: silent signal");
  const double thr = peak * from_db(threshold_db);
  for (Eigen::Index i = 0; i < mag.size(); ++i)
    if (mag(i) >= thr) return i;
  return 0;
}

Eigen::VectorXd schroeder_curve_db(const Eigen::Ref<const Eigen::VectorXd>& energy) {
  Eigen::VectorXd s(energy.size());
  double acc = 0.0;
  for (Eigen::Index i = energy.size() - 1; i >= 0; --i) s(i) = (acc += energy(i));
  if (!(acc > 0.0)) throw InsufficientSnr("schroeder_curve_db: no energy", -300.0);
  return s.unaryExpr([acc](double v) { return v > 0.0 ? 10.0 * std::log10(v / acc) : -300.0; });
}

double reverberation_time(const ImpulseResponse& h, std::optional<double> band_centre_hz, const DecayOptions& o) {
  const Eigen::Index onset = direct_sound_index(h.data().samples(), o.onset_threshold_db);
  return decay_time(channel_energy(h, band_centre_hz), onset, h.sample_rate(), o);
}

StageMetrics stage_support(const ImpulseResponse& h, const StageSupportOptions& options) {
  if (options.band_centres_hz.empty()) throw ValidationError("stage_support: no bands");
  const double fs = h.sample_rate();
  const Eigen::Index onset = direct_sound_index(h.data().samples(), options.onset_threshold_db);
  if (h.frames() < onset + static_cast<Eigen::Index>(std::llround(1.0 * fs)))
    throw ValidationError("stage_support: IR must extend 1 s past the direct sound");
  StageMetrics m;
  m.onset_s = onset / fs;
  double rt_sum = 0.0;
  int rt_count = 0;
  DecayOptions decay;
  decay.onset_threshold_db = options.onset_threshold_db;
  const Eigen::VectorXd broadband = channel_energy(h, std::nullopt);
  bool early_empty = false, late_empty = false;
  const double direct_bb = window_energy(broadband, onset, fs, 0.0, 0.010);
  ratio_db(window_energy(broadband, onset, fs, 0.020, 0.100), direct_bb, early_empty);
  ratio_db(window_energy(broadband, onset, fs, 0.100, 1.000), direct_bb, late_empty);
  for (double fc : options.band_centres_hz) {
    const Eigen::VectorXd e = channel_energy(h, fc);
    BandMetrics b;
    b.centre_hz = fc;
    const double direct = window_energy(e, onset, fs, 0.0, 0.010);
    b.st_early_db = ratio_db(window_energy(e, onset, fs, 0.020, 0.100), direct, b.st_early_floored);
    b.st_late_db = ratio_db(window_energy(e, onset, fs, 0.100, 1.000), direct, b.st_late_floored);
    // A window that is empty in the unfiltered IR only holds filter ringing.
    if (early_empty) {
      b.st_early_db = kStageSupportFloorDb;
      b.st_early_floored = true;
    }
    if (late_empty) {
      b.st_late_db = kStageSupportFloorDb;
      b.st_late_floored = true;
    }
    if (options.reverberation_time) {
      try {
        b.rt_s = decay_time(e, onset, fs, decay);
        rt_sum += *b.rt_s;
        ++rt_count;
      } catch (const InsufficientSnr&) {
      }
    }
    m.st_early_db += b.st_early_db;
    m.st_late_db += b.st_late_db;
    m.st_early_floored |= b.st_early_floored;
    m.st_late_floored |= b.st_late_floored;
    m.bands.push_back(b);
  }
  m.st_early_db /= m.bands.size();
  m.st_late_db /= m.bands.size();
  if (rt_count > 0) m.rt_s = rt_sum / rt_count;
  return m;
}

StageMetrics average_stage_metrics(const std::vector<StageMetrics>& positions) {
  if (positions.empty()) throw ValidationError("average_stage_metrics: no positions");
  StageMetrics out = positions.front();
  const std::size_t nb = out.bands.size();
  for (const StageMetrics& p : positions) {
    if (p.bands.size() != nb) throw ValidationError("average_stage_metrics: band lists differ");
    for (std::size_t i = 0; i < nb; ++i)
      if (p.bands[i].centre_hz != out.bands[i].centre_hz)
        throw ValidationError("average_stage_metrics: band lists differ");
  }
  const double np = static_cast<double>(positions.size());
  double rt_total = 0.0;
  int rt_bands = 0;
  out.st_early_db = out.st_late_db = out.onset_s = 0.0;
  out.st_early_floored = out.st_late_floored = false;
  for (std::size_t i = 0; i < nb; ++i) {
    BandMetrics& b = out.bands[i];
    b.st_early_db = b.st_late_db = 0.0;
    b.st_early_floored = b.st_late_floored = false;
    double rt = 0.0;
    int rt_n = 0;
    for (const StageMetrics& p : positions) {
      const BandMetrics& q = p.bands[i];
      b.st_early_db += q.st_early_db / np;
      b.st_late_db += q.st_late_db / np;
      b.st_early_floored |= q.st_early_floored;
      b.st_late_floored |= q.st_late_floored;
      if (q.rt_s) {
        rt += *q.rt_s;
        ++rt_n;
      }
    }
    b.rt_s = rt_n > 0 ? std::optional<double>(rt / rt_n) : std::nullopt;
    if (b.rt_s) {
      rt_total += *b.rt_s;
      ++rt_bands;
    }
    out.st_early_db += b.st_early_db / nb;
    out.st_late_db += b.st_late_db / nb;
    out.st_early_floored |= b.st_early_floored;
    out.st_late_floored |= b.st_late_floored;
  }
  for (const StageMetrics& p : positions) out.onset_s += p.onset_s / np;
  out.rt_s = rt_bands > 0 ? std::optional<double>(rt_total / rt_bands) : std::nullopt;
  return out;
}

nlohmann::json to_json(const StageMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["schema_version"] = 1;
  j["st_early_db"] = m.st_early_db;
  j["st_late_db"] = m.st_late_db;
  j["st_early_floored"] = m.st_early_floored;
  j["st_late_floored"] = m.st_late_floored;
  j["rt_s"] = opt(m.rt_s);
  j["onset_s"] = m.onset_s;
  j["floor_db"] = kStageSupportFloorDb;
  j["bands"] = nlohmann::json::array();
  for (const BandMetrics& b : m.bands)
    j["bands"].push_back({{"centre_hz", b.centre_hz},
                          {"st_early_db", b.st_early_db},
                          {"st_late_db", b.st_late_db},
                          {"st_early_floored", b.st_early_floored},
                          {"st_late_floored", b.st_late_floored},
                          {"rt_s", opt(b.rt_s)}});
  return j;
}

nlohmann::json to_json(const EnvelopeResult& e) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["f_lo_hz"] = e.f_lo_hz;
  j["f_hi_hz"] = e.f_hi_hz;
  j["frames"] = e.time_s.size();
  j["channels"] = e.envelope.cols();
  j["peak"] = e.envelope.size() ? e.envelope.maxCoeff() : 0.0;
  j["peak_db"] = e.envelope_db.size() ? e.envelope_db.maxCoeff() : kEnvelopeFloorDb;
  return j;
}

}  // namespace stagesim
