#include "stagesim/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "json_io.hpp"

namespace stagesim {
namespace {

bool is_pow2(Eigen::Index n) { return n >= 2 && (n & (n - 1)) == 0; }

Eigen::VectorXd bin_frequencies(Eigen::Index n_fft, double fs) {
  return Eigen::VectorXd::LinSpaced(n_fft / 2 + 1, 0.0, fs / 2.0);
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return m;
}

// Magnitude on the bins, floored at floor_db below its in-band peak. Runs
// under the floor wider than the allowed width are appended to `bands`.
Eigen::VectorXd floored_magnitude(const FrequencyResponse& response, const Eigen::VectorXd& f,
                                  const SynthesisOptions& o, std::vector<FrequencyBand>& bands,
                                  const char* what) {
  const FrequencyResponse src = o.smoothing_fraction > 0.0 ? response.smoothed(o.smoothing_fraction) : response;
  Eigen::VectorXd mag = src.magnitude_at(f);
  double peak = 0.0;
  for (Eigen::Index i = 0; i < f.size(); ++i)
    if (f(i) >= o.band_lo_hz && f(i) <= o.band_hi_hz) peak = std::max(peak, mag(i));
  if (!(peak > 0.0)) throw ValidationError(std::string(what) + " is zero over the calibration band");
  const double floor = peak * from_db(o.floor_db);

  Eigen::Index run_start = -1;
  auto close_run = [&](Eigen::Index end) {
    if (run_start < 0) return;
    const double lo = f(run_start), hi = f(end);
    if (std::log2(hi / lo) > o.max_unreliable_octaves) bands.push_back({lo, hi});
    run_start = -1;
  };
  for (Eigen::Index i = 0; i < f.size(); ++i) {
    const bool in_band = f(i) >= o.band_lo_hz && f(i) <= o.band_hi_hz;
    if (in_band && mag(i) < floor) {
      if (run_start < 0) run_start = i;
    } else if (run_start >= 0) {
      close_run(i - 1);
    }
  }
  if (run_start >= 0) close_run(f.size() - 1);
  return mag.cwiseMax(floor);
}

// Hold the band-edge gain outside [lo, hi] and cap at median * cap.
void shape_out_of_band(Eigen::VectorXd& k, const Eigen::VectorXd& f, const SynthesisOptions& o) {
  Eigen::Index first = -1, last = -1;
  std::vector<double> in_band;
  for (Eigen::Index i = 0; i < f.size(); ++i) {
    if (f(i) >= o.band_lo_hz && f(i) <= o.band_hi_hz) {
      if (first < 0) first = i;
      last = i;
      in_band.push_back(k(i));
    }
  }
  if (first < 0) throw ValidationError("calibration band contains no FIR bins");
  for (Eigen::Index i = 0; i < first; ++i) k(i) = k(first);
  for (Eigen::Index i = last + 1; i < f.size(); ++i) k(i) = k(last);
  const double cap = median(in_band) * from_db(o.cap_db);
  k = k.cwiseMin(cap);
}

CalibrationFilter realize(std::string id, int source, int listener, Eigen::VectorXd k,
                          const Eigen::VectorXd& f, const SynthesisOptions& o) {
  CalibrationFilter out;
  out.id = std::move(id);
  out.source = source;
  out.listener = listener;
  out.sample_rate = o.sample_rate;
  out.options = o;
  out.fir = magnitude_to_fir(k, o.phase);
  out.bulk_delay_samples = o.phase == FirPhase::linear ? static_cast<int>(o.fir_length / 2) : 0;
  out.response = FrequencyResponse::from_magnitude(
      f, k, ResponseReference::dimensionless,
      o.phase == FirPhase::linear ? PhaseKind::zero_phase : PhaseKind::minimum_phase);
  return out;
}

void check_options(const SynthesisOptions& o) {
  if (!is_pow2(o.fir_length)) throw ValidationError("fir_length must be a power of two");
  if (!(o.sample_rate > 0.0)) throw ValidationError("sample_rate must be positive");
  if (!(o.band_lo_hz > 0.0 && o.band_hi_hz > o.band_lo_hz))
    throw ValidationError("calibration band must satisfy 0 < lo < hi");
}

}  // namespace

double CalibrationFilter::broadband_offset_db() const {
  std::vector<double> v;
  const Eigen::VectorXd db = response.magnitude_db();
  for (Eigen::Index i = 0; i < response.size(); ++i) {
    const double f = response.grid()(i);
    if (f >= options.band_lo_hz && f <= options.band_hi_hz) v.push_back(db(i));
  }
  if (v.empty()) return db.size() ? db(0) : 0.0;
  return median(std::move(v));
}

double CalibrationFilter::fir_max_deviation_db() const {
  const Eigen::Index n = 4 * next_pow2(std::max<Eigen::Index>(fir.size(), 2));
  const Eigen::VectorXcd X = spectrum(fir, n);
  double worst = 0.0;
  for (Eigen::Index i = 0; i <= n / 2; ++i) {
    const double f = i * sample_rate / static_cast<double>(n);
    if (f < options.band_lo_hz || f > options.band_hi_hz) continue;
    const double got = to_db(std::max(std::abs(X(i)), 1e-300));
    const double want = to_db(std::max(response.magnitude_at(f), 1e-300));
    worst = std::max(worst, std::abs(got - want));
  }
  return worst;
}

ImpulseResponse CalibrationFilter::as_impulse_response() const {
  return ImpulseResponse(SampledSignal::mono(fir, sample_rate), IrKind::anechoic, source, listener);
}

Eigen::VectorXd magnitude_to_fir(const Eigen::Ref<const Eigen::VectorXd>& bin_magnitude, FirPhase phase) {
  const Eigen::Index bins = bin_magnitude.size();
  const Eigen::Index n = 2 * (bins - 1);
  if (!is_pow2(n)) throw ValidationError("magnitude_to_fir: bin count must be 2^k + 1");
  RealFft<double> fft(n);
  Eigen::VectorXd time(n);

  if (phase == FirPhase::linear) {
    const Eigen::VectorXcd spec = bin_magnitude.cast<std::complex<double>>();
    fft.inverse(spec.data(), time.data());
    Eigen::VectorXd fir(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double hann = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n));
      fir(i) = time((i - n / 2 + n) % n) * hann;
    }
    return fir;
  }

  // Homomorphic minimum phase: fold the real cepstrum onto positive quefrency.
  Eigen::VectorXcd log_mag =
      bin_magnitude.unaryExpr([](double m) { return std::log(std::max(m, 1e-12)); }).cast<std::complex<double>>();
  fft.inverse(log_mag.data(), time.data());
  Eigen::VectorXd folded = Eigen::VectorXd::Zero(n);
  folded(0) = time(0);
  for (Eigen::Index i = 1; i < n / 2; ++i) folded(i) = 2.0 * time(i);
  folded(n / 2) = time(n / 2);
  Eigen::VectorXcd spec(bins);
  fft.forward(folded.data(), spec.data());
  spec = spec.array().exp();
  fft.inverse(spec.data(), time.data());
  // Fade the last eighth to suppress cepstral aliasing at the wrap point.
  const Eigen::Index fade = n / 8;
  for (Eigen::Index i = 0; i < fade; ++i)
    time(n - fade + i) *= 0.5 + 0.5 * std::cos(M_PI * static_cast<double>(i + 1) / static_cast<double>(fade));
  return time;
}

CalibrationFilter synthesize_k(const CalibrationSpec& spec, const SynthesisOptions& options) {
  check_options(options);
  if (!(spec.d_ms > 0.0) || !(spec.d_es > 0.0))
    throw ValidationError("calibration distances must be positive");
  const Eigen::VectorXd f = bin_frequencies(options.fir_length, options.sample_rate);

  std::vector<FrequencyBand> unreliable;
  const Eigen::VectorXd s_m = floored_magnitude(spec.mic_response, f, options, unreliable, "mic response");
  const Eigen::VectorXd h_e =
      floored_magnitude(spec.headphone_response, f, options, unreliable, "headphone response");
  const Eigen::VectorXd gamma = spec.gamma_mic.magnitude_at(f);
  const Eigen::VectorXd e_k = spec.e_k.magnitude_at(f);
  if ((gamma.array() <= 0.0).any()) throw ValidationError("gamma_mic must be positive");

  Eigen::VectorXd k = (spec.d_ms * e_k.array() / (h_e.array() * s_m.array() * gamma.array())).matrix();
  shape_out_of_band(k, f, options);

  CalibrationFilter out = realize(spec.id, spec.source, spec.listener, std::move(k), f, options);
  out.unreliable_bands = std::move(unreliable);
  out.d_ms = spec.d_ms;
  out.d_es = spec.d_es;
  return out;
}

CalibrationFilter identity_calibration(double sample_rate) {
  CalibrationFilter out;
  out.id = "";
  out.sample_rate = sample_rate;
  out.options.sample_rate = sample_rate;
  out.fir = Eigen::VectorXd::Ones(1);
  out.bulk_delay_samples = 0;
  Eigen::VectorXd grid(2);
  grid << 0.0, sample_rate / 2.0;
  out.response = FrequencyResponse::from_magnitude(grid, Eigen::VectorXd::Ones(2), ResponseReference::dimensionless);
  return out;
}

CalibrationFilter invert(const CalibrationFilter& k) {
  if (k.fir.size() == 1) {
    CalibrationFilter out = k;
    out.id = k.id.empty() ? "" : k.id + "^-1";
    out.fir(0) = 1.0 / k.fir(0);
    out.response = FrequencyResponse::from_magnitude(k.response.grid(), k.response.magnitude().cwiseInverse(),
                                                     ResponseReference::dimensionless);
    return out;
  }
  const Eigen::VectorXd inv = k.response.magnitude().cwiseInverse();
  CalibrationFilter out = realize(k.id + "^-1", k.source, k.listener, inv, k.response.grid(), k.options);
  out.d_ms = k.d_ms;
  out.d_es = k.d_es;
  return out;
}

SampledSignal apply_response(const SampledSignal& x, const FrequencyResponse& response,
                             const SynthesisOptions& options) {
  check_options(options);
  const Eigen::VectorXd f = bin_frequencies(options.fir_length, options.sample_rate);
  const Eigen::VectorXd fir = magnitude_to_fir(response.magnitude_at(f), options.phase);
  const Eigen::Index bulk = options.phase == FirPhase::linear ? options.fir_length / 2 : 0;
  Eigen::MatrixXd out(x.frames(), x.channels());
  for (int c = 0; c < x.channels(); ++c)
    out.col(c) = convolve(x.samples().col(c), fir).segment(bulk, x.frames());
  return SampledSignal(std::move(out), x.sample_rate());
}

SampledSignal apply_inverse_headphone(const SampledSignal& s_o, const FrequencyResponse& h_e,
                                      const SynthesisOptions& options) {
  if (s_o.sample_rate() != options.sample_rate)
    throw ValidationError("apply_inverse_headphone: sample rate differs from synthesis options");
  CalibrationSpec spec;
  spec.id = "inverse_headphone";
  spec.headphone_response = h_e;
  const CalibrationFilter k = synthesize_k(spec, options);
  if (!k.reliable())
    throw UnreliableCalibration("headphone response cannot be inverted over the whole band", k.unreliable_bands);
  Eigen::MatrixXd out(s_o.frames(), s_o.channels());
  for (int c = 0; c < s_o.channels(); ++c)
    out.col(c) = convolve(s_o.samples().col(c), k.fir).segment(k.bulk_delay_samples, s_o.frames());
  return SampledSignal(std::move(out), s_o.sample_rate());
}

double distance_error_effect(double r1, double r2) {
  if (!(r2 > -1.0)) throw ValidationError("distance_error_effect: R2 must exceed -1");
  return (1.0 + r1) / (1.0 + r2);
}

Eigen::MatrixXd distance_error_grid_db(const Eigen::Ref<const Eigen::VectorXd>& r1,
                                       const Eigen::Ref<const Eigen::VectorXd>& r2) {
  Eigen::MatrixXd out(r1.size(), r2.size());
  for (Eigen::Index i = 0; i < r1.size(); ++i)
    for (Eigen::Index j = 0; j < r2.size(); ++j) out(i, j) = distance_error_effect_db(r1(i), r2(j));
  return out;
}

double free_field_pressure_oracle(double power_w, double q, double d, double rho, double c) {
  if (!(power_w > 0.0 && q > 0.0 && d > 0.0 && rho > 0.0 && c > 0.0))
    throw ValidationError("free_field_pressure_oracle: inputs must be positive");
  return rho * c * power_w * q / (4.0 * M_PI * d * d);
}

std::complex<double> calibration_value(const AnechoicPath& p, double e_k) {
  return p.d_ms * e_k / (p.h_e * p.s_m * p.gamma_ms);
}

std::complex<double> anechoic_brir_value(const AnechoicPath& p) { return p.gamma_es * p.h_s / p.d_es; }

std::complex<double> anechoic_output_per_input(const AnechoicPath& p) {
  return p.d_ms * p.gamma_es * p.h_s * p.latency_compensation / (p.h_e * p.s_m * p.d_es * p.gamma_ms);
}

ComparisonResult ingest_response_by_comparison(const SampledSignal& dut, const SampledSignal& reference,
                                               const ComparisonOptions& options) {
  if (dut.sample_rate() != reference.sample_rate())
    throw ValidationError("ingest_response_by_comparison: sample-rate mismatch");
  if (dut.frames() == 0 || reference.frames() == 0)
    throw ValidationError("ingest_response_by_comparison: empty recording");
  const double fs = reference.sample_rate();
  const Eigen::Index window = std::max<Eigen::Index>(1, std::lround(options.window_seconds * fs));
  const Eigen::Index n_fft = options.n_fft > 0 ? options.n_fft : std::max<Eigen::Index>(4096, next_pow2(window));
  if (n_fft < window) throw ValidationError("ingest_response_by_comparison: n_fft shorter than window");

  struct Cut {
    Eigen::VectorXd power;        // |X_k|^2 for k = 1..n/2
    Eigen::VectorXd noise_power;  // empty when no noise segment is available
  };
  auto cut = [&](const SampledSignal& s) {
    const Eigen::VectorXd x = s.channel(0);
    Eigen::Index peak;
    x.cwiseAbs().maxCoeff(&peak);
    const Eigen::Index len = std::min(window, x.size());
    const Eigen::Index start = std::clamp<Eigen::Index>(peak - window / 2, 0, x.size() - len);
    Cut c;
    c.power = spectrum(x.segment(start, len), n_fft).segment(1, n_fft / 2).cwiseAbs2();
    if (x.size() - window >= start + len) {
      c.noise_power = spectrum(x.tail(window), n_fft).segment(1, n_fft / 2).cwiseAbs2();
    }
    return c;
  };
  const Cut d = cut(dut);
  const Cut r = cut(reference);
  const Eigen::VectorXd f = Eigen::VectorXd::LinSpaced(n_fft / 2, fs / n_fft, fs / 2.0);

  ComparisonResult out;
  // SNR per third-octave band on the raw spectra.
  for (int k = -16; k <= 13; ++k) {
    const double fc = 1000.0 * std::pow(2.0, k / 3.0);
    const double lo = fc / std::pow(2.0, 1.0 / 6.0), hi = fc * std::pow(2.0, 1.0 / 6.0);
    if (hi > fs / 2.0 || lo < fs / n_fft) continue;
    auto band_snr = [&](const Cut& c) {
      if (c.noise_power.size() == 0) return 1e300;
      double sig = 0.0, noise = 0.0;
      for (Eigen::Index i = 0; i < f.size(); ++i)
        if (f(i) >= lo && f(i) < hi) {
          sig += c.power(i);
          noise += c.noise_power(i);
        }
      if (noise <= 0.0) return 1e300;
      return to_db_power(sig / noise);
    };
    if (std::min(band_snr(d), band_snr(r)) < options.min_snr_db) out.unreliable_bands.push_back({lo, hi});
  }

  const ResponseReference dim = ResponseReference::dimensionless;
  Eigen::VectorXd dm = d.power.cwiseSqrt(), rm = r.power.cwiseSqrt();
  if (options.smoothing_fraction > 0.0) {
    dm = FrequencyResponse::from_magnitude(f, dm, dim).smoothed(options.smoothing_fraction).magnitude();
    rm = FrequencyResponse::from_magnitude(f, rm, dim).smoothed(options.smoothing_fraction).magnitude();
  }
  const double eps = 1e-15 * rm.maxCoeff();
  const Eigen::VectorXd ratio = dm.array() / rm.array().max(std::max(eps, 1e-300));
  out.response = FrequencyResponse::from_magnitude(f, ratio, options.reference, PhaseKind::zero_phase);
  return out;
}

namespace {

SynthesisOptions parse_synthesis_options(const nlohmann::json& jo, double sample_rate,
                                         const std::filesystem::path& where) {
  SynthesisOptions o;
  o.sample_rate = sample_rate;
  o.fir_length = jo.value("fir_length", o.fir_length);
  o.floor_db = jo.value("floor_db", o.floor_db);
  o.band_lo_hz = jo.value("band_lo_hz", o.band_lo_hz);
  o.band_hi_hz = jo.value("band_hi_hz", o.band_hi_hz);
  o.cap_db = jo.value("cap_db", o.cap_db);
  o.smoothing_fraction = jo.value("smoothing_fraction", o.smoothing_fraction);
  o.max_unreliable_octaves = jo.value("max_unreliable_octaves", o.max_unreliable_octaves);
  const std::string phase = jo.value("phase", "linear");
  if (phase == "linear")
    o.phase = FirPhase::linear;
  else if (phase == "minimum")
    o.phase = FirPhase::minimum;
  else
    throw ValidationError(where.string() + ": unknown phase " + phase);
  return o;
}

}  // namespace

void write_calibration_json(const std::filesystem::path& path, const CalibrationFilter& k) {
  const SynthesisOptions& o = k.options;
  nlohmann::json j;
  j["schema_version"] = 1;
  j["id"] = k.id;
  j["source"] = k.source;
  j["listener"] = k.listener;
  j["sample_rate"] = k.sample_rate;
  j["bulk_delay_samples"] = k.bulk_delay_samples;
  j["d_ms"] = k.d_ms;
  j["d_es"] = k.d_es;
  j["options"] = {{"fir_length", o.fir_length},
                  {"floor_db", o.floor_db},
                  {"band_lo_hz", o.band_lo_hz},
                  {"band_hi_hz", o.band_hi_hz},
                  {"cap_db", o.cap_db},
                  {"smoothing_fraction", o.smoothing_fraction},
                  {"max_unreliable_octaves", o.max_unreliable_octaves},
                  {"phase", o.phase == FirPhase::linear ? "linear" : "minimum"}};
  j["unreliable_bands"] = nlohmann::json::array();
  for (const FrequencyBand& b : k.unreliable_bands)
    j["unreliable_bands"].push_back({{"lo_hz", b.lo_hz}, {"hi_hz", b.hi_hz}});
  j["response"] = {{"frequency_hz", detail::to_std(k.response.grid())},
                   {"magnitude", detail::to_std(k.response.magnitude())}};
  j["fir"] = detail::to_std(k.fir);
  detail::save_json(path, j, "calibration file");
}

CalibrationFilter read_calibration_json(const std::filesystem::path& path) {
  const nlohmann::json j = detail::load_json(path, "calibration file");
  detail::require_schema(j, 1, path.string());
  try {
    CalibrationFilter k;
    k.id = j.value("id", "");
    k.source = j.value("source", 1);
    k.listener = j.value("listener", 1);
    k.sample_rate = j.at("sample_rate").get<double>();
    k.bulk_delay_samples = j.value("bulk_delay_samples", 0);
    k.d_ms = j.value("d_ms", 1.0);
    k.d_es = j.value("d_es", 1.0);
    k.options = parse_synthesis_options(j.value("options", nlohmann::json::object()), k.sample_rate, path);
    const SynthesisOptions& o = k.options;
    for (const auto& b : j.value("unreliable_bands", nlohmann::json::array()))
      k.unreliable_bands.push_back({b.at("lo_hz").get<double>(), b.at("hi_hz").get<double>()});
    const Eigen::VectorXd f = detail::to_eigen(j.at("response").at("frequency_hz"));
    const Eigen::VectorXd m = detail::to_eigen(j.at("response").at("magnitude"));
    if (f.size() != m.size() || f.size() < 2)
      throw ValidationError(path.string() + ": response grid and magnitude differ in length");
    k.response = FrequencyResponse::from_magnitude(
        f, m, ResponseReference::dimensionless,
        o.phase == FirPhase::linear ? PhaseKind::zero_phase : PhaseKind::minimum_phase);
    k.fir = detail::to_eigen(j.at("fir"));
    if (k.fir.size() == 0 || !k.fir.allFinite()) throw ValidationError(path.string() + ": bad fir");
    if (!(k.sample_rate > 0.0)) throw ValidationError(path.string() + ": sample_rate must be positive");
    return k;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::vector<CalibrationItem> read_calibration_manifest(const std::filesystem::path& path) {
  const nlohmann::json j = detail::load_json(path, "calibration manifest");
  detail::require_schema(j, 1, path.string());
  const std::filesystem::path base = path.parent_path();
  auto response = [&](const nlohmann::json& it, const char* key, FrequencyResponse fallback) {
    if (!it.contains(key) || it.at(key).is_null()) return fallback;
    const std::filesystem::path p = base / it.at(key).get<std::string>();
    if (!std::filesystem::exists(p)) throw ValidationError(path.string() + ": missing response file " + p.string());
    return read_response_csv(p);
  };
  std::vector<CalibrationItem> items;
  try {
    const double fs = j.value("sample_rate", 44100.0);
    const nlohmann::json defaults = j.value("options", nlohmann::json::object());
    for (const auto& it : j.at("items")) {
      CalibrationItem item;
      CalibrationSpec& s = item.spec;
      s.source = it.at("source").get<int>();
      s.listener = it.at("listener").get<int>();
      s.id = it.value("id", "k_" + std::to_string(s.source) + "_" + std::to_string(s.listener));
      s.d_ms = it.at("d_ms_m").get<double>();
      s.d_es = it.value("d_es_m", 1.0);
      s.c = it.value("c", s.c);
      s.rho = it.value("rho", s.rho);
      s.mic_response = response(it, "mic_response", s.mic_response);
      s.headphone_response = response(it, "headphone_response", s.headphone_response);
      s.gamma_mic = response(it, "gamma_mic", s.gamma_mic);
      s.e_k = response(it, "e_k", s.e_k);
      nlohmann::json opts = defaults;
      if (it.contains("options")) opts.update(it.at("options"));
      item.options = parse_synthesis_options(opts, it.value("sample_rate", fs), path);
      item.out = base / it.value("out", s.id + ".json");
      items.push_back(std::move(item));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return items;
}

}  // namespace stagesim
