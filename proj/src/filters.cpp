#include "stagesim/filters.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

#include "stagesim/error.hpp"

namespace stagesim {

Eigen::VectorXd BiquadCascade::filter(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  Eigen::VectorXd y = x;
  for (const Biquad& s : sections_) {
    double z1 = 0.0, z2 = 0.0;
    for (Eigen::Index n = 0; n < y.size(); ++n) {
      const double in = y(n);
      const double out = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * out + z2;
      z2 = s.b2 * in - s.a2 * out;
      y(n) = out;
    }
  }
  return y;
}

double BiquadCascade::magnitude(double f_hz, double fs) const {
  const std::complex<double> z1 = std::polar(1.0, -2.0 * M_PI * f_hz / fs);
  const std::complex<double> z2 = z1 * z1;
  std::complex<double> h = 1.0;
  for (const Biquad& s : sections_) h *= (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2);
  return std::abs(h);
}

BiquadCascade butterworth_bandpass(double f_lo, double f_hi, double fs, int prototype_order) {
  if (!(f_lo > 0.0 && f_hi > f_lo && f_hi < fs / 2.0))
    throw ValidationError("butterworth_bandpass: need 0 < f_lo < f_hi < fs/2");
  if (prototype_order < 1) throw ValidationError("butterworth_bandpass: order must be >= 1");
  using C = std::complex<double>;
  const double k = 2.0 * fs;
  const double w1 = k * std::tan(M_PI * f_lo / fs);
  const double w2 = k * std::tan(M_PI * f_hi / fs);
  const double w0sq = w1 * w2;
  const double bw = w2 - w1;

  // Band-pass poles from the low-pass prototype, upper half-plane only;
  // each maps through the bilinear transform to one conjugate z-pole pair.
  std::vector<C> poles;
  const int n = prototype_order;
  for (int i = 0; i < n; ++i) {
    const C p = std::polar(1.0, M_PI * (2.0 * i + n + 1) / (2.0 * n));
    const C root = std::sqrt(p * p * bw * bw - 4.0 * w0sq);
    for (const C s : {(p * bw + root) / 2.0, (p * bw - root) / 2.0}) {
      if (s.imag() > 0.0) poles.push_back(s);
    }
  }
  // Bands wider than (w2 / w1 >= 3 + 2 sqrt 2, about 2.5 octaves) give
  // real pole pairs, which this pairing does not handle.
  if (static_cast<int>(poles.size()) != n)
    throw ValidationError("butterworth_bandpass: band wider than 2.5 octaves");

  std::vector<Biquad> sections;
  for (const C s : poles) {
    const C z = (k + s) / (k - s);
    Biquad b;
    b.b0 = 1.0;
    b.b1 = 0.0;
    b.b2 = -1.0;  // zeros at z = 1 (s = 0) and z = -1 (s = inf)
    b.a1 = -2.0 * z.real();
    b.a2 = std::norm(z);
    sections.push_back(b);
  }
  BiquadCascade cascade(sections);
  const double fc = std::atan(std::sqrt(w0sq) / k) * fs / M_PI;
  const double g = std::pow(1.0 / cascade.magnitude(fc, fs), 1.0 / n);
  for (Biquad& b : sections) {
    b.b0 *= g;
    b.b2 *= g;
  }
  return BiquadCascade(std::move(sections));
}

}  // namespace stagesim
