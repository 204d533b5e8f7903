#pragma once

#include <vector>

#include <Eigen/Core>

namespace stagesim {

// y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]
struct Biquad {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0, a1 = 0.0, a2 = 0.0;
};

// Series of biquads run in transposed direct form II.
class BiquadCascade {
 public:
  BiquadCascade() = default;
  explicit BiquadCascade(std::vector<Biquad> sections) : sections_(std::move(sections)) {}

  const std::vector<Biquad>& sections() const { return sections_; }
  // Filters x from rest; state is not kept between calls.
  Eigen::VectorXd filter(const Eigen::Ref<const Eigen::VectorXd>& x) const;
  // |H(e^{j 2 pi f / fs})|
  double magnitude(double f_hz, double fs) const;

 private:
  std::vector<Biquad> sections_;
};

// Butterworth band-pass of order 2 * prototype_order via the bilinear
// transform with pre-warped edges; unity gain at the geometric centre.
BiquadCascade butterworth_bandpass(double f_lo, double f_hi, double fs, int prototype_order = 3);

// Octave band around a nominal centre: [centre / sqrt 2, centre * sqrt 2].
inline double octave_lo(double centre_hz) { return centre_hz / std::sqrt(2.0); }
inline double octave_hi(double centre_hz) { return centre_hz * std::sqrt(2.0); }

}  // namespace stagesim
