#pragma once

// Test inputs shared by several suites: response curves and analytic pulses.

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "stagesim/frequency_response.hpp"

namespace fixture {

using stagesim::FrequencyResponse;
using stagesim::ResponseReference;

inline Eigen::VectorXd log_grid(int n = 800) {
  Eigen::VectorXd g(n);
  for (int i = 0; i < n; ++i) g(i) = 10.0 * std::pow(2200.0, double(i) / (n - 1));  // 10 Hz .. 22 kHz
  return g;
}

inline FrequencyResponse ripple_response(double amplitude_db, double period_octaves, ResponseReference ref) {
  const Eigen::VectorXd g = log_grid();
  Eigen::VectorXd db(g.size());
  for (Eigen::Index i = 0; i < g.size(); ++i)
    db(i) = amplitude_db * std::sin(2.0 * M_PI * std::log2(g(i) / 50.0) / period_octaves);
  return FrequencyResponse::from_magnitude_db(g, db, ref);
}

// Headphone-like curve: within 0.1 dB of flat below 500 Hz, +-amplitude
// ripple with a one-octave period above 2 kHz.
inline FrequencyResponse hptf_like(double amplitude_db) {
  const Eigen::VectorXd g = log_grid();
  Eigen::VectorXd db(g.size());
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    double s = std::clamp(std::log2(g(i) / 500.0) / 2.0, 0.0, 1.0);
    s = 0.5 - 0.5 * std::cos(M_PI * s);
    db(i) = amplitude_db * s * std::sin(2.0 * M_PI * std::log2(g(i) / 1000.0));
  }
  return FrequencyResponse::from_magnitude_db(g, db, ResponseReference::pa_per_fs);
}

// Kaiser-windowed lowpass pulse centred at t0 (fractional samples allowed),
// cutoff `fraction` of Nyquist, evaluated in closed form at integer n.
inline Eigen::VectorXd sinc_pulse(Eigen::Index n, double t0, double fraction = 0.8, double half_width = 48.0,
                                  double beta = 8.0) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  const double i0b = std::cyl_bessel_i(0.0, beta);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = i - t0;
    if (std::abs(t) >= half_width) continue;
    const double a = fraction * t;
    const double s = a == 0.0 ? 1.0 : std::sin(M_PI * a) / (M_PI * a);
    const double r = t / half_width;
    x(i) = fraction * s * std::cyl_bessel_i(0.0, beta * std::sqrt(1.0 - r * r)) / i0b;
  }
  return x;
}

}  // namespace fixture
