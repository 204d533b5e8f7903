#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace stagesim {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments, malformed files, schema violations.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A latency/distance compensation would crop a significant part of an IR.
class InfeasibleLatency : public Error {
 public:
  InfeasibleLatency(const std::string& what, double dropped_energy_db,
                    double min_feasible_distance_m)
      : Error(what),
        dropped_energy_db_(dropped_energy_db),
        min_feasible_distance_m_(min_feasible_distance_m) {}

  // Energy that would be discarded, in dB relative to the total.
  double dropped_energy_db() const { return dropped_energy_db_; }
  // c * t_l; zero when the caller did not know the latency.
  double min_feasible_distance_m() const { return min_feasible_distance_m_; }

 private:
  double dropped_energy_db_;
  double min_feasible_distance_m_;
};

struct FrequencyBand {
  double lo_hz = 0.0;
  double hi_hz = 0.0;
};

// A response was too small to invert over a band wider than the allowed width.
class UnreliableCalibration : public Error {
 public:
  UnreliableCalibration(const std::string& what, std::vector<FrequencyBand> bands)
      : Error(what), bands_(std::move(bands)) {}
  const std::vector<FrequencyBand>& bands() const { return bands_; }

 private:
  std::vector<FrequencyBand> bands_;
};

// A decay curve or correlation did not rise far enough above the noise.
class InsufficientSnr : public Error {
 public:
  InsufficientSnr(const std::string& what, double measured_db)
      : Error(what), measured_db_(measured_db) {}
  double measured_db() const { return measured_db_; }

 private:
  double measured_db_;
};

}  // namespace stagesim
