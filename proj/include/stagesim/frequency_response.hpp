#pragma once

#include <complex>
#include <filesystem>
#include <string>

#include <Eigen/Core>

namespace stagesim {

// What one unit of the response means.
enum class ResponseReference {
  fs_per_pa,       // digital full scale per pascal (recording chain, S_M)
  pa_per_fs,       // pascal per digital full scale (playback chain, H_E)
  db_attenuation,  // insertion loss; stored as a linear gain <= 1
  dimensionless,   // ratios such as K, Gamma or E_K
};

enum class PhaseKind { complex, zero_phase, minimum_phase };

const char* to_string(ResponseReference ref);
ResponseReference response_reference_from_string(const std::string& s);
const char* to_string(PhaseKind kind);

// Complex (or magnitude-only) response sampled on an ascending frequency grid.
class FrequencyResponse {
 public:
  FrequencyResponse() = default;
  FrequencyResponse(Eigen::VectorXd grid_hz, Eigen::VectorXcd values, ResponseReference reference,
                    PhaseKind phase = PhaseKind::complex);

  static FrequencyResponse from_magnitude(Eigen::VectorXd grid_hz, const Eigen::VectorXd& magnitude,
                                          ResponseReference reference,
                                          PhaseKind phase = PhaseKind::zero_phase);
  static FrequencyResponse from_magnitude_db(Eigen::VectorXd grid_hz, const Eigen::VectorXd& db,
                                             ResponseReference reference,
                                             PhaseKind phase = PhaseKind::zero_phase);
  // Frequency-independent response covering 1 Hz .. 100 kHz.
  static FrequencyResponse flat(double value, ResponseReference reference = ResponseReference::dimensionless);

  const Eigen::VectorXd& grid() const { return grid_; }
  const Eigen::VectorXcd& values() const { return values_; }
  ResponseReference reference() const { return reference_; }
  PhaseKind phase() const { return phase_; }
  bool magnitude_only() const { return phase_ != PhaseKind::complex; }
  Eigen::Index size() const { return grid_.size(); }

  Eigen::VectorXd magnitude() const { return values_.cwiseAbs(); }
  Eigen::VectorXd magnitude_db() const;

  // Magnitude interpolated linearly in dB over log frequency; held constant
  // beyond the ends of the grid.
  double magnitude_at(double f_hz) const;
  Eigen::VectorXd magnitude_at(const Eigen::Ref<const Eigen::VectorXd>& f_hz) const;

  // 1/fraction-octave power smoothing on the grid; the result is magnitude-only.
  FrequencyResponse smoothed(double fraction) const;

 private:
  Eigen::VectorXd grid_;
  Eigen::VectorXcd values_;
  ResponseReference reference_ = ResponseReference::dimensionless;
  PhaseKind phase_ = PhaseKind::complex;
};

/* CSV layout (UTF-8). One header line naming the columns and the reference:
 *
 *   frequency_hz,magnitude_db,reference=fs_per_pa[,phase=zero|minimum]
 *   frequency_hz,re,im,reference=pa_per_fs
 *   frequency_hz,attenuation_db,reference=db_attenuation
 *
 * followed by one numeric row per frequency.
 */
FrequencyResponse read_response_csv(const std::filesystem::path& path);
void write_response_csv(const std::filesystem::path& path, const FrequencyResponse& response,
                        bool as_complex = false);

}  // namespace stagesim
