#pragma once

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace stagesim {

// Azimuth counter-clockwise from the front, elevation up from the horizontal
// plane; radians.
struct Direction {
  double azimuth = 0.0;
  double elevation = 0.0;
};

inline Direction direction_deg(double azimuth_deg, double elevation_deg) {
  return {azimuth_deg * M_PI / 180.0, elevation_deg * M_PI / 180.0};
}

inline Eigen::Index sh_count(int order) { return Eigen::Index(order + 1) * (order + 1); }

// Real spherical harmonics up to `order`, ACN channel order, N3D
// normalization (mean square 1 over the sphere), no Condon-Shortley phase.
Eigen::VectorXd sh_basis(int order, const Direction& d);

struct Partial {
  double frequency_hz = 0.0;
  Eigen::VectorXd coeffs;  // ACN / N3D
  std::string note;
};

class DirectivityModel {
 public:
  DirectivityModel() = default;
  DirectivityModel(std::string instrument, std::vector<Partial> partials, Direction reference = {});

  const std::string& instrument() const { return instrument_; }
  const std::vector<Partial>& partials() const { return partials_; }
  const Partial& partial(std::size_t i) const { return partials_.at(i); }
  std::size_t size() const { return partials_.size(); }
  const Direction& reference() const { return reference_; }
  int order(std::size_t i) const;

 private:
  std::string instrument_;
  std::vector<Partial> partials_;
  Direction reference_;
};

// Regular azimuth x elevation grid of cell centres. Ring weights follow
// cos(elevation) asymptotically but are Fejer quadrature weights, so spherical
// harmonics below order n_el / 2 integrate exactly and the weights sum to 4 pi.
// 5 degree steps give 72 x 36 = 2592 directions.
struct DirectionGrid {
  Eigen::VectorXd azimuth;
  Eigen::VectorXd elevation;
  Eigen::VectorXd weights;

  static DirectionGrid regular(double step_deg = 5.0);
  Eigen::Index size() const { return weights.size(); }
  Direction operator[](Eigen::Index i) const { return {azimuth(i), elevation(i)}; }
  // Rows are directions, columns the ACN channels up to `order`.
  Eigen::MatrixXd basis(int order) const;
};

// |p(omega)| of one partial.
double pressure(const DirectivityModel& model, std::size_t partial, const Direction& d);

// Directional factor |p(d)| / |p(reference)|. Throws ValidationError when
// |p(reference)| is below 1e-12 of the largest possible |p|.
double gamma(const DirectivityModel& model, std::size_t partial, const Direction& d);
Eigen::VectorXd gamma(const DirectivityModel& model, std::size_t partial, const DirectionGrid& grid);

// Directivity factor Gamma^2(d) / weighted sphere mean of Gamma^2.
double q_factor(const DirectivityModel& model, std::size_t partial, const Direction& d,
                const DirectionGrid& grid);
Eigen::VectorXd q_factor(const DirectivityModel& model, std::size_t partial, const DirectionGrid& grid);

constexpr double kIndexFloorDb = -120.0;
// 10 log10 Q, floored at kIndexFloorDb.
Eigen::VectorXd directional_index_db(const DirectivityModel& model, std::size_t partial,
                                     const DirectionGrid& grid);

// Band of width 1/fraction octave around centre_hz: [lo, hi).
struct FrequencyBandSpec {
  double centre_hz = 1000.0;
  double fraction = 1.0;
  double lo_hz() const { return centre_hz * std::pow(2.0, -0.5 / fraction); }
  double hi_hz() const { return centre_hz * std::pow(2.0, 0.5 / fraction); }
  bool contains(double f) const { return f >= lo_hz() && f < hi_hz(); }
};

struct BandAverageOptions {
  // Weight each partial by its sphere-mean squared pressure instead of 1.
  bool energy_weighted = false;
};

std::vector<std::size_t> partials_in_band(const DirectivityModel& model, const FrequencyBandSpec& band);

// Per direction, the mean over in-band partials of their directional index.
// Empty optional when no partial falls in the band.
std::optional<Eigen::VectorXd> band_average(const DirectivityModel& model, const FrequencyBandSpec& band,
                                            const DirectionGrid& grid, const BandAverageOptions& options = {});

struct ErrorPdf {
  double band_centre_hz = 0.0;
  std::size_t partials = 0;
  Eigen::VectorXd errors_db;  // partial-major: all directions of partial 0, then partial 1, ...
  Eigen::VectorXd axis_db;
  Eigen::VectorXd density;    // per dB; integrates to 1 over axis_db
  double kernel_width_db = 0.1;
  double p25 = 0.0, p50 = 0.0, p75 = 0.0, mean = 0.0;
};

// Error density from a partials x directions matrix of directional indices.
// `weights` (one per partial, optional) selects the weighted band mean.
ErrorPdf error_pdf_from_indices(const Eigen::Ref<const Eigen::MatrixXd>& indices_db,
                                double kernel_width_db = 0.1,
                                const Eigen::Ref<const Eigen::VectorXd>& weights = Eigen::VectorXd());

std::optional<ErrorPdf> band_error_pdf(const DirectivityModel& model, const FrequencyBandSpec& band,
                                       const DirectionGrid& grid, double kernel_width_db = 0.1,
                                       const BandAverageOptions& options = {});

// Share of error samples with |error| <= limit_db.
double fraction_within(const ErrorPdf& pdf, double limit_db);

// Linear-interpolated percentile of a sample set, q in [0, 100].
double percentile(Eigen::VectorXd samples, double q);

/* Directivity files are JSON:
 *
 *   {"schema_version": 1, "instrument": "trumpet", "convention": "acn-n3d",
 *    "reference_direction": {"azimuth_deg": 0, "elevation_deg": 0},
 *    "partials": [{"freq_hz": 440, "sh_order": 4, "coeffs": [...], "note": "A4"}]}
 *
 * convention is one of acn-n3d, acn-sn3d, acn-n3d-cs (Condon-Shortley phase);
 * coefficients are converted to acn-n3d on load.
 */
DirectivityModel read_directivity_json(const std::filesystem::path& path);
void write_directivity_json(const std::filesystem::path& path, const DirectivityModel& model,
                            const std::string& convention = "acn-n3d");

// Coefficient conversion between a named convention and acn-n3d.
Eigen::VectorXd to_n3d(const Eigen::VectorXd& coeffs, const std::string& convention);
Eigen::VectorXd from_n3d(const Eigen::VectorXd& coeffs, const std::string& convention);

}  // namespace stagesim
