#include "stagesim/directivity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "stagesim/error.hpp"

namespace stagesim {
namespace {

int order_of(Eigen::Index channels) {
  const int l = static_cast<int>(std::lround(std::sqrt(static_cast<double>(channels)))) - 1;
  if (l < 0 || sh_count(l) != channels)
    throw ValidationError("SH coefficient count " + std::to_string(channels) + " is not (L+1)^2");
  return l;
}

double factorial_ratio(int l, int m) {
  // (l - m)! / (l + m)!
  double r = 1.0;
  for (int k = l - m + 1; k <= l + m; ++k) r /= k;
  return r;
}

double reference_pressure(const DirectivityModel& model, std::size_t partial) {
  const Eigen::VectorXd& c = model.partial(partial).coeffs;
  const double p = std::abs(sh_basis(model.order(partial), model.reference()).dot(c));
  // Each degree l contributes at most sqrt(2l+1) |c_l|, so |p| <= |c| (L+1).
  const double bound = c.norm() * (model.order(partial) + 1);
  if (!(p > 1e-12 * bound))
    throw ValidationError("directivity: pressure in the reference direction is null for partial " +
                          std::to_string(partial));
  return p;
}

double degree_scale(int l, const std::string& convention) {
  if (convention == "acn-n3d" || convention == "acn-n3d-cs") return 1.0;
  if (convention == "acn-sn3d") return 1.0 / std::sqrt(2.0 * l + 1.0);
  throw ValidationError("unknown SH convention '" + convention + "'");
}

}  // namespace

Eigen::VectorXd sh_basis(int order, const Direction& d) {
  if (order < 0) throw ValidationError("sh_basis: negative order");
  Eigen::VectorXd y(sh_count(order));
  const double x = std::sin(d.elevation);
  for (int l = 0; l <= order; ++l) {
    for (int m = -l; m <= l; ++m) {
      const int am = std::abs(m);
      const double norm = std::sqrt((2.0 * l + 1.0) * (am == 0 ? 1.0 : 2.0) * factorial_ratio(l, am));
      const double leg = std::assoc_legendre(l, am, x);
      const double trig = m > 0 ? std::cos(am * d.azimuth) : m < 0 ? std::sin(am * d.azimuth) : 1.0;
      y(l * l + l + m) = norm * leg * trig;
    }
  }
  return y;
}

DirectivityModel::DirectivityModel(std::string instrument, std::vector<Partial> partials, Direction reference)
    : instrument_(std::move(instrument)), partials_(std::move(partials)), reference_(reference) {
  if (partials_.empty()) throw ValidationError("DirectivityModel: no partials");
  for (const Partial& p : partials_) {
    if (!(p.frequency_hz > 0.0)) throw ValidationError("DirectivityModel: partial frequency must be > 0");
    order_of(p.coeffs.size());
    if (!p.coeffs.allFinite()) throw ValidationError("DirectivityModel: non-finite coefficient");
  }
}

int DirectivityModel::order(std::size_t i) const { return order_of(partial(i).coeffs.size()); }

DirectionGrid DirectionGrid::regular(double step_deg) {
  const int n_az = static_cast<int>(std::lround(360.0 / step_deg));
  const int n_el = static_cast<int>(std::lround(180.0 / step_deg));
  if (n_az < 1 || n_el < 1 || std::abs(n_az * step_deg - 360.0) > 1e-9 * 360.0 ||
      std::abs(n_el * step_deg - 180.0) > 1e-9 * 180.0)
    throw ValidationError("DirectionGrid: step must divide 180 degrees");
  const double h = step_deg * M_PI / 180.0;
  DirectionGrid g;
  g.azimuth.resize(n_az * n_el);
  g.elevation.resize(n_az * n_el);
  g.weights.resize(n_az * n_el);
  Eigen::Index i = 0;
  for (int e = 0; e < n_el; ++e) {
    const double el = -M_PI / 2.0 + (e + 0.5) * h;
    // Fejer first-rule weight in sin(el); the ring centres are its nodes.
    // Exact for polynomials in sin(el) up to degree n_el - 1.
    const double theta = M_PI / 2.0 - el;
    double s = 0.0;
    for (int j = 1; j <= n_el / 2; ++j) s += std::cos(2.0 * j * theta) / (4.0 * j * j - 1.0);
    const double w = (2.0 / n_el) * (1.0 - 2.0 * s) * (2.0 * M_PI / n_az);
    for (int a = 0; a < n_az; ++a, ++i) {
      g.azimuth(i) = a * h;
      g.elevation(i) = el;
      g.weights(i) = w;
    }
  }
  return g;
}

Eigen::MatrixXd DirectionGrid::basis(int order) const {
  Eigen::MatrixXd y(size(), sh_count(order));
  for (Eigen::Index i = 0; i < size(); ++i) y.row(i) = sh_basis(order, (*this)[i]).transpose();
  return y;
}

double pressure(const DirectivityModel& model, std::size_t partial, const Direction& d) {
  return std::abs(sh_basis(model.order(partial), d).dot(model.partial(partial).coeffs));
}

double gamma(const DirectivityModel& model, std::size_t partial, const Direction& d) {
  const double ref = reference_pressure(model, partial);
  return pressure(model, partial, d) / ref;
}

Eigen::VectorXd gamma(const DirectivityModel& model, std::size_t partial, const DirectionGrid& grid) {
  const double ref = reference_pressure(model, partial);
  return (grid.basis(model.order(partial)) * model.partial(partial).coeffs).cwiseAbs() / ref;
}

double q_factor(const DirectivityModel& model, std::size_t partial, const Direction& d,
                const DirectionGrid& grid) {
  const Eigen::VectorXd g = gamma(model, partial, grid);
  const double mean = grid.weights.dot(g.cwiseAbs2()) / grid.weights.sum();
  const double gd = gamma(model, partial, d);
  return gd * gd / mean;
}

Eigen::VectorXd q_factor(const DirectivityModel& model, std::size_t partial, const DirectionGrid& grid) {
  const Eigen::VectorXd g2 = gamma(model, partial, grid).cwiseAbs2();
  return g2 / (grid.weights.dot(g2) / grid.weights.sum());
}

Eigen::VectorXd directional_index_db(const DirectivityModel& model, std::size_t partial,
                                     const DirectionGrid& grid) {
  return q_factor(model, partial, grid).unaryExpr([](double q) {
    return q > 0.0 ? std::max(10.0 * std::log10(q), kIndexFloorDb) : kIndexFloorDb;
  });
}

std::vector<std::size_t> partials_in_band(const DirectivityModel& model, const FrequencyBandSpec& band) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < model.size(); ++i)
    if (band.contains(model.partial(i).frequency_hz)) out.push_back(i);
  return out;
}

namespace {

struct BandIndices {
  Eigen::MatrixXd indices;  // partials x directions
  Eigen::VectorXd weights;  // empty for the unweighted mean
};

std::optional<BandIndices> band_indices(const DirectivityModel& model, const FrequencyBandSpec& band,
                                        const DirectionGrid& grid, const BandAverageOptions& options) {
  const std::vector<std::size_t> in = partials_in_band(model, band);
  if (in.empty()) return std::nullopt;
  BandIndices b;
  b.indices.resize(static_cast<Eigen::Index>(in.size()), grid.size());
  if (options.energy_weighted) b.weights.resize(static_cast<Eigen::Index>(in.size()));
  for (std::size_t k = 0; k < in.size(); ++k) {
    b.indices.row(static_cast<Eigen::Index>(k)) = directional_index_db(model, in[k], grid).transpose();
    // N3D basis: the sphere mean of p^2 is the squared coefficient norm.
    if (options.energy_weighted) b.weights(static_cast<Eigen::Index>(k)) = model.partial(in[k]).coeffs.squaredNorm();
  }
  return b;
}

Eigen::VectorXd weighted_column_mean(const Eigen::MatrixXd& m, const Eigen::VectorXd& w) {
  if (w.size() == 0) return m.colwise().mean().transpose();
  if (w.size() != m.rows() || !(w.sum() > 0.0)) throw ValidationError("band weights must be positive");
  return (m.transpose() * w) / w.sum();
}

}  // namespace

std::optional<Eigen::VectorXd> band_average(const DirectivityModel& model, const FrequencyBandSpec& band,
                                            const DirectionGrid& grid, const BandAverageOptions& options) {
  const auto b = band_indices(model, band, grid, options);
  if (!b) return std::nullopt;
  return weighted_column_mean(b->indices, b->weights);
}

double percentile(Eigen::VectorXd samples, double q) {
  if (samples.size() == 0) throw ValidationError("percentile: no samples");
  std::sort(samples.data(), samples.data() + samples.size());
  const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(samples.size() - 1);
  const Eigen::Index lo = static_cast<Eigen::Index>(std::floor(pos));
  const Eigen::Index hi = std::min<Eigen::Index>(lo + 1, samples.size() - 1);
  return samples(lo) + (pos - static_cast<double>(lo)) * (samples(hi) - samples(lo));
}

ErrorPdf error_pdf_from_indices(const Eigen::Ref<const Eigen::MatrixXd>& indices_db, double kernel_width_db,
                                const Eigen::Ref<const Eigen::VectorXd>& weights) {
  if (indices_db.size() == 0) throw ValidationError("error_pdf: no samples");
  if (!(kernel_width_db > 0.0)) throw ValidationError("error_pdf: kernel width must be positive");
  const Eigen::MatrixXd idx = indices_db;
  const Eigen::VectorXd avg = weighted_column_mean(idx, weights);

  ErrorPdf pdf;
  pdf.partials = static_cast<std::size_t>(idx.rows());
  pdf.kernel_width_db = kernel_width_db;
  pdf.errors_db.resize(idx.size());
  for (Eigen::Index p = 0; p < idx.rows(); ++p)
    pdf.errors_db.segment(p * idx.cols(), idx.cols()) = idx.row(p).transpose() - avg;

  pdf.mean = pdf.errors_db.mean();
  pdf.p25 = percentile(pdf.errors_db, 25.0);
  pdf.p50 = percentile(pdf.errors_db, 50.0);
  pdf.p75 = percentile(pdf.errors_db, 75.0);

  // Gaussian KDE on an axis of sigma/10 steps, extended 6 sigma past the
  // extreme samples; each sample only touches points within 6 sigma.
  const double sigma = kernel_width_db, step = sigma / 10.0, reach = 6.0 * sigma;
  const double lo = pdf.errors_db.minCoeff() - reach;
  const double hi = pdf.errors_db.maxCoeff() + reach;
  const Eigen::Index n = static_cast<Eigen::Index>(std::ceil((hi - lo) / step)) + 1;
  pdf.axis_db = Eigen::VectorXd::LinSpaced(n, lo, lo + step * static_cast<double>(n - 1));
  pdf.density = Eigen::VectorXd::Zero(n);
  const double norm = 1.0 / (std::sqrt(2.0 * M_PI) * sigma * static_cast<double>(pdf.errors_db.size()));
  const Eigen::Index span = static_cast<Eigen::Index>(std::ceil(reach / step));
  for (Eigen::Index s = 0; s < pdf.errors_db.size(); ++s) {
    const double e = pdf.errors_db(s);
    const Eigen::Index c = static_cast<Eigen::Index>(std::lround((e - lo) / step));
    for (Eigen::Index i = std::max<Eigen::Index>(0, c - span); i <= std::min(n - 1, c + span); ++i) {
      const double z = (pdf.axis_db(i) - e) / sigma;
      pdf.density(i) += norm * std::exp(-0.5 * z * z);
    }
  }
  return pdf;
}

std::optional<ErrorPdf> band_error_pdf(const DirectivityModel& model, const FrequencyBandSpec& band,
                                       const DirectionGrid& grid, double kernel_width_db,
                                       const BandAverageOptions& options) {
  const auto b = band_indices(model, band, grid, options);
  if (!b) return std::nullopt;
  ErrorPdf pdf = error_pdf_from_indices(b->indices, kernel_width_db, b->weights);
  pdf.band_centre_hz = band.centre_hz;
  return pdf;
}

double fraction_within(const ErrorPdf& pdf, double limit_db) {
  if (pdf.errors_db.size() == 0) return 0.0;
  return static_cast<double>((pdf.errors_db.array().abs() <= limit_db).count()) /
         static_cast<double>(pdf.errors_db.size());
}

Eigen::VectorXd to_n3d(const Eigen::VectorXd& coeffs, const std::string& convention) {
  const int order = order_of(coeffs.size());
  Eigen::VectorXd out(coeffs.size());
  for (int l = 0; l <= order; ++l)
    for (int m = -l; m <= l; ++m) {
      const Eigen::Index i = l * l + l + m;
      // p = sum c Y; Y_sn3d = Y_n3d / sqrt(2l+1); Y_cs = (-1)^m Y.
      double s = degree_scale(l, convention);
      if (convention == "acn-n3d-cs" && (std::abs(m) % 2 == 1)) s = -s;
      out(i) = coeffs(i) * s;
    }
  return out;
}

Eigen::VectorXd from_n3d(const Eigen::VectorXd& coeffs, const std::string& convention) {
  const int order = order_of(coeffs.size());
  Eigen::VectorXd out(coeffs.size());
  for (int l = 0; l <= order; ++l)
    for (int m = -l; m <= l; ++m) {
      const Eigen::Index i = l * l + l + m;
      double s = degree_scale(l, convention);
      if (convention == "acn-n3d-cs" && (std::abs(m) % 2 == 1)) s = -s;
      out(i) = coeffs(i) / s;
    }
  return out;
}

DirectivityModel read_directivity_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open directivity file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  try {
    if (j.value("schema_version", 1) != 1)
      throw ValidationError(path.string() + ": unsupported schema_version");
    const std::string convention = j.at("convention").get<std::string>();
    degree_scale(0, convention);
    Direction ref;
    if (j.contains("reference_direction")) {
      const auto& r = j.at("reference_direction");
      ref = direction_deg(r.value("azimuth_deg", 0.0), r.value("elevation_deg", 0.0));
    }
    std::vector<Partial> partials;
    for (const auto& p : j.at("partials")) {
      Partial out;
      out.frequency_hz = p.at("freq_hz").get<double>();
      const auto c = p.at("coeffs").get<std::vector<double>>();
      Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(c.data(), static_cast<Eigen::Index>(c.size()));
      if (p.contains("sh_order") && sh_count(p.at("sh_order").get<int>()) != v.size())
        throw ValidationError(path.string() + ": sh_order does not match coefficient count");
      out.coeffs = to_n3d(v, convention);
      out.note = p.value("note", "");
      partials.push_back(std::move(out));
    }
    return DirectivityModel(j.value("instrument", ""), std::move(partials), ref);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void write_directivity_json(const std::filesystem::path& path, const DirectivityModel& model,
                            const std::string& convention) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["instrument"] = model.instrument();
  j["convention"] = convention;
  j["reference_direction"] = {{"azimuth_deg", model.reference().azimuth * 180.0 / M_PI},
                              {"elevation_deg", model.reference().elevation * 180.0 / M_PI}};
  j["partials"] = nlohmann::json::array();
  for (std::size_t i = 0; i < model.size(); ++i) {
    const Partial& p = model.partial(i);
    const Eigen::VectorXd c = from_n3d(p.coeffs, convention);
    j["partials"].push_back({{"freq_hz", p.frequency_hz},
                             {"sh_order", model.order(i)},
                             {"coeffs", std::vector<double>(c.data(), c.data() + c.size())},
                             {"note", p.note}});
  }
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write directivity file " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace stagesim
