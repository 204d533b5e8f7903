#include "stagesim/frequency_response.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

#include "stagesim/error.hpp"

namespace stagesim {
namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  return out;
}

}  // namespace

const char* to_string(ResponseReference ref) {
  switch (ref) {
    case ResponseReference::fs_per_pa: return "fs_per_pa";
    case ResponseReference::pa_per_fs: return "pa_per_fs";
    case ResponseReference::db_attenuation: return "db_attenuation";
    case ResponseReference::dimensionless: return "dimensionless";
  }
  return "dimensionless";
}

ResponseReference response_reference_from_string(const std::string& s) {
  if (s == "fs_per_pa") return ResponseReference::fs_per_pa;
  if (s == "pa_per_fs") return ResponseReference::pa_per_fs;
  if (s == "db_attenuation") return ResponseReference::db_attenuation;
  if (s == "dimensionless") return ResponseReference::dimensionless;
  throw ValidationError("unknown response reference '" + s + "'");
}

const char* to_string(PhaseKind kind) {
  switch (kind) {
    case PhaseKind::complex: return "complex";
    case PhaseKind::zero_phase: return "zero";
    case PhaseKind::minimum_phase: return "minimum";
  }
  return "complex";
}

FrequencyResponse::FrequencyResponse(Eigen::VectorXd grid_hz, Eigen::VectorXcd values,
                                     ResponseReference reference, PhaseKind phase)
    : grid_(std::move(grid_hz)), values_(std::move(values)), reference_(reference), phase_(phase) {
  if (grid_.size() == 0) throw ValidationError("FrequencyResponse: empty grid");
  if (grid_.size() != values_.size())
    throw ValidationError("FrequencyResponse: grid and values differ in length");
  for (Eigen::Index i = 1; i < grid_.size(); ++i)
    if (!(grid_(i) > grid_(i - 1)))
      throw ValidationError("FrequencyResponse: grid must be strictly ascending");
  if (!grid_.allFinite() || !values_.allFinite())
    throw ValidationError("FrequencyResponse: non-finite value");
  if (grid_(0) < 0.0) throw ValidationError("FrequencyResponse: negative frequency");
}

FrequencyResponse FrequencyResponse::from_magnitude(Eigen::VectorXd grid_hz,
                                                    const Eigen::VectorXd& magnitude,
                                                    ResponseReference reference, PhaseKind phase) {
  if (phase == PhaseKind::complex)
    throw ValidationError("FrequencyResponse: magnitude-only data needs a phase flag");
  return FrequencyResponse(std::move(grid_hz), magnitude.cast<std::complex<double>>(), reference, phase);
}

FrequencyResponse FrequencyResponse::from_magnitude_db(Eigen::VectorXd grid_hz, const Eigen::VectorXd& db,
                                                       ResponseReference reference, PhaseKind phase) {
  Eigen::VectorXd mag = (db.array() / 20.0 * std::log(10.0)).exp();
  return from_magnitude(std::move(grid_hz), mag, reference, phase);
}

FrequencyResponse FrequencyResponse::flat(double value, ResponseReference reference) {
  Eigen::VectorXd grid(2);
  grid << 1.0, 100000.0;
  return from_magnitude(grid, Eigen::VectorXd::Constant(2, value), reference, PhaseKind::zero_phase);
}

Eigen::VectorXd FrequencyResponse::magnitude_db() const {
  return magnitude().unaryExpr([](double m) { return 20.0 * std::log10(std::max(m, 1e-300)); });
}

double FrequencyResponse::magnitude_at(double f_hz) const {
  const Eigen::Index n = grid_.size();
  if (n == 1 || f_hz <= grid_(0)) return std::abs(values_(0));
  if (f_hz >= grid_(n - 1)) return std::abs(values_(n - 1));
  const auto it = std::upper_bound(grid_.data(), grid_.data() + n, f_hz);
  const Eigen::Index hi = it - grid_.data();
  const Eigen::Index lo = hi - 1;
  const double a = std::abs(values_(lo)), b = std::abs(values_(hi));
  if (a <= 0.0 || b <= 0.0 || grid_(lo) <= 0.0) {
    const double t = (f_hz - grid_(lo)) / (grid_(hi) - grid_(lo));
    return a + t * (b - a);
  }
  const double t = std::log(f_hz / grid_(lo)) / std::log(grid_(hi) / grid_(lo));
  return std::exp(std::log(a) + t * (std::log(b) - std::log(a)));
}

Eigen::VectorXd FrequencyResponse::magnitude_at(const Eigen::Ref<const Eigen::VectorXd>& f_hz) const {
  Eigen::VectorXd out(f_hz.size());
  for (Eigen::Index i = 0; i < f_hz.size(); ++i) out(i) = magnitude_at(f_hz(i));
  return out;
}

FrequencyResponse FrequencyResponse::smoothed(double fraction) const {
  if (!(fraction > 0.0)) throw ValidationError("smoothed: fraction must be positive");
  const double half = std::pow(2.0, 1.0 / (2.0 * fraction));
  const Eigen::Index n = grid_.size();
  const Eigen::VectorXd power = values_.cwiseAbs2();
  Eigen::VectorXd out(n);
  Eigen::Index lo = 0, hi = 0;
  double sum = 0.0;
  // Sliding window over [f/half, f*half]; both edges only move forward.
  for (Eigen::Index i = 0; i < n; ++i) {
    const double f = grid_(i);
    while (hi < n && grid_(hi) <= f * half) sum += power(hi++);
    while (lo < i && grid_(lo) < f / half) sum -= power(lo++);
    out(i) = std::sqrt(std::max(sum, 0.0) / static_cast<double>(hi - lo));
  }
  return from_magnitude(grid_, out, reference_,
                        phase_ == PhaseKind::minimum_phase ? PhaseKind::minimum_phase : PhaseKind::zero_phase);
}

FrequencyResponse read_response_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open response file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path.string() + ": empty response file");
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);

  std::vector<std::string> columns;
  ResponseReference reference = ResponseReference::dimensionless;
  PhaseKind phase = PhaseKind::zero_phase;
  bool have_reference = false;
  for (const auto& token : split_csv(line)) {
    if (token.rfind("reference=", 0) == 0) {
      reference = response_reference_from_string(token.substr(10));
      have_reference = true;
    } else if (token.rfind("phase=", 0) == 0) {
      const std::string p = token.substr(6);
      if (p == "zero") phase = PhaseKind::zero_phase;
      else if (p == "minimum") phase = PhaseKind::minimum_phase;
      else throw ValidationError(path.string() + ": unknown phase '" + p + "'");
    } else {
      columns.push_back(token);
    }
  }
  if (!have_reference) throw ValidationError(path.string() + ": header lacks reference=<unit>");
  enum class Layout { db, complex, attenuation } layout;
  if (columns == std::vector<std::string>{"frequency_hz", "magnitude_db"}) layout = Layout::db;
  else if (columns == std::vector<std::string>{"frequency_hz", "re", "im"}) layout = Layout::complex;
  else if (columns == std::vector<std::string>{"frequency_hz", "attenuation_db"}) layout = Layout::attenuation;
  else throw ValidationError(path.string() + ": unrecognised column header");

  std::vector<double> f;
  std::vector<std::complex<double>> v;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    const std::size_t want = layout == Layout::complex ? 3 : 2;
    if (cells.size() != want)
      throw ValidationError(path.string() + ": row " + std::to_string(row) + " has wrong column count");
    try {
      f.push_back(std::stod(cells[0]));
      switch (layout) {
        case Layout::db: v.emplace_back(std::pow(10.0, std::stod(cells[1]) / 20.0), 0.0); break;
        case Layout::attenuation: v.emplace_back(std::pow(10.0, -std::stod(cells[1]) / 20.0), 0.0); break;
        case Layout::complex: v.emplace_back(std::stod(cells[1]), std::stod(cells[2])); break;
      }
    } catch (const std::logic_error&) {
      throw ValidationError(path.string() + ": row " + std::to_string(row) + " is not numeric");
    }
  }
  Eigen::VectorXd grid = Eigen::Map<Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
  Eigen::VectorXcd values =
      Eigen::Map<Eigen::VectorXcd>(v.data(), static_cast<Eigen::Index>(v.size()));
  return FrequencyResponse(std::move(grid), std::move(values), reference,
                           layout == Layout::complex ? PhaseKind::complex : phase);
}

void write_response_csv(const std::filesystem::path& path, const FrequencyResponse& response,
                        bool as_complex) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write response file " + path.string());
  out << std::setprecision(17);
  const bool attenuation = response.reference() == ResponseReference::db_attenuation && !as_complex;
  if (as_complex) out << "frequency_hz,re,im";
  else if (attenuation) out << "frequency_hz,attenuation_db";
  else out << "frequency_hz,magnitude_db";
  out << ",reference=" << to_string(response.reference());
  if (!as_complex && response.phase() == PhaseKind::minimum_phase) out << ",phase=minimum";
  else if (!as_complex) out << ",phase=zero";
  out << "\n";
  const Eigen::VectorXd db = response.magnitude_db();
  for (Eigen::Index i = 0; i < response.size(); ++i) {
    out << response.grid()(i) << ",";
    if (as_complex) out << response.values()(i).real() << "," << response.values()(i).imag();
    else if (attenuation) out << -db(i);
    else out << db(i);
    out << "\n";
  }
}

}  // namespace stagesim
