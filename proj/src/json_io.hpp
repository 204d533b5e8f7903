#pragma once

// File helpers shared by the JSON readers and writers. Not installed.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "stagesim/error.hpp"

namespace stagesim::detail {

inline nlohmann::json load_json(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw ValidationError(std::string("cannot open ") + what + " " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void save_json(const std::filesystem::path& path, const nlohmann::json& j, const char* what) {
  std::ofstream out(path);
  if (!out) throw ValidationError(std::string("cannot write ") + what + " " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw ValidationError(std::string("write failed for ") + what + " " + path.string());
}

inline void require_schema(const nlohmann::json& j, int version, const std::string& where) {
  if (!j.contains("schema_version") || !j.at("schema_version").is_number_integer() ||
      j.at("schema_version").get<int>() != version)
    throw ValidationError(where + ": missing or unsupported schema_version (expected " +
                          std::to_string(version) + ")");
}

inline std::vector<double> to_std(const Eigen::Ref<const Eigen::VectorXd>& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline Eigen::VectorXd to_eigen(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace stagesim::detail
