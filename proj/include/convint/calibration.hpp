#pragma once

// Calibrated constants, persisted as JSON (data/calibration.json).

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace convint {

struct Calibration {
  double c_seg2 = 0.0;     // segment constant, N = 2
  double c_seg3 = 0.0;     // segment constant, N = 3
  double c_energy2 = 0.0;  // energy-gain constant of the oscillatory increment, N = 2
  double c_energy3 = 0.0;
  double kappa = 0.0;      // scheme gain constant: gain >= kappa I^2
  double chi0 = 0.1;
  double safety = 0.9;
  int samples = 0;
  std::uint64_t seed = 0;

  double c_seg(int N) const { return N == 2 ? c_seg2 : c_seg3; }
  double c_energy(int N) const { return N == 2 ? c_energy2 : c_energy3; }
};

inline nlohmann::json to_json(const Calibration& c) {
  nlohmann::ordered_json j;
  j["c_seg"] = {{"2", c.c_seg2}, {"3", c.c_seg3}};
  j["c_energy"] = {{"2", c.c_energy2}, {"3", c.c_energy3}};
  j["kappa"] = c.kappa;
  j["chi0"] = c.chi0;
  j["safety"] = c.safety;
  j["samples"] = c.samples;
  j["seed"] = c.seed;
  return j;
}

inline Calibration calibration_from_json(const nlohmann::json& j) {
  Calibration c;
  c.c_seg2 = j.at("c_seg").at("2").get<double>();
  c.c_seg3 = j.at("c_seg").at("3").get<double>();
  c.c_energy2 = j.at("c_energy").at("2").get<double>();
  c.c_energy3 = j.at("c_energy").at("3").get<double>();
  c.kappa = j.value("kappa", 0.0);
  c.chi0 = j.value("chi0", 0.1);
  c.safety = j.value("safety", 0.9);
  c.samples = j.value("samples", 0);
  c.seed = j.value("seed", std::uint64_t{0});
  return c;
}

inline Calibration load_calibration(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open calibration file " + path);
  return calibration_from_json(nlohmann::json::parse(is));
}

inline void save_calibration(const std::string& path, const Calibration& c) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write calibration file " + path);
  os << to_json(c).dump(2) << "\n";
}

}  // namespace convint
