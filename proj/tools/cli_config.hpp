#pragma once

// RunConfig: the JSON configuration shared by all subcommands.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convint/scheme.hpp"

namespace convint::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  // grid
  int N = 2;
  int res = 32;
  double T = 1.0;
  double dt = 1.0 / 1024.0;
  // paths
  std::vector<std::uint64_t> path_seeds{1};
  double M = 4.0;
  double a = 0.25;
  std::vector<double> M_sweep{0.5, 1.0, 2.0, 4.0};
  // noise and data
  std::string noise_kind = "additive";
  std::string noise_preset = "shear";
  double noise_amplitude = 0.5;
  std::string initial_preset = "smooth";
  std::string rho0_file, mom0_file;  // used instead of the preset when both are set
  double rho_min = 0.5;
  double growth = 1.0;
  double D = 200.0;  // bound on |rho0|_C3 + |m0|_C3 + 1/min rho0
  double kappa_p = 1.0, gamma_p = 2.0;
  // frame
  std::size_t stride = 16;
  double rho_floor = 0.1;
  // scheme
  std::vector<ScheduleEntry> schedule{{64, 1}, {64, 2}, {64, 3}, {64, 4}, {64, 5}, {64, 6}};
  std::vector<std::uint64_t> run_seeds{11};
  double tol = 1e-3;
  SchemeConfig scheme;
  // output
  std::string csv_slices = "ends";  // "ends", "all" or "none"
  // calibration
  std::string calibration_file;  // empty: the shipped data file
  int cal_samples = 2000;
  std::uint64_t cal_seed = 1;
  int cal_n = 128;
  double cal_safety = 0.9;
  int kappa_res = 16;
  std::vector<std::uint64_t> kappa_seeds{101, 102, 103, 104};
  int kappa_steps = 3;
  std::vector<double> chi0_values{0.05, 0.1, 0.2};
  bool cal_include_n3 = true;

  fs::path base_dir;  // directory of the config file, for relative input paths
};

inline bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

inline fs::path resolve(const RunConfig& c, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() || c.base_dir.empty() ? q : c.base_dir / q;
}

inline void validate(const RunConfig& c) {
  if (c.N != 2 && c.N != 3) throw ConfigError("grid.N must be 2 or 3");
  if (!is_power_of_two(c.res) || c.res < 8) throw ConfigError("grid.res must be a power of two >= 8");
  if (!(c.T > 0.0) || !(c.dt > 0.0)) throw ConfigError("grid.T and grid.dt must be positive");
  const double steps = c.T / c.dt;
  if (std::abs(steps - std::round(steps)) > 1e-9 * steps) throw ConfigError("grid.dt must divide grid.T");
  const auto K = static_cast<std::size_t>(std::llround(steps));
  if (c.stride == 0 || K % c.stride != 0) throw ConfigError("frame.stride must divide the number of path steps");
  if (!(c.D > 0.0)) throw ConfigError("initial.D must be positive");
  if (c.path_seeds.empty()) throw ConfigError("paths.seeds must not be empty");
  if (!(c.M > 0.0)) throw ConfigError("paths.M must be positive");
  if (!(c.a > 0.0 && c.a < 0.5)) throw ConfigError("paths.a must lie in (0, 1/2)");
  for (double m : c.M_sweep)
    if (!(m > 0.0)) throw ConfigError("paths.M_sweep entries must be positive");
  noise_kind_from(c.noise_kind);
  const std::vector<std::string> noise{"zero", "shear", "smooth"}, init{"rest", "smooth", "shear"};
  if (std::find(noise.begin(), noise.end(), c.noise_preset) == noise.end())
    throw ConfigError("unknown noise preset " + c.noise_preset);
  if (c.rho0_file.empty() != c.mom0_file.empty()) throw ConfigError("initial.rho0 and initial.mom0 go together");
  if (c.rho0_file.empty() && std::find(init.begin(), init.end(), c.initial_preset) == init.end())
    throw ConfigError("unknown initial preset " + c.initial_preset);
  if (c.schedule.empty()) throw ConfigError("scheme.schedule must not be empty");
  for (std::size_t i = 0; i < c.schedule.size(); ++i) {
    if (c.schedule[i].n < 1) throw ConfigError("scheme.schedule frequencies must be positive");
    if (i > 0 && c.schedule[i].n < c.schedule[i - 1].n) throw ConfigError("scheme.schedule frequencies must not decrease");
  }
  if (c.run_seeds.empty()) throw ConfigError("scheme.run_seeds must not be empty");
  if (c.csv_slices != "ends" && c.csv_slices != "all" && c.csv_slices != "none")
    throw ConfigError("output.csv_slices must be ends, all or none");
  if (!is_power_of_two(c.kappa_res)) throw ConfigError("calibration.kappa_res must be a power of two");
}

namespace detail {
template <class T>
void opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace detail

inline RunConfig config_from_json(const json& j, const fs::path& base_dir = {}) {
  RunConfig c;
  c.base_dir = base_dir;
  using detail::opt;
  if (j.contains("grid")) {
    const auto& g = j["grid"];
    opt(g, "N", c.N);
    opt(g, "res", c.res);
    opt(g, "T", c.T);
    opt(g, "dt", c.dt);
  }
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    opt(p, "seeds", c.path_seeds);
    opt(p, "M", c.M);
    opt(p, "a", c.a);
    opt(p, "M_sweep", c.M_sweep);
  }
  if (j.contains("noise")) {
    const auto& n = j["noise"];
    opt(n, "kind", c.noise_kind);
    opt(n, "preset", c.noise_preset);
    opt(n, "amplitude", c.noise_amplitude);
  }
  if (j.contains("initial")) {
    const auto& i = j["initial"];
    opt(i, "preset", c.initial_preset);
    opt(i, "rho0", c.rho0_file);
    opt(i, "mom0", c.mom0_file);
    opt(i, "rho_min", c.rho_min);
    opt(i, "growth", c.growth);
    opt(i, "D", c.D);
  }
  if (j.contains("pressure")) {
    opt(j["pressure"], "kappa", c.kappa_p);
    opt(j["pressure"], "gamma", c.gamma_p);
  }
  if (j.contains("frame")) {
    opt(j["frame"], "stride", c.stride);
    opt(j["frame"], "rho_floor", c.rho_floor);
  }
  if (j.contains("scheme")) {
    const auto& s = j["scheme"];
    if (s.contains("schedule")) {
      c.schedule.clear();
      for (const auto& e : s["schedule"]) c.schedule.push_back({e.at("n").get<int>(), e.at("seed").get<std::uint64_t>()});
    }
    opt(s, "run_seeds", c.run_seeds);
    opt(s, "tol", c.tol);
    opt(s, "delta0", c.scheme.delta0);
    opt(s, "e_slack", c.scheme.e_slack);
    opt(s, "m", c.scheme.m);
    opt(s, "keep", c.scheme.keep);
    opt(s, "anchor_stride", c.scheme.anchor_stride);
    opt(s, "try_refinement", c.scheme.try_refinement);
    opt(s, "max_escalations", c.scheme.max_escalations);
    opt(s, "stall_steps", c.scheme.stall_steps);
    opt(s, "stall_gain", c.scheme.stall_gain);
  }
  if (j.contains("output")) opt(j["output"], "csv_slices", c.csv_slices);
  if (j.contains("calibration")) {
    const auto& k = j["calibration"];
    opt(k, "file", c.calibration_file);
    opt(k, "samples", c.cal_samples);
    opt(k, "seed", c.cal_seed);
    opt(k, "n", c.cal_n);
    opt(k, "safety", c.cal_safety);
    opt(k, "kappa_res", c.kappa_res);
    opt(k, "kappa_seeds", c.kappa_seeds);
    opt(k, "kappa_steps", c.kappa_steps);
    opt(k, "chi0_values", c.chi0_values);
    opt(k, "include_n3", c.cal_include_n3);
  }
  validate(c);
  return c;
}

/// Fully resolved configuration, every field explicit.
inline json to_json(const RunConfig& c) {
  json j;
  j["grid"] = {{"N", c.N}, {"res", c.res}, {"T", c.T}, {"dt", c.dt}};
  j["paths"] = {{"seeds", c.path_seeds}, {"M", c.M}, {"a", c.a}, {"M_sweep", c.M_sweep}};
  j["noise"] = {{"kind", c.noise_kind}, {"preset", c.noise_preset}, {"amplitude", c.noise_amplitude}};
  j["initial"] = {{"preset", c.initial_preset}, {"rho0", c.rho0_file}, {"mom0", c.mom0_file},
                  {"rho_min", c.rho_min}, {"growth", c.growth}, {"D", c.D}};
  j["pressure"] = {{"kappa", c.kappa_p}, {"gamma", c.gamma_p}};
  j["frame"] = {{"stride", c.stride}, {"rho_floor", c.rho_floor}};
  json sched = json::array();
  for (const auto& e : c.schedule) sched.push_back({{"n", e.n}, {"seed", e.seed}});
  j["scheme"] = {{"schedule", sched},
                 {"run_seeds", c.run_seeds},
                 {"tol", c.tol},
                 {"delta0", c.scheme.delta0},
                 {"e_slack", c.scheme.e_slack},
                 {"m", c.scheme.m},
                 {"keep", c.scheme.keep},
                 {"anchor_stride", c.scheme.anchor_stride},
                 {"try_refinement", c.scheme.try_refinement},
                 {"max_escalations", c.scheme.max_escalations},
                 {"stall_steps", c.scheme.stall_steps},
                 {"stall_gain", c.scheme.stall_gain}};
  j["output"] = {{"csv_slices", c.csv_slices}};
  j["calibration"] = {{"file", c.calibration_file},   {"samples", c.cal_samples},     {"seed", c.cal_seed},
                      {"n", c.cal_n},                 {"safety", c.cal_safety},       {"kappa_res", c.kappa_res},
                      {"kappa_seeds", c.kappa_seeds}, {"kappa_steps", c.kappa_steps}, {"chi0_values", c.chi0_values},
                      {"include_n3", c.cal_include_n3}};
  return j;
}

inline RunConfig load_config(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw ConfigError("cannot open config " + file.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config " + file.string() + ": " + e.what());
  }
  try {
    return config_from_json(j, file.parent_path());
  } catch (const json::exception& e) {
    throw ConfigError("config " + file.string() + ": " + e.what());
  }
}

}  // namespace convint::cli
