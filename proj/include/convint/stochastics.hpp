#pragma once

// Wiener paths on a uniform grid, the sup-plus-Hoelder process O(t), stopping
// times and frozen (stopped) paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace convint {

struct GridError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Number of steps K with K*dt == T; throws GridError when T/dt is not an integer.
inline std::size_t grid_steps(double T, double dt) {
  if (!(T > 0.0) || !(dt > 0.0)) throw GridError("horizon and step must be positive");
  const double q = T / dt;
  const double k = std::round(q);
  if (k < 1.0 || std::abs(q - k) > 1e-9 * std::max(1.0, q))
    throw GridError("T/dt is not an integer: " + std::to_string(q));
  return static_cast<std::size_t>(k);
}

struct WienerPath {
  std::uint64_t seed = 0;
  double T = 1.0;
  double dt = 1.0;
  std::vector<double> values;  // values[k] = beta(k*dt)

  std::size_t steps() const { return values.empty() ? 0 : values.size() - 1; }
  double time(std::size_t k) const { return static_cast<double>(k) * dt; }

  // Same path observed on every `stride`-th grid point.
  WienerPath coarsen(std::size_t stride) const {
    if (stride == 0 || steps() % stride != 0) throw GridError("stride does not divide the grid");
    WienerPath out{seed, T, dt * static_cast<double>(stride), {}};
    for (std::size_t k = 0; k < values.size(); k += stride) out.values.push_back(values[k]);
    return out;
  }
};

/// Builds a path from a source of standard normal draws (scaled by sqrt(dt) here).
template <class StdNormal>
WienerPath sample_wiener_with(StdNormal&& draw, std::uint64_t seed, double T, double dt) {
  const std::size_t K = grid_steps(T, dt);
  WienerPath p{seed, T, dt, std::vector<double>(K + 1, 0.0)};
  const double sd = std::sqrt(dt);
  for (std::size_t k = 1; k <= K; ++k) p.values[k] = p.values[k - 1] + sd * draw();
  return p;
}

inline WienerPath sample_wiener(std::uint64_t seed, double T, double dt) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  return sample_wiener_with([&] { return nd(gen); }, seed, T, dt);
}

struct HolderCertificate {
  double a = 0.25;
  std::vector<double> O_values;
  bool exact = true;  // false when a pair window was used
};

/// O(t_k) = max_{i<=k} |beta_i| + max_{i<j<=k} |beta_i - beta_j| / |t_i - t_j|^a.
/// window == 0 scans every pair; otherwise only pairs with j - i <= window.
inline HolderCertificate holder_process(const WienerPath& path, double a, std::size_t window = 0) {
  if (!(a > 0.0 && a < 0.5)) throw ParameterError("Hoelder exponent must lie in (0, 1/2)");
  const std::size_t K = path.steps();
  HolderCertificate c{a, std::vector<double>(K + 1, 0.0), window == 0};
  std::vector<double> inv_pow(K + 1, 0.0);
  for (std::size_t j = 1; j <= K; ++j) inv_pow[j] = std::pow(static_cast<double>(j) * path.dt, -a);

  const auto& b = path.values;
  double sup_abs = std::abs(b.empty() ? 0.0 : b[0]);
  double semi = 0.0;
  if (!b.empty()) c.O_values[0] = sup_abs;
  for (std::size_t k = 1; k <= K; ++k) {
    sup_abs = std::max(sup_abs, std::abs(b[k]));
    const std::size_t i0 = (window == 0 || k <= window) ? 0 : k - window;
    for (std::size_t i = i0; i < k; ++i) semi = std::max(semi, std::abs(b[k] - b[i]) * inv_pow[k - i]);
    c.O_values[k] = sup_abs + semi;
  }
  return c;
}

/// Smallest grid index with O > M, or the final index when O never exceeds M.
inline std::size_t stopping_time(const HolderCertificate& cert, double M) {
  if (!(M > 0.0)) throw ParameterError("truncation level must be positive");
  for (std::size_t k = 0; k < cert.O_values.size(); ++k)
    if (cert.O_values[k] > M) return k;
  return cert.O_values.empty() ? 0 : cert.O_values.size() - 1;
}

/// Discrete C^a norm: sup |x| plus the Hoelder seminorm over all grid pairs.
inline double holder_norm(const std::vector<double>& x, double dt, double a) {
  double sup_abs = 0.0, semi = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    sup_abs = std::max(sup_abs, std::abs(x[j]));
    for (std::size_t i = 0; i < j; ++i)
      semi = std::max(semi, std::abs(x[j] - x[i]) / std::pow(static_cast<double>(j - i) * dt, a));
  }
  return sup_abs + semi;
}

struct StoppedPath {
  WienerPath base;
  double M = 1.0;
  double a = 0.25;
  std::size_t exceed_index = 0;  // first index with O > M (final index if none)
  bool exceeded = false;
  std::size_t tau_index = 0;     // freeze index: last index with O <= M
  std::vector<double> values;
  double norm = 0.0;             // certified discrete C^a norm of `values`

  double T() const { return base.T; }
  double dt() const { return base.dt; }
  std::size_t steps() const { return base.steps(); }
  bool frozen(std::size_t k) const { return k > tau_index; }
};

/// Freezes the path at the last grid index where O <= M.  The grid exceedance
/// index itself is kept in `exceed_index`; freezing one step earlier is what
/// makes the discrete norm bound hold on the grid.
inline StoppedPath stop_path(const WienerPath& path, double a, double M,
                             const HolderCertificate* cert_in = nullptr) {
  HolderCertificate local;
  if (cert_in == nullptr) {
    local = holder_process(path, a);
    cert_in = &local;
  }
  const HolderCertificate& cert = *cert_in;
  StoppedPath s;
  s.base = path;
  s.M = M;
  s.a = a;
  s.exceed_index = stopping_time(cert, M);
  s.exceeded = cert.O_values[s.exceed_index] > M;
  s.tau_index = s.exceeded ? s.exceed_index - (s.exceed_index > 0 ? 1 : 0) : path.steps();
  s.values.resize(path.values.size());
  for (std::size_t k = 0; k < path.values.size(); ++k) s.values[k] = path.values[std::min(k, s.tau_index)];
  // O is monotone and evaluated on [0, t_tau]; freezing cannot raise the norm.
  s.norm = cert.O_values[s.tau_index];
  return s;
}

/// Column text: t, beta_M, O, frozen flag.
inline void write_path_columns(std::ostream& os, const StoppedPath& s, const HolderCertificate& cert) {
  char buf[160];
  os << "# t beta_M O frozen\n";
  for (std::size_t k = 0; k < s.values.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %d\n", s.base.time(k), s.values[k], cert.O_values[k],
                  s.frozen(k) ? 1 : 0);
    os << buf;
  }
}

}  // namespace convint
