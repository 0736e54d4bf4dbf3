#pragma once

// Oscillatory increments at four levels: a constant state on the unit cube,
// a constant state on a box with density r, piecewise-constant coefficients on
// a space-time partition, and continuous coefficients through a piecewise
// approximation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "convint/geometry.hpp"
#include "convint/waves.hpp"

namespace convint {

struct PreconditionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct RefinementError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Constant coefficients of one cell.
template <int N>
struct CellPoint {
  double e = 1.0;
  double r = 1.0;
  Vec<N> w = Vec<N>::Zero();
  Mat<N> H = Mat<N>::Zero();

  GeomPoint<N> scaled() const { return {w / std::sqrt(r), H, e}; }
};

struct OscOptions {
  SelectionOptions sel;
  double min_margin = 0.0;  // required e - s after the increment, absolute
};

template <int N>
struct CellIncrement {
  SegmentSelection<N> sel;
  WaveSpec<N> wave;
  bool applied = false;   // increment kept
  bool trivial = false;   // selection gave L = 0
  bool below_n0 = false;  // inclusion failed on the grid, increment dropped
  double min_def_after = std::numeric_limits<double>::infinity();
  double energy = 0.0;    // int |w_n|^2 / r over the box
  double box_volume = 0.0;
  std::size_t points = 0; // grid points inside the box
};

/// Visits every grid point (slice kt, flat index p) strictly inside the box.
template <int N, class Fn>
void for_each_box_point(const TorusGrid<N>& g, const std::vector<double>& times, const SpaceTimeBox<N>& box, Fn&& fn) {
  std::array<std::vector<int>, N> idx;
  for (int d = 0; d < N; ++d)
    for (int i = 0; i < g.res; ++i) {
      const double x = i * g.h();
      if (x > box.lo[d] && x < box.hi[d]) idx[d].push_back(i);
    }
  for (int d = 0; d < N; ++d)
    if (idx[d].empty()) return;
  for (std::size_t kt = 0; kt < times.size(); ++kt) {
    if (!(times[kt] > box.t0 && times[kt] < box.t1)) continue;
    std::array<std::size_t, N> it{};
    for (;;) {
      std::array<int, N> ix;
      for (int d = 0; d < N; ++d) ix[d] = idx[d][it[d]];
      fn(kt, g.flat(ix));
      int d = N - 1;
      while (d >= 0 && ++it[d] == idx[d].size()) it[d--] = 0;
      if (d < 0) break;
    }
  }
}

template <int N>
double box_volume(const SpaceTimeBox<N>& b) {
  return (b.t1 - b.t0) * (b.hi - b.lo).prod();
}

/// Packet for a given segment on a box with density r; the phase offset comes from the seed.
template <int N>
CellIncrement<N> plan_cell_from(const SegmentSelection<N>& sel, double r, const SpaceTimeBox<N>& box, int n,
                                std::uint64_t seed) {
  CellIncrement<N> out;
  out.box_volume = box_volume<N>(box);
  out.sel = sel;
  out.trivial = out.sel.trivial || out.sel.L == 0.0;
  const double phase = kTwoPi * static_cast<double>(detail::mix64(seed ^ 0x9e3779b97f4a7c15ULL) >> 11) * 0x1.0p-53;
  out.wave = make_wave<N>(out.sel.a, out.sel.b, out.trivial ? 0.0 : out.sel.L, n, box, r, phase);
  if (!out.trivial) out.energy = packet_energy<N>(out.wave) / r;
  return out;
}

/// Segment and packet for one constant cell, before any grid evaluation.
template <int N>
CellIncrement<N> plan_cell(const CellPoint<N>& c, const SpaceTimeBox<N>& box, int n, std::uint64_t seed,
                           const OscOptions& opt = {}) {
  if (!(c.e > 0.0) || !(c.r > 0.0)) throw PreconditionError("energy level and density must be positive");
  return plan_cell_from<N>(select_segment<N>(c.scaled(), seed, opt.sel), c.r, box, n, seed);
}

/// Evaluates a planned cell on the grid and keeps it only if the inclusion
/// [(w + w_n)/sqrt(r), H + V_n] in S[level] holds with margin at every grid
/// point of the box.  `state_at(kt, p)` gives the coefficients seen by the check.
template <int N, class StateAt>
void commit_cell(CellIncrement<N>& inc, SpaceTimeField<N, N>& w_out, SpaceTimeField<N, sym_size(N)>& V_out,
                 StateAt&& state_at, const OscOptions& opt = {}) {
  const auto& g = w_out.grid();
  inc.applied = false;
  if (inc.trivial) {
    inc.energy = 0.0;
    return;
  }
  const auto ker = wave_kernel<N>(inc.wave);
  struct Val {
    std::size_t kt, p;
    std::array<double, pair_size<N>()> v;
  };
  std::vector<Val> vals;
  double min_def = std::numeric_limits<double>::infinity();
  for_each_box_point<N>(g, w_out.times, inc.wave.box, [&](std::size_t kt, std::size_t p) {
    const Vec<N> x = g.point(p);
    std::array<double, N> xa;
    for (int d = 0; d < N; ++d) xa[d] = x[d];
    auto v = evaluate_pair<N, double>(inc.wave, ker, w_out.times[kt], xa);
    double tr = 0.0;
    for (int i = 0; i < N - 1; ++i) tr += v[N + sym_index<N>(i, i)];
    v[N + sym_index<N>(N - 1, N - 1)] = -tr;
    const CellPoint<N> c = state_at(kt, p);
    Vec<N> wn;
    Mat<N> Vn;
    for (int i = 0; i < N; ++i) {
      wn[i] = v[i];
      for (int j = 0; j < N; ++j) Vn(i, j) = v[N + sym_index<N>(i, j)];
    }
    const double def = c.e - s_value<N>((c.w + wn) / std::sqrt(c.r), c.H + Vn);
    min_def = std::min(min_def, def);
    vals.push_back({kt, p, v});
  });
  inc.points = vals.size();
  inc.min_def_after = min_def;
  if (!(min_def > opt.min_margin)) {
    inc.below_n0 = true;
    inc.energy = 0.0;
    return;
  }
  for (const auto& v : vals) {
    for (int i = 0; i < N; ++i) w_out[v.kt](i, v.p) += v.v[i];
    for (int c = 0; c < sym_size(N); ++c) V_out[v.kt](c, v.p) += v.v[N + c];
  }
  inc.applied = true;
}

// ---------------------------------------------------------------------------
// Unit and scaled levels

template <int N>
struct LocalIncrement {
  WavePair<N> fields;
  CellIncrement<N> cell;
  double mean_energy = 0.0;  // space-time mean of |w_n|^2 / r over the box
  double ratio = 0.0;        // mean_energy e / (e - |w|^2/(2r))^2
};

template <int N>
SpaceTimeBox<N> unit_box(double T = 1.0) {
  return {0.0, T, Vec<N>::Zero(), Vec<N>::Ones()};
}

template <int N>
LocalIncrement<N> increment_scaled(const CellPoint<N>& c, const SpaceTimeBox<N>& box, int n, std::uint64_t seed,
                                   const TorusGrid<N>& g, const std::vector<double>& times, const OscOptions& opt = {}) {
  if (!in_S<N>(c.scaled()) && deficiency<N>(c.scaled()) < -1e-12 * c.e)
    throw PreconditionError("state is outside S[e]");
  LocalIncrement<N> out;
  out.fields.w = SpaceTimeField<N, N>(g, times);
  out.fields.V = SpaceTimeField<N, sym_size(N)>(g, times);
  for (auto& s : out.fields.V.slices) s.traceless = true;
  out.cell = plan_cell<N>(c, box, n, seed, opt);
  commit_cell<N>(out.cell, out.fields.w, out.fields.V, [&](std::size_t, std::size_t) { return c; }, opt);
  out.mean_energy = out.cell.energy / out.cell.box_volume;
  const double gap = c.e - 0.5 * c.w.squaredNorm() / c.r;
  out.ratio = gap > 0.0 ? out.mean_energy * c.e / (gap * gap) : 0.0;
  return out;
}

template <int N>
LocalIncrement<N> increment_unit(double e, const Vec<N>& w, const Mat<N>& H, int n, std::uint64_t seed,
                                 const TorusGrid<N>& g, const std::vector<double>& times, const OscOptions& opt = {}) {
  return increment_scaled<N>({e, 1.0, w, H}, unit_box<N>(), n, seed, g, times, opt);
}

/// Smallest n of the schedule whose increment passes the grid inclusion check (0 if none).
template <int N>
int measure_n0(const CellPoint<N>& c, const SpaceTimeBox<N>& box, const std::vector<int>& schedule, std::uint64_t seed,
               const TorusGrid<N>& g, const std::vector<double>& times, const OscOptions& opt = {}) {
  for (int n : schedule) {
    const auto r = increment_scaled<N>(c, box, n, seed, g, times, opt);
    if (r.cell.trivial || r.cell.applied) return n;
  }
  return 0;
}

/// Weak pairing sup_t |int w_n(t).dir g(x) dx| of the packet over the given times.
template <int N>
double weak_pairing_sup(const WaveSpec<N>& wave, const std::vector<double>& times, const Vec<N>& dir,
                        const std::array<std::function<double(double)>, N>& g) {
  const auto ker = wave_kernel<N>(wave);
  double m = 0.0;
  for (double t : times) m = std::max(m, std::abs(packet_pairing<N>(wave, t, dir, g, &ker)));
  return m;
}

/// Least-squares slope of log y against log x.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lx = std::log(x[i]), ly = std::log(std::max(y[i], 1e-300));
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// ---------------------------------------------------------------------------
// Piecewise-constant level

template <int N>
struct PiecewiseCoefficients {
  int m = 1;
  double T = 1.0;
  std::vector<CellPoint<N>> cells;  // index j * m^N + spatial cell (row-major, axis 0 slowest)
  std::vector<double> sample_time;  // time at which each cell's values were read

  std::size_t spatial_cells() const {
    std::size_t s = 1;
    for (int d = 0; d < N; ++d) s *= static_cast<std::size_t>(m);
    return s;
  }
  SpaceTimeBox<N> box(std::size_t cell) const {
    const std::size_t sc = spatial_cells();
    const std::size_t j = cell / sc;
    std::size_t rest = cell % sc;
    SpaceTimeBox<N> b;
    b.t0 = T * static_cast<double>(j) / m;
    b.t1 = T * static_cast<double>(j + 1) / m;
    for (int d = N - 1; d >= 0; --d) {
      const std::size_t i = rest % static_cast<std::size_t>(m);
      rest /= static_cast<std::size_t>(m);
      b.lo[d] = static_cast<double>(i) / m;
      b.hi[d] = static_cast<double>(i + 1) / m;
    }
    return b;
  }
  /// Cell containing the space-time point, half-open intervals.
  std::size_t locate(double t, const Vec<N>& x) const {
    auto bin = [&](double v) { return std::clamp(static_cast<int>(std::floor(v * m + 1e-12)), 0, m - 1); };
    std::size_t c = static_cast<std::size_t>(bin(t / T));
    for (int d = 0; d < N; ++d) c = c * static_cast<std::size_t>(m) + static_cast<std::size_t>(bin(x[d]));
    return c;
  }
};

template <int N>
PiecewiseCoefficients<N> uniform_piecewise(int m, double T, const CellPoint<N>& c) {
  PiecewiseCoefficients<N> pc;
  pc.m = m;
  pc.T = T;
  pc.cells.assign(pc.spatial_cells() * static_cast<std::size_t>(m), c);
  for (std::size_t k = 0; k < pc.cells.size(); ++k) pc.sample_time.push_back(pc.box(k).t0);
  return pc;
}

struct CellAudit {
  std::size_t cell = 0;
  double start_time = 0.0;
  double sample_time = 0.0;
  std::uint64_t input_hash = 0;
  bool applied = false;
  bool below_n0 = false;
};

inline std::uint64_t hash_doubles(const std::vector<double>& v) {
  return std::hash<std::string_view>{}(
      std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)));
}

template <int N>
std::uint64_t hash_cell(const CellPoint<N>& c) {
  std::vector<double> v{c.e, c.r};
  for (int i = 0; i < N; ++i) v.push_back(c.w[i]);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) v.push_back(c.H(i, j));
  return hash_doubles(v);
}

inline std::uint64_t cell_seed(std::uint64_t seed, std::size_t cell) {
  return detail::mix64(seed + 0x632be59bd9b4e019ULL * (cell + 1));
}

template <int N>
struct PiecewiseIncrement {
  WavePair<N> fields;
  std::vector<CellIncrement<N>> cells;
  std::vector<CellAudit> audit;
  double energy = 0.0;  // sum of per-cell int |w_n|^2 / r
  int dropped = 0;      // cells below the frequency threshold
  bool adapted = true;  // every cell read its inputs no later than its start time
};

/// Cells are processed in time order; `state_at` supplies the coefficients used by
/// the inclusion check (the cell constants themselves when absent).
template <int N, class StateAt>
PiecewiseIncrement<N> increment_piecewise_with(const PiecewiseCoefficients<N>& pc, int n, std::uint64_t seed,
                                               const TorusGrid<N>& g, const std::vector<double>& times,
                                               StateAt&& state_at, const OscOptions& opt = {}) {
  PiecewiseIncrement<N> out;
  out.fields.w = SpaceTimeField<N, N>(g, times);
  out.fields.V = SpaceTimeField<N, sym_size(N)>(g, times);
  for (auto& s : out.fields.V.slices) s.traceless = true;
  for (std::size_t k = 0; k < pc.cells.size(); ++k) {
    const auto box = pc.box(k);
    const auto& c = pc.cells[k];
    auto inc = plan_cell<N>(c, box, n, cell_seed(seed, k), opt);
    commit_cell<N>(inc, out.fields.w, out.fields.V, [&](std::size_t kt, std::size_t p) { return state_at(k, kt, p); },
                   opt);
    CellAudit a{k, box.t0, pc.sample_time.empty() ? box.t0 : pc.sample_time[k], hash_cell<N>(c), inc.applied,
                inc.below_n0};
    out.adapted = out.adapted && a.sample_time <= a.start_time + 1e-12;
    out.audit.push_back(a);
    out.energy += inc.energy;
    out.dropped += inc.below_n0 ? 1 : 0;
    out.cells.push_back(std::move(inc));
  }
  return out;
}

template <int N>
PiecewiseIncrement<N> increment_piecewise(const PiecewiseCoefficients<N>& pc, int n, std::uint64_t seed,
                                          const TorusGrid<N>& g, const std::vector<double>& times,
                                          const OscOptions& opt = {}) {
  return increment_piecewise_with<N>(
      pc, n, seed, g, times, [&](std::size_t k, std::size_t, std::size_t) { return pc.cells[k]; }, opt);
}

// ---------------------------------------------------------------------------
// Continuous level

template <int N>
struct CoefficientBounds {
  double r_lo = 0.0, r_hi = 0.0, e_lo = 0.0, e_hi = 0.0;
};

template <int N>
struct CoefficientField {
  SpaceTimeField<N, 1> e, r;
  SpaceTimeField<N, N> w;
  SpaceTimeField<N, sym_size(N)> H;
  CoefficientBounds<N> bounds;
  double delta = 0.0;

  const TorusGrid<N>& grid() const { return e.grid(); }
  const std::vector<double>& times() const { return e.times; }
  double T() const { return e.times.back(); }
  CellPoint<N> at(std::size_t kt, std::size_t p) const {
    return {e[kt](0, p), r[kt](0, p), w[kt].vec(p), H[kt].mat(p)};
  }
};

/// Bounds r_lo <= r <= r_hi, e <= e_hi, and min over the grid of (e - delta) - s(w/sqrt r, H).
template <int N>
double membership_margin(const CoefficientField<N>& cf) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t kt = 0; kt < cf.e.nt(); ++kt)
    for (std::size_t p = 0; p < cf.grid().size(); ++p) {
      const auto c = cf.at(kt, p);
      m = std::min(m, (c.e - cf.delta) - s_value<N>(c.w / std::sqrt(c.r), c.H));
    }
  return m;
}

template <int N>
bool within_bounds(const CoefficientField<N>& cf) {
  for (std::size_t kt = 0; kt < cf.e.nt(); ++kt)
    for (std::size_t p = 0; p < cf.grid().size(); ++p) {
      const double r = cf.r[kt](0, p), e = cf.e[kt](0, p);
      if (r < cf.bounds.r_lo || r > cf.bounds.r_hi || e > cf.bounds.e_hi || !(e > 0.0)) return false;
    }
  return true;
}

/// Smooth seeded test coefficients: r, w, H are sums of a few low Fourier modes in
/// (t, x); e = s(w/sqrt r, H) + delta + slack with slack in [0.25, 0.35].
template <int N>
CoefficientField<N> random_coefficient_field(const TorusGrid<N>& g, const std::vector<double>& times,
                                             std::uint64_t seed, double delta, double amp = 0.08) {
  std::mt19937_64 gen(detail::mix64(seed));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<int> mode(-1, 1);
  struct Term {
    int kt;
    std::array<int, N> kx;
    double c, ph;
  };
  auto draw = [&](double a) {
    std::vector<Term> ts(3);
    for (auto& t : ts) {
      t.kt = mode(gen);
      for (int d = 0; d < N; ++d) t.kx[d] = mode(gen);
      t.c = a * u(gen) / 3.0;
      t.ph = kTwoPi * u(gen);
    }
    return ts;
  };
  auto eval = [](const std::vector<Term>& ts, double t, const Vec<N>& x) {
    double v = 0.0;
    for (const auto& tm : ts) {
      double arg = tm.kt * t + tm.ph;
      for (int d = 0; d < N; ++d) arg += tm.kx[d] * x[d];
      v += tm.c * std::sin(kTwoPi * arg);
    }
    return v;
  };
  const auto rt = draw(amp), st = draw(1.0);
  std::array<std::vector<Term>, N> wt;
  for (auto& w : wt) w = draw(amp);
  std::array<std::vector<Term>, sym_size(N)> ht;
  for (auto& h : ht) h = draw(amp);

  CoefficientField<N> cf;
  cf.e = SpaceTimeField<N, 1>(g, times);
  cf.r = SpaceTimeField<N, 1>(g, times);
  cf.w = SpaceTimeField<N, N>(g, times);
  cf.H = SpaceTimeField<N, sym_size(N)>(g, times);
  cf.delta = delta;
  auto& b = cf.bounds;
  b.r_lo = b.e_lo = std::numeric_limits<double>::infinity();
  b.r_hi = b.e_hi = 0.0;
  for (std::size_t kt = 0; kt < times.size(); ++kt) {
    cf.H[kt].traceless = true;
    for (std::size_t p = 0; p < g.size(); ++p) {
      const Vec<N> x = g.point(p);
      const double t = times[kt];
      const double r = 1.0 + eval(rt, t, x);
      Vec<N> w;
      for (int i = 0; i < N; ++i) w[i] = eval(wt[i], t, x);
      Mat<N> H;
      for (int i = 0; i < N; ++i)
        for (int j = i; j < N; ++j) H(i, j) = H(j, i) = eval(ht[sym_index<N>(i, j)], t, x);
      H -= (H.trace() / N) * Mat<N>::Identity();
      const double e = s_value<N>(w / std::sqrt(r), H) + delta + 0.3 + 0.05 * eval(st, t, x);
      cf.r[kt](0, p) = r;
      cf.e[kt](0, p) = e;
      cf.w[kt].set_vec(p, w);
      cf.H[kt].set_mat(p, H);
      b.r_lo = std::min(b.r_lo, r);
      b.r_hi = std::max(b.r_hi, r);
      b.e_lo = std::min(b.e_lo, e);
      b.e_hi = std::max(b.e_hi, e);
    }
  }
  return cf;
}

template <int N>
struct Approximation {
  PiecewiseCoefficients<N> pc;
  double delta_ap = 0.0;
};

/// e_m: sup over the cell's spatial grid points at its initial time; r, w, H: values at
/// the grid point nearest the cell centre at its initial time.  delta_ap = max grid error.
template <int N>
Approximation<N> approx_piecewise(const CoefficientField<N>& cf, int m) {
  const auto& g = cf.grid();
  const auto& times = cf.times();
  const std::size_t steps = times.size() - 1;
  if (m < 1 || g.res % m != 0 || steps % static_cast<std::size_t>(m) != 0)
    throw RefinementError("partition must divide the space and time grids");
  Approximation<N> ap;
  auto& pc = ap.pc;
  pc.m = m;
  pc.T = times.back();
  const std::size_t sc = pc.spatial_cells();
  pc.cells.resize(sc * static_cast<std::size_t>(m));
  pc.sample_time.resize(pc.cells.size());
  const int per = g.res / m;
  for (int j = 0; j < m; ++j) {
    const std::size_t kt = static_cast<std::size_t>(j) * (steps / static_cast<std::size_t>(m));
    for (std::size_t s = 0; s < sc; ++s) {
      std::array<int, N> ci;
      std::size_t rest = s;
      for (int d = N - 1; d >= 0; --d) {
        ci[d] = static_cast<int>(rest % static_cast<std::size_t>(m));
        rest /= static_cast<std::size_t>(m);
      }
      std::array<int, N> centre;
      for (int d = 0; d < N; ++d) centre[d] = ci[d] * per + per / 2;
      CellPoint<N> c = cf.at(kt, g.flat(centre));
      double esup = -std::numeric_limits<double>::infinity();
      std::array<int, N> off{};
      for (;;) {
        std::array<int, N> ix;
        for (int d = 0; d < N; ++d) ix[d] = ci[d] * per + off[d];
        esup = std::max(esup, cf.e[kt](0, g.flat(ix)));
        int d = N - 1;
        while (d >= 0 && ++off[d] == per) off[d--] = 0;
        if (d < 0) break;
      }
      c.e = esup;
      const std::size_t k = static_cast<std::size_t>(j) * sc + s;
      pc.cells[k] = c;
      pc.sample_time[k] = times[kt];
    }
  }
  double err = 0.0;
  for (std::size_t kt = 0; kt < times.size(); ++kt)
    for (std::size_t p = 0; p < g.size(); ++p) {
      const auto& c = pc.cells[pc.locate(times[kt], g.point(p))];
      const auto f = cf.at(kt, p);
      err = std::max({err, std::abs(c.e - f.e), std::abs(c.r - f.r), (c.w - f.w).cwiseAbs().maxCoeff(),
                      (c.H - f.H).cwiseAbs().maxCoeff()});
    }
  ap.delta_ap = err;
  return ap;
}

template <int N>
struct ContinuousIncrement {
  PiecewiseIncrement<N> piecewise;
  int m = 0;
  double delta_ap = 0.0;
  double delta_n = 0.0;       // min over the grid of e - s((w + w_n)/sqrt r, H + V_n)
  double oscil_ratio = 0.0;   // int |w_n|^2/r over (1/sup e) int (e - |w|^2/(2r))^2
  double oscil_ratio_grid = 0.0;
};

/// Space-time integral of (e - |w|^2/(2r))^2, trapezoid in time.
template <int N>
double gap_square_integral(const CoefficientField<N>& cf) {
  std::vector<double> per(cf.e.nt());
  for (std::size_t kt = 0; kt < cf.e.nt(); ++kt) {
    double s = 0.0;
    for (std::size_t p = 0; p < cf.grid().size(); ++p) {
      const auto c = cf.at(kt, p);
      const double gap = c.e - 0.5 * c.w.squaredNorm() / c.r;
      s += gap * gap;
    }
    per[kt] = s / static_cast<double>(cf.grid().size());
  }
  return trapezoid(cf.times(), per);
}

template <int N>
ContinuousIncrement<N> increment_continuous(const CoefficientField<N>& cf, int n, std::uint64_t seed,
                                            const OscOptions& opt = {}, int min_cell_points = 2) {
  if (!(cf.delta > 0.0)) throw PreconditionError("margin delta must be positive");
  if (!within_bounds<N>(cf)) throw PreconditionError("coefficients violate their deterministic bounds");
  if (!(membership_margin<N>(cf) >= 0.0)) throw PreconditionError("coefficients are not in S[e - delta]");
  const auto& g = cf.grid();
  const std::size_t steps = cf.times().size() - 1;
  ContinuousIncrement<N> out;
  Approximation<N> ap;
  for (int m = 1;; m *= 2) {
    if (g.res / m < min_cell_points || g.res % m != 0 || steps % static_cast<std::size_t>(m) != 0)
      throw RefinementError("cannot reach delta_ap < delta/4 at this resolution; use a finer grid");
    ap = approx_piecewise<N>(cf, m);
    if (ap.delta_ap < 0.25 * cf.delta) {
      out.m = m;
      break;
    }
  }
  out.delta_ap = ap.delta_ap;
  // cells decide on their own (adapted) constants; the true field is only used afterwards
  out.piecewise = increment_piecewise<N>(ap.pc, n, seed, g, cf.times(), opt);

  const auto& wn = out.piecewise.fields.w;
  const auto& Vn = out.piecewise.fields.V;
  double dn = std::numeric_limits<double>::infinity();
  std::vector<double> per(cf.e.nt());
  for (std::size_t kt = 0; kt < cf.e.nt(); ++kt) {
    double s = 0.0;
    for (std::size_t p = 0; p < g.size(); ++p) {
      const auto c = cf.at(kt, p);
      const Vec<N> w = c.w + wn[kt].vec(p);
      const Mat<N> H = c.H + Vn[kt].mat(p);
      dn = std::min(dn, c.e - s_value<N>(w / std::sqrt(c.r), H));
      s += wn[kt].vec(p).squaredNorm() / c.r;
    }
    per[kt] = s / static_cast<double>(g.size());
  }
  out.delta_n = dn;
  const double denom = gap_square_integral<N>(cf) / cf.bounds.e_hi;
  out.oscil_ratio = denom > 0.0 ? out.piecewise.energy / denom : 0.0;
  out.oscil_ratio_grid = denom > 0.0 ? trapezoid(cf.times(), per) / denom : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Calibration of the energy constant

struct EnergyCalibration {
  double min_ratio = 0.0;
  double median_ratio = 0.0;
  int samples = 0;
};

/// e |w_n|^2-mean / (e - |w|^2/2)^2 of the planned unit increment at frequency n.
template <int N>
EnergyCalibration calibrate_energy(int samples, std::uint64_t seed, int n, double min_def_frac = 0.05,
                                   const OscOptions& opt = {}) {
  std::mt19937_64 gen(seed);
  std::vector<double> ratios;
  for (int i = 0; i < samples; ++i) {
    const auto p = sample_interior<N>(gen, 1.0, min_def_frac);
    const auto inc = plan_cell<N>({p.e, 1.0, p.w, p.H}, unit_box<N>(), n, detail::mix64(seed * 7919 + i), opt);
    const double gap = p.e - 0.5 * p.w.squaredNorm();
    ratios.push_back(inc.energy / inc.box_volume * p.e / (gap * gap));
  }
  EnergyCalibration out;
  out.samples = samples;
  if (ratios.empty()) return out;
  std::sort(ratios.begin(), ratios.end());
  out.min_ratio = ratios.front();
  out.median_ratio = ratios[ratios.size() / 2];
  return out;
}

}  // namespace convint
