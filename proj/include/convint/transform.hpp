#pragma once

// Reduction of the stochastic system to the abstract Euler frame: initial-data
// split, continuity solves, the V equation, elliptic correctors and the
// back-transformation with weak residuals.

#include <algorithm>
#include <functional>
#include <numbers>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "convint/stochastics.hpp"
#include "convint/torus.hpp"
#include "convint/waves.hpp"

namespace convint {

struct FrameError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class NoiseKind { Additive, Multiplicative };

inline const char* to_string(NoiseKind k) { return k == NoiseKind::Additive ? "additive" : "multiplicative"; }
inline NoiseKind noise_kind_from(const std::string& s) {
  if (s == "additive") return NoiseKind::Additive;
  if (s == "multiplicative") return NoiseKind::Multiplicative;
  throw std::invalid_argument("unknown noise kind " + s);
}

struct PressureLaw {
  double kappa = 1.0;
  double gamma = 2.0;
  double operator()(double rho) const { return kappa * std::pow(rho, gamma); }
};

template <int N>
ScalarField<N> pressure_field(const ScalarField<N>& rho, const PressureLaw& law) {
  ScalarField<N> p(rho.grid);
  for (std::size_t i = 0; i < rho.size(); ++i) p(0, i) = law(rho(0, i));
  return p;
}

// ---------------------------------------------------------------------------
// Spectral derivative tables and local Taylor evaluation

/// All partial derivatives up to `order` of a scalar field, ordered as multi_indices<N>(order).
template <int N>
struct DerivTable {
  std::vector<MultiIndex<N>> list;
  std::vector<ScalarField<N>> d;
  std::vector<double> inv_fact;  // 1 / alpha!
};

template <int N>
DerivTable<N> derivative_table(const ScalarField<N>& f, int order) {
  DerivTable<N> t;
  t.list = multi_indices<N>(order);
  const auto s = fft(f.grid, f.comp(0));
  const cplx iu(0.0, 1.0);
  for (const auto& al : t.list) {
    Spectrum<N> c = s;
    int o = 0;
    double fact = 1.0;
    for (int dd = 0; dd < N; ++dd) {
      o += al[dd];
      for (int j = 2; j <= al[dd]; ++j) fact *= j;
    }
    cplx ipow = 1.0;
    for (int k = 0; k < o; ++k) ipow *= iu;
    for (std::size_t p = 0; p < c.c.size(); ++p) {
      const Vec<N> xi = mode_symbol(f.grid, p);
      double m = 1.0;
      for (int dd = 0; dd < N; ++dd) m *= std::pow(xi[dd], al[dd]);
      c.c[p] *= ipow * m;
    }
    ScalarField<N> out(f.grid);
    ifft(c, out.comp(0));
    t.d.push_back(std::move(out));
    t.inv_fact.push_back(1.0 / fact);
  }
  return t;
}

/// f(x_p + e) by the Taylor polynomial of the table around grid node p.
template <int N>
double taylor_eval(const DerivTable<N>& t, std::size_t p, const Vec<N>& e) {
  double s = 0.0;
  for (std::size_t k = 0; k < t.list.size(); ++k) {
    double m = t.inv_fact[k];
    for (int dd = 0; dd < N; ++dd)
      for (int j = 0; j < t.list[k][dd]; ++j) m *= e[dd];
    s += t.d[k](0, p) * m;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Initial data

template <int N>
struct InitialData {
  ScalarField<N> rho0;
  VectorField<N> mom0;
  double D = 0.0;
};

/// Discrete C^3 surrogate: max over |alpha| <= 3 of sup |d^alpha f|, spectral derivatives.
template <int N>
double c3_norm(const ScalarField<N>& f) {
  const auto t = derivative_table<N>(f, 3);
  double m = 0.0;
  for (const auto& d : t.d) m = std::max(m, d.max_abs());
  return m;
}

template <int N>
struct IndataReport {
  double c3_rho = 0.0, c3_mom = 0.0, inv_rho = 0.0;
  double high_mode = 0.0;  // largest spectral energy fraction above res/4
  double total = 0.0;
  bool ok = false;
};

template <int N>
IndataReport<N> check_indata(const InitialData<N>& in, double high_mode_tol = 1e-6) {
  IndataReport<N> r;
  r.c3_rho = c3_norm(in.rho0);
  r.high_mode = high_mode_fraction(in.rho0);
  for (int d = 0; d < N; ++d) {
    const auto c = component(in.mom0, d);
    r.c3_mom = std::max(r.c3_mom, c3_norm(c));
    r.high_mode = std::max(r.high_mode, high_mode_fraction(c));
  }
  double rmin = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < in.rho0.size(); ++p) rmin = std::min(rmin, in.rho0(0, p));
  r.inv_rho = rmin > 0.0 ? 1.0 / rmin : std::numeric_limits<double>::infinity();
  r.total = r.c3_rho + r.c3_mom + r.inv_rho;
  r.ok = rmin > 0.0 && r.total <= in.D && r.high_mode <= high_mode_tol;
  return r;
}

template <int N>
struct InitialSplit {
  VectorField<N> v0;
  Vec<N> V0 = Vec<N>::Zero();
  ScalarField<N> Psi0;
  double reassembly_error = 0.0;
};

template <int N>
InitialSplit<N> split_initial(const VectorField<N>& mom0) {
  auto hp = helmholtz_project(mom0);
  InitialSplit<N> s{std::move(hp.solenoidal), hp.mean, std::move(hp.potential), 0.0};
  const auto gp = gradient(s.Psi0);
  double err = 0.0;
  for (std::size_t p = 0; p < mom0.size(); ++p)
    err = std::max(err, (s.v0.vec(p) + s.V0 + gp.vec(p) - mom0.vec(p)).cwiseAbs().maxCoeff());
  s.reassembly_error = err;
  return s;
}

/// Time-constant extension of Psi0.
template <int N>
SpaceTimeField<N, 1> choose_psi(const ScalarField<N>& Psi0, const std::vector<double>& times) {
  SpaceTimeField<N, 1> psi;
  psi.times = times;
  psi.slices.assign(times.size(), Psi0);
  return psi;
}

/// Largest factor lambda with rho0 - lambda * growth * T * Laplace(Psi0) >= rho_min on the grid.
template <int N>
double psi_positivity_scale(const ScalarField<N>& rho0, const ScalarField<N>& Psi0, double rho_min, double T,
                            double growth = 1.0) {
  const auto L = laplacian(Psi0);
  double lam = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < rho0.size(); ++p) {
    const double room = rho0(0, p) - rho_min;
    const double push = growth * T * L(0, p);
    if (room < 0.0) return 0.0;
    if (push > 0.0) lam = std::min(lam, room / push);
  }
  return lam;
}

/// Named smooth initial data.  The gradient part of the momentum is scaled so that
/// the density stays above rho_min over [0, T] for the given growth factor.
template <int N>
InitialData<N> initial_preset(const std::string& name, const TorusGrid<N>& g, double T = 1.0, double rho_min = 0.5,
                              double growth = 1.0) {
  InitialData<N> in{ScalarField<N>(g), VectorField<N>(g), 0.0};
  auto tp = [](double x) { return kTwoPi * x; };
  if (name == "rest") {
    in.rho0 = sample<N>(g, [](const Vec<N>&) { return 1.0; });
  } else if (name == "smooth" || name == "shear") {
    const double sol = name == "shear" ? 0.6 : 0.3;
    in.rho0 = sample<N>(g, [&](const Vec<N>& x) {
      double v = 1.0 + 0.2 * std::cos(tp(x[0])) * std::sin(tp(x[1]));
      if constexpr (N == 3) v += 0.1 * std::sin(tp(x[2]));
      return v;
    });
    // solenoidal part: rotated gradient of a stream function in (x0, x1)
    VectorField<N> u(g);
    for (std::size_t p = 0; p < g.size(); ++p) {
      const Vec<N> x = g.point(p);
      Vec<N> v = Vec<N>::Zero();
      v[0] = sol * std::sin(tp(x[0])) * std::cos(tp(x[1]));
      v[1] = -sol * std::cos(tp(x[0])) * std::sin(tp(x[1]));
      if constexpr (N == 3) v[2] = 0.2 * sol * std::sin(tp(x[0]) + tp(x[1]));
      v[0] += 0.1;
      u.set_vec(p, v);
    }
    const auto phi = sample<N>(g, [&](const Vec<N>& x) { return std::cos(tp(x[0] + 2.0 * x[1])) / (kTwoPi * kTwoPi); });
    const double lam = std::min(1.0, 0.9 * psi_positivity_scale<N>(in.rho0, phi, rho_min, T, growth));
    const auto gp = gradient(phi);
    for (std::size_t p = 0; p < g.size(); ++p) u.set_vec(p, u.vec(p) + lam * gp.vec(p));
    in.mom0 = u;
  } else {
    throw std::invalid_argument("unknown initial-data preset " + name);
  }
  return in;
}

/// Named noise coefficient G (additive noise).
template <int N>
VectorField<N> noise_preset(const std::string& name, const TorusGrid<N>& g, double amp = 0.5) {
  VectorField<N> G(g);
  if (name == "zero") return G;
  if (name != "shear" && name != "smooth") throw std::invalid_argument("unknown noise preset " + name);
  for (std::size_t p = 0; p < g.size(); ++p) {
    const Vec<N> x = g.point(p);
    Vec<N> v = Vec<N>::Zero();
    v[0] = amp * std::sin(kTwoPi * x[1]);
    v[1] = amp * (name == "smooth" ? std::cos(kTwoPi * x[0]) : 0.5 * std::cos(kTwoPi * x[0]));
    if (name == "smooth") v[0] += 0.3 * amp * std::cos(kTwoPi * x[0]);
    G.set_vec(p, v);
  }
  return G;
}

/// sup |G| + sup |grad G|.
template <int N>
double w1inf_norm(const VectorField<N>& G) {
  double m = G.max_abs();
  double dm = 0.0;
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) dm = std::max(dm, derivative(component(G, i), j).max_abs());
  return m + dm;
}

// ---------------------------------------------------------------------------
// Continuity equations

template <int N>
struct ContinuitySolution {
  SpaceTimeField<N, 1> rho;  // on the frame times
  double mass_error = 0.0;   // max_t |int rho(t) - int rho0| / int rho0
  double rho_min = 0.0;
  double residual = 0.0;     // max over path steps of the step residual / dt
};

/// Frame times are every `stride`-th point of the path grid.
inline std::vector<double> frame_times(const StoppedPath& path, std::size_t stride) {
  if (stride == 0 || path.steps() % stride != 0) throw GridError("frame stride must divide the path grid");
  std::vector<double> t;
  for (std::size_t k = 0; k <= path.steps(); k += stride) t.push_back(path.base.time(k));
  return t;
}

template <int N>
void check_positive(ContinuitySolution<N>& sol, double rho_floor) {
  double m = std::numeric_limits<double>::infinity();
  for (const auto& s : sol.rho.slices)
    for (std::size_t p = 0; p < s.size(); ++p) m = std::min(m, s(0, p));
  sol.rho_min = m;
  if (!(m >= rho_floor))
    throw FrameError("density dropped below " + std::to_string(rho_floor) +
                     "; reduce the potential or noise amplitude, or shorten the horizon");
}

template <int N>
double mass_drift(const SpaceTimeField<N, 1>& rho) {
  const double m0 = integrate(rho[0]);
  double e = 0.0;
  for (const auto& s : rho.slices) e = std::max(e, std::abs(integrate(s) - m0));
  return e / std::abs(m0);
}

/// d rho/dt + Laplace(Psi) + beta div(rho G) = 0 by characteristics: each step, RK4 for
/// dx/dt = beta G(x), d rho/dt = -Laplace(Psi)(x) - beta rho div G(x) from every grid node
/// (beta linear in the step), then resampling of the transported values to the grid.
/// Off-grid values use third-order Taylor expansions with spectral derivatives.
template <int N>
ContinuitySolution<N> solve_continuity_additive(const ScalarField<N>& rho0, const ScalarField<N>& Psi0,
                                                const VectorField<N>& G, const StoppedPath& path, std::size_t stride,
                                                double rho_floor = 0.0) {
  constexpr int P = 3;
  const auto& g = rho0.grid;
  const double dt = path.dt();
  std::array<DerivTable<N>, N> Gt;
  for (int i = 0; i < N; ++i) Gt[i] = derivative_table<N>(component(G, i), P);
  const auto divG = derivative_table<N>(divergence(G), P);
  const auto lap = derivative_table<N>(laplacian(Psi0), P);
  const auto lap0 = laplacian(Psi0);

  ContinuitySolution<N> sol;
  sol.rho.times = frame_times(path, stride);
  sol.rho.slices.push_back(rho0);
  ScalarField<N> rho = rho0;
  const std::size_t n = g.size();
  std::vector<Vec<N>> disp(n);
  ScalarField<N> moved(g);
  double res = 0.0;
  auto step_div = [&](const ScalarField<N>& r) {
    VectorField<N> q(g);
    for (std::size_t p = 0; p < n; ++p) q.set_vec(p, r(0, p) * G.vec(p));
    return divergence(q);
  };
  ScalarField<N> dq_prev = step_div(rho);
  for (std::size_t k = 0; k < path.steps(); ++k) {
    const double b0 = path.values[k], b1 = path.values[k + 1], bm = 0.5 * (b0 + b1);
    const ScalarField<N> prev = rho;
    if (b0 == 0.0 && b1 == 0.0) {
      for (std::size_t p = 0; p < n; ++p) rho(0, p) -= dt * lap0(0, p);
    } else {
      for (std::size_t p = 0; p < n; ++p) {
        auto f = [&](const Vec<N>& d, double r, double b, Vec<N>& dx) {
          for (int i = 0; i < N; ++i) dx[i] = b * taylor_eval<N>(Gt[i], p, d);
          return -taylor_eval<N>(lap, p, d) - b * r * taylor_eval<N>(divG, p, d);
        };
        const Vec<N> d0 = Vec<N>::Zero();
        const double r0 = rho(0, p);
        Vec<N> k1, k2, k3, k4;
        const double l1 = f(d0, r0, b0, k1);
        const double l2 = f(d0 + 0.5 * dt * k1, r0 + 0.5 * dt * l1, bm, k2);
        const double l3 = f(d0 + 0.5 * dt * k2, r0 + 0.5 * dt * l2, bm, k3);
        const double l4 = f(d0 + dt * k3, r0 + dt * l3, b1, k4);
        disp[p] = dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        moved(0, p) = r0 + dt / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
      }
      // node j receives the value transported from label x with x + D(x) = x_j
      std::array<DerivTable<N>, N> Dt;
      for (int i = 0; i < N; ++i) {
        ScalarField<N> c(g);
        for (std::size_t p = 0; p < n; ++p) c(0, p) = disp[p][i];
        Dt[i] = derivative_table<N>(c, 1);
      }
      const auto mt = derivative_table<N>(moved, P);
      for (std::size_t p = 0; p < n; ++p) {
        Vec<N> e = -disp[p];
        for (int it = 0; it < 3; ++it) {
          Vec<N> De;
          for (int i = 0; i < N; ++i) De[i] = taylor_eval<N>(Dt[i], p, e);
          e = -De;
        }
        rho(0, p) = taylor_eval<N>(mt, p, e);
      }
    }
    const ScalarField<N> dq = step_div(rho);
    // trapezoid residual of the strong form over the step
    for (std::size_t p = 0; p < n; ++p) {
      const double r = (rho(0, p) - prev(0, p)) / dt + lap0(0, p) + 0.5 * (b0 * dq_prev(0, p) + b1 * dq(0, p));
      res = std::max(res, std::abs(r));
    }
    dq_prev = dq;
    if ((k + 1) % stride == 0) sol.rho.slices.push_back(rho);
  }
  sol.residual = res;
  sol.mass_error = mass_drift(sol.rho);
  check_positive(sol, rho_floor);
  return sol;
}

/// rho(t) = rho0 - (int_0^t exp(beta)) Laplace(Psi0), exact integral of exp of the linear interpolant.
template <int N>
ContinuitySolution<N> solve_continuity_multiplicative(const ScalarField<N>& rho0, const ScalarField<N>& Psi0,
                                                      const StoppedPath& path, std::size_t stride,
                                                      double rho_floor = 0.0) {
  const auto L = laplacian(Psi0);
  ContinuitySolution<N> sol;
  sol.rho.times = frame_times(path, stride);
  double I = 0.0;
  sol.rho.slices.push_back(rho0);
  for (std::size_t k = 0; k < path.steps(); ++k) {
    const double a = path.values[k], b = path.values[k + 1];
    I += std::abs(b - a) < 1e-12 ? path.dt() * std::exp(0.5 * (a + b)) : path.dt() * (std::exp(b) - std::exp(a)) / (b - a);
    if ((k + 1) % stride == 0) {
      ScalarField<N> r = rho0;
      for (std::size_t p = 0; p < r.size(); ++p) r(0, p) -= I * L(0, p);
      sol.rho.slices.push_back(std::move(r));
    }
  }
  sol.mass_error = mass_drift(sol.rho);
  check_positive(sol, rho_floor);
  return sol;
}

// ---------------------------------------------------------------------------
// V equations

template <int N>
Vec<N> v_rate_additive(const ScalarField<N>& rho, const VectorField<N>& G, const ScalarField<N>& Psi0, double beta) {
  // -mean[rho beta^2 (G . grad) G + beta grad G . grad Psi]
  const auto gp = gradient(Psi0);
  Vec<N> out = Vec<N>::Zero();
  for (int i = 0; i < N; ++i) {
    const auto Gi = component(G, i);
    ScalarField<N> acc(G.grid);
    for (int j = 0; j < N; ++j) {
      const auto dGi = derivative(Gi, j);
      for (std::size_t p = 0; p < acc.size(); ++p)
        acc(0, p) += rho(0, p) * beta * beta * G(j, p) * dGi(0, p) + beta * dGi(0, p) * gp(j, p);
    }
    out[i] = -integrate(acc);
  }
  return out;
}

/// RK4 on the path grid; rho and beta are linearly interpolated inside a step.
/// `rho_at(k)` gives the density at path index k.
template <int N, class RhoAt>
std::vector<Vec<N>> solve_V_additive(RhoAt&& rho_at, const VectorField<N>& G, const ScalarField<N>& Psi0,
                                     const StoppedPath& path, const Vec<N>& V0) {
  std::vector<Vec<N>> V{V0};
  const double dt = path.dt();
  ScalarField<N> r0 = rho_at(0);
  for (std::size_t k = 0; k < path.steps(); ++k) {
    ScalarField<N> r1 = rho_at(k + 1);
    ScalarField<N> rm = 0.5 * (r0 + r1);
    const double b0 = path.values[k], b1 = path.values[k + 1], bm = 0.5 * (b0 + b1);
    const Vec<N> f0 = v_rate_additive(r0, G, Psi0, b0);
    const Vec<N> fm = v_rate_additive(rm, G, Psi0, bm);
    const Vec<N> f1 = v_rate_additive(r1, G, Psi0, b1);
    // the right-hand side does not depend on V: RK4 reduces to Simpson
    V.push_back(V.back() + dt / 6.0 * (f0 + 4.0 * fm + f1));
    r0 = std::move(r1);
  }
  return V;
}

template <int N>
std::vector<Vec<N>> solve_V_multiplicative(const Vec<N>& V0, const std::vector<double>& times) {
  std::vector<Vec<N>> V;
  for (double t : times) V.push_back(V0 * std::exp(-0.5 * t));
  return V;
}

// ---------------------------------------------------------------------------
// Frame

template <int N>
struct FrameBounds {
  double r_min = 0.0, r_max = 0.0;
  double h_sup = 0.0, h_c1 = 0.0, h_holder = 0.0;
  double r_c1 = 0.0, r_holder = 0.0;
  double M_sup = 0.0, M_c1 = 0.0, M_holder = 0.0;
  double v0_c1 = 0.0;
  double c_M = 0.0;
};

template <int N>
struct AbstractEulerFrame {
  NoiseKind kind = NoiseKind::Additive;
  PressureLaw law;
  double a = 0.25;  // Hoelder exponent used for the time norms
  std::vector<double> times;
  std::vector<double> beta;  // stopped path at the frame times
  SpaceTimeField<N, N> h;
  SpaceTimeField<N, 1> r;
  SpaceTimeField<N, 1> rho;
  SpaceTimeField<N, sym_size(N)> Mt;  // additive: the corrector; multiplicative: part independent of v
  VectorField<N> v0;
  ScalarField<N> Psi0;
  std::vector<Vec<N>> V;
  VectorField<N> G;
  FrameBounds<N> bounds;
  double rhs_mean = 0.0;  // largest elliptic right-hand-side mean before the solve
  double elliptic_residual = 0.0;
  double elliptic_residual_band = 0.0;  // against the rhs without Nyquist modes
  double mass_error = 0.0;
  double v0_div = 0.0;

  const TorusGrid<N>& grid() const { return v0.grid; }
  /// Corrector seen by velocity v at slice kt; in the multiplicative frame it adds the solve of v/2.
  TensorField<N> corrector(std::size_t kt, const VectorField<N>* v = nullptr) const {
    if (kind == NoiseKind::Additive || v == nullptr) return Mt[kt];
    // v has zero mean; grid samples of unresolved packets do not, so the sampled mean is removed
    VectorField<N> half = 0.5 * (*v);
    const Vec<N> mean = mean_vector(half);
    for (std::size_t p = 0; p < half.grid.size(); ++p) half.set_vec(p, half.vec(p) - mean);
    TensorField<N> out = Mt[kt];
    out += solve_elliptic_m(half, 1e-9).Mt;
    return out;
  }
};

/// max over slices of sup_x |f|, sup_x |grad f| and the time Hoelder seminorm of sup_x |f(t_j) - f(t_i)|.
template <int N, int C>
std::array<double, 3> field_norms(const SpaceTimeField<N, C>& f, double a) {
  double sup = 0.0, c1 = 0.0, hol = 0.0;
  for (const auto& s : f.slices) {
    sup = std::max(sup, s.max_abs());
    for (int c = 0; c < C; ++c)
      for (int j = 0; j < N; ++j) c1 = std::max(c1, derivative(component(s, c), j).max_abs());
  }
  for (std::size_t i = 0; i < f.nt(); ++i)
    for (std::size_t j = i + 1; j < f.nt(); ++j) {
      double d = 0.0;
      for (std::size_t q = 0; q < f[i].data.size(); ++q) d = std::max(d, std::abs(f[j].data[q] - f[i].data[q]));
      hol = std::max(hol, d / std::pow(f.times[j] - f.times[i], a));
    }
  return {sup, c1, hol};
}

template <int N>
void measure_bounds(AbstractEulerFrame<N>& fr) {
  auto& b = fr.bounds;
  b.r_min = std::numeric_limits<double>::infinity();
  b.r_max = 0.0;
  for (const auto& s : fr.r.slices)
    for (std::size_t p = 0; p < s.size(); ++p) {
      b.r_min = std::min(b.r_min, s(0, p));
      b.r_max = std::max(b.r_max, s(0, p));
    }
  const auto hn = field_norms(fr.h, fr.a);
  const auto rn = field_norms(fr.r, fr.a);
  const auto mn = field_norms(fr.Mt, fr.a);
  b.h_sup = hn[0];
  b.h_c1 = hn[0] + hn[1];
  b.h_holder = hn[2];
  b.r_c1 = rn[0] + rn[1];
  b.r_holder = rn[2];
  b.M_sup = mn[0];
  b.M_c1 = mn[0] + mn[1];
  b.M_holder = mn[2];
  double v1 = fr.v0.max_abs();
  for (int c = 0; c < N; ++c)
    for (int j = 0; j < N; ++j) v1 = std::max(v1, fr.v0.max_abs() + derivative(component(fr.v0, c), j).max_abs());
  b.v0_c1 = v1;
  b.c_M = std::max({1.0 / b.r_min, b.h_c1 + b.h_holder, b.r_c1 + b.r_holder, b.M_c1 + b.M_holder, b.v0_c1});
}

struct FrameConfig {
  NoiseKind kind = NoiseKind::Additive;
  PressureLaw law;
  std::size_t stride = 16;  // path steps per frame step
  double rho_floor = 0.1;
};

/// rhs of the additive elliptic system at one slice, mean correction included.
template <int N>
VectorField<N> additive_rhs(const ScalarField<N>& rho, const VectorField<N>& G, const ScalarField<N>& Psi0, double beta,
                            const PressureLaw& law, double* raw_mean = nullptr) {
  const auto gp = gradient(pressure_field(rho, law));
  VectorField<N> q = gradient(Psi0);
  for (std::size_t p = 0; p < rho.size(); ++p) q.set_vec(p, q.vec(p) + rho(0, p) * beta * G.vec(p));
  const auto dq = divergence(q);
  VectorField<N> forcing(G.grid);  // beta div(q) G
  for (std::size_t p = 0; p < rho.size(); ++p) forcing.set_vec(p, beta * dq(0, p) * G.vec(p));
  const Vec<N> fm = mean_vector(forcing);
  VectorField<N> rhs(G.grid);
  for (std::size_t p = 0; p < rho.size(); ++p) rhs.set_vec(p, gp.vec(p) - forcing.vec(p) + fm);
  if (raw_mean) *raw_mean = mean_vector(rhs).cwiseAbs().maxCoeff();
  return rhs;
}

template <int N>
AbstractEulerFrame<N> assemble_frame(const InitialData<N>& in, const VectorField<N>& G, const StoppedPath& path,
                                     const FrameConfig& cfg) {
  const auto& g = in.rho0.grid;
  AbstractEulerFrame<N> fr;
  fr.kind = cfg.kind;
  fr.law = cfg.law;
  fr.a = path.a;
  fr.G = cfg.kind == NoiseKind::Additive ? G : VectorField<N>(g);
  const auto split = split_initial(in.mom0);
  fr.v0 = split.v0;
  fr.v0_div = divergence(fr.v0).max_abs();
  fr.Psi0 = split.Psi0;
  fr.times = frame_times(path, cfg.stride);
  for (std::size_t k = 0; k <= path.steps(); k += cfg.stride) fr.beta.push_back(path.values[k]);
  const std::size_t nt = fr.times.size();

  ContinuitySolution<N> cs;
  if (cfg.kind == NoiseKind::Additive) {
    // the V equation needs the density at every path step: solve once per frame step
    cs = solve_continuity_additive<N>(in.rho0, split.Psi0, fr.G, path, 1, cfg.rho_floor);
    fr.V = solve_V_additive<N>([&](std::size_t k) { return cs.rho[k]; }, fr.G, split.Psi0, path, split.V0);
    SpaceTimeField<N, 1> thin;
    thin.times = fr.times;
    std::vector<Vec<N>> Vt;
    for (std::size_t k = 0; k <= path.steps(); k += cfg.stride) {
      thin.slices.push_back(cs.rho[k]);
      Vt.push_back(fr.V[k]);
    }
    cs.rho = std::move(thin);
    fr.V = std::move(Vt);
  } else {
    cs = solve_continuity_multiplicative<N>(in.rho0, split.Psi0, path, cfg.stride, cfg.rho_floor);
    fr.V = solve_V_multiplicative<N>(split.V0, fr.times);
  }
  fr.rho = cs.rho;
  fr.mass_error = cs.mass_error;

  fr.h = SpaceTimeField<N, N>(g, fr.times);
  fr.r = SpaceTimeField<N, 1>(g, fr.times);
  fr.Mt = SpaceTimeField<N, sym_size(N)>(g, fr.times);
  const auto gpsi = gradient(split.Psi0);
  for (std::size_t kt = 0; kt < nt; ++kt) {
    const double b = fr.beta[kt];
    const auto& rho = fr.rho[kt];
    VectorField<N> rhs(g);
    double raw = 0.0;
    if (cfg.kind == NoiseKind::Additive) {
      for (std::size_t p = 0; p < g.size(); ++p) {
        fr.h[kt].set_vec(p, rho(0, p) * b * fr.G.vec(p) + fr.V[kt] + gpsi.vec(p));
        fr.r[kt](0, p) = rho(0, p);
      }
      rhs = additive_rhs<N>(rho, fr.G, split.Psi0, b, cfg.law, &raw);
    } else {
      const double eb = std::exp(-b);
      for (std::size_t p = 0; p < g.size(); ++p) {
        fr.h[kt].set_vec(p, fr.V[kt] + gpsi.vec(p));
        fr.r[kt](0, p) = rho(0, p) * eb;
      }
      const auto gp = gradient(pressure_field(rho, cfg.law));
      for (std::size_t p = 0; p < g.size(); ++p) rhs.set_vec(p, eb * gp.vec(p) + 0.5 * gpsi.vec(p));
      raw = mean_vector(rhs).cwiseAbs().maxCoeff();
    }
    fr.rhs_mean = std::max(fr.rhs_mean, raw);
    auto sol = solve_elliptic_m(rhs);
    fr.elliptic_residual = std::max(fr.elliptic_residual, elliptic_residual(sol.Mt, rhs));
    fr.elliptic_residual_band = std::max(fr.elliptic_residual_band, elliptic_residual_band(sol.Mt, rhs));
    fr.Mt[kt] = std::move(sol.Mt);
    fr.Mt[kt].traceless = true;
  }
  measure_bounds(fr);
  return fr;
}

// ---------------------------------------------------------------------------
// Test functions and weak residuals

/// The `count` lowest Fourier modes k (by |k|^2, then lexicographic), as cos(2 pi k.x + pi/4).
template <int N>
std::vector<std::array<int, N>> test_modes(int count = 25) {
  std::vector<std::array<int, N>> ks;
  std::array<int, N> k;
  std::function<void(int)> rec = [&](int d) {
    if (d == N) {
      ks.push_back(k);
      return;
    }
    for (int v = -2; v <= 2; ++v) {
      k[d] = v;
      rec(d + 1);
    }
  };
  rec(0);
  auto norm2 = [](const std::array<int, N>& a) {
    int s = 0;
    for (int v : a) s += v * v;
    return s;
  };
  std::stable_sort(ks.begin(), ks.end(), [&](const auto& a, const auto& b) { return norm2(a) < norm2(b); });
  ks.resize(std::min<std::size_t>(ks.size(), static_cast<std::size_t>(count)));
  return ks;
}

template <int N>
struct TestFunction {
  ScalarField<N> phi;
  VectorField<N> grad;
};

template <int N>
std::vector<TestFunction<N>> test_family(const TorusGrid<N>& g, int count = 25) {
  std::vector<TestFunction<N>> out;
  for (const auto& k : test_modes<N>(count)) {
    TestFunction<N> tf{ScalarField<N>(g), VectorField<N>(g)};
    for (std::size_t p = 0; p < g.size(); ++p) {
      const Vec<N> x = g.point(p);
      double arg = 0.25 * std::numbers::pi;
      for (int d = 0; d < N; ++d) arg += kTwoPi * k[d] * x[d];
      tf.phi(0, p) = std::cos(arg);
      Vec<N> gr;
      for (int d = 0; d < N; ++d) gr[d] = -kTwoPi * k[d] * std::sin(arg);
      tf.grad.set_vec(p, gr);
    }
    out.push_back(std::move(tf));
  }
  return out;
}

/// Linear interpolation of frame-time samples y onto path time t.
inline double interp_frame(const std::vector<double>& times, const std::vector<double>& y, double t) {
  if (t <= times.front()) return y.front();
  if (t >= times.back()) return y.back();
  const auto it = std::upper_bound(times.begin(), times.end(), t);
  const std::size_t j = static_cast<std::size_t>(it - times.begin());
  const double w = (t - times[j - 1]) / (times[j] - times[j - 1]);
  return (1.0 - w) * y[j - 1] + w * y[j];
}

struct WeakResidualReport {
  double continuity = 0.0;  // max over t and test functions
  double momentum = 0.0;
  double mass_gap = 0.0;    // constant test function
  double initial = 0.0;     // |rho(0) - rho0| + |m(0) - m0| at the grid
};

template <int N>
struct PhysicalState {
  SpaceTimeField<N, 1> rho;
  SpaceTimeField<N, N> mom;
};

/// (rho, rho u) from v: additive rho u = v + h, multiplicative rho u = exp(beta) (v + h).
template <int N>
PhysicalState<N> back_transform(const AbstractEulerFrame<N>& fr, const SpaceTimeField<N, N>& v) {
  PhysicalState<N> s{fr.rho, SpaceTimeField<N, N>(fr.grid(), fr.times)};
  for (std::size_t kt = 0; kt < fr.times.size(); ++kt) {
    const double f = fr.kind == NoiseKind::Additive ? 1.0 : std::exp(fr.beta[kt]);
    s.mom[kt] = v[kt];
    s.mom[kt] += fr.h[kt];
    s.mom[kt] *= f;
  }
  return s;
}

/// Weak residuals of the original equations: continuity against phi, momentum against phi e_i,
/// stochastic integral as a forward (Ito) sum on the path grid with the integrand interpolated
/// linearly between frame times.
/// The continuity flux is split as A(t) + b(t) B(t) with b = beta (additive) or exp(beta)
/// (multiplicative) taken on the path grid and A, B interpolated between frame times.
/// `cont_mom` replaces st.mom in the continuity flux and `cont_extra[j][kt]` is added to that flux
/// (used for parts of the momentum whose pairings are known exactly).
template <int N>
WeakResidualReport weak_residuals(const AbstractEulerFrame<N>& fr, const PhysicalState<N>& st, const StoppedPath& path,
                                  const InitialData<N>& in, int count = 25,
                                  const SpaceTimeField<N, N>* cont_mom = nullptr,
                                  const std::vector<std::vector<double>>* cont_extra = nullptr) {
  const auto& g = fr.grid();
  const auto tf = test_family<N>(g, count);
  const std::size_t nt = fr.times.size();
  WeakResidualReport rep;
  for (std::size_t p = 0; p < g.size(); ++p) {
    rep.initial = std::max(rep.initial, std::abs(st.rho[0](0, p) - in.rho0(0, p)));
    rep.initial = std::max(rep.initial, (st.mom[0].vec(p) - in.mom0.vec(p)).cwiseAbs().maxCoeff());
  }
  // per slice: u = m / rho, flux pieces
  for (std::size_t j = 0; j < tf.size(); ++j) {
    const auto& f = tf[j];
    std::vector<double> rho_phi(nt), cont_flux(nt), rough(nt);
    std::array<std::vector<double>, N> mom_phi, mom_flux, noise;
    for (int i = 0; i < N; ++i) {
      mom_phi[i].resize(nt);
      mom_flux[i].resize(nt);
      noise[i].resize(nt);
    }
    for (std::size_t kt = 0; kt < nt; ++kt) {
      const auto& rho = st.rho[kt];
      const auto& m = st.mom[kt];
      const auto& mc = cont_mom ? (*cont_mom)[kt] : m;
      double a = 0.0, c = 0.0, rg = 0.0;
      std::array<double, N> mp{}, mf{}, nz{};
      for (std::size_t p = 0; p < g.size(); ++p) {
        const double r = rho(0, p);
        const Vec<N> mv = m.vec(p);
        const Vec<N> gr = f.grad.vec(p);
        const double ph = f.phi(0, p);
        a += r * ph;
        c += mc.vec(p).dot(gr);
        if (fr.kind == NoiseKind::Additive) rg += r * fr.G.vec(p).dot(gr);
        const double pr = fr.law(r);
        for (int i = 0; i < N; ++i) {
          mp[i] += mv[i] * ph;
          // (rho u (x) u : grad(phi e_i)) + p div(phi e_i) = m_i (m . grad phi) / rho + p d_i phi
          mf[i] += mv[i] * mv.dot(gr) / r + pr * gr[i];
          nz[i] += fr.kind == NoiseKind::Additive ? r * fr.G(i, p) * ph : mv[i] * ph;
        }
      }
      const double w = 1.0 / static_cast<double>(g.size());
      rho_phi[kt] = a * w;
      cont_flux[kt] = c * w + (cont_extra ? (*cont_extra)[j][kt] : 0.0);
      if (fr.kind == NoiseKind::Additive) {
        rough[kt] = rg * w;
        cont_flux[kt] -= fr.beta[kt] * rough[kt];
      } else {
        rough[kt] = std::exp(-fr.beta[kt]) * cont_flux[kt];
        cont_flux[kt] = 0.0;
      }
      for (int i = 0; i < N; ++i) {
        mom_phi[i][kt] = mp[i] * w;
        mom_flux[i][kt] = mf[i] * w;
        noise[i][kt] = nz[i] * w;
      }
    }
    auto cumtrap = [&](const std::vector<double>& y) {
      std::vector<double> c(nt, 0.0);
      for (std::size_t k = 1; k < nt; ++k) c[k] = c[k - 1] + 0.5 * (y[k] + y[k - 1]) * (fr.times[k] - fr.times[k - 1]);
      return c;
    };
    auto cf = cumtrap(cont_flux);
    {
      // int_0^t b(s) B(s) ds on the path grid: exact step integral of b (beta linear in the step)
      // times the step mean of B
      auto bint = [&](std::size_t k, double dt) {
        const double x0 = path.values[k], x1 = path.values[k + 1];
        if (fr.kind == NoiseKind::Additive) return 0.5 * dt * (x0 + x1);
        return std::abs(x1 - x0) < 1e-12 ? dt * std::exp(0.5 * (x0 + x1)) : dt * (std::exp(x1) - std::exp(x0)) / (x1 - x0);
      };
      const std::size_t stride = path.steps() / (nt - 1);
      double acc = 0.0;
      std::size_t next = 1;
      for (std::size_t k = 0; k < path.steps(); ++k) {
        const double t0 = path.base.time(k), t1 = path.base.time(k + 1);
        acc += bint(k, t1 - t0) * 0.5 * (interp_frame(fr.times, rough, t0) + interp_frame(fr.times, rough, t1));
        if ((k + 1) % stride == 0) cf[next++] += acc;
      }
    }
    double rho0_phi = 0.0;
    for (std::size_t p = 0; p < g.size(); ++p) rho0_phi += in.rho0(0, p) * f.phi(0, p);
    rho0_phi /= static_cast<double>(g.size());
    for (std::size_t kt = 0; kt < nt; ++kt) rep.continuity = std::max(rep.continuity, std::abs(rho_phi[kt] - rho0_phi - cf[kt]));
    for (int i = 0; i < N; ++i) {
      const auto mfc = cumtrap(mom_flux[i]);
      double m0 = 0.0;
      for (std::size_t p = 0; p < g.size(); ++p) m0 += in.mom0(i, p) * f.phi(0, p);
      m0 /= static_cast<double>(g.size());
      // Ito sum on the path grid, sampled at frame times
      std::vector<double> ito(nt, 0.0);
      double acc = 0.0;
      std::size_t next = 1;
      const std::size_t stride = path.steps() / (nt - 1);
      for (std::size_t k = 0; k < path.steps(); ++k) {
        const double t = path.base.time(k);
        acc += interp_frame(fr.times, noise[i], t) * (path.values[k + 1] - path.values[k]);
        if ((k + 1) % stride == 0) ito[next++] = acc;
      }
      for (std::size_t kt = 0; kt < nt; ++kt)
        rep.momentum = std::max(rep.momentum, std::abs(mom_phi[i][kt] - m0 - mfc[kt] - ito[kt]));
    }
  }
  for (std::size_t kt = 0; kt < nt; ++kt)
    rep.mass_gap = std::max(rep.mass_gap, std::abs(integrate(st.rho[kt]) - integrate(in.rho0)));
  return rep;
}

// ---------------------------------------------------------------------------
// Ito reconstruction

/// rho(t) = rho0 + A sin(2 pi t) q, rho u = -2 pi A cos(2 pi t) grad(Laplace^{-1} q) + u_s; satisfies
/// the continuity equation exactly.
template <int N>
struct ManufacturedFlow {
  ScalarField<N> rho0, q;
  VectorField<N> grad_inv_q, us;
  double A = 0.3;
};

template <int N>
ManufacturedFlow<N> manufactured_flow(const TorusGrid<N>& g) {
  ManufacturedFlow<N> mf;
  mf.rho0 = sample<N>(g, [](const Vec<N>& x) { return 1.0 + 0.2 * std::sin(kTwoPi * x[0]); });
  mf.q = sample<N>(g, [](const Vec<N>& x) { return std::cos(kTwoPi * x[0]) * std::sin(kTwoPi * x[1]); });
  // Laplace^{-1} q = -q / (8 pi^2)
  mf.grad_inv_q = gradient(sample<N>(g, [](const Vec<N>& x) {
    return -std::cos(kTwoPi * x[0]) * std::sin(kTwoPi * x[1]) / (2.0 * kTwoPi * kTwoPi);
  }));
  mf.us = sample_vector<N>(g, [](const Vec<N>& x) {
    Vec<N> v = Vec<N>::Zero();
    v[0] = 0.3 * std::sin(kTwoPi * x[1]);
    v[1] = 0.2;
    return v;
  });
  return mf;
}

struct ItoGap {
  double dt = 0.0;
  double ito_sum = 0.0;
  double transformed = 0.0;
  double gap = 0.0;
};

/// Ito sum sum_k (int rho G.phi)(t_k) d beta_k against
/// (int rho G.phi)(T) beta(T) - int_0^T beta int rho u . grad(G.phi) dt (trapezoid), on the given path grid.
template <int N>
ItoGap ito_reconstruction_check(const ManufacturedFlow<N>& mf, const VectorField<N>& G, const VectorField<N>& phi,
                                const std::vector<double>& beta, double dt) {
  const auto& g = G.grid;
  ScalarField<N> Gphi(g);
  for (std::size_t p = 0; p < g.size(); ++p) Gphi(0, p) = G.vec(p).dot(phi.vec(p));
  const auto grad_Gphi = gradient(Gphi);
  double F0 = 0.0, F1 = 0.0, P0 = 0.0, P1 = 0.0;
  for (std::size_t p = 0; p < g.size(); ++p) {
    F0 += mf.rho0(0, p) * Gphi(0, p);
    F1 += mf.q(0, p) * Gphi(0, p);
    P0 += mf.us.vec(p).dot(grad_Gphi.vec(p));
    P1 += mf.grad_inv_q.vec(p).dot(grad_Gphi.vec(p));
  }
  const double w = 1.0 / static_cast<double>(g.size());
  F0 *= w, F1 *= w, P0 *= w, P1 *= w;
  auto f = [&](double t) { return F0 + mf.A * std::sin(kTwoPi * t) * F1; };
  auto pflux = [&](double t) { return P0 - kTwoPi * mf.A * std::cos(kTwoPi * t) * P1; };
  ItoGap out;
  out.dt = dt;
  const std::size_t K = beta.size() - 1;
  double quad = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double t0 = k * dt, t1 = (k + 1) * dt;
    out.ito_sum += f(t0) * (beta[k + 1] - beta[k]);
    quad += 0.5 * dt * (beta[k] * pflux(t0) + beta[k + 1] * pflux(t1));
  }
  out.transformed = f(K * dt) * beta[K] - quad;
  out.gap = out.ito_sum - out.transformed;
  return out;
}

}  // namespace convint
