#pragma once

// Periodic fields on the unit torus T^N, spectral calculus backed by FFTW,
// the Helmholtz split and the elliptic corrector solve.

#include <fftw3.h>

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace convint {

using cplx = std::complex<double>;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

template <int N>
using Vec = Eigen::Matrix<double, N, 1>;
template <int N>
using Mat = Eigen::Matrix<double, N, N>;

constexpr int sym_size(int N) { return N * (N + 1) / 2; }

/// Position of entry (i, j) in upper-triangle storage, row by row.
template <int N>
constexpr int sym_index(int i, int j) {
  if (i > j) std::swap(i, j);
  return i * N - i * (i - 1) / 2 + (j - i);
}

struct MeanError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <int N>
struct TorusGrid {
  static_assert(N == 2 || N == 3, "torus dimension must be 2 or 3");
  int res = 16;

  TorusGrid() = default;
  explicit TorusGrid(int r) : res(r) {
    if (r < 8 || (r & (r - 1)) != 0) throw std::invalid_argument("resolution must be a power of two >= 8");
  }
  std::size_t size() const {
    std::size_t s = 1;
    for (int d = 0; d < N; ++d) s *= static_cast<std::size_t>(res);
    return s;
  }
  double h() const { return 1.0 / res; }
  std::array<int, N> index(std::size_t flat) const {
    std::array<int, N> ix{};
    for (int d = N - 1; d >= 0; --d) {
      ix[d] = static_cast<int>(flat % static_cast<std::size_t>(res));
      flat /= static_cast<std::size_t>(res);
    }
    return ix;
  }
  std::size_t flat(const std::array<int, N>& ix) const {
    std::size_t f = 0;
    for (int d = 0; d < N; ++d) f = f * static_cast<std::size_t>(res) + static_cast<std::size_t>(((ix[d] % res) + res) % res);
    return f;
  }
  Vec<N> point(std::size_t flat_index) const {
    auto ix = index(flat_index);
    Vec<N> x;
    for (int d = 0; d < N; ++d) x[d] = ix[d] * h();
    return x;
  }
  bool operator==(const TorusGrid&) const = default;
};

/// C samples per grid point, component-major.
template <int N, int C>
struct Field {
  TorusGrid<N> grid;
  std::vector<double> data;
  bool traceless = false;  // meaningful for tensor fields only

  Field() = default;
  explicit Field(const TorusGrid<N>& g, double fill = 0.0) : grid(g), data(g.size() * C, fill) {}

  static constexpr int components = C;
  std::size_t size() const { return grid.size(); }
  double* comp(int c) { return data.data() + static_cast<std::size_t>(c) * size(); }
  const double* comp(int c) const { return data.data() + static_cast<std::size_t>(c) * size(); }
  double& operator()(int c, std::size_t p) { return data[static_cast<std::size_t>(c) * size() + p]; }
  double operator()(int c, std::size_t p) const { return data[static_cast<std::size_t>(c) * size() + p]; }

  Vec<N> vec(std::size_t p) const
    requires(C == N)
  {
    Vec<N> v;
    for (int i = 0; i < N; ++i) v[i] = (*this)(i, p);
    return v;
  }
  void set_vec(std::size_t p, const Vec<N>& v)
    requires(C == N)
  {
    for (int i = 0; i < N; ++i) (*this)(i, p) = v[i];
  }
  Mat<N> mat(std::size_t p) const
    requires(C == sym_size(N))
  {
    Mat<N> m;
    for (int i = 0; i < N; ++i)
      for (int j = i; j < N; ++j) m(i, j) = m(j, i) = (*this)(sym_index<N>(i, j), p);
    return m;
  }
  void set_mat(std::size_t p, const Mat<N>& m)
    requires(C == sym_size(N))
  {
    for (int i = 0; i < N; ++i)
      for (int j = i; j < N; ++j) (*this)(sym_index<N>(i, j), p) = 0.5 * (m(i, j) + m(j, i));
  }

  Field& operator+=(const Field& o) {
    for (std::size_t k = 0; k < data.size(); ++k) data[k] += o.data[k];
    return *this;
  }
  Field& operator-=(const Field& o) {
    for (std::size_t k = 0; k < data.size(); ++k) data[k] -= o.data[k];
    return *this;
  }
  Field& operator*=(double s) {
    for (auto& x : data) x *= s;
    return *this;
  }
  friend Field operator+(Field a, const Field& b) { return a += b; }
  friend Field operator-(Field a, const Field& b) { return a -= b; }
  friend Field operator*(double s, Field a) { return a *= s; }

  double max_abs() const {
    double m = 0.0;
    for (double x : data) m = std::max(m, std::abs(x));
    return m;
  }
};

template <int N>
using ScalarField = Field<N, 1>;
template <int N>
using VectorField = Field<N, N>;
template <int N>
using TensorField = Field<N, sym_size(N)>;

/// Largest |trace| over samples of a tensor field.
template <int N>
double max_trace(const TensorField<N>& t) {
  double m = 0.0;
  for (std::size_t p = 0; p < t.size(); ++p) {
    double tr = 0.0;
    for (int i = 0; i < N; ++i) tr += t(sym_index<N>(i, i), p);
    m = std::max(m, std::abs(tr));
  }
  return m;
}

/// Forces trace zero exactly by defining the last diagonal entry.
template <int N>
void make_traceless(TensorField<N>& t) {
  for (std::size_t p = 0; p < t.size(); ++p) {
    double s = 0.0;
    for (int i = 0; i < N - 1; ++i) s += t(sym_index<N>(i, i), p);
    t(sym_index<N>(N - 1, N - 1), p) = -s;
  }
  t.traceless = true;
}

/// One spatial field per slice on a uniform time grid.
template <int N, int C>
struct SpaceTimeField {
  std::vector<double> times;
  std::vector<Field<N, C>> slices;

  SpaceTimeField() = default;
  SpaceTimeField(const TorusGrid<N>& g, const std::vector<double>& t, double fill = 0.0)
      : times(t), slices(t.size(), Field<N, C>(g, fill)) {}
  std::size_t nt() const { return times.size(); }
  const TorusGrid<N>& grid() const { return slices.front().grid; }
  double dt() const { return times.size() > 1 ? times[1] - times[0] : 0.0; }
  Field<N, C>& operator[](std::size_t k) { return slices[k]; }
  const Field<N, C>& operator[](std::size_t k) const { return slices[k]; }
  double max_abs() const {
    double m = 0.0;
    for (const auto& s : slices) m = std::max(m, s.max_abs());
    return m;
  }
};

inline std::vector<double> uniform_times(double T, std::size_t steps) {
  std::vector<double> t(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k) t[k] = T * static_cast<double>(k) / static_cast<double>(steps);
  return t;
}

// ---------------------------------------------------------------------------
// FFT backend

namespace detail {

struct FftPlan {
  int n_total = 0;
  fftw_complex* buf = nullptr;
  fftw_plan fwd = nullptr;
  fftw_plan bwd = nullptr;
  FftPlan(int N, int res) {
    std::vector<int> dims(N, res);
    n_total = 1;
    for (int d = 0; d < N; ++d) n_total *= res;
    buf = fftw_alloc_complex(static_cast<std::size_t>(n_total));
    fwd = fftw_plan_dft(N, dims.data(), buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
    bwd = fftw_plan_dft(N, dims.data(), buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  ~FftPlan() {
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(bwd);
    fftw_free(buf);
  }
  FftPlan(const FftPlan&) = delete;
  FftPlan& operator=(const FftPlan&) = delete;
};

inline FftPlan& plan_for(int N, int res) {
  static std::map<std::pair<int, int>, std::unique_ptr<FftPlan>> cache;
  auto& slot = cache[{N, res}];
  if (!slot) slot = std::make_unique<FftPlan>(N, res);
  return *slot;
}

}  // namespace detail

/// Fourier coefficients of a real field, unnormalized forward DFT.
template <int N>
struct Spectrum {
  TorusGrid<N> grid;
  std::vector<cplx> c;
};

template <int N>
Spectrum<N> fft(const TorusGrid<N>& g, const double* x) {
  auto& P = detail::plan_for(N, g.res);
  for (int k = 0; k < P.n_total; ++k) {
    P.buf[k][0] = x[k];
    P.buf[k][1] = 0.0;
  }
  fftw_execute(P.fwd);
  Spectrum<N> s{g, std::vector<cplx>(static_cast<std::size_t>(P.n_total))};
  for (int k = 0; k < P.n_total; ++k) s.c[k] = cplx(P.buf[k][0], P.buf[k][1]);
  return s;
}

template <int N>
void ifft(const Spectrum<N>& s, double* out) {
  auto& P = detail::plan_for(N, s.grid.res);
  for (int k = 0; k < P.n_total; ++k) {
    P.buf[k][0] = s.c[k].real();
    P.buf[k][1] = s.c[k].imag();
  }
  fftw_execute(P.bwd);
  const double inv = 1.0 / P.n_total;
  for (int k = 0; k < P.n_total; ++k) out[k] = P.buf[k][0] * inv;
}

/// Integer wavenumber of grid index i.
inline int wavenumber(int i, int res) { return i <= res / 2 - 1 ? i : (i == res / 2 ? res / 2 : i - res); }
inline bool is_nyquist(int i, int res) { return i == res / 2; }

/// Spectral symbol of d/dx along one axis: 2 pi k, zero at the Nyquist index.
inline double deriv_symbol(int i, int res) { return is_nyquist(i, res) ? 0.0 : kTwoPi * wavenumber(i, res); }

template <int N>
Vec<N> mode_symbol(const TorusGrid<N>& g, std::size_t flat) {
  auto ix = g.index(flat);
  Vec<N> xi;
  for (int d = 0; d < N; ++d) xi[d] = deriv_symbol(ix[d], g.res);
  return xi;
}

/// Partial derivative of multi-index order `alpha` (one count per axis).
template <int N>
ScalarField<N> derivative(const ScalarField<N>& f, const std::type_identity_t<std::array<int, N>>& alpha) {
  auto s = fft(f.grid, f.comp(0));
  int order = 0;
  for (int d = 0; d < N; ++d) order += alpha[d];
  const cplx iu(0.0, 1.0);
  cplx ipow = 1.0;
  for (int k = 0; k < order; ++k) ipow *= iu;
  for (std::size_t p = 0; p < s.c.size(); ++p) {
    Vec<N> xi = mode_symbol(f.grid, p);
    double m = 1.0;
    for (int d = 0; d < N; ++d) m *= std::pow(xi[d], alpha[d]);
    s.c[p] *= ipow * m;
  }
  ScalarField<N> out(f.grid);
  ifft(s, out.comp(0));
  return out;
}

template <int N>
ScalarField<N> derivative(const ScalarField<N>& f, int axis) {
  std::array<int, N> a{};
  a[axis] = 1;
  return derivative(f, a);
}

template <int N, int C>
ScalarField<N> component(const Field<N, C>& f, int c) {
  ScalarField<N> s(f.grid);
  std::copy(f.comp(c), f.comp(c) + f.size(), s.comp(0));
  return s;
}

template <int N, int C>
void set_component(Field<N, C>& f, int c, const ScalarField<N>& s) {
  std::copy(s.comp(0), s.comp(0) + s.size(), f.comp(c));
}

template <int N>
VectorField<N> gradient(const ScalarField<N>& f) {
  VectorField<N> g(f.grid);
  for (int d = 0; d < N; ++d) set_component(g, d, derivative(f, d));
  return g;
}

template <int N>
ScalarField<N> divergence(const VectorField<N>& u) {
  auto s0 = fft(u.grid, u.comp(0));
  std::vector<cplx> acc(s0.c.size(), 0.0);
  const cplx iu(0.0, 1.0);
  for (int d = 0; d < N; ++d) {
    auto s = d == 0 ? s0 : fft(u.grid, u.comp(d));
    for (std::size_t p = 0; p < acc.size(); ++p) acc[p] += iu * mode_symbol(u.grid, p)[d] * s.c[p];
  }
  ScalarField<N> out(u.grid);
  ifft(Spectrum<N>{u.grid, acc}, out.comp(0));
  return out;
}

template <int N>
ScalarField<N> laplacian(const ScalarField<N>& f) {
  auto s = fft(f.grid, f.comp(0));
  for (std::size_t p = 0; p < s.c.size(); ++p) s.c[p] *= -mode_symbol(f.grid, p).squaredNorm();
  ScalarField<N> out(f.grid);
  ifft(s, out.comp(0));
  return out;
}

/// Row divergence of a symmetric tensor field: (div T)_i = sum_j d_j T_ij.
template <int N>
VectorField<N> divergence(const TensorField<N>& t) {
  VectorField<N> out(t.grid);
  for (int i = 0; i < N; ++i) {
    ScalarField<N> acc(t.grid);
    for (int j = 0; j < N; ++j) acc += derivative(component(t, sym_index<N>(i, j)), j);
    set_component(out, i, acc);
  }
  return out;
}

/// Trapezoid/rectangle rule on the periodic grid; the torus has unit volume.
template <int N>
double integrate(const ScalarField<N>& f) {
  double s = 0.0;
  for (std::size_t p = 0; p < f.size(); ++p) s += f(0, p);
  return s / static_cast<double>(f.size());
}

template <int N, int C>
double integrate(const Field<N, C>& f, int c) {
  double s = 0.0;
  for (std::size_t p = 0; p < f.size(); ++p) s += f(c, p);
  return s / static_cast<double>(f.size());
}

template <int N, int C>
Vec<N> mean_vector(const Field<N, C>& f)
  requires(C == N)
{
  Vec<N> m;
  for (int i = 0; i < N; ++i) m[i] = integrate(f, i);
  return m;
}

/// Trapezoid rule in time over slice integrals.
inline double trapezoid(const std::vector<double>& t, const std::vector<double>& y) {
  double s = 0.0;
  for (std::size_t k = 0; k + 1 < t.size(); ++k) s += 0.5 * (t[k + 1] - t[k]) * (y[k] + y[k + 1]);
  return s;
}

template <int N>
double integrate(const SpaceTimeField<N, 1>& f) {
  std::vector<double> y(f.nt());
  for (std::size_t k = 0; k < f.nt(); ++k) y[k] = integrate(f[k]);
  return trapezoid(f.times, y);
}

// ---------------------------------------------------------------------------
// Helmholtz split

template <int N>
struct HelmholtzParts {
  VectorField<N> solenoidal;
  ScalarField<N> potential;
  Vec<N> mean;
};

/// u = solenoidal + grad(potential) + mean.  Modes whose derivative symbol
/// vanishes (mean and pure Nyquist) go to mean/solenoidal respectively.
template <int N>
HelmholtzParts<N> helmholtz_project(const VectorField<N>& u) {
  const auto& g = u.grid;
  std::array<Spectrum<N>, N> s;
  for (int d = 0; d < N; ++d) s[d] = fft(g, u.comp(d));
  Spectrum<N> phi{g, std::vector<cplx>(s[0].c.size(), 0.0)};
  HelmholtzParts<N> out{VectorField<N>(g), ScalarField<N>(g), Vec<N>::Zero()};
  const double n_total = static_cast<double>(g.size());
  for (int d = 0; d < N; ++d) out.mean[d] = s[d].c[0].real() / n_total;
  const cplx iu(0.0, 1.0);
  for (std::size_t p = 0; p < phi.c.size(); ++p) {
    if (p == 0) {
      for (int d = 0; d < N; ++d) s[d].c[0] = 0.0;
      continue;
    }
    Vec<N> xi = mode_symbol(g, p);
    const double k2 = xi.squaredNorm();
    if (k2 == 0.0) continue;
    cplx xdotu = 0.0;
    for (int d = 0; d < N; ++d) xdotu += xi[d] * s[d].c[p];
    phi.c[p] = -iu * xdotu / k2;
    for (int d = 0; d < N; ++d) s[d].c[p] -= xi[d] * xdotu / k2;
  }
  for (int d = 0; d < N; ++d) ifft(s[d], out.solenoidal.comp(d));
  ifft(phi, out.potential.comp(0));
  return out;
}

// ---------------------------------------------------------------------------
// Elliptic corrector: div[grad m + grad m^T - (2/N) div m I] = rhs

template <int N>
struct EllipticSolution {
  VectorField<N> m;
  TensorField<N> Mt;
};

template <int N>
TensorField<N> corrector_from_m(const VectorField<N>& m) {
  TensorField<N> Mt(m.grid);
  std::array<std::array<ScalarField<N>, N>, N> dm;
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) dm[i][j] = derivative(component(m, i), j);  // d_j m_i
  ScalarField<N> div(m.grid);
  for (int i = 0; i < N; ++i) div += dm[i][i];
  for (int i = 0; i < N; ++i)
    for (int j = i; j < N; ++j) {
      ScalarField<N> e = dm[i][j] + dm[j][i];
      if (i == j) e -= (2.0 / N) * div;
      set_component(Mt, sym_index<N>(i, j), e);
    }
  make_traceless(Mt);
  return Mt;
}

template <int N>
EllipticSolution<N> solve_elliptic_m(const VectorField<N>& rhs, double mean_tol = 1e-10) {
  const auto& g = rhs.grid;
  Vec<N> mean = mean_vector(rhs);
  const double scale = std::max(1.0, rhs.max_abs());
  if (mean.cwiseAbs().maxCoeff() > mean_tol * scale)
    throw MeanError("elliptic right-hand side has nonzero mean");
  std::array<Spectrum<N>, N> s;
  for (int d = 0; d < N; ++d) s[d] = fft(g, rhs.comp(d));
  const double c = 1.0 - 2.0 / N;
  for (std::size_t p = 0; p < s[0].c.size(); ++p) {
    Vec<N> xi = mode_symbol(g, p);
    const double k2 = xi.squaredNorm();
    if (k2 == 0.0) {
      for (int d = 0; d < N; ++d) s[d].c[p] = 0.0;
      continue;
    }
    // (k2 I + c xi xi^T) m = -rhs, inverted in closed form
    cplx xdotr = 0.0;
    for (int d = 0; d < N; ++d) xdotr += xi[d] * s[d].c[p];
    const double beta = c / (1.0 + c) / k2;
    for (int d = 0; d < N; ++d) s[d].c[p] = -(s[d].c[p] - beta * xi[d] * xdotr) / k2;
  }
  EllipticSolution<N> out{VectorField<N>(g), TensorField<N>(g)};
  for (int d = 0; d < N; ++d) ifft(s[d], out.m.comp(d));
  out.Mt = corrector_from_m(out.m);
  return out;
}

/// max |div Mt - rhs| / max(|rhs|, tiny)
template <int N>
double elliptic_residual(const TensorField<N>& Mt, const VectorField<N>& rhs) {
  VectorField<N> r = divergence(Mt) - rhs;
  return r.max_abs() / std::max(rhs.max_abs(), 1e-300);
}

/// f without the non-constant modes whose every index is 0 or Nyquist; all derivative
/// symbols vanish there, so no divergence reaches them.
template <int N, int C>
Field<N, C> strip_nyquist(const Field<N, C>& f) {
  Field<N, C> out = f;
  for (int c = 0; c < C; ++c) {
    auto s = fft(f.grid, f.comp(c));
    for (std::size_t p = 1; p < s.c.size(); ++p)
      if (mode_symbol(f.grid, p).squaredNorm() == 0.0) s.c[p] = 0.0;
    ifft(s, out.comp(c));
  }
  return out;
}

/// As elliptic_residual, against rhs without its Nyquist modes (which div Mt cannot produce).
template <int N>
double elliptic_residual_band(const TensorField<N>& Mt, const VectorField<N>& rhs) {
  VectorField<N> r = divergence(Mt) - strip_nyquist(rhs);
  return r.max_abs() / std::max(rhs.max_abs(), 1e-300);
}

/// Fraction of spectral energy carried by modes with some |k_d| > res/4.
template <int N>
double high_mode_fraction(const ScalarField<N>& f) {
  auto s = fft(f.grid, f.comp(0));
  double hi = 0.0, tot = 0.0;
  for (std::size_t p = 0; p < s.c.size(); ++p) {
    auto ix = f.grid.index(p);
    bool high = false;
    for (int d = 0; d < N; ++d) high = high || std::abs(wavenumber(ix[d], f.grid.res)) > f.grid.res / 4;
    const double e = std::norm(s.c[p]);
    tot += e;
    if (high) hi += e;
  }
  return tot > 0.0 ? hi / tot : 0.0;
}

/// Builds a scalar field from a function of the grid point.
template <int N, class Fn>
ScalarField<N> sample(const TorusGrid<N>& g, Fn&& fn) {
  ScalarField<N> f(g);
  for (std::size_t p = 0; p < g.size(); ++p) f(0, p) = fn(g.point(p));
  return f;
}

template <int N, class Fn>
VectorField<N> sample_vector(const TorusGrid<N>& g, Fn&& fn) {
  VectorField<N> f(g);
  for (std::size_t p = 0; p < g.size(); ++p) f.set_vec(p, fn(g.point(p)));
  return f;
}

}  // namespace convint
