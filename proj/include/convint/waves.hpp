#pragma once

// Localized plane-wave potentials and the third-order operator A_{a,b}(d).
//
// Potential coordinates y = (s, x) with s = t / sqrt(r).  The potential is
//   Phi(y) = (L / k^3) phi(y) psi(k eta.(y - c) + phase),   k = n / ell,
// with phi a tensor-product cutoff on the box, c the box centre and ell its
// spatial edge.  A_{a,b}(d) Phi gives (w~, V~); the physical pair is
// w = sqrt(r) w~, V = V~, so that d_t w + div V = 0 and div w = 0.

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

#include "convint/torus.hpp"

namespace convint {

struct DegeneratePairError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <int N>
using STVec = Eigen::Matrix<double, N + 1, 1>;
template <int N>
using STMat = Eigen::Matrix<double, N + 1, N + 1>;

template <int N>
STVec<N> lift(const Vec<N>& a) {
  STVec<N> v;
  v[0] = 0.0;
  v.template tail<N>() = a;
  return v;
}

template <int N>
STVec<N> eta_direction(const Vec<N>& a, const Vec<N>& b) {
  const double ab = a.norm() * b.norm();
  const double D = ab + a.dot(b);
  if (!(D > 1e-14 * std::max(ab, 1e-300))) throw DegeneratePairError("antiparallel or zero pair: |a||b| + a.b = 0");
  STVec<N> e0 = STVec<N>::Zero();
  e0[0] = 1.0;
  return -std::pow(D, -2.0 / 3.0) * (lift<N>(a) + lift<N>(b) - D * e0);
}

/// A(xi) = 1/2 (R xi (x) Q(xi) xi + Q(xi) xi (x) R xi).
template <int N>
STMat<N> symbol_A(const Vec<N>& a, const Vec<N>& b, const STVec<N>& xi) {
  const STVec<N> A0 = lift<N>(a), B0 = lift<N>(b);
  const STMat<N> R = A0 * B0.transpose() - B0 * A0.transpose();
  STVec<N> e0 = STVec<N>::Zero();
  e0[0] = 1.0;
  const STMat<N> Q = xi * e0.transpose() - e0 * xi.transpose();
  const STVec<N> p = R * xi, q = Q * xi;
  return 0.5 * (p * q.transpose() + q * p.transpose());
}

// ---------------------------------------------------------------------------
// Multi-indices over the N+1 space-time axes

template <int D>
using MultiIndex = std::array<int, D>;

template <int D>
int order(const MultiIndex<D>& a) {
  int s = 0;
  for (int v : a) s += v;
  return s;
}

/// All multi-indices with |alpha| <= max_order, ordered by |alpha| then lexicographically.
template <int D>
std::vector<MultiIndex<D>> multi_indices(int max_order) {
  std::vector<MultiIndex<D>> out;
  for (int o = 0; o <= max_order; ++o) {
    MultiIndex<D> a{};
    std::function<void(int, int)> rec = [&](int d, int left) {
      if (d == D - 1) {
        a[d] = left;
        out.push_back(a);
        return;
      }
      for (int v = left; v >= 0; --v) {
        a[d] = v;
        rec(d + 1, left - v);
      }
    };
    rec(0, o);
  }
  return out;
}

template <int D>
std::size_t index_of(const std::vector<MultiIndex<D>>& list, const MultiIndex<D>& a) {
  for (std::size_t k = 0; k < list.size(); ++k)
    if (list[k] == a) return k;
  throw std::out_of_range("multi-index not in table");
}

inline double binom(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

// ---------------------------------------------------------------------------
// Coefficients of A_{a,b}(d) as a cubic form: A_c(d) = sum_alpha coef[alpha][c] d^alpha.
// Output component c: w_i = A_{0,i+1} for c < N, then V in symmetric storage.

template <int N>
constexpr int pair_size() {
  return N + sym_size(N);
}

template <int N>
struct SymbolTable {
  std::vector<MultiIndex<N + 1>> alphas;  // |alpha| == 3
  std::vector<std::array<double, pair_size<N>()>> coef;
};

template <int N>
SymbolTable<N> symbol_table(const Vec<N>& a, const Vec<N>& b) {
  constexpr int D = N + 1;
  const STVec<N> A0 = lift<N>(a), B0 = lift<N>(b);
  const STMat<N> R = A0 * B0.transpose() - B0 * A0.transpose();
  // q_j(xi) = sum_{m,n} Qc[j][m][n] xi_m xi_n with Q(xi) xi = xi_0 xi - |xi|^2 e0
  auto Qc = [](int j, int m, int n) { return (m == 0 && n == j ? 1.0 : 0.0) - (j == 0 && m == n ? 1.0 : 0.0); };
  auto entry = [&](int i, int j, int l, int m, int n) {
    return 0.5 * (R(i, l) * Qc(j, m, n) + R(j, l) * Qc(i, m, n));
  };

  SymbolTable<N> t;
  for (const auto& al : multi_indices<D>(3))
    if (order<D>(al) == 3) t.alphas.push_back(al);
  t.coef.assign(t.alphas.size(), {});
  for (int l = 0; l < D; ++l)
    for (int m = 0; m < D; ++m)
      for (int n = 0; n < D; ++n) {
        MultiIndex<D> al{};
        ++al[l];
        ++al[m];
        ++al[n];
        const std::size_t k = index_of<D>(t.alphas, al);
        for (int i = 0; i < N; ++i) t.coef[k][i] += entry(0, i + 1, l, m, n);
        for (int i = 0; i < N; ++i)
          for (int j = i; j < N; ++j) t.coef[k][N + sym_index<N>(i, j)] += entry(i + 1, j + 1, l, m, n);
      }
  return t;
}

// ---------------------------------------------------------------------------
// Cutoff: 1 on |u| <= 1/2, 0 on |u| >= 1, degree-7 smoothstep taper (C^3), u = (y - c) / half.

namespace detail {
// P(s) = 35 s^4 - 84 s^5 + 70 s^6 - 20 s^7 and its derivatives, coefficients of s^0..s^7
inline constexpr std::array<std::array<double, 8>, 5> kTaper = {{
    {0, 0, 0, 0, 35, -84, 70, -20},
    {0, 0, 0, 140, -420, 420, -140, 0},
    {0, 0, 420, -1680, 2100, -840, 0, 0},
    {0, 840, -5040, 8400, -4200, 0, 0, 0},
    {840, -10080, 25200, -16800, 0, 0, 0, 0},
}};

template <class S>
S horner(const std::array<double, 8>& c, S s) {
  S r(c[7]);
  for (int k = 6; k >= 0; --k) r = r * s + c[k];
  return r;
}

template <class S>
double re(const S& x) {
  if constexpr (std::is_same_v<S, double>)
    return x;
  else
    return std::real(x);
}
}  // namespace detail

/// Cutoff value and derivatives of order 0..4 with respect to y.
template <class S>
std::array<S, 5> cutoff_1d(S y, double center, double half) {
  std::array<S, 5> out{};
  const S u = (y - center) / half;
  const double ur = std::abs(detail::re(u));
  if (ur >= 1.0) return out;
  if (ur <= 0.5) {
    out[0] = S(1.0);
    return out;
  }
  const double sign = detail::re(u) > 0.0 ? 1.0 : -1.0;
  const S s = 2.0 * sign * u - 1.0;
  const double ds = 2.0 * sign / half;
  out[0] = 1.0 - detail::horner(detail::kTaper[0], s);
  double f = 1.0;
  for (int j = 1; j <= 4; ++j) {
    f *= ds;
    out[j] = -f * detail::horner(detail::kTaper[j], s);
  }
  return out;
}

// ---------------------------------------------------------------------------

template <int N>
struct SpaceTimeBox {
  double t0 = 0.0, t1 = 1.0;
  Vec<N> lo = Vec<N>::Zero();
  Vec<N> hi = Vec<N>::Ones();

  bool contains_open(double t, const Vec<N>& x) const {
    if (!(t > t0 && t < t1)) return false;
    for (int d = 0; d < N; ++d)
      if (!(x[d] > lo[d] && x[d] < hi[d])) return false;
    return true;
  }
};

enum class Profile { Cos, Cubic };

template <int N>
struct WaveSpec {
  Vec<N> a = Vec<N>::Zero(), b = Vec<N>::Zero();
  double L = 0.0;
  int n = 1;
  SpaceTimeBox<N> box;
  double r = 1.0;
  double phase = 0.0;
  Profile profile = Profile::Cos;
  // derived
  STVec<N> eta = STVec<N>::Zero();
  double k = 1.0;   // n / ell
  double sr = 1.0;  // sqrt(r)
  bool degenerate = true;

  double amp() const { return L / (k * k * k); }
  // cutoff centre and half width along potential axis d (0 = stretched time)
  double center(int d) const { return d == 0 ? 0.5 * (box.t0 + box.t1) / sr : 0.5 * (box.lo[d - 1] + box.hi[d - 1]); }
  double half(int d) const { return d == 0 ? 0.5 * (box.t1 - box.t0) / sr : 0.5 * (box.hi[d - 1] - box.lo[d - 1]); }
};

template <int N>
WaveSpec<N> make_wave(const Vec<N>& a, const Vec<N>& b, double L, int n, const SpaceTimeBox<N>& box, double r = 1.0,
                      double phase = 0.0, Profile profile = Profile::Cos) {
  if (n < 1) throw std::invalid_argument("frequency must be a positive integer");
  if (!(r > 0.0)) throw std::invalid_argument("density must be positive");
  if (!(box.t1 > box.t0) || !((box.hi - box.lo).minCoeff() > 0.0)) throw std::invalid_argument("empty box");
  WaveSpec<N> w;
  w.a = a;
  w.b = b;
  w.L = L;
  w.n = n;
  w.box = box;
  w.r = r;
  w.phase = phase;
  w.profile = profile;
  w.sr = std::sqrt(r);
  w.k = n / (box.hi - box.lo).maxCoeff();
  w.degenerate = (a - b).norm() == 0.0 || L == 0.0;
  if (!w.degenerate) {
    const double ea = a.squaredNorm(), eb = b.squaredNorm();
    if (std::abs(ea - eb) > 1e-10 * std::max(ea, eb)) throw std::invalid_argument("|a| != |b|");
    w.eta = eta_direction<N>(a, b);
  }
  return w;
}

/// psi^{(j)}(theta), j = 0..4.
template <class S>
std::array<S, 5> profile_derivs(Profile p, S th) {
  using std::cos;
  using std::sin;
  if (p == Profile::Cos) {
    const S c = cos(th), s = sin(th);
    return {c, -s, -c, s, c};
  }
  return {th * th * th, 3.0 * th * th, 6.0 * th, S(6.0), S(0.0)};
}

template <int N, class S>
std::array<S, N + 1> potential_coords(const WaveSpec<N>& w, S t, const std::array<S, N>& x) {
  std::array<S, N + 1> y;
  y[0] = t / w.sr;
  for (int d = 0; d < N; ++d) y[d + 1] = x[d];
  return y;
}

/// All partial derivatives of the potential of order <= max_order in potential
/// coordinates, aligned with multi_indices<N+1>(max_order).  Direct Leibniz sum.
template <int N, class S>
std::vector<S> potential_derivs(const WaveSpec<N>& w, const std::array<S, N + 1>& y, int max_order) {
  constexpr int D = N + 1;
  const auto list = multi_indices<D>(max_order);
  std::vector<S> out(list.size(), S(0.0));
  if (w.degenerate) return out;
  std::array<std::array<S, 5>, D> phi;
  S th(w.phase);
  for (int d = 0; d < D; ++d) {
    if (std::abs(detail::re((y[d] - w.center(d)) / w.half(d))) >= 1.0) return out;
    phi[d] = cutoff_1d<S>(y[d], w.center(d), w.half(d));
    th += w.k * w.eta[d] * (y[d] - w.center(d));
  }
  const auto psi = profile_derivs<S>(w.profile, th);
  const double amp = w.amp();
  for (std::size_t k = 0; k < list.size(); ++k) {
    const auto& al = list[k];
    S acc(0.0);
    MultiIndex<D> be{};
    std::function<void(int, S, int)> rec = [&](int d, S prod, int rest) {
      if (d == D) {
        acc += prod * psi[rest];
        return;
      }
      for (int v = 0; v <= al[d]; ++v) {
        be[d] = v;
        const double f = binom(al[d], v) * std::pow(w.k * w.eta[d], al[d] - v);
        rec(d + 1, prod * (f * phi[d][v]), rest + al[d] - v);
      }
    };
    rec(0, S(1.0), 0);
    out[k] = amp * acc;
  }
  return out;
}

/// (w~, V~) from third derivatives: the cubic form applied to a derivative table.
template <int N, class S>
std::array<S, pair_size<N>()> pair_from_derivs(const SymbolTable<N>& tab, const std::vector<MultiIndex<N + 1>>& list,
                                               const std::vector<S>& D, const MultiIndex<N + 1>& shift = {}) {
  std::array<S, pair_size<N>()> out{};
  for (std::size_t k = 0; k < tab.alphas.size(); ++k) {
    MultiIndex<N + 1> al = tab.alphas[k];
    for (int d = 0; d <= N; ++d) al[d] += shift[d];
    const S v = D[index_of<N + 1>(list, al)];
    for (int c = 0; c < pair_size<N>(); ++c) out[c] += tab.coef[k][c] * v;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fast evaluation: K[beta][c] = amp sum_{alpha >= beta, |alpha| = 3} coef[alpha][c] C(alpha, beta) (k eta)^(alpha - beta)
// so that (w~, V~)_c = sum_beta K[beta][c] prod_d phi_d^{(beta_d)} psi^{(3 - |beta|)}.

template <int N>
struct WaveKernel {
  std::vector<MultiIndex<N + 1>> betas;
  std::vector<std::array<double, pair_size<N>()>> K;
};

template <int N>
WaveKernel<N> wave_kernel(const WaveSpec<N>& w) {
  constexpr int D = N + 1;
  WaveKernel<N> ker;
  ker.betas = multi_indices<D>(3);
  ker.K.assign(ker.betas.size(), {});
  if (w.degenerate) return ker;
  const auto tab = symbol_table<N>(w.a, w.b);
  for (std::size_t q = 0; q < ker.betas.size(); ++q) {
    const auto& be = ker.betas[q];
    for (std::size_t k = 0; k < tab.alphas.size(); ++k) {
      const auto& al = tab.alphas[k];
      double f = w.amp();
      bool ok = true;
      for (int d = 0; d < D && ok; ++d) {
        if (al[d] < be[d]) ok = false;
        else f *= binom(al[d], be[d]) * std::pow(w.k * w.eta[d], al[d] - be[d]);
      }
      if (!ok) continue;
      for (int c = 0; c < pair_size<N>(); ++c) ker.K[q][c] += f * tab.coef[k][c];
    }
  }
  return ker;
}

/// Physical (w, V) at (t, x): w components first, then V in symmetric storage.
template <int N, class S>
std::array<S, pair_size<N>()> evaluate_pair(const WaveSpec<N>& w, const WaveKernel<N>& ker, S t,
                                            const std::array<S, N>& x) {
  constexpr int D = N + 1;
  std::array<S, pair_size<N>()> out{};
  if (w.degenerate) return out;
  const auto y = potential_coords<N, S>(w, t, x);
  std::array<std::array<S, 5>, D> phi;
  S th(w.phase);
  for (int d = 0; d < D; ++d) {
    if (std::abs(detail::re((y[d] - w.center(d)) / w.half(d))) >= 1.0) return out;
    phi[d] = cutoff_1d<S>(y[d], w.center(d), w.half(d));
    th += w.k * w.eta[d] * (y[d] - w.center(d));
  }
  const auto psi = profile_derivs<S>(w.profile, th);
  for (std::size_t q = 0; q < ker.betas.size(); ++q) {
    S prod(1.0);
    for (int d = 0; d < D; ++d) prod *= phi[d][ker.betas[q][d]];
    prod *= psi[3 - order<D>(ker.betas[q])];
    for (int c = 0; c < pair_size<N>(); ++c) out[c] += ker.K[q][c] * prod;
  }
  for (int c = 0; c < N; ++c) out[c] *= w.sr;
  return out;
}

/// Leading part L phi psi'''(theta) [sqrt(r) (a - b), a(x)a - b(x)b].
template <int N>
std::array<double, pair_size<N>()> leading_pair(const WaveSpec<N>& w, double t, const std::array<double, N>& x) {
  std::array<double, pair_size<N>()> out{};
  if (w.degenerate) return out;
  const auto y = potential_coords<N, double>(w, t, x);
  double phi = 1.0, th = w.phase;
  for (int d = 0; d <= N; ++d) {
    phi *= cutoff_1d<double>(y[d], w.center(d), w.half(d))[0];
    th += w.k * w.eta[d] * (y[d] - w.center(d));
  }
  const double f = w.L * phi * profile_derivs<double>(w.profile, th)[3];
  for (int i = 0; i < N; ++i) {
    out[i] = w.sr * f * (w.a[i] - w.b[i]);
    for (int j = i; j < N; ++j) out[N + sym_index<N>(i, j)] = f * (w.a[i] * w.a[j] - w.b[i] * w.b[j]);
  }
  return out;
}

/// Pointwise (d_t w + div V, div w) from order-4 potential derivatives.
template <int N>
std::array<double, 2> pointwise_residual(const WaveSpec<N>& w, double t, const std::array<double, N>& x) {
  constexpr int D = N + 1;
  if (w.degenerate) return {0.0, 0.0};
  const auto list = multi_indices<D>(4);
  const auto tab = symbol_table<N>(w.a, w.b);
  const auto Dv = potential_derivs<N, double>(w, potential_coords<N, double>(w, t, x), 4);
  std::array<std::array<double, pair_size<N>()>, D> dP;
  for (int l = 0; l < D; ++l) {
    MultiIndex<D> sh{};
    sh[l] = 1;
    dP[l] = pair_from_derivs<N, double>(tab, list, Dv, sh);
  }
  // w~ derivatives in y; d_t w = sqrt(r) d_t w~ = d_s w~
  double mom = 0.0, div = 0.0;
  for (int i = 0; i < N; ++i) {
    double m = dP[0][i];
    for (int j = 0; j < N; ++j) m += dP[j + 1][N + sym_index<N>(i, j)];
    mom = std::max(mom, std::abs(m));
    div += dP[i + 1][i];
  }
  return {mom, std::abs(div * w.sr)};
}

// ---------------------------------------------------------------------------
// Grid application

template <int N>
struct WavePair {
  SpaceTimeField<N, N> w;
  SpaceTimeField<N, sym_size(N)> V;
  double R_n_bound = 0.0;  // n sup |full - leading|
};

/// Adds the packet to (w, V) on their grid; returns sup |full - leading| over touched points.
template <int N>
double add_wave(const WaveSpec<N>& spec, SpaceTimeField<N, N>& w, SpaceTimeField<N, sym_size(N)>& V,
                const WaveKernel<N>* ker_in = nullptr) {
  constexpr int D = N + 1;
  if (spec.degenerate) return 0.0;
  WaveKernel<N> local;
  if (ker_in == nullptr) {
    local = wave_kernel<N>(spec);
    ker_in = &local;
  }
  const WaveKernel<N>& ker = *ker_in;
  const auto& g = w.grid();
  struct AxisPt {
    int idx;
    std::array<double, 5> phi;
    double th;
  };
  std::array<std::vector<AxisPt>, N> axes;
  for (int d = 0; d < N; ++d)
    for (int i = 0; i < g.res; ++i) {
      const double y = i * g.h();
      const double c = spec.center(d + 1), hw = spec.half(d + 1);
      if (std::abs((y - c) / hw) >= 1.0) continue;
      axes[d].push_back({i, cutoff_1d<double>(y, c, hw), spec.k * spec.eta[d + 1] * (y - c)});
    }
  const Vec<N> s_vec = spec.a - spec.b;
  const Mat<N> M_mat = spec.a * spec.a.transpose() - spec.b * spec.b.transpose();
  double dev = 0.0;
  for (std::size_t kt = 0; kt < w.nt(); ++kt) {
    const double y0 = w.times[kt] / spec.sr;
    if (std::abs((y0 - spec.center(0)) / spec.half(0)) >= 1.0) continue;
    const auto phi0 = cutoff_1d<double>(y0, spec.center(0), spec.half(0));
    const double th0 = spec.phase + spec.k * spec.eta[0] * (y0 - spec.center(0));
    std::array<std::size_t, N> it{};
    bool empty = false;
    for (int d = 0; d < N; ++d) empty = empty || axes[d].empty();
    if (empty) continue;
    for (;;) {
      std::array<const std::array<double, 5>*, D> phi;
      phi[0] = &phi0;
      double th = th0;
      std::array<int, N> ix;
      for (int d = 0; d < N; ++d) {
        const auto& ap = axes[d][it[d]];
        phi[d + 1] = &ap.phi;
        th += ap.th;
        ix[d] = ap.idx;
      }
      const auto psi = profile_derivs<double>(spec.profile, th);
      std::array<double, pair_size<N>()> val{};
      for (std::size_t q = 0; q < ker.betas.size(); ++q) {
        double prod = psi[3 - order<D>(ker.betas[q])];
        for (int d = 0; d < D; ++d) prod *= (*phi[d])[ker.betas[q][d]];
        for (int c = 0; c < pair_size<N>(); ++c) val[c] += ker.K[q][c] * prod;
      }
      for (int c = 0; c < N; ++c) val[c] *= spec.sr;
      double tr = 0.0;
      for (int i = 0; i < N - 1; ++i) tr += val[N + sym_index<N>(i, i)];
      val[N + sym_index<N>(N - 1, N - 1)] = -tr;

      double phi_all = 1.0;
      for (int d = 0; d < D; ++d) phi_all *= (*phi[d])[0];
      const double f = spec.L * phi_all * psi[3];
      const std::size_t p = g.flat(ix);
      for (int i = 0; i < N; ++i) {
        w[kt](i, p) += val[i];
        dev = std::max(dev, std::abs(val[i] - spec.sr * f * s_vec[i]));
        for (int j = i; j < N; ++j) {
          const int c = N + sym_index<N>(i, j);
          V[kt](c - N, p) += val[c];
          dev = std::max(dev, std::abs(val[c] - f * M_mat(i, j)));
        }
      }
      int d = N - 1;
      while (d >= 0 && ++it[d] == axes[d].size()) it[d--] = 0;
      if (d < 0) break;
    }
  }
  return dev;
}

template <int N>
WavePair<N> apply_A(const WaveSpec<N>& spec, const TorusGrid<N>& g, const std::vector<double>& times) {
  WavePair<N> out{SpaceTimeField<N, N>(g, times), SpaceTimeField<N, sym_size(N)>(g, times), 0.0};
  for (auto& s : out.V.slices) s.traceless = true;
  out.R_n_bound = spec.n * add_wave<N>(spec, out.w, out.V);
  return out;
}

// ---------------------------------------------------------------------------
// Separable quadrature over the cutoff support (cosine profile only)

namespace detail {
/// int phi^{(j1)} phi^{(j2)} weight(y) e^{i omega (y - c)} dy by composite Gauss-Legendre;
/// j2 < 0 drops the second cutoff factor.
inline cplx cutoff_moment(double c, double hw, int j1, int j2, double omega,
                          const std::function<double(double)>& weight = nullptr) {
  using GL = boost::math::quadrature::gauss<double, 20>;
  const std::array<double, 4> cuts = {c - hw, c - 0.5 * hw, c + 0.5 * hw, c + hw};
  double re_sum = 0.0, im_sum = 0.0;
  for (int piece = 0; piece < 3; ++piece) {
    const double a = cuts[piece], b = cuts[piece + 1];
    const int panels = 2 + static_cast<int>(std::ceil(std::abs(omega) * (b - a) / kTwoPi));
    for (int q = 0; q < panels; ++q) {
      const double pa = a + (b - a) * q / panels, pb = a + (b - a) * (q + 1) / panels;
      auto base = [&](double y) {
        const auto f = cutoff_1d<double>(y, c, hw);
        return f[j1] * (j2 < 0 ? 1.0 : f[j2]) * (weight ? weight(y) : 1.0);
      };
      re_sum += GL::integrate([&](double y) { return base(y) * std::cos(omega * (y - c)); }, pa, pb);
      im_sum += GL::integrate([&](double y) { return base(y) * std::sin(omega * (y - c)); }, pa, pb);
    }
  }
  return {re_sum, im_sum};
}
}  // namespace detail

/// Space-time integral of |w|^2 over the box (physical coordinates).
template <int N>
double packet_energy(const WaveSpec<N>& spec, const WaveKernel<N>* ker_in = nullptr) {
  constexpr int D = N + 1;
  if (spec.degenerate) return 0.0;
  if (spec.profile != Profile::Cos) throw std::invalid_argument("separable quadrature needs the cosine profile");
  WaveKernel<N> local;
  if (ker_in == nullptr) {
    local = wave_kernel<N>(spec);
    ker_in = &local;
  }
  const auto& ker = *ker_in;
  std::array<std::array<std::array<cplx, 4>, 4>, D> M0, M2;
  for (int d = 0; d < D; ++d)
    for (int j1 = 0; j1 < 4; ++j1)
      for (int j2 = j1; j2 < 4; ++j2) {
        M0[d][j1][j2] = M0[d][j2][j1] = detail::cutoff_moment(spec.center(d), spec.half(d), j1, j2, 0.0);
        M2[d][j1][j2] = M2[d][j2][j1] =
            detail::cutoff_moment(spec.center(d), spec.half(d), j1, j2, 2.0 * spec.k * spec.eta[d]);
      }
  const double hp = 0.5 * std::numbers::pi;
  double total = 0.0;
  for (std::size_t q1 = 0; q1 < ker.betas.size(); ++q1)
    for (std::size_t q2 = 0; q2 < ker.betas.size(); ++q2) {
      double G = 0.0;
      for (int i = 0; i < N; ++i) G += ker.K[q1][i] * ker.K[q2][i];
      if (G == 0.0) continue;
      const auto &b1 = ker.betas[q1], &b2 = ker.betas[q2];
      const int p = 3 - order<D>(b1), r = 3 - order<D>(b2);
      cplx m0(1.0), m2(1.0);
      for (int d = 0; d < D; ++d) {
        m0 *= M0[d][b1[d]][b2[d]];
        m2 *= M2[d][b1[d]][b2[d]];
      }
      const double osc = std::real(std::exp(cplx(0.0, 2.0 * spec.phase + (p + r) * hp)) * m2);
      total += G * (0.5 * std::cos((p - r) * hp) * m0.real() + 0.5 * osc);
    }
  return spec.r * spec.sr * total;
}

namespace detail {
/// Phi_hat(xi) = int_{-1}^{1} Phi(u) e^{i xi u} du for the unit cutoff (real, even).
inline double unit_cutoff_ft(double xi) {
  // [0, 1/2]: Phi = 1
  const double plateau = std::abs(xi) < 1e-8 ? 0.5 : std::sin(0.5 * xi) / xi;
  // [1/2, 1]: u = (s + 1)/2, Phi = Q(s) = 1 - P(s); half int_0^1 Q(s) cos(a (s + 1)) ds, a = xi / 2
  const double a = 0.5 * xi;
  std::array<double, 8> q = kTaper[0];
  for (auto& v : q) v = -v;
  q[0] += 1.0;
  double taper;
  if (std::abs(a) <= 2.0) {
    using GL = boost::math::quadrature::gauss<double, 20>;
    taper = 0.5 * GL::integrate([&](double t) { return horner(q, t) * std::cos(a * (t + 1.0)); }, 0.0, 1.0);
  } else {
    // int_0^1 Q e^{ias} ds = sum_m (-1)^m Q^(m)(s) e^{ias} / (ia)^(m+1) |_0^1
    const cplx ia(0.0, a);
    cplx sum = 0.0, ipow = ia;
    std::array<double, 8> d = q;
    for (int m = 0; m < 8; ++m) {
      const double q1 = horner(d, 1.0), q0 = d[0];
      const double sg = m % 2 == 0 ? 1.0 : -1.0;
      sum += sg * (q1 * std::exp(ia) - q0) / ipow;
      ipow *= ia;
      for (int k = 0; k < 7; ++k) d[k] = (k + 1) * d[k + 1];
      d[7] = 0.0;
    }
    taper = 0.5 * std::real(std::exp(ia) * sum);
  }
  return 2.0 * (plateau + taper);
}

/// int phi^{(j)}(y) e^{i nu (y - c)} dy for the cutoff centred at c with half-width hw.
inline cplx cutoff_ft(double hw, int j, double nu) {
  cplx f = hw * unit_cutoff_ft(nu * hw);
  for (int k = 0; k < j; ++k) f *= cplx(0.0, -nu);
  return f;
}

/// int phi^{(j)}(y) g(y) e^{i omega (y - c)} dy with g(y) = cos(kappa y) or sin(kappa y), closed form.
inline cplx cutoff_trig_moment(double c, double hw, int j, double omega, double kappa, bool sine) {
  const cplx up = std::exp(cplx(0.0, kappa * c)) * cutoff_ft(hw, j, omega + kappa);
  const cplx dn = std::exp(cplx(0.0, -kappa * c)) * cutoff_ft(hw, j, omega - kappa);
  return sine ? (up - dn) / cplx(0.0, 2.0) : 0.5 * (up + dn);
}
}  // namespace detail

/// Spatial moments J[d][j] = int phi_d^{(j)} g_d e^{i k eta_d (y - c_d)} dy of a packet.
template <int N>
using PairingMoments = std::array<std::array<cplx, 4>, N>;

template <int N>
PairingMoments<N> pairing_moments(const WaveSpec<N>& spec, const std::array<std::function<double(double)>, N>& g) {
  PairingMoments<N> J;
  for (int d = 0; d < N; ++d)
    for (int j = 0; j < 4; ++j)
      J[d][j] = detail::cutoff_moment(spec.center(d + 1), spec.half(d + 1), j, -1, spec.k * spec.eta[d + 1], g[d]);
  return J;
}

/// Same moments for g_d(y) = cos(kappa_d y) or sin(kappa_d y), in closed form.
template <int N>
PairingMoments<N> trig_pairing_moments(const WaveSpec<N>& spec, const std::array<double, N>& kappa,
                                       const std::array<bool, N>& sine) {
  PairingMoments<N> J;
  for (int d = 0; d < N; ++d)
    for (int j = 0; j < 4; ++j)
      J[d][j] = detail::cutoff_trig_moment(spec.center(d + 1), spec.half(d + 1), j, spec.k * spec.eta[d + 1], kappa[d],
                                           sine[d]);
  return J;
}

/// int w(t, x) . dir  prod_d g_d(x_d) dx at one time, from precomputed moments.
template <int N>
double packet_pairing(const WaveSpec<N>& spec, const WaveKernel<N>& ker, const PairingMoments<N>& J, double t,
                      const Vec<N>& dir) {
  constexpr int D = N + 1;
  if (spec.degenerate) return 0.0;
  if (spec.profile != Profile::Cos) throw std::invalid_argument("separable quadrature needs the cosine profile");
  const double s = t / spec.sr;
  if (std::abs((s - spec.center(0)) / spec.half(0)) >= 1.0) return 0.0;
  const auto phi0 = cutoff_1d<double>(s, spec.center(0), spec.half(0));
  const double th0 = spec.phase + spec.k * spec.eta[0] * (s - spec.center(0));
  double total = 0.0;
  for (std::size_t q = 0; q < ker.betas.size(); ++q) {
    const auto& be = ker.betas[q];
    double Kd = 0.0;
    for (int i = 0; i < N; ++i) Kd += ker.K[q][i] * dir[i];
    if (Kd == 0.0 || phi0[be[0]] == 0.0) continue;
    cplx prod = std::exp(cplx(0.0, th0 + (3 - order<D>(be)) * 0.5 * std::numbers::pi));
    for (int d = 0; d < N; ++d) prod *= J[d][be[d + 1]];
    total += Kd * phi0[be[0]] * prod.real();
  }
  return spec.sr * total;
}

/// int w(t, x) . dir  prod_d g_d(x_d) dx at one time.
template <int N>
double packet_pairing(const WaveSpec<N>& spec, double t, const Vec<N>& dir,
                      const std::array<std::function<double(double)>, N>& g, const WaveKernel<N>* ker_in = nullptr) {
  if (spec.degenerate) return 0.0;
  if (spec.profile != Profile::Cos) throw std::invalid_argument("separable quadrature needs the cosine profile");
  const double s = t / spec.sr;
  if (std::abs((s - spec.center(0)) / spec.half(0)) >= 1.0) return 0.0;
  WaveKernel<N> local;
  if (ker_in == nullptr) {
    local = wave_kernel<N>(spec);
    ker_in = &local;
  }
  return packet_pairing<N>(spec, *ker_in, pairing_moments<N>(spec, g), t, dir);
}

}  // namespace convint
