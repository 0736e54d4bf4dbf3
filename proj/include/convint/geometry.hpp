#pragma once

// The convex set S[e] = {(w, H) : (N/2) lambda_max[w (x) w - H] < e}, its
// deficiency, and a seeded search for admissible oscillation segments.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "convint/torus.hpp"

namespace convint {

/// Largest eigenvalue of a symmetric matrix, closed form.
template <int N>
double lambda_max_sym(const Mat<N>& A) {
  if constexpr (N == 2) {
    const double m = 0.5 * (A(0, 0) + A(1, 1));
    const double d = 0.5 * (A(0, 0) - A(1, 1));
    return m + std::hypot(d, A(0, 1));
  } else {
    const double p1 = A(0, 1) * A(0, 1) + A(0, 2) * A(0, 2) + A(1, 2) * A(1, 2);
    const double q = (A(0, 0) + A(1, 1) + A(2, 2)) / 3.0;
    const double a0 = A(0, 0) - q, a1 = A(1, 1) - q, a2 = A(2, 2) - q;
    const double p2 = a0 * a0 + a1 * a1 + a2 * a2 + 2.0 * p1;
    if (p2 <= 1e-300) return q;
    const double p = std::sqrt(p2 / 6.0);
    // det((A - qI)/p) / 2
    const double b00 = a0 / p, b11 = a1 / p, b22 = a2 / p;
    const double b01 = A(0, 1) / p, b02 = A(0, 2) / p, b12 = A(1, 2) / p;
    double r = 0.5 * (b00 * (b11 * b22 - b12 * b12) - b01 * (b01 * b22 - b12 * b02) + b02 * (b01 * b12 - b11 * b02));
    r = std::clamp(r, -1.0, 1.0);
    const double phi = std::acos(r) / 3.0;
    if (r < 0.0) {
      // top pair may be nearly double: take the isolated smallest root, then the
      // exact 2x2 block on its orthogonal complement
      const double lo = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
      const Mat<3> B = A - lo * Mat<3>::Identity();
      Vec<3> v = B.row(0).transpose().cross(B.row(1).transpose());
      for (const Vec<3>& c : {Vec<3>(B.row(0).transpose().cross(B.row(2).transpose())),
                              Vec<3>(B.row(1).transpose().cross(B.row(2).transpose()))})
        if (c.squaredNorm() > v.squaredNorm()) v = c;
      if (v.squaredNorm() > 0.0) {
        v.normalize();
        const Vec<3> ref = std::abs(v[0]) < 0.9 ? Vec<3>(1.0, 0.0, 0.0) : Vec<3>(0.0, 1.0, 0.0);
        const Vec<3> u1 = v.cross(ref).normalized();
        const Vec<3> u2 = v.cross(u1);
        const double m00 = u1.dot(A * u1), m11 = u2.dot(A * u2), m01 = u1.dot(A * u2);
        return 0.5 * (m00 + m11) + std::hypot(0.5 * (m00 - m11), m01);
      }
    }
    return q + 2.0 * p * std::cos(phi);
  }
}

template <int N>
Mat<N> outer(const Vec<N>& a, const Vec<N>& b) {
  return a * b.transpose();
}

template <int N>
double s_value(const Vec<N>& w, const Mat<N>& H) {
  return 0.5 * N * lambda_max_sym<N>(outer<N>(w, w) - H);
}

template <int N>
struct GeomPoint {
  Vec<N> w = Vec<N>::Zero();
  Mat<N> H = Mat<N>::Zero();
  double e = 1.0;
};

template <int N>
double s_value(const GeomPoint<N>& p) {
  return s_value<N>(p.w, p.H);
}
template <int N>
double deficiency(const GeomPoint<N>& p) {
  return p.e - s_value(p);
}
template <int N>
bool in_S(const GeomPoint<N>& p) {
  return s_value(p) < p.e;
}

/// Point of the boundary component K: [a, a (x) a - |a|^2/N I].
template <int N>
GeomPoint<N> boundary_point(const Vec<N>& a) {
  GeomPoint<N> p;
  p.w = a;
  p.H = outer<N>(a, a) - (a.squaredNorm() / N) * Mat<N>::Identity();
  p.e = 0.5 * a.squaredNorm();
  return p;
}

/// |H|_op <= (N-1) lambda_max[w (x) w - H], with equality on the boundary set K.
template <int N>
double operator_norm(const Mat<N>& H) {
  Eigen::SelfAdjointEigenSolver<Mat<N>> es(H, Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

// ---------------------------------------------------------------------------
// Segment selection

struct SelectionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SelectionOptions {
  int design_size = 0;       // directions per unit vector; 0 picks 32 (N=2) / 48 (N=3)
  int top_k = 4;             // coarse candidates refined by pattern search
  int refine_iters = 14;
  int search_bisect = 28;
  int final_bisect = 52;
  double tie_tol = 0.02;     // relative score window for the seeded tie-break
  double halving = 0.5;      // deficiency kept along the segment, relative to the start
  double chi0 = 0.1;         // floor chi(d) = chi0 min(d, 1) on |a +- b|
  double boundary_tol = 1e-12;
};

inline double chi_floor(double d, double chi0) { return chi0 * std::min(d, 1.0); }

template <int N>
struct SegmentSelection {
  Vec<N> a = Vec<N>::Zero();
  Vec<N> b = Vec<N>::Zero();
  Vec<N> s = Vec<N>::Zero();
  Mat<N> M = Mat<N>::Zero();
  double L = 0.0;
  bool trivial = true;
  double score() const { return L * s.norm(); }
};

template <int N>
SegmentSelection<N> make_selection(const Vec<N>& a, const Vec<N>& b, double L) {
  SegmentSelection<N> sel;
  sel.a = a;
  sel.b = b;
  sel.s = a - b;
  sel.M = outer<N>(a, a) - outer<N>(b, b);
  sel.L = L;
  sel.trivial = L <= 0.0;
  return sel;
}

/// A start point of a segment search: state (w, H) and the level it must stay below.
template <int N>
struct SegmentAnchor {
  Vec<N> w;
  Mat<N> H;
  double threshold;  // s_value along the segment must stay <= threshold
};

/// Largest lambda >= 0 with s_value(w + lambda s, H + lambda M) <= threshold, by bisection.
template <int N>
double max_step(const SegmentAnchor<N>& p, const Vec<N>& s, const Mat<N>& M, int iters) {
  const double sn = s.norm();
  if (sn == 0.0) return 0.0;
  if (s_value<N>(p.w, p.H) > p.threshold) return 0.0;
  double lo = 0.0;
  double hi = (p.w.norm() + std::sqrt(2.0 * std::max(p.threshold, 0.0))) / sn * (1.0 + 1e-9) + 1e-300;
  for (int k = 0; k < iters; ++k) {
    const double mid = 0.5 * (lo + hi);
    if (s_value<N>(p.w + mid * s, p.H + mid * M) <= p.threshold)
      lo = mid;
    else
      hi = mid;
  }
  return lo;
}

template <int N>
double symmetric_extent(const std::vector<SegmentAnchor<N>>& anchors, const Vec<N>& s, const Mat<N>& M, int iters,
                        double stop_below = -1.0) {
  double L = std::numeric_limits<double>::infinity();
  for (const auto& p : anchors) {
    L = std::min(L, max_step<N>(p, s, M, iters));
    L = std::min(L, max_step<N>(p, -s, -M, iters));
    if (L <= stop_below) break;
  }
  return std::isfinite(L) ? L : 0.0;
}

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <int N>
std::vector<Vec<N>> direction_design(int size, std::uint64_t seed) {
  std::vector<Vec<N>> dirs;
  std::mt19937_64 gen(mix64(seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if constexpr (N == 2) {
    const double off = u(gen);
    for (int i = 0; i < size; ++i) {
      const double th = kTwoPi * (i + off) / size;
      dirs.push_back(Vec<2>(std::cos(th), std::sin(th)));
    }
  } else {
    // Fibonacci sphere under a seeded rotation
    Eigen::Quaterniond q(u(gen) - 0.5, u(gen) - 0.5, u(gen) - 0.5, u(gen) - 0.5);
    q.normalize();
    const Eigen::Matrix3d R = q.toRotationMatrix();
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < size; ++i) {
      const double z = 1.0 - 2.0 * (i + 0.5) / size;
      const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      const double th = golden * i;
      dirs.push_back(R * Vec<3>(r * std::cos(th), r * std::sin(th), z));
    }
  }
  return dirs;
}

template <int N>
std::array<Vec<N>, N - 1> tangent_basis(const Vec<N>& u) {
  std::array<Vec<N>, N - 1> t;
  if constexpr (N == 2) {
    t[0] = Vec<2>(-u[1], u[0]);
  } else {
    Vec<3> h = std::abs(u[0]) < 0.9 ? Vec<3>(1, 0, 0) : Vec<3>(0, 1, 0);
    t[0] = (h - h.dot(u) * u).normalized();
    t[1] = u.cross(t[0]);
  }
  return t;
}

}  // namespace detail

template <int N>
struct SearchProblem {
  std::vector<SegmentAnchor<N>> anchors;      // constraints used while searching
  std::vector<SegmentAnchor<N>> all_anchors;  // constraints for the final extent
  double e = 1.0;
  double floor = 0.0;                         // chi floor on |a +- b|
};

/// Core search shared by single-point and multi-point selection.
template <int N>
SegmentSelection<N> search_segment(const SearchProblem<N>& prob, std::uint64_t seed, const SelectionOptions& opt) {
  const int K = opt.design_size > 0 ? opt.design_size : (N == 2 ? 32 : 48);
  const double R = std::sqrt(2.0 * prob.e);
  auto dirs = detail::direction_design<N>(K, seed);

  struct Cand {
    Vec<N> ua, ub;
    double score;
  };
  auto evaluate = [&](const Vec<N>& ua, const Vec<N>& ub, double best_so_far) -> double {
    const Vec<N> a = R * ua, b = R * ub;
    if ((a + b).norm() < prob.floor || (a - b).norm() < prob.floor) return -1.0;
    const Vec<N> s = a - b;
    const Mat<N> M = outer<N>(a, a) - outer<N>(b, b);
    const double sn = s.norm();
    const double L = symmetric_extent<N>(prob.anchors, s, M, opt.search_bisect, best_so_far / sn);
    return L * sn;
  };

  std::vector<Cand> coarse;
  double best = 0.0;
  for (int i = 0; i < K; ++i)
    for (int j = i + 1; j < K; ++j) {
      const double sc = evaluate(dirs[i], dirs[j], -1.0);
      if (sc > 0.0) coarse.push_back({dirs[i], dirs[j], sc});
      best = std::max(best, sc);
    }
  if (coarse.empty()) throw SelectionError("no admissible direction pair in the design");
  std::stable_sort(coarse.begin(), coarse.end(), [](const Cand& x, const Cand& y) { return x.score > y.score; });
  coarse.resize(std::min<std::size_t>(coarse.size(), static_cast<std::size_t>(opt.top_k)));

  // pattern search on the pair of unit vectors
  std::vector<Cand> refined;
  for (Cand c : coarse) {
    double step = kTwoPi / K;
    for (int it = 0; it < opt.refine_iters; ++it) {
      bool improved = false;
      for (int which = 0; which < 2; ++which) {
        const Vec<N>& u = which == 0 ? c.ua : c.ub;
        auto tb = detail::tangent_basis<N>(u);
        for (const auto& t : tb)
          for (double sgn : {1.0, -1.0}) {
            Vec<N> ua = c.ua, ub = c.ub;
            Vec<N>& target = which == 0 ? ua : ub;
            target = (target + sgn * step * t).normalized();
            const double sc = evaluate(ua, ub, -1.0);
            if (sc > c.score) {
              c = {ua, ub, sc};
              improved = true;
            }
          }
      }
      if (!improved) step *= 0.5;
    }
    refined.push_back(c);
  }
  std::stable_sort(refined.begin(), refined.end(), [](const Cand& x, const Cand& y) { return x.score > y.score; });
  const double top = refined.front().score;
  std::size_t ties = 0;
  while (ties < refined.size() && refined[ties].score >= (1.0 - opt.tie_tol) * top) ++ties;
  const Cand& pick = refined[detail::mix64(seed ^ 0x5bd1e995ULL) % ties];

  const Vec<N> a = R * pick.ua, b = R * pick.ub;
  auto sel = make_selection<N>(a, b, 0.0);
  sel.L = symmetric_extent<N>(prob.all_anchors, sel.s, sel.M, opt.final_bisect);
  sel.trivial = sel.L <= 0.0;
  return sel;
}

template <int N>
SegmentSelection<N> trivial_selection(const Vec<N>& w) {
  return make_selection<N>(w, w, 0.0);
}

/// Deterministic stand-in for the measurable selection: the pair on the sphere
/// |a| = |b| = sqrt(2e) maximizing L|a - b| subject to deficiency halving.
template <int N>
SegmentSelection<N> select_segment(const GeomPoint<N>& p, std::uint64_t tiebreak_seed,
                                   const SelectionOptions& opt = {}) {
  if (!(p.e > 0.0)) throw std::invalid_argument("energy level must be positive");
  const double sv = s_value(p);
  const double def = p.e - sv;
  if (def <= opt.boundary_tol * p.e) return trivial_selection<N>(p.w);
  SearchProblem<N> prob;
  prob.e = p.e;
  prob.floor = chi_floor(def, opt.chi0);
  prob.anchors = {{p.w, p.H, p.e - opt.halving * def}};
  prob.all_anchors = prob.anchors;
  return search_segment<N>(prob, tiebreak_seed, opt);
}

/// One segment admissible for every anchor state simultaneously; each anchor keeps
/// `halving` of its own deficiency.  `search_stride` thins the anchors used in the search.
template <int N>
SegmentSelection<N> select_segment_common(const std::vector<GeomPoint<N>>& pts, double e, std::uint64_t seed,
                                          const SelectionOptions& opt = {}, std::size_t search_stride = 1) {
  SearchProblem<N> prob;
  prob.e = e;
  double min_def = std::numeric_limits<double>::infinity();
  std::size_t worst = 0;
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const double d = e - s_value(pts[k]);
    if (d < min_def) {
      min_def = d;
      worst = k;
    }
    prob.all_anchors.push_back({pts[k].w, pts[k].H, e - opt.halving * d});
  }
  if (pts.empty() || min_def <= opt.boundary_tol * e) return trivial_selection<N>(pts.empty() ? Vec<N>::Zero() : pts[0].w);
  prob.floor = chi_floor(min_def, opt.chi0);
  for (std::size_t k = 0; k < pts.size(); k += std::max<std::size_t>(search_stride, 1)) prob.anchors.push_back(prob.all_anchors[k]);
  prob.anchors.push_back(prob.all_anchors[worst]);
  try {
    return search_segment<N>(prob, seed, opt);
  } catch (const SelectionError&) {
    return trivial_selection<N>(pts[worst].w);
  }
}

struct SegmentReport {
  bool c1 = false;       // |a|^2/2 = |b|^2/2 = e
  bool c2 = false;       // dense lambda grid stays in S[e] with halved deficiency
  bool c3 = false;       // L|s| >= c (e - |w|^2/2)/sqrt(e)
  bool c3ab = false;     // |a +- b| >= chi floor
  double c1_err = 0.0;
  double c2_min_margin = 0.0;  // min over grid of deficiency - halving*deficiency(p)
  double ratio = 0.0;          // L|s| sqrt(e) / (e - |w|^2/2)
  double floor_margin = 0.0;
  bool all() const { return c1 && c2 && c3 && c3ab; }
};

template <int N>
SegmentReport verify_segment(const SegmentSelection<N>& sel, const GeomPoint<N>& p, double c_seg,
                             const SelectionOptions& opt = {}, int grid_points = 201) {
  SegmentReport r;
  r.c1_err = std::max(std::abs(0.5 * sel.a.squaredNorm() - p.e), std::abs(0.5 * sel.b.squaredNorm() - p.e)) /
             std::max(p.e, 1e-300);
  r.c1 = r.c1_err <= 1e-12;
  if (sel.trivial) r.c1 = r.c1 || (sel.a - sel.b).norm() == 0.0;
  const double def0 = deficiency(p);
  r.c2_min_margin = std::numeric_limits<double>::infinity();
  for (int k = 0; k < grid_points; ++k) {
    const double lam = grid_points > 1 ? -sel.L + 2.0 * sel.L * k / (grid_points - 1) : 0.0;
    GeomPoint<N> q{p.w + lam * sel.s, p.H + lam * sel.M, p.e};
    r.c2_min_margin = std::min(r.c2_min_margin, deficiency(q) - opt.halving * def0);
  }
  r.c2 = r.c2_min_margin >= -1e-12 * p.e && (def0 > 0.0 || sel.L == 0.0);
  const double gap = p.e - 0.5 * p.w.squaredNorm();
  r.ratio = gap > 0.0 ? sel.score() * std::sqrt(p.e) / gap : 0.0;
  r.c3 = gap <= 0.0 || r.ratio >= c_seg;
  const double fl = chi_floor(std::max(def0, 0.0), opt.chi0);
  r.floor_margin = std::min((sel.a + sel.b).norm(), (sel.a - sel.b).norm()) - fl;
  r.c3ab = sel.trivial || r.floor_margin >= 0.0;
  return r;
}

/// Random traceless symmetric matrix with entries of scale `amp`.
template <int N, class Gen>
Mat<N> random_traceless(Gen& gen, double amp) {
  std::uniform_real_distribution<double> u(-amp, amp);
  Mat<N> H;
  for (int i = 0; i < N; ++i)
    for (int j = i; j < N; ++j) H(i, j) = H(j, i) = u(gen);
  H -= (H.trace() / N) * Mat<N>::Identity();
  return H;
}

/// Rejection sample of an interior point with deficiency >= min_def_frac * e.
template <int N, class Gen>
GeomPoint<N> sample_interior(Gen& gen, double e, double min_def_frac) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double R = std::sqrt(2.0 * e);
  for (;;) {
    Vec<N> w;
    for (int d = 0; d < N; ++d) w[d] = R * u(gen);
    if (w.norm() >= R) continue;
    GeomPoint<N> p{w, random_traceless<N>(gen, 2.0 * (N - 1) * e / N), e};
    if (deficiency(p) >= min_def_frac * e) return p;
  }
}

struct SegmentCalibration {
  double min_ratio = 0.0;
  double median_ratio = 0.0;
  int failures = 0;  // selections violating (c1), (c2) or the floor
  int samples = 0;
};

/// Ratio L|s| sqrt(e) / (e - |w|^2/2) over seeded interior samples with deficiency >= min_def_frac e.
template <int N>
SegmentCalibration calibrate_segment(int samples, std::uint64_t seed, double min_def_frac = 0.05,
                                     const SelectionOptions& opt = {}) {
  std::mt19937_64 gen(seed);
  std::vector<double> ratios;
  SegmentCalibration out;
  out.samples = samples;
  for (int i = 0; i < samples; ++i) {
    const auto p = sample_interior<N>(gen, 1.0, min_def_frac);
    const auto sel = select_segment<N>(p, detail::mix64(seed + static_cast<std::uint64_t>(i)), opt);
    const auto r = verify_segment<N>(sel, p, 0.0, opt);
    if (!r.all()) ++out.failures;
    ratios.push_back(r.ratio);
  }
  if (ratios.empty()) return out;
  std::sort(ratios.begin(), ratios.end());
  out.min_ratio = ratios.front();
  out.median_ratio = ratios[ratios.size() / 2];
  return out;
}

}  // namespace convint
