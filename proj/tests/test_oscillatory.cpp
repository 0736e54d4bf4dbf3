#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "convint/calibration.hpp"
#include "convint/oscillatory.hpp"

using namespace convint;

namespace {

Calibration shipped() { return load_calibration(CONVINT_DATA_DIR "/calibration.json"); }

template <int N>
CellPoint<N> interior(std::uint64_t seed, double e = 1.0, double r = 1.0) {
  std::mt19937_64 gen(seed);
  const auto p = sample_interior<N>(gen, e, 0.05);
  return {e, r, std::sqrt(r) * p.w, p.H};
}

// min over every grid point of e - s((w + w_n)/sqrt r, H + V_n), recomputed from the output fields
template <int N, class StateAt>
double grid_margin(const WavePair<N>& f, StateAt&& state_at) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t kt = 0; kt < f.w.nt(); ++kt)
    for (std::size_t p = 0; p < f.w.grid().size(); ++p) {
      const CellPoint<N> c = state_at(kt, p);
      m = std::min(m, c.e - s_value<N>((c.w + f.w[kt].vec(p)) / std::sqrt(c.r), c.H + f.V[kt].mat(p)));
    }
  return m;
}

template <int N>
double max_abs(const WavePair<N>& f) {
  return std::max(f.w.max_abs(), f.V.max_abs());
}

template <int N>
double grid_energy(const WavePair<N>& f, double r = 1.0) {
  double s = 0.0;
  for (std::size_t kt = 0; kt < f.w.nt(); ++kt)
    for (std::size_t p = 0; p < f.w.grid().size(); ++p) s += f.w[kt].vec(p).squaredNorm();
  return s / r;
}

// composite Simpson on [a, b]
template <class F>
double simpson(F&& f, double a, double b, int n = 4000) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

template <int N>
bool same_fields(const WavePair<N>& a, const WavePair<N>& b) {
  for (std::size_t k = 0; k < a.w.nt(); ++k)
    if (a.w[k].data != b.w[k].data || a.V[k].data != b.V[k].data) return false;
  return true;
}

template <int N>
CoefficientField<N> constant_field(const TorusGrid<N>& g, const std::vector<double>& times, const CellPoint<N>& c,
                                   double delta) {
  CoefficientField<N> cf;
  cf.e = SpaceTimeField<N, 1>(g, times, c.e);
  cf.r = SpaceTimeField<N, 1>(g, times, c.r);
  cf.w = SpaceTimeField<N, N>(g, times);
  cf.H = SpaceTimeField<N, sym_size(N)>(g, times);
  for (std::size_t kt = 0; kt < times.size(); ++kt)
    for (std::size_t p = 0; p < g.size(); ++p) {
      cf.w[kt].set_vec(p, c.w);
      cf.H[kt].set_mat(p, c.H);
    }
  cf.delta = delta;
  cf.bounds = {c.r, c.r, c.e, c.e};
  return cf;
}

}  // namespace

// ---------------------------------------------------------------------------
// unit level

TEST(Unit, BoundaryPointGivesZeroIncrement) {
  TorusGrid<2> g(16);
  const auto times = uniform_times(1.0, 16);
  const auto b = boundary_point<2>(Vec<2>(0.6, -0.3));
  const auto r = increment_unit<2>(b.e, b.w, b.H, 32, 3, g, times);
  EXPECT_TRUE(r.cell.trivial);
  EXPECT_EQ(max_abs(r.fields), 0.0);
}

TEST(Unit, OutsideThrows) {
  TorusGrid<2> g(8);
  const auto times = uniform_times(1.0, 8);
  EXPECT_THROW(increment_unit<2>(0.1, Vec<2>(1.0, 0.0), Mat<2>::Zero(), 16, 1, g, times), PreconditionError);
}

TEST(Unit, OriginEnergyMatchesQuadrature) {
  TorusGrid<2> g(64);
  const auto times = uniform_times(1.0, 64);
  const auto r = increment_unit<2>(0.5, Vec<2>::Zero(), Mat<2>::Zero(), 32, 7, g, times);
  ASSERT_TRUE(r.cell.applied);
  const auto& w = r.cell.wave;
  // 1/2 L^2 |a-b|^2 int phi^2, cutoff on (-0.5, 0.5) around each centre
  double phi2 = 1.0;
  for (int d = 0; d <= 2; ++d)
    phi2 *= simpson([&](double y) { return std::pow(cutoff_1d<double>(y, w.center(d), w.half(d))[0], 2); },
                    w.center(d) - w.half(d), w.center(d) + w.half(d));
  const double oracle = 0.5 * w.L * w.L * (w.a - w.b).squaredNorm() * phi2;
  EXPECT_NEAR(r.mean_energy / oracle, 1.0, 0.25);
  const double grid_mean = grid_energy(r.fields) / (g.size() * times.size());
  EXPECT_NEAR(grid_mean / oracle, 1.0, 0.25);
}

TEST(Unit, BelowThresholdGivesZeroFields) {
  TorusGrid<2> g(32);
  const auto times = uniform_times(1.0, 32);
  const auto c = interior<2>(21);
  const std::vector<int> sched{1, 2, 4, 8, 16, 32, 64, 128};
  const int n0 = measure_n0<2>(c, unit_box<2>(), sched, 5, g, times);
  ASSERT_GT(n0, 1);
  const auto low = increment_scaled<2>(c, unit_box<2>(), n0 / 2, 5, g, times);
  EXPECT_TRUE(low.cell.below_n0);
  EXPECT_LE(low.cell.min_def_after, 0.0);
  EXPECT_EQ(max_abs(low.fields), 0.0);
  const auto ok = increment_scaled<2>(c, unit_box<2>(), n0, 5, g, times);
  EXPECT_TRUE(ok.cell.applied);
  EXPECT_GT(max_abs(ok.fields), 0.0);
}

template <int N>
void inclusion_sweep(int res, int points) {
  TorusGrid<N> g(res);
  const auto times = uniform_times(1.0, res);
  const double c_cal = shipped().c_energy(N);
  ASSERT_GT(c_cal, 0.0);
  for (int i = 0; i < points; ++i) {
    const auto c = interior<N>(100 + i);
    const auto r = increment_unit<N>(c.e, c.w, c.H, 128, 40 + i, g, times);
    ASSERT_TRUE(r.cell.applied) << "point " << i;
    EXPECT_GT(grid_margin<N>(r.fields, [&](std::size_t, std::size_t) { return c; }), 0.0) << "point " << i;
    EXPECT_GE(r.ratio, 0.7 * c_cal) << "point " << i;
  }
}

TEST(Unit, InclusionAndEnergyPlanar) { inclusion_sweep<2>(32, 10); }
TEST(Unit, InclusionAndEnergySpatial) { inclusion_sweep<3>(16, 4); }

TEST(Unit, DivergenceIdentitiesOfCommittedPacket) {
  TorusGrid<2> g(16);
  const auto times = uniform_times(1.0, 16);
  const auto c = interior<2>(3);
  const auto r = increment_unit<2>(c.e, c.w, c.H, 64, 9, g, times);
  ASSERT_TRUE(r.cell.applied);
  const auto& w = r.cell.wave;
  std::mt19937_64 gen(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    const auto res = pointwise_residual<2>(w, u(gen), {u(gen), u(gen)});
    EXPECT_LT(res[0], 1e-8 * w.L * w.k);
    EXPECT_LT(res[1], 1e-8 * w.L * w.k);
  }
}

TEST(Unit, WeakPairingDecays) {
  const auto times = uniform_times(1.0, 32);
  std::array<std::function<double(double)>, 2> g2{[](double x) { return std::cos(kTwoPi * x) + 0.5; },
                                                  [](double x) { return std::sin(kTwoPi * x) + x; }};
  std::array<std::function<double(double)>, 3> g3{g2[0], g2[1], [](double x) { return x * x; }};
  auto slope = [&](auto c, auto& g, auto dir) {
    std::vector<double> ns, ys;
    for (int n : {8, 16, 32, 64, 128}) {
      constexpr int N = decltype(dir)::RowsAtCompileTime;
      const auto pl = plan_cell<N>(c, unit_box<N>(), n, 17);
      ns.push_back(n);
      ys.push_back(weak_pairing_sup<N>(pl.wave, times, dir, g));
    }
    return loglog_slope(ns, ys);
  };
  EXPECT_LE(slope(interior<2>(4), g2, Vec<2>(1.0, 0.0)), -0.8);
  EXPECT_LE(slope(interior<3>(4), g3, Vec<3>(0.0, 1.0, 0.0)), -0.8);
}

TEST(Unit, Deterministic) {
  TorusGrid<2> g(16);
  const auto times = uniform_times(1.0, 16);
  const auto c = interior<2>(8);
  const auto a = increment_unit<2>(c.e, c.w, c.H, 32, 12, g, times);
  const auto b = increment_unit<2>(c.e, c.w, c.H, 32, 12, g, times);
  EXPECT_TRUE(same_fields(a.fields, b.fields));
}

// ---------------------------------------------------------------------------
// scaled level

TEST(Scaled, UnitBoxAndDensityOneIsUnitLevel) {
  TorusGrid<2> g(16);
  const auto times = uniform_times(1.0, 16);
  const auto c = interior<2>(9);
  const auto a = increment_unit<2>(c.e, c.w, c.H, 32, 4, g, times);
  const auto b = increment_scaled<2>(c, unit_box<2>(), 32, 4, g, times);
  EXPECT_TRUE(same_fields(a.fields, b.fields));
}

TEST(Scaled, DensityFourDoublesAmplitude) {
  TorusGrid<2> g(32);
  const auto times = uniform_times(1.0, 256);
  const auto c1 = interior<2>(10, 1.0, 1.0);
  const CellPoint<2> c4{c1.e, 4.0, 2.0 * c1.w, c1.H};
  const auto a = increment_scaled<2>(c1, unit_box<2>(), 64, 6, g, times);
  const auto b = increment_scaled<2>(c4, unit_box<2>(), 64, 6, g, times);
  ASSERT_TRUE(a.cell.applied && b.cell.applied);
  EXPECT_NEAR(b.fields.w.max_abs() / a.fields.w.max_abs(), 2.0, 0.1);
  EXPECT_GT(grid_margin<2>(b.fields, [&](std::size_t, std::size_t) { return c4; }), 0.0);
  EXPECT_NEAR(b.mean_energy / a.mean_energy, 1.0, 0.1);
}

TEST(Scaled, HalfBoxKeepsSupportAndRatio) {
  TorusGrid<2> g(64);
  const auto times = uniform_times(1.0, 64);
  const auto c = interior<2>(11);
  const SpaceTimeBox<2> half{0.25, 0.75, Vec<2>(0.25, 0.5), Vec<2>(0.75, 1.0)};
  const auto a = increment_scaled<2>(c, unit_box<2>(), 64, 2, g, times);
  const auto b = increment_scaled<2>(c, half, 64, 2, g, times);
  ASSERT_TRUE(a.cell.applied && b.cell.applied);
  for (std::size_t kt = 0; kt < times.size(); ++kt)
    for (std::size_t p = 0; p < g.size(); ++p)
      if (!half.contains_open(times[kt], g.point(p))) {
        EXPECT_EQ(b.fields.w[kt].vec(p).norm(), 0.0);
        EXPECT_EQ(b.fields.V[kt].mat(p).norm(), 0.0);
      }
  EXPECT_NEAR(b.ratio / a.ratio, 1.0, 0.1);
}

// ---------------------------------------------------------------------------
// piecewise level

TEST(Piecewise, SingleCellIsScaled) {
  TorusGrid<2> g(16);
  const auto times = uniform_times(1.0, 16);
  const auto c = interior<2>(12);
  const auto pc = uniform_piecewise<2>(1, 1.0, c);
  const auto a = increment_piecewise<2>(pc, 32, 77, g, times);
  const auto b = increment_scaled<2>(c, unit_box<2>(), 32, cell_seed(77, 0), g, times);
  EXPECT_TRUE(same_fields(a.fields, b.fields));
  EXPECT_DOUBLE_EQ(a.energy, b.cell.energy);
}

TEST(Piecewise, DisjointCellsAdd) {
  TorusGrid<2> g(32);
  const auto times = uniform_times(1.0, 32);
  const auto c = interior<2>(13);
  const auto pc = uniform_piecewise<2>(2, 1.0, c);
  const auto all = increment_piecewise<2>(pc, 32, 5, g, times);
  ASSERT_EQ(all.cells.size(), 8u);
  double sum_grid = 0.0, sum_quad = 0.0;
  SpaceTimeField<2, 2> acc(g, times);
  for (std::size_t k = 0; k < 8; ++k) {
    const auto one = increment_scaled<2>(c, pc.box(k), 32, cell_seed(5, k), g, times);
    ASSERT_TRUE(one.cell.applied);
    sum_grid += grid_energy(one.fields);
    sum_quad += one.cell.energy;
    for (std::size_t kt = 0; kt < times.size(); ++kt) acc[kt] += one.fields.w[kt];
  }
  EXPECT_NEAR(grid_energy(all.fields), sum_grid, 1e-10 * sum_grid);
  EXPECT_NEAR(all.energy, sum_quad, 1e-10 * sum_quad);
  for (std::size_t kt = 0; kt < times.size(); ++kt) EXPECT_EQ(acc[kt].data, all.fields.w[kt].data);
}

TEST(Piecewise, BoundaryCellContributesNothing) {
  TorusGrid<2> g(32);
  const auto times = uniform_times(1.0, 32);
  const auto c = interior<2>(14);
  auto pc = uniform_piecewise<2>(2, 1.0, c);
  const auto b = boundary_point<2>(Vec<2>(0.5, 0.5));
  pc.cells[3] = {b.e, 1.0, b.w, b.H};
  const auto all = increment_piecewise<2>(pc, 32, 5, g, times);
  EXPECT_TRUE(all.cells[3].trivial);
  const auto box = pc.box(3);
  for (std::size_t kt = 0; kt < times.size(); ++kt)
    for (std::size_t p = 0; p < g.size(); ++p)
      if (box.contains_open(times[kt], g.point(p))) EXPECT_EQ(all.fields.w[kt].vec(p).norm(), 0.0);
  const auto other = increment_scaled<2>(c, pc.box(5), 32, cell_seed(5, 5), g, times);
  EXPECT_DOUBLE_EQ(all.cells[5].energy, other.cell.energy);
}

TEST(Piecewise, AuditOrderAndHashes) {
  TorusGrid<2> g(16);
  const auto times = uniform_times(1.0, 16);
  auto pc = uniform_piecewise<2>(2, 1.0, interior<2>(15));
  const auto a = increment_piecewise<2>(pc, 16, 1, g, times);
  EXPECT_TRUE(a.adapted);
  for (std::size_t k = 1; k < a.audit.size(); ++k) EXPECT_LE(a.audit[k - 1].start_time, a.audit[k].start_time);
  pc.cells[6].H(0, 1) += 1e-3;
  pc.cells[6].H(1, 0) += 1e-3;
  const auto b = increment_piecewise<2>(pc, 16, 1, g, times);
  for (std::size_t k = 0; k < a.audit.size(); ++k)
    EXPECT_EQ(a.audit[k].input_hash == b.audit[k].input_hash, k != 6) << "cell " << k;
  pc.sample_time[6] = pc.box(6).t0 + 0.1;
  EXPECT_FALSE(increment_piecewise<2>(pc, 16, 1, g, times).adapted);
}

// ---------------------------------------------------------------------------
// approximation

TEST(Approx, ConstantIsExact) {
  TorusGrid<2> g(16);
  const auto times = uniform_times(1.0, 16);
  const auto cf = constant_field<2>(g, times, interior<2>(16), 0.1);
  EXPECT_EQ(approx_piecewise<2>(cf, 4).delta_ap, 0.0);
}

CoefficientField<2> sine_energy(const TorusGrid<2>& g, const std::vector<double>& times) {
  auto cf = constant_field<2>(g, times, {1.0, 1.0, Vec<2>::Zero(), Mat<2>::Zero()}, 0.1);
  for (std::size_t kt = 0; kt < times.size(); ++kt)
    for (std::size_t p = 0; p < g.size(); ++p) cf.e[kt](0, p) = 1.0 + 0.1 * std::sin(kTwoPi * g.point(p)[0]);
  return cf;
}

TEST(Approx, ModulusOfContinuityBound) {
  TorusGrid<2> g(64);
  const auto times = uniform_times(1.0, 16);
  const auto ap = approx_piecewise<2>(sine_energy(g, times), 8);
  EXPECT_GT(ap.delta_ap, 0.0);
  EXPECT_LT(ap.delta_ap, 0.1 * kTwoPi / 8);
}

TEST(Approx, DoublingHalvesError) {
  TorusGrid<2> g(128);
  const auto times = uniform_times(1.0, 32);
  const auto cf = sine_energy(g, times);
  double prev = approx_piecewise<2>(cf, 8).delta_ap;
  for (int m : {16, 32}) {
    const double d = approx_piecewise<2>(cf, m).delta_ap;
    EXPECT_NEAR(d / prev, 0.5, 0.15) << "m = " << m;
    prev = d;
  }
}

TEST(Approx, CellsReadInitialTime) {
  TorusGrid<2> g(16);
  const auto times = uniform_times(1.0, 16);
  auto cf = constant_field<2>(g, times, {1.0, 1.0, Vec<2>::Zero(), Mat<2>::Zero()}, 0.1);
  for (std::size_t kt = 0; kt < times.size(); ++kt)
    for (std::size_t p = 0; p < g.size(); ++p) cf.r[kt](0, p) = 1.0 + times[kt];
  const auto ap = approx_piecewise<2>(cf, 4);
  for (std::size_t k = 0; k < ap.pc.cells.size(); ++k) {
    EXPECT_DOUBLE_EQ(ap.pc.sample_time[k], ap.pc.box(k).t0);
    EXPECT_DOUBLE_EQ(ap.pc.cells[k].r, 1.0 + ap.pc.box(k).t0);
  }
}

// ---------------------------------------------------------------------------
// continuous level

TEST(Continuous, ConstantReducesToPiecewise) {
  TorusGrid<2> g(16);
  const auto times = uniform_times(1.0, 16);
  const auto c = interior<2>(17);
  const auto cf = constant_field<2>(g, times, c, 0.01);
  const auto ci = increment_continuous<2>(cf, 32, 3);
  EXPECT_EQ(ci.m, 1);
  const auto pw = increment_piecewise<2>(uniform_piecewise<2>(1, 1.0, c), 32, 3, g, times);
  EXPECT_TRUE(same_fields(ci.piecewise.fields, pw.fields));
}

TEST(Continuous, SmoothFieldsKeepMargin) {
  TorusGrid<2> g(32);
  const auto times = uniform_times(1.0, 32);
  const double c_cal = shipped().c_energy(2);
  for (std::uint64_t s : {0u, 1u}) {
    const auto cf = random_coefficient_field<2>(g, times, s, 0.2);
    const auto ci = increment_continuous<2>(cf, 128, s);
    EXPECT_LT(ci.delta_ap, 0.05);
    const double m = grid_margin<2>(ci.piecewise.fields, [&](std::size_t kt, std::size_t p) { return cf.at(kt, p); });
    EXPECT_GT(m, 0.0);
    EXPECT_DOUBLE_EQ(m, ci.delta_n);
    EXPECT_GE(ci.oscil_ratio, 0.7 * c_cal);
    EXPECT_TRUE(ci.piecewise.adapted);
  }
}

TEST(Continuous, RoughFieldsNeedFinerGrid) {
  TorusGrid<2> g(16);
  const auto times = uniform_times(1.0, 16);
  EXPECT_THROW(increment_continuous<2>(random_coefficient_field<2>(g, times, 0, 0.2, 0.3), 64, 0), RefinementError);
}

TEST(Continuous, MarginViolationThrows) {
  TorusGrid<2> g(16);
  const auto times = uniform_times(1.0, 16);
  auto cf = random_coefficient_field<2>(g, times, 0, 0.2);
  cf.e[3](0, 5) -= 0.35;
  EXPECT_THROW(increment_continuous<2>(cf, 64, 0), PreconditionError);
  auto cf2 = random_coefficient_field<2>(g, times, 0, 0.2);
  cf2.r[0](0, 0) = cf2.bounds.r_hi + 1.0;
  EXPECT_THROW(increment_continuous<2>(cf2, 64, 0), PreconditionError);
}

TEST(Calibration, EnergyConstantIsPositive) {
  const auto c = calibrate_energy<2>(50, 3, 64);
  EXPECT_GT(c.min_ratio, 0.0);
  EXPECT_LE(c.min_ratio, c.median_ratio);
  EXPECT_EQ(calibrate_energy<2>(50, 3, 64).min_ratio, c.min_ratio);
}
