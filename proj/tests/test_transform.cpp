#include <gtest/gtest.h>

#include <cmath>

#include "convint/transform.hpp"

using namespace convint;

namespace {

constexpr double kPi = std::numbers::pi;

StoppedPath path_from(std::vector<double> values, double T, double a = 0.25) {
  StoppedPath s;
  s.base = WienerPath{0, T, T / static_cast<double>(values.size() - 1), values};
  s.values = std::move(values);
  s.a = a;
  s.M = 1e9;
  s.tau_index = s.base.steps();
  return s;
}

StoppedPath zero_path(std::size_t steps, double T = 1.0) { return path_from(std::vector<double>(steps + 1, 0.0), T); }

StoppedPath linear_path(std::size_t steps, double slope, double T = 1.0) {
  std::vector<double> v(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k) v[k] = slope * T * static_cast<double>(k) / static_cast<double>(steps);
  return path_from(v, T);
}

StoppedPath brownian(std::uint64_t seed, double dt = 1.0 / 1024.0, double M = 4.0) {
  return stop_path(sample_wiener(seed, 1.0, dt), 0.25, M);
}

ScalarField<2> bump_density(const TorusGrid<2>& g) {
  return sample<2>(g, [](const Vec<2>& x) { return 1.0 + 0.3 * std::sin(2 * kPi * x[0]) * std::cos(2 * kPi * x[1]); });
}

ScalarField<2> potential(const TorusGrid<2>& g, double c = 0.02) {
  return sample<2>(g, [c](const Vec<2>& x) { return c * std::cos(2 * kPi * (x[0] + x[1])); });
}

double max_diff(const ScalarField<2>& a, const ScalarField<2>& b) { return (a - b).max_abs(); }

}  // namespace

// ---------------------------------------------------------------------------
// split

TEST(Split, ConstantMomentum) {
  TorusGrid<2> g(16);
  const auto s = split_initial<2>(sample_vector<2>(g, [](const Vec<2>&) { return Vec<2>(0.7, -0.2); }));
  EXPECT_LT(s.v0.max_abs(), 1e-14);
  EXPECT_LT(s.Psi0.max_abs(), 1e-14);
  EXPECT_NEAR(s.V0[0], 0.7, 1e-14);
  EXPECT_NEAR(s.V0[1], -0.2, 1e-14);
}

TEST(Split, GradientMomentum) {
  TorusGrid<2> g(16);
  const auto s = split_initial<2>(gradient(potential(g)));
  EXPECT_LT(s.v0.max_abs(), 1e-13);
  EXPECT_LT(s.V0.cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Split, MixedFieldRecovered) {
  TorusGrid<2> g(32);
  // v0 = rotated gradient of a stream function, Psi0 zero-mean, V0 constant
  const auto v0 = sample_vector<2>(g, [](const Vec<2>& x) {
    return Vec<2>(2 * kPi * std::cos(2 * kPi * x[1]) * std::sin(4 * kPi * x[0]),
                  -4 * kPi * std::cos(4 * kPi * x[0]) * std::sin(2 * kPi * x[1]));
  });
  const auto psi = sample<2>(g, [](const Vec<2>& x) { return std::sin(2 * kPi * x[0]) + 0.5 * std::cos(6 * kPi * x[1]); });
  const auto gp = sample_vector<2>(g, [](const Vec<2>& x) {
    return Vec<2>(2 * kPi * std::cos(2 * kPi * x[0]), -3 * kPi * std::sin(6 * kPi * x[1]));
  });
  VectorField<2> m(g);
  for (std::size_t p = 0; p < g.size(); ++p) m.set_vec(p, v0.vec(p) + gp.vec(p) + Vec<2>(0.3, 0.1));
  const auto s = split_initial<2>(m);
  EXPECT_LT((s.v0 - v0).max_abs(), 1e-10);
  EXPECT_LT(max_diff(s.Psi0, psi), 1e-10);
  EXPECT_NEAR(s.V0[0], 0.3, 1e-12);
  EXPECT_LT(s.reassembly_error, 1e-10);
  EXPECT_LT(divergence(s.v0).max_abs(), 1e-10);
}

TEST(ChoosePsi, TimeConstant) {
  TorusGrid<2> g(16);
  const auto t = uniform_times(1.0, 8);
  const auto psi = choose_psi<2>(potential(g), t);
  ASSERT_EQ(psi.nt(), t.size());
  for (std::size_t k = 1; k < psi.nt(); ++k) EXPECT_EQ(psi[k].data, psi[0].data);
  EXPECT_EQ(choose_psi<2>(ScalarField<2>(g), t).max_abs(), 0.0);
}

TEST(ChoosePsi, PresetKeepsDensityAboveFloor) {
  TorusGrid<2> g(32);
  for (double floor : {0.3, 0.5, 0.7}) {
    const auto in = initial_preset<2>("smooth", g, 1.0, floor);
    const auto s = split_initial<2>(in.mom0);
    const auto sol = solve_continuity_multiplicative<2>(in.rho0, s.Psi0, zero_path(64), 8);
    EXPECT_GE(sol.rho_min, floor - 1e-12) << floor;
  }
}

// ---------------------------------------------------------------------------
// continuity

TEST(ContinuityAdditive, TrivialCases) {
  TorusGrid<2> g(16);
  const auto rho0 = bump_density(g);
  const auto G = noise_preset<2>("shear", g);
  const auto a = solve_continuity_additive<2>(rho0, ScalarField<2>(g), VectorField<2>(g), brownian(3, 1.0 / 64), 8);
  for (const auto& s : a.rho.slices) EXPECT_LT(max_diff(s, rho0), 1e-13);
  const auto b = solve_continuity_additive<2>(rho0, ScalarField<2>(g), G, zero_path(64), 8);
  for (const auto& s : b.rho.slices) EXPECT_LT(max_diff(s, rho0), 1e-13);
}

TEST(ContinuityAdditive, LinearDecayWithoutNoise) {
  TorusGrid<2> g(16);
  const auto rho0 = bump_density(g);
  const double c = 0.005;
  const auto sol = solve_continuity_additive<2>(rho0, potential(g, c), VectorField<2>(g), brownian(5, 1.0 / 128), 16);
  for (std::size_t k = 0; k < sol.rho.nt(); ++k) {
    const double t = sol.rho.times[k];
    // Laplace(c cos(2 pi (x + y))) = -8 pi^2 c cos(...)
    const auto want = sample<2>(g, [&](const Vec<2>& x) {
      return 1.0 + 0.3 * std::sin(2 * kPi * x[0]) * std::cos(2 * kPi * x[1]) + t * 8 * kPi * kPi * c * std::cos(2 * kPi * (x[0] + x[1]));
    });
    EXPECT_LT(max_diff(sol.rho[k], want), 1e-12) << t;
  }
}

TEST(ContinuityAdditive, ConstantDriftTranslates) {
  TorusGrid<2> g(32);
  const auto rho0 = bump_density(g);
  const Vec<2> c(0.4, -0.25);
  const auto G = sample_vector<2>(g, [&](const Vec<2>&) { return c; });
  const auto path = brownian(11);
  const auto sol = solve_continuity_additive<2>(rho0, ScalarField<2>(g), G, path, 128);
  // shift by the exact time integral of the piecewise-linear path
  std::vector<double> B{0.0};
  for (std::size_t k = 0; k < path.steps(); ++k) B.push_back(B.back() + 0.5 * path.dt() * (path.values[k] + path.values[k + 1]));
  for (std::size_t k = 0; k < sol.rho.nt(); ++k) {
    const double b = B[k * 128];
    const auto want = sample<2>(g, [&](const Vec<2>& x) {
      const Vec<2> y = x - b * c;
      return 1.0 + 0.3 * std::sin(2 * kPi * y[0]) * std::cos(2 * kPi * y[1]);
    });
    EXPECT_LT(max_diff(sol.rho[k], want), 1e-8) << k;
  }
}

TEST(ContinuityAdditive, MassConservedAndResidualSmall) {
  TorusGrid<2> g(32);
  const auto in = initial_preset<2>("smooth", g);
  const auto s = split_initial<2>(in.mom0);
  const auto G = noise_preset<2>("shear", g);
  const auto sol = solve_continuity_additive<2>(in.rho0, s.Psi0, G, brownian(1), 64);
  EXPECT_LT(sol.mass_error, 1e-8);
  EXPECT_LT(sol.residual, 1e-3);
  EXPECT_GT(sol.rho_min, 0.0);
}

TEST(ContinuityAdditive, PositivityLossIsReported) {
  TorusGrid<2> g(16);
  EXPECT_THROW(solve_continuity_additive<2>(bump_density(g), potential(g, 0.5), VectorField<2>(g), zero_path(64), 8, 0.1),
               FrameError);
}

TEST(ContinuityMultiplicative, ClosedForms) {
  TorusGrid<2> g(16);
  const auto rho0 = bump_density(g);
  const double c = 0.003;
  const auto L = sample<2>(g, [&](const Vec<2>& x) { return -8 * kPi * kPi * c * std::cos(2 * kPi * (x[0] + x[1])); });
  // Psi = 0
  const auto a = solve_continuity_multiplicative<2>(rho0, ScalarField<2>(g), brownian(2, 1.0 / 64), 8);
  for (const auto& s : a.rho.slices) EXPECT_EQ(max_diff(s, rho0), 0.0);
  // beta = 0 and beta = t
  for (double slope : {0.0, 1.0}) {
    const auto sol = solve_continuity_multiplicative<2>(rho0, potential(g, c), linear_path(64, slope), 8);
    for (std::size_t k = 0; k < sol.rho.nt(); ++k) {
      const double t = sol.rho.times[k];
      const double I = slope == 0.0 ? t : std::expm1(t);
      EXPECT_LT(max_diff(sol.rho[k], rho0 - I * L), 1e-12) << slope << " " << t;
    }
    EXPECT_LT(sol.mass_error, 1e-14);
  }
}

TEST(ContinuityMultiplicative, FrozenTailIsLinear) {
  TorusGrid<2> g(16);
  const auto rho0 = bump_density(g);
  // stopped with a tight M so the path freezes early
  const auto path = stop_path(sample_wiener(9, 1.0, 1.0 / 256), 0.25, 0.6);
  ASSERT_TRUE(path.exceeded);
  const auto sol = solve_continuity_multiplicative<2>(rho0, potential(g, 0.005), path, 1);
  const double eb = std::exp(path.values.back());
  const auto L = laplacian(potential(g, 0.005));
  for (std::size_t k = path.tau_index + 1; k <= path.steps(); ++k) {
    const double dt = sol.rho.times[k] - sol.rho.times[k - 1];
    EXPECT_LT(max_diff(sol.rho[k], sol.rho[k - 1] - dt * eb * L), 1e-13);
  }
}

// ---------------------------------------------------------------------------
// V

TEST(VAdditive, TrivialCases) {
  TorusGrid<2> g(16);
  const auto rho = bump_density(g);
  const Vec<2> V0(0.3, -0.1);
  const auto at = [&](std::size_t) { return rho; };
  auto V = solve_V_additive<2>(at, VectorField<2>(g), potential(g), brownian(4, 1.0 / 64), V0);
  for (const auto& v : V) EXPECT_LT((v - V0).norm(), 1e-15);
  V = solve_V_additive<2>(at, noise_preset<2>("smooth", g), potential(g), zero_path(64), V0);
  for (const auto& v : V) EXPECT_LT((v - V0).norm(), 1e-15);
}

TEST(VAdditive, ConstantIntegrand) {
  TorusGrid<2> g(32);
  const double a = 0.5, c = 0.3, beta = 1.5;
  const auto rho = sample<2>(g, [](const Vec<2>& x) { return 1.0 + 0.5 * std::cos(2 * kPi * x[0]) * std::cos(2 * kPi * x[1]); });
  const auto G = sample_vector<2>(g, [&](const Vec<2>& x) { return Vec<2>(a * std::sin(2 * kPi * x[1]), a * std::cos(2 * kPi * x[0])); });
  const auto Psi = sample<2>(g, [&](const Vec<2>& x) { return c * std::sin(2 * kPi * x[1]) / (2 * kPi); });
  const auto path = path_from(std::vector<double>(65, beta), 1.0);
  const Vec<2> V0(0.1, 0.2);
  const auto V = solve_V_additive<2>([&](std::size_t) { return rho; }, G, Psi, path, V0);
  const Vec<2> I0(beta * beta * kPi * a * a / 4.0 + beta * kPi * a * c, 0.0);
  for (std::size_t k = 0; k < V.size(); ++k) EXPECT_LT((V[k] - (V0 - path.base.time(k) * I0)).norm(), 1e-10) << k;
}

TEST(VMultiplicative, ClosedForm) {
  const auto V = solve_V_multiplicative<2>(Vec<2>(1.0, 0.0), {0.0, 1.0, 2.0});
  EXPECT_NEAR(V[2][0], std::exp(-1.0), 1e-15);
  EXPECT_EQ(V[2][1], 0.0);
  EXPECT_LT(V[2].norm(), V[1].norm());
  for (const auto& v : solve_V_multiplicative<2>(Vec<2>::Zero(), {0.0, 0.5})) EXPECT_EQ(v.norm(), 0.0);
}

// ---------------------------------------------------------------------------
// frame

TEST(FrameAdditive, TrivialFrame) {
  TorusGrid<2> g(16);
  InitialData<2> in{bump_density(g), sample_vector<2>(g, [](const Vec<2>&) { return Vec<2>(0.2, 0.1); }), 0.0};
  FrameConfig cfg;
  cfg.law.kappa = 0.0;
  cfg.stride = 8;
  const auto fr = assemble_frame<2>(in, VectorField<2>(g), brownian(1, 1.0 / 64), cfg);
  EXPECT_EQ(fr.Mt.max_abs(), 0.0);
  for (const auto& h : fr.h.slices)
    for (std::size_t p = 0; p < g.size(); ++p) EXPECT_LT((h.vec(p) - Vec<2>(0.2, 0.1)).norm(), 1e-14);
}

TEST(FrameAdditive, RhsMeanCancelsAndSolveHolds) {
  TorusGrid<2> g(32);
  const auto in = initial_preset<2>("smooth", g);
  FrameConfig cfg;
  cfg.stride = 16;
  const auto fr = assemble_frame<2>(in, noise_preset<2>("shear", g), brownian(7), cfg);
  EXPECT_LT(fr.rhs_mean, 1e-10);
  // pressure of a band-limited density carries some Nyquist content the corrector cannot represent
  EXPECT_LT(fr.elliptic_residual, 1e-6);
  EXPECT_LT(fr.v0_div, 1e-10);
  EXPECT_GE(fr.bounds.r_min, 1.0 / fr.bounds.c_M);
  for (const auto& m : fr.Mt.slices) EXPECT_LT(max_trace<2>(m), 1e-12);
  // raw forcing mean before the explicit subtraction is not small: the correction matters
  const auto s = split_initial<2>(in.mom0);
  VectorField<2> q = gradient(s.Psi0);
  const auto G = noise_preset<2>("shear", g);
  const double b = fr.beta[fr.times.size() / 2];
  const auto& rho = fr.rho[fr.times.size() / 2];
  for (std::size_t p = 0; p < g.size(); ++p) q.set_vec(p, q.vec(p) + rho(0, p) * b * G.vec(p));
  const auto dq = divergence(q);
  VectorField<2> f(g);
  for (std::size_t p = 0; p < g.size(); ++p) f.set_vec(p, b * dq(0, p) * G.vec(p));
  if (b != 0.0) EXPECT_GT(mean_vector(f).norm(), 1e-6);
}

TEST(FrameAdditive, ZeroPathLeavesPotentialOnly) {
  TorusGrid<2> g(16);
  const auto in = initial_preset<2>("smooth", g);
  FrameConfig cfg;
  cfg.stride = 8;
  const auto fr = assemble_frame<2>(in, noise_preset<2>("shear", g), zero_path(64), cfg);
  const auto s = split_initial<2>(in.mom0);
  const auto gp = gradient(s.Psi0);
  for (std::size_t k = 0; k < fr.times.size(); ++k)
    for (std::size_t p = 0; p < g.size(); ++p) EXPECT_LT((fr.h[k].vec(p) - fr.V[k] - gp.vec(p)).norm(), 1e-14);
}

TEST(FrameMultiplicative, TrivialAndLinear) {
  TorusGrid<2> g(16);
  InitialData<2> in{bump_density(g), VectorField<2>(g), 0.0};
  FrameConfig cfg;
  cfg.kind = NoiseKind::Multiplicative;
  cfg.law.kappa = 0.0;
  cfg.stride = 8;
  const auto path = brownian(3, 1.0 / 64);
  const auto fr0 = assemble_frame<2>(in, VectorField<2>(g), path, cfg);
  VectorField<2> zero(g);
  EXPECT_EQ(fr0.corrector(2, &zero).max_abs(), 0.0);

  const auto in2 = initial_preset<2>("smooth", g);
  cfg.law.kappa = 1.0;
  const auto fr = assemble_frame<2>(in2, VectorField<2>(g), path, cfg);
  const auto v1 = split_initial<2>(noise_preset<2>("smooth", g)).v0;
  const auto v2 = split_initial<2>(in2.mom0).v0;
  const VectorField<2> v12 = v1 + v2;
  for (std::size_t k : {std::size_t{0}, std::size_t{5}}) {
    const auto lhs = fr.corrector(k, &v12) - fr.corrector(k, &v1) - fr.corrector(k, &v2) + fr.corrector(k);
    EXPECT_LT(lhs.max_abs(), 1e-10);
    // the v/2 part solved independently
    const auto half = solve_elliptic_m<2>(0.5 * v1).Mt;
    EXPECT_LT((fr.corrector(k, &v1) - fr.corrector(k) - half).max_abs(), 1e-12);
  }
  EXPECT_LT(fr.rhs_mean, 1e-10);
  for (std::size_t k = 0; k < fr.times.size(); ++k)
    for (std::size_t p = 0; p < g.size(); p += 17)
      EXPECT_NEAR(fr.r[k](0, p), fr.rho[k](0, p) * std::exp(-fr.beta[k]), 1e-14);
}

// ---------------------------------------------------------------------------
// back-transform and weak residuals

TEST(BackTransform, InitialSliceAndMass) {
  TorusGrid<2> g(32);
  const auto in = initial_preset<2>("smooth", g);
  for (auto kind : {NoiseKind::Additive, NoiseKind::Multiplicative}) {
    FrameConfig cfg;
    cfg.kind = kind;
    cfg.stride = 32;
    const auto path = brownian(5);
    const auto fr = assemble_frame<2>(in, noise_preset<2>("shear", g), path, cfg);
    SpaceTimeField<2, 2> v(g, fr.times);
    for (auto& s : v.slices) s = fr.v0;
    const auto st = back_transform(fr, v);
    const auto rep = weak_residuals(fr, st, path, in);
    EXPECT_LT(rep.initial, 1e-10) << to_string(kind);
    EXPECT_LT(rep.mass_gap, 1e-8) << to_string(kind);
  }
}

TEST(BackTransform, UniformFlowHasNoResidual) {
  TorusGrid<2> g(16);
  InitialData<2> in{sample<2>(g, [](const Vec<2>&) { return 1.3; }),
                    sample_vector<2>(g, [](const Vec<2>&) { return Vec<2>(0.4, -0.2); }), 0.0};
  FrameConfig cfg;
  cfg.stride = 16;
  const auto path = zero_path(256);
  const auto fr = assemble_frame<2>(in, VectorField<2>(g), path, cfg);
  const auto st = back_transform(fr, SpaceTimeField<2, 2>(g, fr.times));
  const auto rep = weak_residuals(fr, st, path, in);
  EXPECT_LT(rep.continuity, 1e-13);
  EXPECT_LT(rep.momentum, 1e-13);
}

TEST(TestFamily, LowestModes) {
  const auto ks = test_modes<2>(25);
  ASSERT_EQ(ks.size(), 25u);
  EXPECT_EQ(ks[0], (std::array<int, 2>{0, 0}));
  EXPECT_EQ(ks[24][0] * ks[24][0] + ks[24][1] * ks[24][1], 8);
}

// ---------------------------------------------------------------------------
// Ito reconstruction

TEST(Ito, TrivialCases) {
  TorusGrid<2> g(16);
  const auto mf = manufactured_flow<2>(g);
  const auto phi = sample_vector<2>(g, [](const Vec<2>& x) { return Vec<2>(std::cos(2 * kPi * x[0]), 0.0); });
  const auto path = brownian(1);
  auto r = ito_reconstruction_check<2>(mf, VectorField<2>(g), phi, path.values, path.dt());
  EXPECT_EQ(r.ito_sum, 0.0);
  EXPECT_EQ(r.gap, 0.0);
  r = ito_reconstruction_check<2>(mf, noise_preset<2>("shear", g), phi, std::vector<double>(1025, 0.0), 1.0 / 1024);
  EXPECT_EQ(r.ito_sum, 0.0);
  EXPECT_EQ(r.transformed, 0.0);
}

TEST(Ito, GapHalvesWithStep) {
  TorusGrid<2> g(16);
  const auto mf = manufactured_flow<2>(g);
  const auto G = noise_preset<2>("shear", g);
  const auto phi = sample_vector<2>(g, [](const Vec<2>& x) { return Vec<2>(std::cos(2 * kPi * x[0]), std::sin(2 * kPi * x[1])); });
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto fine = sample_wiener(seed, 1.0, 1.0 / 1024);
    std::vector<double> gaps;
    for (std::size_t stride : {4, 2, 1}) {
      const auto p = fine.coarsen(stride);
      gaps.push_back(std::abs(ito_reconstruction_check<2>(mf, G, phi, p.values, p.dt).gap));
    }
    EXPECT_GT(gaps[0], 1e-6) << seed;
    EXPECT_NEAR(gaps[1] / gaps[0], 0.5, 0.15) << seed;
    EXPECT_NEAR(gaps[2] / gaps[1], 0.5, 0.15) << seed;
  }
}
