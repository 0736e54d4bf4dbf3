// Acceptance run: one PASS/FAIL line per criterion.
//   acceptance            all criteria
//   acceptance 3 7        selected criteria
// Exit status 0 iff every selected criterion passes.

#include <chrono>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "commands.hpp"
#include "test_support.hpp"

using namespace convint;
namespace cli = convint::cli;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double x) {
  char b[32];
  std::snprintf(b, sizeof b, "%.4g", x);
  return b;
}

Calibration shipped() { return load_calibration(CONVINT_DATA_DIR "/calibration.json"); }

// ---------------------------------------------------------------------------
// 1. stopping time

Outcome stopping_time_criterion() {
  const double a = 0.25, dt = 1.0 / 1024;
  const std::vector<double> levels{0.5, 1.0, 2.0, 4.0};
  double worst = 0.0;
  bool monotone = true;
  for (std::uint64_t seed = 1; seed <= 16; ++seed) {
    const auto path = sample_wiener(seed, 1.0, dt);
    const auto cert = holder_process(path, a);
    const auto sp = stop_path(path, a, 1.0, &cert);
    // brute force over every pair of the stopped path
    const auto& x = sp.values;
    double sup = 0.0, semi = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      sup = std::max(sup, std::abs(x[j]));
      for (std::size_t i = 0; i < j; ++i)
        semi = std::max(semi, std::abs(x[j] - x[i]) / std::pow((j - i) * dt, a));
    }
    worst = std::max(worst, sup + semi);
    std::size_t prev = 0;
    for (double M : levels) {
      const auto s = stop_path(path, a, M, &cert);
      monotone = monotone && s.tau_index >= prev;
      prev = s.tau_index;
    }
  }
  return {worst <= 1.0 && monotone, "max norm " + num(worst) + " (M = 1), tau monotone " + (monotone ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 2. wave identities

template <int N>
SpaceTimeBox<N> wave_box() {
  SpaceTimeBox<N> b;
  b.t0 = 0.1;
  b.t1 = 0.9;
  b.lo = Vec<N>::Constant(0.15);
  b.hi = Vec<N>::Constant(0.85);
  return b;
}

template <int N>
Vec<N> on_sphere(std::mt19937_64& gen, double radius) {
  std::normal_distribution<double> nd;
  Vec<N> v;
  for (int i = 0; i < N; ++i) v[i] = nd(gen);
  return radius * v.normalized();
}

// max(|d_t w + div V|, |div w|) and the derivative scale, by complex-step differentiation
template <int N>
std::array<double, 2> complex_step(const WaveSpec<N>& w, const WaveKernel<N>& ker, double t, const Vec<N>& x) {
  using C = std::complex<double>;
  constexpr double h = 1e-30;
  std::array<std::array<double, pair_size<N>()>, N + 1> dv;
  for (int l = 0; l <= N; ++l) {
    C tc = t;
    std::array<C, N> xc;
    for (int d = 0; d < N; ++d) xc[d] = x[d];
    if (l == 0)
      tc += C(0.0, h);
    else
      xc[l - 1] += C(0.0, h);
    const auto v = evaluate_pair<N, C>(w, ker, tc, xc);
    for (int c = 0; c < pair_size<N>(); ++c) dv[l][c] = v[c].imag() / h;
  }
  double res = 0.0, scale = 0.0, div = 0.0;
  for (int i = 0; i < N; ++i) {
    double m = dv[0][i];
    scale = std::max(scale, std::abs(dv[0][i]));
    for (int j = 0; j < N; ++j) {
      m += dv[j + 1][N + sym_index<N>(i, j)];
      scale = std::max(scale, std::abs(dv[j + 1][N + sym_index<N>(i, j)]));
    }
    res = std::max(res, std::abs(m));
    div += dv[i + 1][i];
  }
  return {std::max(res, std::abs(div)), scale};
}

template <int N>
void wave_sweep(int res, std::size_t point_stride, double& worst_rel, bool& support_exact) {
  std::mt19937_64 gen(900 + N);
  const TorusGrid<N> g(res);
  const auto times = uniform_times(1.0, 64);
  for (int i = 0; i < 3; ++i) {
    const auto w = make_wave<N>(on_sphere<N>(gen, 1.0), on_sphere<N>(gen, 1.0), 0.7, 16 << i, wave_box<N>(), 1.0, 0.3);
    const auto ker = wave_kernel<N>(w);
    const auto P = apply_A<N>(w, g, times);
    double worst = 0.0, scale = 0.0;
    for (std::size_t k = 0; k < times.size(); ++k)
      for (std::size_t p = 0; p < g.size(); ++p) {
        const Vec<N> x = g.point(p);
        if (!w.box.contains_open(times[k], x)) {
          for (int c = 0; c < N; ++c) support_exact = support_exact && P.w[k](c, p) == 0.0;
          for (int c = 0; c < sym_size(N); ++c) support_exact = support_exact && P.V[k](c, p) == 0.0;
          continue;
        }
        if ((k * g.size() + p) % point_stride != 0) continue;
        const auto r = complex_step<N>(w, ker, times[k], x);
        worst = std::max(worst, r[0]);
        scale = std::max(scale, r[1]);
      }
    worst_rel = std::max(worst_rel, worst / scale);
  }
}

Outcome wave_criterion() {
  double d2 = 0.0;
  bool support = true;
  wave_sweep<2>(64, 1, d2, support);
  wave_sweep<3>(64, 97, d2, support);
  // cubic profile: the core value of A(psi) is 6 [[0, a-b], [a-b, a(x)a - b(x)b]]
  std::mt19937_64 gen(42);
  double d4 = 0.0;
  for (int i = 0; i < 10; ++i) {
    const Vec<3> a = on_sphere<3>(gen, 0.9), b = on_sphere<3>(gen, 0.9);
    const auto w = make_wave<3>(a, b, 1.0, 5, wave_box<3>(), 1.0, 0.0, Profile::Cubic);
    const auto v = evaluate_pair<3, double>(w, wave_kernel<3>(w), 0.52, {0.48, 0.5, 0.53});
    const Vec<3> ab = a - b;
    const Mat<3> T = a * a.transpose() - b * b.transpose();
    for (int j = 0; j < 3; ++j) d4 = std::max(d4, std::abs(v[j] - 6.0 * ab[j]));
    for (int p = 0; p < 3; ++p)
      for (int q = p; q < 3; ++q) d4 = std::max(d4, std::abs(v[3 + sym_index<3>(p, q)] - 6.0 * T(p, q)));
  }
  return {d2 < 1e-8 && d4 < 1e-10 && support, "(d2) " + num(d2) + ", (d4) " + num(d4) + ", support exact " +
                                                 (support ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 3. oscillatory lemma, unit level

template <int N>
void unit_sweep(int res, double c_cal, double& min_margin, double& min_ratio_over, double& worst_slope) {
  const TorusGrid<N> g(res);
  const auto times = uniform_times(1.0, res);
  const auto coarse = uniform_times(1.0, 32);
  std::array<std::function<double(double)>, N> fns;
  fns[0] = [](double x) { return std::cos(kTwoPi * x) + 0.5; };
  fns[1] = [](double x) { return std::sin(kTwoPi * x) + x; };
  if constexpr (N == 3) fns[2] = [](double x) { return x * x; };
  for (int i = 0; i < 10; ++i) {
    std::mt19937_64 gen(500 + 17 * i + N);
    const auto p = sample_interior<N>(gen, 1.0, 0.05);
    const auto r = increment_unit<N>(p.e, p.w, p.H, 128, 60 + i, g, times);
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t kt = 0; kt < times.size(); ++kt)
      for (std::size_t q = 0; q < g.size(); ++q)
        m = std::min(m, p.e - s_value<N>(p.w + r.fields.w[kt].vec(q), p.H + r.fields.V[kt].mat(q)));
    min_margin = std::min(min_margin, r.cell.applied ? m : -1.0);
    min_ratio_over = std::min(min_ratio_over, r.ratio / (0.7 * c_cal));
    std::vector<double> ns, ys;
    Vec<N> dir = Vec<N>::Zero();
    dir[i % N] = 1.0;
    for (int n : {8, 16, 32, 64, 128}) {
      const auto pl = plan_cell<N>({p.e, 1.0, p.w, p.H}, unit_box<N>(), n, 60 + i);
      ns.push_back(n);
      ys.push_back(weak_pairing_sup<N>(pl.wave, coarse, dir, fns));
    }
    worst_slope = std::max(worst_slope, loglog_slope(ns, ys));
  }
}

Outcome unit_criterion() {
  const auto cal = shipped();
  double margin = std::numeric_limits<double>::infinity(), ratio = margin, slope = -1e300;
  unit_sweep<2>(32, cal.c_energy(2), margin, ratio, slope);
  unit_sweep<3>(16, cal.c_energy(3), margin, ratio, slope);
  const bool ok = cal.c_energy(2) > 0.0 && cal.c_energy(3) > 0.0 && margin > 0.0 && ratio >= 1.0 && slope <= -0.8;
  return {ok, "min grid margin " + num(margin) + ", min ratio/(0.7 c_cal) " + num(ratio) + ", worst slope " + num(slope)};
}

// ---------------------------------------------------------------------------
// 4. oscillatory lemma, continuous level

Outcome continuous_criterion() {
  const TorusGrid<2> g(32);
  const auto times = uniform_times(1.0, 32);
  const double c_cal = shipped().c_energy(2);
  double margin = std::numeric_limits<double>::infinity(), ratio = margin, slowest = 0.0;
  std::string err;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cf = random_coefficient_field<2>(g, times, 10 + s, 0.2);
    try {
      const auto ci = increment_continuous<2>(cf, 128, s);
      double m = std::numeric_limits<double>::infinity();
      for (std::size_t kt = 0; kt < times.size(); ++kt)
        for (std::size_t p = 0; p < g.size(); ++p) {
          const auto c = cf.at(kt, p);
          m = std::min(m, c.e - s_value<2>((c.w + ci.piecewise.fields.w[kt].vec(p)) / std::sqrt(c.r),
                                           c.H + ci.piecewise.fields.V[kt].mat(p)));
        }
      margin = std::min({margin, m, ci.delta_n});
      ratio = std::min(ratio, ci.oscil_ratio / (0.7 * c_cal));
    } catch (const std::exception& e) {
      margin = -1.0;
      err = std::string(", field ") + std::to_string(s) + ": " + e.what();
    }
    slowest = std::max(slowest, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  const bool ok = margin > 0.0 && ratio >= 1.0 && slowest < 300.0;
  return {ok, "min delta_n " + num(margin) + ", min ratio/(0.7 c_cal) " + num(ratio) + ", slowest field " +
                  num(slowest) + " s" + err};
}

// ---------------------------------------------------------------------------
// 5. elliptic and projection kernels, continuity mass

template <int N>
double manufactured_recovery(int res) {
  const TorusGrid<N> g(res);
  const auto Mstar = corrector_from_m(testing::random_band_limited_vector(g, 17));
  const auto sol = solve_elliptic_m(divergence(Mstar));
  return (sol.Mt - Mstar).max_abs() / Mstar.max_abs();
}

template <int N>
double idempotence(int res) {
  const TorusGrid<N> g(res);
  const auto u = testing::random_band_limited_vector(g, 23);
  const auto once = helmholtz_project(u).solenoidal;
  const auto twice = helmholtz_project(once).solenoidal;
  return (twice - once).max_abs() / std::max(1.0, once.max_abs());
}

template <int N>
double mass_over_time(const SpaceTimeField<N, 1>& rho) {
  auto total = [](const ScalarField<N>& f) {
    double s = 0.0;
    for (std::size_t p = 0; p < f.size(); ++p) s += f(0, p);
    return s / static_cast<double>(f.size());
  };
  const double m0 = total(rho[0]);
  double worst = 0.0;
  for (const auto& s : rho.slices) worst = std::max(worst, std::abs(total(s) - m0) / m0);
  return worst;
}

Outcome kernel_criterion() {
  const double rec = std::max(manufactured_recovery<2>(32), manufactured_recovery<3>(16));
  const double idem = std::max(idempotence<2>(32), idempotence<3>(16));
  const TorusGrid<2> g(32);
  const auto in = initial_preset<2>("smooth", g);
  const auto split = split_initial<2>(in.mom0);
  const auto G = noise_preset<2>("shear", g);
  double mass = 0.0;
  for (std::uint64_t seed = 1; seed <= 2; ++seed) {
    const auto path = stop_path(sample_wiener(seed, 1.0, 1.0 / 1024), 0.25, 4.0);
    mass = std::max(mass, mass_over_time(solve_continuity_additive<2>(in.rho0, split.Psi0, G, path, 16).rho));
    mass = std::max(mass, mass_over_time(solve_continuity_multiplicative<2>(in.rho0, split.Psi0, path, 16).rho));
  }
  return {rec < 1e-8 && idem < 1e-12 && mass < 1e-8,
          "recovery " + num(rec) + ", idempotence " + num(idem) + ", mass drift " + num(mass)};
}

// ---------------------------------------------------------------------------
// 6. Ito reconstruction

Outcome ito_criterion() {
  const TorusGrid<2> g(16);
  const auto mf = manufactured_flow<2>(g);
  const auto G = noise_preset<2>("shear", g);
  const auto phi = sample_vector<2>(g, [](const Vec<2>& x) {
    return Vec<2>(std::cos(kTwoPi * x[0]), std::sin(kTwoPi * x[1]));
  });
  double lo = 1e300, hi = 0.0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto fine = sample_wiener(seed, 1.0, 1.0 / 1024);
    std::vector<double> gaps;
    for (std::size_t stride : {4, 2, 1}) {
      const auto p = fine.coarsen(stride);
      gaps.push_back(std::abs(ito_reconstruction_check<2>(mf, G, phi, p.values, p.dt).gap));
    }
    for (int k = 0; k < 2; ++k) {
      lo = std::min(lo, gaps[k + 1] / gaps[k]);
      hi = std::max(hi, gaps[k + 1] / gaps[k]);
    }
  }
  return {lo >= 0.35 && hi <= 0.65, "gap ratios in [" + num(lo) + ", " + num(hi) + "]"};
}

// ---------------------------------------------------------------------------
// 7. scheme progress

Outcome progress_criterion() {
  cli::RunConfig c;  // defaults: additive, res 32, six steps of n = 64
  c.path_seeds = {7};
  const auto fs = cli::make_frames<2>(c, nullptr);
  const auto& fr = fs.frames[0];
  const auto run = run_scheme<2>(fr, initial_subsolution(fr, c.scheme), c.schedule, c.tol, c.scheme);
  bool increasing = true, gains = true, x0 = true;
  double prev = run.I0;
  int accepted = 0;
  for (const auto& r : run.trace) {
    if (!r.accepted) continue;
    ++accepted;
    increasing = increasing && r.I_after > prev;
    gains = gains && r.gain >= 0.0;
    prev = r.I_after;
  }
  for (const auto& x : run.checks) x0 = x0 && x.ok;
  const double reduction = 1.0 - std::abs(prev) / std::abs(run.I0);
  const bool ok = accepted > 0 && increasing && gains && x0 && reduction >= 0.5;
  return {ok, "I " + num(run.I0) + " -> " + num(prev) + " in " + std::to_string(accepted) + " steps, reduction " +
                  num(100.0 * reduction) + "% (need 50%), increasing " + (increasing ? "yes" : "no") + ", X0 " +
                  (x0 ? "all" : "violated")};
}

// ---------------------------------------------------------------------------
// 8. non-uniqueness

Outcome nonuniqueness_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  cli::RunConfig c;
  c.path_seeds = {7};
  const auto fs = cli::make_frames<2>(c, nullptr);
  const auto rep = nonuniqueness_demo<2>(fs.frames[0], fs.in, fs.paths.stopped[0], {11, 22}, c.schedule, c.tol, c.scheme);
  double cont = 0.0, mom = 0.0;
  bool x0 = true;
  for (std::size_t i = 0; i < rep.runs.size(); ++i) {
    cont = std::max(cont, rep.physical[i].continuity);
    mom = std::max(mom, rep.physical[i].momentum);
    for (const auto& x : rep.runs[i].checks) x0 = x0 && x.ok;
  }
  const double dist = rep.distance[0][1];
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool ok = x0 && cont <= 1e-3 && mom <= 1e-3 && dist >= 0.1 && secs < 1800.0;
  return {ok, "distance " + num(dist) + ", continuity residual " + num(cont) + ", momentum residual " + num(mom) +
                  " (tol 1e-3), X0 " + (x0 ? "all" : "violated") + ", " + num(secs) + " s"};
}

// ---------------------------------------------------------------------------
// 9. determinism

std::map<std::string, std::string> tree_hashes(const std::filesystem::path& root) {
  std::map<std::string, std::string> h;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file())
      h[std::filesystem::relative(e.path(), root).string()] = cli::git_blob_sha1(cli::read_file(e.path()));
  return h;
}

Outcome determinism_criterion() {
  cli::RunConfig c;
  c.res = 16;
  c.path_seeds = {1, 2};
  c.stride = 64;
  c.schedule = {{64, 1}, {64, 2}};
  c.run_seeds = {11, 22};
  c.cal_samples = 100;
  c.cal_include_n3 = false;
  c.kappa_seeds = {101};
  c.kappa_steps = 1;
  const auto base = std::filesystem::temp_directory_path() / ("convint_acceptance_" + std::to_string(::getpid()));
  std::vector<std::map<std::string, std::string>> runs;
  double cal_diff = 0.0;
  cli::json first_cal;
  for (int k = 0; k < 2; ++k) {
    const auto dir = base / std::to_string(k);
    std::filesystem::remove_all(dir);
    cli::OutputDir out(dir);
    const auto cfg = cli::to_json(c);
    auto r1 = cli::simulate_paths(c, out);
    auto r2 = cli::build_frame<2>(c, out);
    auto r3 = cli::run_scheme_cmd<2>(c, out);
    auto r4 = cli::calibrate(c, out);
    out.write_json("simulate-paths.json", r1.to_json());
    out.write_json("build-frame.json", r2.to_json());
    out.write_json("run-scheme.json", r3.to_json());
    out.write_json("calibrate.json", r4.to_json());
    out.finish("acceptance", cfg);
    runs.push_back(tree_hashes(dir));
    const auto& cal = r4.data["calibration"];
    if (k == 0)
      first_cal = cal;
    else
      for (const char* key : {"kappa", "chi0"})
        cal_diff = std::max(cal_diff, std::abs(cal[key].get<double>() - first_cal[key].get<double>()));
    if (k == 1) {
      cal_diff = std::max(cal_diff, std::abs(cal["c_seg"]["2"].get<double>() - first_cal["c_seg"]["2"].get<double>()));
      cal_diff =
          std::max(cal_diff, std::abs(cal["c_energy"]["2"].get<double>() - first_cal["c_energy"]["2"].get<double>()));
    }
  }
  std::size_t differing = 0;
  for (const auto& [k, v] : runs[0])
    if (!runs[1].count(k) || runs[1].at(k) != v) ++differing;
  differing += runs[1].size() > runs[0].size() ? runs[1].size() - runs[0].size() : 0;
  std::filesystem::remove_all(base);
  return {differing == 0 && cal_diff <= 1e-12 && !runs[0].empty(),
          std::to_string(runs[0].size()) + " files, " + std::to_string(differing) + " differ, calibration drift " +
              num(cal_diff)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "stopping time", stopping_time_criterion},   {2, "wave identities", wave_criterion},
      {3, "oscillatory unit level", unit_criterion},    {4, "oscillatory continuous level", continuous_criterion},
      {5, "elliptic and projection kernels", kernel_criterion}, {6, "Ito reconstruction", ito_criterion},
      {7, "scheme progress", progress_criterion},       {8, "non-uniqueness", nonuniqueness_criterion},
      {9, "determinism", determinism_criterion}};
  std::vector<int> pick;
  for (int i = 1; i < argc; ++i) pick.push_back(std::atoi(argv[i]));
  bool ok = true;
  for (const auto& c : all) {
    if (!pick.empty() && std::find(pick.begin(), pick.end(), c.id) == pick.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.id == 1 && secs >= 10.0) o.pass = false;
    std::printf("criterion %d %s: %s  [%s; %.1f s]\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
    ok = ok && o.pass;
  }
  return ok ? 0 : 1;
}
