#pragma once

// Subsolutions of the abstract Euler system, the functional I, the augmentation
// loop and the non-uniqueness run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "convint/oscillatory.hpp"
#include "convint/transform.hpp"

namespace convint {

struct SchemeConfig {
  double delta0 = 0.5;          // initial margin
  double e_slack = 0.1;         // added to e on top of delta0
  int m = 8;                    // partition used by the common-segment route
  double keep = 0.5;            // committed cells keep this fraction of the state margin
  std::size_t anchor_stride = 8;
  bool try_refinement = true;   // attempt the delta_ap < delta/4 route first
  int min_cell_points = 2;
  int max_escalations = 2;      // n doublings after a rejected step
  int stall_steps = 3;
  double stall_gain = 1e-6;     // relative gain floor |dI| / |I|
  double residual_tol = 1e-8;   // pointwise packet identity, relative to L k
  OscOptions osc;
};

template <int N>
struct SubsolutionState {
  SpaceTimeField<N, N> v;
  SpaceTimeField<N, sym_size(N)> F;
  double e = 0.0;
  double delta = 0.0;               // measured min of e - s over the grid
  std::vector<WaveSpec<N>> packets;  // every applied packet, in order
};

struct StepRecord {
  int step = 0;
  int n = 0;
  std::uint64_t seed = 0;
  std::string route;                // "refinement" or "common"
  int m = 0;
  double delta_ap = 0.0;
  double I_before = 0.0, I_after = 0.0, gain = 0.0;
  double margin = 0.0;
  std::size_t cells = 0, applied = 0, dropped = 0;
  int escalations = 0;
  bool accepted = false;
  std::uint64_t audit_hash = 0;
  double lookahead = 0.0;           // how far past its start a cell's decision reads, 0 if adapted
};

// ---------------------------------------------------------------------------
// pointwise quantities

template <int N>
Mat<N> frame_corrector_at(const AbstractEulerFrame<N>& fr, const std::vector<TensorField<N>>& Mv, std::size_t kt,
                          std::size_t p) {
  (void)fr;
  return Mv[kt].mat(p);
}

/// Corrector slices seen by v: the stored ones, or the v-dependent recompute in the multiplicative frame.
template <int N>
std::vector<TensorField<N>> corrector_slices(const AbstractEulerFrame<N>& fr, const SpaceTimeField<N, N>& v) {
  std::vector<TensorField<N>> out;
  for (std::size_t kt = 0; kt < fr.times.size(); ++kt) out.push_back(fr.corrector(kt, &v[kt]));
  return out;
}

template <int N>
CellPoint<N> state_point(const SubsolutionState<N>& s, const AbstractEulerFrame<N>& fr,
                         const std::vector<TensorField<N>>& Mv, std::size_t kt, std::size_t p) {
  return {s.e, fr.r[kt](0, p), s.v[kt].vec(p) + fr.h[kt].vec(p), s.F[kt].mat(p) - Mv[kt].mat(p)};
}

template <int N>
double state_margin(const SubsolutionState<N>& s, const AbstractEulerFrame<N>& fr,
                    const std::vector<TensorField<N>>& Mv) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t kt = 0; kt < fr.times.size(); ++kt)
    for (std::size_t p = 0; p < fr.grid().size(); ++p) {
      const auto c = state_point(s, fr, Mv, kt, p);
      m = std::min(m, c.e - s_value<N>(c.w / std::sqrt(c.r), c.H));
    }
  return m;
}

// ---------------------------------------------------------------------------
// initial subsolution and I

/// Smallest admissible constant level for v = v0, F = 0 over a set of frames.
template <int N>
double energy_level(const std::vector<const AbstractEulerFrame<N>*>& frames, const SchemeConfig& cfg) {
  double smax = 0.0;
  for (const auto* fr : frames)
    for (std::size_t kt = 0; kt < fr->times.size(); ++kt) {
      const auto M = fr->corrector(kt, &fr->v0);
      for (std::size_t p = 0; p < fr->grid().size(); ++p) {
        const Vec<N> w = (fr->v0.vec(p) + fr->h[kt].vec(p)) / std::sqrt(fr->r[kt](0, p));
        smax = std::max(smax, s_value<N>(w, -M.mat(p)));
      }
    }
  return smax + cfg.delta0 + cfg.e_slack;
}

template <int N>
SubsolutionState<N> initial_subsolution(const AbstractEulerFrame<N>& fr, double e) {
  SubsolutionState<N> s;
  s.v = SpaceTimeField<N, N>(fr.grid(), fr.times);
  for (auto& sl : s.v.slices) sl = fr.v0;
  s.F = SpaceTimeField<N, sym_size(N)>(fr.grid(), fr.times);
  for (auto& sl : s.F.slices) sl.traceless = true;
  s.e = e;
  s.delta = state_margin(s, fr, corrector_slices(fr, s.v));
  return s;
}

template <int N>
SubsolutionState<N> initial_subsolution(const AbstractEulerFrame<N>& fr, const SchemeConfig& cfg = {}) {
  return initial_subsolution(fr, energy_level<N>({&fr}, cfg));
}

struct FunctionalValue {
  double I = 0.0;
  std::vector<double> per_path;
};

/// int_0^T int (|v + h|^2 / (2r) - e) dx dt: grid mean in space, trapezoid in time.
template <int N>
double functional_I(const SubsolutionState<N>& s, const AbstractEulerFrame<N>& fr) {
  std::vector<double> per(fr.times.size());
  const auto& g = fr.grid();
  for (std::size_t kt = 0; kt < fr.times.size(); ++kt) {
    double acc = 0.0;
    for (std::size_t p = 0; p < g.size(); ++p)
      acc += 0.5 * (s.v[kt].vec(p) + fr.h[kt].vec(p)).squaredNorm() / fr.r[kt](0, p) - s.e;
    per[kt] = acc / static_cast<double>(g.size());
  }
  return trapezoid(fr.times, per);
}

template <int N>
FunctionalValue functional_I(const std::vector<const SubsolutionState<N>*>& states,
                             const std::vector<const AbstractEulerFrame<N>*>& frames) {
  FunctionalValue out;
  for (std::size_t i = 0; i < states.size(); ++i) out.per_path.push_back(functional_I(*states[i], *frames[i]));
  for (double v : out.per_path) out.I += v / static_cast<double>(out.per_path.size());
  return out;
}

/// Weak residual of d_t v + div F = 0 on the grid, against phi e_i: max_t |<v(t) - v(0), phi> - int <F, grad phi>|.
template <int N>
double grid_equation_residual(const SubsolutionState<N>& s, int count = 25) {
  const auto& g = s.v.grid();
  const auto tf = test_family<N>(g, count);
  const std::size_t nt = s.v.nt();
  double worst = 0.0;
  for (const auto& f : tf)
    for (int i = 0; i < N; ++i) {
      std::vector<double> vp(nt), fl(nt);
      for (std::size_t kt = 0; kt < nt; ++kt) {
        double a = 0.0, c = 0.0;
        for (std::size_t p = 0; p < g.size(); ++p) {
          a += s.v[kt](i, p) * f.phi(0, p);
          c += s.F[kt].mat(p).row(i).dot(f.grad.vec(p));
        }
        vp[kt] = a / static_cast<double>(g.size());
        fl[kt] = c / static_cast<double>(g.size());
      }
      double acc = 0.0;
      for (std::size_t kt = 1; kt < nt; ++kt) {
        acc += 0.5 * (fl[kt] + fl[kt - 1]) * (s.v.times[kt] - s.v.times[kt - 1]);
        worst = std::max(worst, std::abs(vp[kt] - vp[0] - acc));
      }
    }
  return worst;
}

// ---------------------------------------------------------------------------
// X0 checklist

struct X0Report {
  double initial = 0.0;       // max |v(0) - v0|
  double div_v0 = 0.0;        // spectral divergence of the smooth part
  double packet_residual = 0.0;  // max pointwise |d_t w + div V|, |div w| over packets, relative to L k
  double weak_bound = 0.0;    // sum over packets of box volume * sampled residual (absolute)
  double grid_residual = 0.0; // grid weak residual of d_t v + div F (diagnostic, aliased for unresolved packets)
  double margin = 0.0;        // min e - s
  double energy_excess = 0.0; // max |v + h|^2/(2r) - e, must be < 0
  double H_excess = 0.0;      // max |F - M|_op - (N - 1) 2e/N, must be <= 0
  double I = 0.0;
  bool ok = false;
};

/// Sample points of a packet: box centre and the 2^(N+1) points at fractions 0.3 / 0.7.
template <int N>
std::vector<std::pair<double, std::array<double, N>>> packet_samples(const WaveSpec<N>& w) {
  std::vector<std::pair<double, std::array<double, N>>> pts;
  auto at = [&](const std::array<double, N + 1>& f) {
    std::array<double, N> x;
    for (int d = 0; d < N; ++d) x[d] = w.box.lo[d] + f[d + 1] * (w.box.hi[d] - w.box.lo[d]);
    pts.push_back({w.box.t0 + f[0] * (w.box.t1 - w.box.t0), x});
  };
  std::array<double, N + 1> c;
  c.fill(0.5);
  at(c);
  for (int mask = 0; mask < (1 << (N + 1)); ++mask) {
    for (int d = 0; d <= N; ++d) c[d] = (mask >> d) & 1 ? 0.7 : 0.3;
    at(c);
  }
  return pts;
}

template <int N>
X0Report check_X0(const SubsolutionState<N>& s, const AbstractEulerFrame<N>& fr, double residual_tol = 1e-8) {
  X0Report r;
  const auto& g = fr.grid();
  r.initial = (s.v[0] - fr.v0).max_abs();
  r.div_v0 = divergence(fr.v0).max_abs();
  for (const auto& w : s.packets) {
    if (w.degenerate) continue;
    double worst = 0.0;
    for (const auto& [t, x] : packet_samples<N>(w)) {
      const auto res = pointwise_residual<N>(w, t, x);
      worst = std::max({worst, res[0], res[1]});
    }
    r.packet_residual = std::max(r.packet_residual, worst / (w.L * w.k * w.sr));
    r.weak_bound += worst * box_volume<N>(w.box);
  }
  const auto Mv = corrector_slices(fr, s.v);
  r.margin = std::numeric_limits<double>::infinity();
  r.energy_excess = -std::numeric_limits<double>::infinity();
  r.H_excess = -std::numeric_limits<double>::infinity();
  const double Hcap = (N - 1) * 2.0 * s.e / N;
  for (std::size_t kt = 0; kt < fr.times.size(); ++kt)
    for (std::size_t p = 0; p < g.size(); ++p) {
      const auto c = state_point(s, fr, Mv, kt, p);
      r.margin = std::min(r.margin, c.e - s_value<N>(c.w / std::sqrt(c.r), c.H));
      r.energy_excess = std::max(r.energy_excess, 0.5 * c.w.squaredNorm() / c.r - s.e);
      const Eigen::SelfAdjointEigenSolver<Mat<N>> es(c.H, Eigen::EigenvaluesOnly);
      r.H_excess = std::max(r.H_excess, es.eigenvalues().cwiseAbs().maxCoeff() - Hcap);
    }
  r.I = functional_I(s, fr);
  r.grid_residual = grid_equation_residual(s);
  r.ok = r.initial <= 1e-14 && r.div_v0 <= 1e-10 && r.packet_residual <= residual_tol && r.margin > 0.0 &&
         r.energy_excess < 0.0 && r.H_excess <= 1e-12 * s.e && r.I <= 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// augmentation

template <int N>
CoefficientField<N> coefficient_field(const SubsolutionState<N>& s, const AbstractEulerFrame<N>& fr,
                                      const std::vector<TensorField<N>>& Mv) {
  CoefficientField<N> cf;
  const auto& g = fr.grid();
  cf.e = SpaceTimeField<N, 1>(g, fr.times, s.e);
  cf.r = fr.r;
  cf.w = SpaceTimeField<N, N>(g, fr.times);
  cf.H = SpaceTimeField<N, sym_size(N)>(g, fr.times);
  for (std::size_t kt = 0; kt < fr.times.size(); ++kt) {
    cf.w[kt] = s.v[kt];
    cf.w[kt] += fr.h[kt];
    cf.H[kt] = s.F[kt];
    cf.H[kt] -= Mv[kt];
    cf.H[kt].traceless = true;
  }
  cf.bounds = {fr.bounds.r_min, fr.bounds.r_max, s.e, s.e};
  cf.delta = s.delta * (1.0 - 1e-9);
  return cf;
}

template <int N>
struct Increment {
  WavePair<N> fields;
  std::vector<WaveSpec<N>> packets;
  std::vector<CellAudit> audit;
  std::string route;
  int m = 0;
  double delta_ap = 0.0;
  std::size_t cells = 0, applied = 0, dropped = 0;
  double lookahead = 0.0;
};

/// Common-segment route: per cell one segment admissible for every grid state in the
/// cell, packet density from the cell centre at its start, and inclusion verified at
/// every grid point of the cell against the current state.
template <int N>
Increment<N> increment_common(const CoefficientField<N>& cf, int m, int n, std::uint64_t seed,
                              const SchemeConfig& cfg) {
  const auto& g = cf.grid();
  const auto& times = cf.times();
  Increment<N> out;
  out.route = "common";
  out.m = m;
  out.fields.w = SpaceTimeField<N, N>(g, times);
  out.fields.V = SpaceTimeField<N, sym_size(N)>(g, times);
  for (auto& sl : out.fields.V.slices) sl.traceless = true;
  PiecewiseCoefficients<N> pc;
  pc.m = m;
  pc.T = cf.T();
  const std::size_t cells = pc.spatial_cells() * static_cast<std::size_t>(m);
  OscOptions opt = cfg.osc;
  opt.min_margin = cfg.keep * cf.delta;
  for (std::size_t k = 0; k < cells; ++k) {
    const auto box = pc.box(k);
    std::vector<GeomPoint<N>> pts;
    std::size_t first_kt = times.size();
    for_each_box_point<N>(g, times, box, [&](std::size_t kt, std::size_t p) {
      pts.push_back(cf.at(kt, p).scaled());
      first_kt = std::min(first_kt, kt);
    });
    if (pts.empty()) continue;
    const std::uint64_t cs = cell_seed(seed, k);
    const auto sel = select_segment_common<N>(pts, cf.e[0](0, 0), cs, opt.sel, cfg.anchor_stride);
    // density of the packet: cell centre at the first slice inside the cell
    Vec<N> c = 0.5 * (box.lo + box.hi);
    std::array<int, N> ix;
    for (int d = 0; d < N; ++d) ix[d] = std::clamp(static_cast<int>(std::lround(c[d] * g.res)), 0, g.res - 1);
    const double rc = cf.r[first_kt](0, g.flat(ix));
    auto inc = plan_cell_from<N>(sel, rc, box, n, cs);
    commit_cell<N>(inc, out.fields.w, out.fields.V, [&](std::size_t kt, std::size_t p) { return cf.at(kt, p); }, opt);
    ++out.cells;
    if (inc.applied) {
      ++out.applied;
      out.packets.push_back(inc.wave);
    }
    if (inc.below_n0) ++out.dropped;
    out.audit.push_back({k, box.t0, box.t1, hash_cell<N>(cf.at(first_kt, g.flat(ix))), inc.applied, inc.below_n0});
    out.lookahead = std::max(out.lookahead, box.t1 - box.t0);
  }
  return out;
}

template <int N>
Increment<N> increment_refinement(const CoefficientField<N>& cf, int n, std::uint64_t seed, const SchemeConfig& cfg) {
  OscOptions opt = cfg.osc;
  opt.min_margin = cfg.keep * cf.delta;
  auto ci = increment_continuous<N>(cf, n, seed, opt, cfg.min_cell_points);
  Increment<N> out;
  out.route = "refinement";
  out.m = ci.m;
  out.delta_ap = ci.delta_ap;
  out.fields = std::move(ci.piecewise.fields);
  out.audit = ci.piecewise.audit;
  out.cells = ci.piecewise.cells.size();
  for (const auto& c : ci.piecewise.cells) {
    if (c.applied) {
      ++out.applied;
      out.packets.push_back(c.wave);
    }
    if (c.below_n0) ++out.dropped;
  }
  return out;
}

inline std::uint64_t audit_hash(const std::vector<CellAudit>& audit) {
  std::vector<double> v;
  for (const auto& a : audit) {
    v.push_back(static_cast<double>(a.cell));
    v.push_back(a.sample_time);
    v.push_back(static_cast<double>(a.input_hash % (1ULL << 52)));
    v.push_back(a.applied ? 1.0 : 0.0);
  }
  return hash_doubles(v);
}

template <int N>
struct AugmentResult {
  SubsolutionState<N> state;
  StepRecord record;
};

/// One augmentation step at frequency n.  The step is accepted when the new state keeps a
/// positive margin (recomputing the corrector in the multiplicative frame) and I does not decrease.
template <int N>
AugmentResult<N> augment(const SubsolutionState<N>& s, const AbstractEulerFrame<N>& fr, int n, std::uint64_t seed,
                         const SchemeConfig& cfg = {}) {
  if (!(s.delta > 0.0)) throw PreconditionError("state margin must be positive");
  AugmentResult<N> res{s, {}};
  auto& rec = res.record;
  rec.seed = seed;
  rec.I_before = functional_I(s, fr);
  const auto Mv = corrector_slices(fr, s.v);
  const auto cf = coefficient_field(s, fr, Mv);
  for (int esc = 0; esc <= cfg.max_escalations; ++esc) {
    const int nn = n << esc;
    rec.n = nn;
    rec.escalations = esc;
    std::vector<Increment<N>> tries;
    bool refined = false;
    if (cfg.try_refinement) {
      try {
        tries.push_back(increment_refinement<N>(cf, nn, seed, cfg));
        refined = true;
      } catch (const RefinementError&) {
      }
    }
    if (!refined) tries.push_back(increment_common<N>(cf, cfg.m, nn, seed, cfg));
    for (auto& inc : tries) {
      SubsolutionState<N> next = s;
      for (std::size_t kt = 0; kt < fr.times.size(); ++kt) {
        next.v[kt] += inc.fields.w[kt];
        next.F[kt] += inc.fields.V[kt];
        next.F[kt].traceless = true;
      }
      next.packets.insert(next.packets.end(), inc.packets.begin(), inc.packets.end());
      next.delta = state_margin(next, fr, corrector_slices(fr, next.v));
      const double I1 = functional_I(next, fr);
      rec.route = inc.route;
      rec.m = inc.m;
      rec.delta_ap = inc.delta_ap;
      rec.cells = inc.cells;
      rec.applied = inc.applied;
      rec.dropped = inc.dropped;
      rec.lookahead = inc.route == "common" ? inc.lookahead : 0.0;
      rec.audit_hash = audit_hash(inc.audit);
      rec.I_after = I1;
      rec.gain = I1 - rec.I_before;
      rec.margin = next.delta;
      if (next.delta > 0.0 && rec.gain >= 0.0) {
        rec.accepted = true;
        res.state = std::move(next);
        return res;
      }
    }
  }
  rec.accepted = false;
  rec.I_after = rec.I_before;
  rec.gain = 0.0;
  rec.margin = s.delta;
  return res;
}

// ---------------------------------------------------------------------------
// scheme

struct ScheduleEntry {
  int n = 64;
  std::uint64_t seed = 0;
};

template <int N>
struct SchemeRun {
  SubsolutionState<N> state;
  std::vector<StepRecord> trace;
  std::vector<X0Report> checks;  // initial state first, then one per accepted step
  double I0 = 0.0;
  bool converged = false;  // |I| < tol
  bool stalled = false;
  std::string note;
};

template <int N>
SchemeRun<N> run_scheme(const AbstractEulerFrame<N>& fr, SubsolutionState<N> s0, const std::vector<ScheduleEntry>& schedule,
                        double tol, const SchemeConfig& cfg = {}) {
  if (schedule.empty()) throw std::invalid_argument("empty schedule");
  for (std::size_t i = 1; i < schedule.size(); ++i)
    if (schedule[i].n < schedule[i - 1].n) throw std::invalid_argument("schedule frequencies must not decrease");
  SchemeRun<N> run;
  run.state = std::move(s0);
  run.I0 = functional_I(run.state, fr);
  run.checks.push_back(check_X0(run.state, fr, cfg.residual_tol));
  int slow = 0;
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    const double I = functional_I(run.state, fr);
    if (std::abs(I) < tol) {
      run.converged = true;
      break;
    }
    auto step = augment<N>(run.state, fr, schedule[k].n, schedule[k].seed, cfg);
    step.record.step = static_cast<int>(k) + 1;
    if (step.record.accepted) {
      run.state = std::move(step.state);
      run.checks.push_back(check_X0(run.state, fr, cfg.residual_tol));
    }
    const double rel = std::abs(step.record.gain) / std::max(std::abs(I), 1e-300);
    run.trace.push_back(step.record);
    slow = rel < cfg.stall_gain ? slow + 1 : 0;
    if (slow >= cfg.stall_steps) {
      run.stalled = true;
      run.note = "gain below " + std::to_string(cfg.stall_gain) + " of |I| for " + std::to_string(slow) +
                 " consecutive steps; last route " + step.record.route + ", cells applied " +
                 std::to_string(step.record.applied) + "/" + std::to_string(step.record.cells);
      break;
    }
  }
  if (!run.converged && std::abs(functional_I(run.state, fr)) < tol) run.converged = true;
  return run;
}

/// Least-squares kappa in gain_k = kappa I_k^2 over accepted steps.
inline double fit_kappa(const std::vector<StepRecord>& trace) {
  double num = 0.0, den = 0.0;
  for (const auto& r : trace) {
    if (!r.accepted) continue;
    const double q = r.I_before * r.I_before;
    num += r.gain * q;
    den += q * q;
  }
  return den > 0.0 ? num / den : 0.0;
}

/// Largest relative deviation of the one-step prediction I_k + kappa I_k^2 from the measured I_{k+1}.
inline double recursion_model_error(const std::vector<StepRecord>& trace, double kappa) {
  double worst = 0.0;
  for (const auto& r : trace) {
    if (!r.accepted) continue;
    const double pred = r.I_before + kappa * r.I_before * r.I_before;
    worst = std::max(worst, std::abs(pred - r.I_after) / std::max(std::abs(r.I_after), 1e-300));
  }
  return worst;
}

/// Same comparison on the gains: max |kappa I_k^2 - gain_k| / gain_k over accepted steps with gain > 0.
inline double recursion_gain_error(const std::vector<StepRecord>& trace, double kappa) {
  double worst = 0.0;
  for (const auto& r : trace) {
    if (!r.accepted || !(r.gain > 0.0)) continue;
    worst = std::max(worst, std::abs(kappa * r.I_before * r.I_before - r.gain) / r.gain);
  }
  return worst;
}

struct KappaCalibration {
  double kappa = 0.0;      // safety * min ratio
  double min_ratio = 0.0;  // min over accepted steps of gain / I^2
  double max_ratio = 0.0;
  double fitted = 0.0;     // least-squares kappa over all steps
  std::size_t steps = 0;
};

/// kappa from scheme runs on a set of frames: safety times the smallest observed gain / I^2.
template <int N>
KappaCalibration calibrate_kappa(const std::vector<const AbstractEulerFrame<N>*>& frames,
                                 const std::vector<ScheduleEntry>& schedule, const SchemeConfig& cfg, double safety) {
  KappaCalibration out;
  out.min_ratio = std::numeric_limits<double>::infinity();
  std::vector<StepRecord> all;
  const double e = energy_level<N>(frames, cfg);
  for (const auto* fr : frames) {
    const auto run = run_scheme<N>(*fr, initial_subsolution(*fr, e), schedule, 0.0, cfg);
    for (const auto& r : run.trace) {
      if (!r.accepted) continue;
      const double q = r.gain / (r.I_before * r.I_before);
      out.min_ratio = std::min(out.min_ratio, q);
      out.max_ratio = std::max(out.max_ratio, q);
      all.push_back(r);
    }
  }
  out.steps = all.size();
  if (all.empty()) out.min_ratio = 0.0;
  out.kappa = safety * out.min_ratio;
  out.fitted = fit_kappa(all);
  return out;
}

// ---------------------------------------------------------------------------
// weak metric

/// Pairings <f(t), cos(2 pi k.x + pi/4) e_i> on the grid, indexed [t][mode * N + i].
template <int N>
std::vector<std::vector<double>> grid_pairings(const SpaceTimeField<N, N>& f, int count) {
  const auto& g = f.grid();
  const auto ks = test_modes<N>(count);
  std::vector<std::vector<double>> out(f.nt(), std::vector<double>(ks.size() * N, 0.0));
  for (std::size_t q = 0; q < ks.size(); ++q) {
    std::vector<double> phi(g.size());
    for (std::size_t p = 0; p < g.size(); ++p) {
      const Vec<N> x = g.point(p);
      double a = 0.25 * std::numbers::pi;
      for (int d = 0; d < N; ++d) a += kTwoPi * ks[q][d] * x[d];
      phi[p] = std::cos(a);
    }
    for (std::size_t kt = 0; kt < f.nt(); ++kt)
      for (int i = 0; i < N; ++i) {
        double s = 0.0;
        for (std::size_t p = 0; p < g.size(); ++p) s += f[kt](i, p) * phi[p];
        out[kt][q * N + i] = s / static_cast<double>(g.size());
      }
  }
  return out;
}

/// The same pairings for a sum of packets, by separable quadrature (exact up to quadrature error);
/// `offset` replaces the pi/4 in the test functions.
template <int N>
std::vector<std::vector<double>> packet_pairings(const std::vector<WaveSpec<N>>& packets, const std::vector<double>& times,
                                                 int count, double offset = 0.25 * std::numbers::pi) {
  const auto ks = test_modes<N>(count);
  std::vector<std::vector<double>> out(times.size(), std::vector<double>(ks.size() * N, 0.0));
  // cos(sum th_d + c) = Re(e^{ic} prod (cos th_d + i sin th_d)) as 2^N separable terms
  for (const auto& w : packets) {
    if (w.degenerate) continue;
    const auto ker = wave_kernel<N>(w);
    for (std::size_t q = 0; q < ks.size(); ++q)
      for (int mask = 0; mask < (1 << N); ++mask) {
        const int ns = std::popcount(static_cast<unsigned>(mask));
        const double coef = std::real(std::exp(cplx(0.0, offset)) * std::pow(cplx(0.0, 1.0), ns));
        if (std::abs(coef) < 1e-15) continue;
        std::array<double, N> kap;
        std::array<bool, N> sine;
        for (int d = 0; d < N; ++d) {
          kap[d] = kTwoPi * ks[q][d];
          sine[d] = (mask >> d) & 1;
        }
        const auto J = trig_pairing_moments<N>(w, kap, sine);
        for (std::size_t kt = 0; kt < times.size(); ++kt) {
          for (int i = 0; i < N; ++i) {
            Vec<N> dir = Vec<N>::Zero();
            dir[i] = 1.0;
            out[kt][q * N + i] += coef * packet_pairing<N>(w, ker, J, times[kt], dir);
          }
        }
      }
  }
  return out;
}

/// sup_t sum_j 2^-(j+1) |p_j(t)| / (1 + |p_j(t)|) for pairings of a difference.
inline double weak_metric_from_pairings(const std::vector<std::vector<double>>& diff) {
  double sup = 0.0;
  for (const auto& row : diff) {
    double d = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) d += std::ldexp(1.0, -static_cast<int>(j) - 1) * std::abs(row[j]) / (1.0 + std::abs(row[j]));
    sup = std::max(sup, d);
  }
  return sup;
}

template <int N>
double weak_metric_D(const SpaceTimeField<N, N>& v1, const SpaceTimeField<N, N>& v2, int count = 25) {
  SpaceTimeField<N, N> d = v1;
  for (std::size_t k = 0; k < d.nt(); ++k) d[k] -= v2[k];
  return weak_metric_from_pairings(grid_pairings(d, count));
}

/// Ensemble mean of the per-path metric.
template <int N>
double weak_metric_D(const std::vector<const SpaceTimeField<N, N>*>& a, const std::vector<const SpaceTimeField<N, N>*>& b,
                     int count = 25) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += weak_metric_D(*a[i], *b[i], count);
  return a.empty() ? 0.0 : s / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// residuals of the original system

/// Smooth part of v: v minus the grid samples of its packets.
template <int N>
SpaceTimeField<N, N> smooth_part(const SubsolutionState<N>& s) {
  SpaceTimeField<N, N> out = s.v;
  const auto& g = s.v.grid();
  for (const auto& w : s.packets) {
    if (w.degenerate) continue;
    const auto ker = wave_kernel<N>(w);
    for_each_box_point<N>(g, s.v.times, w.box, [&](std::size_t kt, std::size_t p) {
      const Vec<N> x = g.point(p);
      std::array<double, N> xa;
      for (int d = 0; d < N; ++d) xa[d] = x[d];
      const auto v = evaluate_pair<N, double>(w, ker, s.v.times[kt], xa);
      for (int i = 0; i < N; ++i) out[kt](i, p) -= v[i];
    });
  }
  return out;
}

/// Weak residuals of the back-transformed state.  The continuity flux pairs the packets with
/// grad phi by quadrature and the rest on the grid; the momentum flux is nonlinear and uses the grid.
template <int N>
WeakResidualReport physical_residuals(const AbstractEulerFrame<N>& fr, const SubsolutionState<N>& s,
                                      const StoppedPath& path, const InitialData<N>& in, int count = 25) {
  const auto st = back_transform(fr, s.v);
  const auto smooth = back_transform(fr, smooth_part(s));
  // <w, grad phi> = sum_i -2 pi k_i <w_i, sin(2 pi k.x + pi/4)>, sin(a + pi/4) = cos(a - pi/4)
  const auto P = packet_pairings<N>(s.packets, fr.times, count, -0.25 * std::numbers::pi);
  const auto ks = test_modes<N>(count);
  std::vector<std::vector<double>> extra(ks.size(), std::vector<double>(fr.times.size(), 0.0));
  for (std::size_t j = 0; j < ks.size(); ++j)
    for (std::size_t kt = 0; kt < fr.times.size(); ++kt) {
      const double f = fr.kind == NoiseKind::Additive ? 1.0 : std::exp(fr.beta[kt]);
      for (int i = 0; i < N; ++i) extra[j][kt] += -kTwoPi * ks[j][i] * P[kt][j * N + i] * f;
    }
  return weak_residuals(fr, st, path, in, count, &smooth.mom, &extra);
}

// ---------------------------------------------------------------------------
// non-uniqueness

template <int N>
double l2_norm(const SpaceTimeField<N, N>& f) {
  std::vector<double> per(f.nt());
  for (std::size_t k = 0; k < f.nt(); ++k) {
    double s = 0.0;
    for (double x : f[k].data) s += x * x;
    per[k] = s / static_cast<double>(f.grid().size());
  }
  return std::sqrt(trapezoid(f.times, per));
}

template <int N>
double relative_distance(const SpaceTimeField<N, N>& a, const SpaceTimeField<N, N>& b) {
  SpaceTimeField<N, N> d = a;
  for (std::size_t k = 0; k < d.nt(); ++k) d[k] -= b[k];
  const double den = std::max(l2_norm(a), l2_norm(b));
  return den > 0.0 ? l2_norm(d) / den : 0.0;
}

template <int N>
struct NonuniquenessReport {
  std::vector<std::uint64_t> seeds;
  std::vector<SchemeRun<N>> runs;
  std::vector<std::vector<double>> distance;  // relative space-time L2
  std::vector<WeakResidualReport> physical;   // back-transformed residuals per run
  std::vector<double> initial_gap;            // max |v(0) - v0| per run
};

/// Schedule seeds are mixed with each run seed; identical run seeds give identical runs.
inline std::vector<ScheduleEntry> seeded_schedule(const std::vector<ScheduleEntry>& base, std::uint64_t seed) {
  std::vector<ScheduleEntry> out = base;
  for (auto& e : out) e.seed = detail::mix64(e.seed ^ detail::mix64(seed));
  return out;
}

template <int N>
NonuniquenessReport<N> nonuniqueness_demo(const AbstractEulerFrame<N>& fr, const InitialData<N>& in,
                                          const StoppedPath& path, const std::vector<std::uint64_t>& seeds,
                                          const std::vector<ScheduleEntry>& schedule, double tol,
                                          const SchemeConfig& cfg = {}) {
  if (seeds.size() < 2) throw std::invalid_argument("need at least two seeds");
  NonuniquenessReport<N> rep;
  rep.seeds = seeds;
  const double e = energy_level<N>({&fr}, cfg);
  for (auto sd : seeds) {
    rep.runs.push_back(run_scheme<N>(fr, initial_subsolution(fr, e), seeded_schedule(schedule, sd), tol, cfg));
    const auto& st = rep.runs.back().state;
    rep.physical.push_back(physical_residuals(fr, st, path, in));
    rep.initial_gap.push_back((st.v[0] - fr.v0).max_abs());
  }
  rep.distance.assign(seeds.size(), std::vector<double>(seeds.size(), 0.0));
  for (std::size_t i = 0; i < seeds.size(); ++i)
    for (std::size_t j = i + 1; j < seeds.size(); ++j)
      rep.distance[i][j] = rep.distance[j][i] = relative_distance(rep.runs[i].state.v, rep.runs[j].state.v);
  return rep;
}

}  // namespace convint
