#pragma once

// Subcommand implementations.  Every command fills a Report (checks plus data), writes its
// artifacts through an OutputDir and leaves a manifest next to them.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "cli_config.hpp"
#include "convint/calibration.hpp"
#include "convint/field_io.hpp"
#include "convint/scheme.hpp"
#include "manifest.hpp"

#ifndef CONVINT_DATA_DIR
#define CONVINT_DATA_DIR "data"
#endif

namespace convint::cli {

struct Check {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  std::string relation;  // "<=", ">=", "==" or "skip"
  bool pass = false;
  std::string note;
};

class Report {
 public:
  explicit Report(std::string command) : command_(std::move(command)) {}

  void le(const std::string& name, double v, double thr, std::string note = {}) {
    checks_.push_back({name, v, thr, "<=", v <= thr, std::move(note)});
  }
  void ge(const std::string& name, double v, double thr, std::string note = {}) {
    checks_.push_back({name, v, thr, ">=", v >= thr, std::move(note)});
  }
  void flag(const std::string& name, bool ok, std::string note = {}) {
    checks_.push_back({name, ok ? 1.0 : 0.0, 1.0, "==", ok, std::move(note)});
  }
  void skip(const std::string& name, std::string note) { checks_.push_back({name, 0.0, 0.0, "skip", true, std::move(note)}); }

  bool ok() const {
    return std::all_of(checks_.begin(), checks_.end(), [](const Check& c) { return c.pass; });
  }
  const std::vector<Check>& checks() const { return checks_; }
  void absorb(const Report& other, const std::string& prefix) {
    for (auto c : other.checks_) {
      c.name = prefix + c.name;
      checks_.push_back(std::move(c));
    }
  }

  json data = json::object();

  json to_json() const {
    json j;
    j["command"] = command_;
    j["ok"] = ok();
    json cs = json::array();
    for (const auto& c : checks_) {
      json e{{"name", c.name}, {"relation", c.relation}, {"pass", c.pass}};
      if (c.relation != "skip") {
        e["value"] = c.value;
        e["threshold"] = c.threshold;
      }
      if (!c.note.empty()) e["note"] = c.note;
      cs.push_back(e);
    }
    j["checks"] = cs;
    j["data"] = data;
    return j;
  }

 private:
  std::string command_;
  std::vector<Check> checks_;
};

inline std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string calibration_path(const RunConfig& c) {
  return c.calibration_file.empty() ? std::string(CONVINT_DATA_DIR) + "/calibration.json"
                                    : resolve(c, c.calibration_file).string();
}

// ---------------------------------------------------------------------------
// shared pipeline pieces

struct PathSet {
  std::vector<WienerPath> raw;
  std::vector<HolderCertificate> certs;
  std::vector<StoppedPath> stopped;
};

inline PathSet make_paths(const RunConfig& c) {
  PathSet ps;
  for (auto seed : c.path_seeds) {
    ps.raw.push_back(sample_wiener(seed, c.T, c.dt));
    ps.certs.push_back(holder_process(ps.raw.back(), c.a));
    ps.stopped.push_back(stop_path(ps.raw.back(), c.a, c.M, &ps.certs.back()));
  }
  return ps;
}

template <int N>
InitialData<N> make_initial(const RunConfig& c, OutputDir* out) {
  const TorusGrid<N> g(c.res);
  if (c.rho0_file.empty()) {
    auto in = initial_preset<N>(c.initial_preset, g, c.T, c.rho_min, c.growth);
    in.D = c.D;
    return in;
  }
  const auto rp = resolve(c, c.rho0_file), mp = resolve(c, c.mom0_file);
  std::ifstream rs(rp, std::ios::binary), ms(mp, std::ios::binary);
  if (!rs || !ms) throw ConfigError("cannot open initial data files");
  const auto rho = read_binary<N, 1>(rs);
  const auto mom = read_binary<N, N>(ms);
  if (rho.grid().res != c.res || mom.grid().res != c.res) throw ConfigError("initial data resolution differs from grid.res");
  if (out) {
    out->input("initial.rho0", rp);
    out->input("initial.mom0", mp);
  }
  return InitialData<N>{rho[0], mom[0], c.D};
}

template <int N>
FrameConfig frame_config(const RunConfig& c) {
  FrameConfig f;
  f.kind = noise_kind_from(c.noise_kind);
  f.law = PressureLaw{c.kappa_p, c.gamma_p};
  f.stride = c.stride;
  f.rho_floor = c.rho_floor;
  return f;
}

template <int N>
struct FrameSet {
  InitialData<N> in;
  VectorField<N> G;
  PathSet paths;
  std::vector<AbstractEulerFrame<N>> frames;
  std::vector<const AbstractEulerFrame<N>*> ptrs() const {
    std::vector<const AbstractEulerFrame<N>*> p;
    for (const auto& f : frames) p.push_back(&f);
    return p;
  }
};

template <int N>
FrameSet<N> make_frames(const RunConfig& c, OutputDir* out) {
  FrameSet<N> fs;
  fs.in = make_initial<N>(c, out);
  fs.G = noise_preset<N>(c.noise_preset, TorusGrid<N>(c.res), c.noise_amplitude);
  fs.paths = make_paths(c);
  const auto fc = frame_config<N>(c);
  for (const auto& sp : fs.paths.stopped) fs.frames.push_back(assemble_frame<N>(fs.in, fs.G, sp, fc));
  return fs;
}

/// Slices written as CSV: none, first and last, or all.
inline std::vector<std::size_t> csv_slices(const RunConfig& c, std::size_t nt) {
  std::vector<std::size_t> s;
  if (c.csv_slices == "all")
    for (std::size_t k = 0; k < nt; ++k) s.push_back(k);
  else if (c.csv_slices == "ends")
    s = nt > 1 ? std::vector<std::size_t>{0, nt - 1} : std::vector<std::size_t>{0};
  return s;
}

template <int N, int C>
void dump_field(OutputDir& out, const RunConfig& c, const std::string& stem, const SpaceTimeField<N, C>& f) {
  std::ostringstream bin;
  write_binary(bin, f);
  out.write(stem + ".bin", bin.str());
  for (auto k : csv_slices(c, f.nt())) {
    std::ostringstream csv;
    write_csv(csv, f[k]);
    out.write(stem + "_t" + std::to_string(k) + ".csv", csv.str());
  }
}

// ---------------------------------------------------------------------------
// simulate-paths

inline Report simulate_paths(const RunConfig& c, OutputDir& out) {
  Report rep("simulate-paths");
  const auto ps = make_paths(c);
  std::vector<double> sweep = c.M_sweep;
  std::sort(sweep.begin(), sweep.end());
  std::ostringstream tau;
  tau << "seed,M,exceed_index,tau_index,tau_time,exceeded\n";
  json paths = json::array();
  double worst_excess = -std::numeric_limits<double>::infinity();
  bool monotone = true;
  for (std::size_t i = 0; i < ps.raw.size(); ++i) {
    const auto& sp = ps.stopped[i];
    std::ostringstream cols;
    write_path_columns(cols, sp, ps.certs[i]);
    out.write("paths/path_" + std::to_string(c.path_seeds[i]) + ".txt", cols.str());
    // independent all-pairs norm of the stopped path
    const double norm = holder_norm(sp.values, c.dt, c.a);
    worst_excess = std::max(worst_excess, norm - c.M);
    std::size_t prev = 0;
    for (double m : sweep) {
      const auto s = stop_path(ps.raw[i], c.a, m, &ps.certs[i]);
      if (s.tau_index < prev) monotone = false;
      prev = s.tau_index;
      tau << c.path_seeds[i] << ',' << fmt(m) << ',' << s.exceed_index << ',' << s.tau_index << ','
          << fmt(sp.base.time(s.tau_index)) << ',' << (s.exceeded ? 1 : 0) << '\n';
    }
    paths.push_back({{"seed", c.path_seeds[i]},
                     {"tau_index", sp.tau_index},
                     {"tau", sp.base.time(sp.tau_index)},
                     {"exceeded", sp.exceeded},
                     {"certified_norm", sp.norm},
                     {"recomputed_norm", norm},
                     {"beta_T", sp.values.back()}});
  }
  out.write("paths/tau.csv", tau.str());
  rep.le("stopped_norm_minus_M", worst_excess, 0.0, "all-pairs discrete norm of every stopped path");
  rep.flag("tau_monotone_in_M", monotone);
  rep.data["paths"] = paths;
  return rep;
}

// ---------------------------------------------------------------------------
// build-frame

template <int N>
json frame_metadata(const AbstractEulerFrame<N>& fr, const StoppedPath& sp) {
  const auto& b = fr.bounds;
  return {{"kind", to_string(fr.kind)},
          {"times", fr.times},
          {"beta", fr.beta},
          {"tau_index", sp.tau_index},
          {"mass_error", fr.mass_error},
          {"rhs_mean", fr.rhs_mean},
          {"elliptic_residual", fr.elliptic_residual},
          {"elliptic_residual_band", fr.elliptic_residual_band},
          {"v0_div", fr.v0_div},
          {"bounds",
           {{"r_min", b.r_min},
            {"r_max", b.r_max},
            {"h_sup", b.h_sup},
            {"h_c1", b.h_c1},
            {"h_holder", b.h_holder},
            {"r_c1", b.r_c1},
            {"r_holder", b.r_holder},
            {"M_sup", b.M_sup},
            {"M_c1", b.M_c1},
            {"M_holder", b.M_holder},
            {"v0_c1", b.v0_c1},
            {"c_M", b.c_M}}}};
}

template <int N>
Report frame_checks(const RunConfig& c, const FrameSet<N>& fs) {
  Report rep("build-frame");
  const auto ind = check_indata(fs.in);
  rep.flag("initial_data_admissible", ind.ok);
  double mass = 0.0, rhs = 0.0, ell = 0.0, band = 0.0, div = 0.0, rmin = std::numeric_limits<double>::infinity();
  double rho_min = std::numeric_limits<double>::infinity();
  for (const auto& fr : fs.frames) {
    mass = std::max(mass, fr.mass_error);
    rhs = std::max(rhs, fr.rhs_mean);
    ell = std::max(ell, fr.elliptic_residual);
    band = std::max(band, fr.elliptic_residual_band);
    div = std::max(div, fr.v0_div);
    rmin = std::min(rmin, fr.bounds.r_min);
    for (const auto& s : fr.rho.slices)
      for (std::size_t p = 0; p < s.size(); ++p) rho_min = std::min(rho_min, s(0, p));
  }
  rep.le("mass_error", mass, 1e-8);
  rep.ge("rho_min_minus_floor", rho_min - c.rho_floor, 0.0);
  rep.ge("r_min", rmin, 1e-300);
  rep.le("elliptic_rhs_mean", rhs, 1e-10);
  rep.le("elliptic_residual_band", band, 1e-8, "raw residual incl. Nyquist content " + fmt(ell));
  rep.le("v0_divergence", div, 1e-10);
  rep.data["indata"] = {{"c3_rho", ind.c3_rho}, {"c3_mom", ind.c3_mom}, {"inv_rho", ind.inv_rho},
                        {"high_mode", ind.high_mode}, {"total", ind.total}, {"D", fs.in.D}};
  return rep;
}

template <int N>
Report build_frame(const RunConfig& c, OutputDir& out) {
  const auto fs = make_frames<N>(c, &out);
  Report rep = frame_checks<N>(c, fs);
  json frames = json::array();
  for (std::size_t i = 0; i < fs.frames.size(); ++i) {
    const auto& fr = fs.frames[i];
    const std::string dir = "frames/path_" + std::to_string(c.path_seeds[i]) + "/";
    dump_field(out, c, dir + "r", fr.r);
    dump_field(out, c, dir + "h", fr.h);
    dump_field(out, c, dir + "M", fr.Mt);
    dump_field(out, c, dir + "rho", fr.rho);
    auto meta = frame_metadata(fr, fs.paths.stopped[i]);
    out.write_json(dir + "frame.json", meta);
    frames.push_back({{"seed", c.path_seeds[i]}, {"c_M", fr.bounds.c_M}, {"r_min", fr.bounds.r_min}});
  }
  rep.data["frames"] = frames;
  return rep;
}

// ---------------------------------------------------------------------------
// run-scheme

inline json step_json(const StepRecord& r) {
  return {{"step", r.step},         {"n", r.n},
          {"seed", r.seed},         {"route", r.route},
          {"m", r.m},               {"delta_ap", r.delta_ap},
          {"I_before", r.I_before}, {"I_after", r.I_after},
          {"gain", r.gain},         {"margin", r.margin},
          {"cells", r.cells},       {"applied", r.applied},
          {"dropped", r.dropped},   {"escalations", r.escalations},
          {"accepted", r.accepted}, {"audit_hash", r.audit_hash},
          {"lookahead", r.lookahead}};
}

template <int N>
struct SchemeSet {
  FrameSet<N> fs;
  double e = 0.0;
  // runs[i][j]: path i, run seed j
  std::vector<std::vector<SchemeRun<N>>> runs;
  std::vector<std::vector<WeakResidualReport>> physical;
};

template <int N>
SchemeSet<N> make_scheme(const RunConfig& c, OutputDir* out) {
  SchemeSet<N> ss;
  ss.fs = make_frames<N>(c, out);
  ss.e = energy_level<N>(ss.fs.ptrs(), c.scheme);
  // sequential: the FFT planner is not thread safe
  for (std::size_t i = 0; i < ss.fs.frames.size(); ++i) {
    const auto& fr = ss.fs.frames[i];
    ss.runs.emplace_back();
    ss.physical.emplace_back();
    for (auto rs : c.run_seeds) {
      const auto sched = seeded_schedule(c.schedule, rs);
      ss.runs[i].push_back(run_scheme<N>(fr, initial_subsolution(fr, ss.e), sched, c.tol, c.scheme));
      ss.physical[i].push_back(physical_residuals(fr, ss.runs[i].back().state, ss.fs.paths.stopped[i], ss.fs.in));
    }
  }
  return ss;
}

template <int N>
Report scheme_checks(const RunConfig& c, const SchemeSet<N>& ss) {
  Report rep("run-scheme");
  bool x0 = true, monotone = true, nonpos = true, escal = true;
  double init_gap = 0.0, worst_margin = std::numeric_limits<double>::infinity();
  double pres_cont = 0.0, pres_mom = 0.0;
  bool all_converged = true;
  for (std::size_t i = 0; i < ss.runs.size(); ++i)
    for (std::size_t j = 0; j < ss.runs[i].size(); ++j) {
      const auto& run = ss.runs[i][j];
      for (const auto& x : run.checks) {
        x0 = x0 && x.ok;
        worst_margin = std::min(worst_margin, x.margin);
      }
      double prev = run.I0;
      for (const auto& r : run.trace) {
        if (!r.accepted) {
          escal = escal && r.escalations <= c.scheme.max_escalations;
          continue;
        }
        monotone = monotone && r.I_after >= prev;
        prev = r.I_after;
        nonpos = nonpos && r.I_after <= 0.0;
      }
      init_gap = std::max(init_gap, (run.state.v[0] - ss.fs.frames[i].v0).max_abs());
      pres_cont = std::max(pres_cont, ss.physical[i][j].continuity);
      pres_mom = std::max(pres_mom, ss.physical[i][j].momentum);
      all_converged = all_converged && run.converged;
    }
  rep.flag("X0_every_accepted_state", x0);
  rep.ge("min_margin", worst_margin, 0.0);
  rep.flag("I_nondecreasing", monotone);
  rep.flag("I_nonpositive", nonpos);
  rep.flag("escalation_bound", escal);
  rep.le("initial_velocity_gap", init_gap, 1e-12);
  if (all_converged) {
    rep.le("physical_continuity_residual", pres_cont, c.tol);
    rep.le("physical_momentum_residual", pres_mom, c.tol);
  } else {
    rep.skip("physical_continuity_residual", "scheme did not reach tol; measured " + fmt(pres_cont));
    rep.skip("physical_momentum_residual", "scheme did not reach tol; measured " + fmt(pres_mom));
  }
  if (c.run_seeds.size() >= 2) {
    double dmin = std::numeric_limits<double>::infinity();
    for (const auto& per : ss.runs)
      for (std::size_t a = 0; a < per.size(); ++a)
        for (std::size_t b = a + 1; b < per.size(); ++b)
          dmin = std::min(dmin, relative_distance(per[a].state.v, per[b].state.v));
    rep.ge("seed_distance", dmin, 0.1);
  }
  return rep;
}

template <int N>
Report run_scheme_cmd(const RunConfig& c, OutputDir& out) {
  const auto ss = make_scheme<N>(c, &out);
  Report rep = scheme_checks<N>(c, ss);
  std::ostringstream csv;
  csv << "path_seed,run_seed,step,n,seed,route,m,delta_ap,I_before,I_after,gain,margin,cells,applied,dropped,"
         "escalations,accepted,audit_hash\n";
  json runs = json::array();
  for (std::size_t i = 0; i < ss.runs.size(); ++i)
    for (std::size_t j = 0; j < ss.runs[i].size(); ++j) {
      const auto& run = ss.runs[i][j];
      const std::string dir =
          "runs/path_" + std::to_string(c.path_seeds[i]) + "/seed_" + std::to_string(c.run_seeds[j]) + "/";
      dump_field(out, c, dir + "v", run.state.v);
      dump_field(out, c, dir + "F", run.state.F);
      json trace = json::array();
      for (const auto& r : run.trace) {
        trace.push_back(step_json(r));
        csv << c.path_seeds[i] << ',' << c.run_seeds[j] << ',' << r.step << ',' << r.n << ',' << r.seed << ','
            << r.route << ',' << r.m << ',' << fmt(r.delta_ap) << ',' << fmt(r.I_before) << ',' << fmt(r.I_after)
            << ',' << fmt(r.gain) << ',' << fmt(r.margin) << ',' << r.cells << ',' << r.applied << ','
            << r.dropped << ',' << r.escalations << ',' << (r.accepted ? 1 : 0) << ',' << r.audit_hash << '\n';
      }
      json x0 = json::array();
      for (const auto& x : run.checks)
        x0.push_back({{"ok", x.ok},
                      {"initial", x.initial},
                      {"div_v0", x.div_v0},
                      {"packet_residual", x.packet_residual},
                      {"weak_bound", x.weak_bound},
                      {"grid_residual", x.grid_residual},
                      {"margin", x.margin},
                      {"energy_excess", x.energy_excess}});
      const auto& ph = ss.physical[i][j];
      runs.push_back({{"path_seed", c.path_seeds[i]},
                      {"run_seed", c.run_seeds[j]},
                      {"I0", run.I0},
                      {"I", functional_I(run.state, ss.fs.frames[i])},
                      {"converged", run.converged},
                      {"stalled", run.stalled},
                      {"note", run.note},
                      {"packets", run.state.packets.size()},
                      {"physical",
                       {{"continuity", ph.continuity}, {"momentum", ph.momentum}, {"mass_gap", ph.mass_gap},
                        {"initial", ph.initial}}},
                      {"X0", x0},
                      {"trace", trace}});
    }
  out.write("trace.csv", csv.str());
  out.write_json("trace.json", runs);
  // ensemble functional and pairwise distances between run seeds
  json ens = json::array();
  for (std::size_t j = 0; j < c.run_seeds.size(); ++j) {
    std::vector<const SubsolutionState<N>*> st;
    for (const auto& per : ss.runs) st.push_back(&per[j].state);
    double mean = 0.0;
    for (std::size_t i = 0; i < st.size(); ++i) mean += functional_I(*st[i], ss.fs.frames[i]);
    ens.push_back({{"run_seed", c.run_seeds[j]}, {"I", mean / static_cast<double>(st.size())}});
  }
  json dist = json::array();
  for (std::size_t a = 0; a < c.run_seeds.size(); ++a)
    for (std::size_t b = a + 1; b < c.run_seeds.size(); ++b) {
      std::vector<const SpaceTimeField<N, N>*> va, vb;
      double rel = 0.0;
      for (const auto& per : ss.runs) {
        va.push_back(&per[a].state.v);
        vb.push_back(&per[b].state.v);
        rel += relative_distance(per[a].state.v, per[b].state.v);
      }
      dist.push_back({{"seeds", {c.run_seeds[a], c.run_seeds[b]}},
                      {"relative_l2", rel / static_cast<double>(ss.runs.size())},
                      {"weak_metric_D", weak_metric_D<N>(va, vb)}});
    }
  rep.data["e"] = ss.e;
  rep.data["ensemble_I"] = ens;
  rep.data["distances"] = dist;
  return rep;
}

// ---------------------------------------------------------------------------
// calibrate

inline double round_sig(double x, int digits = 6) {
  if (x == 0.0 || !std::isfinite(x)) return x;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, x);
  return std::strtod(buf, nullptr);
}

inline Report calibrate(const RunConfig& c, OutputDir& out) {
  Report rep("calibrate");
  Calibration cal;
  cal.safety = c.cal_safety;
  cal.samples = c.cal_samples;
  cal.seed = c.cal_seed;
  SelectionOptions sel;
  cal.chi0 = sel.chi0;
  const auto s2 = calibrate_segment<2>(c.cal_samples, c.cal_seed, 0.05, sel);
  const auto e2 = calibrate_energy<2>(c.cal_samples, c.cal_seed, c.cal_n);
  cal.c_seg2 = round_sig(c.cal_safety * s2.min_ratio);
  cal.c_energy2 = round_sig(c.cal_safety * e2.min_ratio);
  rep.le("segment_failures_N2", s2.failures, 0.0);
  json seg{{"2", {{"min_ratio", s2.min_ratio}, {"median_ratio", s2.median_ratio}, {"failures", s2.failures}}}};
  json en{{"2", {{"min_ratio", e2.min_ratio}, {"median_ratio", e2.median_ratio}}}};
  if (c.cal_include_n3) {
    const auto s3 = calibrate_segment<3>(c.cal_samples, c.cal_seed, 0.05, sel);
    const auto e3 = calibrate_energy<3>(c.cal_samples, c.cal_seed, c.cal_n);
    cal.c_seg3 = round_sig(c.cal_safety * s3.min_ratio);
    cal.c_energy3 = round_sig(c.cal_safety * e3.min_ratio);
    rep.le("segment_failures_N3", s3.failures, 0.0);
    seg["3"] = {{"min_ratio", s3.min_ratio}, {"median_ratio", s3.median_ratio}, {"failures", s3.failures}};
    en["3"] = {{"min_ratio", e3.min_ratio}, {"median_ratio", e3.median_ratio}};
  }

  // chi0 table: the floor constant against segment quality and failures
  std::ostringstream chi;
  chi << "N,chi0,min_ratio,median_ratio,failures\n";
  const int chi_samples = std::min(c.cal_samples, 500);
  for (double x : c.chi0_values) {
    SelectionOptions o;
    o.chi0 = x;
    const auto r = calibrate_segment<2>(chi_samples, c.cal_seed, 0.05, o);
    chi << 2 << ',' << fmt(x) << ',' << fmt(r.min_ratio) << ',' << fmt(r.median_ratio) << ',' << r.failures << '\n';
  }
  out.write("calibration/chi0_table.csv", chi.str());

  // kappa from short scheme runs on small frames
  RunConfig k = c;
  k.N = 2;
  k.res = c.kappa_res;
  k.path_seeds = c.kappa_seeds;
  k.rho0_file.clear();
  k.mom0_file.clear();
  k.schedule.clear();
  for (int i = 0; i < c.kappa_steps; ++i) k.schedule.push_back({64, static_cast<std::uint64_t>(i + 1)});
  const auto fs = make_frames<2>(k, nullptr);
  const auto kc = calibrate_kappa<2>(fs.ptrs(), k.schedule, c.scheme, c.cal_safety);
  cal.kappa = round_sig(kc.kappa);
  rep.ge("kappa_steps", static_cast<double>(kc.steps), 1.0);
  rep.ge("kappa_positive", cal.kappa, 1e-300);

  const auto cj = to_json(cal);
  out.write("calibration/calibration.json", cj.dump(2) + "\n");

  // comparison with the installed file, if it was produced with the same settings
  const auto path = calibration_path(c);
  std::ifstream is(path);
  if (is) {
    out.input("calibration", path);
    const auto old = calibration_from_json(nlohmann::json::parse(is));
    if (old.samples == cal.samples && old.seed == cal.seed && old.safety == cal.safety) {
      auto rel = [](double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); };
      double worst = std::max({rel(cal.c_seg2, old.c_seg2), rel(cal.c_energy2, old.c_energy2), rel(cal.kappa, old.kappa)});
      if (c.cal_include_n3) worst = std::max({worst, rel(cal.c_seg3, old.c_seg3), rel(cal.c_energy3, old.c_energy3)});
      rep.le("installed_calibration_rel_diff", worst, 1e-5);
    } else {
      rep.skip("installed_calibration_rel_diff", "installed file uses other sample settings");
    }
  }
  rep.data["calibration"] = cj;
  rep.data["segment"] = seg;
  rep.data["energy"] = en;
  rep.data["kappa"] = {{"min_ratio", kc.min_ratio}, {"max_ratio", kc.max_ratio}, {"fitted", kc.fitted},
                       {"steps", kc.steps}};
  return rep;
}

// ---------------------------------------------------------------------------
// verify

/// Small self-checks of the lower modules on the configured dimension.
template <int N>
Report module_checks(const RunConfig& c) {
  Report rep("modules");
  const auto cal = load_calibration(calibration_path(c));
  // the first samples of the calibration stream: their minimum cannot undercut the full-sample minimum
  const auto seg = calibrate_segment<N>(50, cal.seed);
  rep.le("geometry.segment_failures", seg.failures, 0.0);
  rep.ge("geometry.segment_ratio_over_c_seg", seg.min_ratio / cal.c_seg(N), 1.0);
  const auto en = calibrate_energy<N>(20, cal.seed, c.cal_n);
  rep.ge("oscillatory.energy_ratio_over_c_energy", en.min_ratio / cal.c_energy(N), 1.0);
  // elliptic solve of a smooth zero-mean right-hand side
  const TorusGrid<N> g(c.res);
  const auto rhs = sample_vector<N>(g, [](const Vec<N>& x) {
    Vec<N> v = Vec<N>::Zero();
    v[0] = std::sin(kTwoPi * x[1]);
    v[1] = std::cos(kTwoPi * (x[0] + x[1]));
    return v;
  });
  const auto sol = solve_elliptic_m(rhs);
  rep.le("torus.elliptic_residual", elliptic_residual(sol.Mt, rhs), 1e-8);
  // Ito reconstruction on a manufactured flow, first-order in dt
  const auto mf = manufactured_flow<N>(g);
  const auto G = noise_preset<N>("smooth", g, 0.5);
  const auto phi = sample_vector<N>(g, [](const Vec<N>& x) {
    Vec<N> v = Vec<N>::Zero();
    v[0] = std::cos(kTwoPi * x[1]);
    return v;
  });
  const auto w = sample_wiener(c.path_seeds.front(), c.T, c.dt);
  const auto gap = ito_reconstruction_check<N>(mf, G, phi, w.values, c.dt);
  rep.le("transform.ito_gap", std::abs(gap.gap), 10.0 * std::sqrt(c.dt), "sum against integrated form");
  return rep;
}

/// Compares the hashes of every manifest in `ref` with the manifests just written to `out`.
/// The verify manifest itself is skipped: its report depends on the verify options.
inline void compare_manifests(const fs::path& ref, const fs::path& out, Report& rep) {
  std::size_t files = 0, mismatched = 0, missing = 0;
  for (const auto& entry : fs::directory_iterator(ref)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("manifest_", 0) != 0 || entry.path().extension() != ".json") continue;
    if (name == "manifest_verify.json" || name == "manifest_report.json") continue;
    const auto a = json::parse(read_file(entry.path()));
    const auto other = out / name;
    if (!fs::exists(other)) {
      ++missing;
      continue;
    }
    const auto b = json::parse(read_file(other));
    for (const auto& [k, v] : a["outputs"].items()) {
      ++files;
      if (!b["outputs"].contains(k) || b["outputs"][k] != v) ++mismatched;
    }
  }
  rep.ge("reference_files_compared", static_cast<double>(files), 1.0);
  rep.le("reference_manifests_missing", static_cast<double>(missing), 0.0);
  rep.le("reference_hash_mismatches", static_cast<double>(mismatched), 0.0);
}

/// Checks that every output listed in the manifests of `dir` still has its recorded hash.
inline void check_artifacts(const fs::path& dir, Report& rep) {
  std::size_t files = 0, bad = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("manifest_", 0) != 0 || entry.path().extension() != ".json") continue;
    const auto m = json::parse(read_file(entry.path()));
    for (const auto& [k, v] : m["outputs"].items()) {
      ++files;
      const auto p = dir / k;
      if (!fs::exists(p) || git_blob_sha1(read_file(p)) != v.get<std::string>()) ++bad;
    }
  }
  rep.le("artifact_hash_mismatches", static_cast<double>(bad), 0.0, std::to_string(files) + " files");
}

// ---------------------------------------------------------------------------
// report

/// Collects every <command>.json report of a directory into summary.json and summary.csv.
inline Report summarize(const fs::path& dir, OutputDir& out) {
  Report rep("report");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() != ".json" || name.rfind("manifest_", 0) == 0 || name == "report.json") continue;
    files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::ostringstream csv;
  csv << "command,check,relation,value,threshold,pass,note\n";
  json cmds = json::array();
  std::size_t n = 0;
  for (const auto& f : files) {
    json j;
    try {
      j = json::parse(read_file(f));
    } catch (const json::exception&) {
      continue;
    }
    if (!j.is_object() || !j.contains("command") || !j.contains("checks")) continue;
    ++n;
    out.input(f.filename().string(), f);
    const auto cmd = j["command"].get<std::string>();
    for (const auto& ch : j["checks"]) {
      const auto name = ch["name"].get<std::string>();
      const bool pass = ch["pass"].get<bool>();
      std::string note = ch.value("note", "");
      std::replace(note.begin(), note.end(), ',', ';');
      csv << cmd << ',' << name << ',' << ch["relation"].get<std::string>() << ','
          << (ch.contains("value") ? fmt(ch["value"].get<double>()) : "") << ','
          << (ch.contains("threshold") ? fmt(ch["threshold"].get<double>()) : "") << ',' << (pass ? 1 : 0) << ','
          << note << '\n';
      if (!pass) rep.flag(cmd + ":" + name, false, note);
    }
    cmds.push_back({{"command", cmd}, {"ok", j["ok"]}, {"checks", j["checks"].size()}});
  }
  rep.ge("reports_found", static_cast<double>(n), 1.0);
  out.write("summary.csv", csv.str());
  rep.data["reports"] = cmds;
  // plot-ready I trajectory, if a scheme trace is present
  if (fs::exists(dir / "trace.json")) {
    out.input("trace.json", dir / "trace.json");
    std::ostringstream it;
    it << "path_seed,run_seed,step,n,I\n";
    for (const auto& r : json::parse(read_file(dir / "trace.json"))) {
      it << r["path_seed"].get<std::uint64_t>() << ',' << r["run_seed"].get<std::uint64_t>() << ",0,0,"
         << fmt(r["I0"].get<double>()) << '\n';
      for (const auto& s : r["trace"]) {
        if (!s["accepted"].get<bool>()) continue;
        it << r["path_seed"].get<std::uint64_t>() << ',' << r["run_seed"].get<std::uint64_t>() << ','
           << s["step"].get<int>() << ',' << s["n"].get<int>() << ',' << fmt(s["I_after"].get<double>()) << '\n';
      }
    }
    out.write("I_trajectory.csv", it.str());
  }
  return rep;
}

}  // namespace convint::cli
