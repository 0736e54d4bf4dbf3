// convint: command line front end.

#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace convint::cli;

namespace {

struct Common {
  std::string config;
  std::string out = "out";
};

void add_common(CLI::App* sub, Common& c, bool need_config = true) {
  auto* opt = sub->add_option("-c,--config", c.config, "run configuration (JSON)");
  if (need_config) opt->required()->check(CLI::ExistingFile);
  sub->add_option("-o,--out", c.out, "output directory")->capture_default_str();
}

RunConfig load(const Common& c) { return c.config.empty() ? RunConfig{} : load_config(c.config); }

/// Writes <command>.json and the manifest, prints the checks, returns the exit code.
int finish(const std::string& command, const Report& rep, const RunConfig& cfg, OutputDir& out, const Common& c) {
  if (!c.config.empty()) out.input("config", c.config);
  out.write_json(command + ".json", rep.to_json());
  out.finish(command, to_json(cfg));
  for (const auto& ch : rep.checks()) {
    std::cout << (ch.relation == "skip" ? "SKIP " : ch.pass ? "PASS " : "FAIL ") << command << ' ' << ch.name;
    if (ch.relation != "skip") std::cout << ' ' << fmt(ch.value) << ' ' << ch.relation << ' ' << fmt(ch.threshold);
    if (!ch.note.empty()) std::cout << "  (" << ch.note << ')';
    std::cout << '\n';
  }
  std::cout << command << (rep.ok() ? ": ok\n" : ": FAILED\n");
  return rep.ok() ? 0 : 1;
}

template <template <int> class F>
Report dispatch(const RunConfig& cfg, OutputDir& out) {
  return cfg.N == 2 ? F<2>::run(cfg, out) : F<3>::run(cfg, out);
}

template <int N>
struct BuildFrame {
  static Report run(const RunConfig& c, OutputDir& o) { return build_frame<N>(c, o); }
};
template <int N>
struct RunScheme {
  static Report run(const RunConfig& c, OutputDir& o) { return run_scheme_cmd<N>(c, o); }
};
template <int N>
struct Modules {
  static Report run(const RunConfig& c, OutputDir&) { return module_checks<N>(c); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"convex integration for stochastic compressible Euler on the torus"};
  app.require_subcommand(1);

  Common c_paths, c_frame, c_scheme, c_verify, c_cal, c_report;
  auto* paths = app.add_subcommand("simulate-paths", "sample Brownian paths, Hoelder certificates and stopping times");
  add_common(paths, c_paths);
  auto* frame = app.add_subcommand("build-frame", "assemble the abstract Euler frame per path");
  add_common(frame, c_frame);
  auto* scheme = app.add_subcommand("run-scheme", "run the convex integration scheme per path and run seed");
  add_common(scheme, c_scheme);
  auto* verify = app.add_subcommand("verify", "run every stage and check all invariants");
  add_common(verify, c_verify);
  std::string against, artifacts;
  verify->add_option("--against", against, "directory with reference manifests; outputs must hash identically")
      ->check(CLI::ExistingDirectory);
  verify->add_option("--artifacts", artifacts, "directory whose manifest hashes are checked against its files")
      ->check(CLI::ExistingDirectory);
  auto* cal = app.add_subcommand("calibrate", "recompute the calibrated constants");
  add_common(cal, c_cal, false);
  std::string install;
  cal->add_option("--write", install, "also write the calibration file to this path");
  auto* report = app.add_subcommand("report", "collect the reports of an output directory");
  std::string report_in;
  report->add_option("dir", report_in, "directory with command reports")->required()->check(CLI::ExistingDirectory);
  report->add_option("-o,--out", c_report.out, "output directory (default: the input directory)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*paths) {
      const auto cfg = load(c_paths);
      OutputDir out(c_paths.out);
      return finish("simulate-paths", simulate_paths(cfg, out), cfg, out, c_paths);
    }
    if (*frame) {
      const auto cfg = load(c_frame);
      OutputDir out(c_frame.out);
      return finish("build-frame", dispatch<BuildFrame>(cfg, out), cfg, out, c_frame);
    }
    if (*scheme) {
      const auto cfg = load(c_scheme);
      OutputDir out(c_scheme.out);
      return finish("run-scheme", dispatch<RunScheme>(cfg, out), cfg, out, c_scheme);
    }
    if (*verify) {
      const auto cfg = load(c_verify);
      Report rep("verify");
      {
        OutputDir out(c_verify.out);
        auto r = simulate_paths(cfg, out);
        finish("simulate-paths", r, cfg, out, c_verify);
        rep.absorb(r, "paths.");
      }
      {
        OutputDir out(c_verify.out);
        auto r = dispatch<BuildFrame>(cfg, out);
        finish("build-frame", r, cfg, out, c_verify);
        rep.absorb(r, "frame.");
      }
      {
        OutputDir out(c_verify.out);
        auto r = dispatch<RunScheme>(cfg, out);
        finish("run-scheme", r, cfg, out, c_verify);
        rep.absorb(r, "scheme.");
      }
      OutputDir out(c_verify.out);
      rep.absorb(dispatch<Modules>(cfg, out), "");
      out.input("calibration", calibration_path(cfg));
      if (!artifacts.empty()) check_artifacts(artifacts, rep);
      if (!against.empty()) compare_manifests(against, c_verify.out, rep);
      return finish("verify", rep, cfg, out, c_verify);
    }
    if (*cal) {
      const auto cfg = load(c_cal);
      OutputDir out(c_cal.out);
      const auto rep = calibrate(cfg, out);
      if (!install.empty()) {
        std::ofstream os(install, std::ios::binary);
        os << rep.data["calibration"].dump(2) << "\n";
      }
      return finish("calibrate", rep, cfg, out, c_cal);
    }
    if (*report) {
      const auto dir = c_report.out == "out" ? report_in : c_report.out;
      OutputDir out(dir);
      const auto rep = summarize(report_in, out);
      Common none;
      none.out = dir;
      return finish("report", rep, RunConfig{}, out, none);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
