// Command-line driver: predict, control, gradcheck and sweep.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metagrad/experiment.hpp"
#include "metagrad/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace metagrad;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kCheckFailed = 2;
constexpr int kDiverged = 3;

struct CommonArgs {
  std::string config;
  std::string out = "out";
  std::string seeds;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "flat key = value config file");
  cmd->add_option("--out", a.out, "output directory")->capture_default_str();
  cmd->add_option("--seeds", a.seeds, "seed list, e.g. 0-9 or 1,3,5");
  cmd->add_option("--set", a.sets, "override one key, key=value (repeatable)");
}

ExperimentConfig resolve(const std::string& command, const CommonArgs& a) {
  std::map<std::string, std::string> overrides;
  if (!a.config.empty()) overrides = ExperimentConfig::parse_file(a.config);
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    if (!ExperimentConfig::known(key)) throw ConfigError("unknown config key '" + key + "'");
    overrides[key] = kv.substr(eq + 1);
  }
  if (!a.seeds.empty()) overrides["seeds"] = a.seeds;
  return ExperimentConfig::resolve(command, overrides);
}

template <typename Writer>
void write_file(const fs::path& path, Writer&& w) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  w(os);
}

void echo_config(const fs::path& out, const ExperimentConfig& cfg) {
  fs::create_directories(out);
  const std::string text = cfg.serialize();
  std::cout << "# resolved config\n" << text << std::flush;
  write_file(out / "config.txt", [&](std::ostream& os) { os << text; });
}

int run_learners(const std::string& command, const CommonArgs& a) {
  const ExperimentConfig cfg = resolve(command, a);
  const fs::path out(a.out);
  echo_config(out, cfg);
  const std::vector<SeedRun> runs = run_experiment(cfg, command);
  write_file(out / "runlog.csv", [&](std::ostream& os) { write_runlog_csv(os, runs); });
  write_file(out / "final_eta.csv", [&](std::ostream& os) { write_final_eta_csv(os, runs); });
  write_file(out / "status.csv", [&](std::ostream& os) { write_status_csv(os, runs); });
  write_file(out / "eta_curves.svg", [&](std::ostream& os) { write_eta_svg(os, runs, cfg.get("env") + ": " + command); });
  if (command == "control") {
    write_file(out / "return_curves.svg",
               [&](std::ostream& os) { write_metric_svg(os, runs, cfg.get("env") + ": control", "expected return"); });
  } else {
    write_file(out / "mse_curves.svg",
               [&](std::ostream& os) { write_metric_svg(os, runs, cfg.get("env") + ": predict", "value MSE"); });
  }
  int code = kOk;
  for (const auto& r : runs) {
    if (r.log.aborted) {
      std::cerr << "seed " << r.seed << " aborted: " << r.log.abort_reason << '\n';
      code = kDiverged;
    }
  }
  std::cout << "wrote " << runs.size() << " seed(s) to " << out.string() << '\n';
  return code;
}

int run_gradcheck(const CommonArgs& a, double tolerance, double meta_tolerance, std::size_t instances) {
  const ExperimentConfig cfg = resolve("gradcheck", a);
  const fs::path out(a.out);
  echo_config(out, cfg);
  GradcheckOptions opts;
  opts.seed = cfg.seeds().front();
  opts.instances = instances;
  opts.tolerance = tolerance;
  opts.meta_tolerance = meta_tolerance;
  opts.reduction_tolerance = std::min(opts.reduction_tolerance, tolerance);
  const std::vector<CheckResult> results = run_gradcheck_suite(opts);
  write_gradcheck_report(std::cout, results);
  write_file(out / "gradcheck.csv", [&](std::ostream& os) { write_gradcheck_report(os, results); });
  for (const auto& r : results) {
    if (!r.passed) return kCheckFailed;
  }
  return kOk;
}

int run_sweep_cmd(const CommonArgs& a) {
  const ExperimentConfig cfg = resolve("sweep", a);
  std::string algorithm = cfg.get("algorithm");
  if (algorithm == "auto") algorithm = cfg.get("env") == "gridworld" ? "control" : "predict";
  const fs::path out(a.out);
  echo_config(out, cfg);
  const std::vector<SweepRow> rows = run_sweep(cfg, algorithm);
  write_file(out / "sweep.csv", [&](std::ostream& os) { write_sweep_csv(os, rows); });
  int code = kOk;
  for (const auto& r : rows) {
    if (r.aborted) {
      std::cerr << "gamma " << r.gamma << " lambda " << r.lambda << " seed " << r.seed << " aborted\n";
      code = kDiverged;
    }
  }
  std::cout << "wrote " << rows.size() << " sweep row(s) to " << out.string() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-gradient discount and bootstrapping adaptation on toy problems"};
  app.require_subcommand(1);

  CommonArgs predict_args, control_args, grad_args, sweep_args;
  auto* predict = app.add_subcommand("predict", "meta-gradient TD(lambda) on a reward process");
  add_common(predict, predict_args);
  auto* control = app.add_subcommand("control", "meta-gradient actor-critic on the noisy gridworld");
  add_common(control, control_args);
  auto* grad = app.add_subcommand("gradcheck", "finite-difference verification suite");
  add_common(grad, grad_args);
  double tolerance = 1e-6, meta_tolerance = 1e-4;
  std::size_t instances = 100;
  grad->add_option("--tolerance", tolerance, "bound on analytic vs numeric relative error")->capture_default_str();
  grad->add_option("--meta-tolerance", meta_tolerance, "bound for the through-the-update checks")
      ->capture_default_str();
  grad->add_option("--instances", instances, "random instances per check")->capture_default_str();
  auto* sweep = app.add_subcommand("sweep", "fixed gamma (and lambda) grid of baseline runs");
  add_common(sweep, sweep_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*predict) return run_learners("predict", predict_args);
    if (*control) return run_learners("control", control_args);
    if (*grad) return run_gradcheck(grad_args, tolerance, meta_tolerance, instances);
    if (*sweep) return run_sweep_cmd(sweep_args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
