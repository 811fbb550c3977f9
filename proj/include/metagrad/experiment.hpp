#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "metagrad/algorithms.hpp"
#include "metagrad/experiment_pool.hpp"

namespace metagrad {

/// Raised for unknown keys and unparsable values; the message names the key.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Flat key = value configuration with defaults for every key.
///
/// Resolution order: built-in defaults, then the environment preset, then the
/// config file, then command-line overrides.
class ExperimentConfig {
public:
  ExperimentConfig();

  static const std::vector<std::string>& keys();
  static bool known(const std::string& key);

  /// Parses `key = value` lines; `#` starts a comment.
  static std::map<std::string, std::string> parse(const std::string& text);
  static std::map<std::string, std::string> parse_file(const std::string& path);

  /// Defaults + preset for (command, env) + overrides.
  static ExperimentConfig resolve(const std::string& command, const std::map<std::string, std::string>& overrides);

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;

  double real(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;
  std::vector<std::uint64_t> seeds() const;

  /// Every key in table order, one `key = value` per line.
  std::string serialize() const;

  PredictionConfig prediction(std::uint64_t seed) const;
  ControlConfig control(std::uint64_t seed) const;
  MrpSpec mrp() const;
  MdpSpec mdp() const;

private:
  std::map<std::string, std::string> values_;
};

/// Parses "0-9", "1,4,7" or mixtures of both.
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

/// Linear-interpolation quantile of unsorted data, p in [0,1].
double quantile(std::vector<double> data, double p);

struct SeedRun {
  std::uint64_t seed = 0;
  RunLog log;
};

/// Runs the configured learner for every seed.
std::vector<SeedRun> run_experiment(const ExperimentConfig& cfg, const std::string& command);

void write_runlog_csv(std::ostream& os, const std::vector<SeedRun>& runs);
void write_final_eta_csv(std::ostream& os, const std::vector<SeedRun>& runs);
void write_status_csv(std::ostream& os, const std::vector<SeedRun>& runs);

/// Median and 20-80 band over seeds for each series, one panel per quantity.
void write_eta_svg(std::ostream& os, const std::vector<SeedRun>& runs, const std::string& title);
void write_metric_svg(std::ostream& os, const std::vector<SeedRun>& runs, const std::string& title,
                      const std::string& metric_label);

struct SweepRow {
  double gamma = 0.0;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  double final_metric = 0.0;
  bool aborted = false;
};

/// Baseline runs over a fixed gamma (and lambda) grid; adaptation is forced off.
std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const std::string& algorithm);
void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

/// Formats a double so it reads back bit-identically.
std::string exact(double x);

}  // namespace metagrad
