#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "metagrad/algorithms.hpp"

namespace metagrad {

struct CheckResult {
  std::string name;
  std::string formula;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 100;
  double step = 1e-6;
  double tolerance = 1e-6;        // analytic vs central differences
  double meta_tolerance = 1e-4;   // differences taken through a whole inner update
  double reduction_tolerance = 1e-12;
  std::size_t reduction_instances = 1000;
};

/// Largest entrywise error of the TD(lambda) df/deta against central differences.
/// Conditioning inputs and bootstrap values are held at their nominal eta.
double check_td_update_meta_jacobian(std::span<const Trajectory> trajs, const AgentParams& ap, const MetaParams& mp,
                                     double alpha, double step = 1e-6);

/// Same for the actor-critic update; target probabilities are held fixed too.
double check_a2c_update_meta_jacobian(std::span<const Trajectory> trajs, const AgentParams& ap, const MetaParams& mp,
                                      const A2cCoefficients& coef, double step = 1e-6);

/// Runs every randomized check.
std::vector<CheckResult> run_gradcheck_suite(const GradcheckOptions& opts);

void write_gradcheck_report(std::ostream& os, const std::vector<CheckResult>& results);

}  // namespace metagrad
