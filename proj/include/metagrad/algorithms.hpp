#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "metagrad/approximators.hpp"
#include "metagrad/envs.hpp"
#include "metagrad/meta_params.hpp"
#include "metagrad/returns.hpp"

namespace metagrad {

/// theta' = theta + delta_theta, with df_deta = d(delta_theta)/d(adapted logits).
struct InnerUpdateResult {
  AgentParams new_params;
  Eigen::VectorXd delta_theta;
  Eigen::MatrixXd df_deta;
  double loss = 0.0;
};

/// Which gates condition the value/policy inputs on the validation side.
enum class ValidationConditioning { EtaPrime, Eta };

struct ValidationSpec {
  double gamma_prime = 1.0;
  double lambda_prime = 1.0;
  std::size_t meta_batch_size = 8;
  ValidationConditioning conditioning = ValidationConditioning::EtaPrime;

  EtaView reference_eta() const { return EtaView::constant(gamma_prime, lambda_prime); }
  void validate() const;
};

struct MetaObjective {
  double value = 0.0;
  Eigen::VectorXd grad;  // dJ'/dtheta'
};

enum class ReturnKind { Auto, Lambda, VTrace };

struct A2cCoefficients {
  double alpha = 0.01;
  double value_coef = 0.5;    // b
  double entropy_coef = 0.01; // c
  ReturnKind returns = ReturnKind::Auto;
};

/// v_theta(S_k) for every state of the trajectory, conditioned on `cond`.
std::vector<double> bootstrap_values(const AgentParams& ap, const Trajectory& traj, const EtaView& cond);

/// Semi-gradient TD(lambda) step summed over every step of every trajectory.
InnerUpdateResult td_lambda_inner_update(std::span<const Trajectory> trajs, const AgentParams& ap,
                                         const MetaParams& mp, double alpha, bool with_meta_gradient = true);

/// Full Jacobian d(delta_theta)/d(theta) of the TD(lambda) step, including the
/// bootstrap path. Unconditioned agents only; used by the exact-accumulation oracle.
Eigen::MatrixXd td_lambda_update_jacobian(std::span<const Trajectory> trajs, const AgentParams& ap,
                                          const MetaParams& mp, double alpha);

/// -dJ'/dtheta' for the squared error against the reference return, averaged over the batch.
MetaObjective mse_meta_objective_grad(std::span<const Trajectory> validation, const AgentParams& ap_new,
                                      const ValidationSpec& vspec, const EtaView& cond);

/// Actor-critic step: policy gradient, value regression and entropy bonus.
InnerUpdateResult a2c_inner_update(std::span<const Trajectory> trajs, const AgentParams& ap, const MetaParams& mp,
                                   const A2cCoefficients& coef, bool with_meta_gradient = true);

/// Policy-gradient meta-objective J' = -sum (g' - v') log pi, averaged over the batch.
MetaObjective pg_meta_objective_grad(std::span<const Trajectory> validation, const AgentParams& ap_new,
                                     const ValidationSpec& vspec, const EtaView& cond);

/// Update/validation index sets produced from one batch.
struct ReusePlan {
  std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> pairs;
  bool consecutive_fallback = false;
};

/// Splits a batch into halves A, B and emits (A -> update, B -> validate) then
/// (B -> update, A -> validate). A batch of one cannot be split; the plan then
/// asks the caller to validate on the next segment instead.
ReusePlan swap_reuse_pairing(std::size_t batch_size);

struct LogRow {
  std::size_t iter = 0;
  double metric = 0.0;
  double inner_loss = 0.0;
  std::vector<double> gammas;
  std::vector<double> lambdas;
};

struct RunLog {
  std::uint64_t seed = 0;
  std::vector<LogRow> rows;
  bool aborted = false;
  std::string abort_reason;
  MetaParams final_eta;
  AgentParams final_params;

  /// Mean logged metric over the last `fraction` of the iteration budget.
  double tail_metric(std::size_t iterations, double fraction = 0.1) const;
};

struct MetaSettings {
  bool adapt_gamma = false;
  bool adapt_lambda = false;
  bool state_dependent = false;
  double gamma_logit_init = 0.0;
  double lambda_logit_init = 0.0;
  double beta = 1e-3;
  double mu = 0.0;
  MetaOptimizerKind optimizer = MetaOptimizerKind::Adam;
  ValidationSpec validation;
};

struct RunSettings {
  std::uint64_t seed = 0;
  std::size_t iterations = 50000;
  std::size_t log_every = 100;
  double divergence_threshold = 1e6;
  bool debug_gradcheck = false;
  std::size_t checkpoint_every = 0;
  std::string checkpoint_dir;
};

struct PredictionConfig {
  MrpSpec env;
  double alpha = 0.1;
  std::size_t segment_length = 0;  // 0 = whole episodes
  bool conditioning = false;
  std::size_t embedding_size = 16;
  MetaSettings meta;
  RunSettings run;
};

struct ControlConfig {
  MdpSpec env;
  A2cCoefficients a2c;
  std::size_t segment_length = 20;
  std::size_t batch_size = 8;
  std::size_t num_actors = 1;
  std::size_t snapshot_lag = 0;
  bool conditioning = false;
  std::size_t embedding_size = 16;
  MetaSettings meta;
  RunSettings run;
};

MetaParams initial_meta_params(const MetaSettings& meta, std::size_t num_states);

/// Meta-gradient TD(lambda): update on one sample, cross-validate on fresh ones.
RunLog run_meta_prediction(const PredictionConfig& cfg);
/// Plain TD(lambda) with the configured fixed gates.
RunLog run_td_lambda_baseline(const PredictionConfig& cfg);

/// Meta-gradient actor-critic with swapped update/validation halves.
RunLog run_meta_control(const ControlConfig& cfg);
/// Plain actor-critic with the configured fixed gates.
RunLog run_a2c_baseline(const ControlConfig& cfg);

}  // namespace metagrad
