#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace metagrad {

/// One recorded segment or episode of experience.
///
/// Index k of `rewards` holds the reward received on the transition out of
/// `state_ids[k]`, so a segment of T transitions carries T+1 states.
struct Trajectory {
  std::vector<Eigen::VectorXd> observations;
  std::vector<int> state_ids;
  std::vector<int> actions;  // empty for reward processes
  std::vector<double> rewards;
  std::vector<double> behavior_probs;
  bool terminal = false;

  std::size_t length() const { return rewards.size(); }

  /// Throws if the field lengths or probabilities are inconsistent.
  void validate() const;
};

/// Per-state view of the discount and bootstrapping gates.
///
/// Built either from logits (differentiable, carries sigmoid slopes and the
/// logit index each state reads from) or from raw constants (reference
/// returns with no gradient bookkeeping).
class EtaView {
public:
  /// Scalar view: every state reads logit 0 of each table.
  static EtaView scalar(double gamma, double lambda, double dgamma, double dlambda);
  /// Constant, non-differentiable view used for validation returns.
  static EtaView constant(double gamma, double lambda);
  /// State-indexed view; state s reads logit s of each table.
  static EtaView per_state(std::vector<double> gamma, std::vector<double> lambda, std::vector<double> dgamma,
                           std::vector<double> dlambda);

  double gamma_at(int state) const { return gamma_[slot(state)]; }
  double lambda_at(int state) const { return lambda_[slot(state)]; }
  double dgamma_dlogit_at(int state) const { return dgamma_[slot(state)]; }
  double dlambda_dlogit_at(int state) const { return dlambda_[slot(state)]; }
  std::size_t logit_index(int state) const { return slot(state); }

  bool differentiable() const { return differentiable_; }
  bool state_dependent() const { return !scalar_; }
  std::size_t num_slots() const { return gamma_.size(); }

private:
  std::size_t slot(int state) const;

  std::vector<double> gamma_, lambda_, dgamma_, dlambda_;
  bool scalar_ = true;
  bool differentiable_ = false;
};

/// Sparse gradient keyed by logit index.
using SparseGrad = std::map<std::size_t, double>;

struct ReturnResult {
  std::vector<double> values;
  std::vector<SparseGrad> dgamma;
  std::vector<SparseGrad> dlambda;
};

/// Truncated n-step return from every step of the segment.
/// Windows that run past the end of the segment bootstrap from its last state.
ReturnResult n_step_return(const Trajectory& traj, std::span<const double> bootstrap_values, const EtaView& eta,
                           std::size_t n);

/// lambda-return by backward recursion, gradients propagated in logit space.
ReturnResult lambda_return(const Trajectory& traj, std::span<const double> bootstrap_values, const EtaView& eta);

/// Off-policy corrected return with clipped importance weights c = min(1, rho).
///
/// The clipped weight enters both in front of each TD error and inside the
/// discount product:
///   G_t = v(S_t) + sum_k c_{t+k} (prod_{j=1..k} gamma_{t+j} c_{t+j}) delta_{t+k}.
/// Only discount gradients are produced.
ReturnResult vtrace_return(const Trajectory& traj, std::span<const double> bootstrap_values, const EtaView& eta,
                           std::span<const double> target_probs);

}  // namespace metagrad
