#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "metagrad/returns.hpp"

namespace metagrad {

/// Logits of the discount and bootstrapping gates.
///
/// Scalar mode keeps one logit per gate; state-dependent mode keeps one per
/// environment state. Only adapted gates get columns in the meta-trace, in the
/// order [gamma logits..., lambda logits...].
struct MetaParams {
  std::vector<double> gamma_logits;
  std::vector<double> lambda_logits;
  bool adapt_gamma = false;
  bool adapt_lambda = false;
  bool state_dependent = false;

  static MetaParams scalar(double gamma_logit, double lambda_logit, bool adapt_gamma, bool adapt_lambda);
  static MetaParams per_state(std::size_t num_states, double gamma_logit, double lambda_logit, bool adapt_gamma,
                              bool adapt_lambda);

  std::size_t num_slots() const { return gamma_logits.size(); }
  std::size_t active_dim() const;
  std::optional<std::size_t> gamma_column(std::size_t slot) const;
  std::optional<std::size_t> lambda_column(std::size_t slot) const;

  double gamma(std::size_t slot) const;
  double lambda(std::size_t slot) const;
};

/// Accumulator z approximating d(theta)/d(eta), one row per parameter.
struct MetaTrace {
  Eigen::MatrixXd entries;
  double mu = 0.0;

  static MetaTrace zeros(std::size_t theta_dim, std::size_t eta_dim, double mu);
};

enum class MetaOptimizerKind { Sgd, Adam };

struct MetaOptimizerState {
  MetaOptimizerKind kind = MetaOptimizerKind::Adam;
  double beta = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  Eigen::VectorXd first_moment;
  Eigen::VectorXd second_moment;
  long step = 0;

  static MetaOptimizerState make(MetaOptimizerKind kind, double beta, std::size_t eta_dim);
};

/// Sigmoid values and slopes for every state.
EtaView eta_view(const MetaParams& mp);

/// Same values, but frozen gates report zero slope so no gradient is tracked.
EtaView active_eta_view(const MetaParams& mp);

/// z' = mu z + df/deta.
MetaTrace trace_update(const MetaTrace& z, const Eigen::MatrixXd& df_deta);

/// Chain rule through the trace: (dJ'/dtheta')^T z.
Eigen::VectorXd meta_gradient(const Eigen::VectorXd& dJ_dtheta, const MetaTrace& z);

/// Applies one optimizer step to the adapted logits given a meta-gradient.
MetaParams apply_meta_gradient(const MetaParams& mp, MetaOptimizerState& opt, const Eigen::VectorXd& grad);

MetaParams meta_step(const MetaParams& mp, MetaOptimizerState& opt, const Eigen::VectorXd& dJ_dtheta,
                     const MetaTrace& z);

/// Jacobians of one inner update f(tau, theta, eta).
struct InnerStepJacobians {
  Eigen::MatrixXd df_dtheta;
  Eigen::MatrixXd df_deta;
};

/// Exact d(theta)/d(eta) through a sequence of updates, accumulated forward as
/// (I + df/dtheta) dtheta/deta + df/deta. Intended as a test oracle.
Eigen::MatrixXd exact_forward_accumulation(const std::vector<InnerStepJacobians>& history, std::size_t theta_dim,
                                           std::size_t eta_dim, std::size_t dim_cap = 4096);

}  // namespace metagrad
