#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "metagrad/returns.hpp"

namespace metagrad {

/// Linear value function and softmax policy over [observation ; W_eta eta].
///
/// The flat parameter layout used by every gradient in the library is
/// [value weights | policy weights, row-major | embedding matrix, row-major].
/// The embedding block exists only when conditioning is on.
struct AgentParams {
  Eigen::VectorXd value_weights;
  Eigen::MatrixXd policy_weights;  // actions x features
  Eigen::MatrixXd embedding;       // embedding size x 2 (gamma, lambda)
  bool conditioning = false;
  std::size_t obs_dim = 0;

  static constexpr std::size_t kEtaInputs = 2;

  static AgentParams zeros(std::size_t obs_dim, std::size_t num_actions, std::size_t embedding_size,
                           bool conditioning);

  std::size_t num_actions() const { return static_cast<std::size_t>(policy_weights.rows()); }
  std::size_t embedding_size() const { return static_cast<std::size_t>(embedding.rows()); }
  std::size_t feature_dim() const { return obs_dim + (conditioning ? embedding_size() : 0); }
  std::size_t theta_dim() const;

  std::size_t policy_offset() const { return feature_dim(); }
  std::size_t embedding_offset() const { return feature_dim() * (1 + num_actions()); }

  Eigen::VectorXd flatten() const;
  void assign(const Eigen::VectorXd& theta);
  AgentParams plus(const Eigen::VectorXd& delta) const;
};

/// Conditioning input for a state: its (gamma, lambda) sigmoid values.
Eigen::Vector2d conditioning_input(const EtaView& eta, int state);

Eigen::VectorXd features(const AgentParams& ap, const Eigen::VectorXd& obs, const Eigen::Vector2d& eta_in);

double value(const AgentParams& ap, const Eigen::VectorXd& obs, const Eigen::Vector2d& eta_in);

Eigen::VectorXd policy_probs(const AgentParams& ap, const Eigen::VectorXd& obs, const Eigen::Vector2d& eta_in);

Eigen::VectorXd value_grad(const AgentParams& ap, const Eigen::VectorXd& obs, const Eigen::Vector2d& eta_in);

Eigen::VectorXd log_policy_grad(const AgentParams& ap, const Eigen::VectorXd& obs, int action,
                                const Eigen::Vector2d& eta_in);

std::pair<double, Eigen::VectorXd> entropy_and_grad(const AgentParams& ap, const Eigen::VectorXd& obs,
                                                    const Eigen::Vector2d& eta_in);

/// Plain-text checkpoint with a dimension header; values round-trip exactly.
void save_checkpoint(std::ostream& os, const AgentParams& ap);
AgentParams load_checkpoint(std::istream& is);
void save_checkpoint(const std::string& path, const AgentParams& ap);
AgentParams load_checkpoint(const std::string& path);

}  // namespace metagrad
