#include "metagrad/approximators.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "metagrad/common.hpp"

namespace metagrad {

AgentParams AgentParams::zeros(std::size_t obs_dim, std::size_t num_actions, std::size_t embedding_size,
                               bool conditioning) {
  AgentParams ap;
  ap.obs_dim = obs_dim;
  ap.conditioning = conditioning;
  const std::size_t emb = conditioning ? embedding_size : 0;
  const auto fdim = static_cast<Eigen::Index>(obs_dim + emb);
  ap.value_weights = Eigen::VectorXd::Zero(fdim);
  ap.policy_weights = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(num_actions), fdim);
  ap.embedding = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(emb), kEtaInputs);
  return ap;
}

std::size_t AgentParams::theta_dim() const {
  return feature_dim() * (1 + num_actions()) + (conditioning ? embedding_size() * kEtaInputs : 0);
}

Eigen::VectorXd AgentParams::flatten() const {
  Eigen::VectorXd theta(static_cast<Eigen::Index>(theta_dim()));
  const auto f = static_cast<Eigen::Index>(feature_dim());
  theta.head(f) = value_weights;
  Eigen::Index k = f;
  for (Eigen::Index a = 0; a < policy_weights.rows(); ++a) {
    theta.segment(k, f) = policy_weights.row(a).transpose();
    k += f;
  }
  if (conditioning) {
    for (Eigen::Index i = 0; i < embedding.rows(); ++i) {
      for (Eigen::Index j = 0; j < embedding.cols(); ++j) theta[k++] = embedding(i, j);
    }
  }
  return theta;
}

void AgentParams::assign(const Eigen::VectorXd& theta) {
  if (theta.size() != static_cast<Eigen::Index>(theta_dim())) {
    throw Error("parameter vector has " + std::to_string(theta.size()) + " entries, expected " +
                std::to_string(theta_dim()));
  }
  const auto f = static_cast<Eigen::Index>(feature_dim());
  value_weights = theta.head(f);
  Eigen::Index k = f;
  for (Eigen::Index a = 0; a < policy_weights.rows(); ++a) {
    policy_weights.row(a) = theta.segment(k, f).transpose();
    k += f;
  }
  if (conditioning) {
    for (Eigen::Index i = 0; i < embedding.rows(); ++i) {
      for (Eigen::Index j = 0; j < embedding.cols(); ++j) embedding(i, j) = theta[k++];
    }
  }
}

AgentParams AgentParams::plus(const Eigen::VectorXd& delta) const {
  AgentParams out = *this;
  out.assign(flatten() + delta);
  return out;
}

Eigen::Vector2d conditioning_input(const EtaView& eta, int state) {
  return Eigen::Vector2d(eta.gamma_at(state), eta.lambda_at(state));
}

namespace {

void check_obs(const AgentParams& ap, const Eigen::VectorXd& obs) {
  if (static_cast<std::size_t>(obs.size()) != ap.obs_dim) {
    throw Error("observation has dimension " + std::to_string(obs.size()) + ", parameters expect " +
                std::to_string(ap.obs_dim));
  }
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double mx = logits.maxCoeff();
  Eigen::VectorXd p = (logits.array() - mx).exp().matrix();
  return p / p.sum();
}

// Chains a gradient with respect to the policy logits into the flat layout.
Eigen::VectorXd chain_policy_logits(const AgentParams& ap, const Eigen::VectorXd& x, const Eigen::Vector2d& eta_in,
                                    const Eigen::VectorXd& dlogits) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ap.theta_dim()));
  const auto f = static_cast<Eigen::Index>(ap.feature_dim());
  Eigen::Index k = static_cast<Eigen::Index>(ap.policy_offset());
  for (Eigen::Index a = 0; a < dlogits.size(); ++a) {
    g.segment(k, f) = dlogits[a] * x;
    k += f;
  }
  if (ap.conditioning) {
    const auto e = static_cast<Eigen::Index>(ap.embedding_size());
    const Eigen::VectorXd u = ap.policy_weights.rightCols(e).transpose() * dlogits;
    for (Eigen::Index i = 0; i < e; ++i) {
      for (Eigen::Index j = 0; j < 2; ++j) g[k + i * 2 + j] = u[i] * eta_in[j];
    }
  }
  return g;
}

}  // namespace

Eigen::VectorXd features(const AgentParams& ap, const Eigen::VectorXd& obs, const Eigen::Vector2d& eta_in) {
  check_obs(ap, obs);
  if (!ap.conditioning) return obs;
  Eigen::VectorXd x(static_cast<Eigen::Index>(ap.feature_dim()));
  x << obs, ap.embedding * eta_in;
  return x;
}

double value(const AgentParams& ap, const Eigen::VectorXd& obs, const Eigen::Vector2d& eta_in) {
  return ap.value_weights.dot(features(ap, obs, eta_in));
}

Eigen::VectorXd policy_probs(const AgentParams& ap, const Eigen::VectorXd& obs, const Eigen::Vector2d& eta_in) {
  if (ap.num_actions() == 0) throw Error("policy has no actions");
  return softmax(ap.policy_weights * features(ap, obs, eta_in));
}

Eigen::VectorXd value_grad(const AgentParams& ap, const Eigen::VectorXd& obs, const Eigen::Vector2d& eta_in) {
  const Eigen::VectorXd x = features(ap, obs, eta_in);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ap.theta_dim()));
  g.head(x.size()) = x;
  if (ap.conditioning) {
    const auto o = static_cast<Eigen::Index>(ap.obs_dim);
    const auto e = static_cast<Eigen::Index>(ap.embedding_size());
    const auto k = static_cast<Eigen::Index>(ap.embedding_offset());
    for (Eigen::Index i = 0; i < e; ++i) {
      for (Eigen::Index j = 0; j < 2; ++j) g[k + i * 2 + j] = ap.value_weights[o + i] * eta_in[j];
    }
  }
  return g;
}

Eigen::VectorXd log_policy_grad(const AgentParams& ap, const Eigen::VectorXd& obs, int action,
                                const Eigen::Vector2d& eta_in) {
  if (action < 0 || static_cast<std::size_t>(action) >= ap.num_actions()) {
    throw Error("action " + std::to_string(action) + " outside [0, " + std::to_string(ap.num_actions()) + ")");
  }
  const Eigen::VectorXd x = features(ap, obs, eta_in);
  Eigen::VectorXd score = -softmax(ap.policy_weights * x);
  score[action] += 1.0;
  return chain_policy_logits(ap, x, eta_in, score);
}

std::pair<double, Eigen::VectorXd> entropy_and_grad(const AgentParams& ap, const Eigen::VectorXd& obs,
                                                    const Eigen::Vector2d& eta_in) {
  if (ap.num_actions() == 0) throw Error("policy has no actions");
  const Eigen::VectorXd x = features(ap, obs, eta_in);
  const Eigen::VectorXd logits = ap.policy_weights * x;
  const Eigen::VectorXd p = softmax(logits);
  // log p from the shifted logits avoids log(0) on saturated policies.
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  const Eigen::VectorXd logp = (logits.array() - lse).matrix();
  const double h = -p.dot(logp);
  const Eigen::VectorXd dlogits = -(p.array() * (logp.array() + h)).matrix();
  return {h, chain_policy_logits(ap, x, eta_in, dlogits)};
}

void save_checkpoint(std::ostream& os, const AgentParams& ap) {
  os << "metagrad-params 1\n";
  os << "obs_dim " << ap.obs_dim << " actions " << ap.num_actions() << " embedding " << ap.embedding_size()
     << " conditioning " << (ap.conditioning ? 1 : 0) << "\n";
  const Eigen::VectorXd theta = ap.flatten();
  os << "theta " << theta.size() << "\n";
  char buf[40];
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%a", theta[i]);
    os << buf << '\n';
  }
}

AgentParams load_checkpoint(std::istream& is) {
  std::string tag;
  int version = 0;
  if (!(is >> tag >> version) || tag != "metagrad-params" || version != 1) throw Error("not a parameter checkpoint");
  std::size_t obs_dim = 0, actions = 0, embedding = 0;
  int cond = 0;
  std::string k1, k2, k3, k4;
  if (!(is >> k1 >> obs_dim >> k2 >> actions >> k3 >> embedding >> k4 >> cond) || k1 != "obs_dim" ||
      k2 != "actions" || k3 != "embedding" || k4 != "conditioning") {
    throw Error("malformed checkpoint header");
  }
  AgentParams ap = AgentParams::zeros(obs_dim, actions, embedding, cond != 0);
  std::size_t n = 0;
  if (!(is >> tag >> n) || tag != "theta" || n != ap.theta_dim()) throw Error("checkpoint parameter count mismatch");
  Eigen::VectorXd theta(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    std::string tok;
    if (!(is >> tok)) throw Error("checkpoint truncated");
    theta[static_cast<Eigen::Index>(i)] = std::strtod(tok.c_str(), nullptr);
  }
  ap.assign(theta);
  return ap;
}

void save_checkpoint(const std::string& path, const AgentParams& ap) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write checkpoint " + path);
  save_checkpoint(os, ap);
}

AgentParams load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read checkpoint " + path);
  return load_checkpoint(is);
}

}  // namespace metagrad
