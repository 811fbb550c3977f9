#include "metagrad/returns.hpp"

#include <cmath>
#include <string>

#include "metagrad/common.hpp"

namespace metagrad {

void Trajectory::validate() const {
  if (rewards.empty()) throw Error("trajectory has no transitions");
  if (state_ids.size() != rewards.size() + 1) {
    throw Error("trajectory has " + std::to_string(state_ids.size()) + " states for " +
                std::to_string(rewards.size()) + " rewards");
  }
  if (!observations.empty() && observations.size() != state_ids.size()) {
    throw Error("trajectory observation count does not match state count");
  }
  if (behavior_probs.size() != rewards.size()) throw Error("trajectory behavior_probs length mismatch");
  if (!actions.empty() && actions.size() != rewards.size()) throw Error("trajectory actions length mismatch");
  for (std::size_t k = 0; k < behavior_probs.size(); ++k) {
    const double p = behavior_probs[k];
    if (!(p > 0.0 && p <= 1.0)) {
      throw Error("behavior probability at step " + std::to_string(k) + " outside (0,1]: " + std::to_string(p));
    }
  }
}

EtaView EtaView::scalar(double gamma, double lambda, double dgamma, double dlambda) {
  EtaView v;
  v.gamma_ = {gamma};
  v.lambda_ = {lambda};
  v.dgamma_ = {dgamma};
  v.dlambda_ = {dlambda};
  v.scalar_ = true;
  v.differentiable_ = true;
  return v;
}

EtaView EtaView::constant(double gamma, double lambda) {
  EtaView v = scalar(gamma, lambda, 0.0, 0.0);
  v.differentiable_ = false;
  return v;
}

EtaView EtaView::per_state(std::vector<double> gamma, std::vector<double> lambda, std::vector<double> dgamma,
                           std::vector<double> dlambda) {
  const std::size_t n = gamma.size();
  if (n == 0 || lambda.size() != n || dgamma.size() != n || dlambda.size() != n) {
    throw Error("per-state eta tables must be non-empty and equally sized");
  }
  EtaView v;
  v.gamma_ = std::move(gamma);
  v.lambda_ = std::move(lambda);
  v.dgamma_ = std::move(dgamma);
  v.dlambda_ = std::move(dlambda);
  v.scalar_ = false;
  v.differentiable_ = true;
  return v;
}

std::size_t EtaView::slot(int state) const {
  if (scalar_) return 0;
  if (state < 0 || static_cast<std::size_t>(state) >= gamma_.size()) {
    throw Error("state id " + std::to_string(state) + " outside eta table of size " + std::to_string(gamma_.size()));
  }
  return static_cast<std::size_t>(state);
}

namespace {

void check_bootstrap(const Trajectory& traj, std::span<const double> bootstrap_values) {
  traj.validate();
  if (bootstrap_values.size() != traj.state_ids.size()) {
    throw Error("expected " + std::to_string(traj.state_ids.size()) + " bootstrap values, got " +
                std::to_string(bootstrap_values.size()));
  }
  for (std::size_t k = 0; k < bootstrap_values.size(); ++k) {
    if (!std::isfinite(bootstrap_values[k])) throw Error("non-finite bootstrap value at step " + std::to_string(k));
  }
}

// Value used when bootstrapping from state k; a terminal final state is worth 0.
double bootstrap_at(const Trajectory& traj, std::span<const double> bootstrap_values, std::size_t k) {
  if (k + 1 == traj.state_ids.size() && traj.terminal) return 0.0;
  return bootstrap_values[k];
}

void axpy(SparseGrad& dst, double scale, const SparseGrad& src) {
  if (scale == 0.0) return;
  for (const auto& [idx, val] : src) dst[idx] += scale * val;
}

void check_finite(double x, const char* what, std::size_t t) {
  if (!std::isfinite(x)) throw Error(std::string("non-finite ") + what + " at step " + std::to_string(t));
}

}  // namespace

ReturnResult n_step_return(const Trajectory& traj, std::span<const double> bootstrap_values, const EtaView& eta,
                           std::size_t n) {
  check_bootstrap(traj, bootstrap_values);
  const std::size_t T = traj.length();
  if (n == 0) throw Error("n-step return needs n >= 1");
  if (n > T) {
    throw Error("n-step return with n=" + std::to_string(n) + " exceeds segment of " + std::to_string(T) +
                " transitions");
  }
  ReturnResult out;
  out.values.resize(T);
  out.dgamma.resize(T);
  out.dlambda.resize(T);

  std::vector<double> inner;  // inner[i] = return suffix after i discounts
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t m = std::min(n, T - t);
    inner.assign(m + 1, 0.0);
    inner[m] = bootstrap_at(traj, bootstrap_values, t + m);
    for (std::size_t i = m; i >= 1; --i) {
      inner[i - 1] = traj.rewards[t + i - 1] + eta.gamma_at(traj.state_ids[t + i]) * inner[i];
    }
    out.values[t] = inner[0];
    check_finite(inner[0], "n-step return", t);
    if (!eta.differentiable()) continue;
    double prefix = 1.0;
    for (std::size_t i = 1; i <= m; ++i) {
      const int s = traj.state_ids[t + i];
      const double slope = eta.dgamma_dlogit_at(s);
      if (slope != 0.0) out.dgamma[t][eta.logit_index(s)] += prefix * inner[i] * slope;
      prefix *= eta.gamma_at(s);
    }
  }
  return out;
}

ReturnResult lambda_return(const Trajectory& traj, std::span<const double> bootstrap_values, const EtaView& eta) {
  check_bootstrap(traj, bootstrap_values);
  const std::size_t T = traj.length();
  const bool diff = eta.differentiable();
  ReturnResult out;
  out.values.resize(T);
  out.dgamma.resize(T);
  out.dlambda.resize(T);

  double next = bootstrap_at(traj, bootstrap_values, T);
  for (std::size_t t = T; t-- > 0;) {
    const int s = traj.state_ids[t + 1];
    const double gamma = eta.gamma_at(s);
    const double lambda = eta.lambda_at(s);
    const double v_next = bootstrap_at(traj, bootstrap_values, t + 1);
    const double g = traj.rewards[t] + gamma * (1.0 - lambda) * v_next + gamma * lambda * next;
    check_finite(g, "lambda-return", t);
    out.values[t] = g;

    if (diff) {
      if (t + 1 < T) {
        axpy(out.dgamma[t], gamma * lambda, out.dgamma[t + 1]);
        axpy(out.dlambda[t], gamma * lambda, out.dlambda[t + 1]);
      }
      const double dg_dgamma = (1.0 - lambda) * v_next + lambda * next;
      const double dg_dlambda = gamma * (next - v_next);
      const double sg = eta.dgamma_dlogit_at(s);
      const double sl = eta.dlambda_dlogit_at(s);
      if (sg != 0.0) out.dgamma[t][eta.logit_index(s)] += dg_dgamma * sg;
      if (sl != 0.0) out.dlambda[t][eta.logit_index(s)] += dg_dlambda * sl;
    }
    next = g;
  }
  return out;
}

ReturnResult vtrace_return(const Trajectory& traj, std::span<const double> bootstrap_values, const EtaView& eta,
                           std::span<const double> target_probs) {
  check_bootstrap(traj, bootstrap_values);
  const std::size_t T = traj.length();
  if (traj.actions.size() != T) throw Error("v-trace return needs one action per transition");
  if (target_probs.size() != traj.actions.size()) {
    throw Error("v-trace target_probs length " + std::to_string(target_probs.size()) + " does not match " +
                std::to_string(traj.actions.size()) + " actions");
  }
  std::vector<double> c(T + 1, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const double mu = traj.behavior_probs[t];
    if (!(mu > 0.0)) throw Error("behavior probability is zero at step " + std::to_string(t));
    c[t] = std::min(1.0, target_probs[t] / mu);
  }

  const bool diff = eta.differentiable();
  ReturnResult out;
  out.values.resize(T);
  out.dgamma.resize(T);
  out.dlambda.resize(T);

  double acc_next = 0.0;  // correction sum beyond the end of the segment
  for (std::size_t t = T; t-- > 0;) {
    const int s = traj.state_ids[t + 1];
    const double gamma = eta.gamma_at(s);
    const double v_here = bootstrap_values[t];
    const double v_next = bootstrap_at(traj, bootstrap_values, t + 1);
    const double delta = traj.rewards[t] + gamma * v_next - v_here;
    const double acc = c[t] * delta + gamma * c[t + 1] * acc_next;
    out.values[t] = v_here + acc;
    check_finite(out.values[t], "v-trace return", t);

    if (diff) {
      if (t + 1 < T) axpy(out.dgamma[t], gamma * c[t + 1], out.dgamma[t + 1]);
      const double sg = eta.dgamma_dlogit_at(s);
      if (sg != 0.0) out.dgamma[t][eta.logit_index(s)] += (c[t] * v_next + c[t + 1] * acc_next) * sg;
    }
    acc_next = acc;
  }
  return out;
}

}  // namespace metagrad
