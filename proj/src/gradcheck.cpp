#include "metagrad/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>

#include "metagrad/common.hpp"

namespace metagrad {

namespace {

// Logit table and slot behind one adapted column.
MetaParams shifted(const MetaParams& mp, std::size_t col, double d) {
  MetaParams out = mp;
  const std::size_t n = mp.num_slots();
  if (mp.adapt_gamma && col < n) {
    out.gamma_logits[col] += d;
  } else {
    out.lambda_logits[col - (mp.adapt_gamma ? n : 0)] += d;
  }
  return out;
}

double max_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.rows(); ++i) {
    for (Eigen::Index j = 0; j < analytic.cols(); ++j) worst = std::max(worst, rel_error(analytic(i, j), numeric(i, j)));
  }
  return worst;
}

template <typename F>
Eigen::MatrixXd central_columns(const MetaParams& mp, double h, F&& eval) {
  const auto dim = static_cast<Eigen::Index>(mp.active_dim());
  Eigen::MatrixXd out;
  for (Eigen::Index c = 0; c < dim; ++c) {
    const Eigen::VectorXd up = eval(shifted(mp, static_cast<std::size_t>(c), h));
    const Eigen::VectorXd down = eval(shifted(mp, static_cast<std::size_t>(c), -h));
    if (out.size() == 0) out = Eigen::MatrixXd::Zero(up.size(), dim);
    out.col(c) = (up - down) / (2.0 * h);
  }
  return out;
}

// TD(lambda) step with the return gates taken from `returns` and everything
// else (bootstrap values, conditioning inputs) pinned to `fixed`.
Eigen::VectorXd td_delta(std::span<const Trajectory> trajs, const AgentParams& ap, const EtaView& returns,
                         const EtaView& fixed, double alpha) {
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ap.theta_dim()));
  for (const Trajectory& traj : trajs) {
    const std::vector<double> boot = bootstrap_values(ap, traj, fixed);
    const ReturnResult ret = lambda_return(traj, boot, returns);
    for (std::size_t t = 0; t < traj.length(); ++t) {
      delta += alpha * (ret.values[t] - boot[t]) *
               value_grad(ap, traj.observations[t], conditioning_input(fixed, traj.state_ids[t]));
    }
  }
  return delta;
}

std::vector<double> target_probs(const AgentParams& ap, const Trajectory& traj, const EtaView& cond) {
  std::vector<double> out(traj.length());
  for (std::size_t t = 0; t < traj.length(); ++t) {
    out[t] = policy_probs(ap, traj.observations[t], conditioning_input(cond, traj.state_ids[t]))[traj.actions[t]];
  }
  return out;
}

bool uses_vtrace(const Trajectory& traj, const std::vector<double>& target, ReturnKind kind) {
  if (kind != ReturnKind::Auto) return kind == ReturnKind::VTrace;
  for (std::size_t t = 0; t < target.size(); ++t) {
    if (target[t] != traj.behavior_probs[t]) return true;
  }
  return false;
}

Eigen::VectorXd a2c_delta(std::span<const Trajectory> trajs, const AgentParams& ap, const EtaView& returns,
                          const EtaView& fixed, const A2cCoefficients& coef) {
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ap.theta_dim()));
  for (const Trajectory& traj : trajs) {
    const std::vector<double> boot = bootstrap_values(ap, traj, fixed);
    const std::vector<double> target = target_probs(ap, traj, fixed);
    const ReturnResult ret = uses_vtrace(traj, target, coef.returns) ? vtrace_return(traj, boot, returns, target)
                                                                     : lambda_return(traj, boot, returns);
    for (std::size_t t = 0; t < traj.length(); ++t) {
      const Eigen::Vector2d in = conditioning_input(fixed, traj.state_ids[t]);
      const double adv = ret.values[t] - boot[t];
      delta += coef.alpha * (adv * log_policy_grad(ap, traj.observations[t], traj.actions[t], in) +
                             coef.value_coef * adv * value_grad(ap, traj.observations[t], in) +
                             coef.entropy_coef * entropy_and_grad(ap, traj.observations[t], in).second);
    }
  }
  return delta;
}

// Random instance generators.

AgentParams random_params(Rng& rng, std::size_t obs_dim, std::size_t actions, std::size_t emb, bool cond,
                          double scale) {
  AgentParams ap = AgentParams::zeros(obs_dim, actions, emb, cond);
  Eigen::VectorXd theta(static_cast<Eigen::Index>(ap.theta_dim()));
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] = scale * rng.normal();
  ap.assign(theta);
  return ap;
}

MetaParams random_meta(Rng& rng, std::size_t states, bool state_dependent) {
  MetaParams mp = state_dependent ? MetaParams::per_state(states, 0.0, 0.0, true, true)
                                  : MetaParams::scalar(0.0, 0.0, true, true);
  for (auto& l : mp.gamma_logits) l = rng.uniform(-2.0, 2.0);
  for (auto& l : mp.lambda_logits) l = rng.uniform(-2.0, 2.0);
  return mp;
}

Trajectory random_trajectory(Rng& rng, std::size_t states, std::size_t obs_dim, bool tabular, std::size_t actions,
                             std::size_t length, bool terminal, bool off_policy) {
  Trajectory tr;
  for (std::size_t k = 0; k <= length; ++k) {
    const int s = static_cast<int>(rng.index(states));
    tr.state_ids.push_back(s);
    Eigen::VectorXd x(static_cast<Eigen::Index>(obs_dim));
    if (tabular) {
      x.setZero();
      x[s] = 1.0;
    } else {
      for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = rng.normal();
    }
    tr.observations.push_back(std::move(x));
  }
  for (std::size_t t = 0; t < length; ++t) {
    tr.rewards.push_back(rng.normal());
    if (actions > 0) tr.actions.push_back(static_cast<int>(rng.index(actions)));
    tr.behavior_probs.push_back(off_policy ? rng.uniform(0.2, 1.0) : 1.0);
  }
  tr.terminal = terminal;
  return tr;
}

// Replaces behavior probabilities with the current policy's, making the segment on-policy.
void make_on_policy(Trajectory& tr, const AgentParams& ap, const EtaView& cond) {
  tr.behavior_probs = target_probs(ap, tr, cond);
}

CheckResult finish(std::string name, std::string formula, std::size_t n, double err, double tol) {
  return CheckResult{std::move(name), std::move(formula), n, err, tol, err < tol};
}

// Gradient of each return entry with respect to each adapted logit, analytic vs numeric.
double return_gradient_error(const Trajectory& traj, const MetaParams& mp, double h,
                             const std::function<ReturnResult(const EtaView&)>& fn) {
  const ReturnResult ret = fn(eta_view(mp));
  const auto T = static_cast<Eigen::Index>(traj.length());
  Eigen::MatrixXd analytic = Eigen::MatrixXd::Zero(T, static_cast<Eigen::Index>(mp.active_dim()));
  for (Eigen::Index t = 0; t < T; ++t) {
    for (const auto& [slot, d] : ret.dgamma[t]) analytic(t, static_cast<Eigen::Index>(*mp.gamma_column(slot))) += d;
    for (const auto& [slot, d] : ret.dlambda[t]) analytic(t, static_cast<Eigen::Index>(*mp.lambda_column(slot))) += d;
  }
  const Eigen::MatrixXd numeric = central_columns(mp, h, [&](const MetaParams& m) {
    const ReturnResult r = fn(eta_view(m));
    return Eigen::Map<const Eigen::VectorXd>(r.values.data(), T).eval();
  });
  return max_error(analytic, numeric);
}

std::vector<double> random_values(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

CheckResult check_lambda_return(const GradcheckOptions& o, Rng rng) {
  double worst = 0.0;
  for (std::size_t i = 0; i < o.instances; ++i) {
    const std::size_t S = 1 + rng.index(6);
    const MetaParams mp = random_meta(rng, S, rng.uniform() < 0.7);
    const Trajectory tr = random_trajectory(rng, S, S, true, 0, 1 + rng.index(20), rng.uniform() < 0.5, false);
    const std::vector<double> boot = random_values(rng, tr.state_ids.size());
    worst = std::max(worst, return_gradient_error(tr, mp, o.step,
                                                  [&](const EtaView& e) { return lambda_return(tr, boot, e); }));
  }
  return finish("lambda_return_gradients", "g_t = R_t+1 + gamma (1 - lambda) v(S_t+1) + gamma lambda g_t+1",
                o.instances, worst, o.tolerance);
}

CheckResult check_n_step(const GradcheckOptions& o, Rng rng) {
  double worst = 0.0;
  for (std::size_t i = 0; i < o.instances; ++i) {
    const std::size_t S = 1 + rng.index(6);
    MetaParams mp = random_meta(rng, S, rng.uniform() < 0.7);
    mp.adapt_lambda = false;
    const std::size_t T = 1 + rng.index(12);
    const Trajectory tr = random_trajectory(rng, S, S, true, 0, T, rng.uniform() < 0.5, false);
    const std::vector<double> boot = random_values(rng, tr.state_ids.size());
    const std::size_t n = 1 + rng.index(T);
    worst = std::max(worst, return_gradient_error(tr, mp, o.step,
                                                  [&](const EtaView& e) { return n_step_return(tr, boot, e, n); }));
  }
  return finish("n_step_return_gradients", "g_t = sum_k gamma^k R_t+k+1 + gamma^n v(S_t+n)", o.instances, worst,
                o.tolerance);
}

CheckResult check_vtrace_gradient(const GradcheckOptions& o, Rng rng) {
  double worst = 0.0;
  for (std::size_t i = 0; i < o.instances; ++i) {
    const std::size_t S = 1 + rng.index(6);
    MetaParams mp = random_meta(rng, S, rng.uniform() < 0.7);
    mp.adapt_lambda = false;
    const Trajectory tr = random_trajectory(rng, S, S, true, 3, 1 + rng.index(15), rng.uniform() < 0.5, true);
    const std::vector<double> boot = random_values(rng, tr.state_ids.size());
    std::vector<double> target(tr.length());
    for (auto& p : target) p = rng.uniform(0.05, 1.0);
    worst = std::max(worst, return_gradient_error(tr, mp, o.step, [&](const EtaView& e) {
                       return vtrace_return(tr, boot, e, target);
                     }));
  }
  return finish("vtrace_return_gradients", "A_t = c_t delta_t + gamma c_t+1 A_t+1", o.instances, worst,
                o.tolerance);
}

CheckResult check_td_update(const GradcheckOptions& o, Rng rng) {
  double worst = 0.0;
  for (std::size_t i = 0; i < o.instances; ++i) {
    const std::size_t S = 1 + rng.index(5);
    const std::size_t obs = 1 + rng.index(4);
    const bool cond = rng.uniform() < 0.5;
    const AgentParams ap = random_params(rng, obs, 0, 3, cond, 0.5);
    const MetaParams mp = random_meta(rng, S, rng.uniform() < 0.7);
    std::vector<Trajectory> trajs;
    const std::size_t n = 1 + rng.index(2);
    for (std::size_t k = 0; k < n; ++k) {
      trajs.push_back(random_trajectory(rng, S, obs, false, 0, 1 + rng.index(12), rng.uniform() < 0.5, false));
    }
    worst = std::max(worst, check_td_update_meta_jacobian(trajs, ap, mp, rng.uniform(0.01, 0.5), o.step));
  }
  return finish("td_lambda_update_meta_jacobian", "f = alpha (g - v) grad v", o.instances, worst, o.tolerance);
}

CheckResult check_a2c_update(const GradcheckOptions& o, Rng rng) {
  double worst = 0.0;
  for (std::size_t i = 0; i < o.instances; ++i) {
    const std::size_t S = 1 + rng.index(5);
    const std::size_t obs = 1 + rng.index(4);
    const bool cond = rng.uniform() < 0.5;
    const AgentParams ap = random_params(rng, obs, 2 + rng.index(3), 3, cond, 0.5);
    const MetaParams mp = random_meta(rng, S, rng.uniform() < 0.7);
    A2cCoefficients coef;
    coef.alpha = rng.uniform(0.01, 0.5);
    coef.value_coef = rng.uniform(0.1, 1.0);
    coef.entropy_coef = rng.uniform(0.0, 0.1);
    const bool off = rng.uniform() < 0.5;
    Trajectory tr = random_trajectory(rng, S, obs, false, ap.num_actions(), 1 + rng.index(12), rng.uniform() < 0.5,
                                      true);
    if (!off) make_on_policy(tr, ap, eta_view(mp));
    worst = std::max(worst, check_a2c_update_meta_jacobian({&tr, 1}, ap, mp, coef, o.step));
  }
  return finish("actor_critic_update_meta_jacobian", "f = alpha (g - v) (grad log pi + b grad v) + alpha c grad H",
                o.instances, worst, o.tolerance);
}

// dJ/dtheta against differences of J with the targets frozen at the nominal parameters.
CheckResult check_objective(const GradcheckOptions& o, Rng rng, bool policy) {
  double worst = 0.0;
  for (std::size_t i = 0; i < o.instances; ++i) {
    const std::size_t S = 1 + rng.index(5);
    const std::size_t obs = 1 + rng.index(4);
    const bool cond = rng.uniform() < 0.5;
    const AgentParams ap = random_params(rng, obs, policy ? 2 + rng.index(3) : 0, 3, cond, 0.5);
    const MetaParams mp = random_meta(rng, S, true);
    const EtaView view = eta_view(mp);
    ValidationSpec vs;
    vs.gamma_prime = rng.uniform(0.5, 1.0);
    vs.lambda_prime = rng.uniform(0.5, 1.0);
    std::vector<Trajectory> val;
    const std::size_t B = 1 + rng.index(3);
    for (std::size_t b = 0; b < B; ++b) {
      val.push_back(random_trajectory(rng, S, obs, false, ap.num_actions(), 1 + rng.index(10), rng.uniform() < 0.5,
                                      false));
    }
    const MetaObjective obj = policy ? pg_meta_objective_grad(val, ap, vs, view) : mse_meta_objective_grad(val, ap, vs, view);

    std::vector<std::vector<double>> targets;
    for (const auto& tr : val) targets.push_back(lambda_return(tr, bootstrap_values(ap, tr, view), vs.reference_eta()).values);
    auto J = [&](const AgentParams& p) {
      double sum = 0.0;
      for (std::size_t b = 0; b < val.size(); ++b) {
        const Trajectory& tr = val[b];
        const std::vector<double> nominal = bootstrap_values(ap, tr, view);
        for (std::size_t t = 0; t < tr.length(); ++t) {
          const Eigen::Vector2d in = conditioning_input(view, tr.state_ids[t]);
          if (policy) {
            const double adv = targets[b][t] - nominal[t];
            sum -= adv * std::log(policy_probs(p, tr.observations[t], in)[tr.actions[t]]);
          } else {
            const double err = targets[b][t] - value(p, tr.observations[t], in);
            sum += err * err;
          }
        }
      }
      return sum / static_cast<double>(val.size());
    };
    const Eigen::VectorXd theta = ap.flatten();
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(theta.size());
      e[k] = o.step;
      const double fd = (J(ap.plus(e)) - J(ap.plus(-e))) / (2.0 * o.step);
      worst = std::max(worst, rel_error(obj.grad[k], fd));
    }
  }
  if (policy) {
    return finish("policy_gradient_objective", "J' = -(g' - v') log pi", o.instances, worst, o.tolerance);
  }
  return finish("squared_error_objective", "J' = (g' - v')^2", o.instances, worst, o.tolerance);
}

// Meta-gradient through one inner update versus differences of the validation
// objective evaluated at theta + f(tau, theta, eta). Targets stay frozen.
CheckResult check_one_step(const GradcheckOptions& o, Rng rng, bool policy) {
  double worst = 0.0;
  for (std::size_t i = 0; i < o.instances; ++i) {
    const std::size_t S = 2 + rng.index(4);
    const AgentParams ap = random_params(rng, S, policy ? 2 + rng.index(2) : 0, 0, false, 0.5);
    const MetaParams mp = random_meta(rng, S, rng.uniform() < 0.7);
    const std::size_t A = ap.num_actions();
    ValidationSpec vs;
    vs.gamma_prime = 1.0;
    vs.lambda_prime = 1.0;
    const Trajectory tau = random_trajectory(rng, S, S, true, A, 2 + rng.index(8), true, false);
    std::vector<Trajectory> val;
    for (std::size_t b = 0; b < 3; ++b) val.push_back(random_trajectory(rng, S, S, true, A, 2 + rng.index(8), true, false));

    A2cCoefficients coef;
    coef.alpha = 0.1;
    coef.returns = ReturnKind::Lambda;
    auto update = [&](const MetaParams& m) {
      return policy ? a2c_inner_update({&tau, 1}, ap, m, coef, true) : td_lambda_inner_update({&tau, 1}, ap, m, 0.1, true);
    };
    const InnerUpdateResult res = update(mp);
    const EtaView ref = vs.reference_eta();
    const MetaObjective obj = policy ? pg_meta_objective_grad(val, res.new_params, vs, ref)
                                     : mse_meta_objective_grad(val, res.new_params, vs, ref);
    MetaOptimizerState sgd = MetaOptimizerState::make(MetaOptimizerKind::Sgd, 1.0, mp.active_dim());
    const MetaTrace z = trace_update(MetaTrace::zeros(ap.theta_dim(), mp.active_dim(), 0.0), res.df_deta);
    const MetaParams stepped = meta_step(mp, sgd, obj.grad, z);

    std::vector<std::vector<double>> targets, nominal;
    for (const auto& tr : val) {
      nominal.push_back(bootstrap_values(res.new_params, tr, ref));
      targets.push_back(lambda_return(tr, nominal.back(), ref).values);
    }
    auto J = [&](const MetaParams& m) {
      const AgentParams p = update(m).new_params;
      double sum = 0.0;
      for (std::size_t b = 0; b < val.size(); ++b) {
        for (std::size_t t = 0; t < val[b].length(); ++t) {
          const Eigen::Vector2d in = conditioning_input(ref, val[b].state_ids[t]);
          if (policy) {
            sum -= (targets[b][t] - nominal[b][t]) *
                   std::log(policy_probs(p, val[b].observations[t], in)[val[b].actions[t]]);
          } else {
            const double err = targets[b][t] - value(p, val[b].observations[t], in);
            sum += err * err;
          }
        }
      }
      return Eigen::VectorXd::Constant(1, sum / static_cast<double>(val.size()));
    };
    const Eigen::MatrixXd numeric = central_columns(mp, o.step, J);
    for (std::size_t c = 0; c < mp.active_dim(); ++c) {
      const std::size_t n = mp.num_slots();
      const bool is_gamma = mp.adapt_gamma && c < n;
      const std::size_t slot = is_gamma ? c : c - (mp.adapt_gamma ? n : 0);
      const double moved = is_gamma ? stepped.gamma_logits[slot] - mp.gamma_logits[slot]
                                    : stepped.lambda_logits[slot] - mp.lambda_logits[slot];
      worst = std::max(worst, rel_error(moved, -numeric(0, static_cast<Eigen::Index>(c))));
    }
  }
  if (policy) {
    return finish("one_step_meta_gradient_actor_critic", "d eta = -beta dJ'(theta + f(tau theta eta))/d eta",
                  o.instances, worst, o.meta_tolerance);
  }
  return finish("one_step_meta_gradient_td", "d eta = -beta dJ'(theta + f(tau theta eta))/d eta", o.instances, worst,
                o.meta_tolerance);
}

CheckResult check_vtrace_reduction(const GradcheckOptions& o, Rng rng) {
  double worst = 0.0;
  for (std::size_t i = 0; i < o.reduction_instances; ++i) {
    const std::size_t S = 1 + rng.index(6);
    MetaParams mp = random_meta(rng, S, rng.uniform() < 0.7);
    for (auto& l : mp.lambda_logits) l = kLogitClamp;
    std::vector<double> g(S), one(S, 1.0), zero(S, 0.0);
    const EtaView base = eta_view(mp);
    for (std::size_t s = 0; s < S; ++s) g[s] = base.gamma_at(static_cast<int>(s));
    const EtaView eta = EtaView::per_state(g, one, zero, zero);
    Trajectory tr = random_trajectory(rng, S, S, true, 3, 1 + rng.index(20), true, true);
    const std::vector<double> boot = random_values(rng, tr.state_ids.size());
    const std::vector<double> target = tr.behavior_probs;
    const ReturnResult vt = vtrace_return(tr, boot, eta, target);
    const ReturnResult lr = lambda_return(tr, boot, eta);
    for (std::size_t t = 0; t < tr.length(); ++t) worst = std::max(worst, rel_error(vt.values[t], lr.values[t]));
  }
  return finish("vtrace_on_policy_reduction", "v-trace with pi = mu equals the lambda = 1 return",
                o.reduction_instances, worst, o.reduction_tolerance);
}

}  // namespace

double check_td_update_meta_jacobian(std::span<const Trajectory> trajs, const AgentParams& ap, const MetaParams& mp,
                                     double alpha, double step) {
  if (mp.active_dim() == 0) return 0.0;
  const InnerUpdateResult res = td_lambda_inner_update(trajs, ap, mp, alpha, true);
  const EtaView fixed = eta_view(mp);
  const Eigen::MatrixXd numeric = central_columns(
      mp, step, [&](const MetaParams& m) { return td_delta(trajs, ap, eta_view(m), fixed, alpha); });
  return max_error(res.df_deta, numeric);
}

double check_a2c_update_meta_jacobian(std::span<const Trajectory> trajs, const AgentParams& ap, const MetaParams& mp,
                                      const A2cCoefficients& coef, double step) {
  if (mp.active_dim() == 0) return 0.0;
  const InnerUpdateResult res = a2c_inner_update(trajs, ap, mp, coef, true);
  const EtaView fixed = eta_view(mp);
  const Eigen::MatrixXd numeric = central_columns(
      mp, step, [&](const MetaParams& m) { return a2c_delta(trajs, ap, eta_view(m), fixed, coef); });
  return max_error(res.df_deta, numeric);
}

std::vector<CheckResult> run_gradcheck_suite(const GradcheckOptions& opts) {
  const Rng root(opts.seed);
  return {
      check_lambda_return(opts, root.split("lambda_return")),
      check_n_step(opts, root.split("n_step")),
      check_vtrace_gradient(opts, root.split("vtrace")),
      check_td_update(opts, root.split("td_update")),
      check_a2c_update(opts, root.split("a2c_update")),
      check_objective(opts, root.split("mse_objective"), false),
      check_objective(opts, root.split("pg_objective"), true),
      check_one_step(opts, root.split("one_step_td"), false),
      check_one_step(opts, root.split("one_step_a2c"), true),
      check_vtrace_reduction(opts, root.split("reduction")),
  };
}

void write_gradcheck_report(std::ostream& os, const std::vector<CheckResult>& results) {
  os << "check,formula,instances,max_rel_error,tolerance,result\n";
  for (const auto& r : results) {
    std::ostringstream err, tol;
    err << std::scientific << std::setprecision(3) << r.max_rel_error;
    tol << std::scientific << std::setprecision(1) << r.tolerance;
    os << r.name << ",\"" << r.formula << "\"," << r.instances << ',' << err.str() << ',' << tol.str() << ','
       << (r.passed ? "PASS" : "FAIL") << '\n';
  }
}

}  // namespace metagrad
