#include "metagrad/algorithms.hpp"

#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>

#include "metagrad/common.hpp"
#include "metagrad/gradcheck.hpp"

namespace metagrad {

void ValidationSpec::validate() const {
  if (!(gamma_prime > 0.0 && gamma_prime <= 1.0)) throw Error("gamma_prime must lie in (0,1]");
  if (!(lambda_prime > 0.0 && lambda_prime <= 1.0)) throw Error("lambda_prime must lie in (0,1]");
  if (meta_batch_size < 1) throw Error("meta_batch_size must be at least 1");
}

std::vector<double> bootstrap_values(const AgentParams& ap, const Trajectory& traj, const EtaView& cond) {
  std::vector<double> out(traj.state_ids.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = value(ap, traj.observations[k], conditioning_input(cond, traj.state_ids[k]));
  }
  return out;
}

namespace {

// Scatters alpha * dG * direction into the adapted-logit columns.
void add_meta_columns(Eigen::MatrixXd& df, const MetaParams& mp, const ReturnResult& ret, std::size_t t,
                      const Eigen::VectorXd& direction, double alpha) {
  for (const auto& [slot, d] : ret.dgamma[t]) {
    if (auto col = mp.gamma_column(slot)) df.col(static_cast<Eigen::Index>(*col)) += (alpha * d) * direction;
  }
  for (const auto& [slot, d] : ret.dlambda[t]) {
    if (auto col = mp.lambda_column(slot)) df.col(static_cast<Eigen::Index>(*col)) += (alpha * d) * direction;
  }
}

bool is_on_policy(const Trajectory& traj, const std::vector<double>& target) {
  for (std::size_t t = 0; t < target.size(); ++t) {
    if (target[t] != traj.behavior_probs[t]) return false;
  }
  return true;
}

void require_actions(const Trajectory& traj) {
  if (traj.actions.size() != traj.length()) throw Error("actor-critic update needs one action per transition");
}

}  // namespace

InnerUpdateResult td_lambda_inner_update(std::span<const Trajectory> trajs, const AgentParams& ap,
                                         const MetaParams& mp, double alpha, bool with_meta_gradient) {
  if (!(alpha > 0.0)) throw Error("learning rate alpha must be positive");
  const EtaView eta = active_eta_view(mp);
  const auto n = static_cast<Eigen::Index>(ap.theta_dim());
  InnerUpdateResult out;
  out.delta_theta = Eigen::VectorXd::Zero(n);
  out.df_deta = Eigen::MatrixXd::Zero(n, with_meta_gradient ? static_cast<Eigen::Index>(mp.active_dim()) : 0);

  for (const Trajectory& traj : trajs) {
    const std::vector<double> boot = bootstrap_values(ap, traj, eta);
    const ReturnResult ret = lambda_return(traj, boot, eta);
    for (std::size_t t = 0; t < traj.length(); ++t) {
      const double err = ret.values[t] - boot[t];
      if (!std::isfinite(err)) throw Error("non-finite TD error at step " + std::to_string(t));
      const Eigen::VectorXd grad = value_grad(ap, traj.observations[t], conditioning_input(eta, traj.state_ids[t]));
      out.delta_theta += (alpha * err) * grad;
      out.loss += err * err;
      if (with_meta_gradient) add_meta_columns(out.df_deta, mp, ret, t, grad, alpha);
    }
  }
  out.new_params = ap.plus(out.delta_theta);
  return out;
}

Eigen::MatrixXd td_lambda_update_jacobian(std::span<const Trajectory> trajs, const AgentParams& ap,
                                          const MetaParams& mp, double alpha) {
  if (ap.conditioning) throw Error("update Jacobian is only available for unconditioned agents");
  const EtaView eta = eta_view(mp);
  const auto n = static_cast<Eigen::Index>(ap.theta_dim());
  const auto f = static_cast<Eigen::Index>(ap.feature_dim());
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(n, n);
  const Eigen::Vector2d unused(0.0, 0.0);

  for (const Trajectory& traj : trajs) {
    traj.validate();
    const std::size_t T = traj.length();
    auto feat = [&](std::size_t k) -> Eigen::VectorXd {
      if (k == T && traj.terminal) return Eigen::VectorXd::Zero(f);
      return features(ap, traj.observations[k], unused);
    };
    // dG = d(return_t)/d(value weights), built backwards like the return itself.
    Eigen::VectorXd dG = feat(T);
    for (std::size_t t = T; t-- > 0;) {
      const int s = traj.state_ids[t + 1];
      const double gamma = eta.gamma_at(s);
      const double lambda = eta.lambda_at(s);
      dG = gamma * (1.0 - lambda) * feat(t + 1) + gamma * lambda * dG;
      const Eigen::VectorXd x = feat(t);
      jac.topLeftCorner(f, f) += alpha * x * (dG - x).transpose();
    }
  }
  return jac;
}

MetaObjective mse_meta_objective_grad(std::span<const Trajectory> validation, const AgentParams& ap_new,
                                      const ValidationSpec& vspec, const EtaView& cond) {
  if (validation.empty()) throw Error("meta-objective needs at least one validation trajectory");
  const EtaView ref = vspec.reference_eta();
  MetaObjective out;
  out.grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ap_new.theta_dim()));
  for (const Trajectory& traj : validation) {
    const std::vector<double> boot = bootstrap_values(ap_new, traj, cond);
    const ReturnResult ret = lambda_return(traj, boot, ref);
    for (std::size_t t = 0; t < traj.length(); ++t) {
      const double err = ret.values[t] - boot[t];
      out.value += err * err;
      out.grad -= (2.0 * err) * value_grad(ap_new, traj.observations[t], conditioning_input(cond, traj.state_ids[t]));
    }
  }
  const double scale = 1.0 / static_cast<double>(validation.size());
  out.value *= scale;
  out.grad *= scale;
  return out;
}

InnerUpdateResult a2c_inner_update(std::span<const Trajectory> trajs, const AgentParams& ap, const MetaParams& mp,
                                   const A2cCoefficients& coef, bool with_meta_gradient) {
  if (!(coef.alpha > 0.0)) throw Error("learning rate alpha must be positive");
  const EtaView eta = active_eta_view(mp);
  const auto n = static_cast<Eigen::Index>(ap.theta_dim());
  InnerUpdateResult out;
  out.delta_theta = Eigen::VectorXd::Zero(n);
  out.df_deta = Eigen::MatrixXd::Zero(n, with_meta_gradient ? static_cast<Eigen::Index>(mp.active_dim()) : 0);

  for (const Trajectory& traj : trajs) {
    traj.validate();
    require_actions(traj);
    const std::vector<double> boot = bootstrap_values(ap, traj, eta);
    std::vector<double> target(traj.length());
    for (std::size_t t = 0; t < traj.length(); ++t) {
      const Eigen::VectorXd p =
          policy_probs(ap, traj.observations[t], conditioning_input(eta, traj.state_ids[t]));
      target[t] = p[traj.actions[t]];
    }
    bool vtrace = coef.returns == ReturnKind::VTrace;
    if (coef.returns == ReturnKind::Auto) vtrace = !is_on_policy(traj, target);
    const ReturnResult ret = vtrace ? vtrace_return(traj, boot, eta, target) : lambda_return(traj, boot, eta);

    for (std::size_t t = 0; t < traj.length(); ++t) {
      const Eigen::Vector2d in = conditioning_input(eta, traj.state_ids[t]);
      const double adv = ret.values[t] - boot[t];
      if (!std::isfinite(adv)) throw Error("non-finite advantage at step " + std::to_string(t));
      const Eigen::VectorXd glp = log_policy_grad(ap, traj.observations[t], traj.actions[t], in);
      const Eigen::VectorXd gv = value_grad(ap, traj.observations[t], in);
      const auto [h, gh] = entropy_and_grad(ap, traj.observations[t], in);
      (void)h;
      out.delta_theta += coef.alpha * (adv * glp + (coef.value_coef * adv) * gv + coef.entropy_coef * gh);
      out.loss += adv * adv;
      if (with_meta_gradient) {
        const Eigen::VectorXd direction = glp + coef.value_coef * gv;
        add_meta_columns(out.df_deta, mp, ret, t, direction, coef.alpha);
      }
    }
  }
  out.new_params = ap.plus(out.delta_theta);
  return out;
}

MetaObjective pg_meta_objective_grad(std::span<const Trajectory> validation, const AgentParams& ap_new,
                                     const ValidationSpec& vspec, const EtaView& cond) {
  if (validation.empty()) throw Error("meta-objective needs at least one validation trajectory");
  const EtaView ref = vspec.reference_eta();
  MetaObjective out;
  out.grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ap_new.theta_dim()));
  for (const Trajectory& traj : validation) {
    traj.validate();
    require_actions(traj);
    const std::vector<double> boot = bootstrap_values(ap_new, traj, cond);
    const ReturnResult ret = lambda_return(traj, boot, ref);
    for (std::size_t t = 0; t < traj.length(); ++t) {
      const Eigen::Vector2d in = conditioning_input(cond, traj.state_ids[t]);
      const double adv = ret.values[t] - boot[t];
      const Eigen::VectorXd p = policy_probs(ap_new, traj.observations[t], in);
      out.value -= adv * std::log(p[traj.actions[t]]);
      out.grad -= adv * log_policy_grad(ap_new, traj.observations[t], traj.actions[t], in);
    }
  }
  const double scale = 1.0 / static_cast<double>(validation.size());
  out.value *= scale;
  out.grad *= scale;
  return out;
}

ReusePlan swap_reuse_pairing(std::size_t batch_size) {
  ReusePlan plan;
  if (batch_size == 0) throw Error("cannot pair an empty batch");
  if (batch_size == 1) {
    plan.consecutive_fallback = true;
    return plan;
  }
  const std::size_t half = batch_size / 2;
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < batch_size; ++i) (i < half ? a : b).push_back(i);
  plan.pairs.emplace_back(a, b);
  plan.pairs.emplace_back(b, a);
  return plan;
}

double RunLog::tail_metric(std::size_t iterations, double fraction) const {
  if (rows.empty()) return 0.0;
  const double cut = static_cast<double>(iterations) * (1.0 - fraction);
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& row : rows) {
    if (static_cast<double>(row.iter) >= cut && row.iter > 0) {
      sum += row.metric;
      ++count;
    }
  }
  if (count == 0) return rows.back().metric;
  return sum / static_cast<double>(count);
}

MetaParams initial_meta_params(const MetaSettings& meta, std::size_t num_states) {
  if (meta.state_dependent) {
    return MetaParams::per_state(num_states, meta.gamma_logit_init, meta.lambda_logit_init, meta.adapt_gamma,
                                 meta.adapt_lambda);
  }
  return MetaParams::scalar(meta.gamma_logit_init, meta.lambda_logit_init, meta.adapt_gamma, meta.adapt_lambda);
}

namespace {

LogRow make_row(std::size_t iter, double metric, double loss, const MetaParams& mp) {
  LogRow row;
  row.iter = iter;
  row.metric = metric;
  row.inner_loss = loss;
  for (std::size_t s = 0; s < mp.num_slots(); ++s) {
    row.gammas.push_back(mp.gamma(s));
    row.lambdas.push_back(mp.lambda(s));
  }
  return row;
}

bool should_log(std::size_t it, const RunSettings& run) {
  const std::size_t every = std::max<std::size_t>(1, run.log_every);
  return it % every == 0 || it == run.iterations;
}

void maybe_checkpoint(const RunSettings& run, std::size_t it, const AgentParams& ap) {
  if (run.checkpoint_every == 0 || it % run.checkpoint_every != 0 || run.checkpoint_dir.empty()) return;
  std::filesystem::create_directories(run.checkpoint_dir);
  save_checkpoint(run.checkpoint_dir + "/seed" + std::to_string(run.seed) + "_iter" + std::to_string(it) + ".txt",
                  ap);
}

EtaView validation_conditioning(const ValidationSpec& vspec, const MetaParams& mp) {
  if (vspec.conditioning == ValidationConditioning::Eta) return eta_view(mp);
  return vspec.reference_eta();
}

class PredictionMetric {
public:
  explicit PredictionMetric(const MrpSpec& env)
      : env_(env), table_(true_values(env, 1.0)), visits_(visit_distribution(env)) {}

  double operator()(const AgentParams& ap, const MetaParams& mp) const {
    const EtaView eta = eta_view(mp);
    return prediction_mse(env_, table_, visits_, [&](int s) {
      return value(ap, env_.observation(s), conditioning_input(eta, s));
    });
  }

private:
  const MrpSpec& env_;
  ValueTable table_;
  std::vector<double> visits_;
};

double control_metric(const MdpSpec& env, const AgentParams& ap, const MetaParams& mp) {
  const EtaView eta = eta_view(mp);
  return policy_return(env, [&](int s) { return policy_probs(ap, env.observation(s), conditioning_input(eta, s)); });
}

void check_prediction_metric(double metric, const RunSettings& run) {
  if (!std::isfinite(metric) || metric > run.divergence_threshold) {
    throw DivergenceError("validation MSE " + std::to_string(metric) + " exceeded divergence threshold " +
                          std::to_string(run.divergence_threshold));
  }
}

std::vector<Trajectory> gather(const std::vector<VersionedSegment>& batch, const std::vector<std::size_t>& idx) {
  std::vector<Trajectory> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(batch[i].traj);
  return out;
}

}  // namespace

RunLog run_meta_prediction(const PredictionConfig& cfg) {
  cfg.env.validate();
  cfg.meta.validation.validate();
  RunLog log;
  log.seed = cfg.run.seed;
  const Rng root(cfg.run.seed);
  Rng train = root.split("train");
  Rng valid = root.split("validation");

  AgentParams ap = AgentParams::zeros(cfg.env.observation_dim, 0, cfg.embedding_size, cfg.conditioning);
  MetaParams mp = initial_meta_params(cfg.meta, cfg.env.num_states());
  const bool meta_active = mp.active_dim() > 0;
  MetaTrace z = MetaTrace::zeros(ap.theta_dim(), mp.active_dim(), cfg.meta.mu);
  MetaOptimizerState opt = MetaOptimizerState::make(cfg.meta.optimizer, cfg.meta.beta, mp.active_dim());
  const PredictionMetric metric(cfg.env);

  log.rows.push_back(make_row(0, metric(ap, mp), 0.0, mp));
  try {
    for (std::size_t it = 1; it <= cfg.run.iterations; ++it) {
      const Trajectory tau = sample_trajectory(cfg.env, train, cfg.segment_length);
      const InnerUpdateResult res = td_lambda_inner_update({&tau, 1}, ap, mp, cfg.alpha, meta_active);

      if (meta_active) {
        if (cfg.run.debug_gradcheck && it % 1000 == 0) {
          const double err = check_td_update_meta_jacobian({&tau, 1}, ap, mp, cfg.alpha);
          if (err > 1e-6) throw Error("df/deta finite-difference check failed at iteration " + std::to_string(it));
        }
        std::vector<Trajectory> val;
        val.reserve(cfg.meta.validation.meta_batch_size);
        for (std::size_t b = 0; b < cfg.meta.validation.meta_batch_size; ++b) {
          val.push_back(sample_trajectory(cfg.env, valid, cfg.segment_length));
        }
        const MetaObjective dj =
            mse_meta_objective_grad(val, res.new_params, cfg.meta.validation, validation_conditioning(cfg.meta.validation, mp));
        z = trace_update(z, res.df_deta);
        mp = meta_step(mp, opt, dj.grad, z);
      }
      ap = res.new_params;
      maybe_checkpoint(cfg.run, it, ap);

      if (should_log(it, cfg.run)) {
        const double m = metric(ap, mp);
        log.rows.push_back(make_row(it, m, res.loss, mp));
        check_prediction_metric(m, cfg.run);
      }
    }
  } catch (const Error& e) {
    log.aborted = true;
    log.abort_reason = e.what();
  }
  log.final_eta = mp;
  log.final_params = ap;
  return log;
}

RunLog run_td_lambda_baseline(const PredictionConfig& cfg) {
  cfg.env.validate();
  RunLog log;
  log.seed = cfg.run.seed;
  Rng train = Rng(cfg.run.seed).split("train");
  AgentParams ap = AgentParams::zeros(cfg.env.observation_dim, 0, cfg.embedding_size, cfg.conditioning);
  const MetaParams mp = initial_meta_params(cfg.meta, cfg.env.num_states());
  const PredictionMetric metric(cfg.env);

  log.rows.push_back(make_row(0, metric(ap, mp), 0.0, mp));
  try {
    for (std::size_t it = 1; it <= cfg.run.iterations; ++it) {
      const Trajectory tau = sample_trajectory(cfg.env, train, cfg.segment_length);
      const InnerUpdateResult res = td_lambda_inner_update({&tau, 1}, ap, mp, cfg.alpha, false);
      ap = res.new_params;
      maybe_checkpoint(cfg.run, it, ap);
      if (should_log(it, cfg.run)) {
        const double m = metric(ap, mp);
        log.rows.push_back(make_row(it, m, res.loss, mp));
        check_prediction_metric(m, cfg.run);
      }
    }
  } catch (const Error& e) {
    log.aborted = true;
    log.abort_reason = e.what();
  }
  log.final_eta = mp;
  log.final_params = ap;
  return log;
}

RunLog run_meta_control(const ControlConfig& cfg) {
  cfg.meta.validation.validate();
  RunLog log;
  log.seed = cfg.run.seed;
  ActorHarness harness(cfg.env, cfg.num_actors, cfg.snapshot_lag, Rng(cfg.run.seed).split("actors"));

  AgentParams ap =
      AgentParams::zeros(cfg.env.observation_dim, cfg.env.num_actions, cfg.embedding_size, cfg.conditioning);
  MetaParams mp = initial_meta_params(cfg.meta, cfg.env.num_states());
  const bool meta_active = mp.active_dim() > 0;
  MetaTrace z = MetaTrace::zeros(ap.theta_dim(), mp.active_dim(), cfg.meta.mu);
  MetaOptimizerState opt = MetaOptimizerState::make(cfg.meta.optimizer, cfg.meta.beta, mp.active_dim());
  const ReusePlan plan = swap_reuse_pairing(cfg.batch_size);
  if (plan.consecutive_fallback && meta_active) {
    std::cerr << "warning: batch of one segment; validating on the following segment instead of swapping\n";
  }

  long version = 0;
  harness.publish(std::make_shared<const PolicySnapshot>(PolicySnapshot{ap, eta_view(mp), version}));
  log.rows.push_back(make_row(0, control_metric(cfg.env, ap, mp), 0.0, mp));
  std::optional<Trajectory> lookahead;

  try {
    for (std::size_t it = 1; it <= cfg.run.iterations; ++it) {
      Eigen::VectorXd delta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ap.theta_dim()));
      Eigen::MatrixXd df_total = Eigen::MatrixXd::Zero(delta.size(), static_cast<Eigen::Index>(mp.active_dim()));
      Eigen::VectorXd meta_grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mp.active_dim()));
      double loss = 0.0;
      const EtaView cond = validation_conditioning(cfg.meta.validation, mp);

      auto meta_pair = [&](std::span<const Trajectory> upd, std::span<const Trajectory> val) {
        const InnerUpdateResult res = a2c_inner_update(upd, ap, mp, cfg.a2c, meta_active);
        delta += res.delta_theta;
        loss += res.loss;
        if (!meta_active) return;
        if (cfg.run.debug_gradcheck && it % 1000 == 0) {
          const double err = check_a2c_update_meta_jacobian(upd, ap, mp, cfg.a2c);
          if (err > 1e-6) throw Error("df/deta finite-difference check failed at iteration " + std::to_string(it));
        }
        df_total += res.df_deta;
        const MetaObjective dj = pg_meta_objective_grad(val, ap.plus(res.delta_theta), cfg.meta.validation, cond);
        meta_grad += meta_gradient(dj.grad, trace_update(z, res.df_deta));
      };

      if (!plan.consecutive_fallback) {
        const std::vector<VersionedSegment> batch = harness.collect(cfg.batch_size, cfg.segment_length);
        for (const auto& [upd_idx, val_idx] : plan.pairs) {
          const std::vector<Trajectory> upd = gather(batch, upd_idx);
          const std::vector<Trajectory> val = gather(batch, val_idx);
          meta_pair(upd, val);
        }
      } else {
        if (!lookahead) lookahead = harness.collect(1, cfg.segment_length).front().traj;
        const Trajectory upd = *lookahead;
        if (meta_active) {
          lookahead = harness.collect(1, cfg.segment_length).front().traj;
          meta_pair({&upd, 1}, {&*lookahead, 1});
        } else {
          lookahead.reset();
          meta_pair({&upd, 1}, {});
        }
      }

      ap = ap.plus(delta);
      if (!ap.flatten().allFinite()) throw DivergenceError("agent parameters became non-finite");
      if (meta_active) {
        z = trace_update(z, df_total);
        mp = apply_meta_gradient(mp, opt, meta_grad);
      }
      ++version;
      harness.publish(std::make_shared<const PolicySnapshot>(PolicySnapshot{ap, eta_view(mp), version}));
      maybe_checkpoint(cfg.run, it, ap);
      if (should_log(it, cfg.run)) log.rows.push_back(make_row(it, control_metric(cfg.env, ap, mp), loss, mp));
    }
  } catch (const Error& e) {
    log.aborted = true;
    log.abort_reason = e.what();
  }
  log.final_eta = mp;
  log.final_params = ap;
  return log;
}

RunLog run_a2c_baseline(const ControlConfig& cfg) {
  RunLog log;
  log.seed = cfg.run.seed;
  ActorHarness harness(cfg.env, cfg.num_actors, cfg.snapshot_lag, Rng(cfg.run.seed).split("actors"));
  AgentParams ap =
      AgentParams::zeros(cfg.env.observation_dim, cfg.env.num_actions, cfg.embedding_size, cfg.conditioning);
  const MetaParams mp = initial_meta_params(cfg.meta, cfg.env.num_states());
  const ReusePlan plan = swap_reuse_pairing(cfg.batch_size);

  long version = 0;
  harness.publish(std::make_shared<const PolicySnapshot>(PolicySnapshot{ap, eta_view(mp), version}));
  log.rows.push_back(make_row(0, control_metric(cfg.env, ap, mp), 0.0, mp));
  try {
    for (std::size_t it = 1; it <= cfg.run.iterations; ++it) {
      Eigen::VectorXd delta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ap.theta_dim()));
      double loss = 0.0;
      if (!plan.consecutive_fallback) {
        const std::vector<VersionedSegment> batch = harness.collect(cfg.batch_size, cfg.segment_length);
        // Half by half, matching the accumulation order of the meta-gradient learner.
        for (const auto& pair : plan.pairs) {
          const std::vector<Trajectory> upd = gather(batch, pair.first);
          const InnerUpdateResult res = a2c_inner_update(upd, ap, mp, cfg.a2c, false);
          delta += res.delta_theta;
          loss += res.loss;
        }
      } else {
        const Trajectory upd = harness.collect(1, cfg.segment_length).front().traj;
        const InnerUpdateResult res = a2c_inner_update({&upd, 1}, ap, mp, cfg.a2c, false);
        delta += res.delta_theta;
        loss += res.loss;
      }
      ap = ap.plus(delta);
      if (!ap.flatten().allFinite()) throw DivergenceError("agent parameters became non-finite");
      ++version;
      harness.publish(std::make_shared<const PolicySnapshot>(PolicySnapshot{ap, eta_view(mp), version}));
      maybe_checkpoint(cfg.run, it, ap);
      if (should_log(it, cfg.run)) log.rows.push_back(make_row(it, control_metric(cfg.env, ap, mp), loss, mp));
    }
  } catch (const Error& e) {
    log.aborted = true;
    log.abort_reason = e.what();
  }
  log.final_eta = mp;
  log.final_params = ap;
  return log;
}

}  // namespace metagrad
