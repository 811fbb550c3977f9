#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "metagrad/algorithms.hpp"
#include "metagrad/gradcheck.hpp"

using namespace metagrad;

namespace {

Eigen::VectorXd one_hot(std::size_t n, std::size_t i) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  x[static_cast<Eigen::Index>(i)] = 1.0;
  return x;
}

// Tabular reward-process path through the given states.
Trajectory tabular_path(std::size_t n, std::vector<int> states, std::vector<double> rewards, bool terminal) {
  Trajectory tr;
  tr.state_ids = states;
  for (int s : states) tr.observations.push_back(one_hot(n, static_cast<std::size_t>(s)));
  tr.rewards = std::move(rewards);
  tr.behavior_probs.assign(tr.rewards.size(), 1.0);
  tr.terminal = terminal;
  return tr;
}

// Random linear-feature segment; actions filled when num_actions > 0.
Trajectory random_segment(Rng& rng, std::size_t obs_dim, std::size_t num_states, std::size_t len, bool terminal,
                          std::size_t num_actions = 0) {
  Trajectory tr;
  for (std::size_t k = 0; k <= len; ++k) {
    tr.state_ids.push_back(static_cast<int>(rng.index(num_states)));
    Eigen::VectorXd x(static_cast<Eigen::Index>(obs_dim));
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = rng.normal();
    tr.observations.push_back(x);
  }
  for (std::size_t k = 0; k < len; ++k) {
    tr.rewards.push_back(rng.normal());
    if (num_actions > 0) {
      tr.actions.push_back(static_cast<int>(rng.index(num_actions)));
      tr.behavior_probs.push_back(1.0 / static_cast<double>(num_actions));
    } else {
      tr.behavior_probs.push_back(1.0);
    }
  }
  tr.terminal = terminal;
  return tr;
}

AgentParams random_params(Rng& rng, std::size_t obs, std::size_t actions, std::size_t emb, bool cond, double scale) {
  AgentParams ap = AgentParams::zeros(obs, actions, emb, cond);
  Eigen::VectorXd theta(static_cast<Eigen::Index>(ap.theta_dim()));
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] = scale * rng.normal();
  ap.assign(theta);
  return ap;
}

MetaParams random_meta(Rng& rng, std::size_t states) {
  MetaParams mp = MetaParams::per_state(states, 0.0, 0.0, true, true);
  for (auto& l : mp.gamma_logits) l = rng.uniform(-2.0, 2.0);
  for (auto& l : mp.lambda_logits) l = rng.uniform(-2.0, 2.0);
  return mp;
}

PredictionConfig small_prediction(std::uint64_t seed, std::size_t iterations) {
  PredictionConfig cfg;
  cfg.env = build_signal_noise_mrp();
  cfg.meta.adapt_gamma = true;
  cfg.meta.state_dependent = true;
  cfg.meta.lambda_logit_init = 20.0;
  cfg.run.seed = seed;
  cfg.run.iterations = iterations;
  cfg.run.log_every = 10;
  return cfg;
}

ControlConfig small_control(std::uint64_t seed, std::size_t iterations) {
  ControlConfig cfg;
  cfg.env = build_noisy_gridworld();
  cfg.meta.adapt_gamma = true;
  cfg.meta.lambda_logit_init = 20.0;
  cfg.run.seed = seed;
  cfg.run.iterations = iterations;
  cfg.run.log_every = 10;
  return cfg;
}

void check_same_log(const RunLog& a, const RunLog& b) {
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(a.rows[i].iter == b.rows[i].iter);
    CHECK(a.rows[i].metric == b.rows[i].metric);
    CHECK(a.rows[i].gammas == b.rows[i].gammas);
    CHECK(a.rows[i].lambdas == b.rows[i].lambdas);
  }
  CHECK(a.final_params.flatten() == b.final_params.flatten());
}

}  // namespace

TEST_CASE("tabular TD step on a single terminal transition") {
  const Trajectory tr = tabular_path(3, {0, 2}, {1.0}, true);
  const AgentParams ap = AgentParams::zeros(3, 0, 0, false);
  const MetaParams mp = MetaParams::per_state(3, 0.0, 0.0, true, true);
  const InnerUpdateResult r = td_lambda_inner_update(std::span(&tr, 1), ap, mp, 0.1);
  CHECK(r.new_params.value_weights[0] == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(r.new_params.value_weights[1] == 0.0);
  CHECK(r.new_params.value_weights[2] == 0.0);
  CHECK(r.df_deta.isZero());
  CHECK(r.new_params.flatten() == ap.flatten() + r.delta_theta);
}

TEST_CASE("meta-Jacobian survives a zero TD error") {
  // v(S0) = 1 = 0.5 + 0.5 * v(S1): the step is zero but dg/dgamma is not.
  const Trajectory tr = tabular_path(2, {0, 1}, {0.5}, false);
  AgentParams ap = AgentParams::zeros(2, 0, 0, false);
  ap.value_weights << 1.0, 1.0;
  const MetaParams mp = MetaParams::per_state(2, 0.0, 0.0, true, false);
  const InnerUpdateResult r = td_lambda_inner_update(std::span(&tr, 1), ap, mp, 0.1);
  CHECK(r.delta_theta.isZero());
  REQUIRE(r.df_deta.cols() == 2);
  CHECK(r.df_deta(0, 1) == doctest::Approx(0.025).epsilon(1e-15));
  CHECK(r.df_deta(0, 0) == 0.0);
  CHECK(r.df_deta(1, 1) == 0.0);
}

TEST_CASE("TD update leaves the policy untouched and rejects bad inputs") {
  Rng rng(1);
  const Trajectory tr = random_segment(rng, 3, 4, 5, false, 2);
  const AgentParams ap = random_params(rng, 3, 2, 2, true, 0.5);
  const InnerUpdateResult r = td_lambda_inner_update(std::span(&tr, 1), ap, random_meta(rng, 4), 0.1);
  CHECK(r.new_params.policy_weights == ap.policy_weights);
  CHECK(r.new_params.embedding != ap.embedding);
  CHECK_THROWS_AS(td_lambda_inner_update(std::span(&tr, 1), ap, random_meta(rng, 4), 0.0), Error);
  Trajectory bad = tr;
  bad.rewards[0] = std::nan("");
  CHECK_THROWS_AS(td_lambda_inner_update(std::span(&bad, 1), ap, random_meta(rng, 4), 0.1), Error);
}

TEST_CASE("TD meta-Jacobian matches central differences") {
  Rng rng(11);
  double worst = 0.0;
  for (int rep = 0; rep < 40; ++rep) {
    std::vector<Trajectory> batch;
    for (int k = 0; k < 2; ++k) batch.push_back(random_segment(rng, 3, 5, 6, rep % 2 == 0));
    const AgentParams ap = random_params(rng, 3, 0, 2, rep % 3 == 0, 0.5);
    worst = std::max(worst, check_td_update_meta_jacobian(batch, ap, random_meta(rng, 5), 0.1));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("TD parameter Jacobian matches central differences") {
  Rng rng(12);
  const Trajectory tr = random_segment(rng, 4, 5, 6, false);
  const AgentParams ap = random_params(rng, 4, 0, 0, false, 0.5);
  const MetaParams mp = random_meta(rng, 5);
  const Eigen::MatrixXd j = td_lambda_update_jacobian(std::span(&tr, 1), ap, mp, 0.1);
  const Eigen::VectorXd theta = ap.flatten();
  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(theta.size());
    e[k] = h;
    const Eigen::VectorXd up = td_lambda_inner_update(std::span(&tr, 1), ap.plus(e), mp, 0.1, false).delta_theta;
    const Eigen::VectorXd down = td_lambda_inner_update(std::span(&tr, 1), ap.plus(-e), mp, 0.1, false).delta_theta;
    const Eigen::VectorXd col = (up - down) / (2 * h);
    for (Eigen::Index i = 0; i < col.size(); ++i) worst = std::max(worst, rel_error(j(i, k), col[i]));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("squared-error meta-objective") {
  ValidationSpec vspec;
  const EtaView cond = EtaView::constant(1.0, 1.0);
  const Trajectory single = tabular_path(2, {0, 1}, {1.0}, true);
  const AgentParams zero = AgentParams::zeros(2, 0, 0, false);
  const MetaObjective o = mse_meta_objective_grad(std::span(&single, 1), zero, vspec, cond);
  CHECK(o.grad[0] == -2.0);
  CHECK(o.grad[1] == 0.0);

  AgentParams perfect = zero;
  perfect.value_weights << 1.0, 0.0;
  CHECK(mse_meta_objective_grad(std::span(&single, 1), perfect, vspec, cond).grad.isZero());

  // Terminal episodes with gamma' = lambda' = 1 give theta-free targets, so the loss is differentiable as is.
  Rng rng(13);
  std::vector<Trajectory> batch;
  for (int k = 0; k < 3; ++k) batch.push_back(random_segment(rng, 3, 4, 5, true));
  const AgentParams ap = random_params(rng, 3, 0, 2, true, 0.5);
  const EtaView c = EtaView::constant(0.3, 0.6);
  const MetaObjective m = mse_meta_objective_grad(batch, ap, vspec, c);
  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index k = 0; k < m.grad.size(); ++k) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(m.grad.size());
    e[k] = h;
    const double fd = (mse_meta_objective_grad(batch, ap.plus(e), vspec, c).value -
                       mse_meta_objective_grad(batch, ap.plus(-e), vspec, c).value) / (2 * h);
    worst = std::max(worst, rel_error(m.grad[k], fd));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("actor-critic stationary point and score sign") {
  const MdpSpec g = build_noisy_gridworld();
  Trajectory tr;
  tr.state_ids = {0, 1, 2};
  for (int s : tr.state_ids) tr.observations.push_back(g.observation(s));
  tr.actions = {1, 1};
  tr.rewards = {0.0, 0.0};
  tr.behavior_probs = {0.25, 0.25};
  tr.terminal = true;
  const AgentParams zero = AgentParams::zeros(g.observation_dim, 4, 0, false);
  const MetaParams mp = MetaParams::scalar(0.0, 0.0, true, true);
  const InnerUpdateResult still = a2c_inner_update(std::span(&tr, 1), zero, mp, {});
  CHECK(still.delta_theta.cwiseAbs().maxCoeff() < 1e-15);

  for (double reward : {1.0, -1.0}) {
    Trajectory one = tr;
    one.rewards = {reward, 0.0};
    A2cCoefficients pure;
    pure.alpha = 0.1;
    pure.value_coef = 0.0;
    pure.entropy_coef = 0.0;
    const InnerUpdateResult r = a2c_inner_update(std::span(&one, 1), zero, mp, pure);
    const Eigen::VectorXd x = g.observation(0);
    Eigen::Index s0 = 0;
    x.maxCoeff(&s0);
    const double step = r.new_params.policy_weights(1, s0) - zero.policy_weights(1, s0);
    CHECK(step * reward > 0.0);
    CHECK(r.new_params.value_weights == zero.value_weights);
  }

  Trajectory no_actions = tr;
  no_actions.actions.clear();
  CHECK_THROWS_AS(a2c_inner_update(std::span(&no_actions, 1), zero, mp, {}), Error);
}

TEST_CASE("actor-critic meta-Jacobian matches central differences") {
  Rng rng(21);
  double worst = 0.0;
  for (int rep = 0; rep < 40; ++rep) {
    std::vector<Trajectory> batch;
    for (int k = 0; k < 2; ++k) batch.push_back(random_segment(rng, 3, 5, 6, rep % 2 == 0, 3));
    const AgentParams ap = random_params(rng, 3, 3, 2, rep % 3 == 0, 0.5);
    A2cCoefficients coef;
    coef.alpha = 0.1;
    coef.returns = rep % 4 == 0 ? ReturnKind::VTrace : ReturnKind::Auto;
    worst = std::max(worst, check_a2c_update_meta_jacobian(batch, ap, random_meta(rng, 5), coef));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("policy-gradient meta-objective") {
  ValidationSpec vspec;
  Rng rng(31);
  const Trajectory tr = random_segment(rng, 3, 4, 5, true, 3);
  const EtaView cond = EtaView::constant(1.0, 1.0);

  // Rewards equal to value differences make g' = v everywhere.
  AgentParams ap = random_params(rng, 3, 3, 0, false, 0.5);
  Trajectory matched = tr;
  for (std::size_t t = 0; t < matched.length(); ++t) {
    const double next = t + 1 < matched.length() ? ap.value_weights.dot(matched.observations[t + 1]) : 0.0;
    matched.rewards[t] = ap.value_weights.dot(matched.observations[t]) - next;
  }
  CHECK(pg_meta_objective_grad(std::span(&matched, 1), ap, vspec, cond).grad.cwiseAbs().maxCoeff() < 1e-12);

  // Saturated at every taken action.
  AgentParams sat = AgentParams::zeros(3, 3, 0, false);
  Trajectory same = tr;
  for (auto& o : same.observations) o = Eigen::Vector3d(1.0, 0.0, 0.0);
  for (auto& a : same.actions) a = 2;
  sat.policy_weights(2, 0) = 40.0;
  CHECK(pg_meta_objective_grad(std::span(&same, 1), sat, vspec, cond).grad.cwiseAbs().maxCoeff() < 1e-12);

  // Against differences of -sum adv log pi with the advantages frozen.
  const AgentParams p = random_params(rng, 3, 3, 2, true, 0.5);
  const EtaView c = EtaView::constant(0.4, 0.7);
  const std::vector<double> boot = bootstrap_values(p, tr, c);
  const ReturnResult ret = lambda_return(tr, boot, vspec.reference_eta());
  auto objective = [&](const AgentParams& q) {
    double j = 0.0;
    for (std::size_t t = 0; t < tr.length(); ++t) {
      const Eigen::VectorXd probs = policy_probs(q, tr.observations[t], conditioning_input(c, tr.state_ids[t]));
      j -= (ret.values[t] - boot[t]) * std::log(probs[tr.actions[t]]);
    }
    return j;
  };
  const MetaObjective m = pg_meta_objective_grad(std::span(&tr, 1), p, vspec, c);
  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index k = 0; k < m.grad.size(); ++k) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(m.grad.size());
    e[k] = h;
    worst = std::max(worst, rel_error(m.grad[k], (objective(p.plus(e)) - objective(p.plus(-e))) / (2 * h)));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("swap pairing") {
  const ReusePlan two = swap_reuse_pairing(2);
  REQUIRE(two.pairs.size() == 2);
  CHECK(two.pairs[0].first == std::vector<std::size_t>{0});
  CHECK(two.pairs[0].second == std::vector<std::size_t>{1});
  CHECK(two.pairs[1].first == std::vector<std::size_t>{1});
  CHECK(two.pairs[1].second == std::vector<std::size_t>{0});

  const ReusePlan eight = swap_reuse_pairing(8);
  REQUIRE(eight.pairs.size() == 2);
  std::vector<int> updates(8, 0), validations(8, 0);
  for (const auto& [u, v] : eight.pairs) {
    CHECK(u.size() == 4);
    for (auto i : u) ++updates[i];
    for (auto i : v) ++validations[i];
  }
  CHECK(updates == std::vector<int>(8, 1));
  CHECK(validations == std::vector<int>(8, 1));
  CHECK(swap_reuse_pairing(8).pairs == eight.pairs);

  CHECK(swap_reuse_pairing(1).consecutive_fallback);
  CHECK(swap_reuse_pairing(1).pairs.empty());
  CHECK_THROWS_AS(swap_reuse_pairing(0), Error);
}

TEST_CASE("frozen gates stay constant") {
  PredictionConfig cfg = small_prediction(3, 200);
  cfg.meta.adapt_gamma = false;
  const RunLog log = run_meta_prediction(cfg);
  for (const auto& row : log.rows) CHECK(row.gammas == log.rows.front().gammas);
  CHECK(log.final_eta.gamma_logits == std::vector<double>(11, 0.0));
}

TEST_CASE("prediction metric is finite and nonnegative, and gates move") {
  const RunLog log = run_meta_prediction(small_prediction(4, 500));
  CHECK(!log.aborted);
  CHECK(log.rows.front().iter == 0);
  CHECK(log.rows.back().iter == 500);
  for (const auto& row : log.rows) {
    CHECK(std::isfinite(row.metric));
    CHECK(row.metric >= 0.0);
  }
  CHECK(log.rows.back().gammas != log.rows.front().gammas);
}

TEST_CASE("frozen meta runs reproduce the baselines bit for bit") {
  PredictionConfig p = small_prediction(5, 300);
  p.meta.adapt_gamma = false;
  check_same_log(run_meta_prediction(p), run_td_lambda_baseline(p));

  ControlConfig c = small_control(5, 60);
  c.meta.adapt_gamma = false;
  check_same_log(run_meta_control(c), run_a2c_baseline(c));
}

TEST_CASE("zero meta step size matches frozen gates") {
  ControlConfig live = small_control(6, 60);
  live.meta.beta = 0.0;
  ControlConfig frozen = live;
  frozen.meta.adapt_gamma = false;
  check_same_log(run_meta_control(live), run_meta_control(frozen));

  PredictionConfig p = small_prediction(6, 200);
  p.meta.beta = 0.0;
  p.meta.optimizer = MetaOptimizerKind::Sgd;
  PredictionConfig q = p;
  q.meta.adapt_gamma = false;
  check_same_log(run_meta_prediction(p), run_meta_prediction(q));
}

TEST_CASE("control gates move from the initial logit") {
  const RunLog log = run_meta_control(small_control(7, 200));
  CHECK(!log.aborted);
  CHECK(std::fabs(log.final_eta.gamma_logits[0]) > 0.0);
}

TEST_CASE("debug gradient checks run inside training") {
  PredictionConfig cfg = small_prediction(8, 1001);
  cfg.run.debug_gradcheck = true;
  cfg.meta.adapt_lambda = true;
  cfg.meta.lambda_logit_init = 0.0;
  const RunLog log = run_meta_prediction(cfg);
  CHECK(!log.aborted);
}

TEST_CASE("divergence aborts with a reason") {
  PredictionConfig cfg = small_prediction(9, 100);
  cfg.run.divergence_threshold = 1e-12;
  const RunLog log = run_meta_prediction(cfg);
  CHECK(log.aborted);
  CHECK(!log.abort_reason.empty());
}

TEST_CASE("tail metric averages the last tenth") {
  RunLog log;
  for (std::size_t i = 0; i <= 100; i += 10) log.rows.push_back({i, static_cast<double>(i), 0.0, {}, {}});
  CHECK(log.tail_metric(100) == doctest::Approx(95.0));
  RunLog empty_tail;
  empty_tail.rows.push_back({0, 3.0, 0.0, {}, {}});
  CHECK(empty_tail.tail_metric(0) == 3.0);
}
