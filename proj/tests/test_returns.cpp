#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "metagrad/common.hpp"
#include "metagrad/meta_params.hpp"
#include "metagrad/returns.hpp"

using namespace metagrad;

namespace {

Trajectory chain(std::vector<double> rewards, bool terminal, std::vector<int> states = {}) {
  Trajectory tr;
  const std::size_t T = rewards.size();
  if (states.empty()) {
    for (std::size_t k = 0; k <= T; ++k) states.push_back(static_cast<int>(k));
  }
  tr.state_ids = states;
  for (std::size_t k = 0; k <= T; ++k) tr.observations.push_back(Eigen::VectorXd::Zero(1));
  tr.rewards = std::move(rewards);
  tr.behavior_probs.assign(T, 1.0);
  tr.terminal = terminal;
  return tr;
}

double grad_at(const SparseGrad& g, std::size_t k) {
  const auto it = g.find(k);
  return it == g.end() ? 0.0 : it->second;
}

// Independent oracle: sum_{i<n} gamma^i R + gamma^n v, expanded term by term.
double n_step_poly(const std::vector<double>& r, double v, double gamma, std::size_t n) {
  double g = 0.0;
  for (std::size_t i = 0; i < n; ++i) g += std::pow(gamma, static_cast<double>(i)) * r[i];
  return g + std::pow(gamma, static_cast<double>(n)) * v;
}

double n_step_poly_dgamma(const std::vector<double>& r, double v, double gamma, std::size_t n) {
  double d = 0.0;
  for (std::size_t i = 1; i < n; ++i) d += static_cast<double>(i) * std::pow(gamma, static_cast<double>(i - 1)) * r[i];
  return d + static_cast<double>(n) * std::pow(gamma, static_cast<double>(n - 1)) * v;
}

// Double sum of the off-policy return, expanded literally.
std::vector<double> vtrace_expand(const std::vector<double>& r, const std::vector<double>& v, double gamma,
                                  const std::vector<double>& c, bool terminal) {
  const std::size_t T = r.size();
  std::vector<double> out(T);
  for (std::size_t t = 0; t < T; ++t) {
    double g = v[t];
    for (std::size_t k = 0; t + k < T; ++k) {
      double prod = 1.0;
      for (std::size_t j = 1; j <= k; ++j) prod *= gamma * c[t + j];
      const std::size_t s = t + k;
      const double vnext = (s + 1 == T && terminal) ? 0.0 : v[s + 1];
      g += c[s] * prod * (r[s] + gamma * vnext - v[s]);
    }
    out[t] = g;
  }
  return out;
}

}  // namespace

TEST_CASE("n-step single transition closed form") {
  const Trajectory tr = chain({1.0}, false);
  const std::vector<double> v = {0.0, 2.0};
  const ReturnResult r = n_step_return(tr, v, EtaView::constant(0.9, 0.5), 1);
  CHECK(r.values[0] == doctest::Approx(2.8).epsilon(1e-15));
}

TEST_CASE("n-step with zero discount keeps only the first reward") {
  const Trajectory tr = chain({3.0, 5.0, -2.0}, false);
  const std::vector<double> v = {1.0, 1.0, 1.0, 1.0};
  const ReturnResult r = n_step_return(tr, v, EtaView::constant(0.0, 0.5), 3);
  CHECK(r.values[0] == 3.0);
  CHECK(r.values[1] == 5.0);
}

TEST_CASE("n-step value and discount derivative against the polynomial expansion") {
  const std::vector<double> rewards = {1.0, -1.0, 0.5, 2.0};
  const Trajectory tr = chain(rewards, false, {0, 0, 0, 0, 0});
  const std::vector<double> v(5, 0.3);
  // Slope 1 reports the derivative in gamma space rather than logit space.
  const ReturnResult r = n_step_return(tr, v, EtaView::scalar(0.8, 0.5, 1.0, 0.0), 4);
  CHECK(r.values[0] == doctest::Approx(1.66688).epsilon(1e-14));
  CHECK(r.values[0] == doctest::Approx(n_step_poly(rewards, 0.3, 0.8, 4)).epsilon(1e-14));
  CHECK(grad_at(r.dgamma[0], 0) == doctest::Approx(4.2544).epsilon(1e-13));
  CHECK(grad_at(r.dgamma[0], 0) == doctest::Approx(n_step_poly_dgamma(rewards, 0.3, 0.8, 4)).epsilon(1e-13));
  CHECK(r.dlambda[0].empty());

  const double h = 1e-6;
  auto g = [&](double gamma) { return n_step_return(tr, v, EtaView::constant(gamma, 0.5), 4).values[0]; };
  CHECK(rel_error((g(0.8 + h) - g(0.8 - h)) / (2 * h), grad_at(r.dgamma[0], 0)) < 1e-6);
}

TEST_CASE("n-step errors") {
  const Trajectory tr = chain({1.0, 2.0}, false);
  const std::vector<double> v = {0.0, 0.0, 0.0};
  CHECK_THROWS_WITH_AS(n_step_return(tr, v, EtaView::constant(0.9, 0.5), 3),
                       doctest::Contains("exceeds segment of 2"), Error);
  const std::vector<double> bad = {0.0, NAN, 0.0};
  CHECK_THROWS_AS(n_step_return(tr, bad, EtaView::constant(0.9, 0.5), 1), Error);
}

TEST_CASE("lambda-return with zero lambda is the one-step target") {
  const Trajectory tr = chain({1.0, -2.0, 0.5}, false);
  const std::vector<double> v = {0.1, 0.2, 0.3, 0.4};
  const ReturnResult r = lambda_return(tr, v, EtaView::constant(0.7, 0.0));
  for (std::size_t t = 0; t < 3; ++t) CHECK(r.values[t] == doctest::Approx(tr.rewards[t] + 0.7 * v[t + 1]));
}

TEST_CASE("lambda-return with unit gates on a terminal episode is the Monte Carlo sum") {
  const Trajectory tr = chain({1.0, -2.0, 0.5, 4.0}, true);
  const std::vector<double> v = {9.0, 9.0, 9.0, 9.0, 9.0};
  const ReturnResult r = lambda_return(tr, v, EtaView::constant(1.0, 1.0));
  CHECK(r.values[0] == doctest::Approx(3.5).epsilon(1e-15));
  CHECK(r.values[1] == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(r.values[3] == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("lambda-return gradients match central differences on a random 20-step trajectory") {
  Rng rng(7);
  const std::size_t S = 6;
  MetaParams mp = MetaParams::per_state(S, 0.0, 0.0, true, true);
  for (auto& l : mp.gamma_logits) l = rng.uniform(-2.0, 2.0);
  for (auto& l : mp.lambda_logits) l = rng.uniform(-2.0, 2.0);
  std::vector<double> rewards;
  std::vector<int> states;
  std::vector<double> v;
  for (int k = 0; k <= 20; ++k) {
    states.push_back(static_cast<int>(rng.index(S)));
    v.push_back(rng.normal());
    if (k < 20) rewards.push_back(rng.normal());
  }
  const Trajectory tr = chain(rewards, false, states);
  const ReturnResult r = lambda_return(tr, v, eta_view(mp));
  const double h = 1e-6;
  for (std::size_t s = 0; s < S; ++s) {
    for (int gate = 0; gate < 2; ++gate) {
      MetaParams up = mp, down = mp;
      auto& u = gate == 0 ? up.gamma_logits[s] : up.lambda_logits[s];
      auto& d = gate == 0 ? down.gamma_logits[s] : down.lambda_logits[s];
      u += h;
      d -= h;
      const ReturnResult ru = lambda_return(tr, v, eta_view(up));
      const ReturnResult rd = lambda_return(tr, v, eta_view(down));
      for (std::size_t t = 0; t < 20; ++t) {
        const double fd = (ru.values[t] - rd.values[t]) / (2 * h);
        const double an = grad_at(gate == 0 ? r.dgamma[t] : r.dlambda[t], s);
        CHECK(rel_error(fd, an) < 1e-6);
      }
    }
  }
}

TEST_CASE("gradient maps only name states that appear after step t") {
  const Trajectory tr = chain({1.0, 1.0}, false, {3, 1, 4});
  const std::vector<double> v = {0.5, 0.5, 0.5};
  MetaParams mp = MetaParams::per_state(6, 0.0, 0.0, true, true);
  const ReturnResult r = lambda_return(tr, v, eta_view(mp));
  for (const auto& [k, d] : r.dgamma[0]) CHECK((k == 1 || k == 4));
  CHECK(r.dgamma[1].count(1) == 0);
}

TEST_CASE("gate identities hold at the clamped logit") {
  const Trajectory tr = chain({1.0, 2.0, 3.0}, false);
  const std::vector<double> v = {1.0, -1.0, 2.0, 0.5};
  const double low = sigmoid(-kLogitClamp);
  const ReturnResult no_discount = lambda_return(tr, v, EtaView::constant(low, 0.5));
  // Residuals are the gate times a downstream return, bounded by the path's total magnitude.
  double mass = 0.0;
  for (double r : tr.rewards) mass += std::fabs(r);
  for (double x : v) mass += std::fabs(x);
  const double tol = 1e-9 * std::max(1.0, mass);
  for (std::size_t t = 0; t < 3; ++t) CHECK(std::fabs(no_discount.values[t] - tr.rewards[t]) < tol);
  const ReturnResult no_trace = lambda_return(tr, v, EtaView::constant(0.9, low));
  for (std::size_t t = 0; t < 3; ++t) CHECK(std::fabs(no_trace.values[t] - (tr.rewards[t] + 0.9 * v[t + 1])) < tol);
}

TEST_CASE("positive rewards make the return nondecreasing in every discount") {
  const Trajectory tr = chain({1.0, 0.5, 2.0, 0.1}, false, {0, 1, 2, 1, 0});
  const std::vector<double> v(5, 0.0);
  MetaParams mp = MetaParams::per_state(3, 0.3, 0.2, true, true);
  const ReturnResult base = lambda_return(tr, v, eta_view(mp));
  for (std::size_t s = 0; s < 3; ++s) {
    MetaParams up = mp;
    up.gamma_logits[s] += 0.5;
    const ReturnResult r = lambda_return(tr, v, eta_view(up));
    for (std::size_t t = 0; t < 4; ++t) CHECK(r.values[t] >= base.values[t]);
  }
}

TEST_CASE("lambda-return rejects empty and malformed trajectories") {
  Trajectory empty;
  empty.state_ids = {0};
  const std::vector<double> v = {0.0};
  CHECK_THROWS_AS(lambda_return(empty, v, EtaView::constant(0.9, 0.9)), Error);
  Trajectory tr = chain({1.0}, false);
  tr.behavior_probs = {0.0};
  CHECK_THROWS_AS(lambda_return(tr, std::vector<double>{0.0, 0.0}, EtaView::constant(0.9, 0.9)), Error);
}

TEST_CASE("on-policy v-trace equals the unit-lambda return") {
  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t T = 1 + rng.index(15);
    std::vector<double> rewards, v;
    for (std::size_t k = 0; k <= T; ++k) {
      v.push_back(rng.normal());
      if (k < T) rewards.push_back(rng.normal());
    }
    Trajectory tr = chain(rewards, true, std::vector<int>(T + 1, 0));
    tr.actions.assign(T, 0);
    for (auto& p : tr.behavior_probs) p = rng.uniform(0.1, 1.0);
    const double gamma = rng.uniform(0.1, 1.0);
    const ReturnResult vt = vtrace_return(tr, v, EtaView::constant(gamma, 0.3), tr.behavior_probs);
    const ReturnResult lr = lambda_return(tr, v, EtaView::constant(gamma, 1.0));
    for (std::size_t t = 0; t < T; ++t) CHECK(std::fabs(vt.values[t] - lr.values[t]) < 1e-12);
  }
}

TEST_CASE("v-trace clips importance weights at one") {
  Trajectory tr = chain({1.0, -1.0, 2.0}, false);
  tr.actions = {0, 1, 0};
  tr.behavior_probs = {0.1, 0.1, 0.1};
  const std::vector<double> v = {0.2, 0.4, -0.3, 1.0};
  const ReturnResult five = vtrace_return(tr, v, EtaView::constant(0.9, 0.5), std::vector<double>{0.5, 0.5, 0.5});
  const ReturnResult one = vtrace_return(tr, v, EtaView::constant(0.9, 0.5), std::vector<double>{0.1, 0.1, 0.1});
  for (std::size_t t = 0; t < 3; ++t) CHECK(five.values[t] == one.values[t]);
}

TEST_CASE("v-trace matches the literal double sum") {
  Trajectory tr = chain({1.0, 2.0}, false);
  tr.actions = {0, 0};
  tr.behavior_probs = {1.0, 1.0};
  const std::vector<double> v = {0.5, 0.5, 0.5};
  const ReturnResult r = vtrace_return(tr, v, EtaView::constant(0.9, 0.5), std::vector<double>{0.5, 0.5});
  CHECK(r.values[0] == doctest::Approx(1.41375).epsilon(1e-14));
  CHECK(r.values[1] == doctest::Approx(1.475).epsilon(1e-14));

  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t T = 1 + rng.index(8);
    std::vector<double> rw, vv, c, target;
    for (std::size_t k = 0; k <= T; ++k) vv.push_back(rng.normal());
    Trajectory t2 = chain(std::vector<double>(T, 0.0), rep % 2 == 0, std::vector<int>(T + 1, 0));
    t2.actions.assign(T, 0);
    for (std::size_t k = 0; k < T; ++k) {
      t2.rewards[k] = rng.normal();
      t2.behavior_probs[k] = rng.uniform(0.2, 1.0);
      target.push_back(rng.uniform(0.05, 1.0));
      c.push_back(std::min(1.0, target.back() / t2.behavior_probs[k]));
    }
    const double gamma = rng.uniform(0.2, 1.0);
    const auto oracle = vtrace_expand(t2.rewards, vv, gamma, c, t2.terminal);
    const ReturnResult got = vtrace_return(t2, vv, EtaView::constant(gamma, 0.5), target);
    for (std::size_t k = 0; k < T; ++k) CHECK(got.values[k] == doctest::Approx(oracle[k]).epsilon(1e-12));
  }
}

TEST_CASE("v-trace discount gradient matches central differences") {
  Rng rng(5);
  Trajectory tr = chain({0.3, -1.2, 0.8, 2.0, -0.4}, false, {0, 2, 1, 2, 0, 1});
  tr.actions = {0, 1, 1, 0, 2};
  tr.behavior_probs = {0.5, 0.3, 0.9, 0.2, 0.6};
  const std::vector<double> target = {0.7, 0.1, 0.5, 0.4, 0.6};
  const std::vector<double> v = {0.1, -0.5, 0.3, 0.9, -0.2, 0.4};
  MetaParams mp = MetaParams::per_state(3, 0.0, 0.0, true, false);
  for (auto& l : mp.gamma_logits) l = rng.uniform(-2.0, 2.0);
  const ReturnResult r = vtrace_return(tr, v, eta_view(mp), target);
  const double h = 1e-6;
  for (std::size_t s = 0; s < 3; ++s) {
    MetaParams up = mp, down = mp;
    up.gamma_logits[s] += h;
    down.gamma_logits[s] -= h;
    const auto ru = vtrace_return(tr, v, eta_view(up), target);
    const auto rd = vtrace_return(tr, v, eta_view(down), target);
    for (std::size_t t = 0; t < 5; ++t) CHECK(rel_error((ru.values[t] - rd.values[t]) / (2 * h), grad_at(r.dgamma[t], s)) < 1e-6);
  }
  for (const auto& d : r.dlambda) CHECK(d.empty());
}

TEST_CASE("v-trace input errors") {
  Trajectory tr = chain({1.0, 2.0}, false);
  tr.actions = {0, 0};
  const std::vector<double> v = {0.0, 0.0, 0.0};
  CHECK_THROWS_AS(vtrace_return(tr, v, EtaView::constant(0.9, 0.5), std::vector<double>{0.5}), Error);
  tr.behavior_probs = {0.0, 1.0};
  CHECK_THROWS_AS(vtrace_return(tr, v, EtaView::constant(0.9, 0.5), std::vector<double>{0.5, 0.5}), Error);
}

TEST_CASE("returns are deterministic") {
  const Trajectory tr = chain({1.0, 2.0, 3.0}, false, {0, 1, 0, 1});
  const std::vector<double> v = {0.1, 0.2, 0.3, 0.4};
  MetaParams mp = MetaParams::per_state(2, 0.4, -0.3, true, true);
  const ReturnResult a = lambda_return(tr, v, eta_view(mp));
  const ReturnResult b = lambda_return(tr, v, eta_view(mp));
  CHECK(a.values == b.values);
  CHECK(a.dgamma == b.dgamma);
}
