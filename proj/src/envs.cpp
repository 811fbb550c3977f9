#include "metagrad/envs.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

namespace metagrad {

namespace {

Eigen::VectorXd one_hot(std::size_t dim, int group) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  x[group] = 1.0;
  return x;
}

const Outcome& find_outcome(const std::vector<Outcome>& outs, int next) {
  for (const auto& o : outs) {
    if (o.next == next) return o;
  }
  throw Error("no transition to state " + std::to_string(next));
}

int sample_outcome(const std::vector<Outcome>& outs, Rng& rng) {
  if (outs.empty()) throw Error("state has no outgoing transitions");
  if (outs.size() == 1) return outs.front().next;
  const double u = rng.uniform();
  double acc = 0.0;
  for (const auto& o : outs) {
    acc += o.prob;
    if (u < acc) return o.next;
  }
  return outs.back().next;
}

double draw_reward(const Outcome& o, Rng& rng) {
  if (o.reward_std == 0.0) return o.reward_mean;
  return o.reward_mean + o.reward_std * rng.normal();
}

// Reverse topological order of non-terminal states; throws on cycles.
std::vector<int> reverse_topological(const MrpSpec& spec) {
  const std::size_t n = spec.num_states();
  std::vector<int> mark(n, 0), order;
  order.reserve(n);
  std::function<void(int)> visit = [&](int s) {
    auto& m = mark[static_cast<std::size_t>(s)];
    if (m == 2) return;
    if (m == 1) throw Error("reward process '" + spec.name + "' has a cycle; it is not finite-horizon");
    m = 1;
    if (!spec.terminal(s)) {
      for (const auto& o : spec.transitions[static_cast<std::size_t>(s)]) visit(o.next);
    }
    m = 2;
    order.push_back(s);
  };
  for (std::size_t s = 0; s < n; ++s) visit(static_cast<int>(s));
  return order;  // successors before predecessors
}

}  // namespace

Eigen::VectorXd MrpSpec::observation(int s) const {
  return one_hot(observation_dim, observation_group.at(static_cast<std::size_t>(s)));
}

int MrpSpec::transition(int s, Rng& rng) const {
  return sample_outcome(transitions.at(static_cast<std::size_t>(s)), rng);
}

double MrpSpec::reward(int s, int next, Rng& rng) const {
  return draw_reward(find_outcome(transitions.at(static_cast<std::size_t>(s)), next), rng);
}

double MrpSpec::expected_reward(int s) const {
  if (terminal(s)) return 0.0;
  double r = 0.0;
  for (const auto& o : transitions.at(static_cast<std::size_t>(s))) r += o.prob * o.reward_mean;
  return r;
}

void MrpSpec::validate() const {
  const std::size_t n = num_states();
  if (n == 0) throw Error("reward process has no states");
  if (terminal_states.size() != n || observation_group.size() != n) {
    throw Error("reward process tables disagree on the number of states");
  }
  if (start_state < 0 || static_cast<std::size_t>(start_state) >= n) throw Error("start state out of range");
  for (std::size_t s = 0; s < n; ++s) {
    const int g = observation_group[s];
    if (g < 0 || static_cast<std::size_t>(g) >= observation_dim) {
      throw Error("observation group of state " + std::to_string(s) + " outside observation dimension");
    }
    if (terminal_states[s]) continue;
    double total = 0.0;
    for (const auto& o : transitions[s]) {
      if (o.next < 0 || static_cast<std::size_t>(o.next) >= n) {
        throw Error("state " + std::to_string(s) + " transitions to unknown state " + std::to_string(o.next));
      }
      if (!(o.prob >= 0.0) || !std::isfinite(o.reward_mean) || !(o.reward_std >= 0.0)) {
        throw Error("invalid transition row out of state " + std::to_string(s));
      }
      total += o.prob;
    }
    if (std::fabs(total - 1.0) > 1e-9) {
      throw Error("transition probabilities out of state " + std::to_string(s) + " sum to " + std::to_string(total));
    }
  }
}

Eigen::VectorXd MdpSpec::observation(int s) const {
  return one_hot(observation_dim, observation_group.at(static_cast<std::size_t>(s)));
}

int MdpSpec::transition(int s, int a, Rng& rng) const {
  return sample_outcome(transitions.at(static_cast<std::size_t>(s)).at(static_cast<std::size_t>(a)), rng);
}

double MdpSpec::reward(int s, int a, int next, Rng& rng) const {
  return draw_reward(
      find_outcome(transitions.at(static_cast<std::size_t>(s)).at(static_cast<std::size_t>(a)), next), rng);
}

MrpSpec build_signal_noise_mrp() {
  constexpr int kChain = 10;
  MrpSpec spec;
  spec.name = "signal_noise";
  spec.start_state = 0;
  spec.transitions.resize(kChain + 1);
  spec.terminal_states.assign(kChain + 1, false);
  spec.terminal_states[kChain] = true;
  spec.observation_dim = kChain + 1;
  for (int s = 0; s <= kChain; ++s) spec.observation_group.push_back(s);
  for (int s = 0; s < kChain; ++s) {
    if (is_signal_state(s)) {
      spec.transitions[static_cast<std::size_t>(s)] = {Outcome{s + 1, 1.0, 0.1, 0.0}};
    } else {
      spec.transitions[static_cast<std::size_t>(s)] = {Outcome{s + 1, 1.0, 0.0, 1.0}};
    }
  }
  return spec;
}

bool is_signal_state(int state_id) { return state_id >= 0 && state_id < 10 && state_id % 2 == 0; }

MrpSpec build_fan_mrp(int fan_width) {
  if (fan_width < 2) throw Error("fan width must be at least 2, got " + std::to_string(fan_width));
  constexpr int kBottlenecks = 5;
  constexpr int kLayers = 5;
  const auto w = static_cast<std::size_t>(fan_width);
  const std::size_t n = kBottlenecks + kLayers * w;
  auto fan_id = [&](int layer, int i) { return kBottlenecks + (layer - 1) * fan_width + i; };

  MrpSpec spec;
  spec.name = "fan";
  spec.start_state = 0;
  spec.transitions.resize(n);
  spec.terminal_states.assign(n, false);
  spec.observation_group.assign(n, 0);
  spec.observation_dim = kBottlenecks + kLayers;

  std::vector<double> r(w);
  for (std::size_t i = 0; i < w; ++i) r[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(w - 1);

  for (int b = 0; b < kBottlenecks; ++b) {
    spec.observation_group[static_cast<std::size_t>(b)] = b;
    for (int i = 0; i < fan_width; ++i) {
      spec.transitions[static_cast<std::size_t>(b)].push_back(
          Outcome{fan_id(b + 1, i), 1.0 / fan_width, r[static_cast<std::size_t>(i)], 0.0});
    }
  }
  for (int layer = 1; layer <= kLayers; ++layer) {
    for (int i = 0; i < fan_width; ++i) {
      const auto id = static_cast<std::size_t>(fan_id(layer, i));
      spec.observation_group[id] = kBottlenecks + layer - 1;
      if (layer == kLayers) {
        spec.terminal_states[id] = true;
      } else {
        spec.transitions[id] = {Outcome{layer, 1.0, -r[static_cast<std::size_t>(i)], 0.0}};
      }
    }
  }
  return spec;
}

bool is_bottleneck_state(int state_id) { return state_id >= 0 && state_id < 5; }

std::vector<int> gridworld_distractors() {
  // (1,1) (1,3) (2,2) (3,1) (3,3): interior cells, the border path stays clean.
  return {6, 8, 12, 16, 18};
}

MdpSpec build_noisy_gridworld() {
  constexpr int kSide = 5;
  constexpr int kGoal = kSide * kSide - 1;
  MdpSpec spec;
  spec.name = "gridworld";
  spec.start_state = 0;
  spec.num_actions = 4;
  spec.episode_cap = 50;
  spec.observation_dim = kSide * kSide;
  spec.transitions.resize(kSide * kSide);
  spec.terminal_states.assign(kSide * kSide, false);
  spec.terminal_states[kGoal] = true;
  for (int s = 0; s < kSide * kSide; ++s) spec.observation_group.push_back(s);

  std::vector<bool> noisy(kSide * kSide, false);
  for (int d : gridworld_distractors()) noisy[static_cast<std::size_t>(d)] = true;

  // Actions: 0 up, 1 right, 2 down, 3 left. Walls leave the agent in place.
  constexpr int dr[4] = {-1, 0, 1, 0};
  constexpr int dc[4] = {0, 1, 0, -1};
  for (int s = 0; s < kSide * kSide; ++s) {
    auto& row = spec.transitions[static_cast<std::size_t>(s)];
    row.resize(4);
    if (s == kGoal) continue;
    for (int a = 0; a < 4; ++a) {
      int r = s / kSide + dr[a];
      int c = s % kSide + dc[a];
      if (r < 0 || r >= kSide || c < 0 || c >= kSide) {
        r = s / kSide;
        c = s % kSide;
      }
      const int next = r * kSide + c;
      Outcome o{next, 1.0, 0.0, 0.0};
      if (next == kGoal) o.reward_mean = 1.0;
      if (noisy[static_cast<std::size_t>(next)] && next != s) o.reward_std = 1.0;
      row[static_cast<std::size_t>(a)] = {o};
    }
  }
  return spec;
}

MrpSpec parse_mrp_table(const std::string& text) {
  MrpSpec spec;
  spec.name = "table";
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  long obs_dim = -1;
  bool sized = false;
  auto need_states = [&]() {
    if (!sized) throw Error("line " + std::to_string(lineno) + ": 'states' must come first");
  };
  auto state_arg = [&](long v) {
    if (v < 0 || static_cast<std::size_t>(v) >= spec.num_states()) {
      throw Error("line " + std::to_string(lineno) + ": state " + std::to_string(v) + " out of range");
    }
    return static_cast<std::size_t>(v);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    bool ok = true;
    if (key == "name") {
      ok = static_cast<bool>(ls >> spec.name);
    } else if (key == "states") {
      long n = 0;
      ok = static_cast<bool>(ls >> n) && n > 0;
      if (ok) {
        spec.transitions.assign(static_cast<std::size_t>(n), {});
        spec.terminal_states.assign(static_cast<std::size_t>(n), false);
        spec.observation_group.resize(static_cast<std::size_t>(n));
        for (long s = 0; s < n; ++s) spec.observation_group[static_cast<std::size_t>(s)] = static_cast<int>(s);
        sized = true;
      }
    } else if (key == "start") {
      need_states();
      long s = 0;
      ok = static_cast<bool>(ls >> s);
      if (ok) spec.start_state = static_cast<int>(state_arg(s));
    } else if (key == "obs_dim") {
      ok = static_cast<bool>(ls >> obs_dim) && obs_dim > 0;
    } else if (key == "obs") {
      need_states();
      long s = 0, g = 0;
      ok = static_cast<bool>(ls >> s >> g);
      if (ok) spec.observation_group[state_arg(s)] = static_cast<int>(g);
    } else if (key == "terminal") {
      need_states();
      long s = 0;
      ok = static_cast<bool>(ls >> s);
      if (ok) spec.terminal_states[state_arg(s)] = true;
    } else if (key == "trans") {
      need_states();
      long from = 0, to = 0;
      Outcome o;
      ok = static_cast<bool>(ls >> from >> to >> o.prob >> o.reward_mean >> o.reward_std);
      if (ok) {
        o.next = static_cast<int>(state_arg(to));
        spec.transitions[state_arg(from)].push_back(o);
      }
    } else {
      throw Error("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    if (!ok) throw Error("line " + std::to_string(lineno) + ": malformed '" + key + "' entry");
  }
  if (!sized) throw Error("reward process table declares no states");
  spec.observation_dim = obs_dim > 0 ? static_cast<std::size_t>(obs_dim) : spec.num_states();
  spec.validate();
  reverse_topological(spec);
  return spec;
}

MrpSpec load_mrp_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open reward process table " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_mrp_table(buf.str());
}

ValueTable true_values(const MrpSpec& spec, double gamma_ref) {
  ValueTable table;
  table.gamma_ref = gamma_ref;
  table.values.assign(spec.num_states(), 0.0);
  for (int s : reverse_topological(spec)) {
    if (spec.terminal(s)) continue;
    double v = 0.0;
    for (const auto& o : spec.transitions[static_cast<std::size_t>(s)]) {
      if (!std::isfinite(o.reward_mean)) throw Error("non-finite expected reward out of state " + std::to_string(s));
      v += o.prob * (o.reward_mean + gamma_ref * table.values[static_cast<std::size_t>(o.next)]);
    }
    table.values[static_cast<std::size_t>(s)] = v;
  }
  return table;
}

double bellman_residual(const MrpSpec& spec, const ValueTable& table) {
  double worst = 0.0;
  for (std::size_t s = 0; s < spec.num_states(); ++s) {
    double target = 0.0;
    if (!spec.terminal(static_cast<int>(s))) {
      target = spec.expected_reward(static_cast<int>(s));
      for (const auto& o : spec.transitions[s]) {
        target += table.gamma_ref * o.prob * table.values[static_cast<std::size_t>(o.next)];
      }
    }
    worst = std::max(worst, std::fabs(table.values[s] - target));
  }
  return worst;
}

std::vector<double> visit_distribution(const MrpSpec& spec) {
  std::vector<int> order = reverse_topological(spec);
  std::vector<double> visits(spec.num_states(), 0.0);
  visits[static_cast<std::size_t>(spec.start_state)] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const int s = *it;
    if (spec.terminal(s)) continue;
    for (const auto& o : spec.transitions[static_cast<std::size_t>(s)]) {
      visits[static_cast<std::size_t>(o.next)] += o.prob * visits[static_cast<std::size_t>(s)];
    }
  }
  return visits;
}

double prediction_mse(const MrpSpec& spec, const ValueTable& table, const std::vector<double>& visits,
                      const std::function<double(int)>& estimate) {
  double num = 0.0, den = 0.0;
  for (std::size_t s = 0; s < spec.num_states(); ++s) {
    if (spec.terminal(static_cast<int>(s)) || visits[s] == 0.0) continue;
    const double err = estimate(static_cast<int>(s)) - table.values[s];
    num += visits[s] * err * err;
    den += visits[s];
  }
  return den > 0.0 ? num / den : 0.0;
}

double policy_return(const MdpSpec& spec, const PolicyFn& policy) {
  const std::size_t n = spec.num_states();
  std::vector<Eigen::VectorXd> probs(n);
  for (std::size_t s = 0; s < n; ++s) {
    if (!spec.terminal(static_cast<int>(s))) probs[s] = policy(static_cast<int>(s));
  }
  std::vector<double> remaining(n, 0.0), next(n, 0.0);
  for (std::size_t h = 0; h < spec.episode_cap; ++h) {
    for (std::size_t s = 0; s < n; ++s) {
      if (spec.terminal(static_cast<int>(s))) {
        next[s] = 0.0;
        continue;
      }
      double v = 0.0;
      for (std::size_t a = 0; a < spec.num_actions; ++a) {
        double q = 0.0;
        for (const auto& o : spec.transitions[s][a]) {
          q += o.prob * (o.reward_mean + remaining[static_cast<std::size_t>(o.next)]);
        }
        v += probs[s][static_cast<Eigen::Index>(a)] * q;
      }
      next[s] = v;
    }
    std::swap(remaining, next);
  }
  return remaining[static_cast<std::size_t>(spec.start_state)];
}

Trajectory sample_trajectory(const MrpSpec& spec, Rng& rng, std::size_t max_steps) {
  Trajectory traj;
  int s = spec.start_state;
  traj.state_ids.push_back(s);
  traj.observations.push_back(spec.observation(s));
  while (!spec.terminal(s) && (max_steps == 0 || traj.rewards.size() < max_steps)) {
    const int next = spec.transition(s, rng);
    traj.rewards.push_back(spec.reward(s, next, rng));
    traj.behavior_probs.push_back(1.0);
    traj.state_ids.push_back(next);
    traj.observations.push_back(spec.observation(next));
    s = next;
  }
  traj.terminal = spec.terminal(s);
  return traj;
}

Trajectory sample_segment(const MdpSpec& spec, EpisodeCursor& cursor, const PolicyFn& policy, Rng& rng,
                          std::size_t segment_length) {
  if (cursor.needs_reset) {
    cursor.state = spec.start_state;
    cursor.steps = 0;
    cursor.episode_return = 0.0;
    cursor.needs_reset = false;
  }
  Trajectory traj;
  traj.state_ids.push_back(cursor.state);
  traj.observations.push_back(spec.observation(cursor.state));
  while (traj.rewards.size() < segment_length) {
    const int s = cursor.state;
    const Eigen::VectorXd p = policy(s);
    const auto a = static_cast<int>(sample_discrete(p, rng));
    const int next = spec.transition(s, a, rng);
    const double r = spec.reward(s, a, next, rng);
    traj.actions.push_back(a);
    traj.behavior_probs.push_back(p[a]);
    traj.rewards.push_back(r);
    traj.state_ids.push_back(next);
    traj.observations.push_back(spec.observation(next));
    cursor.state = next;
    cursor.episode_return += r;
    ++cursor.steps;
    if (spec.terminal(next) || cursor.steps >= spec.episode_cap) {
      traj.terminal = spec.terminal(next);
      cursor.finished_returns.push_back(cursor.episode_return);
      cursor.needs_reset = true;
      break;
    }
  }
  return traj;
}

ActorHarness::ActorHarness(const MdpSpec& spec, std::size_t num_actors, std::size_t snapshot_lag, const Rng& rng,
                           std::size_t queue_capacity)
    : spec_(spec), snapshot_lag_(snapshot_lag), capacity_(std::max<std::size_t>(1, queue_capacity)) {
  if (num_actors == 0) throw Error("actor harness needs at least one actor");
  for (std::size_t i = 0; i < num_actors; ++i) actors_.push_back(Actor{EpisodeCursor{}, rng.split(i), nullptr});
}

void ActorHarness::publish(std::shared_ptr<const PolicySnapshot> snapshot) {
  std::lock_guard lock(mutex_);
  published_ = std::move(snapshot);
}

VersionedSegment ActorHarness::run_actor(Actor& actor, std::size_t index, std::size_t segment_length) {
  std::shared_ptr<const PolicySnapshot> current;
  {
    std::lock_guard lock(mutex_);
    current = published_;
  }
  if (!current) throw Error("actor harness has no published policy");
  if (!actor.held || current->version - actor.held->version > static_cast<long>(snapshot_lag_)) {
    actor.held = current;
  }
  const PolicySnapshot& snap = *actor.held;
  PolicyFn policy = [&](int s) {
    return policy_probs(snap.params, spec_.observation(s), conditioning_input(snap.eta, s));
  };
  VersionedSegment seg;
  seg.traj = sample_segment(spec_, actor.cursor, policy, actor.rng, segment_length);
  seg.policy_version = snap.version;
  seg.actor = index;
  return seg;
}

std::vector<VersionedSegment> ActorHarness::collect(std::size_t count, std::size_t segment_length) {
  std::vector<VersionedSegment> out;
  out.reserve(count);
  if (actors_.size() == 1) {
    for (std::size_t k = 0; k < count; ++k) out.push_back(run_actor(actors_[0], 0, segment_length));
    return out;
  }

  std::size_t issued = 0;
  std::vector<std::thread> workers;
  for (std::size_t i = 0; i < actors_.size(); ++i) {
    workers.emplace_back([this, i, count, segment_length, &issued]() {
      for (;;) {
        {
          std::lock_guard lock(mutex_);
          if (issued >= count) return;
          ++issued;
        }
        VersionedSegment seg = run_actor(actors_[i], i, segment_length);
        std::unique_lock lock(mutex_);
        not_full_.wait(lock, [this] { return queue_.size() < capacity_; });
        queue_.push_back(std::move(seg));
        not_empty_.notify_one();
      }
    });
  }
  while (out.size() < count) {
    std::unique_lock lock(mutex_);
    not_empty_.wait(lock, [this] { return !queue_.empty(); });
    out.push_back(std::move(queue_.front()));
    queue_.pop_front();
    not_full_.notify_one();
  }
  for (auto& w : workers) w.join();
  return out;
}

std::vector<double> ActorHarness::take_finished_returns() {
  std::vector<double> out;
  for (auto& a : actors_) {
    out.insert(out.end(), a.cursor.finished_returns.begin(), a.cursor.finished_returns.end());
    a.cursor.finished_returns.clear();
  }
  return out;
}

}  // namespace metagrad
