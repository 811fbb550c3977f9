#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "metagrad/approximators.hpp"
#include "metagrad/common.hpp"
#include "metagrad/returns.hpp"

namespace metagrad {

/// One possible successor with its reward distribution N(mean, std^2).
struct Outcome {
  int next = 0;
  double prob = 1.0;
  double reward_mean = 0.0;
  double reward_std = 0.0;
};

/// Tabular Markov reward process. Rewards are paid on leaving a state.
struct MrpSpec {
  std::string name;
  int start_state = 0;
  std::vector<std::vector<Outcome>> transitions;
  std::vector<bool> terminal_states;
  std::vector<int> observation_group;  // states sharing a group are aliased
  std::size_t observation_dim = 0;

  std::size_t num_states() const { return transitions.size(); }
  bool terminal(int s) const { return terminal_states.at(static_cast<std::size_t>(s)); }
  Eigen::VectorXd observation(int s) const;
  int transition(int s, Rng& rng) const;
  double reward(int s, int next, Rng& rng) const;
  double expected_reward(int s) const;

  /// Throws on dangling successors, bad probabilities or missing fields.
  void validate() const;
};

/// Tabular MDP with an episode length cap.
struct MdpSpec {
  std::string name;
  int start_state = 0;
  std::size_t num_actions = 0;
  std::vector<std::vector<std::vector<Outcome>>> transitions;  // [state][action]
  std::vector<bool> terminal_states;
  std::vector<int> observation_group;
  std::size_t observation_dim = 0;
  std::size_t episode_cap = 50;

  std::size_t num_states() const { return transitions.size(); }
  bool terminal(int s) const { return terminal_states.at(static_cast<std::size_t>(s)); }
  Eigen::VectorXd observation(int s) const;
  int transition(int s, int a, Rng& rng) const;
  double reward(int s, int a, int next, Rng& rng) const;
};

struct ValueTable {
  std::vector<double> values;
  double gamma_ref = 1.0;
};

/// Ten-state chain alternating deterministic +0.1 and N(0,1) rewards.
/// State k of the chain (1-based) has id k-1; id 10 is terminal.
MrpSpec build_signal_noise_mrp();
/// True for chain ids whose outgoing reward is the deterministic signal.
bool is_signal_state(int state_id);

/// Nine-step process alternating bottleneck and aliased fan layers.
///
/// Bottlenecks have ids 0..4. Fan layer L (1..5) slot i has id
/// 5 + (L-1)*fan_width + i; the fifth layer is terminal. Entering fan slot i
/// pays r_i, leaving it pays -r_i, with r_i evenly spaced over [-1, 1].
MrpSpec build_fan_mrp(int fan_width = 5);
bool is_bottleneck_state(int state_id);

/// 5x5 grid, start at (0,0), +1 terminal goal at (4,4), N(0,1) distractors.
MdpSpec build_noisy_gridworld();
std::vector<int> gridworld_distractors();

/// Reads the declarative MRP table format (see README).
MrpSpec load_mrp_table(const std::string& path);
MrpSpec parse_mrp_table(const std::string& text);

/// Exact expected discounted return per state by backward induction.
ValueTable true_values(const MrpSpec& spec, double gamma_ref);
/// Largest |V(s) - E[R] - gamma E[V(s')]| over states.
double bellman_residual(const MrpSpec& spec, const ValueTable& table);
/// Expected number of visits per episode to each state.
std::vector<double> visit_distribution(const MrpSpec& spec);
/// Visit-weighted squared error of `estimate` against the table over non-terminal states.
double prediction_mse(const MrpSpec& spec, const ValueTable& table, const std::vector<double>& visits,
                      const std::function<double(int)>& estimate);

using PolicyFn = std::function<Eigen::VectorXd(int state)>;

/// Expected undiscounted return of a policy from the start state, capped at the episode limit.
double policy_return(const MdpSpec& spec, const PolicyFn& policy);

/// Full episode (max_steps = 0) or the first max_steps transitions of one.
Trajectory sample_trajectory(const MrpSpec& spec, Rng& rng, std::size_t max_steps = 0);

/// Position of an actor inside an ongoing episode.
struct EpisodeCursor {
  int state = 0;
  std::size_t steps = 0;
  double episode_return = 0.0;
  bool needs_reset = true;
  std::vector<double> finished_returns;
};

/// Continues the cursor's episode for up to segment_length steps, stopping early at episode end.
Trajectory sample_segment(const MdpSpec& spec, EpisodeCursor& cursor, const PolicyFn& policy, Rng& rng,
                          std::size_t segment_length);

/// Versioned policy published by the learner.
struct PolicySnapshot {
  AgentParams params;
  EtaView eta;
  long version = 0;
};

struct VersionedSegment {
  Trajectory traj;
  long policy_version = 0;
  std::size_t actor = 0;
};

/// Actors sampling segments with possibly stale snapshots.
///
/// An actor refreshes its snapshot only when the published version is more
/// than `snapshot_lag` updates ahead. A single actor runs on the caller's
/// thread and is deterministic per seed; several actors run on their own
/// threads and feed a bounded queue.
class ActorHarness {
public:
  ActorHarness(const MdpSpec& spec, std::size_t num_actors, std::size_t snapshot_lag, const Rng& rng,
               std::size_t queue_capacity = 64);

  void publish(std::shared_ptr<const PolicySnapshot> snapshot);
  std::vector<VersionedSegment> collect(std::size_t count, std::size_t segment_length);

  /// Drains undiscounted returns of episodes finished since the last call.
  std::vector<double> take_finished_returns();

private:
  struct Actor {
    EpisodeCursor cursor;
    Rng rng;
    std::shared_ptr<const PolicySnapshot> held;
  };

  VersionedSegment run_actor(Actor& actor, std::size_t index, std::size_t segment_length);

  MdpSpec spec_;
  std::size_t snapshot_lag_;
  std::size_t capacity_;
  std::vector<Actor> actors_;
  std::shared_ptr<const PolicySnapshot> published_;
  std::mutex mutex_;
  std::condition_variable not_full_;
  std::condition_variable not_empty_;
  std::deque<VersionedSegment> queue_;
};

}  // namespace metagrad
