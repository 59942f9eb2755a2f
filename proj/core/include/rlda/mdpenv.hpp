#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rlda/filters.hpp"
#include "rlda/rng.hpp"
#include "rlda/ssm.hpp"
#include "rlda/surrogate.hpp"
#include "rlda/tensor.hpp"

namespace rlda {

// One observation trajectory viewed as a finite-horizon episode. The backend
// decides how the ensemble is conditioned on each observation (EnKF analysis
// vs importance weights + resampling); the reward is the marginal-likelihood
// increment in both cases.
struct Episode {
  const SystemSpec* spec = nullptr;   // resolved r_diag required
  const Trajectory* traj = nullptr;
  FilterMethod backend = FilterMethod::enkf;
  int64_t n_particles = 20;
};

struct MdpState {
  Tensor particles;             // [N, m] posterior ensemble x_t
  Tensor y_next;                // [n] upcoming observation; empty when terminal
  std::vector<int32_t> obs_idx; // subsample indices for y_next, may be empty
  std::vector<double> control;  // c_t, empty when the system has none
  int64_t t = 0;
  bool terminal = false;
};

// Draws x_0 ~ N(mu0, diag(sigma0)) and loads y_1 (+ c_0, obs indices).
MdpState env_reset(const Episode& ep, Rng& rng);

struct StepResult {
  MdpState next;
  double reward = 0.0;
};

// Action = forecast particles [N, m]. Reward is enkf_loglik_increment of the
// mapped action particles against y_next (same formula for both backends);
// the next ensemble comes from the backend's conditioning step. `rng` feeds
// whichever of the perturbed-observation draw / resampling the backend uses.
StepResult env_step(const Episode& ep, const MdpState& state, const Tensor& action, Rng& rng);

// Flattened (s_t, a_t, r_t) record plus everything the losses need later:
// the behavior log-prob pins the sampling policy, `value` is the critic at
// collection time, advantage/value_target are filled by the GAE pass.
struct Transition {
  int64_t episode = 0;
  int64_t t = 0;
  Tensor state_particles;       // [N, m]
  Tensor y;                     // [n] observation the transition was scored on
  std::vector<double> control;  // c_t or empty
  Tensor action;                // [N, m]
  double reward = 0.0;
  double behavior_logprob = 0.0;
  double value = 0.0;
  double advantage = 0.0;
  double value_target = 0.0;
};

struct EpisodeFailure {
  int64_t episode = 0;
  std::string what;
};

struct RolloutBuffer {
  std::vector<Transition> transitions;
  // [begin, end) into transitions per completed episode, in episode order.
  std::vector<std::pair<int64_t, int64_t>> episode_ranges;
  std::vector<EpisodeFailure> failures;
  double mean_return = 0.0;  // over completed episodes

  int64_t size() const { return static_cast<int64_t>(transitions.size()); }
};

struct RolloutOptions {
  FilterMethod backend = FilterMethod::enkf;
  int64_t n_particles = 20;
  int workers = 1;
};

// How rollouts draw actions and score states; policy_rollout adapts a Policy.
// The sampler sees (state particles, c_t, rng), the value fn (s_t) likewise.
struct RolloutHooks {
  std::function<ActorSample(const Tensor& particles, const double* control, Rng& rng)> sample;
  std::function<double(const MdpState& state)> value;
};

RolloutHooks policy_hooks(const Policy& p);

// Plays every episode to its horizon: reset, then T rounds of sample -> step.
// Episode k draws from rng.substream(k) (and step t from .substream(1, t)
// within that), so serial and parallel collection agree bitwise and the
// buffer order is episode order. A failing episode is recorded in `failures`
// and contributes nothing else; all episodes failing is an error.
RolloutBuffer rollout(const RolloutHooks& hooks, const SystemSpec& spec,
                      const std::vector<Trajectory>& episodes, const RolloutOptions& opt,
                      Rng& rng);

inline RolloutBuffer rollout(const Policy& p, const SystemSpec& spec,
                             const std::vector<Trajectory>& episodes, const RolloutOptions& opt,
                             Rng& rng) {
  return rollout(policy_hooks(p), spec, episodes, opt, rng);
}

}  // namespace rlda
