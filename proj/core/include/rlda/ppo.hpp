#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "rlda/mdpenv.hpp"
#include "rlda/params.hpp"
#include "rlda/ssm.hpp"
#include "rlda/surrogate.hpp"

namespace rlda {

struct TrainConfig {
  int64_t iterations = 300;
  int64_t epochs = 10;
  int64_t minibatch = 512;
  double lr_actor = 3e-4;
  double lr_critic = 1e-3;
  double gamma = 1.0;   // the MDP matches the likelihood objective at 1
  double lambda = 0.9;
  double clip_eps = 0.2;
  double grad_clip = 5.0;  // global l2 norm per update, <= 0 disables
  int64_t n_particles = 20;
  FilterMethod backend = FilterMethod::enkf;
  bool normalize_advantages = true;  // off for value-level oracle tests
  int64_t plateau_window = 20;       // <= 0 disables early stopping
  double plateau_rel = 1e-3;
  uint64_t seed = 0;
  int workers = 1;
  std::string log_path;         // per-iteration CSV when non-empty
  std::string checkpoint_path;  // best policy JSON when non-empty

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// delta_t = r_t + gamma V(s_{t+1}) - V(s_t) with V at the terminal state 0,
// swept backward as A_t = delta_t + gamma lambda A_{t+1}. Value targets are
// A_t + V(s_t).
std::pair<std::vector<double>, std::vector<double>> compute_gae(const std::vector<double>& rewards,
                                                                const std::vector<double>& values,
                                                                double gamma, double lambda);

// Runs compute_gae over every completed episode of the buffer in place.
void fill_gae(RolloutBuffer& buf, double gamma, double lambda);

// Clipped-surrogate objective, negated for minimization. Ratios come from
// exp(logprob_theta - behavior_logprob); `minibatch` indexes buf.transitions.
// With `normalize`, advantages are standardized across the minibatch first.
NodeId actor_loss_node(Tape& t, const Policy& p, const TapeBinding& b, const RolloutBuffer& buf,
                       const std::vector<int64_t>& minibatch, double clip_eps, bool normalize);

// Mean squared error of the critic against the GAE value targets.
NodeId critic_loss_node(Tape& t, const Policy& p, const TapeBinding& b, const RolloutBuffer& buf,
                        const std::vector<int64_t>& minibatch);

// Gradient-free values of the same losses.
double actor_loss(const Policy& p, const RolloutBuffer& buf, const std::vector<int64_t>& minibatch,
                  double clip_eps, bool normalize);
double critic_loss(const Policy& p, const RolloutBuffer& buf,
                   const std::vector<int64_t>& minibatch);

// Adaptive moment estimation over one ParamStore (betas 0.9/0.999, eps 1e-8,
// bias-corrected). The store must outlive the optimizer.
class Adam {
 public:
  Adam(ParamStore& store, double lr);
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  void reset();  // drops the moment estimates and the step count
  // One update from the store's accumulated grads; the global grad norm is
  // clipped at `clip` first (<= 0 disables). Returns the pre-clip norm.
  double step(double clip);

 private:
  ParamStore* store_;
  double lr_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
};

struct IterationLog {
  int64_t iteration = 0;
  double mean_return = std::numeric_limits<double>::quiet_NaN();
  double actor_loss = std::numeric_limits<double>::quiet_NaN();
  double critic_loss = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;
};

struct TrainResult {
  Policy policy;  // best mean-return checkpoint (the init when 0 iterations)
  std::vector<IterationLog> log;
  double best_return = -std::numeric_limits<double>::infinity();
  int64_t best_iteration = -1;
  bool plateaued = false;
  int64_t lr_halvings = 0;
};

// Algorithm: per iteration, collect one rollout over the training split,
// compute GAE, then run epochs of shuffled minibatch updates (actor step,
// then critic step). The best-return policy is checkpointed on every
// improvement and returned. A non-finite loss/gradient (or a fully failed
// rollout) restores that checkpoint and halves both learning rates once; a
// second occurrence aborts with diagnostics. Fixed seeds reproduce bitwise.
TrainResult train(const Dataset& ds, const TrainConfig& cfg, const Policy* init = nullptr);

// CSV with columns iteration,mean_return,actor_loss,critic_loss,grad_norm,wall_ms.
void write_training_log(const std::string& path, const std::vector<IterationLog>& log);

}  // namespace rlda
