#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "rlda/filters.hpp"
#include "rlda/params.hpp"
#include "rlda/rng.hpp"
#include "rlda/ssm.hpp"
#include "rlda/tape.hpp"
#include "rlda/tensor.hpp"

namespace rlda {

enum class ActorKind { mlp, conv_l96 };
enum class CriticPool { sum, mean };

std::string to_string(ActorKind k);
ActorKind actor_kind_from_string(const std::string& s);
std::string to_string(CriticPool p);
CriticPool critic_pool_from_string(const std::string& s);

// Stochastic transition network: x_next = F(x[, c]) + xi, xi ~ N(0, diag(q)),
// q = softplus(beta) floored at 1e-12. The conv variant is the periodic
// conv(1->48,k5) -> bilinear -> conv(32->17,k5) -> tanh -> conv(17->1,k1)
// stack; the MLP has `layers` tanh hidden layers of `units` and a linear head.
struct ActorArch {
  ActorKind kind = ActorKind::mlp;
  int64_t state_dim = 0;
  int64_t control_dim = 0;  // appended to the input when > 0
  int64_t layers = 4;
  int64_t units = 64;
  bool residual = false;  // output x + F(x) instead of F(x)

  nlohmann::json to_json() const;
  static ActorArch from_json(const nlohmann::json& j);
};

// Set critic V(s) = phi3( pool_i phi1(x_i) + phi2(y[, c]) ); each phi is an
// MLP with `layers` tanh hidden layers; phi1/phi2 output the shared embedding
// of width phi1_units, phi3 outputs a scalar.
struct CriticArch {
  int64_t state_dim = 0;
  int64_t obs_dim = 0;
  int64_t control_dim = 0;
  int64_t layers = 2;
  int64_t phi1_units = 32;
  int64_t phi2_units = 32;
  int64_t phi3_units = 64;
  CriticPool pool = CriticPool::sum;

  nlohmann::json to_json() const;
  static CriticArch from_json(const nlohmann::json& j);
};

struct Policy {
  ActorArch actor_arch;
  CriticArch critic_arch;
  ParamStore actor;   // network weights plus "beta"
  ParamStore critic;  // phi1.*, phi2.*, phi3.*
};

Policy make_policy(const ActorArch& aa, const CriticArch& ca, Rng& rng);

// Architecture presets keyed by the system (widths grow with state size).
ActorArch default_actor_arch(const SystemSpec& spec);
CriticArch default_critic_arch(const SystemSpec& spec);
Policy default_policy(const SystemSpec& spec, Rng& rng);

// ---- tape graph builders (differentiable paths) ---------------------------

// Network mean for a stacked particle matrix. x_state is [B, m]; control is a
// node of [B, dc] rows or kNoNode.
inline constexpr NodeId kNoNode = -1;
NodeId actor_forward(Tape& t, const ActorArch& arch, const TapeBinding& b, NodeId x_state,
                     NodeId control);

// softplus(beta) with the 1e-12 floor, shape [m].
NodeId actor_variance_node(Tape& t, const TapeBinding& b);

// Per-transition action log-prob for stacked transitions: x, xhat are
// [B*group, m] with `group` particles per transition; controls_tiled matches
// row-for-row when the actor takes controls. Returns [B].
NodeId actor_logprob_node(Tape& t, const Policy& p, const TapeBinding& b, const Tensor& x,
                          const Tensor& xhat, const Tensor* controls_tiled, int64_t group);

// Critic values for stacked states: particles [B*group, m], obs [B, n],
// controls [B, dc] or null. Returns [B].
NodeId critic_value_node(Tape& t, const Policy& p, const TapeBinding& b, const Tensor& particles,
                         const Tensor& obs, const Tensor* controls, int64_t group);

// ---- gradient-free evaluation paths ---------------------------------------

// control points at the dc-vector c_t shared by all particles (null if none;
// ignored when the architecture takes no control input).
Tensor actor_mean(const Policy& p, const Tensor& particles, const double* control);

struct ActorSample {
  Tensor particles;             // [N, m] forecast
  std::vector<double> logprob;  // per particle
  double total = 0.0;
};

// Particle i draws its noise from rng.substream(i).
ActorSample actor_sample(const Policy& p, const Tensor& particles, const double* control,
                         Rng& rng);

double actor_logprob(const Policy& p, const Tensor& x, const Tensor& xhat,
                     const double* control);

double critic_value(const Policy& p, const Tensor& particles, const Tensor& y,
                    const double* control);

std::vector<double> actor_variance_values(const Policy& p);

// Transition for run_filter; the policy must outlive the callable.
TransitionFn surrogate_transition(const Policy& p);

// One checkpoint document holds both stores (names prefixed actor./critic.)
// and the architecture descriptors in meta.
void save_policy(const std::string& path, const Policy& p,
                 const nlohmann::json& extra_meta = nlohmann::json::object());
Policy load_policy(const std::string& path);

}  // namespace rlda
