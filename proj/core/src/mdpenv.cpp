#include "rlda/mdpenv.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "rlda/errors.hpp"
#include "rlda/parallel.hpp"

namespace rlda {

namespace {

void check_episode(const Episode& ep, const char* who) {
  if (!ep.spec || !ep.traj) throw ContractError(std::string(who) + ": episode is unbound");
  if (ep.spec->r_diag.empty())
    throw ConfigError(std::string(who) + ": observation noise is unresolved (generate data first)");
  if (ep.traj->steps() < 1) throw ContractError(std::string(who) + ": episode horizon is 0");
  if (ep.n_particles < (ep.backend == FilterMethod::enkf ? 2 : 1))
    throw ContractError(std::string(who) + ": too few particles for the backend");
}

// Loads y_{t+1} (row t of obs), its subsample indices, and c_t into `s`.
void load_step_context(const Episode& ep, int64_t t, MdpState& s) {
  const Trajectory& traj = *ep.traj;
  const int64_t n = traj.obs.dim(1);
  s.y_next = Tensor({n});
  std::copy(traj.obs.data() + t * n, traj.obs.data() + (t + 1) * n, s.y_next.data());
  s.obs_idx = traj.obs_idx.empty() ? std::vector<int32_t>{} : traj.obs_idx[t];
  if (!traj.controls.empty()) {
    const int64_t m = traj.controls.dim(1);
    s.control.assign(traj.controls.data() + t * m, traj.controls.data() + (t + 1) * m);
  } else {
    s.control.clear();
  }
}

}  // namespace

MdpState env_reset(const Episode& ep, Rng& rng) {
  check_episode(ep, "env_reset");
  MdpState s;
  s.particles = sample_prior_ensemble(*ep.spec, ep.n_particles, rng);
  s.t = 0;
  s.terminal = false;
  load_step_context(ep, 0, s);
  return s;
}

StepResult env_step(const Episode& ep, const MdpState& state, const Tensor& action, Rng& rng) {
  check_episode(ep, "env_step");
  if (state.terminal) throw ContractError("env_step: episode is already terminal");
  const int64_t N = state.particles.dim(0), m = state.particles.dim(1);
  if (action.rank() != 2 || action.dim(0) != N || action.dim(1) != m)
    throw DimensionError("env_step: action must match the state ensemble [N, m]");
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = 0; j < m; ++j)
      if (!std::isfinite(action.at2(i, j)))
        throw NumericError("env_step: non-finite action particle " + std::to_string(i) +
                           " at step " + std::to_string(state.t));

  const SystemSpec& spec = *ep.spec;
  Tensor pred = apply_obs_batch(spec.obs_op, action, state.obs_idx);

  StepResult out;
  out.reward = enkf_loglik_increment(pred, state.y_next, spec.r_diag);
  if (ep.backend == FilterMethod::enkf) {
    out.next.particles = enkf_analysis(action, pred, state.y_next, spec.r_diag, rng);
  } else {
    auto [w, inc] = pf_weights(pred, state.y_next, spec.r_diag);
    (void)inc;  // identical to out.reward by construction
    out.next.particles = gather_rows(action, systematic_resample(w, rng));
  }

  out.next.t = state.t + 1;
  if (out.next.t == ep.traj->steps()) {
    out.next.terminal = true;
  } else {
    out.next.terminal = false;
    load_step_context(ep, out.next.t, out.next);
  }
  return out;
}

RolloutHooks policy_hooks(const Policy& p) {
  RolloutHooks h;
  h.sample = [&p](const Tensor& particles, const double* control, Rng& rng) {
    return actor_sample(p, particles, control, rng);
  };
  h.value = [&p](const MdpState& s) {
    return critic_value(p, s.particles, s.y_next, s.control.empty() ? nullptr : s.control.data());
  };
  return h;
}

RolloutBuffer rollout(const RolloutHooks& hooks, const SystemSpec& spec,
                      const std::vector<Trajectory>& episodes, const RolloutOptions& opt,
                      Rng& rng) {
  if (!hooks.sample || !hooks.value) throw ContractError("rollout: hooks are unbound");
  const int64_t K = static_cast<int64_t>(episodes.size());
  if (K < 1) throw ContractError("rollout: needs at least one episode");

  struct EpisodeOut {
    std::vector<Transition> transitions;
    double ret = 0.0;
    bool ok = false;
    std::string what;
  };
  std::vector<EpisodeOut> outs(static_cast<size_t>(K));

  parallel_for(K, opt.workers, [&](int64_t k) {
    EpisodeOut& out = outs[static_cast<size_t>(k)];
    Episode ep{&spec, &episodes[static_cast<size_t>(k)], opt.backend, opt.n_particles};
    Rng ep_rng = rng.substream(static_cast<uint64_t>(k));
    try {
      Rng reset_rng = ep_rng.substream(0x1c);
      MdpState state = env_reset(ep, reset_rng);
      const int64_t T = ep.traj->steps();
      out.transitions.reserve(static_cast<size_t>(T));
      for (int64_t t = 0; t < T; ++t) {
        Rng step_rng = ep_rng.substream(1, static_cast<uint64_t>(t));
        Rng act_rng = step_rng.substream(0);
        const double* control = state.control.empty() ? nullptr : state.control.data();
        ActorSample a = hooks.sample(state.particles, control, act_rng);

        Transition tr;
        tr.episode = k;
        tr.t = t;
        tr.value = hooks.value(state);
        tr.behavior_logprob = a.total;
        tr.y = state.y_next;
        tr.control = state.control;

        Rng env_rng = step_rng.substream(1);
        StepResult step = env_step(ep, state, a.particles, env_rng);
        tr.reward = step.reward;
        tr.state_particles = std::move(state.particles);
        tr.action = std::move(a.particles);
        out.ret += tr.reward;
        out.transitions.push_back(std::move(tr));
        state = std::move(step.next);
      }
      out.ok = true;
    } catch (const std::exception& e) {
      out.ok = false;
      out.what = e.what();
      out.transitions.clear();
      out.ret = 0.0;
    }
  });

  RolloutBuffer buf;
  double ret_sum = 0.0;
  int64_t completed = 0;
  for (int64_t k = 0; k < K; ++k) {
    EpisodeOut& out = outs[static_cast<size_t>(k)];
    if (!out.ok) {
      buf.failures.push_back({k, out.what});
      std::fprintf(stderr, "warning: episode %lld failed: %s\n", static_cast<long long>(k),
                   out.what.c_str());
      continue;
    }
    const int64_t begin = buf.size();
    for (auto& tr : out.transitions) buf.transitions.push_back(std::move(tr));
    buf.episode_ranges.emplace_back(begin, buf.size());
    ret_sum += out.ret;
    ++completed;
  }
  if (completed == 0)
    throw NumericError("rollout: every episode failed; first error: " + buf.failures[0].what);
  buf.mean_return = ret_sum / static_cast<double>(completed);
  return buf;
}

}  // namespace rlda
