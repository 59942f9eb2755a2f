#include "rlda/ppo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "rlda/errors.hpp"

namespace rlda {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// FNV-1a over the behavior log-prob bytes, in buffer order.
uint64_t behavior_hash(const RolloutBuffer& buf) {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& tr : buf.transitions) {
    const auto* p = reinterpret_cast<const unsigned char*>(&tr.behavior_logprob);
    for (size_t i = 0; i < sizeof(double); ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

// Stacks the minibatch transitions; every entry must share the ensemble
// shape (rollout guarantees it within one buffer).
struct Batch {
  int64_t B = 0, N = 0, m = 0, n = 0;
  Tensor state;   // [B*N, m]
  Tensor action;  // [B*N, m]
  Tensor obs;     // [B, n]
  Tensor control_rows;   // [B, dc] when dc > 0
  Tensor control_tiled;  // [B*N, dc] when dc > 0
  Tensor lp_old;  // [B]
  Tensor adv;     // [B]
  Tensor target;  // [B]
};

Batch assemble(const RolloutBuffer& buf, const std::vector<int64_t>& mb, int64_t dc,
               const char* who) {
  if (mb.empty()) throw ContractError(std::string(who) + ": empty minibatch");
  Batch out;
  out.B = static_cast<int64_t>(mb.size());
  const Transition& first = buf.transitions.at(static_cast<size_t>(mb[0]));
  out.N = first.state_particles.dim(0);
  out.m = first.state_particles.dim(1);
  out.n = first.y.numel();
  out.state = Tensor({out.B * out.N, out.m});
  out.action = Tensor({out.B * out.N, out.m});
  out.obs = Tensor({out.B, out.n});
  if (dc > 0) {
    out.control_rows = Tensor({out.B, dc});
    out.control_tiled = Tensor({out.B * out.N, dc});
  }
  out.lp_old = Tensor({out.B});
  out.adv = Tensor({out.B});
  out.target = Tensor({out.B});

  for (int64_t k = 0; k < out.B; ++k) {
    const Transition& tr = buf.transitions.at(static_cast<size_t>(mb[static_cast<size_t>(k)]));
    if (tr.state_particles.dim(0) != out.N || tr.state_particles.dim(1) != out.m ||
        tr.y.numel() != out.n)
      throw ContractError(std::string(who) + ": transitions mix ensemble shapes");
    std::copy_n(tr.state_particles.data(), out.N * out.m, out.state.data() + k * out.N * out.m);
    std::copy_n(tr.action.data(), out.N * out.m, out.action.data() + k * out.N * out.m);
    std::copy_n(tr.y.data(), out.n, out.obs.data() + k * out.n);
    if (dc > 0) {
      if (static_cast<int64_t>(tr.control.size()) != dc)
        throw ContractError(std::string(who) + ": transition lacks the control input");
      std::copy_n(tr.control.data(), dc, out.control_rows.data() + k * dc);
      for (int64_t i = 0; i < out.N; ++i)
        std::copy_n(tr.control.data(), dc, out.control_tiled.data() + (k * out.N + i) * dc);
    }
    out.lp_old.data()[k] = tr.behavior_logprob;
    out.adv.data()[k] = tr.advantage;
    out.target.data()[k] = tr.value_target;
  }
  return out;
}

void standardize(Tensor& adv) {
  const int64_t B = adv.numel();
  if (B < 2) return;
  double mean = 0.0;
  for (int64_t k = 0; k < B; ++k) mean += adv.data()[k];
  mean /= static_cast<double>(B);
  double var = 0.0;
  for (int64_t k = 0; k < B; ++k) {
    const double d = adv.data()[k] - mean;
    var += d * d;
  }
  const double sd = std::sqrt(var / static_cast<double>(B - 1));
  for (int64_t k = 0; k < B; ++k) adv.data()[k] = (adv.data()[k] - mean) / (sd + 1e-8);
}

}  // namespace

void TrainConfig::validate() const {
  if (iterations < 0 || epochs < 1 || minibatch < 1)
    throw ConfigError("TrainConfig: iterations/epochs/minibatch out of range");
  if (!(lr_actor > 0.0) || !(lr_critic > 0.0))
    throw ConfigError("TrainConfig: learning rates must be positive");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("TrainConfig: gamma must be in [0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("TrainConfig: lambda must be in [0, 1]");
  if (!(clip_eps > 0.0)) throw ConfigError("TrainConfig: clip_eps must be positive");
  if (n_particles < 2) throw ConfigError("TrainConfig: needs at least 2 particles");
  if (workers < 1) throw ConfigError("TrainConfig: workers must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"iterations", iterations},
          {"epochs", epochs},
          {"minibatch", minibatch},
          {"lr_actor", lr_actor},
          {"lr_critic", lr_critic},
          {"gamma", gamma},
          {"lambda", lambda},
          {"clip_eps", clip_eps},
          {"grad_clip", grad_clip},
          {"n_particles", n_particles},
          {"backend", backend == FilterMethod::pf ? "pf" : "enkf"},
          {"normalize_advantages", normalize_advantages},
          {"plateau_window", plateau_window},
          {"plateau_rel", plateau_rel},
          {"seed", seed},
          {"workers", workers}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("iterations")) c.iterations = j.at("iterations").get<int64_t>();
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int64_t>();
  if (j.contains("minibatch")) c.minibatch = j.at("minibatch").get<int64_t>();
  if (j.contains("lr_actor")) c.lr_actor = j.at("lr_actor").get<double>();
  if (j.contains("lr_critic")) c.lr_critic = j.at("lr_critic").get<double>();
  if (j.contains("gamma")) c.gamma = j.at("gamma").get<double>();
  if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
  if (j.contains("clip_eps")) c.clip_eps = j.at("clip_eps").get<double>();
  if (j.contains("grad_clip")) c.grad_clip = j.at("grad_clip").get<double>();
  if (j.contains("n_particles")) c.n_particles = j.at("n_particles").get<int64_t>();
  if (j.contains("backend")) c.backend = filter_method_from_string(j.at("backend").get<std::string>());
  if (j.contains("normalize_advantages"))
    c.normalize_advantages = j.at("normalize_advantages").get<bool>();
  if (j.contains("plateau_window")) c.plateau_window = j.at("plateau_window").get<int64_t>();
  if (j.contains("plateau_rel")) c.plateau_rel = j.at("plateau_rel").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("workers")) c.workers = j.at("workers").get<int>();
  c.validate();
  return c;
}

std::pair<std::vector<double>, std::vector<double>> compute_gae(const std::vector<double>& rewards,
                                                                const std::vector<double>& values,
                                                                double gamma, double lambda) {
  if (rewards.size() != values.size())
    throw ContractError("compute_gae: rewards and values lengths differ");
  const int64_t T = static_cast<int64_t>(rewards.size());
  std::vector<double> adv(rewards.size()), targets(rewards.size());
  double a_next = 0.0, v_next = 0.0;  // V at the terminal state is 0
  for (int64_t t = T - 1; t >= 0; --t) {
    const size_t i = static_cast<size_t>(t);
    const double delta = rewards[i] + gamma * v_next - values[i];
    a_next = delta + gamma * lambda * a_next;
    adv[i] = a_next;
    targets[i] = a_next + values[i];
    v_next = values[i];
  }
  return {std::move(adv), std::move(targets)};
}

void fill_gae(RolloutBuffer& buf, double gamma, double lambda) {
  for (const auto& [begin, end] : buf.episode_ranges) {
    std::vector<double> rewards, values;
    rewards.reserve(static_cast<size_t>(end - begin));
    values.reserve(static_cast<size_t>(end - begin));
    for (int64_t i = begin; i < end; ++i) {
      rewards.push_back(buf.transitions[static_cast<size_t>(i)].reward);
      values.push_back(buf.transitions[static_cast<size_t>(i)].value);
    }
    auto [adv, targets] = compute_gae(rewards, values, gamma, lambda);
    for (int64_t i = begin; i < end; ++i) {
      buf.transitions[static_cast<size_t>(i)].advantage = adv[static_cast<size_t>(i - begin)];
      buf.transitions[static_cast<size_t>(i)].value_target =
          targets[static_cast<size_t>(i - begin)];
    }
  }
}

NodeId actor_loss_node(Tape& t, const Policy& p, const TapeBinding& b, const RolloutBuffer& buf,
                       const std::vector<int64_t>& minibatch, double clip_eps, bool normalize) {
  if (!(clip_eps > 0.0)) throw ConfigError("actor_loss: clip_eps must be positive");
  const int64_t dc = p.actor_arch.control_dim;
  Batch batch = assemble(buf, minibatch, dc, "actor_loss");
  if (normalize) standardize(batch.adv);

  NodeId lp = actor_logprob_node(t, p, b, batch.state, batch.action,
                                 dc > 0 ? &batch.control_tiled : nullptr, batch.N);
  NodeId ratio = exp_op(t, sub(t, lp, t.constant(batch.lp_old)));
  for (int64_t k = 0; k < batch.B; ++k)
    if (!std::isfinite(t.val(ratio).data()[k])) {
      const Transition& tr =
          buf.transitions[static_cast<size_t>(minibatch[static_cast<size_t>(k)])];
      throw NumericError("actor_loss: non-finite ratio at episode " + std::to_string(tr.episode) +
                         " step " + std::to_string(tr.t));
    }
  NodeId a = t.constant(batch.adv);
  NodeId surrogate = mul(t, ratio, a);
  NodeId clipped = mul(t, clamp(t, ratio, 1.0 - clip_eps, 1.0 + clip_eps), a);
  return neg(t, mean_all(t, min2(t, surrogate, clipped)));
}

NodeId critic_loss_node(Tape& t, const Policy& p, const TapeBinding& b, const RolloutBuffer& buf,
                        const std::vector<int64_t>& minibatch) {
  const int64_t dc = p.critic_arch.control_dim;
  Batch batch = assemble(buf, minibatch, dc, "critic_loss");
  NodeId v = critic_value_node(t, p, b, batch.state, batch.obs,
                               dc > 0 ? &batch.control_rows : nullptr, batch.N);
  return mean_all(t, square(t, sub(t, v, t.constant(batch.target))));
}

double actor_loss(const Policy& p, const RolloutBuffer& buf, const std::vector<int64_t>& minibatch,
                  double clip_eps, bool normalize) {
  Tape t;
  t.grad_enabled = false;
  TapeBinding b = bind_params(t, p.actor);
  return t.val(actor_loss_node(t, p, b, buf, minibatch, clip_eps, normalize)).data()[0];
}

double critic_loss(const Policy& p, const RolloutBuffer& buf,
                   const std::vector<int64_t>& minibatch) {
  Tape t;
  t.grad_enabled = false;
  TapeBinding b = bind_params(t, p.critic);
  return t.val(critic_loss_node(t, p, b, buf, minibatch)).data()[0];
}

Adam::Adam(ParamStore& store, double lr) : store_(&store), lr_(lr) {
  m_.reserve(store.size());
  v_.reserve(store.size());
  for (const auto& e : store.entries()) {
    m_.emplace_back(e.value.shape());
    v_.emplace_back(e.value.shape());
  }
}

void Adam::reset() {
  for (auto& t : m_) std::fill_n(t.data(), t.numel(), 0.0);
  for (auto& t : v_) std::fill_n(t.data(), t.numel(), 0.0);
  t_ = 0;
}

double Adam::step(double clip) {
  const double norm = store_->grad_norm();
  if (!std::isfinite(norm)) throw NumericError("adam: gradient norm is not finite");
  const double scale = (clip > 0.0 && norm > clip) ? clip / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  auto& entries = store_->entries();
  for (size_t i = 0; i < entries.size(); ++i) {
    double* w = entries[i].value.data();
    const double* g = entries[i].grad.data();
    double* mm = m_[i].data();
    double* vv = v_[i].data();
    const int64_t n = entries[i].value.numel();
    for (int64_t k = 0; k < n; ++k) {
      const double gk = g[k] * scale;
      mm[k] = kBeta1 * mm[k] + (1.0 - kBeta1) * gk;
      vv[k] = kBeta2 * vv[k] + (1.0 - kBeta2) * gk * gk;
      w[k] -= lr_ * (mm[k] / bc1) / (std::sqrt(vv[k] / bc2) + kAdamEps);
    }
  }
  return norm;
}

void write_training_log(const std::string& path, const std::vector<IterationLog>& log) {
  std::ofstream out(path);
  if (!out) throw ConfigError("write_training_log: cannot open " + path);
  out << "iteration,mean_return,actor_loss,critic_loss,grad_norm,wall_ms\n";
  char line[256];
  for (const auto& row : log) {
    std::snprintf(line, sizeof(line), "%lld,%.17g,%.17g,%.17g,%.17g,%.3f\n",
                  static_cast<long long>(row.iteration), row.mean_return, row.actor_loss,
                  row.critic_loss, row.grad_norm, row.wall_ms);
    out << line;
  }
  if (!out.good()) throw ConfigError("write_training_log: write failed for " + path);
}

TrainResult train(const Dataset& ds, const TrainConfig& cfg, const Policy* init) {
  cfg.validate();
  if (ds.train.empty()) throw ContractError("train: dataset has no training trajectories");
  if (ds.spec.r_diag.empty())
    throw ConfigError("train: observation noise is unresolved (generate data first)");

  Rng root(cfg.seed);
  Rng init_rng = root.substream(0);
  Policy cur = init ? *init : default_policy(ds.spec, init_rng);
  Policy best = cur;

  TrainResult res;
  Adam opt_actor(cur.actor, cfg.lr_actor);
  Adam opt_critic(cur.critic, cfg.lr_critic);
  bool halved = false;

  for (int64_t it = 0; it < cfg.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    IterationLog row;
    row.iteration = it;
    double actor_sum = 0.0, critic_sum = 0.0, norm_sum = 0.0;
    int64_t updates = 0;
    bool bad = false;
    std::string bad_what;

    try {
      Rng roll_rng = root.substream(2, static_cast<uint64_t>(it));
      RolloutBuffer buf =
          rollout(cur, ds.spec, ds.train, {cfg.backend, cfg.n_particles, cfg.workers}, roll_rng);
      fill_gae(buf, cfg.gamma, cfg.lambda);
      row.mean_return = buf.mean_return;

      // the return was measured under `cur`, so checkpoint before updating
      if (row.mean_return > res.best_return) {
        res.best_return = row.mean_return;
        res.best_iteration = it;
        best = cur;
        if (!cfg.checkpoint_path.empty())
          save_policy(cfg.checkpoint_path, best,
                      {{"iteration", it}, {"mean_return", res.best_return}});
      }

      // on-policy ratios stay pinned to these samples for the whole iteration
      const uint64_t lp_hash = behavior_hash(buf);

      std::vector<int64_t> perm(static_cast<size_t>(buf.size()));
      std::iota(perm.begin(), perm.end(), 0);
      Rng shuffle_rng = root.substream(3, static_cast<uint64_t>(it));
      for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int64_t i = buf.size() - 1; i > 0; --i)
          std::swap(perm[static_cast<size_t>(i)],
                    perm[static_cast<size_t>(shuffle_rng.uniform_int(i + 1))]);
        for (int64_t start = 0; start < buf.size(); start += cfg.minibatch) {
          const int64_t stop = std::min<int64_t>(start + cfg.minibatch, buf.size());
          const std::vector<int64_t> mb(perm.begin() + start, perm.begin() + stop);

          double norm_a = 0.0, norm_c = 0.0;
          {
            Tape t;
            TapeBinding b = bind_params(t, cur.actor);
            NodeId loss = actor_loss_node(t, cur, b, buf, mb, cfg.clip_eps,
                                          cfg.normalize_advantages);
            const double lv = t.val(loss).data()[0];
            if (!std::isfinite(lv))
              throw NumericError("actor loss is not finite at iteration " + std::to_string(it));
            cur.actor.zero_grad();
            t.backward(loss);
            collect_grads(t, cur.actor, b);
            if (!cur.actor.grads_finite())
              throw NumericError("actor gradients are not finite at iteration " +
                                 std::to_string(it));
            norm_a = opt_actor.step(cfg.grad_clip);
            actor_sum += lv;
          }
          {
            Tape t;
            TapeBinding b = bind_params(t, cur.critic);
            NodeId loss = critic_loss_node(t, cur, b, buf, mb);
            const double lv = t.val(loss).data()[0];
            if (!std::isfinite(lv))
              throw NumericError("critic loss is not finite at iteration " + std::to_string(it));
            cur.critic.zero_grad();
            t.backward(loss);
            collect_grads(t, cur.critic, b);
            if (!cur.critic.grads_finite())
              throw NumericError("critic gradients are not finite at iteration " +
                                 std::to_string(it));
            norm_c = opt_critic.step(cfg.grad_clip);
            critic_sum += lv;
          }
          norm_sum += std::hypot(norm_a, norm_c);
          ++updates;
        }
      }
      if (behavior_hash(buf) != lp_hash)
        throw ContractError("train: behavior log-probs changed during the update epochs");
    } catch (const NumericError& e) {
      bad = true;
      bad_what = e.what();
    }

    if (updates > 0) {
      row.actor_loss = actor_sum / static_cast<double>(updates);
      row.critic_loss = critic_sum / static_cast<double>(updates);
      row.grad_norm = norm_sum / static_cast<double>(updates);
    }
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    res.log.push_back(row);

    if (bad) {
      if (halved) {
        if (!cfg.log_path.empty()) write_training_log(cfg.log_path, res.log);
        throw NumericError("train: numeric failure recurred at iteration " + std::to_string(it) +
                           " after halving learning rates (best return " +
                           std::to_string(res.best_return) + " at iteration " +
                           std::to_string(res.best_iteration) + "): " + bad_what);
      }
      std::fprintf(stderr, "warning: %s; restoring checkpoint and halving learning rates\n",
                   bad_what.c_str());
      halved = true;
      res.lr_halvings = 1;
      cur = best;
      opt_actor.set_lr(opt_actor.lr() * 0.5);
      opt_critic.set_lr(opt_critic.lr() * 0.5);
      opt_actor.reset();
      opt_critic.reset();
      continue;
    }

    if (cfg.plateau_window > 0 &&
        static_cast<int64_t>(res.log.size()) >= 2 * cfg.plateau_window) {
      double recent = 0.0, prev = 0.0;
      const size_t last = res.log.size();
      const size_t w = static_cast<size_t>(cfg.plateau_window);
      for (size_t i = last - w; i < last; ++i) recent += res.log[i].mean_return;
      for (size_t i = last - 2 * w; i < last - w; ++i) prev += res.log[i].mean_return;
      recent /= static_cast<double>(w);
      prev /= static_cast<double>(w);
      if ((recent - prev) / std::max(std::abs(prev), 1e-12) < cfg.plateau_rel) {
        res.plateaued = true;
        break;
      }
    }
  }

  res.policy = res.best_iteration >= 0 ? best : cur;
  if (!cfg.checkpoint_path.empty())
    save_policy(cfg.checkpoint_path, res.policy,
                {{"iteration", res.best_iteration}, {"mean_return", res.best_return}});
  if (!cfg.log_path.empty()) write_training_log(cfg.log_path, res.log);
  return res;
}

}  // namespace rlda
