#include "rlda/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "rlda/errors.hpp"

namespace rlda {

namespace {

constexpr double kVarFloor = 1e-12;
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// softplus(beta) = 0.01 at initialization
const double kBetaInit = std::log(std::expm1(0.01));

void add_mlp(ParamStore& store, const std::string& prefix, int64_t in, int64_t layers,
             int64_t units, int64_t out, Rng& rng) {
  int64_t prev = in;
  for (int64_t l = 0; l < layers; ++l) {
    store.add(prefix + "fc" + std::to_string(l) + ".w",
              glorot_uniform({prev, units}, prev, units, rng));
    store.add(prefix + "fc" + std::to_string(l) + ".b", Tensor::zeros({units}));
    prev = units;
  }
  store.add(prefix + "out.w", glorot_uniform({prev, out}, prev, out, rng));
  store.add(prefix + "out.b", Tensor::zeros({out}));
}

NodeId mlp_forward(Tape& t, const TapeBinding& b, const std::string& prefix, NodeId x,
                   int64_t layers) {
  NodeId h = x;
  for (int64_t l = 0; l < layers; ++l) {
    const std::string fc = prefix + "fc" + std::to_string(l) + ".";
    h = dense(t, h, b[fc + "w"], b[fc + "b"], Act::tanh);
  }
  return dense(t, h, b[prefix + "out.w"], b[prefix + "out.b"], Act::identity);
}

Tensor tile_rows(const double* v, int64_t dc, int64_t rows) {
  Tensor out({rows, dc});
  for (int64_t i = 0; i < rows; ++i) std::copy(v, v + dc, out.data() + i * dc);
  return out;
}

void check_particles(const Tensor& X, int64_t m, const char* who) {
  if (X.rank() != 2 || X.dim(1) != m)
    throw ConfigError(std::string(who) + ": particles must be [N, " + std::to_string(m) +
                      "], got " + X.shape_str());
}

// Sorts the rows of each group lexicographically. The pooled critic value is
// then exactly permutation invariant: any ordering of the same particles maps
// to the identical input matrix.
Tensor canonicalize_groups(const Tensor& X, int64_t group) {
  const int64_t rows = X.dim(0), m = X.dim(1);
  Tensor out({rows, m});
  std::vector<int64_t> idx(static_cast<size_t>(group));
  for (int64_t g = 0; g < rows / group; ++g) {
    const double* base = X.data() + g * group * m;
    for (int64_t i = 0; i < group; ++i) idx[static_cast<size_t>(i)] = i;
    std::sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
      return std::lexicographical_compare(base + a * m, base + (a + 1) * m, base + b * m,
                                          base + (b + 1) * m);
    });
    for (int64_t i = 0; i < group; ++i)
      std::copy(base + idx[static_cast<size_t>(i)] * m,
                base + (idx[static_cast<size_t>(i)] + 1) * m,
                out.data() + (g * group + i) * m);
  }
  return out;
}

}  // namespace

std::string to_string(ActorKind k) { return k == ActorKind::mlp ? "mlp" : "conv_l96"; }

ActorKind actor_kind_from_string(const std::string& s) {
  if (s == "mlp") return ActorKind::mlp;
  if (s == "conv_l96") return ActorKind::conv_l96;
  throw ConfigError("unknown actor kind '" + s + "' (expected mlp|conv_l96)");
}

std::string to_string(CriticPool p) { return p == CriticPool::sum ? "sum" : "mean"; }

CriticPool critic_pool_from_string(const std::string& s) {
  if (s == "sum") return CriticPool::sum;
  if (s == "mean") return CriticPool::mean;
  throw ConfigError("unknown critic pool '" + s + "' (expected sum|mean)");
}

nlohmann::json ActorArch::to_json() const {
  return {{"kind", to_string(kind)},   {"state_dim", state_dim}, {"control_dim", control_dim},
          {"layers", layers},          {"units", units},         {"residual", residual}};
}

ActorArch ActorArch::from_json(const nlohmann::json& j) {
  ActorArch a;
  a.kind = actor_kind_from_string(j.at("kind").get<std::string>());
  a.state_dim = j.at("state_dim").get<int64_t>();
  a.control_dim = j.at("control_dim").get<int64_t>();
  a.layers = j.at("layers").get<int64_t>();
  a.units = j.at("units").get<int64_t>();
  a.residual = j.at("residual").get<bool>();
  return a;
}

nlohmann::json CriticArch::to_json() const {
  return {{"state_dim", state_dim},   {"obs_dim", obs_dim},
          {"control_dim", control_dim}, {"layers", layers},
          {"phi1_units", phi1_units}, {"phi2_units", phi2_units},
          {"phi3_units", phi3_units}, {"pool", to_string(pool)}};
}

CriticArch CriticArch::from_json(const nlohmann::json& j) {
  CriticArch c;
  c.state_dim = j.at("state_dim").get<int64_t>();
  c.obs_dim = j.at("obs_dim").get<int64_t>();
  c.control_dim = j.at("control_dim").get<int64_t>();
  c.layers = j.at("layers").get<int64_t>();
  c.phi1_units = j.at("phi1_units").get<int64_t>();
  c.phi2_units = j.at("phi2_units").get<int64_t>();
  c.phi3_units = j.at("phi3_units").get<int64_t>();
  c.pool = critic_pool_from_string(j.at("pool").get<std::string>());
  return c;
}

Policy make_policy(const ActorArch& aa, const CriticArch& ca, Rng& rng) {
  if (aa.state_dim < 1 || ca.state_dim != aa.state_dim || ca.obs_dim < 1)
    throw ConfigError("make_policy: inconsistent architecture dimensions");
  if (aa.kind == ActorKind::conv_l96 && aa.control_dim != 0)
    throw ConfigError("make_policy: the conv actor takes no control input");

  Policy p;
  p.actor_arch = aa;
  p.critic_arch = ca;

  Rng arng = rng.substream(0);
  if (aa.kind == ActorKind::mlp) {
    add_mlp(p.actor, "", aa.state_dim + aa.control_dim, aa.layers, aa.units, aa.state_dim, arng);
  } else {
    p.actor.add("conv1.w", glorot_uniform({48, 1, 5}, 1 * 5, 48 * 5, arng));
    p.actor.add("conv1.b", Tensor::zeros({48}));
    p.actor.add("conv2.w", glorot_uniform({17, 32, 5}, 32 * 5, 17 * 5, arng));
    p.actor.add("conv2.b", Tensor::zeros({17}));
    p.actor.add("conv3.w", glorot_uniform({1, 17, 1}, 17, 1, arng));
    p.actor.add("conv3.b", Tensor::zeros({1}));
  }
  p.actor.add("beta", Tensor({aa.state_dim}, kBetaInit));

  Rng crng = rng.substream(1);
  add_mlp(p.critic, "phi1.", ca.state_dim, ca.layers, ca.phi1_units, ca.phi1_units, crng);
  add_mlp(p.critic, "phi2.", ca.obs_dim + ca.control_dim, ca.layers, ca.phi2_units,
          ca.phi1_units, crng);
  add_mlp(p.critic, "phi3.", ca.phi1_units, ca.layers, ca.phi3_units, 1, crng);
  return p;
}

ActorArch default_actor_arch(const SystemSpec& spec) {
  ActorArch a;
  a.state_dim = spec.m;
  a.control_dim = spec.control ? spec.m : 0;
  switch (spec.name) {
    case SystemName::circular_motion:
    case SystemName::lorenz63:
      a.layers = 4;
      a.units = 64;
      break;
    case SystemName::lorenz96:
      a.kind = ActorKind::conv_l96;
      break;
    case SystemName::allen_cahn:
      a.layers = 4;
      a.units = 100;
      break;
    case SystemName::allen_cahn_control:
      a.layers = 4;
      a.units = 150;
      break;
  }
  return a;
}

CriticArch default_critic_arch(const SystemSpec& spec) {
  CriticArch c;
  c.state_dim = spec.m;
  c.obs_dim = spec.n;
  c.control_dim = spec.control ? spec.m : 0;
  switch (spec.name) {
    case SystemName::circular_motion:
    case SystemName::lorenz63:
      c.phi1_units = c.phi2_units = 32;
      c.phi3_units = 64;
      break;
    case SystemName::lorenz96:
      c.phi1_units = c.phi2_units = 60;
      c.phi3_units = 120;
      break;
    case SystemName::allen_cahn:
      c.phi1_units = c.phi2_units = 50;
      c.phi3_units = 100;
      break;
    case SystemName::allen_cahn_control:
      c.phi1_units = c.phi2_units = 75;
      c.phi3_units = 150;
      break;
  }
  return c;
}

Policy default_policy(const SystemSpec& spec, Rng& rng) {
  return make_policy(default_actor_arch(spec), default_critic_arch(spec), rng);
}

NodeId actor_forward(Tape& t, const ActorArch& arch, const TapeBinding& b, NodeId x_state,
                     NodeId control) {
  if (arch.control_dim > 0 && control == kNoNode)
    throw ConfigError("actor_forward: the architecture requires a control input");

  NodeId out;
  if (arch.kind == ActorKind::mlp) {
    NodeId in = x_state;
    if (arch.control_dim > 0) in = concat_cols(t, x_state, control);
    out = mlp_forward(t, b, "", in, arch.layers);
  } else {
    const int64_t B = t.val(x_state).dim(0), L = t.val(x_state).dim(1);
    NodeId h = reshape(t, x_state, {B, 1, L});
    h = conv1d_periodic(t, h, b["conv1.w"], b["conv1.b"]);
    h = bilinear_split(t, h);
    h = conv1d_periodic(t, h, b["conv2.w"], b["conv2.b"]);
    h = activation(t, h, Act::tanh);
    h = conv1d_periodic(t, h, b["conv3.w"], b["conv3.b"]);
    out = reshape(t, h, {B, L});
  }
  if (arch.residual) out = add(t, out, x_state);
  return out;
}

NodeId actor_variance_node(Tape& t, const TapeBinding& b) {
  return clamp_min(t, activation(t, b["beta"], Act::softplus), kVarFloor);
}

NodeId actor_logprob_node(Tape& t, const Policy& p, const TapeBinding& b, const Tensor& x,
                          const Tensor& xhat, const Tensor* controls_tiled, int64_t group) {
  check_particles(x, p.actor_arch.state_dim, "actor_logprob");
  check_same_shape(x, xhat, "actor_logprob x/xhat");
  if (x.dim(0) % group != 0)
    throw DimensionError("actor_logprob: row count is not a multiple of the group size");

  NodeId xn = t.constant(x);
  NodeId cn = kNoNode;
  if (p.actor_arch.control_dim > 0) {
    if (controls_tiled == nullptr)
      throw ConfigError("actor_logprob: the architecture requires a control input");
    cn = t.constant(*controls_tiled);
  }
  NodeId mean = actor_forward(t, p.actor_arch, b, xn, cn);
  NodeId var = actor_variance_node(t, b);
  NodeId rows = gaussian_logpdf_rows(t, t.constant(xhat), mean, var);
  return group_sum_rows(t, rows, group);
}

NodeId critic_value_node(Tape& t, const Policy& p, const TapeBinding& b, const Tensor& particles,
                         const Tensor& obs, const Tensor* controls, int64_t group) {
  const CriticArch& ca = p.critic_arch;
  check_particles(particles, ca.state_dim, "critic_value");
  if (obs.rank() != 2 || obs.dim(1) != ca.obs_dim)
    throw ConfigError("critic_value: obs must be [B, " + std::to_string(ca.obs_dim) + "], got " +
                      obs.shape_str());
  if (particles.dim(0) != obs.dim(0) * group)
    throw DimensionError("critic_value: particle rows do not match B*group");

  NodeId emb =
      mlp_forward(t, b, "phi1.", t.constant(canonicalize_groups(particles, group)), ca.layers);
  NodeId pooled = group_sum_rows(t, emb, group);
  if (ca.pool == CriticPool::mean)
    pooled = scalar_mul(t, pooled, 1.0 / static_cast<double>(group));

  NodeId yin = t.constant(obs);
  if (ca.control_dim > 0) {
    if (controls == nullptr)
      throw ConfigError("critic_value: the architecture requires a control input");
    yin = concat_cols(t, yin, t.constant(*controls));
  }
  NodeId yemb = mlp_forward(t, b, "phi2.", yin, ca.layers);
  NodeId head = mlp_forward(t, b, "phi3.", add(t, pooled, yemb), ca.layers);
  return reshape(t, head, {obs.dim(0)});
}

Tensor actor_mean(const Policy& p, const Tensor& particles, const double* control) {
  check_particles(particles, p.actor_arch.state_dim, "actor_mean");
  Tape t;
  t.grad_enabled = false;
  TapeBinding b = bind_params(t, p.actor);
  NodeId cn = kNoNode;
  if (p.actor_arch.control_dim > 0) {
    if (control == nullptr) throw ConfigError("actor_mean: control input required");
    cn = t.constant(tile_rows(control, p.actor_arch.control_dim, particles.dim(0)));
  }
  NodeId out = actor_forward(t, p.actor_arch, b, t.constant(particles), cn);
  return t.val(out);
}

std::vector<double> actor_variance_values(const Policy& p) {
  const Tensor& beta = p.actor.value("beta");
  std::vector<double> var(static_cast<size_t>(beta.numel()));
  for (int64_t j = 0; j < beta.numel(); ++j) {
    const double x = beta.data()[j];
    const double sp = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    var[static_cast<size_t>(j)] = std::max(sp, kVarFloor);
  }
  return var;
}

ActorSample actor_sample(const Policy& p, const Tensor& particles, const double* control,
                         Rng& rng) {
  const Tensor mean = actor_mean(p, particles, control);
  const std::vector<double> var = actor_variance_values(p);
  const int64_t N = particles.dim(0), m = particles.dim(1);

  ActorSample s;
  s.particles = Tensor({N, m});
  s.logprob.resize(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i) {
    Rng pr = rng.substream(static_cast<uint64_t>(i));
    double lp = 0.0;
    for (int64_t j = 0; j < m; ++j) {
      const double sd = std::sqrt(var[static_cast<size_t>(j)]);
      const double xh = mean.at2(i, j) + sd * pr.normal();
      s.particles.at2(i, j) = xh;
      const double d = xh - mean.at2(i, j);
      lp += -0.5 * (kLog2Pi + std::log(var[static_cast<size_t>(j)]) +
                    d * d / var[static_cast<size_t>(j)]);
    }
    s.logprob[static_cast<size_t>(i)] = lp;
    s.total += lp;
  }
  return s;
}

double actor_logprob(const Policy& p, const Tensor& x, const Tensor& xhat,
                     const double* control) {
  check_same_shape(x, xhat, "actor_logprob x/xhat");
  const Tensor mean = actor_mean(p, x, control);
  const std::vector<double> var = actor_variance_values(p);
  const int64_t N = x.dim(0), m = x.dim(1);
  double total = 0.0;
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = 0; j < m; ++j) {
      const double d = xhat.at2(i, j) - mean.at2(i, j);
      total += -0.5 * (kLog2Pi + std::log(var[static_cast<size_t>(j)]) +
                       d * d / var[static_cast<size_t>(j)]);
    }
  return total;
}

double critic_value(const Policy& p, const Tensor& particles, const Tensor& y,
                    const double* control) {
  Tape t;
  t.grad_enabled = false;
  TapeBinding b = bind_params(t, p.critic);
  Tensor obs({1, y.numel()});
  std::copy(y.data(), y.data() + y.numel(), obs.data());
  Tensor ctrl;
  const Tensor* cp = nullptr;
  if (p.critic_arch.control_dim > 0) {
    if (control == nullptr) throw ConfigError("critic_value: control input required");
    ctrl = tile_rows(control, p.critic_arch.control_dim, 1);
    cp = &ctrl;
  }
  NodeId v = critic_value_node(t, p, b, particles, obs, cp, particles.dim(0));
  return t.val(v).at(0);
}

TransitionFn surrogate_transition(const Policy& p) {
  return [&p](const Tensor& particles, int64_t, const double* control, Rng& rng) {
    return actor_sample(p, particles, control, rng).particles;
  };
}

void save_policy(const std::string& path, const Policy& p, const nlohmann::json& extra_meta) {
  ParamStore combined;
  for (const auto& e : p.actor.entries()) combined.add("actor." + e.name, e.value);
  for (const auto& e : p.critic.entries()) combined.add("critic." + e.name, e.value);
  nlohmann::json meta = extra_meta;
  meta["actor_arch"] = p.actor_arch.to_json();
  meta["critic_arch"] = p.critic_arch.to_json();
  save_checkpoint(path, combined, meta);
}

Policy load_policy(const std::string& path) {
  ParamStore combined;
  nlohmann::json meta = load_checkpoint(path, combined);
  if (!meta.contains("actor_arch") || !meta.contains("critic_arch"))
    throw ConfigError("load_policy: checkpoint lacks architecture descriptors: " + path);

  Rng rng(0);
  Policy p = make_policy(ActorArch::from_json(meta["actor_arch"]),
                         CriticArch::from_json(meta["critic_arch"]), rng);
  size_t used = 0;
  auto restore = [&](ParamStore& dst, const std::string& prefix) {
    for (auto& e : dst.entries()) {
      const std::string key = prefix + e.name;
      if (!combined.has(key)) throw ConfigError("load_policy: missing parameter " + key);
      if (combined.value(key).shape() != e.value.shape())
        throw ConfigError("load_policy: shape mismatch for " + key);
      e.value = combined.value(key);
      ++used;
    }
  };
  restore(p.actor, "actor.");
  restore(p.critic, "critic.");
  if (used != combined.size())
    throw ConfigError("load_policy: checkpoint has extra parameters");
  return p;
}

}  // namespace rlda
