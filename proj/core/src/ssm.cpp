#include "rlda/ssm.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "rlda/errors.hpp"
#include "rlda/parallel.hpp"

namespace rlda {

using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

constexpr double kLorenzSigma = 10.0;
constexpr double kLorenzRho = 28.0;
constexpr double kLorenzBeta = 8.0 / 3.0;

constexpr double kAcEps = 0.001;
constexpr double kAcMu = 3.0;

}  // namespace

std::string to_string(SystemName v) {
  switch (v) {
    case SystemName::circular_motion: return "circular_motion";
    case SystemName::lorenz63: return "lorenz63";
    case SystemName::lorenz96: return "lorenz96";
    case SystemName::allen_cahn: return "allen_cahn";
    case SystemName::allen_cahn_control: return "allen_cahn_control";
  }
  throw ContractError("unknown SystemName");
}

std::string to_string(ObsOperator v) {
  switch (v) {
    case ObsOperator::identity: return "identity";
    case ObsOperator::circle_polar: return "circle_polar";
    case ObsOperator::lorenz63_nonlinear: return "lorenz63_nonlinear";
    case ObsOperator::subsample: return "subsample";
    case ObsOperator::arctan: return "arctan";
  }
  throw ContractError("unknown ObsOperator");
}

SystemName system_from_string(const std::string& s) {
  for (auto v : {SystemName::circular_motion, SystemName::lorenz63,
                 SystemName::lorenz96, SystemName::allen_cahn,
                 SystemName::allen_cahn_control})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown system name '" + s + "'");
}

ObsOperator obs_from_string(const std::string& s) {
  for (auto v : {ObsOperator::identity, ObsOperator::circle_polar,
                 ObsOperator::lorenz63_nonlinear, ObsOperator::subsample,
                 ObsOperator::arctan})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown observation operator '" + s + "'");
}

// ---- presets ---------------------------------------------------------------

std::vector<double> allen_cahn_grid(int64_t m) {
  std::vector<double> x(static_cast<size_t>(m));
  const double h = 2.0 / static_cast<double>(m);
  for (int64_t i = 0; i < m; ++i) x[static_cast<size_t>(i)] = -1.0 + h * static_cast<double>(i);
  return x;
}

namespace {

double base_obs_var(SystemName name) {
  switch (name) {
    case SystemName::circular_motion: return 0.4;
    case SystemName::lorenz96: return 2.0;
    case SystemName::allen_cahn:
    case SystemName::allen_cahn_control: return 0.01;  // sigma_y = 0.1
    case SystemName::lorenz63: return 0.0;  // resolved from SNR
  }
  return 0.0;
}

}  // namespace

SystemSpec SystemSpec::preset(SystemName name) {
  SystemSpec s;
  s.name = name;
  switch (name) {
    case SystemName::circular_motion:
      s.m = 2;
      s.dt = 1.0;
      s.scheme = "map";
      s.q_diag.assign(2, 0.01);
      s.mu0 = {1.0, 0.0};
      s.sigma0_diag.assign(2, 0.25);
      break;
    case SystemName::lorenz63:
      s.m = 3;
      s.dt = 0.02;
      s.scheme = "euler";
      s.q_diag.assign(3, 0.0);
      s.mu0 = {1.0, 1.0, 1.0};
      s.sigma0_diag.assign(3, 1.0);
      s.burn_in = 500;
      s.snr_mode = true;
      s.snr_db = 20.0;
      break;
    case SystemName::lorenz96:
      s.m = 40;
      s.dt = 0.05;
      s.scheme = "rk4";
      s.q_diag.assign(40, 0.0);
      s.mu0.assign(40, 8.0);
      s.sigma0_diag.assign(40, 1.0);
      s.burn_in = 500;
      break;
    case SystemName::allen_cahn:
    case SystemName::allen_cahn_control: {
      s.m = 40;
      s.dt = 0.01;
      s.scheme = "semi_implicit";
      s.q_diag.assign(40, 0.0);
      const auto grid = allen_cahn_grid(40);
      s.mu0.resize(40);
      s.sigma0_diag.resize(40);
      const double var_u = 0.4 * 0.4 / 12.0;  // Var of Uniform(0.8, 1.2)
      for (int64_t i = 0; i < 40; ++i) {
        const double base = grid[static_cast<size_t>(i)] * grid[static_cast<size_t>(i)] *
                            std::cos(kPi * grid[static_cast<size_t>(i)]);
        s.mu0[static_cast<size_t>(i)] = base;
        s.sigma0_diag[static_cast<size_t>(i)] = var_u * base * base;
      }
      s.control = name == SystemName::allen_cahn_control;
      break;
    }
  }
  ObsOperator def_op = ObsOperator::identity;
  if (name == SystemName::allen_cahn || name == SystemName::allen_cahn_control)
    def_op = ObsOperator::arctan;
  s.set_obs_operator(def_op);
  return s;
}

void SystemSpec::set_obs_operator(ObsOperator op, int64_t subsample_n) {
  obs_op = op;
  switch (op) {
    case ObsOperator::identity:
      n = m;
      break;
    case ObsOperator::circle_polar:
      if (m != 2) throw ConfigError("circle_polar needs a 2-dimensional state");
      n = 3;
      break;
    case ObsOperator::lorenz63_nonlinear:
      if (m != 3) throw ConfigError("lorenz63_nonlinear needs a 3-dimensional state");
      n = 3;
      break;
    case ObsOperator::subsample:
      if (subsample_n < 1 || subsample_n > m)
        throw ConfigError("subsample count " + std::to_string(subsample_n) +
                          " outside [1, " + std::to_string(m) + "]");
      n = subsample_n;
      break;
    case ObsOperator::arctan:
      n = m;
      break;
  }
  if (snr_mode) {
    r_diag.clear();  // resolved when data is generated
  } else {
    r_diag.assign(static_cast<size_t>(n), base_obs_var(name));
  }
}

void SystemSpec::validate() const {
  if (m <= 0) throw ConfigError("SystemSpec: state dimension must be positive");
  if (n <= 0) throw ConfigError("SystemSpec: observation dimension must be positive");
  if (static_cast<int64_t>(q_diag.size()) != m)
    throw ConfigError("SystemSpec: q_diag has " + std::to_string(q_diag.size()) +
                      " entries, state dimension is " + std::to_string(m));
  if (!snr_mode && static_cast<int64_t>(r_diag.size()) != n)
    throw ConfigError("SystemSpec: r_diag has " + std::to_string(r_diag.size()) +
                      " entries, observation dimension is " + std::to_string(n));
  for (double v : r_diag)
    if (!(v > 0.0)) throw ConfigError("SystemSpec: observation noise variance must be positive");
  for (double v : q_diag)
    if (v < 0.0) throw ConfigError("SystemSpec: process noise variance must be nonnegative");
  if (static_cast<int64_t>(mu0.size()) != m ||
      static_cast<int64_t>(sigma0_diag.size()) != m)
    throw ConfigError("SystemSpec: prior moments do not match the state dimension");
  if (obs_op == ObsOperator::subsample && (n < 1 || n > m))
    throw ConfigError("SystemSpec: subsample count outside [1, m]");
  if (control && name != SystemName::allen_cahn_control)
    throw ConfigError("SystemSpec: control inputs are only defined for allen_cahn_control");
}

json SystemSpec::to_json() const {
  return json{{"name", to_string(name)},
              {"m", m},
              {"n", n},
              {"dt", dt},
              {"scheme", scheme},
              {"q_diag", q_diag},
              {"obs_op", to_string(obs_op)},
              {"r_diag", r_diag},
              {"snr_mode", snr_mode},
              {"snr_db", snr_db},
              {"control", control},
              {"mu0", mu0},
              {"sigma0_diag", sigma0_diag},
              {"burn_in", burn_in}};
}

SystemSpec SystemSpec::from_json(const json& j) {
  SystemSpec s;
  s.name = system_from_string(j.at("name").get<std::string>());
  s.m = j.at("m").get<int64_t>();
  s.n = j.at("n").get<int64_t>();
  s.dt = j.at("dt").get<double>();
  s.scheme = j.at("scheme").get<std::string>();
  s.q_diag = j.at("q_diag").get<std::vector<double>>();
  s.obs_op = obs_from_string(j.at("obs_op").get<std::string>());
  s.r_diag = j.at("r_diag").get<std::vector<double>>();
  s.snr_mode = j.at("snr_mode").get<bool>();
  s.snr_db = j.at("snr_db").get<double>();
  s.control = j.at("control").get<bool>();
  s.mu0 = j.at("mu0").get<std::vector<double>>();
  s.sigma0_diag = j.at("sigma0_diag").get<std::vector<double>>();
  s.burn_in = j.at("burn_in").get<int64_t>();
  return s;
}

// ---- transition maps ---------------------------------------------------------

Tensor circular_motion_mean(const Tensor& x) {
  if (x.numel() != 2) throw DimensionError("circular_motion: state must have 2 entries");
  const double c = std::cos(kPi / 4.0), s = std::sin(kPi / 4.0);
  Tensor out(x.shape());
  out.at(0) = c * x.at(0) - s * x.at(1);
  out.at(1) = s * x.at(0) + c * x.at(1);
  return out;
}

Tensor circular_motion_step(const Tensor& x, Rng& rng, double q_var) {
  Tensor out = circular_motion_mean(x);
  const double sd = std::sqrt(q_var);
  out.at(0) += sd * rng.normal();
  out.at(1) += sd * rng.normal();
  return out;
}

Tensor lorenz63_step(const Tensor& u, double dt) {
  if (u.numel() != 3) throw DimensionError("lorenz63: state must have 3 entries");
  const double x = u.at(0), y = u.at(1), z = u.at(2);
  Tensor out(u.shape());
  out.at(0) = x + dt * kLorenzSigma * (y - x);
  out.at(1) = y + dt * (x * (kLorenzRho - z) - y);
  out.at(2) = z + dt * (x * y - kLorenzBeta * z);
  return out;
}

void lorenz96_rhs(const double* x, int64_t m, double F, double* out) {
  for (int64_t j = 0; j < m; ++j) {
    const double xm2 = x[(j - 2 + m) % m];
    const double xm1 = x[(j - 1 + m) % m];
    const double xp1 = x[(j + 1) % m];
    out[j] = (xp1 - xm2) * xm1 - x[j] + F;
  }
}

Tensor lorenz96_step(const Tensor& x, double dt, double F) {
  const int64_t m = x.numel();
  if (m < 4) throw DimensionError("lorenz96: needs at least 4 components");
  std::vector<double> k1(m), k2(m), k3(m), k4(m), tmp(m);
  const double* xp = x.data();
  lorenz96_rhs(xp, m, F, k1.data());
  for (int64_t j = 0; j < m; ++j) tmp[j] = xp[j] + 0.5 * dt * k1[j];
  lorenz96_rhs(tmp.data(), m, F, k2.data());
  for (int64_t j = 0; j < m; ++j) tmp[j] = xp[j] + 0.5 * dt * k2[j];
  lorenz96_rhs(tmp.data(), m, F, k3.data());
  for (int64_t j = 0; j < m; ++j) tmp[j] = xp[j] + dt * k3[j];
  lorenz96_rhs(tmp.data(), m, F, k4.data());
  Tensor out(x.shape());
  for (int64_t j = 0; j < m; ++j)
    out.at(j) = xp[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
  return out;
}

Tensor allen_cahn_solve_operator(int64_t m, double dt, double eps) {
  using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const double h = 2.0 / static_cast<double>(m);
  const double a = dt * eps * eps / (h * h);
  EMat M = EMat::Identity(m, m);
  for (int64_t i = 0; i < m; ++i) {
    M(i, i) += 2.0 * a;
    M(i, (i + 1) % m) -= a;
    M(i, (i - 1 + m) % m) -= a;
  }
  EMat inv = M.inverse();
  Tensor out({m, m});
  Eigen::Map<EMat>(out.data(), m, m) = inv;
  return out;
}

Tensor allen_cahn_step(const Tensor& u, const Tensor* control, const Tensor& minv,
                       double dt, double mu) {
  const int64_t m = u.numel();
  if (minv.rank() != 2 || minv.dim(0) != m || minv.dim(1) != m)
    throw DimensionError("allen_cahn_step: solve operator is " + minv.shape_str() +
                         ", state has " + std::to_string(m) + " entries");
  if (control && control->numel() != m)
    throw DimensionError("allen_cahn_step: control has " +
                         std::to_string(control->numel()) + " entries, expected " +
                         std::to_string(m));
  const double h = 2.0 / static_cast<double>(m);
  const double a = dt * kAcEps * kAcEps / (h * h);
  (void)mu;
  std::vector<double> rhs(static_cast<size_t>(m));
  const double* up = u.data();
  for (int64_t i = 0; i < m; ++i) {
    const double react = mu * (up[i] - up[i] * up[i] * up[i]);
    const double ctrl = control ? control->at(i) : 0.0;
    const double lap = up[(i + 1) % m] - 2.0 * up[i] + up[(i - 1 + m) % m];
    rhs[static_cast<size_t>(i)] = dt * (react + ctrl) + a * lap;
  }
  Tensor out(u.shape());
  // u_next = u + Minv * rhs; solving for the increment keeps constants exact
  for (int64_t i = 0; i < m; ++i) {
    double acc = 0.0;
    const double* row = minv.data() + i * m;
    for (int64_t j = 0; j < m; ++j) acc += row[j] * rhs[static_cast<size_t>(j)];
    out.at(i) = up[i] + acc;
  }
  return out;
}

// ---- TruthModel ----------------------------------------------------------------

TruthModel::TruthModel(SystemSpec spec) : spec_(std::move(spec)) {
  if (spec_.scheme == "semi_implicit")
    ac_minv_ = allen_cahn_solve_operator(spec_.m, spec_.dt, kAcEps);
}

void TruthModel::step_mean(const double* x, const double* c, double* out) const {
  const int64_t m = spec_.m;
  Tensor xin({m});
  std::copy_n(x, m, xin.data());
  Tensor res;
  switch (spec_.name) {
    case SystemName::circular_motion:
      res = circular_motion_mean(xin);
      break;
    case SystemName::lorenz63:
      res = lorenz63_step(xin, spec_.dt);
      break;
    case SystemName::lorenz96:
      res = lorenz96_step(xin, spec_.dt);
      break;
    case SystemName::allen_cahn:
    case SystemName::allen_cahn_control: {
      Tensor ctrl;
      if (c) {
        ctrl = Tensor({m});
        std::copy_n(c, m, ctrl.data());
      }
      res = allen_cahn_step(xin, c ? &ctrl : nullptr, ac_minv_, spec_.dt, kAcMu);
      break;
    }
  }
  std::copy_n(res.data(), m, out);
}

Tensor TruthModel::step_mean_batch(const Tensor& X, const Tensor* c) const {
  if (X.rank() != 2 || X.dim(1) != spec_.m)
    throw DimensionError("TruthModel: particle matrix is " + X.shape_str() +
                         ", expected [N," + std::to_string(spec_.m) + "]");
  const int64_t N = X.dim(0);
  Tensor out(X.shape());
  for (int64_t i = 0; i < N; ++i)
    step_mean(X.data() + i * spec_.m, c ? c->data() : nullptr,
              out.data() + i * spec_.m);
  return out;
}

Tensor TruthModel::step_sample_batch(const Tensor& X, const Tensor* c,
                                     Rng& step_rng) const {
  Tensor out = step_mean_batch(X, c);
  bool noisy = false;
  for (double q : spec_.q_diag) noisy = noisy || q > 0.0;
  if (!noisy) return out;
  const int64_t N = X.dim(0), m = spec_.m;
  for (int64_t i = 0; i < N; ++i) {
    Rng pr = step_rng.substream(static_cast<uint64_t>(i));
    double* row = out.data() + i * m;
    for (int64_t j = 0; j < m; ++j)
      row[j] += std::sqrt(spec_.q_diag[static_cast<size_t>(j)]) * pr.normal();
  }
  return out;
}

// ---- observation operators --------------------------------------------------

std::vector<int32_t> draw_subsample_indices(int64_t m, int64_t n, Rng& rng) {
  if (n < 1 || n > m)
    throw ConfigError("subsample: cannot draw " + std::to_string(n) +
                      " indices from " + std::to_string(m));
  std::vector<int32_t> pool(static_cast<size_t>(m));
  std::iota(pool.begin(), pool.end(), 0);
  for (int64_t i = 0; i < n; ++i) {
    const int64_t j = i + rng.uniform_int(m - i);
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  pool.resize(static_cast<size_t>(n));
  std::sort(pool.begin(), pool.end());
  return pool;
}

Tensor apply_obs(ObsOperator op, const Tensor& x, const std::vector<int32_t>& idx) {
  switch (op) {
    case ObsOperator::identity:
      return x;
    case ObsOperator::circle_polar: {
      if (x.numel() != 2) throw DimensionError("circle_polar: state must have 2 entries");
      const double r = std::hypot(x.at(0), x.at(1));
      if (r < 1e-12)
        throw DomainError("circle_polar is undefined at the origin (|x| = " +
                          std::to_string(r) + ")");
      // ratios can exceed 1 by an ulp; clamp before the inverse trig
      const double a = std::clamp(x.at(0) / r, -1.0, 1.0);
      const double b = std::clamp(x.at(1) / r, -1.0, 1.0);
      return Tensor::row({r, std::asin(a), std::acos(b)});
    }
    case ObsOperator::lorenz63_nonlinear: {
      if (x.numel() != 3) throw DimensionError("lorenz63_nonlinear: state must have 3 entries");
      return Tensor::row({x.at(0) + 0.5 * std::sin(x.at(0)),
                          x.at(1) + std::cos(x.at(2)), x.at(1) + x.at(2)});
    }
    case ObsOperator::subsample: {
      Tensor y({static_cast<int64_t>(idx.size())});
      for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= x.numel())
          throw DimensionError("subsample: index " + std::to_string(idx[i]) +
                               " outside the state");
        y.at(static_cast<int64_t>(i)) = x.at(idx[i]);
      }
      return y;
    }
    case ObsOperator::arctan: {
      Tensor y(x.shape());
      for (int64_t i = 0; i < x.numel(); ++i) y.at(i) = std::atan(x.at(i));
      return y;
    }
  }
  throw ContractError("unknown ObsOperator");
}

Tensor apply_obs_batch(ObsOperator op, const Tensor& X, const std::vector<int32_t>& idx) {
  if (X.rank() != 2) throw DimensionError("apply_obs_batch: particles must be [N,m]");
  const int64_t N = X.dim(0), m = X.dim(1);
  Tensor row({m});
  Tensor out;
  for (int64_t i = 0; i < N; ++i) {
    std::copy_n(X.data() + i * m, m, row.data());
    Tensor y = apply_obs(op, row, idx);
    if (i == 0) out = Tensor({N, y.numel()});
    std::copy_n(y.data(), y.numel(), out.data() + i * y.numel());
  }
  return out;
}

ObsResult observe(const SystemSpec& spec, const Tensor& x, Rng& rng) {
  ObsResult res;
  if (spec.obs_op == ObsOperator::subsample)
    res.idx = draw_subsample_indices(spec.m, spec.n, rng);
  res.y = apply_obs(spec.obs_op, x, res.idx);
  if (static_cast<int64_t>(spec.r_diag.size()) != res.y.numel())
    throw ConfigError("observe: r_diag is not resolved for this operator");
  for (int64_t j = 0; j < res.y.numel(); ++j)
    res.y.at(j) += std::sqrt(spec.r_diag[static_cast<size_t>(j)]) * rng.normal();
  return res;
}

// ---- dataset generation --------------------------------------------------------

Tensor draw_initial_state(const TruthModel& model, Rng& rng) {
  const SystemSpec& spec = model.spec();
  Tensor x({spec.m});
  if (spec.name == SystemName::allen_cahn ||
      spec.name == SystemName::allen_cahn_control) {
    const double U = 0.8 + 0.4 * rng.uniform();
    const auto grid = allen_cahn_grid(spec.m);
    for (int64_t i = 0; i < spec.m; ++i) {
      const double g = grid[static_cast<size_t>(i)];
      x.at(i) = U * g * g * std::cos(kPi * g);
    }
  } else {
    for (int64_t i = 0; i < spec.m; ++i)
      x.at(i) = spec.mu0[static_cast<size_t>(i)] +
                std::sqrt(spec.sigma0_diag[static_cast<size_t>(i)]) * rng.normal();
  }
  if (spec.burn_in > 0) {
    Tensor xm({1, spec.m});
    std::copy_n(x.data(), spec.m, xm.data());
    for (int64_t t = 0; t < spec.burn_in; ++t) {
      Rng step = rng.substream(1000 + static_cast<uint64_t>(t));
      xm = model.step_sample_batch(xm, nullptr, step);
    }
    std::copy_n(xm.data(), spec.m, x.data());
  }
  return x;
}

Tensor sample_prior_ensemble(const SystemSpec& spec, int64_t N, Rng& rng) {
  if (N < 1) throw ConfigError("prior ensemble needs at least one particle");
  Tensor out({N, spec.m});
  for (int64_t i = 0; i < N; ++i) {
    Rng pr = rng.substream(static_cast<uint64_t>(i));
    double* row = out.data() + i * spec.m;
    for (int64_t j = 0; j < spec.m; ++j)
      row[j] = spec.mu0[static_cast<size_t>(j)] +
               std::sqrt(spec.sigma0_diag[static_cast<size_t>(j)]) * pr.normal();
  }
  return out;
}

namespace {

// Phase tags for per-trajectory substreams.
constexpr uint64_t kTrainPhase = 1, kTestPhase = 2;
// Stream tags within a trajectory.
constexpr uint64_t kIcStream = 0, kControlStream = 1, kStepBase = 100,
                   kObsBase = 20000, kNoiseBase = 40000;

struct CleanTrajectory {
  Trajectory traj;     // obs filled with noise-free values first
};

CleanTrajectory generate_clean(const TruthModel& model, int64_t id, int64_t T,
                               const Rng& traj_rng) {
  const SystemSpec& spec = model.spec();
  CleanTrajectory out;
  Trajectory& tr = out.traj;
  tr.id = id;
  tr.states = Tensor({T + 1, spec.m});

  Rng ic = traj_rng.substream(kIcStream);
  Tensor x0 = draw_initial_state(model, ic);
  std::copy_n(x0.data(), spec.m, tr.states.data());

  if (spec.control) {
    Rng ctrl = traj_rng.substream(kControlStream);
    const double Uc = 0.4 + 0.2 * ctrl.uniform();
    const auto grid = allen_cahn_grid(spec.m);
    tr.controls = Tensor({T, spec.m});
    for (int64_t t = 0; t < T; ++t)
      for (int64_t i = 0; i < spec.m; ++i)
        tr.controls.at2(t, i) = Uc * std::sin(kPi * grid[static_cast<size_t>(i)]) *
                                std::cos(kPi * static_cast<double>(t) * spec.dt);
  }

  tr.obs = Tensor({T, spec.n});
  if (spec.obs_op == ObsOperator::subsample)
    tr.obs_idx.resize(static_cast<size_t>(T));

  Tensor x({1, spec.m});
  std::copy_n(x0.data(), spec.m, x.data());
  Tensor crow({spec.m});
  for (int64_t t = 0; t < T; ++t) {
    Rng step = traj_rng.substream(kStepBase + static_cast<uint64_t>(t));
    const Tensor* cptr = nullptr;
    if (spec.control) {
      std::copy_n(tr.controls.data() + t * spec.m, spec.m, crow.data());
      cptr = &crow;
    }
    x = model.step_sample_batch(x, cptr, step);
    if (!x.all_finite())
      throw NumericError("trajectory " + std::to_string(id) +
                         " diverged at step " + std::to_string(t + 1));
    std::copy_n(x.data(), spec.m, tr.states.data() + (t + 1) * spec.m);

    Rng obs_rng = traj_rng.substream(kObsBase + static_cast<uint64_t>(t));
    std::vector<int32_t> idx;
    if (spec.obs_op == ObsOperator::subsample) {
      idx = draw_subsample_indices(spec.m, spec.n, obs_rng);
      tr.obs_idx[static_cast<size_t>(t)] = idx;
    }
    Tensor xrow({spec.m});
    std::copy_n(x.data(), spec.m, xrow.data());
    Tensor y = apply_obs(spec.obs_op, xrow, idx);
    std::copy_n(y.data(), spec.n, tr.obs.data() + t * spec.n);
  }
  return out;
}

void add_obs_noise(Trajectory& tr, const std::vector<double>& r_diag,
                   const Rng& traj_rng) {
  const int64_t T = tr.obs.dim(0), n = tr.obs.dim(1);
  for (int64_t t = 0; t < T; ++t) {
    Rng noise = traj_rng.substream(kNoiseBase + static_cast<uint64_t>(t));
    for (int64_t j = 0; j < n; ++j)
      tr.obs.at2(t, j) += std::sqrt(r_diag[static_cast<size_t>(j)]) * noise.normal();
  }
}

}  // namespace

double snr_sigma2(const std::vector<Tensor>& clean_obs, double snr_db) {
  if (clean_obs.empty()) throw ConfigError("snr_sigma2: no observations to calibrate on");
  const int64_t n = clean_obs.front().dim(1);
  std::vector<double> mean(static_cast<size_t>(n), 0.0);
  int64_t rows = 0;
  for (const Tensor& y : clean_obs) {
    for (int64_t t = 0; t < y.dim(0); ++t)
      for (int64_t j = 0; j < n; ++j) mean[static_cast<size_t>(j)] += y.at2(t, j);
    rows += y.dim(0);
  }
  for (double& v : mean) v /= static_cast<double>(rows);
  double power = 0.0;
  for (const Tensor& y : clean_obs)
    for (int64_t t = 0; t < y.dim(0); ++t)
      for (int64_t j = 0; j < n; ++j) {
        const double d = y.at2(t, j) - mean[static_cast<size_t>(j)];
        power += d * d;
      }
  power /= static_cast<double>(rows * n);
  return power / std::pow(10.0, snr_db / 10.0);
}

Dataset generate_dataset(const SystemSpec& spec_in, int64_t k_train, int64_t t_train,
                         int64_t k_test, int64_t t_test, uint64_t seed, int workers) {
  SystemSpec spec = spec_in;
  if (k_train < 0 || k_test < 0 || t_train < 0 || t_test < 0 ||
      (k_train > 0 && t_train < 1) || (k_test > 0 && t_test < 1))
    throw ConfigError("generate_dataset: trajectory counts/lengths out of range");
  if (spec.snr_mode && k_train < 1)
    throw ConfigError("generate_dataset: snr calibration needs at least one training trajectory");
  TruthModel model(spec);
  Rng master(seed);

  std::vector<CleanTrajectory> train(static_cast<size_t>(k_train)),
      test(static_cast<size_t>(k_test));
  parallel_for(k_train, workers, [&](int64_t k) {
    train[static_cast<size_t>(k)] =
        generate_clean(model, k, t_train, master.substream(kTrainPhase, static_cast<uint64_t>(k)));
  });
  parallel_for(k_test, workers, [&](int64_t k) {
    test[static_cast<size_t>(k)] =
        generate_clean(model, k, t_test, master.substream(kTestPhase, static_cast<uint64_t>(k)));
  });

  if (spec.snr_mode) {
    std::vector<Tensor> clean;
    clean.reserve(train.size());
    for (const auto& c : train) clean.push_back(c.traj.obs);
    const double s2 = snr_sigma2(clean, spec.snr_db);
    spec.r_diag.assign(static_cast<size_t>(spec.n), s2);
  }
  spec.validate();

  Dataset ds;
  ds.spec = spec;
  ds.seed = seed;
  ds.train.reserve(train.size());
  ds.test.reserve(test.size());
  for (int64_t k = 0; k < k_train; ++k) {
    Trajectory& tr = train[static_cast<size_t>(k)].traj;
    add_obs_noise(tr, spec.r_diag, master.substream(kTrainPhase, static_cast<uint64_t>(k)));
    tr.states = Tensor();  // the training split carries observations only
    ds.train.push_back(std::move(tr));
  }
  for (int64_t k = 0; k < k_test; ++k) {
    Trajectory& tr = test[static_cast<size_t>(k)].traj;
    add_obs_noise(tr, spec.r_diag, master.substream(kTestPhase, static_cast<uint64_t>(k)));
    ds.test.push_back(std::move(tr));
  }
  return ds;
}

// ---- serialization ---------------------------------------------------------------

namespace {

json tensor_rows_to_json(const Tensor& t) {
  json rows = json::array();
  for (int64_t i = 0; i < t.dim(0); ++i) {
    json row = json::array();
    for (int64_t j = 0; j < t.dim(1); ++j) row.push_back(t.at2(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Tensor tensor_rows_from_json(const json& rows) {
  const int64_t T = static_cast<int64_t>(rows.size());
  if (T == 0) return Tensor();
  const int64_t n = static_cast<int64_t>(rows.front().size());
  Tensor t({T, n});
  for (int64_t i = 0; i < T; ++i) {
    const auto row = rows[static_cast<size_t>(i)].get<std::vector<double>>();
    if (static_cast<int64_t>(row.size()) != n)
      throw ConfigError("trajectory rows have inconsistent widths");
    std::copy_n(row.data(), n, t.data() + i * n);
  }
  return t;
}

}  // namespace

json trajectory_to_json(const Trajectory& t, bool with_states) {
  json j{{"id", t.id}, {"y", tensor_rows_to_json(t.obs)}};
  if (with_states && !t.states.empty()) j["x"] = tensor_rows_to_json(t.states);
  if (!t.controls.empty()) j["c"] = tensor_rows_to_json(t.controls);
  if (!t.obs_idx.empty()) j["obs_idx"] = t.obs_idx;
  return j;
}

Trajectory trajectory_from_json(const json& j) {
  Trajectory t;
  t.id = j.at("id").get<int64_t>();
  t.obs = tensor_rows_from_json(j.at("y"));
  if (j.contains("x")) t.states = tensor_rows_from_json(j.at("x"));
  if (j.contains("c")) t.controls = tensor_rows_from_json(j.at("c"));
  if (j.contains("obs_idx"))
    t.obs_idx = j.at("obs_idx").get<std::vector<std::vector<int32_t>>>();
  return t;
}

void write_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    json header{{"spec", ds.spec.to_json()},
                {"seed", ds.seed},
                {"train_count", ds.train.size()},
                {"test_count", ds.test.size()},
                {"train_steps", ds.train.empty() ? 0 : ds.train.front().steps()},
                {"test_steps", ds.test.empty() ? 0 : ds.test.front().steps()}};
    std::ofstream out(dir + "/header.json");
    if (!out) throw Error("cannot write " + dir + "/header.json");
    out << header.dump(2) << '\n';
  }
  auto write_split = [&](const std::string& path,
                         const std::vector<Trajectory>& split, bool with_states) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    for (const auto& t : split) out << trajectory_to_json(t, with_states).dump() << '\n';
  };
  write_split(dir + "/train.jsonl", ds.train, false);
  write_split(dir + "/test.jsonl", ds.test, true);
}

Dataset read_dataset(const std::string& dir) {
  Dataset ds;
  {
    std::ifstream in(dir + "/header.json");
    if (!in) throw Error("cannot open " + dir + "/header.json");
    json header = json::parse(in);
    ds.spec = SystemSpec::from_json(header.at("spec"));
    ds.seed = header.at("seed").get<uint64_t>();
  }
  auto read_split = [&](const std::string& path, std::vector<Trajectory>& split) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      split.push_back(trajectory_from_json(json::parse(line)));
    }
  };
  read_split(dir + "/train.jsonl", ds.train);
  read_split(dir + "/test.jsonl", ds.test);
  return ds;
}

}  // namespace rlda
