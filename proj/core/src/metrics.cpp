#include "rlda/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "rlda/errors.hpp"
#include "rlda/parallel.hpp"

namespace rlda {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

void check_ensembles(const std::vector<Tensor>& ensembles, const Tensor& truth,
                     const char* who) {
  const int64_t T = static_cast<int64_t>(ensembles.size());
  if (T == 0) throw ContractError(std::string(who) + ": no steps");
  if (truth.rank() != 2 || truth.dim(0) != T)
    throw DimensionError(std::string(who) + ": truth must be [T, m] with one row per step");
  const int64_t m = truth.dim(1);
  for (const Tensor& e : ensembles)
    if (e.rank() != 2 || e.dim(1) != m || e.dim(0) < 1)
      throw DimensionError(std::string(who) + ": each ensemble must be [N, m]");
}

}  // namespace

double rmse_a(const std::vector<Tensor>& ensembles, const Tensor& truth) {
  check_ensembles(ensembles, truth, "rmse_a");
  const int64_t T = static_cast<int64_t>(ensembles.size());
  const int64_t m = truth.dim(1);
  double acc = 0.0;
  for (int64_t t = 0; t < T; ++t) {
    const Tensor& e = ensembles[static_cast<size_t>(t)];
    const int64_t N = e.dim(0);
    for (int64_t j = 0; j < m; ++j) {
      double mean = 0.0;
      for (int64_t i = 0; i < N; ++i) mean += e.at2(i, j);
      mean /= static_cast<double>(N);
      const double d = mean - truth.at2(t, j);
      acc += d * d;
    }
  }
  return std::sqrt(acc / static_cast<double>(m * T));
}

double crps_scalar(const std::vector<double>& ens, double truth) {
  const int64_t N = static_cast<int64_t>(ens.size());
  if (N < 1) throw ContractError("crps_scalar: empty ensemble");
  double dtruth = 0.0;
  for (double x : ens) dtruth += std::abs(x - truth);
  double dpair = 0.0;
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = i + 1; j < N; ++j) dpair += std::abs(ens[static_cast<size_t>(i)] -
                                                          ens[static_cast<size_t>(j)]);
  const double n = static_cast<double>(N);
  return dtruth / n - dpair / (n * n);  // pairs counted once, so 2/(2 N^2)
}

double crps(const std::vector<Tensor>& ensembles, const Tensor& truth) {
  check_ensembles(ensembles, truth, "crps");
  const int64_t T = static_cast<int64_t>(ensembles.size());
  const int64_t m = truth.dim(1);
  std::vector<double> col;
  double acc = 0.0;
  for (int64_t t = 0; t < T; ++t) {
    const Tensor& e = ensembles[static_cast<size_t>(t)];
    const int64_t N = e.dim(0);
    col.resize(static_cast<size_t>(N));
    for (int64_t j = 0; j < m; ++j) {
      for (int64_t i = 0; i < N; ++i) col[static_cast<size_t>(i)] = e.at2(i, j);
      acc += crps_scalar(col, truth.at2(t, j));
    }
  }
  return acc / static_cast<double>(m * T);
}

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

// Dataset control law: amplitude drawn per trajectory, sinusoid in space,
// slow cosine in time.
Tensor forecast_controls(const SystemSpec& spec, int64_t horizon, Rng& rng) {
  const double Uc = 0.4 + 0.2 * rng.uniform();
  const auto grid = allen_cahn_grid(spec.m);
  Tensor c({horizon, spec.m});
  for (int64_t t = 0; t < horizon; ++t)
    for (int64_t i = 0; i < spec.m; ++i)
      c.at2(t, i) = Uc * std::sin(kPi * grid[static_cast<size_t>(i)]) *
                    std::cos(kPi * static_cast<double>(t) * spec.dt);
  return c;
}

}  // namespace

std::vector<double> rmse_f(const TransitionFn& surrogate, const SystemSpec& spec,
                           const std::vector<int64_t>& horizons, const ForecastOptions& opt) {
  if (horizons.empty()) return {};
  for (int64_t h : horizons)
    if (h < 1) throw ContractError("rmse_f: horizons must be >= 1");
  if (opt.n_init < 1 || opt.n_particles < 1)
    throw ContractError("rmse_f: need at least one initial condition and one particle");

  const int64_t P = opt.n_init;
  const int64_t N = opt.n_particles;
  const int64_t m = spec.m;
  const int64_t max_h = *std::max_element(horizons.begin(), horizons.end());
  const size_t H = horizons.size();

  TruthModel model(spec);
  Rng root(opt.seed);
  // per-IC squared ensemble-mean gaps, reduced in order afterwards
  std::vector<double> gaps(static_cast<size_t>(P) * H, 0.0);

  parallel_for(P, opt.workers, [&](int64_t p) {
    Rng prng = root.substream(static_cast<uint64_t>(p));
    Rng ic_rng = prng.substream(0);
    Tensor x0 = draw_initial_state(model, ic_rng);

    Tensor controls;
    if (spec.control) {
      Rng ctrl_rng = prng.substream(1);
      controls = forecast_controls(spec, max_h, ctrl_rng);
    }

    Tensor xs({N, m}), xt({N, m});
    for (int64_t i = 0; i < N; ++i) {
      std::copy_n(x0.data(), m, xs.data() + i * m);
      std::copy_n(x0.data(), m, xt.data() + i * m);
    }

    Tensor crow({m});
    for (int64_t s = 0; s < max_h; ++s) {
      const double* c = nullptr;
      if (spec.control) {
        std::copy_n(controls.data() + s * m, m, crow.data());
        c = crow.data();
      }
      Rng srng = prng.substream(2, static_cast<uint64_t>(s));
      Rng trng = prng.substream(3, static_cast<uint64_t>(s));
      xs = surrogate(xs, s, c, srng);
      const Tensor* cptr = spec.control ? &crow : nullptr;
      xt = model.step_sample_batch(xt, cptr, trng);
      if (!xs.all_finite() || !xt.all_finite())
        throw NumericError("rmse_f: non-finite forecast for initial condition " +
                           std::to_string(p) + " at step " + std::to_string(s + 1));

      for (size_t hi = 0; hi < H; ++hi) {
        if (horizons[hi] != s + 1) continue;
        double gap = 0.0;
        for (int64_t j = 0; j < m; ++j) {
          double ms = 0.0, mt = 0.0;
          for (int64_t i = 0; i < N; ++i) {
            ms += xs.at2(i, j);
            mt += xt.at2(i, j);
          }
          const double d = (ms - mt) / static_cast<double>(N);
          gap += d * d;
        }
        gaps[static_cast<size_t>(p) * H + hi] = gap;
      }
    }
  });

  std::vector<double> out(H, 0.0);
  for (int64_t p = 0; p < P; ++p)
    for (size_t hi = 0; hi < H; ++hi) out[hi] += gaps[static_cast<size_t>(p) * H + hi];
  for (size_t hi = 0; hi < H; ++hi)
    out[hi] = std::sqrt(out[hi] / static_cast<double>(m * P));
  return out;
}

void EvalReport::validate() const {
  auto bad = [](double v) { return !std::isfinite(v) || v < 0.0; };
  if (bad(rmse_a) || bad(crps))
    throw NumericError("eval report: non-finite or negative aggregate metric");
  for (const TrajectoryEval& t : per_trajectory)
    if (bad(t.rmse_a) || bad(t.crps) || !std::isfinite(t.loglik))
      throw NumericError("eval report: bad metric for trajectory " + std::to_string(t.id));
  if (rmse_f.size() != horizons.size())
    throw ContractError("eval report: rmse_f/horizons size mismatch");
  for (double v : rmse_f)
    if (bad(v)) throw NumericError("eval report: non-finite or negative rmse_f");
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const TrajectoryEval& t : per_trajectory)
    per.push_back({{"id", t.id}, {"rmse_a", t.rmse_a}, {"crps", t.crps}, {"loglik", t.loglik}});
  nlohmann::json j{{"system", system},
                   {"method", method},
                   {"n_particles", n_particles},
                   {"seed", seed},
                   {"per_trajectory", per},
                   {"rmse_a", rmse_a},
                   {"crps", crps},
                   {"horizons", horizons},
                   {"rmse_f", rmse_f}};
  if (has_snr) j["snr_db"] = snr_db;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.system = j.at("system").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.n_particles = j.at("n_particles").get<int64_t>();
  r.seed = j.at("seed").get<uint64_t>();
  r.has_snr = j.contains("snr_db") && !j.at("snr_db").is_null();
  r.snr_db = r.has_snr ? j.at("snr_db").get<double>() : kNan;
  for (const auto& t : j.at("per_trajectory")) {
    TrajectoryEval e;
    e.id = t.at("id").get<int64_t>();
    e.rmse_a = t.at("rmse_a").get<double>();
    e.crps = t.at("crps").get<double>();
    e.loglik = t.at("loglik").get<double>();
    r.per_trajectory.push_back(e);
  }
  r.rmse_a = j.at("rmse_a").get<double>();
  r.crps = j.at("crps").get<double>();
  r.horizons = j.at("horizons").get<std::vector<int64_t>>();
  r.rmse_f = j.at("rmse_f").get<std::vector<double>>();
  return r;
}

EvalReport evaluate_policy(const Policy& p, const Dataset& ds, const EvalOptions& opt) {
  if (ds.test.empty()) throw ContractError("evaluate_policy: dataset has no test trajectories");
  for (const Trajectory& tr : ds.test)
    if (tr.states.empty())
      throw ContractError("evaluate_policy: test trajectory " + std::to_string(tr.id) +
                          " carries no truth states");

  EvalReport rep;
  rep.system = to_string(ds.spec.name);
  rep.method = to_string(opt.method);
  rep.n_particles = opt.n_particles;
  rep.seed = opt.seed;
  rep.has_snr = ds.spec.snr_mode;
  rep.snr_db = ds.spec.snr_mode ? ds.spec.snr_db : kNan;

  const int64_t K = static_cast<int64_t>(ds.test.size());
  const int64_t m = ds.spec.m;
  rep.per_trajectory.resize(static_cast<size_t>(K));
  TransitionFn surrogate = surrogate_transition(p);
  Rng root(opt.seed);

  parallel_for(K, opt.workers, [&](int64_t k) {
    const Trajectory& tr = ds.test[static_cast<size_t>(k)];
    FilterOptions fo;
    fo.method = opt.method;
    fo.n_particles = opt.n_particles;
    fo.keep_history = true;
    Rng frng = root.substream(static_cast<uint64_t>(k));
    FilterResult res = run_filter(ds.spec, tr, surrogate, fo, frng);

    const int64_t T = tr.steps();
    Tensor truth({T, m});
    std::copy_n(tr.states.data() + m, T * m, truth.data());  // rows 1..T

    TrajectoryEval& e = rep.per_trajectory[static_cast<size_t>(k)];
    e.id = tr.id;
    e.rmse_a = rmse_a(res.history, truth);
    e.crps = crps(res.history, truth);
    e.loglik = res.loglik;
  });

  for (const TrajectoryEval& e : rep.per_trajectory) {
    rep.rmse_a += e.rmse_a;
    rep.crps += e.crps;
  }
  rep.rmse_a /= static_cast<double>(K);
  rep.crps /= static_cast<double>(K);

  if (!opt.horizons.empty()) {
    rep.horizons = opt.horizons;
    ForecastOptions fopt = opt.forecast;
    fopt.workers = opt.workers;
    rep.rmse_f = rmse_f(surrogate, ds.spec, opt.horizons, fopt);
  }
  rep.validate();
  return rep;
}

namespace {

std::string csv_num(double v) {
  if (!std::isfinite(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void csv_row(std::ostream& os, const EvalReport& r, const std::string& traj,
             const std::string& metric, double value) {
  os << r.system << ',' << r.method << ',' << csv_num(r.has_snr ? r.snr_db : kNan) << ','
     << r.n_particles << ',' << traj << ',' << metric << ',' << csv_num(value) << '\n';
}

}  // namespace

void write_eval_csv(const std::string& path, const std::vector<EvalReport>& reports) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open '" + path + "' for writing");
  os << "system,method,snr_db,n_particles,trajectory,metric,value\n";
  for (const EvalReport& r : reports) {
    for (const TrajectoryEval& e : r.per_trajectory) {
      const std::string id = std::to_string(e.id);
      csv_row(os, r, id, "rmse_a", e.rmse_a);
      csv_row(os, r, id, "crps", e.crps);
      csv_row(os, r, id, "loglik", e.loglik);
    }
    csv_row(os, r, "aggregate", "rmse_a", r.rmse_a);
    csv_row(os, r, "aggregate", "crps", r.crps);
    for (size_t i = 0; i < r.horizons.size(); ++i)
      csv_row(os, r, "aggregate", "rmse_f@" + std::to_string(r.horizons[i]), r.rmse_f[i]);
  }
  if (!os.good()) throw ConfigError("failed while writing '" + path + "'");
}

std::vector<EvalReport> snr_sweep(const SnrSweepConfig& cfg) {
  std::vector<EvalReport> out;
  out.reserve(cfg.snr_db.size());
  for (double level : cfg.snr_db) {
    SystemSpec spec = cfg.spec;
    spec.snr_mode = true;
    spec.snr_db = level;
    Dataset ds = generate_dataset(spec, cfg.k_train, cfg.t_train, cfg.k_test, cfg.t_test,
                                  cfg.data_seed, cfg.train.workers);
    TrainResult tr = train(ds, cfg.train);
    out.push_back(evaluate_policy(tr.policy, ds, cfg.eval));
  }
  return out;
}

}  // namespace rlda
