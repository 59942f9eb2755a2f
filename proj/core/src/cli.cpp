#include "rlda/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "rlda/config.hpp"
#include "rlda/errors.hpp"
#include "rlda/filters.hpp"
#include "rlda/metrics.hpp"
#include "rlda/ppo.hpp"
#include "rlda/ssm.hpp"
#include "rlda/surrogate.hpp"

namespace rlda {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

json rows_to_json(const Tensor& t) {
  json out = json::array();
  for (int64_t i = 0; i < t.dim(0); ++i) {
    json row = json::array();
    for (int64_t j = 0; j < t.dim(1); ++j) row.push_back(t.at2(i, j));
    out.push_back(row);
  }
  return out;
}

Tensor rows_from_json(const json& rows) {
  const int64_t r = static_cast<int64_t>(rows.size());
  const int64_t c = r > 0 ? static_cast<int64_t>(rows.at(0).size()) : 0;
  Tensor t({r, c});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) t.at2(i, j) = rows.at(i).at(j).get<double>();
  return t;
}

std::vector<double> tensor_row(const Tensor& t, int64_t row) {
  std::vector<double> out(static_cast<size_t>(t.dim(1)));
  for (int64_t j = 0; j < t.dim(1); ++j) out[static_cast<size_t>(j)] = t.at2(row, j);
  return out;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create directory '" + dir + "': " + ec.message());
}

void write_resolved_config(const RunConfig& cfg) {
  ensure_dir(cfg.io.out_dir);
  cfg.save((fs::path(cfg.io.out_dir) / "resolved_config.json").string());
}

Dataset load_dataset(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "header.json"))
    throw ConfigError("no dataset at '" + dir + "' (run gen first)");
  return read_dataset(dir);
}

// The dataset header is authoritative once generated (noise resolved there);
// the config must still describe the same system.
void check_dataset_matches(const SystemSpec& cfg_spec, const SystemSpec& ds_spec) {
  if (cfg_spec.name != ds_spec.name || cfg_spec.m != ds_spec.m || cfg_spec.n != ds_spec.n ||
      cfg_spec.obs_op != ds_spec.obs_op)
    throw ConfigError("dataset at odds with config.system (" + to_string(ds_spec.name) + " " +
                      std::to_string(ds_spec.m) + "/" + std::to_string(ds_spec.n) + " vs " +
                      to_string(cfg_spec.name) + " " + std::to_string(cfg_spec.m) + "/" +
                      std::to_string(cfg_spec.n) + ")");
}

Trajectory truncate_trajectory(const Trajectory& tr, int64_t steps) {
  if (steps >= tr.steps()) return tr;
  Trajectory out;
  out.id = tr.id;
  out.obs = Tensor({steps, tr.obs.dim(1)});
  std::copy_n(tr.obs.data(), steps * tr.obs.dim(1), out.obs.data());
  if (!tr.states.empty()) {
    out.states = Tensor({steps + 1, tr.states.dim(1)});
    std::copy_n(tr.states.data(), (steps + 1) * tr.states.dim(1), out.states.data());
  }
  if (!tr.controls.empty()) {
    out.controls = Tensor({steps, tr.controls.dim(1)});
    std::copy_n(tr.controls.data(), steps * tr.controls.dim(1), out.controls.data());
  }
  if (!tr.obs_idx.empty())
    out.obs_idx.assign(tr.obs_idx.begin(), tr.obs_idx.begin() + steps);
  return out;
}

std::string method_label(bool truth_model, FilterMethod backend, bool control) {
  if (truth_model) return "truth-" + to_string(backend);
  if (backend == FilterMethod::enkf && control) return "ppo-enkfc";
  return "ppo-" + to_string(backend);
}

struct CommonArgs {
  std::string config_path;
  std::string out_dir;      // override io.out_dir
  std::string dataset_dir;  // override io.dataset_dir
  int workers = -1;         // override train.workers when >= 0
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
  auto* opt = cmd->add_option("-c,--config", args.config_path, "RunConfig JSON file");
  if (config_required) opt->required();
  cmd->add_option("--out-dir", args.out_dir, "override io.out_dir");
  cmd->add_option("--dataset", args.dataset_dir, "override io.dataset_dir");
  cmd->add_option("--workers", args.workers, "override train.workers");
}

RunConfig load_config(const CommonArgs& args) {
  RunConfig cfg = RunConfig::load(args.config_path);
  if (!args.out_dir.empty()) {
    cfg.io = IoConfig{};  // rebase every derived path on the new root
    cfg.io.out_dir = args.out_dir;
  }
  if (!args.dataset_dir.empty()) cfg.io.dataset_dir = args.dataset_dir;
  if (args.workers >= 0) cfg.train.workers = args.workers;
  cfg.resolve();
  return cfg;
}

FilterMethod eval_backend(const RunConfig& cfg, const std::string& flag_method) {
  if (!flag_method.empty()) return filter_method_from_string(flag_method);
  if (!cfg.eval.method.empty()) return filter_method_from_string(cfg.eval.method);
  return cfg.train.backend;
}

// ---- gen -------------------------------------------------------------------

int cmd_gen(const CommonArgs& args, uint64_t seed_override, bool has_seed) {
  RunConfig cfg = load_config(args);
  if (has_seed) cfg.data.seed = seed_override;
  if (cfg.data.k_train < 1 && cfg.data.k_test < 1)
    throw ConfigError("gen: config.data requests no trajectories");

  Dataset ds = generate_dataset(cfg.system, cfg.data.k_train, cfg.data.t_train, cfg.data.k_test,
                                cfg.data.t_test, cfg.data.seed, cfg.train.workers);
  ensure_dir(cfg.io.dataset_dir);
  write_dataset(cfg.io.dataset_dir, ds);
  write_resolved_config(cfg);

  std::printf("system       %s (m=%lld, n=%lld, obs=%s)\n", to_string(ds.spec.name).c_str(),
              static_cast<long long>(ds.spec.m), static_cast<long long>(ds.spec.n),
              to_string(ds.spec.obs_op).c_str());
  std::printf("train        %lld x %lld steps\n", static_cast<long long>(cfg.data.k_train),
              static_cast<long long>(cfg.data.t_train));
  std::printf("test         %lld x %lld steps\n", static_cast<long long>(cfg.data.k_test),
              static_cast<long long>(cfg.data.t_test));
  if (ds.spec.snr_mode)
    std::printf("noise        snr %.1f dB -> r[0] %.6g\n", ds.spec.snr_db,
                ds.spec.r_diag.empty() ? 0.0 : ds.spec.r_diag[0]);
  std::printf("dataset      %s\n", cfg.io.dataset_dir.c_str());
  return 0;
}

// ---- train -----------------------------------------------------------------

int cmd_train(const CommonArgs& args, int64_t iterations_override, const std::string& backend) {
  RunConfig cfg = load_config(args);
  if (iterations_override >= 0) cfg.train.iterations = iterations_override;
  if (!backend.empty()) cfg.train.backend = filter_method_from_string(backend);

  Dataset ds = load_dataset(cfg.io.dataset_dir);
  check_dataset_matches(cfg.system, ds.spec);

  TrainConfig tc = cfg.train;
  ensure_dir(cfg.io.out_dir);
  tc.log_path = cfg.io.train_log;
  tc.checkpoint_path = cfg.io.checkpoint;
  tc.validate();

  TrainResult res = train(ds, tc);
  write_resolved_config(cfg);

  const std::string flavor = method_label(false, tc.backend, ds.spec.control);
  std::printf("method       %s\n", flavor.c_str());
  std::printf("iterations   %zu%s\n", res.log.size(), res.plateaued ? " (plateaued)" : "");
  if (!res.log.empty()) {
    std::printf("mean return  %.4f (first) -> %.4f (last)\n", res.log.front().mean_return,
                res.log.back().mean_return);
    std::printf("best return  %.4f at iteration %lld\n", res.best_return,
                static_cast<long long>(res.best_iteration));
  }
  std::printf("checkpoint   %s\n", cfg.io.checkpoint.c_str());
  std::printf("log          %s\n", cfg.io.train_log.c_str());
  return 0;
}

// ---- assimilate -------------------------------------------------------------

struct AssimilateArgs {
  std::string checkpoint;
  std::string method;
  int64_t particles = 0;  // 0 keeps config value
  int64_t steps = -1;     // -1 assimilates the full trajectory
  uint64_t seed = 0;
  bool has_seed = false;
  bool truth_model = false;
};

int cmd_assimilate(const CommonArgs& args, const AssimilateArgs& a) {
  RunConfig cfg = load_config(args);
  if (!a.checkpoint.empty()) cfg.io.checkpoint = a.checkpoint;
  if (a.particles > 0) cfg.eval.n_particles = a.particles;
  if (a.has_seed) cfg.eval.seed = a.seed;

  Dataset ds = load_dataset(cfg.io.dataset_dir);
  check_dataset_matches(cfg.system, ds.spec);

  Policy policy;
  TruthModel model(ds.spec);
  TransitionFn transition;
  if (a.truth_model) {
    transition = truth_transition(model);
  } else {
    policy = load_policy(cfg.io.checkpoint);
    if (policy.actor_arch.state_dim != ds.spec.m ||
        policy.critic_arch.obs_dim != ds.spec.n ||
        (policy.actor_arch.control_dim > 0) != ds.spec.control)
      throw ConfigError("checkpoint architecture does not match the dataset (state " +
                        std::to_string(policy.actor_arch.state_dim) + " vs m=" +
                        std::to_string(ds.spec.m) + ", obs " +
                        std::to_string(policy.critic_arch.obs_dim) + " vs n=" +
                        std::to_string(ds.spec.n) + ")");
    transition = surrogate_transition(policy);
  }
  const FilterMethod backend = eval_backend(cfg, a.method);

  EvalReport rep;
  rep.system = to_string(ds.spec.name);
  rep.method = method_label(a.truth_model, backend, ds.spec.control);
  rep.n_particles = cfg.eval.n_particles;
  rep.seed = cfg.eval.seed;
  rep.has_snr = ds.spec.snr_mode;
  rep.snr_db = ds.spec.snr_mode ? ds.spec.snr_db : 0.0;

  ensure_dir(cfg.io.posterior_dir);
  Rng root(cfg.eval.seed);
  const int64_t m = ds.spec.m;
  for (size_t k = 0; k < ds.test.size(); ++k) {
    const Trajectory full = ds.test[k];
    const int64_t steps = a.steps < 0 ? full.steps() : std::min<int64_t>(a.steps, full.steps());
    const Trajectory tr = truncate_trajectory(full, steps);

    FilterOptions fo;
    fo.method = backend;
    fo.n_particles = cfg.eval.n_particles;
    fo.keep_history = true;
    Rng frng = root.substream(static_cast<uint64_t>(k));
    FilterResult res = run_filter(ds.spec, tr, transition, fo, frng);

    const fs::path dump = fs::path(cfg.io.posterior_dir) /
                          ("posterior_" + std::to_string(tr.id) + ".jsonl");
    std::ofstream os(dump);
    if (!os) throw ConfigError("cannot write '" + dump.string() + "'");
    for (int64_t t = 0; t < steps; ++t) {
      json line{{"t", t + 1},
                {"mean", tensor_row(res.means, t)},
                {"std", tensor_row(res.stds, t)},
                {"loglik_inc", res.loglik_inc[static_cast<size_t>(t)]}};
      os << line.dump() << '\n';
    }

    json state{{"t", steps},
               {"trajectory", tr.id},
               {"ensemble", rows_to_json(res.final_particles)}};
    std::ofstream ss(fs::path(cfg.io.posterior_dir) /
                     ("state_" + std::to_string(tr.id) + ".json"));
    ss << state.dump(2) << '\n';

    if (!tr.states.empty()) {
      Tensor truth({steps, m});
      std::copy_n(tr.states.data() + m, steps * m, truth.data());
      TrajectoryEval ev;
      ev.id = tr.id;
      ev.rmse_a = rmse_a(res.history, truth);
      ev.crps = crps(res.history, truth);
      ev.loglik = res.loglik;
      rep.per_trajectory.push_back(ev);
    }
  }

  if (!rep.per_trajectory.empty()) {
    for (const auto& e : rep.per_trajectory) {
      rep.rmse_a += e.rmse_a;
      rep.crps += e.crps;
    }
    rep.rmse_a /= static_cast<double>(rep.per_trajectory.size());
    rep.crps /= static_cast<double>(rep.per_trajectory.size());
  }
  if (!cfg.eval.horizons.empty() && !ds.test.empty()) {
    rep.horizons = cfg.eval.horizons;
    ForecastOptions fopt;
    fopt.n_init = cfg.eval.forecast_inits;
    fopt.n_particles = cfg.eval.forecast_particles;
    fopt.seed = cfg.eval.seed;
    fopt.workers = cfg.train.workers;
    rep.rmse_f = rmse_f(transition, ds.spec, cfg.eval.horizons, fopt);
  }
  rep.validate();

  std::ofstream ro(cfg.io.report);
  if (!ro) throw ConfigError("cannot write '" + cfg.io.report + "'");
  ro << rep.to_json().dump(2) << '\n';
  write_resolved_config(cfg);

  std::printf("method       %s\n", rep.method.c_str());
  std::printf("trajectories %zu\n", ds.test.size());
  if (!rep.per_trajectory.empty())
    std::printf("rmse_a       %.6f\ncrps         %.6f\n", rep.rmse_a, rep.crps);
  std::printf("report       %s\n", cfg.io.report.c_str());
  return 0;
}

// ---- forecast ---------------------------------------------------------------

int cmd_forecast(const CommonArgs& args, const std::string& checkpoint, int64_t horizon,
                 bool truth_model) {
  if (horizon < 0) throw ConfigError("forecast: horizon must be >= 0");
  RunConfig cfg = load_config(args);
  if (!checkpoint.empty()) cfg.io.checkpoint = checkpoint;

  Dataset ds = load_dataset(cfg.io.dataset_dir);
  check_dataset_matches(cfg.system, ds.spec);

  Policy policy;
  TruthModel model(ds.spec);
  TransitionFn transition;
  if (truth_model) {
    transition = truth_transition(model);
  } else {
    policy = load_policy(cfg.io.checkpoint);
    transition = surrogate_transition(policy);
  }

  ensure_dir(cfg.io.forecast_dir);
  Rng root(cfg.eval.seed);
  const int64_t m = ds.spec.m;
  for (size_t k = 0; k < ds.test.size(); ++k) {
    const Trajectory& tr = ds.test[k];
    const fs::path state_path = fs::path(cfg.io.posterior_dir) /
                                ("state_" + std::to_string(tr.id) + ".json");
    std::ifstream is(state_path);
    if (!is)
      throw ContractError("forecast: no assimilation state at '" + state_path.string() +
                          "' (run assimilate first)");
    json st;
    is >> st;
    const int64_t t0 = st.at("t").get<int64_t>();
    Tensor particles = rows_from_json(st.at("ensemble"));
    if (particles.dim(1) != m)
      throw ConfigError("forecast: stored ensemble width does not match the dataset");
    if (ds.spec.control && t0 + horizon > tr.steps())
      throw ConfigError("forecast: horizon exceeds the recorded control sequence");

    const fs::path dump = fs::path(cfg.io.forecast_dir) /
                          ("forecast_" + std::to_string(tr.id) + ".jsonl");
    std::ofstream os(dump);
    if (!os) throw ConfigError("cannot write '" + dump.string() + "'");

    auto write_stats = [&](int64_t t, const Tensor& ens) {
      std::vector<double> mean(static_cast<size_t>(m), 0.0), sd(static_cast<size_t>(m), 0.0);
      const int64_t N = ens.dim(0);
      for (int64_t j = 0; j < m; ++j) {
        double mu = 0.0;
        for (int64_t i = 0; i < N; ++i) mu += ens.at2(i, j);
        mu /= static_cast<double>(N);
        double var = 0.0;
        for (int64_t i = 0; i < N; ++i) var += (ens.at2(i, j) - mu) * (ens.at2(i, j) - mu);
        var = N > 1 ? var / static_cast<double>(N - 1) : 0.0;
        mean[static_cast<size_t>(j)] = mu;
        sd[static_cast<size_t>(j)] = std::sqrt(var);
      }
      json line{{"t", t}, {"mean", mean}, {"std", sd}};
      os << line.dump() << '\n';
    };

    write_stats(t0, particles);  // echo of the handed-over ensemble
    Rng frng = root.substream(0x5c, static_cast<uint64_t>(k));
    Tensor crow({m});
    for (int64_t h = 0; h < horizon; ++h) {
      const int64_t t = t0 + h;
      const double* control = nullptr;
      if (!tr.controls.empty() && t < tr.controls.dim(0)) {
        std::copy_n(tr.controls.data() + t * m, m, crow.data());
        control = crow.data();
      }
      Rng srng = frng.substream(static_cast<uint64_t>(h));
      particles = transition(particles, t, control, srng);
      if (!particles.all_finite())
        throw NumericError("forecast: non-finite ensemble for trajectory " +
                           std::to_string(tr.id) + " at step " + std::to_string(t + 1));
      write_stats(t + 1, particles);
    }
  }
  write_resolved_config(cfg);
  std::printf("forecast     %lld steps for %zu trajectories -> %s\n",
              static_cast<long long>(horizon), ds.test.size(), cfg.io.forecast_dir.c_str());
  return 0;
}

// ---- eval -------------------------------------------------------------------

int cmd_eval(const std::vector<std::string>& report_paths, const std::string& out_csv) {
  if (report_paths.empty()) throw ConfigError("eval: at least one report is required");
  std::vector<EvalReport> reports;
  for (const std::string& path : report_paths) {
    std::ifstream is(path);
    if (!is) throw ConfigError("eval: cannot open '" + path + "'");
    json j;
    try {
      is >> j;
    } catch (const json::parse_error& e) {
      throw ConfigError("eval: '" + path + "' is not valid JSON: " + e.what());
    }
    reports.push_back(EvalReport::from_json(j));
  }

  std::ofstream os(out_csv);
  if (!os) throw ConfigError("eval: cannot write '" + out_csv + "'");
  os << "system,method,snr_db,metric,value,n_traj\n";
  auto row = [&](const EvalReport& r, const std::string& metric, double value) {
    char buf[64] = "";
    if (r.has_snr) std::snprintf(buf, sizeof(buf), "%.17g", r.snr_db);
    char val[64];
    std::snprintf(val, sizeof(val), "%.17g", value);
    os << r.system << ',' << r.method << ',' << buf << ',' << metric << ',' << val << ','
       << r.per_trajectory.size() << '\n';
  };
  for (const EvalReport& r : reports) {
    row(r, "rmse_a", r.rmse_a);
    row(r, "crps", r.crps);
    for (size_t i = 0; i < r.horizons.size(); ++i)
      row(r, "rmse_f@" + std::to_string(r.horizons[i]), r.rmse_f[i]);
  }
  if (!os.good()) throw ConfigError("eval: failed while writing '" + out_csv + "'");
  std::printf("merged %zu reports -> %s\n", reports.size(), out_csv.c_str());
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Learned surrogate dynamics for ensemble data assimilation"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, assim_args, fore_args;

  auto* gen = app.add_subcommand(
      "gen", "Generate a dataset (reads system.*, data.*, train.workers, io.out_dir, "
             "io.dataset_dir)");
  add_common(gen, gen_args);
  uint64_t gen_seed = 0;
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "override data.seed");

  auto* tr = app.add_subcommand(
      "train", "Train the surrogate (reads system.*, train.*, io.dataset_dir, io.checkpoint, "
               "io.train_log, io.out_dir)");
  add_common(tr, train_args);
  int64_t tr_iterations = -1;
  std::string tr_backend;
  tr->add_option("--iterations", tr_iterations, "override train.iterations");
  tr->add_option("--backend", tr_backend, "override train.backend (enkf|pf)");

  auto* as = app.add_subcommand(
      "assimilate",
      "Filter the test split with a checkpoint (reads system.*, eval.*, train.backend, "
      "train.workers, io.dataset_dir, io.checkpoint, io.posterior_dir, io.report, io.out_dir)");
  add_common(as, assim_args);
  AssimilateArgs as_extra;
  as->add_option("--checkpoint", as_extra.checkpoint, "override io.checkpoint");
  as->add_option("--method", as_extra.method, "override eval.method (enkf|pf)");
  as->add_option("--particles", as_extra.particles, "override eval.n_particles");
  as->add_option("--steps", as_extra.steps, "assimilate only the first N steps");
  auto* as_seed_opt = as->add_option("--seed", as_extra.seed, "override eval.seed");
  as->add_flag("--truth-model", as_extra.truth_model,
               "use the true system dynamics instead of a checkpoint");

  auto* fo = app.add_subcommand(
      "forecast",
      "Propagate assimilation states forward without analysis (reads system.*, eval.seed, "
      "io.dataset_dir, io.checkpoint, io.posterior_dir, io.forecast_dir, io.out_dir)");
  add_common(fo, fore_args);
  std::string fo_checkpoint;
  int64_t fo_horizon = 0;
  bool fo_truth = false;
  fo->add_option("--checkpoint", fo_checkpoint, "override io.checkpoint");
  fo->add_option("--horizon", fo_horizon, "steps to forecast")->required();
  fo->add_flag("--truth-model", fo_truth, "use the true system dynamics instead of a checkpoint");

  auto* ev = app.add_subcommand("eval",
                                "Merge evaluation reports into one long-format CSV "
                                "(reads only the listed report files)");
  std::vector<std::string> ev_reports;
  std::string ev_out = "eval.csv";
  ev->add_option("reports", ev_reports, "EvalReport JSON files")->required();
  ev->add_option("-o,--out", ev_out, "output CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(gen_args, gen_seed, gen_seed_opt->count() > 0);
    if (tr->parsed()) return cmd_train(train_args, tr_iterations, tr_backend);
    if (as->parsed()) {
      as_extra.has_seed = as_seed_opt->count() > 0;
      return cmd_assimilate(assim_args, as_extra);
    }
    if (fo->parsed()) return cmd_forecast(fore_args, fo_checkpoint, fo_horizon, fo_truth);
    if (ev->parsed()) return cmd_eval(ev_reports, ev_out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}

}  // namespace rlda
