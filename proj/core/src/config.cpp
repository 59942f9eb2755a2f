#include "rlda/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "rlda/errors.hpp"

namespace rlda {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                    const char* section) {
  for (const auto& item : j.items())
    if (!allowed.count(item.key()))
      throw ConfigError("config: unknown key '" + item.key() + "' in section '" + section +
                        "'");
}

// Preset plus overrides. Fixed dimensions may be restated but not changed;
// the observation count is adjustable only through the subsample operator.
SystemSpec parse_system(const nlohmann::json& j) {
  reject_unknown(j,
                 {"name", "m", "n", "dt", "scheme", "q_diag", "obs_op", "r_diag", "snr_mode",
                  "snr_db", "control", "mu0", "sigma0_diag", "burn_in"},
                 "system");
  if (!j.contains("name")) throw ConfigError("config: system.name is required");
  SystemSpec s = SystemSpec::preset(system_from_string(j.at("name").get<std::string>()));

  if (j.contains("m") && j.at("m").get<int64_t>() != s.m)
    throw ConfigError("config: system.m is fixed by the preset");
  if (j.contains("control") && j.at("control").get<bool>() != s.control)
    throw ConfigError("config: system.control is fixed by the preset");
  if (j.contains("dt")) s.dt = j.at("dt").get<double>();
  if (j.contains("scheme")) s.scheme = j.at("scheme").get<std::string>();
  if (j.contains("burn_in")) s.burn_in = j.at("burn_in").get<int64_t>();
  if (j.contains("q_diag")) s.q_diag = j.at("q_diag").get<std::vector<double>>();
  if (j.contains("mu0")) s.mu0 = j.at("mu0").get<std::vector<double>>();
  if (j.contains("sigma0_diag")) s.sigma0_diag = j.at("sigma0_diag").get<std::vector<double>>();

  if (j.contains("obs_op")) {
    const ObsOperator op = obs_from_string(j.at("obs_op").get<std::string>());
    int64_t sub_n = 0;
    if (op == ObsOperator::subsample) {
      if (!j.contains("n"))
        throw ConfigError("config: system.n is required for the subsample operator");
      sub_n = j.at("n").get<int64_t>();
    }
    s.set_obs_operator(op, sub_n);
  }
  if (j.contains("n") && j.at("n").get<int64_t>() != s.n)
    throw ConfigError("config: system.n does not match the observation operator");

  if (j.contains("r_diag")) s.r_diag = j.at("r_diag").get<std::vector<double>>();
  if (j.contains("snr_mode")) s.snr_mode = j.at("snr_mode").get<bool>();
  if (j.contains("snr_db")) s.snr_db = j.at("snr_db").get<double>();
  if (s.snr_mode) s.r_diag.clear();
  s.validate();
  return s;
}

DataConfig parse_data(const nlohmann::json& j) {
  reject_unknown(j, {"k_train", "t_train", "k_test", "t_test", "seed"}, "data");
  DataConfig d;
  if (j.contains("k_train")) d.k_train = j.at("k_train").get<int64_t>();
  if (j.contains("t_train")) d.t_train = j.at("t_train").get<int64_t>();
  if (j.contains("k_test")) d.k_test = j.at("k_test").get<int64_t>();
  if (j.contains("t_test")) d.t_test = j.at("t_test").get<int64_t>();
  if (j.contains("seed")) d.seed = j.at("seed").get<uint64_t>();
  return d;
}

EvalConfig parse_eval(const nlohmann::json& j) {
  reject_unknown(
      j, {"method", "n_particles", "horizons", "forecast_inits", "forecast_particles", "seed"},
      "eval");
  EvalConfig e;
  if (j.contains("method")) {
    e.method = j.at("method").get<std::string>();
    filter_method_from_string(e.method);  // validates
  }
  if (j.contains("n_particles")) e.n_particles = j.at("n_particles").get<int64_t>();
  if (j.contains("horizons")) e.horizons = j.at("horizons").get<std::vector<int64_t>>();
  if (j.contains("forecast_inits")) e.forecast_inits = j.at("forecast_inits").get<int64_t>();
  if (j.contains("forecast_particles"))
    e.forecast_particles = j.at("forecast_particles").get<int64_t>();
  if (j.contains("seed")) e.seed = j.at("seed").get<uint64_t>();
  return e;
}

IoConfig parse_io(const nlohmann::json& j) {
  reject_unknown(j,
                 {"out_dir", "dataset_dir", "checkpoint", "train_log", "posterior_dir",
                  "forecast_dir", "report"},
                 "io");
  IoConfig io;
  if (j.contains("out_dir")) io.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("dataset_dir")) io.dataset_dir = j.at("dataset_dir").get<std::string>();
  if (j.contains("checkpoint")) io.checkpoint = j.at("checkpoint").get<std::string>();
  if (j.contains("train_log")) io.train_log = j.at("train_log").get<std::string>();
  if (j.contains("posterior_dir")) io.posterior_dir = j.at("posterior_dir").get<std::string>();
  if (j.contains("forecast_dir")) io.forecast_dir = j.at("forecast_dir").get<std::string>();
  if (j.contains("report")) io.report = j.at("report").get<std::string>();
  return io;
}

}  // namespace

void RunConfig::validate() const {
  system.validate();
  train.validate();
  if (data.k_train < 0 || data.t_train < 0 || data.k_test < 0 || data.t_test < 0)
    throw ConfigError("config: data counts must be nonnegative");
  if (!eval.method.empty()) filter_method_from_string(eval.method);
  if (eval.n_particles < 1) throw ConfigError("config: eval.n_particles must be >= 1");
  for (int64_t h : eval.horizons)
    if (h < 1) throw ConfigError("config: eval.horizons must be >= 1");
  if (eval.forecast_inits < 1 || eval.forecast_particles < 1)
    throw ConfigError("config: eval.forecast settings must be >= 1");
  if (io.out_dir.empty()) throw ConfigError("config: io.out_dir must not be empty");
}

void RunConfig::resolve() {
  namespace fs = std::filesystem;
  const fs::path base(io.out_dir);
  auto fill = [&](std::string& slot, const char* leaf) {
    if (slot.empty()) slot = (base / leaf).string();
  };
  fill(io.dataset_dir, "dataset");
  fill(io.checkpoint, "checkpoint.json");
  fill(io.train_log, "training_log.csv");
  fill(io.posterior_dir, "posterior");
  fill(io.forecast_dir, "forecast");
  fill(io.report, "eval_report.json");
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json ej{{"n_particles", eval.n_particles},
                    {"horizons", eval.horizons},
                    {"forecast_inits", eval.forecast_inits},
                    {"forecast_particles", eval.forecast_particles},
                    {"seed", eval.seed}};
  if (!eval.method.empty()) ej["method"] = eval.method;  // empty inherits train.backend
  return {{"system", system.to_json()},
          {"data",
           {{"k_train", data.k_train},
            {"t_train", data.t_train},
            {"k_test", data.k_test},
            {"t_test", data.t_test},
            {"seed", data.seed}}},
          {"train", train.to_json()},
          {"eval", ej},
          {"io",
           {{"out_dir", io.out_dir},
            {"dataset_dir", io.dataset_dir},
            {"checkpoint", io.checkpoint},
            {"train_log", io.train_log},
            {"posterior_dir", io.posterior_dir},
            {"forecast_dir", io.forecast_dir},
            {"report", io.report}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: document must be a JSON object");
  reject_unknown(j, {"system", "data", "train", "eval", "io"}, "<top level>");
  if (!j.contains("system")) throw ConfigError("config: section 'system' is required");

  RunConfig c;
  c.system = parse_system(j.at("system"));
  if (j.contains("data")) c.data = parse_data(j.at("data"));
  if (j.contains("train")) {
    reject_unknown(j.at("train"),
                   {"iterations", "epochs", "minibatch", "lr_actor", "lr_critic", "gamma",
                    "lambda", "clip_eps", "grad_clip", "n_particles", "backend",
                    "normalize_advantages", "plateau_window", "plateau_rel", "seed", "workers"},
                   "train");
    c.train = TrainConfig::from_json(j.at("train"));
  }
  if (j.contains("eval")) c.eval = parse_eval(j.at("eval"));
  if (j.contains("io")) c.io = parse_io(j.at("io"));
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void RunConfig::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw ConfigError("config: cannot write '" + path + "'");
  os << to_json().dump(2) << '\n';
  if (!os.good()) throw ConfigError("config: failed while writing '" + path + "'");
}

}  // namespace rlda
