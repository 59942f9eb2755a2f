#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "rlda/filters.hpp"
#include "rlda/ppo.hpp"
#include "rlda/ssm.hpp"
#include "rlda/surrogate.hpp"
#include "rlda/tensor.hpp"

namespace rlda {

// Analysis error sqrt( (1/(mT)) sum_t ||mean_i x_t^(i) - x_t*||^2 ).
// `ensembles` holds one [N, m] posterior per step, `truth` is [T, m].
double rmse_a(const std::vector<Tensor>& ensembles, const Tensor& truth);

// CRPS of a scalar empirical ensemble:
// (1/N) sum_i |x_i - x*|  -  (1/(2 N^2)) sum_{i,j} |x_i - x_j|.
double crps_scalar(const std::vector<double>& ens, double truth);

// crps_scalar averaged over every (step, component) pair.
double crps(const std::vector<Tensor>& ensembles, const Tensor& truth);

// Forecast error at each horizon: P initial conditions from the generating
// law (burn-in included), each propagated as an N-member ensemble under both
// transitions with independent noise, then
// rmse_f(h) = sqrt( (1/(mP)) sum_p ||surrogate mean - truth mean||^2 ).
// Controlled systems replay the dataset control law per initial condition.
struct ForecastOptions {
  int64_t n_init = 1000;     // P
  int64_t n_particles = 20;  // ensemble size N
  uint64_t seed = 0;
  int workers = 0;
};

std::vector<double> rmse_f(const TransitionFn& surrogate, const SystemSpec& spec,
                           const std::vector<int64_t>& horizons, const ForecastOptions& opt);

struct TrajectoryEval {
  int64_t id = 0;
  double rmse_a = 0.0;
  double crps = 0.0;
  double loglik = 0.0;
};

struct EvalReport {
  std::string system;
  std::string method;  // enkf | pf
  int64_t n_particles = 0;
  uint64_t seed = 0;
  double snr_db = 0.0;     // NaN unless the dataset was SNR-calibrated
  bool has_snr = false;
  std::vector<TrajectoryEval> per_trajectory;
  double rmse_a = 0.0;  // means over per_trajectory
  double crps = 0.0;
  std::vector<int64_t> horizons;
  std::vector<double> rmse_f;  // aligned with horizons

  // Metric values must be finite and nonnegative.
  void validate() const;
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

struct EvalOptions {
  FilterMethod method = FilterMethod::enkf;
  int64_t n_particles = 20;
  std::vector<int64_t> horizons;  // empty skips rmse_f
  ForecastOptions forecast;
  uint64_t seed = 0;
  int workers = 0;
};

// Filters every test trajectory with the surrogate transition and aggregates
// the metrics. Test trajectories must carry truth states.
EvalReport evaluate_policy(const Policy& p, const Dataset& ds, const EvalOptions& opt);

// Long format: one row per trajectory per metric plus aggregate rows.
void write_eval_csv(const std::string& path, const std::vector<EvalReport>& reports);

// Regenerates the dataset at each SNR level, trains from scratch, evaluates.
struct SnrSweepConfig {
  SystemSpec spec;  // snr fields overwritten per level
  std::vector<double> snr_db;
  int64_t k_train = 0, t_train = 0, k_test = 0, t_test = 0;
  uint64_t data_seed = 0;
  TrainConfig train;
  EvalOptions eval;
};

std::vector<EvalReport> snr_sweep(const SnrSweepConfig& cfg);

}  // namespace rlda
