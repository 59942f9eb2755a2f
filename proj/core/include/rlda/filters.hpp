#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rlda/rng.hpp"
#include "rlda/ssm.hpp"
#include "rlda/tensor.hpp"

namespace rlda {

// Stochastic one-step map applied to a whole ensemble [N, m] -> [N, m].
// `t` is the step index, `control` points at the m-vector c_t or is null.
// Implementations draw particle i's noise from rng.substream(i) so that the
// result is independent of any internal batching.
using TransitionFn =
    std::function<Tensor(const Tensor& particles, int64_t t, const double* control, Rng& rng)>;

// Truth-model transition; `model` must outlive the returned callable.
TransitionFn truth_transition(const TruthModel& model);

// log( (1/N) sum_i N(y; pred_i, diag(r)) ) via log-sum-exp.
// pred_obs is [N, n] (unperturbed mapped forecast particles), y is [n].
double enkf_loglik_increment(const Tensor& pred_obs, const Tensor& y,
                             const std::vector<double>& r_diag);

// Perturbed-observation analysis update. forecast [N, m], pred_obs [N, n].
// Gain solves (YY^T/(N-1) + R) K^T = (XY^T/(N-1))^T; each particle is pulled
// toward its own perturbed observation y + eta_i, eta_i ~ N(0, diag(r)).
Tensor enkf_analysis(const Tensor& forecast, const Tensor& pred_obs, const Tensor& y,
                     const std::vector<double>& r_diag, Rng& rng);

// Normalized importance weights and the log-mean unnormalized weight
// (identical to enkf_loglik_increment by construction).
std::pair<std::vector<double>, double> pf_weights(const Tensor& pred_obs, const Tensor& y,
                                                  const std::vector<double>& r_diag);

// Systematic resampling: strata i/N + u with one shared u ~ U(0, 1/N).
std::vector<int64_t> systematic_resample(const std::vector<double>& weights, Rng& rng);

Tensor gather_rows(const Tensor& X, const std::vector<int64_t>& rows);

double effective_sample_size(const std::vector<double>& weights);

// Exact Kalman recursion, used as the linear-Gaussian oracle.
struct KalmanBelief {
  Tensor mean;  // [m]
  Tensor cov;   // [m, m]
};

KalmanBelief kf_predict(const KalmanBelief& b, const Tensor& A, const Tensor& Q);

// Returns the posterior and log N(y; H m^-, H P^- H^T + R).
std::pair<KalmanBelief, double> kf_update(const KalmanBelief& b, const Tensor& y,
                                          const Tensor& H, const Tensor& R);

struct KalmanRun {
  Tensor means;  // [T, m]
  Tensor stds;   // [T, m]
  std::vector<double> loglik_inc;
  double loglik = 0.0;
  KalmanBelief final_belief;
};

KalmanRun run_kalman(const Tensor& A, const Tensor& Q, const Tensor& H, const Tensor& R,
                     const KalmanBelief& init, const Tensor& obs);

enum class FilterMethod { enkf, pf };

std::string to_string(FilterMethod m);
FilterMethod filter_method_from_string(const std::string& s);

struct FilterOptions {
  FilterMethod method = FilterMethod::enkf;
  int64_t n_particles = 20;
  bool warn_degeneracy = true;  // stderr note when ESS < N/100
  bool keep_history = false;    // record the posterior ensemble of every step
};

struct FilterResult {
  Tensor means;  // [T, m] posterior means
  Tensor stds;   // [T, m] posterior marginal stds
  std::vector<double> loglik_inc;
  double loglik = 0.0;
  Tensor final_particles;        // [N, m] posterior ensemble after the last step
  std::vector<Tensor> history;   // per-step [N, m] posteriors when keep_history
  int64_t degeneracy_warnings = 0;
};

// Filters traj.obs with the given transition. The initial ensemble is drawn
// from N(mu0, Sigma0) of `spec` unless `init` (an [N, m] tensor) is given.
// Per-step randomness comes from rng.substream(t), so runs are reproducible.
FilterResult run_filter(const SystemSpec& spec, const Trajectory& traj,
                        const TransitionFn& transition, const FilterOptions& opt, Rng& rng,
                        const Tensor* init = nullptr);

}  // namespace rlda
