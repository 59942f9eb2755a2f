#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "rlda/rng.hpp"
#include "rlda/tensor.hpp"

namespace rlda {

enum class SystemName {
  circular_motion,
  lorenz63,
  lorenz96,
  allen_cahn,
  allen_cahn_control,
};

enum class ObsOperator {
  identity,
  circle_polar,        // (|x|, arcsin(x1/|x|), arccos(x2/|x|))
  lorenz63_nonlinear,  // (x + sin(x)/2, y + cos(z), y + z)
  subsample,           // n indices redrawn per step, recorded
  arctan,              // elementwise
};

std::string to_string(SystemName v);
std::string to_string(ObsOperator v);
SystemName system_from_string(const std::string& s);
ObsOperator obs_from_string(const std::string& s);

// Full description of a benchmark system: dynamics, process noise, observation
// operator and noise, and the Gaussian filter prior. preset() fills the
// published defaults; individual fields may then be overridden by config.
struct SystemSpec {
  SystemName name = SystemName::circular_motion;
  int64_t m = 0;  // state dimension
  int64_t n = 0;  // observation dimension
  double dt = 0.0;
  std::string scheme;  // map | euler | rk4 | semi_implicit
  std::vector<double> q_diag;  // true process noise (diagonal)
  ObsOperator obs_op = ObsOperator::identity;
  std::vector<double> r_diag;  // observation noise (diagonal)
  bool snr_mode = false;       // r resolved from snr_db at generation time
  double snr_db = 0.0;
  bool control = false;
  std::vector<double> mu0, sigma0_diag;  // filter prior N(mu0, diag(sigma0))
  int64_t burn_in = 0;  // truth-trajectory spin-up steps before t=0

  static SystemSpec preset(SystemName name);
  // Switches the observation operator, recomputing n and the default r_diag.
  void set_obs_operator(ObsOperator op, int64_t subsample_n = 0);
  void validate() const;

  nlohmann::json to_json() const;
  static SystemSpec from_json(const nlohmann::json& j);
};

// ---- transition maps (deterministic parts) --------------------------------

Tensor circular_motion_mean(const Tensor& x);  // rotation by pi/4
// One noisy step of the circular-motion truth: R(pi/4) x + N(0, q_var I).
Tensor circular_motion_step(const Tensor& x, Rng& rng, double q_var = 0.01);

Tensor lorenz63_step(const Tensor& u, double dt = 0.02);

void lorenz96_rhs(const double* x, int64_t m, double F, double* out);
Tensor lorenz96_step(const Tensor& x, double dt = 0.05, double F = 8.0);

// Dense inverse of (I - dt eps^2 L) with L the periodic second-difference
// operator on m points over [-1, 1]; cached by TruthModel.
Tensor allen_cahn_solve_operator(int64_t m, double dt, double eps);
// Semi-implicit step: implicit diffusion, explicit reaction mu (u - u^3) and
// control. Solves for the increment so constant states are conserved exactly.
Tensor allen_cahn_step(const Tensor& u, const Tensor* control, const Tensor& minv,
                       double dt = 0.01, double mu = 3.0);

// Uniform grid x_i = -1 + i * (2/m) used by the Allen-Cahn system.
std::vector<double> allen_cahn_grid(int64_t m);

// The truth dynamics behind a SystemSpec, with per-system caches.
class TruthModel {
 public:
  explicit TruthModel(SystemSpec spec);

  const SystemSpec& spec() const { return spec_; }

  // Deterministic part of x_{t+1} given x_t (length m) and optional control.
  void step_mean(const double* x, const double* c, double* out) const;
  Tensor step_mean_batch(const Tensor& X, const Tensor* c) const;
  // Adds process noise; particle i draws from step_rng.substream(i).
  Tensor step_sample_batch(const Tensor& X, const Tensor* c, Rng& step_rng) const;

 private:
  SystemSpec spec_;
  Tensor ac_minv_;
};

// ---- observation operators --------------------------------------------------

// n sorted indices drawn uniformly without replacement from [0, m).
std::vector<int32_t> draw_subsample_indices(int64_t m, int64_t n, Rng& rng);

// Noise-free observation of a single state; idx is only read for subsample.
Tensor apply_obs(ObsOperator op, const Tensor& x, const std::vector<int32_t>& idx);
// Rows of X observed independently: [N, m] -> [N, n].
Tensor apply_obs_batch(ObsOperator op, const Tensor& X, const std::vector<int32_t>& idx);

struct ObsResult {
  Tensor y;
  std::vector<int32_t> idx;  // empty unless subsample
};

// Draws subsample indices (when applicable) and additive N(0, R) noise.
ObsResult observe(const SystemSpec& spec, const Tensor& x, Rng& rng);

// ---- datasets ----------------------------------------------------------------

struct Trajectory {
  int64_t id = 0;
  Tensor states;    // [T+1, m] including x_0; empty for training data
  Tensor obs;       // [T, n], observations y_1..y_T
  Tensor controls;  // [T, m] c_0..c_{T-1}; empty unless the system has control
  std::vector<std::vector<int32_t>> obs_idx;  // per step; empty unless subsample

  int64_t steps() const { return obs.empty() ? 0 : obs.dim(0); }
};

struct Dataset {
  SystemSpec spec;  // with r_diag resolved
  uint64_t seed = 0;
  std::vector<Trajectory> train, test;
};

// Draws an initial state per the system's generating law (Gaussian prior or
// the Allen-Cahn parametric law) and applies the burn-in spin-up.
Tensor draw_initial_state(const TruthModel& model, Rng& rng);

// Samples the Gaussian filter prior N(mu0, diag(sigma0)): [N, m].
Tensor sample_prior_ensemble(const SystemSpec& spec, int64_t N, Rng& rng);

// Generates train/test trajectories with per-trajectory substreams of `seed`.
// In SNR mode the observation noise variance is calibrated on the noise-free
// training observations before noise is applied to both splits.
Dataset generate_dataset(const SystemSpec& spec, int64_t k_train, int64_t t_train,
                         int64_t k_test, int64_t t_test, uint64_t seed,
                         int workers = 0);

// Noise variance from a signal-to-noise ratio in dB: the signal power is the
// pooled mean square of per-component-centered noise-free observations.
double snr_sigma2(const std::vector<Tensor>& clean_obs, double snr_db);

// Dataset directory layout: header.json, train.jsonl, test.jsonl.
void write_dataset(const std::string& dir, const Dataset& ds);
Dataset read_dataset(const std::string& dir);

nlohmann::json trajectory_to_json(const Trajectory& t, bool with_states);
Trajectory trajectory_from_json(const nlohmann::json& j);

}  // namespace rlda
