#include "rlda/filters.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "rlda/errors.hpp"

namespace rlda {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

void check_obs_dims(const Tensor& pred_obs, const Tensor& y, const std::vector<double>& r_diag,
                    const char* who) {
  if (pred_obs.rank() != 2) throw DimensionError(std::string(who) + ": pred_obs must be [N, n]");
  const int64_t n = pred_obs.dim(1);
  if (y.numel() != n || static_cast<int64_t>(r_diag.size()) != n)
    throw DimensionError(std::string(who) + ": y/r dims do not match pred_obs width " +
                         std::to_string(n));
  for (double r : r_diag)
    if (!(r > 0.0)) throw DomainError(std::string(who) + ": observation variances must be > 0");
}

// Per-particle log N(y; pred_i, diag(r)).
std::vector<double> particle_logliks(const Tensor& pred_obs, const Tensor& y,
                                     const std::vector<double>& r_diag) {
  const int64_t N = pred_obs.dim(0), n = pred_obs.dim(1);
  double log_norm = 0.0;
  for (int64_t j = 0; j < n; ++j) log_norm += kLog2Pi + std::log(r_diag[j]);
  log_norm *= -0.5;

  std::vector<double> lp(N);
  for (int64_t i = 0; i < N; ++i) {
    double quad = 0.0;
    const double* row = pred_obs.data() + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double d = y.data()[j] - row[j];
      quad += d * d / r_diag[j];
    }
    lp[i] = log_norm - 0.5 * quad;
  }
  return lp;
}

double log_mean_exp(const std::vector<double>& lp) {
  const double mx = *std::max_element(lp.begin(), lp.end());
  if (!std::isfinite(mx)) throw NumericError("log-weights are not finite");
  double s = 0.0;
  for (double v : lp) s += std::exp(v - mx);
  return mx + std::log(s / static_cast<double>(lp.size()));
}

void weighted_moments(const Tensor& particles, const std::vector<double>* weights,
                      double* mean_out, double* std_out) {
  const int64_t N = particles.dim(0), m = particles.dim(1);
  for (int64_t j = 0; j < m; ++j) mean_out[j] = 0.0;
  for (int64_t i = 0; i < N; ++i) {
    const double w = weights ? (*weights)[i] : 1.0 / static_cast<double>(N);
    const double* row = particles.data() + i * m;
    for (int64_t j = 0; j < m; ++j) mean_out[j] += w * row[j];
  }
  std::vector<double> var(m, 0.0);
  for (int64_t i = 0; i < N; ++i) {
    const double w = weights ? (*weights)[i] : 1.0 / static_cast<double>(N);
    const double* row = particles.data() + i * m;
    for (int64_t j = 0; j < m; ++j) {
      const double d = row[j] - mean_out[j];
      var[j] += w * d * d;
    }
  }
  // unbiased scaling in the uniform case, matching the ensemble covariance
  const double scale =
      weights ? 1.0 : static_cast<double>(N) / std::max<double>(1.0, static_cast<double>(N - 1));
  for (int64_t j = 0; j < m; ++j) std_out[j] = std::sqrt(var[j] * scale);
}

}  // namespace

TransitionFn truth_transition(const TruthModel& model) {
  return [&model](const Tensor& particles, int64_t, const double* control, Rng& rng) {
    if (control == nullptr) return model.step_sample_batch(particles, nullptr, rng);
    Tensor c({particles.dim(1)});
    std::copy(control, control + particles.dim(1), c.data());
    return model.step_sample_batch(particles, &c, rng);
  };
}

double enkf_loglik_increment(const Tensor& pred_obs, const Tensor& y,
                             const std::vector<double>& r_diag) {
  check_obs_dims(pred_obs, y, r_diag, "enkf_loglik_increment");
  return log_mean_exp(particle_logliks(pred_obs, y, r_diag));
}

Tensor enkf_analysis(const Tensor& forecast, const Tensor& pred_obs, const Tensor& y,
                     const std::vector<double>& r_diag, Rng& rng) {
  check_obs_dims(pred_obs, y, r_diag, "enkf_analysis");
  if (forecast.rank() != 2 || forecast.dim(0) != pred_obs.dim(0))
    throw DimensionError("enkf_analysis: forecast and pred_obs particle counts differ");
  const int64_t N = forecast.dim(0), m = forecast.dim(1), n = pred_obs.dim(1);
  if (N < 2) throw ContractError("enkf_analysis: needs at least 2 particles");

  CMapRM X(forecast.data(), N, m);
  CMapRM Y(pred_obs.data(), N, n);
  const Eigen::RowVectorXd xm = X.colwise().mean();
  const Eigen::RowVectorXd ym = Y.colwise().mean();
  MatRM Xc = X.rowwise() - xm;
  MatRM Yc = Y.rowwise() - ym;

  const double denom = static_cast<double>(N - 1);
  Eigen::MatrixXd S = (Yc.transpose() * Yc) / denom;
  for (int64_t j = 0; j < n; ++j) S(j, j) += r_diag[j];
  Eigen::LLT<Eigen::MatrixXd> llt(S);
  if (llt.info() != Eigen::Success)
    throw NumericError("enkf_analysis: innovation covariance is not positive definite");

  Eigen::MatrixXd Cxy = (Xc.transpose() * Yc) / denom;          // [m, n]
  Eigen::MatrixXd Kt = llt.solve(Cxy.transpose());              // [n, m] = S^-1 Cxy^T

  // innovations with independently perturbed observations
  MatRM D(N, n);
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = 0; j < n; ++j)
      D(i, j) = y.data()[j] + rng.normal() * std::sqrt(r_diag[j]) - Y(i, j);

  Tensor out({N, m});
  MapRM A(out.data(), N, m);
  A = X + D * Kt;
  return out;
}

std::pair<std::vector<double>, double> pf_weights(const Tensor& pred_obs, const Tensor& y,
                                                  const std::vector<double>& r_diag) {
  check_obs_dims(pred_obs, y, r_diag, "pf_weights");
  std::vector<double> lp = particle_logliks(pred_obs, y, r_diag);
  const double inc = log_mean_exp(lp);
  const double mx = *std::max_element(lp.begin(), lp.end());
  double s = 0.0;
  for (double& v : lp) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : lp) v /= s;
  return {std::move(lp), inc};
}

std::vector<int64_t> systematic_resample(const std::vector<double>& weights, Rng& rng) {
  const int64_t N = static_cast<int64_t>(weights.size());
  if (N == 0) throw ContractError("systematic_resample: empty weights");
  double sum = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw ContractError("systematic_resample: negative weight");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ContractError("systematic_resample: weights sum to " + std::to_string(sum));

  const double u = rng.uniform() / static_cast<double>(N);
  std::vector<int64_t> idx(N);
  double cum = weights[0] / sum;
  int64_t j = 0;
  for (int64_t i = 0; i < N; ++i) {
    const double pos = static_cast<double>(i) / static_cast<double>(N) + u;
    while (pos > cum && j + 1 < N) cum += weights[++j] / sum;
    idx[i] = j;
  }
  return idx;
}

Tensor gather_rows(const Tensor& X, const std::vector<int64_t>& rows) {
  if (X.rank() != 2) throw DimensionError("gather_rows: expected a matrix");
  const int64_t m = X.dim(1);
  Tensor out({static_cast<int64_t>(rows.size()), m});
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= X.dim(0)) throw ContractError("gather_rows: index out of range");
    std::copy(X.data() + rows[i] * m, X.data() + (rows[i] + 1) * m, out.data() + i * m);
  }
  return out;
}

double effective_sample_size(const std::vector<double>& weights) {
  double s2 = 0.0;
  for (double w : weights) s2 += w * w;
  return s2 > 0.0 ? 1.0 / s2 : 0.0;
}

KalmanBelief kf_predict(const KalmanBelief& b, const Tensor& A, const Tensor& Q) {
  const int64_t m = b.mean.numel();
  if (A.rank() != 2 || A.dim(0) != m || A.dim(1) != m || Q.dim(0) != m)
    throw DimensionError("kf_predict: A/Q do not match the state dimension");
  CMapRM Am(A.data(), m, m);
  CMapRM Qm(Q.data(), m, m);
  CMapRM Pm(b.cov.data(), m, m);
  Eigen::Map<const Eigen::VectorXd> mu(b.mean.data(), m);

  KalmanBelief out{Tensor({m}), Tensor({m, m})};
  Eigen::Map<Eigen::VectorXd>(out.mean.data(), m) = Am * mu;
  MapRM(out.cov.data(), m, m) = Am * Pm * Am.transpose() + Qm;
  return out;
}

std::pair<KalmanBelief, double> kf_update(const KalmanBelief& b, const Tensor& y, const Tensor& H,
                                          const Tensor& R) {
  const int64_t m = b.mean.numel();
  const int64_t n = y.numel();
  if (H.rank() != 2 || H.dim(0) != n || H.dim(1) != m || R.dim(0) != n)
    throw DimensionError("kf_update: H/R do not match the model dimensions");
  CMapRM Hm(H.data(), n, m);
  CMapRM Rm(R.data(), n, n);
  CMapRM Pm(b.cov.data(), m, m);
  Eigen::Map<const Eigen::VectorXd> mu(b.mean.data(), m);
  Eigen::Map<const Eigen::VectorXd> yv(y.data(), n);

  const Eigen::MatrixXd PHt = Pm * Hm.transpose();
  Eigen::MatrixXd S = Hm * PHt + Rm;
  S = 0.5 * (S + S.transpose().eval());
  Eigen::LLT<Eigen::MatrixXd> llt(S);
  if (llt.info() != Eigen::Success)
    throw NumericError("kf_update: innovation covariance is not positive definite");

  const Eigen::VectorXd e = yv - Hm * mu;
  const Eigen::MatrixXd K = llt.solve(PHt.transpose()).transpose();  // P H^T S^-1

  KalmanBelief out{Tensor({m}), Tensor({m, m})};
  Eigen::Map<Eigen::VectorXd>(out.mean.data(), m) = mu + K * e;
  const Eigen::MatrixXd IKH = Eigen::MatrixXd::Identity(m, m) - K * Hm;
  Eigen::MatrixXd P = IKH * Pm * IKH.transpose() + K * Rm * K.transpose();  // Joseph form
  MapRM(out.cov.data(), m, m) = 0.5 * (P + P.transpose().eval());

  double logdet = 0.0;
  const auto& L = llt.matrixLLT();
  for (int64_t j = 0; j < n; ++j) logdet += 2.0 * std::log(L(j, j));
  const double quad = e.dot(llt.solve(e));
  const double inc = -0.5 * (static_cast<double>(n) * kLog2Pi + logdet + quad);
  return {std::move(out), inc};
}

KalmanRun run_kalman(const Tensor& A, const Tensor& Q, const Tensor& H, const Tensor& R,
                     const KalmanBelief& init, const Tensor& obs) {
  const int64_t T = obs.empty() ? 0 : obs.dim(0);
  const int64_t m = init.mean.numel();
  KalmanRun run;
  run.means = Tensor({T, m});
  run.stds = Tensor({T, m});
  run.loglik_inc.resize(T);
  KalmanBelief b = init;
  for (int64_t t = 0; t < T; ++t) {
    b = kf_predict(b, A, Q);
    Tensor yt({obs.dim(1)});
    std::copy(obs.data() + t * obs.dim(1), obs.data() + (t + 1) * obs.dim(1), yt.data());
    auto [post, inc] = kf_update(b, yt, H, R);
    b = std::move(post);
    run.loglik_inc[t] = inc;
    run.loglik += inc;
    for (int64_t j = 0; j < m; ++j) {
      run.means.at2(t, j) = b.mean.at(j);
      run.stds.at2(t, j) = std::sqrt(std::max(0.0, b.cov.at2(j, j)));
    }
  }
  run.final_belief = std::move(b);
  return run;
}

std::string to_string(FilterMethod m) { return m == FilterMethod::enkf ? "enkf" : "pf"; }

FilterMethod filter_method_from_string(const std::string& s) {
  if (s == "enkf") return FilterMethod::enkf;
  if (s == "pf") return FilterMethod::pf;
  throw ConfigError("unknown filter method '" + s + "' (expected enkf|pf)");
}

FilterResult run_filter(const SystemSpec& spec, const Trajectory& traj,
                        const TransitionFn& transition, const FilterOptions& opt, Rng& rng,
                        const Tensor* init) {
  if (spec.r_diag.empty())
    throw ConfigError("run_filter: observation noise is unresolved (generate data first)");
  const int64_t T = traj.steps();
  const int64_t m = spec.m;
  const int64_t N = init ? init->dim(0) : opt.n_particles;
  if (N < 2 && opt.method == FilterMethod::enkf)
    throw ContractError("run_filter: enkf needs at least 2 particles");
  if (N < 1) throw ContractError("run_filter: needs at least 1 particle");

  Rng init_rng = rng.substream(0x1c);
  Tensor particles = init ? *init : sample_prior_ensemble(spec, N, init_rng);
  if (init && (init->rank() != 2 || init->dim(1) != m))
    throw DimensionError("run_filter: init ensemble must be [N, m]");

  FilterResult res;
  res.means = Tensor({T, m});
  res.stds = Tensor({T, m});
  res.loglik_inc.resize(T);

  const bool has_controls = !traj.controls.empty();
  for (int64_t t = 0; t < T; ++t) {
    Rng step_rng = rng.substream(1, static_cast<uint64_t>(t));
    Rng trans_rng = step_rng.substream(0);
    const double* control = has_controls ? traj.controls.data() + t * m : nullptr;

    Tensor forecast = transition(particles, t, control, trans_rng);
    if (forecast.rank() != 2 || forecast.dim(0) != N || forecast.dim(1) != m)
      throw DimensionError("run_filter: transition returned a misshapen ensemble");
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < m; ++j)
        if (!std::isfinite(forecast.at2(i, j)))
          throw NumericError("run_filter: non-finite forecast particle " + std::to_string(i) +
                             " at step " + std::to_string(t));

    const std::vector<int32_t> no_idx;
    const std::vector<int32_t>& idx = traj.obs_idx.empty() ? no_idx : traj.obs_idx[t];
    Tensor pred = apply_obs_batch(spec.obs_op, forecast, idx);
    Tensor yt({traj.obs.dim(1)});
    std::copy(traj.obs.data() + t * yt.numel(), traj.obs.data() + (t + 1) * yt.numel(), yt.data());

    if (opt.method == FilterMethod::enkf) {
      res.loglik_inc[t] = enkf_loglik_increment(pred, yt, spec.r_diag);
      Rng an_rng = step_rng.substream(1);
      particles = enkf_analysis(forecast, pred, yt, spec.r_diag, an_rng);
      weighted_moments(particles, nullptr, res.means.data() + t * m, res.stds.data() + t * m);
    } else {
      auto [w, inc] = pf_weights(pred, yt, spec.r_diag);
      res.loglik_inc[t] = inc;
      if (opt.warn_degeneracy &&
          effective_sample_size(w) < static_cast<double>(N) / 100.0) {
        ++res.degeneracy_warnings;
        std::fprintf(stderr, "warning: particle degeneracy at step %lld (ess %.2f of %lld)\n",
                     static_cast<long long>(t), effective_sample_size(w),
                     static_cast<long long>(N));
      }
      weighted_moments(forecast, &w, res.means.data() + t * m, res.stds.data() + t * m);
      Rng rs_rng = step_rng.substream(2);
      particles = gather_rows(forecast, systematic_resample(w, rs_rng));
    }
    if (opt.keep_history) res.history.push_back(particles);
    res.loglik += res.loglik_inc[t];
  }
  res.final_particles = std::move(particles);
  return res;
}

}  // namespace rlda
