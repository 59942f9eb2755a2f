#pragma once

// Shared test oracles. Everything here is deliberately independent of the
// library's execution paths: plain loops, central differences, brute-force
// sums. Keep it that way so tests cannot inherit implementation bugs.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rlda/tensor.hpp"

namespace testsup {

// Relative error with a floor so near-zero pairs compare absolutely.
inline double rel_err(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  if (scale < 1e-7) return std::abs(a - b);  // absolute in the tiny regime
  return std::abs(a - b) / scale;
}

// Central-difference gradient of a scalar function of several tensors.
// f is re-evaluated from scratch per probe, so it must be deterministic.
struct FdReport {
  double max_rel_err = 0.0;
  std::string where;
};

inline FdReport fd_check(
    const std::function<double(const std::vector<rlda::Tensor>&)>& f,
    std::vector<rlda::Tensor> inputs,
    const std::vector<rlda::Tensor>& analytic_grads, double h = 1e-5) {
  // Elements far below the overall gradient scale sit at the FD noise floor,
  // so the denominator is floored by a fraction of that scale. A wrong term
  // of magnitude comparable to its element still fails loudly.
  double gmax = 0.0;
  for (const auto& g : analytic_grads)
    for (int64_t i = 0; i < g.numel(); ++i)
      gmax = std::max(gmax, std::abs(g.at(i)));
  const double floor = std::max(1e-3 * gmax, 1e-10);

  FdReport rep;
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (int64_t i = 0; i < inputs[k].numel(); ++i) {
      const double orig = inputs[k].at(i);
      inputs[k].at(i) = orig + h;
      const double fp = f(inputs);
      inputs[k].at(i) = orig - h;
      const double fm = f(inputs);
      inputs[k].at(i) = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double ad = analytic_grads[k].at(i);
      const double err =
          std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), floor});
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.where = "input " + std::to_string(k) + " elem " + std::to_string(i) +
                    " fd=" + std::to_string(fd) + " ad=" + std::to_string(ad);
      }
    }
  }
  return rep;
}

// Scalar diagonal-Gaussian log density, written long-hand as an oracle.
inline double gauss_logpdf_ref(const std::vector<double>& x,
                               const std::vector<double>& mean,
                               const std::vector<double>& var) {
  const double log2pi = std::log(2.0 * std::acos(-1.0));
  double acc = 0.0;
  for (size_t j = 0; j < x.size(); ++j) {
    const double d = x[j] - mean[j];
    acc += -0.5 * (log2pi + std::log(var[j]) + d * d / var[j]);
  }
  return acc;
}

}  // namespace testsup
