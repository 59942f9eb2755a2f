#include "rlda/tape.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "rlda/errors.hpp"

namespace rlda {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EMat>;
using CMatMap = Eigen::Map<const EMat>;

CMatMap cmap(const Tensor& x, int64_t rows, int64_t cols) {
  return CMatMap(x.data(), rows, cols);
}
MatMap map(Tensor& x, int64_t rows, int64_t cols) {
  return MatMap(x.data(), rows, cols);
}

void require_rank(const Tensor& x, int rank, const char* who, const char* operand) {
  if (x.rank() != rank)
    throw DimensionError(std::string(who) + ": " + operand + " must be rank-" +
                         std::to_string(rank) + ", got shape " + x.shape_str());
}

double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

bool wants_grad(const Tape& t, std::initializer_list<NodeId> ids) {
  if (!t.grad_enabled) return false;
  for (NodeId id : ids)
    if (t.requires_grad(id)) return true;
  return false;
}

// Id the next push will get; lets backward closures be built up front.
NodeId next_id(const Tape& t) { return static_cast<NodeId>(t.size()); }

}  // namespace

NodeId Tape::leaf(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad && grad_enabled, nullptr);
}

NodeId Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor& Tape::grad(NodeId id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_live) {
    n.grad = Tensor(n.value.shape());
    n.grad_live = true;
  }
  return n.grad;
}

void Tape::add_grad(NodeId id, const double* g, int64_t n) {
  Tensor& buf = grad(id);
  if (buf.numel() != n)
    throw DimensionError("add_grad: length " + std::to_string(n) +
                         " does not match node shape " + buf.shape_str());
  double* p = buf.data();
  for (int64_t i = 0; i < n; ++i) p[i] += g[i];
}

void Tape::backward(NodeId out) {
  if (!grad_enabled)
    throw ContractError("backward called on a tape recorded with gradients disabled");
  Node& o = nodes_[static_cast<size_t>(out)];
  if (o.value.numel() != 1)
    throw ContractError("backward requires a scalar output, got shape " +
                        o.value.shape_str());
  grad(out).at(0) = 1.0;
  for (int64_t i = out; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad_live && n.back) n.back(*this);
  }
}

void Tape::clear() { nodes_.clear(); }

// ---- basic ops ------------------------------------------------------------

NodeId mm(Tape& t, NodeId a, NodeId b) {
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  require_rank(av, 2, "mm", "lhs");
  require_rank(bv, 2, "mm", "rhs");
  if (av.dim(1) != bv.dim(0))
    throw DimensionError("mm: inner dims differ, lhs " + av.shape_str() +
                         " vs rhs " + bv.shape_str());
  const int64_t p = av.dim(0), q = av.dim(1), r = bv.dim(1);
  Tensor out({p, r});
  map(out, p, r).noalias() = cmap(av, p, q) * cmap(bv, q, r);

  const bool rg = wants_grad(t, {a, b});
  std::function<void(Tape&)> back;
  if (rg) {
    const NodeId out_id = next_id(t);
    back = [a, b, out_id, p, q, r](Tape& tt) {
      CMatMap g = cmap(tt.grad(out_id), p, r);
      if (tt.requires_grad(a)) {
        CMatMap bm = cmap(tt.val(b), q, r);
        map(tt.grad(a), p, q).noalias() += g * bm.transpose();
      }
      if (tt.requires_grad(b)) {
        CMatMap am = cmap(tt.val(a), p, q);
        map(tt.grad(b), q, r).noalias() += am.transpose() * g;
      }
    };
  }
  return t.push(std::move(out), rg, std::move(back));
}

NodeId bias_add(Tape& t, NodeId x, NodeId b) {
  const Tensor& xv = t.val(x);
  const Tensor& bv = t.val(b);
  require_rank(xv, 2, "bias_add", "x");
  require_rank(bv, 1, "bias_add", "bias");
  if (xv.dim(1) != bv.dim(0))
    throw DimensionError("bias_add: x " + xv.shape_str() + " vs bias " + bv.shape_str());
  const int64_t p = xv.dim(0), q = xv.dim(1);
  Tensor out(xv.shape());
  for (int64_t i = 0; i < p; ++i)
    for (int64_t j = 0; j < q; ++j) out.at2(i, j) = xv.at2(i, j) + bv.at(j);

  const bool rg = wants_grad(t, {x, b});
  std::function<void(Tape&)> back;
  if (rg) {
    const NodeId out_id = next_id(t);
    back = [x, b, out_id, p, q](Tape& tt) {
      const Tensor& g = tt.grad(out_id);
      if (tt.requires_grad(x)) tt.add_grad(x, g.data(), g.numel());
      if (tt.requires_grad(b)) {
        Tensor& gb = tt.grad(b);
        for (int64_t i = 0; i < p; ++i)
          for (int64_t j = 0; j < q; ++j) gb.at(j) += g.at2(i, j);
      }
    };
  }
  return t.push(std::move(out), rg, std::move(back));
}

NodeId activation(Tape& t, NodeId x, Act act) {
  if (act == Act::identity) return x;
  const Tensor& xv = t.val(x);
  const int64_t n = xv.numel();
  Tensor out(xv.shape());
  const double* in = xv.data();
  double* o = out.data();
  switch (act) {
    case Act::tanh:
      for (int64_t i = 0; i < n; ++i) o[i] = std::tanh(in[i]);
      break;
    case Act::relu:
      for (int64_t i = 0; i < n; ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    case Act::softplus:
      for (int64_t i = 0; i < n; ++i) o[i] = stable_softplus(in[i]);
      break;
    case Act::identity:
      break;
  }

  const bool rg = wants_grad(t, {x});
  std::function<void(Tape&)> back;
  if (rg) {
    const NodeId out_id = next_id(t);
    back = [x, out_id, act, n](Tape& tt) {
      if (!tt.requires_grad(x)) return;
      const double* g = tt.grad(out_id).data();
      const double* in = tt.val(x).data();
      const double* y = tt.val(out_id).data();
      Tensor& gx = tt.grad(x);
      double* gp = gx.data();
      switch (act) {
        case Act::tanh:
          for (int64_t i = 0; i < n; ++i) gp[i] += g[i] * (1.0 - y[i] * y[i]);
          break;
        case Act::relu:
          for (int64_t i = 0; i < n; ++i) gp[i] += in[i] > 0.0 ? g[i] : 0.0;
          break;
        case Act::softplus:
          for (int64_t i = 0; i < n; ++i) gp[i] += g[i] * sigmoid(in[i]);
          break;
        case Act::identity:
          break;
      }
    };
  }
  return t.push(std::move(out), rg, std::move(back));
}

NodeId dense(Tape& t, NodeId x, NodeId w, NodeId b, Act act) {
  return activation(t, bias_add(t, mm(t, x, w), b), act);
}

namespace {

// Shared skeleton for same-shape elementwise binaries.
template <typename Fwd, typename Bwd>
NodeId ew_binary(Tape& t, NodeId a, NodeId b, const char* name, Fwd fwd, Bwd bwd) {
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  check_same_shape(av, bv, name);
  const int64_t n = av.numel();
  Tensor out(av.shape());
  fwd(av.data(), bv.data(), out.data(), n);

  const bool rg = wants_grad(t, {a, b});
  std::function<void(Tape&)> back;
  if (rg) {
    const NodeId out_id = next_id(t);
    back = [a, b, out_id, n, bwd](Tape& tt) {
      bwd(tt, a, b, out_id, n);
    };
  }
  return t.push(std::move(out), rg, std::move(back));
}

}  // namespace

NodeId add(Tape& t, NodeId a, NodeId b) {
  return ew_binary(
      t, a, b, "add",
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
      },
      [](Tape& tt, NodeId a, NodeId b, NodeId out_id, int64_t n) {
        const double* g = tt.grad(out_id).data();
        if (tt.requires_grad(a)) tt.add_grad(a, g, n);
        if (tt.requires_grad(b)) tt.add_grad(b, g, n);
      });
}

NodeId sub(Tape& t, NodeId a, NodeId b) {
  return ew_binary(
      t, a, b, "sub",
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] - y[i];
      },
      [](Tape& tt, NodeId a, NodeId b, NodeId out_id, int64_t n) {
        const double* g = tt.grad(out_id).data();
        if (tt.requires_grad(a)) tt.add_grad(a, g, n);
        if (tt.requires_grad(b)) {
          double* gb = tt.grad(b).data();
          for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
      });
}

NodeId mul(Tape& t, NodeId a, NodeId b) {
  return ew_binary(
      t, a, b, "mul",
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] * y[i];
      },
      [](Tape& tt, NodeId a, NodeId b, NodeId out_id, int64_t n) {
        const double* g = tt.grad(out_id).data();
        if (tt.requires_grad(a)) {
          const double* y = tt.val(b).data();
          double* ga = tt.grad(a).data();
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
        }
        if (tt.requires_grad(b)) {
          const double* x = tt.val(a).data();
          double* gb = tt.grad(b).data();
          for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * x[i];
        }
      });
}

NodeId min2(Tape& t, NodeId a, NodeId b) {
  return ew_binary(
      t, a, b, "min2",
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] <= y[i] ? x[i] : y[i];
      },
      [](Tape& tt, NodeId a, NodeId b, NodeId out_id, int64_t n) {
        const double* g = tt.grad(out_id).data();
        const double* x = tt.val(a).data();
        const double* y = tt.val(b).data();
        double* ga = tt.requires_grad(a) ? tt.grad(a).data() : nullptr;
        double* gb = tt.requires_grad(b) ? tt.grad(b).data() : nullptr;
        for (int64_t i = 0; i < n; ++i) {
          if (x[i] <= y[i]) {
            if (ga) ga[i] += g[i];
          } else if (gb) {
            gb[i] += g[i];
          }
        }
      });
}

namespace {

template <typename Fwd, typename Bwd>
NodeId ew_unary(Tape& t, NodeId x, Fwd fwd, Bwd bwd) {
  const Tensor& xv = t.val(x);
  const int64_t n = xv.numel();
  Tensor out(xv.shape());
  fwd(xv.data(), out.data(), n);

  const bool rg = wants_grad(t, {x});
  std::function<void(Tape&)> back;
  if (rg) {
    const NodeId out_id = next_id(t);
    back = [x, out_id, n, bwd](Tape& tt) {
      if (!tt.requires_grad(x)) return;
      bwd(tt.grad(out_id).data(), tt.val(x).data(), tt.val(out_id).data(),
          tt.grad(x).data(), n);
    };
  }
  return t.push(std::move(out), rg, std::move(back));
}

}  // namespace

NodeId neg(Tape& t, NodeId x) {
  return ew_unary(
      t, x,
      [](const double* in, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = -in[i];
      },
      [](const double* g, const double*, const double*, double* gx, int64_t n) {
        for (int64_t i = 0; i < n; ++i) gx[i] -= g[i];
      });
}

NodeId scalar_mul(Tape& t, NodeId x, double c) {
  return ew_unary(
      t, x,
      [c](const double* in, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = c * in[i];
      },
      [c](const double* g, const double*, const double*, double* gx, int64_t n) {
        for (int64_t i = 0; i < n; ++i) gx[i] += c * g[i];
      });
}

NodeId exp_op(Tape& t, NodeId x) {
  return ew_unary(
      t, x,
      [](const double* in, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = std::exp(in[i]);
      },
      [](const double* g, const double*, const double* y, double* gx, int64_t n) {
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * y[i];
      });
}

NodeId square(Tape& t, NodeId x) {
  return ew_unary(
      t, x,
      [](const double* in, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = in[i] * in[i];
      },
      [](const double* g, const double* in, const double*, double* gx, int64_t n) {
        for (int64_t i = 0; i < n; ++i) gx[i] += 2.0 * in[i] * g[i];
      });
}

NodeId clamp(Tape& t, NodeId x, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo must be <= hi");
  return ew_unary(
      t, x,
      [lo, hi](const double* in, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = std::min(std::max(in[i], lo), hi);
      },
      [lo, hi](const double* g, const double* in, const double*, double* gx, int64_t n) {
        for (int64_t i = 0; i < n; ++i)
          if (in[i] >= lo && in[i] <= hi) gx[i] += g[i];
      });
}

NodeId clamp_min(Tape& t, NodeId x, double lo) {
  return ew_unary(
      t, x,
      [lo](const double* in, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = std::max(in[i], lo);
      },
      [lo](const double* g, const double* in, const double*, double* gx, int64_t n) {
        for (int64_t i = 0; i < n; ++i)
          if (in[i] >= lo) gx[i] += g[i];
      });
}

NodeId sum_all(Tape& t, NodeId x) {
  const Tensor& xv = t.val(x);
  const int64_t n = xv.numel();
  double s = 0.0;
  const double* in = xv.data();
  for (int64_t i = 0; i < n; ++i) s += in[i];
  Tensor out({1}, s);

  const bool rg = wants_grad(t, {x});
  std::function<void(Tape&)> back;
  if (rg) {
    const NodeId out_id = next_id(t);
    back = [x, out_id, n](Tape& tt) {
      if (!tt.requires_grad(x)) return;
      const double g = tt.grad(out_id).at(0);
      double* gx = tt.grad(x).data();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    };
  }
  return t.push(std::move(out), rg, std::move(back));
}

NodeId mean_all(Tape& t, NodeId x) {
  const int64_t n = t.val(x).numel();
  if (n == 0) throw DimensionError("mean_all: empty tensor");
  return scalar_mul(t, sum_all(t, x), 1.0 / static_cast<double>(n));
}

NodeId group_sum_rows(Tape& t, NodeId x, int64_t group) {
  const Tensor& xv = t.val(x);
  if (group <= 0) throw DimensionError("group_sum_rows: group must be positive");
  const bool vec = xv.rank() == 1;
  if (!vec) require_rank(xv, 2, "group_sum_rows", "x");
  const int64_t rows = xv.dim(0);
  const int64_t cols = vec ? 1 : xv.dim(1);
  if (rows % group != 0)
    throw DimensionError("group_sum_rows: rows " + std::to_string(rows) +
                         " not divisible by group " + std::to_string(group));
  const int64_t g_count = rows / group;
  Tensor out(vec ? std::vector<int64_t>{g_count}
                 : std::vector<int64_t>{g_count, cols});
  const double* in = xv.data();
  double* o = out.data();
  for (int64_t g = 0; g < g_count; ++g)
    for (int64_t r = 0; r < group; ++r) {
      const double* src = in + (g * group + r) * cols;
      double* dst = o + g * cols;
      for (int64_t c = 0; c < cols; ++c) dst[c] += src[c];
    }

  const bool rg = wants_grad(t, {x});
  std::function<void(Tape&)> back;
  if (rg) {
    const NodeId out_id = next_id(t);
    back = [x, out_id, g_count, group, cols](Tape& tt) {
      if (!tt.requires_grad(x)) return;
      const double* g = tt.grad(out_id).data();
      double* gx = tt.grad(x).data();
      for (int64_t gi = 0; gi < g_count; ++gi)
        for (int64_t r = 0; r < group; ++r) {
          double* dst = gx + (gi * group + r) * cols;
          const double* src = g + gi * cols;
          for (int64_t c = 0; c < cols; ++c) dst[c] += src[c];
        }
    };
  }
  return t.push(std::move(out), rg, std::move(back));
}

NodeId concat_cols(Tape& t, NodeId a, NodeId b) {
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  require_rank(av, 2, "concat_cols", "lhs");
  require_rank(bv, 2, "concat_cols", "rhs");
  if (av.dim(0) != bv.dim(0))
    throw DimensionError("concat_cols: row counts differ, lhs " + av.shape_str() +
                         " vs rhs " + bv.shape_str());
  const int64_t rows = av.dim(0), p = av.dim(1), q = bv.dim(1);
  Tensor out({rows, p + q});
  for (int64_t i = 0; i < rows; ++i) {
    double* dst = out.data() + i * (p + q);
    std::copy_n(av.data() + i * p, p, dst);
    std::copy_n(bv.data() + i * q, q, dst + p);
  }

  const bool rg = wants_grad(t, {a, b});
  std::function<void(Tape&)> back;
  if (rg) {
    const NodeId out_id = next_id(t);
    back = [a, b, out_id, rows, p, q](Tape& tt) {
      const double* g = tt.grad(out_id).data();
      if (tt.requires_grad(a)) {
        double* ga = tt.grad(a).data();
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t j = 0; j < p; ++j) ga[i * p + j] += g[i * (p + q) + j];
      }
      if (tt.requires_grad(b)) {
        double* gb = tt.grad(b).data();
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t j = 0; j < q; ++j) gb[i * q + j] += g[i * (p + q) + p + j];
      }
    };
  }
  return t.push(std::move(out), rg, std::move(back));
}

NodeId reshape(Tape& t, NodeId x, std::vector<int64_t> shape) {
  Tensor out = t.val(x);
  out.reshape(std::move(shape));  // validates element count

  const bool rg = wants_grad(t, {x});
  std::function<void(Tape&)> back;
  if (rg) {
    const NodeId out_id = next_id(t);
    back = [x, out_id](Tape& tt) {
      if (!tt.requires_grad(x)) return;
      const Tensor& g = tt.grad(out_id);
      tt.add_grad(x, g.data(), g.numel());
    };
  }
  return t.push(std::move(out), rg, std::move(back));
}

// ---- Gaussian log density --------------------------------------------------

NodeId gaussian_logpdf_rows(Tape& t, NodeId x, NodeId mean, NodeId var) {
  const Tensor& xv = t.val(x);
  const Tensor& mv = t.val(mean);
  const Tensor& vv = t.val(var);
  require_rank(xv, 2, "gaussian_logpdf_rows", "x");
  check_same_shape(xv, mv, "gaussian_logpdf_rows(x, mean)");
  require_rank(vv, 1, "gaussian_logpdf_rows", "var");
  if (vv.dim(0) != xv.dim(1))
    throw DimensionError("gaussian_logpdf_rows: var " + vv.shape_str() +
                         " does not match x " + xv.shape_str());
  const int64_t rows = xv.dim(0), d = xv.dim(1);
  for (int64_t j = 0; j < d; ++j)
    if (!(vv.at(j) > 0.0))
      throw DomainError("gaussian_logpdf_rows: variance[" + std::to_string(j) +
                        "] = " + std::to_string(vv.at(j)) + " is not positive");

  double log_norm = -0.5 * static_cast<double>(d) * kLog2Pi;
  for (int64_t j = 0; j < d; ++j) log_norm -= 0.5 * std::log(vv.at(j));

  Tensor out({rows});
  for (int64_t i = 0; i < rows; ++i) {
    double q = 0.0;
    const double* xr = xv.data() + i * d;
    const double* mr = mv.data() + i * d;
    for (int64_t j = 0; j < d; ++j) {
      const double diff = xr[j] - mr[j];
      q += diff * diff / vv.at(j);
    }
    out.at(i) = log_norm - 0.5 * q;
  }

  const bool rg = wants_grad(t, {x, mean, var});
  std::function<void(Tape&)> back;
  if (rg) {
    const NodeId out_id = next_id(t);
    back = [x, mean, var, out_id, rows, d](Tape& tt) {
      const double* g = tt.grad(out_id).data();
      const Tensor& xv = tt.val(x);
      const Tensor& mv = tt.val(mean);
      const Tensor& vv = tt.val(var);
      double* gx = tt.requires_grad(x) ? tt.grad(x).data() : nullptr;
      double* gm = tt.requires_grad(mean) ? tt.grad(mean).data() : nullptr;
      double* gv = tt.requires_grad(var) ? tt.grad(var).data() : nullptr;
      for (int64_t i = 0; i < rows; ++i) {
        const double gi = g[i];
        if (gi == 0.0) continue;
        const double* xr = xv.data() + i * d;
        const double* mr = mv.data() + i * d;
        for (int64_t j = 0; j < d; ++j) {
          const double inv = 1.0 / vv.at(j);
          const double diff = xr[j] - mr[j];
          const double dq = diff * inv;  // d(-logpdf)/dx without the sign
          if (gx) gx[i * d + j] -= gi * dq;
          if (gm) gm[i * d + j] += gi * dq;
          if (gv) gv[j] += gi * 0.5 * (diff * dq * inv - inv);
        }
      }
    };
  }
  return t.push(std::move(out), rg, std::move(back));
}

NodeId gaussian_logpdf(Tape& t, NodeId x, NodeId mean, NodeId var) {
  const int64_t d = t.val(x).numel();
  NodeId xr = reshape(t, x, {1, d});
  NodeId mr = reshape(t, mean, {1, d});
  NodeId rows = gaussian_logpdf_rows(t, xr, mr, var);
  return reshape(t, rows, {1});
}

// ---- convolution ------------------------------------------------------------

namespace {

struct ConvDims {
  int64_t B, Cin, L, Cout, k, off;
};

ConvDims conv_check(const Tensor& xv, const Tensor& wv, const Tensor& bv) {
  require_rank(xv, 3, "conv1d_periodic", "x");
  require_rank(wv, 3, "conv1d_periodic", "w");
  require_rank(bv, 1, "conv1d_periodic", "bias");
  ConvDims d{xv.dim(0), xv.dim(1), xv.dim(2), wv.dim(0), wv.dim(2), 0};
  if (wv.dim(1) != d.Cin)
    throw DimensionError("conv1d_periodic: w " + wv.shape_str() +
                         " expects Cin=" + std::to_string(wv.dim(1)) + ", x has " +
                         std::to_string(d.Cin));
  if (d.k % 2 == 0)
    throw DimensionError("conv1d_periodic: kernel size must be odd, got " +
                         std::to_string(d.k));
  if (bv.dim(0) != d.Cout)
    throw DimensionError("conv1d_periodic: bias " + bv.shape_str() +
                         " does not match Cout=" + std::to_string(d.Cout));
  if (d.L <= 0) throw DimensionError("conv1d_periodic: empty spatial extent");
  d.off = (d.k - 1) / 2;
  return d;
}

inline int64_t wrap(int64_t i, int64_t L) {
  i %= L;
  return i < 0 ? i + L : i;
}

// Gathers the circular im2col block for samples [b0, b1): each output row is
// the receptive field of one (sample, position) pair, laid out cin-major.
void im2col(const Tensor& xv, const ConvDims& d, int64_t b0, int64_t b1, Tensor& col) {
  const int64_t ck = d.Cin * d.k;
  double* out = col.data();
  for (int64_t b = b0; b < b1; ++b) {
    const double* xb = xv.data() + b * d.Cin * d.L;
    for (int64_t l = 0; l < d.L; ++l) {
      double* row = out + ((b - b0) * d.L + l) * ck;
      for (int64_t c = 0; c < d.Cin; ++c) {
        const double* xc = xb + c * d.L;
        for (int64_t dk = 0; dk < d.k; ++dk)
          row[c * d.k + dk] = xc[wrap(l + dk - d.off, d.L)];
      }
    }
  }
}

// Weight tensor [Cout,Cin,k] packed as a GEMM operand [Cin*k, Cout].
Tensor pack_weights(const Tensor& wv, const ConvDims& d) {
  Tensor wmat({d.Cin * d.k, d.Cout});
  for (int64_t co = 0; co < d.Cout; ++co)
    for (int64_t ci = 0; ci < d.Cin; ++ci)
      for (int64_t dk = 0; dk < d.k; ++dk)
        wmat.at2(ci * d.k + dk, co) = wv.data()[(co * d.Cin + ci) * d.k + dk];
  return wmat;
}

int64_t conv_chunk_samples(const ConvDims& d) {
  // Cap the im2col buffer at ~16k positions to keep it cache-friendly.
  const int64_t cap = std::max<int64_t>(1, 16384 / std::max<int64_t>(d.L, 1));
  return std::min(cap, d.B);
}

}  // namespace

NodeId conv1d_periodic(Tape& t, NodeId x, NodeId w, NodeId bias) {
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(w);
  const Tensor& bv = t.val(bias);
  const ConvDims d = conv_check(xv, wv, bv);

  const Tensor wmat = pack_weights(wv, d);
  Tensor out({d.B, d.Cout, d.L});
  const int64_t cb = conv_chunk_samples(d);
  Tensor col({cb * d.L, d.Cin * d.k});
  Tensor prod({cb * d.L, d.Cout});
  for (int64_t b0 = 0; b0 < d.B; b0 += cb) {
    const int64_t b1 = std::min(d.B, b0 + cb);
    const int64_t rows = (b1 - b0) * d.L;
    im2col(xv, d, b0, b1, col);
    map(prod, rows, d.Cout).noalias() =
        cmap(col, rows, d.Cin * d.k) * cmap(wmat, d.Cin * d.k, d.Cout);
    // prod rows are (sample, position); transpose into [B, Cout, L] layout.
    for (int64_t b = b0; b < b1; ++b)
      for (int64_t l = 0; l < d.L; ++l) {
        const double* src = prod.data() + ((b - b0) * d.L + l) * d.Cout;
        for (int64_t co = 0; co < d.Cout; ++co)
          out.data()[(b * d.Cout + co) * d.L + l] = src[co] + bv.at(co);
      }
  }

  const bool rg = wants_grad(t, {x, w, bias});
  std::function<void(Tape&)> back;
  if (rg) {
    const NodeId out_id = next_id(t);
    back = [x, w, bias, out_id, d](Tape& tt) {
      const Tensor& g = tt.grad(out_id);
      const Tensor& xv = tt.val(x);
      const Tensor& wv = tt.val(w);
      const bool need_x = tt.requires_grad(x);
      const bool need_w = tt.requires_grad(w);
      const bool need_b = tt.requires_grad(bias);

      if (need_b) {
        double* gb = tt.grad(bias).data();
        for (int64_t b = 0; b < d.B; ++b)
          for (int64_t co = 0; co < d.Cout; ++co) {
            const double* gr = g.data() + (b * d.Cout + co) * d.L;
            double s = 0.0;
            for (int64_t l = 0; l < d.L; ++l) s += gr[l];
            gb[co] += s;
          }
      }
      if (!need_x && !need_w) return;

      const Tensor wmat = pack_weights(wv, d);
      const int64_t ck = d.Cin * d.k;
      const int64_t cb = conv_chunk_samples(d);
      Tensor col({cb * d.L, ck});
      Tensor gout({cb * d.L, d.Cout});
      Tensor gcol({cb * d.L, ck});
      Tensor gwmat({ck, d.Cout});
      for (int64_t b0 = 0; b0 < d.B; b0 += cb) {
        const int64_t b1 = std::min(d.B, b0 + cb);
        const int64_t rows = (b1 - b0) * d.L;
        // gather dOut into (sample, position)-major rows
        for (int64_t b = b0; b < b1; ++b)
          for (int64_t co = 0; co < d.Cout; ++co) {
            const double* src = g.data() + (b * d.Cout + co) * d.L;
            for (int64_t l = 0; l < d.L; ++l)
              gout.at2((b - b0) * d.L + l, co) = src[l];
          }
        if (need_w) {
          im2col(xv, d, b0, b1, col);
          map(gwmat, ck, d.Cout).noalias() +=
              cmap(col, rows, ck).transpose() * cmap(gout, rows, d.Cout);
        }
        if (need_x) {
          map(gcol, rows, ck).noalias() =
              cmap(gout, rows, d.Cout) * cmap(wmat, ck, d.Cout).transpose();
          double* gx = tt.grad(x).data();
          for (int64_t b = b0; b < b1; ++b)
            for (int64_t l = 0; l < d.L; ++l) {
              const double* row = gcol.data() + ((b - b0) * d.L + l) * ck;
              for (int64_t c = 0; c < d.Cin; ++c) {
                double* xc = gx + (b * d.Cin + c) * d.L;
                for (int64_t dk = 0; dk < d.k; ++dk)
                  xc[wrap(l + dk - d.off, d.L)] += row[c * d.k + dk];
              }
            }
        }
      }
      if (need_w) {
        double* gw = tt.grad(w).data();
        for (int64_t co = 0; co < d.Cout; ++co)
          for (int64_t ci = 0; ci < d.Cin; ++ci)
            for (int64_t dk = 0; dk < d.k; ++dk)
              gw[(co * d.Cin + ci) * d.k + dk] += gwmat.at2(ci * d.k + dk, co);
      }
    };
  }
  return t.push(std::move(out), rg, std::move(back));
}

NodeId bilinear_split(Tape& t, NodeId x) {
  const Tensor& xv = t.val(x);
  require_rank(xv, 3, "bilinear_split", "x");
  if (xv.dim(1) != 48)
    throw DimensionError("bilinear_split: expects 48 channels, got " + xv.shape_str());
  const int64_t B = xv.dim(0), L = xv.dim(2);
  Tensor out({B, 32, L});
  for (int64_t b = 0; b < B; ++b) {
    const double* xb = xv.data() + b * 48 * L;
    double* ob = out.data() + b * 32 * L;
    for (int64_t c = 0; c < 16; ++c)
      for (int64_t l = 0; l < L; ++l) {
        ob[c * L + l] = xb[c * L + l];
        ob[(16 + c) * L + l] = xb[(16 + c) * L + l] * xb[(32 + c) * L + l];
      }
  }

  const bool rg = wants_grad(t, {x});
  std::function<void(Tape&)> back;
  if (rg) {
    const NodeId out_id = next_id(t);
    back = [x, out_id, B, L](Tape& tt) {
      if (!tt.requires_grad(x)) return;
      const double* g = tt.grad(out_id).data();
      const double* xd = tt.val(x).data();
      double* gx = tt.grad(x).data();
      for (int64_t b = 0; b < B; ++b) {
        const double* gb = g + b * 32 * L;
        const double* xb = xd + b * 48 * L;
        double* gxb = gx + b * 48 * L;
        for (int64_t c = 0; c < 16; ++c)
          for (int64_t l = 0; l < L; ++l) {
            gxb[c * L + l] += gb[c * L + l];
            gxb[(16 + c) * L + l] += gb[(16 + c) * L + l] * xb[(32 + c) * L + l];
            gxb[(32 + c) * L + l] += gb[(16 + c) * L + l] * xb[(16 + c) * L + l];
          }
      }
    };
  }
  return t.push(std::move(out), rg, std::move(back));
}

}  // namespace rlda
