#pragma once

#include <functional>
#include <vector>

#include "rlda/tensor.hpp"

namespace rlda {

enum class Act { identity, tanh, relu, softplus };

using NodeId = int32_t;

// Define-by-run reverse-mode tape. Each forward op appends a node holding its
// value and, when gradients are enabled and some input needs them, a backward
// closure. backward(out) seeds d(out)=1 and sweeps the nodes in reverse
// creation order, which is a reverse topological order by construction.
//
// The tape is rebuilt per forward pass; clear() drops all nodes.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;                       // allocated on first accumulation
    std::function<void(Tape&)> back;   // empty for leaves/constants
    bool requires_grad = false;
    bool grad_live = false;            // grad buffer exists (possibly nonzero)
  };

  // When false, ops record values only; backward() on such a tape is an error.
  bool grad_enabled = true;

  NodeId leaf(Tensor value, bool requires_grad = false);
  NodeId constant(Tensor value) { return leaf(std::move(value), false); }
  NodeId push(Tensor value, bool requires_grad, std::function<void(Tape&)> back);

  const Tensor& val(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
  Tensor& val(NodeId id) { return nodes_[static_cast<size_t>(id)].value; }
  bool requires_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  // Gradient buffer, zero-allocated on first touch.
  Tensor& grad(NodeId id);
  bool grad_live(NodeId id) const { return nodes_[static_cast<size_t>(id)].grad_live; }

  // Accumulate g (length n, matching the node's numel) into the node's grad.
  void add_grad(NodeId id, const double* g, int64_t n);

  // Reverse sweep from a scalar output (numel == 1).
  void backward(NodeId out);

  size_t size() const { return nodes_.size(); }
  void clear();
  void reserve(size_t n) { nodes_.reserve(n); }

 private:
  std::vector<Node> nodes_;
};

// ---- ops ----------------------------------------------------------------
// All ops validate shapes up front and throw DimensionError naming operands.

// Matrix product [p,q] x [q,r] -> [p,r].
NodeId mm(Tape& t, NodeId a, NodeId b);
// Adds a length-q bias vector to each row of [p,q].
NodeId bias_add(Tape& t, NodeId x, NodeId b);
NodeId activation(Tape& t, NodeId x, Act act);
// activation(x @ w + b): the standard dense layer, w is [d_in, d_out].
NodeId dense(Tape& t, NodeId x, NodeId w, NodeId b, Act act);

NodeId add(Tape& t, NodeId a, NodeId b);
NodeId sub(Tape& t, NodeId a, NodeId b);
NodeId mul(Tape& t, NodeId a, NodeId b);  // elementwise
NodeId neg(Tape& t, NodeId x);
NodeId scalar_mul(Tape& t, NodeId x, double c);
NodeId exp_op(Tape& t, NodeId x);
NodeId square(Tape& t, NodeId x);
// Elementwise min; ties route the gradient to `a`.
NodeId min2(Tape& t, NodeId a, NodeId b);
// Clamp into [lo, hi]; gradient is 1 inside the closed interval, 0 outside.
NodeId clamp(Tape& t, NodeId x, double lo, double hi);
NodeId clamp_min(Tape& t, NodeId x, double lo);

NodeId sum_all(Tape& t, NodeId x);   // -> shape [1]
NodeId mean_all(Tape& t, NodeId x);  // -> shape [1]

// Sums each block of `group` consecutive rows: [G*group, C] -> [G, C].
// A rank-1 input of length G*group is treated as [G*group, 1] -> [G].
NodeId group_sum_rows(Tape& t, NodeId x, int64_t group);

// Concatenate along columns: [r,p] + [r,q] -> [r,p+q].
NodeId concat_cols(Tape& t, NodeId a, NodeId b);
NodeId reshape(Tape& t, NodeId x, std::vector<int64_t> shape);

// Row-wise diagonal-Gaussian log density: x,mean [R,d], var [d] -> [R].
// var must be strictly positive.
NodeId gaussian_logpdf_rows(Tape& t, NodeId x, NodeId mean, NodeId var);
// Scalar convenience wrapper for single vectors: x,mean,var [d] -> [1].
NodeId gaussian_logpdf(Tape& t, NodeId x, NodeId mean, NodeId var);

// 1-D convolution with circular padding, odd kernel, stride 1.
// x [B,Cin,L], w [Cout,Cin,k], bias [Cout] -> [B,Cout,L].
NodeId conv1d_periodic(Tape& t, NodeId x, NodeId w, NodeId bias);

// Splits 48 channels into (a,b,c) of 16 each; output is concat(a, b*c) [B,32,L].
NodeId bilinear_split(Tape& t, NodeId x);

}  // namespace rlda
