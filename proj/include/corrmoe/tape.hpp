#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "corrmoe/tensor.hpp"

namespace corrmoe::nn {

/// Learnable tensor with gradient and Adam state.
struct Param {
  Tensor value;
  Tensor grad;
  Tensor adam_m, adam_v;
};

enum class Init { kZeros, kOnes, kHe };

/// Named parameter registry. Initialization depends only on (seed, name)
/// so declaration order never changes a run.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  /// Creates the parameter on first use, returns the existing one after
  /// (shape must then match).
  Param& get_or_create(const std::string& name, const Shape& shape, Init init);
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;

  void zero_grads();
  /// One Adam update over every parameter; increments the step counter.
  void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8);

  std::vector<std::string> names() const;
  long total_elems() const;
  std::uint64_t seed() const { return seed_; }
  int steps_taken() const { return steps_; }
  void set_steps_taken(int s) { steps_ = s; }

  std::map<std::string, Param>& entries() { return params_; }
  const std::map<std::string, Param>& entries() const { return params_; }

 private:
  std::uint64_t seed_;
  int steps_ = 0;
  std::map<std::string, Param> params_;
};

/// Handle to a tape node.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class Reduce { kSum, kMean, kMax };

/// Eager reverse-mode autodiff tape over rank-4 tensors. Ops compute
/// their value immediately (so control flow may branch on values) and
/// push a backward closure; backward() replays them in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Constant leaf (no gradient).
  Var input(Tensor v);
  /// Learnable leaf; backward accumulates into the store's grad.
  Var param(ParamStore& store, const std::string& name, const Shape& shape,
            Init init);

  const Tensor& val(Var v) const;
  const Tensor& grad(Var v) const;
  /// Seeds d(loss)/d(loss) = 1 and runs every closure in reverse order.
  void backward(Var loss);

  /// Total bytes of node values allocated so far (memory instrumentation).
  std::size_t value_bytes() const { return value_bytes_; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }

  // elementwise, with per-axis broadcasting (size equal or 1)
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var scale(Var a, double s);
  Var add_const(Var a, double s);
  Var relu(Var a);
  Var sigmoid(Var a);
  Var tanh_op(Var a);
  Var sqrt_op(Var a);
  Var exp_op(Var a);
  Var log_op(Var a);

  // shape and data movement
  Var expand(Var a, const Shape& target);       // broadcast copy
  Var concat_channels(Var a, Var b);
  /// Concatenates along the item axis; all parts share (b, c, k).
  Var concat_items(const std::vector<Var>& parts);
  Var slice_channels(Var a, int start, int count);
  Var slice_batch(Var a, int b);
  Var permute_batch(Var a, const std::vector<int>& perm);
  /// idx[b] lists the retained item indices; output items = idx[b].size()
  /// (equal across b).
  Var gather_items(Var a, const std::vector<std::vector<int>>& idx);
  /// idx[b] is row-major (n, j) of size N*k; output (B, C, N, k).
  Var gather_neighbors(Var a, const std::vector<std::vector<int>>& idx, int k);
  /// Per-item channel pick: idx[b] has N entries; out[b,0,n,0] =
  /// a[b, idx[b][n], n, 0]. Requires k == 1.
  Var select_channels(Var a, const std::vector<std::vector<int>>& idx);

  // reductions (keepdim)
  Var reduce_items(Var a, bool over_n, bool over_k, Reduce mode);
  Var reduce_channels_sum(Var a);

  // normalizations and softmax
  Var context_norm(Var a, double eps = 1e-5);        // per (b,c) over (n,k)
  Var layer_norm_channels(Var a, double eps = 1e-5);  // per (b,n,k) over c
  Var softmax_channels(Var a);                        // per (b,n,k) over c
  Var softmax_items(Var a);                           // per (b,c,k) over n

  // contractions
  /// w: (1, Cout, Cin, 1); bias: (1, Cout, 1, 1) or invalid for none.
  Var conv1x1(Var x, Var w, Var bias);
  /// (B,C,N,1) x (B,M,N,1) -> (B,C,M,1), contracting items.
  Var bmm_nt(Var x, Var y);
  /// (B,C,M,1) x (B,M,N,1) -> (B,C,N,1), contracting the middle axis.
  Var bmm_nn(Var g, Var y);
  /// Grouped convolution along the neighbor axis: x (B,Cin,N,K) with
  /// K % g == 0, w (1,Cout,Cin,g), bias (1,Cout,1,1) -> (B,Cout,N,K/g).
  Var neighbor_group_conv(Var x, Var w, Var bias, int group);

  // task nodes
  /// Differentiable weighted eight-point: w (1,1,N,1) non-negative with
  /// at least 8 positives, coords N x 4 -> essential matrix as (1,3,3,1).
  Var eight_point(Var w, const Eigen::Matrix<double, Eigen::Dynamic, 4>& coords);
  /// Mean symmetric epipolar quotient of e (1,3,3,1) over fixed pairs.
  Var epipolar_quotient_mean(
      Var e, const Eigen::Matrix<double, Eigen::Dynamic, 4>& pairs);
  /// Mean binary cross entropy with logits clamped to [-cap, cap].
  Var bce_with_logits(Var z, const Tensor& labels, double cap = 15.0);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Tape&)> backprop;  // empty for leaves/constants
    bool needs_grad = false;
  };

  Var push(Tensor value, bool needs_grad, std::function<void(Tape&)> fn);
  Var unary_impl(Var a, int op);
  Tensor& grad_ref(int id);
  Node& node(Var v);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  std::size_t value_bytes_ = 0;
};

}  // namespace corrmoe::nn
