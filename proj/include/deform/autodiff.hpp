#pragma once

// Reverse-mode automatic differentiation over dense float64 arrays.
//
// A Tape records every operation applied to Vars in evaluation order. Each
// record keeps the forward value and a closure that pushes the output gradient
// back to its inputs; backward() replays the closures once each, newest first.
// A Tape belongs to one thread. Parameters live outside the tape and receive
// accumulated gradients when backward() finishes, so several tapes (one per
// sample) can contribute to one optimizer step.

#include "deform/common.hpp"

#include <Eigen/Sparse>

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace deform::ad {

using Shape = std::vector<Index>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using SparseMatrix = Eigen::SparseMatrix<double>;

Index shape_size(const Shape& shape);

class Tensor {
 public:
  /// 64-byte aligned so vectorized reductions see the same element grouping for
  /// every allocation; sums are then reproducible bit for bit.
  using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(axis < 0 ? axis + ndim() : axis); }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  Buffer& storage() { return data_; }
  const Buffer& storage() const { return data_; }
  std::vector<double> to_vector() const { return {data_.begin(), data_.end()}; }
  double& operator[](Index i) { return data_[i]; }
  double operator[](Index i) const { return data_[i]; }

  Eigen::Map<Eigen::ArrayXd> array() { return {data_.data(), size()}; }
  Eigen::Map<const Eigen::ArrayXd> array() const { return {data_.data(), size()}; }
  /// Row-major matrix view of a 2-D tensor.
  Eigen::Map<RowMatrix> matrix();
  Eigen::Map<const RowMatrix> matrix() const;

  Tensor reshaped(Shape shape) const;
  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  static Tensor from_frame(const Frame& f);
  Frame to_frame() const;

 private:
  Shape shape_;
  Buffer data_;
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool decay = true;  // receives decoupled weight decay

  void zero_grad();
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, Index id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  Index id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  Index id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, Index self)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf whose gradient is kept on the tape (see grad()).
  Var variable(Tensor value);
  /// Leaf bound to an external parameter; backward() adds into parameter.grad.
  Var parameter(Parameter& p);

  /// Records an operation result. The closure is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor value, std::span<const Var> inputs, Backward backward);

  const Tensor& value(Index id) const { return nodes_[id].value; }
  bool requires_grad(Index id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node, zero-initialized on first access.
  Eigen::Map<Eigen::ArrayXd> grad_buffer(Index id);
  /// Gradient after backward(); zeros when the node was not reached.
  Tensor grad(Var v) const;

  /// Requires a single-element loss. Visits each recorded node at most once, newest first.
  void backward(Var loss);

  Index size() const { return static_cast<Index>(nodes_.size()); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
    Parameter* parameter = nullptr;
  };
  std::vector<Node> nodes_;
};

// Elementwise, same shape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// Elementwise product / sum with a constant tensor of the same shape.
Var mul_const(Var a, std::shared_ptr<const Tensor> c);
Var add_const(Var a, std::shared_ptr<const Tensor> c);

/// Broadcasts a single-element Var to `shape`.
Var expand(Var scalar, const Shape& shape);
/// Broadcasts a length-d vector (shape [d] or [1, d]) to [rows, d].
Var expand_rows(Var v, Index rows);
/// [r, d] -> [r * times, d] with output row i = input row i / times.
Var repeat_interleave_rows(Var x, Index times);
/// [r, d] -> [r * times, d] with output row i = input row i % r.
Var tile_rows(Var x, Index times);

Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, const Shape& shape);
Var concat(std::span<const Var> parts, int axis);
Var concat(std::initializer_list<Var> parts, int axis);
Var slice(Var a, int axis, Index start, Index length);
/// Reorders the axes of a 3-D tensor: output axis i is input axis perm[i].
Var permute3(Var a, std::array<int, 3> perm);

Var sum(Var a);
Var mean(Var a);
Var sum(Var a, int axis);
Var mean(Var a, int axis);

Var relu(Var a);
Var gelu(Var a);
Var sigmoid(Var a);
Var abs(Var a);
Var square(Var a);
Var sqrt(Var a);

inline constexpr double kMaskBlocked = -1e9;

/// Softmax over the last axis after adding `mask` (same shape as a 2-D input, or null).
Var softmax_lastaxis(Var x, std::shared_ptr<const Tensor> mask = nullptr);
/// Normalizes each last-axis row to zero mean and unit variance (no affine).
Var layer_norm(Var x, double eps = 1e-5);
/// Normalizes x [C, ...] over its first `reduce_axes` axes at every remaining position,
/// then scales and shifts channel c (axis 0) by gamma[c] and beta[c].
Var layer_norm_channels(Var x, Var gamma, Var beta, Index reduce_axes = 1, double eps = 1e-5);

/// Valid convolution along time: x [C, N, T], w [C', C, k], b [C'] -> [C', N, T-k+1].
Var conv1d_time(Var x, Var w, Var b);
/// Gated temporal convolution: with y = conv1d_time(x, w, b) for w [2C', C, k],
/// returns sigmoid(y[:C']) * y[C':].
Var glu_time(Var x, Var w, Var b);
/// Valid 2-D correlation with a constant 3x3 kernel: [H, W] -> [H-2, W-2].
Var fixed_kernel_conv2d(Var x, const Eigen::Matrix3d& kernel);
/// Applies a sparse node operator on axis 1: x [C, N, T] -> y[c] = A^T x[c].
Var graph_propagate(Var x, std::shared_ptr<const SparseMatrix> a);

/// out[k] = x[index[k]] reshaped to `shape`; gradients scatter-add back.
Var gather(Var x, std::shared_ptr<const std::vector<Index>> index, const Shape& shape);

/// softmax(q k^T / sqrt(d) + mask) v for q [n, d], k [m, d], v [m, e]; mask [n, m] or null.
/// Same value as the composition of matmul, scale, softmax_lastaxis and matmul, with one tape record.
Var scaled_dot_attention(Var q, Var k, Var v, std::shared_ptr<const Tensor> mask = nullptr);

/// x w + b with b broadcast over rows.
Var linear(Var x, Var w, Var b);

/// Inverted dropout; identity when p == 0.
Var dropout(Var x, double p, Rng& rng);

/// Central finite differences against backward(); returns the max element-wise relative
/// error with denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double step = 1e-5);

/// Same check over parameter entries. `loss` must bind the parameters on the given tape.
/// At most `max_entries` entries per parameter are probed (evenly spaced).
double grad_check_parameters(std::span<Parameter* const> params, const std::function<Var(Tape&)>& loss,
                             double step = 1e-5, Index max_entries = 1 << 30);

}  // namespace deform::ad
