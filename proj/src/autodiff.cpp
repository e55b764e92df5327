#include "deform/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace deform::ad {

namespace {

using ArrayMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrayMap = Eigen::Map<const Eigen::ArrayXd>;
using RowArray = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require(bool ok, const std::string& op, const std::string& detail) {
  if (!ok) throw ShapeError(op + ": " + detail);
}

void require_same(const std::string& op, const Var& a, const Var& b) {
  require(a.shape() == b.shape(), op, "shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

int normalize_axis(int axis, int ndim, const std::string& op) {
  const int a = axis < 0 ? axis + ndim : axis;
  require(a >= 0 && a < ndim, op, "axis " + std::to_string(axis) + " out of range for " + std::to_string(ndim) + "-D");
  return a;
}

// (outer, extent, inner) decomposition around one axis.
struct AxisSplit {
  Index outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Eigen::Map<RowArray> rows_view(Tensor& t, Index cols) { return {t.data(), t.size() / cols, cols}; }
Eigen::Map<const RowArray> rows_view(const Tensor& t, Index cols) { return {t.data(), t.size() / cols, cols}; }
Eigen::Map<RowArray> rows_view(ArrayMap m, Index cols) { return {m.data(), m.size() / cols, cols}; }

// Elementwise unary op from a value function and a derivative written in terms of (x, y).
template <typename F, typename D>
Var unary(Var a, F f, D dfdx) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  out.array() = f(x.array());
  return a.tape().record(std::move(out), {a}, [ia = a.id(), dfdx](Tape& t, Index self) {
    if (!t.requires_grad(ia)) return;
    const auto g = t.grad_buffer(self);
    t.grad_buffer(ia) += g * dfdx(t.value(ia).array(), t.value(self).array());
  });
}

}  // namespace

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_string(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  data_.assign(static_cast<std::size_t>(shape_size(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (static_cast<Index>(data_.size()) != shape_size(shape_))
    throw ShapeError("tensor: " + std::to_string(data_.size()) + " values for shape " + shape_string(shape_));
}

Eigen::Map<RowMatrix> Tensor::matrix() {
  if (ndim() != 2) throw ShapeError("matrix view of " + shape_string(shape_));
  return {data_.data(), shape_[0], shape_[1]};
}

Eigen::Map<const RowMatrix> Tensor::matrix() const {
  if (ndim() != 2) throw ShapeError("matrix view of " + shape_string(shape_));
  return {data_.data(), shape_[0], shape_[1]};
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size())
    throw ShapeError("reshape " + shape_string(shape_) + " -> " + shape_string(shape));
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

Tensor Tensor::from_frame(const Frame& f) {
  return Tensor({f.rows(), f.cols()}, std::vector<double>(f.data(), f.data() + f.size()));
}

Frame Tensor::to_frame() const {
  if (ndim() != 2) throw ShapeError("to_frame of " + shape_string(shape_));
  return matrix();
}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape())
    grad = Tensor(value.shape());
  else
    grad.fill(0.0);
}

const Tensor& Var::value() const { return tape_->value(id_); }

Tape::Tape() { prepare_compute_thread(); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
  return {this, size() - 1};
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}, nullptr});
  return {this, size() - 1};
}

Var Tape::parameter(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, true, {}, &p});
  return {this, size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw Error("autodiff: operands recorded on different tapes");
    needs = needs || nodes_[v.id()].requires_grad;
  }
  Node node{std::move(value), {}, needs, {}, nullptr};
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, size() - 1};
}

Eigen::Map<Eigen::ArrayXd> Tape::grad_buffer(Index id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  return n.grad.array();
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.shape() != n.value.shape()) return Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw Error("backward: loss belongs to another tape");
  if (loss.value().size() != 1)
    throw ShapeError("backward: loss must be a single value, got " + shape_string(loss.shape()));
  for (auto& n : nodes_) n.grad = Tensor();
  grad_buffer(loss.id())[0] = 1.0;
  for (Index i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.shape() != n.value.shape()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.parameter) {
      Parameter& p = *n.parameter;
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
      p.grad.array() += n.grad.array();
    }
  }
}

// ---- elementwise ----

Var add(Var a, Var b) {
  require_same("add", a, b);
  Tensor out(a.shape());
  out.array() = a.value().array() + b.value().array();
  return a.tape().record(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Tape& t, Index self) {
    const auto g = t.grad_buffer(self);
    if (t.requires_grad(ia)) t.grad_buffer(ia) += g;
    if (t.requires_grad(ib)) t.grad_buffer(ib) += g;
  });
}

Var sub(Var a, Var b) {
  require_same("sub", a, b);
  Tensor out(a.shape());
  out.array() = a.value().array() - b.value().array();
  return a.tape().record(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Tape& t, Index self) {
    const auto g = t.grad_buffer(self);
    if (t.requires_grad(ia)) t.grad_buffer(ia) += g;
    if (t.requires_grad(ib)) t.grad_buffer(ib) -= g;
  });
}

Var mul(Var a, Var b) {
  require_same("mul", a, b);
  Tensor out(a.shape());
  out.array() = a.value().array() * b.value().array();
  return a.tape().record(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Tape& t, Index self) {
    const auto g = t.grad_buffer(self);
    if (t.requires_grad(ia)) t.grad_buffer(ia) += g * t.value(ib).array();
    if (t.requires_grad(ib)) t.grad_buffer(ib) += g * t.value(ia).array();
  });
}

Var div(Var a, Var b) {
  require_same("div", a, b);
  Tensor out(a.shape());
  out.array() = a.value().array() / b.value().array();
  return a.tape().record(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Tape& t, Index self) {
    const auto g = t.grad_buffer(self);
    const auto bv = t.value(ib).array();
    if (t.requires_grad(ia)) t.grad_buffer(ia) += g / bv;
    if (t.requires_grad(ib)) t.grad_buffer(ib) -= g * t.value(self).array() / bv;
  });
}

Var scale(Var a, double s) {
  Tensor out(a.shape());
  out.array() = a.value().array() * s;
  return a.tape().record(std::move(out), {a}, [ia = a.id(), s](Tape& t, Index self) {
    if (t.requires_grad(ia)) t.grad_buffer(ia) += t.grad_buffer(self) * s;
  });
}

Var add_scalar(Var a, double s) {
  Tensor out(a.shape());
  out.array() = a.value().array() + s;
  return a.tape().record(std::move(out), {a}, [ia = a.id()](Tape& t, Index self) {
    if (t.requires_grad(ia)) t.grad_buffer(ia) += t.grad_buffer(self);
  });
}

Var mul_const(Var a, std::shared_ptr<const Tensor> c) {
  require(c && c->shape() == a.shape(), "mul_const", "constant shape does not match " + shape_string(a.shape()));
  Tensor out(a.shape());
  out.array() = a.value().array() * c->array();
  return a.tape().record(std::move(out), {a}, [ia = a.id(), c](Tape& t, Index self) {
    if (t.requires_grad(ia)) t.grad_buffer(ia) += t.grad_buffer(self) * c->array();
  });
}

Var add_const(Var a, std::shared_ptr<const Tensor> c) {
  require(c && c->shape() == a.shape(), "add_const", "constant shape does not match " + shape_string(a.shape()));
  Tensor out(a.shape());
  out.array() = a.value().array() + c->array();
  return a.tape().record(std::move(out), {a}, [ia = a.id()](Tape& t, Index self) {
    if (t.requires_grad(ia)) t.grad_buffer(ia) += t.grad_buffer(self);
  });
}

// ---- broadcasting ----

Var expand(Var scalar, const Shape& shape) {
  require(scalar.value().size() == 1, "expand", "source must hold one value, got " + shape_string(scalar.shape()));
  Tensor out(shape, scalar.value()[0]);
  return scalar.tape().record(std::move(out), {scalar}, [is = scalar.id()](Tape& t, Index self) {
    if (t.requires_grad(is)) t.grad_buffer(is)[0] += t.grad_buffer(self).sum();
  });
}

Var expand_rows(Var v, Index rows) {
  const Shape& s = v.shape();
  require(s.size() == 1 || (s.size() == 2 && s[0] == 1), "expand_rows", "expects [d] or [1, d], got " + shape_string(s));
  const Index d = s.back();
  Tensor out({rows, d});
  rows_view(out, d).rowwise() = Eigen::Map<const Eigen::RowVectorXd>(v.value().data(), d).array();
  return v.tape().record(std::move(out), {v}, [iv = v.id(), d](Tape& t, Index self) {
    if (!t.requires_grad(iv)) return;
    t.grad_buffer(iv) += rows_view(t.grad_buffer(self), d).colwise().sum().transpose();
  });
}

Var repeat_interleave_rows(Var x, Index times) {
  require(x.value().ndim() == 2, "repeat_interleave_rows", "expects 2-D, got " + shape_string(x.shape()));
  const Index r = x.shape()[0], d = x.shape()[1];
  Tensor out({r * times, d});
  const auto src = x.value().matrix();
  auto dst = out.matrix();
  for (Index i = 0; i < r * times; ++i) dst.row(i) = src.row(i / times);
  return x.tape().record(std::move(out), {x}, [ix = x.id(), r, d, times](Tape& t, Index self) {
    if (!t.requires_grad(ix)) return;
    auto g = rows_view(t.grad_buffer(self), d);
    auto gx = rows_view(t.grad_buffer(ix), d);
    for (Index i = 0; i < r; ++i) gx.row(i) += g.middleRows(i * times, times).colwise().sum();
  });
}

Var tile_rows(Var x, Index times) {
  require(x.value().ndim() == 2, "tile_rows", "expects 2-D, got " + shape_string(x.shape()));
  const Index r = x.shape()[0], d = x.shape()[1];
  Tensor out({r * times, d});
  for (Index k = 0; k < times; ++k)
    std::copy(x.value().data(), x.value().data() + r * d, out.data() + k * r * d);
  return x.tape().record(std::move(out), {x}, [ix = x.id(), r, d, times](Tape& t, Index self) {
    if (!t.requires_grad(ix)) return;
    const auto g = t.grad_buffer(self);
    auto gx = t.grad_buffer(ix);
    for (Index k = 0; k < times; ++k) gx += g.segment(k * r * d, r * d);
  });
}

// ---- linear algebra and layout ----

Var matmul(Var a, Var b) {
  require(a.value().ndim() == 2 && b.value().ndim() == 2 && a.shape()[1] == b.shape()[0], "matmul",
          shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor out({a.shape()[0], b.shape()[1]});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return a.tape().record(std::move(out), {a, b}, [ia = a.id(), ib = b.id()](Tape& t, Index self) {
    const Index m = t.value(self).dim(0), n = t.value(self).dim(1);
    Eigen::Map<const RowMatrix> g(t.grad_buffer(self).data(), m, n);
    if (t.requires_grad(ia)) {
      const auto& av = t.value(ia);
      Eigen::Map<RowMatrix> ga(t.grad_buffer(ia).data(), av.dim(0), av.dim(1));
      ga.noalias() += g * t.value(ib).matrix().transpose();
    }
    if (t.requires_grad(ib)) {
      const auto& bv = t.value(ib);
      Eigen::Map<RowMatrix> gb(t.grad_buffer(ib).data(), bv.dim(0), bv.dim(1));
      gb.noalias() += t.value(ia).matrix().transpose() * g;
    }
  });
}

Var transpose(Var a) {
  require(a.value().ndim() == 2, "transpose", "expects 2-D, got " + shape_string(a.shape()));
  const Index r = a.shape()[0], c = a.shape()[1];
  Tensor out({c, r});
  out.matrix() = a.value().matrix().transpose();
  return a.tape().record(std::move(out), {a}, [ia = a.id(), r, c](Tape& t, Index self) {
    if (!t.requires_grad(ia)) return;
    Eigen::Map<const RowMatrix> g(t.grad_buffer(self).data(), c, r);
    Eigen::Map<RowMatrix> ga(t.grad_buffer(ia).data(), r, c);
    ga += g.transpose();
  });
}

Var reshape(Var a, const Shape& shape) {
  Tensor out = a.value().reshaped(shape);
  return a.tape().record(std::move(out), {a}, [ia = a.id()](Tape& t, Index self) {
    if (t.requires_grad(ia)) t.grad_buffer(ia) += t.grad_buffer(self);
  });
}

Var concat(std::span<const Var> parts, int axis) {
  require(!parts.empty(), "concat", "no operands");
  const Shape& s0 = parts[0].shape();
  const int ax = normalize_axis(axis, static_cast<int>(s0.size()), "concat");
  Shape out_shape = s0;
  out_shape[ax] = 0;
  for (const Var& p : parts) {
    Shape s = p.shape();
    require(s.size() == s0.size(), "concat", "rank mismatch " + shape_string(s) + " vs " + shape_string(s0));
    out_shape[ax] += s[ax];
    s[ax] = s0[ax];
    require(s == s0, "concat", "shape " + shape_string(p.shape()) + " incompatible with " + shape_string(s0));
  }
  const AxisSplit o = split_at(out_shape, ax);
  Tensor out(out_shape);
  std::vector<Index> offsets;
  std::vector<Index> ids;
  Index offset = 0;
  for (const Var& p : parts) {
    const Index e = p.shape()[ax];
    const double* src = p.value().data();
    for (Index i = 0; i < o.outer; ++i)
      std::copy(src + i * e * o.inner, src + (i + 1) * e * o.inner, out.data() + (i * o.extent + offset) * o.inner);
    offsets.push_back(offset);
    ids.push_back(p.id());
    offset += e;
  }
  return parts[0].tape().record(std::move(out), parts, [o, offsets, ids, ax](Tape& t, Index self) {
    const auto g = t.grad_buffer(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      const Index e = t.value(ids[k]).dim(ax);
      auto gp = t.grad_buffer(ids[k]);
      for (Index i = 0; i < o.outer; ++i)
        gp.segment(i * e * o.inner, e * o.inner) += g.segment((i * o.extent + offsets[k]) * o.inner, e * o.inner);
    }
  });
}

Var concat(std::initializer_list<Var> parts, int axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var slice(Var a, int axis, Index start, Index length) {
  const Shape& s = a.shape();
  const int ax = normalize_axis(axis, static_cast<int>(s.size()), "slice");
  require(start >= 0 && length >= 0 && start + length <= s[ax], "slice",
          "range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") on axis of extent " +
              std::to_string(s[ax]));
  const AxisSplit o = split_at(s, ax);
  Shape out_shape = s;
  out_shape[ax] = length;
  Tensor out(out_shape);
  const double* src = a.value().data();
  for (Index i = 0; i < o.outer; ++i)
    std::copy(src + (i * o.extent + start) * o.inner, src + (i * o.extent + start + length) * o.inner,
              out.data() + i * length * o.inner);
  return a.tape().record(std::move(out), {a}, [ia = a.id(), o, start, length](Tape& t, Index self) {
    if (!t.requires_grad(ia)) return;
    const auto g = t.grad_buffer(self);
    auto ga = t.grad_buffer(ia);
    for (Index i = 0; i < o.outer; ++i)
      ga.segment((i * o.extent + start) * o.inner, length * o.inner) += g.segment(i * length * o.inner, length * o.inner);
  });
}

namespace {

// Flat index map for a 3-D permutation: out[k] = in[map[k]].
std::vector<Index> permutation_map(const Shape& s, std::array<int, 3> perm) {
  const std::array<Index, 3> stride{s[1] * s[2], s[2], 1};
  const Index d0 = s[perm[0]], d1 = s[perm[1]], d2 = s[perm[2]];
  std::vector<Index> map(static_cast<std::size_t>(d0 * d1 * d2));
  Index k = 0;
  for (Index i = 0; i < d0; ++i)
    for (Index j = 0; j < d1; ++j)
      for (Index l = 0; l < d2; ++l) map[k++] = i * stride[perm[0]] + j * stride[perm[1]] + l * stride[perm[2]];
  return map;
}

}  // namespace

Var permute3(Var a, std::array<int, 3> perm) {
  const Shape& s = a.shape();
  require(s.size() == 3, "permute3", "expects 3-D, got " + shape_string(s));
  std::array<int, 3> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  require(sorted == std::array<int, 3>{0, 1, 2}, "permute3", "invalid permutation");
  auto map = std::make_shared<const std::vector<Index>>(permutation_map(s, perm));
  Tensor out({s[perm[0]], s[perm[1]], s[perm[2]]});
  const double* src = a.value().data();
  for (std::size_t k = 0; k < map->size(); ++k) out[k] = src[(*map)[k]];
  return a.tape().record(std::move(out), {a}, [ia = a.id(), map](Tape& t, Index self) {
    if (!t.requires_grad(ia)) return;
    const auto g = t.grad_buffer(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t k = 0; k < map->size(); ++k) ga[(*map)[k]] += g[k];
  });
}

// ---- reductions ----

Var sum(Var a) {
  Tensor out({1}, a.value().array().sum());
  return a.tape().record(std::move(out), {a}, [ia = a.id()](Tape& t, Index self) {
    if (t.requires_grad(ia)) t.grad_buffer(ia) += t.grad_buffer(self)[0];
  });
}

Var mean(Var a) {
  require(a.value().size() > 0, "mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var sum(Var a, int axis) {
  const Shape& s = a.shape();
  const int ax = normalize_axis(axis, static_cast<int>(s.size()), "sum");
  const AxisSplit o = split_at(s, ax);
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + ax);
  Tensor out(out_shape);
  const double* src = a.value().data();
  for (Index i = 0; i < o.outer; ++i)
    for (Index e = 0; e < o.extent; ++e)
      for (Index j = 0; j < o.inner; ++j) out[i * o.inner + j] += src[(i * o.extent + e) * o.inner + j];
  return a.tape().record(std::move(out), {a}, [ia = a.id(), o](Tape& t, Index self) {
    if (!t.requires_grad(ia)) return;
    const auto g = t.grad_buffer(self);
    auto ga = t.grad_buffer(ia);
    for (Index i = 0; i < o.outer; ++i)
      for (Index e = 0; e < o.extent; ++e) ga.segment((i * o.extent + e) * o.inner, o.inner) += g.segment(i * o.inner, o.inner);
  });
}

Var mean(Var a, int axis) {
  const int ax = normalize_axis(axis, a.value().ndim(), "mean");
  require(a.shape()[ax] > 0, "mean", "empty axis");
  return scale(sum(a, ax), 1.0 / static_cast<double>(a.shape()[ax]));
}

// ---- pointwise nonlinearities ----

Var relu(Var a) {
  return unary(
      a, [](const auto& x) { return x.max(0.0); },
      [](const auto& x, const auto&) { return (x > 0.0).template cast<double>(); });
}

Var gelu(Var a) {
  const Tensor& x = a.value();
  auto cdf = std::make_shared<Eigen::ArrayXd>(x.size());
  for (Index i = 0; i < x.size(); ++i) (*cdf)[i] = 0.5 * (1.0 + std::erf(x[i] * M_SQRT1_2));
  Tensor out(x.shape());
  out.array() = x.array() * *cdf;
  return a.tape().record(std::move(out), {a}, [ia = a.id(), cdf](Tape& t, Index self) {
    if (!t.requires_grad(ia)) return;
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    const auto xv = t.value(ia).array();
    t.grad_buffer(ia) += t.grad_buffer(self) * (*cdf + xv * kInvSqrt2Pi * (-0.5 * xv.square()).exp());
  });
}

Var sigmoid(Var a) {
  return unary(
      a, [](const auto& x) { return 1.0 / (1.0 + (-x).exp()); },
      [](const auto&, const auto& y) { return y * (1.0 - y); });
}

Var abs(Var a) {
  // Subgradient 0 at the origin.
  return unary(
      a, [](const auto& x) { return x.abs(); },
      [](const auto& x, const auto&) { return (x > 0.0).template cast<double>() - (x < 0.0).template cast<double>(); });
}

Var square(Var a) {
  return unary(
      a, [](const auto& x) { return x.square(); }, [](const auto& x, const auto&) { return 2.0 * x; });
}

Var sqrt(Var a) {
  return unary(
      a, [](const auto& x) { return x.sqrt(); }, [](const auto&, const auto& y) { return 0.5 / y; });
}

// ---- normalization ----

Var softmax_lastaxis(Var x, std::shared_ptr<const Tensor> mask) {
  const Tensor& xv = x.value();
  require(xv.ndim() >= 1 && xv.size() > 0, "softmax", "empty input");
  if (mask) require(mask->shape() == xv.shape(), "softmax", "mask " + shape_string(mask->shape()) + " vs input " + shape_string(xv.shape()));
  const Index c = xv.shape().back();
  Tensor out(xv.shape());
  auto y = rows_view(out, c);
  y = rows_view(xv, c);
  if (mask) y += rows_view(*mask, c);
  const Eigen::ArrayXd row_max = y.rowwise().maxCoeff();
  y.colwise() -= row_max;
  y = y.exp();
  const Eigen::ArrayXd row_sum = y.rowwise().sum();
  y.colwise() /= row_sum;
  return x.tape().record(std::move(out), {x}, [ix = x.id(), c](Tape& t, Index self) {
    if (!t.requires_grad(ix)) return;
    const auto yv = rows_view(t.value(self), c);
    const auto g = rows_view(t.grad_buffer(self), c);
    const Eigen::ArrayXd dot = (g * yv).rowwise().sum();
    auto gx = rows_view(t.grad_buffer(ix), c);
    gx += yv * (g.colwise() - dot);
  });
}

Var layer_norm(Var x, double eps) {
  const Tensor& xv = x.value();
  require(xv.ndim() >= 1 && xv.size() > 0, "layer_norm", "empty input");
  const Index d = xv.shape().back();
  Tensor out(xv.shape());
  auto y = rows_view(out, d);
  y = rows_view(xv, d);
  const Eigen::ArrayXd mu = y.rowwise().mean();
  y.colwise() -= mu;
  auto rstd = std::make_shared<Eigen::ArrayXd>((y.square().rowwise().mean() + eps).rsqrt());
  y.colwise() *= *rstd;
  return x.tape().record(std::move(out), {x}, [ix = x.id(), d, rstd](Tape& t, Index self) {
    if (!t.requires_grad(ix)) return;
    const auto yv = rows_view(t.value(self), d);
    const auto g = rows_view(t.grad_buffer(self), d);
    const Eigen::ArrayXd g_mean = g.rowwise().mean();
    const Eigen::ArrayXd gy_mean = (g * yv).rowwise().mean();
    RowArray dx = g.colwise() - g_mean;
    dx -= yv.colwise() * gy_mean;
    dx.colwise() *= *rstd;
    rows_view(t.grad_buffer(ix), d) += dx;
  });
}

Var layer_norm_channels(Var x, Var gamma, Var beta, Index reduce_axes, double eps) {
  const Tensor& xv = x.value();
  require(reduce_axes >= 1 && xv.ndim() > reduce_axes && xv.size() > 0, "layer_norm_channels",
          "cannot reduce " + std::to_string(reduce_axes) + " leading axes of " + shape_string(xv.shape()));
  const Index C = xv.dim(0);
  Index R = 1;
  for (Index a = 0; a < reduce_axes; ++a) R *= xv.dim(a);
  const Index M = xv.size() / R, per = R / C;
  require(gamma.value().size() == C && beta.value().size() == C, "layer_norm_channels",
          "affine parameters must have " + std::to_string(C) + " entries");
  // Normalized values before the affine map, kept for the backward pass.
  auto xhat = std::make_shared<RowArray>(Eigen::Map<const RowArray>(xv.data(), R, M));
  const Eigen::Array<double, 1, Eigen::Dynamic> mu = xhat->colwise().mean();
  xhat->rowwise() -= mu;
  auto rstd = std::make_shared<Eigen::Array<double, 1, Eigen::Dynamic>>((xhat->square().colwise().mean() + eps).rsqrt());
  xhat->rowwise() *= *rstd;
  // Row r of the [R, M] view belongs to channel r / per.
  auto expand = [C, per](const Tensor& v) {
    Eigen::ArrayXd e(C * per);
    for (Index c = 0; c < C; ++c) e.segment(c * per, per).setConstant(v[c]);
    return e;
  };
  Tensor out(xv.shape());
  Eigen::Map<RowArray>(out.data(), R, M) = (xhat->colwise() * expand(gamma.value())).colwise() + expand(beta.value());
  return x.tape().record(std::move(out), {x, gamma, beta}, [ix = x.id(), ig = gamma.id(), ib = beta.id(), xhat, rstd, expand, C, R, M, per](Tape& t, Index self) {
    Eigen::Map<const RowArray> g(t.grad_buffer(self).data(), R, M);
    auto per_channel = [&](const Eigen::ArrayXd& rows) {
      Eigen::ArrayXd c_sum(C);
      for (Index c = 0; c < C; ++c) c_sum[c] = rows.segment(c * per, per).sum();
      return c_sum;
    };
    if (t.requires_grad(ib)) t.grad_buffer(ib) += per_channel(g.rowwise().sum());
    if (t.requires_grad(ig)) t.grad_buffer(ig) += per_channel((g * *xhat).rowwise().sum());
    if (!t.requires_grad(ix)) return;
    RowArray gh = g.colwise() * expand(t.value(ig));
    const Eigen::Array<double, 1, Eigen::Dynamic> g_mean = gh.colwise().mean();
    const Eigen::Array<double, 1, Eigen::Dynamic> gy_mean = (gh * *xhat).colwise().mean();
    gh.rowwise() -= g_mean;
    gh -= xhat->rowwise() * gy_mean;
    gh.rowwise() *= *rstd;
    Eigen::Map<RowArray>(t.grad_buffer(ix).data(), R, M) += gh;
  });
}

// ---- convolutions and graph operators ----

namespace {

// cols[(c*k + j), n*T' + s] = x[c, n, s + j]
RowMatrix im2col_time(const Tensor& x, Index k) {
  const Index C = x.dim(0), N = x.dim(1), T = x.dim(2), To = T - k + 1;
  RowMatrix cols(C * k, N * To);
  for (Index c = 0; c < C; ++c)
    for (Index j = 0; j < k; ++j) {
      double* row = cols.row(c * k + j).data();
      for (Index n = 0; n < N; ++n) {
        const double* src = x.data() + (c * N + n) * T + j;
        std::copy(src, src + To, row + n * To);
      }
    }
  return cols;
}

}  // namespace

Var conv1d_time(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.ndim() == 3, "conv1d_time", "input must be [C, N, T], got " + shape_string(xv.shape()));
  require(wv.ndim() == 3 && wv.dim(1) == xv.dim(0), "conv1d_time",
          "weight " + shape_string(wv.shape()) + " incompatible with input " + shape_string(xv.shape()));
  const Index Co = wv.dim(0), C = xv.dim(0), k = wv.dim(2), N = xv.dim(1), T = xv.dim(2);
  require(b.value().size() == Co, "conv1d_time", "bias must have " + std::to_string(Co) + " entries");
  require(T >= k, "conv1d_time", "sequence of length " + std::to_string(T) + " shorter than kernel " + std::to_string(k));
  const Index To = T - k + 1;
  const RowMatrix cols = im2col_time(xv, k);
  Tensor out({Co, N, To});
  Eigen::Map<RowMatrix> y(out.data(), Co, N * To);
  Eigen::Map<const RowMatrix> wm(wv.data(), Co, C * k);
  y.noalias() = wm * cols;
  y.colwise() += Eigen::Map<const Eigen::VectorXd>(b.value().data(), Co);
  return x.tape().record(std::move(out), {x, w, b}, [ix = x.id(), iw = w.id(), ib = b.id(), Co, C, k, N, T, To](Tape& t, Index self) {
    Eigen::Map<const RowMatrix> g(t.grad_buffer(self).data(), Co, N * To);
    if (t.requires_grad(ib)) t.grad_buffer(ib) += g.rowwise().sum().array();
    if (t.requires_grad(iw)) {
      const RowMatrix cols = im2col_time(t.value(ix), k);
      Eigen::Map<RowMatrix> gw(t.grad_buffer(iw).data(), Co, C * k);
      gw.noalias() += g * cols.transpose();
    }
    if (t.requires_grad(ix)) {
      Eigen::Map<const RowMatrix> wm(t.value(iw).data(), Co, C * k);
      const RowMatrix dcols = wm.transpose() * g;
      auto gx = t.grad_buffer(ix);
      for (Index c = 0; c < C; ++c)
        for (Index j = 0; j < k; ++j) {
          const double* row = dcols.row(c * k + j).data();
          for (Index n = 0; n < N; ++n) gx.segment((c * N + n) * T + j, To) += Eigen::Map<const Eigen::ArrayXd>(row + n * To, To);
        }
    }
  });
}

Var glu_time(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.ndim() == 3, "glu_time", "input must be [C, N, T], got " + shape_string(xv.shape()));
  require(wv.ndim() == 3 && wv.dim(1) == xv.dim(0) && wv.dim(0) % 2 == 0, "glu_time",
          "weight " + shape_string(wv.shape()) + " incompatible with input " + shape_string(xv.shape()));
  const Index C2 = wv.dim(0), Co = C2 / 2, C = xv.dim(0), k = wv.dim(2), N = xv.dim(1), T = xv.dim(2);
  require(b.value().size() == C2, "glu_time", "bias must have " + std::to_string(C2) + " entries");
  require(T >= k, "glu_time", "sequence of length " + std::to_string(T) + " shorter than kernel " + std::to_string(k));
  const Index To = T - k + 1, M = N * To;
  const RowMatrix cols = im2col_time(xv, k);
  // Pre-activations kept for the backward pass: rows [0, Co) hold the sigmoid gate.
  auto pre = std::make_shared<RowMatrix>(C2, M);
  pre->noalias() = Eigen::Map<const RowMatrix>(wv.data(), C2, C * k) * cols;
  pre->colwise() += Eigen::Map<const Eigen::VectorXd>(b.value().data(), C2);
  pre->topRows(Co) = (1.0 + (-pre->topRows(Co).array()).exp()).inverse().matrix();
  Tensor out({Co, N, To});
  Eigen::Map<RowMatrix>(out.data(), Co, M) = (pre->topRows(Co).array() * pre->bottomRows(Co).array()).matrix();
  return x.tape().record(std::move(out), {x, w, b}, [ix = x.id(), iw = w.id(), ib = b.id(), pre, C2, Co, C, k, N, T, To, M](Tape& t, Index self) {
    Eigen::Map<const RowArray> g(t.grad_buffer(self).data(), Co, M);
    RowMatrix gy(C2, M);
    const auto gate = pre->topRows(Co).array();
    gy.topRows(Co) = (g * pre->bottomRows(Co).array() * gate * (1.0 - gate)).matrix();
    gy.bottomRows(Co) = (g * gate).matrix();
    if (t.requires_grad(ib)) t.grad_buffer(ib) += gy.rowwise().sum().array();
    if (t.requires_grad(iw)) {
      const RowMatrix cols = im2col_time(t.value(ix), k);
      Eigen::Map<RowMatrix> gw(t.grad_buffer(iw).data(), C2, C * k);
      gw.noalias() += gy * cols.transpose();
    }
    if (t.requires_grad(ix)) {
      Eigen::Map<const RowMatrix> wm(t.value(iw).data(), C2, C * k);
      const RowMatrix dcols = wm.transpose() * gy;
      auto gx = t.grad_buffer(ix);
      for (Index c = 0; c < C; ++c)
        for (Index j = 0; j < k; ++j) {
          const double* row = dcols.row(c * k + j).data();
          for (Index n = 0; n < N; ++n) gx.segment((c * N + n) * T + j, To) += Eigen::Map<const Eigen::ArrayXd>(row + n * To, To);
        }
    }
  });
}

Var fixed_kernel_conv2d(Var x, const Eigen::Matrix3d& kernel) {
  const Tensor& xv = x.value();
  require(xv.ndim() == 2 && xv.dim(0) >= 3 && xv.dim(1) >= 3, "fixed_kernel_conv2d",
          "needs a 2-D input of at least 3 x 3, got " + shape_string(xv.shape()));
  const Index H = xv.dim(0), W = xv.dim(1);
  Tensor out({H - 2, W - 2});
  auto y = out.matrix();
  const auto xm = xv.matrix();
  for (int a = 0; a < 3; ++a)
    for (int c = 0; c < 3; ++c)
      if (kernel(a, c) != 0.0) y += kernel(a, c) * xm.block(a, c, H - 2, W - 2);
  return x.tape().record(std::move(out), {x}, [ix = x.id(), kernel, H, W](Tape& t, Index self) {
    if (!t.requires_grad(ix)) return;
    Eigen::Map<const RowMatrix> g(t.grad_buffer(self).data(), H - 2, W - 2);
    Eigen::Map<RowMatrix> gx(t.grad_buffer(ix).data(), H, W);
    for (int a = 0; a < 3; ++a)
      for (int c = 0; c < 3; ++c)
        if (kernel(a, c) != 0.0) gx.block(a, c, H - 2, W - 2) += kernel(a, c) * g;
  });
}

Var graph_propagate(Var x, std::shared_ptr<const SparseMatrix> a) {
  const Tensor& xv = x.value();
  require(xv.ndim() == 3, "graph_propagate", "input must be [C, N, T], got " + shape_string(xv.shape()));
  const Index C = xv.dim(0), N = xv.dim(1), T = xv.dim(2);
  require(a && a->rows() == N && a->cols() == N, "graph_propagate",
          "operator size does not match " + std::to_string(N) + " nodes");
  Tensor out(xv.shape());
  for (Index c = 0; c < C; ++c) {
    Eigen::Map<const RowMatrix> xc(xv.data() + c * N * T, N, T);
    Eigen::Map<RowMatrix> yc(out.data() + c * N * T, N, T);
    yc.noalias() = a->transpose() * xc;
  }
  return x.tape().record(std::move(out), {x}, [ix = x.id(), a, C, N, T](Tape& t, Index self) {
    if (!t.requires_grad(ix)) return;
    const double* g = t.grad_buffer(self).data();
    double* gx = t.grad_buffer(ix).data();
    for (Index c = 0; c < C; ++c) {
      Eigen::Map<const RowMatrix> gc(g + c * N * T, N, T);
      Eigen::Map<RowMatrix> gxc(gx + c * N * T, N, T);
      gxc.noalias() += *a * gc;
    }
  });
}

Var gather(Var x, std::shared_ptr<const std::vector<Index>> index, const Shape& shape) {
  require(index && static_cast<Index>(index->size()) == shape_size(shape), "gather",
          "index length does not match " + shape_string(shape));
  const Tensor& xv = x.value();
  Tensor out(shape);
  for (std::size_t k = 0; k < index->size(); ++k) {
    const Index i = (*index)[k];
    require(i >= 0 && i < xv.size(), "gather", "index " + std::to_string(i) + " out of range");
    out[k] = xv[i];
  }
  return x.tape().record(std::move(out), {x}, [ix = x.id(), index](Tape& t, Index self) {
    if (!t.requires_grad(ix)) return;
    const auto g = t.grad_buffer(self);
    auto gx = t.grad_buffer(ix);
    for (std::size_t k = 0; k < index->size(); ++k) gx[(*index)[k]] += g[k];
  });
}

Var scaled_dot_attention(Var q, Var k, Var v, std::shared_ptr<const Tensor> mask) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (!(qv.ndim() == 2 && kv.ndim() == 2 && vv.ndim() == 2 && qv.dim(1) == kv.dim(1) && kv.dim(0) == vv.dim(0)))
    throw ShapeError("attention: q " + shape_string(qv.shape()) + ", k " + shape_string(kv.shape()) + ", v " +
                     shape_string(vv.shape()));
  const Index n = qv.dim(0), m = kv.dim(0);
  if (mask && mask->shape() != Shape{n, m})
    throw ShapeError("attention: mask " + shape_string(mask->shape()) + " vs scores " + shape_string({n, m}));
  const double s = 1.0 / std::sqrt(static_cast<double>(qv.dim(1)));
  auto probs = std::make_shared<RowMatrix>(n, m);
  probs->noalias() = (qv.matrix() * s) * kv.matrix().transpose();
  // One pass per row keeps the row in cache: mask, shift, exponentiate, normalize.
  for (Index i = 0; i < n; ++i) {
    auto row = probs->row(i).array();
    if (mask) row += Eigen::Map<const Eigen::ArrayXd>(mask->data() + i * m, m).transpose();
    row = (row - row.maxCoeff()).exp();
    row *= 1.0 / row.sum();
  }
  Tensor out({n, vv.dim(1)});
  out.matrix().noalias() = *probs * vv.matrix();
  return q.tape().record(std::move(out), {q, k, v}, [iq = q.id(), ik = k.id(), iv = v.id(), probs, s](Tape& t, Index self) {
    const Tensor& o = t.value(self);
    Eigen::Map<const RowMatrix> g(t.grad_buffer(self).data(), o.dim(0), o.dim(1));
    const auto vm = t.value(iv).matrix();
    if (t.requires_grad(iv)) {
      Eigen::Map<RowMatrix> gv(t.grad_buffer(iv).data(), vm.rows(), vm.cols());
      gv.noalias() += probs->transpose() * g;
    }
    if (!t.requires_grad(iq) && !t.requires_grad(ik)) return;
    RowMatrix ds(probs->rows(), probs->cols());
    ds.noalias() = g * vm.transpose();
    for (Index i = 0; i < ds.rows(); ++i) {
      auto d = ds.row(i).array();
      const auto p = probs->row(i).array();
      const double dot = (d * p).sum();
      d = (p * (d - dot)) * s;
    }
    if (t.requires_grad(iq)) {
      const auto& qv = t.value(iq);
      Eigen::Map<RowMatrix> gq(t.grad_buffer(iq).data(), qv.dim(0), qv.dim(1));
      gq.noalias() += ds * t.value(ik).matrix();
    }
    if (t.requires_grad(ik)) {
      const auto& kv = t.value(ik);
      Eigen::Map<RowMatrix> gk(t.grad_buffer(ik).data(), kv.dim(0), kv.dim(1));
      gk.noalias() += ds.transpose() * t.value(iq).matrix();
    }
  });
}

Var linear(Var x, Var w, Var b) { return add(matmul(x, w), expand_rows(b, x.shape()[0])); }

Var dropout(Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  require(p < 1.0, "dropout", "rate must be below 1");
  auto keep = std::make_shared<Tensor>(x.shape());
  for (Index i = 0; i < keep->size(); ++i) (*keep)[i] = rng.uniform() < p ? 0.0 : 1.0 / (1.0 - p);
  return mul_const(x, keep);
}

// ---- gradient checking ----

namespace {

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

double scalar_value(Var v, const char* who) {
  if (v.value().size() != 1) throw ShapeError(std::string(who) + ": function must return one value");
  return v.value()[0];
}

}  // namespace

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double step) {
  Tensor analytic;
  {
    Tape tape;
    Var v = tape.variable(x);
    Var loss = f(tape, v);
    scalar_value(loss, "grad_check");
    tape.backward(loss);
    analytic = tape.grad(v);
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    return scalar_value(f(tape, tape.variable(at)), "grad_check");
  };
  double worst = 0.0;
  Tensor probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = eval(probe);
    probe[i] = x[i] - step;
    const double down = eval(probe);
    probe[i] = x[i];
    worst = std::max(worst, rel_error(analytic[i], (up - down) / (2.0 * step)));
  }
  return worst;
}

double grad_check_parameters(std::span<Parameter* const> params, const std::function<Var(Tape&)>& loss,
                             double step, Index max_entries) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var l = loss(tape);
    scalar_value(l, "grad_check_parameters");
    tape.backward(l);
  }
  auto eval = [&] {
    Tape tape;
    return scalar_value(loss(tape), "grad_check_parameters");
  };
  double worst = 0.0;
  for (Parameter* p : params) {
    const Index n = p->value.size();
    const Index count = std::min(n, max_entries);
    for (Index k = 0; k < count; ++k) {
      const Index i = count == n ? k : k * n / count;
      const double orig = p->value[i];
      p->value[i] = orig + step;
      const double up = eval();
      p->value[i] = orig - step;
      const double down = eval();
      p->value[i] = orig;
      worst = std::max(worst, rel_error(p->grad[i], (up - down) / (2.0 * step)));
    }
  }
  return worst;
}

}  // namespace deform::ad
