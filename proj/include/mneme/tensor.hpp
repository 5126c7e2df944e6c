#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "mneme/errors.hpp"

// Reverse-mode autodiff over dense row-major arrays. A TapeT owns every node;
// TensorT is a cheap (tape*, id) handle. Ops append nodes in execution order,
// so the record is already topologically sorted and backward() is a single
// reverse scan. Eigen backs all storage and matrix kernels.
//
// The forward matmul is a plain ikj loop: every output element accumulates
// over k in strict sequential order, independent of operand shapes or SIMD
// tiling. Attention rows masked to exact zeros then leave the accumulator
// untouched, so a token gets bit-identical activations whether it is processed
// inside a full chunk or as an incremental prefix row during generation.
// Backward uses Eigen GEMM; gradients never feed the replay invariants.

namespace mneme {

using Shape = std::vector<long>;

inline long numel_of(const Shape& s) {
  long n = 1;
  for (long d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += "x";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

template <class S>
class TensorT;

template <class S>
class TapeT {
 public:
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using BackwardFn = std::function<void(TapeT&, int)>;

  struct Node {
    Array value;
    Array grad;  // empty until backward touches it
    Shape shape;
    bool requires_grad = false;
    bool leaf = true;
    BackwardFn backward;
  };

  bool grad_enabled = true;
  bool check_finite = true;

  int size() const { return static_cast<int>(nodes_.size()); }
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  // Drop every node appended after `m`; parameter prefixes survive rewinds.
  size_t mark() const { return nodes_.size(); }
  void rewind(size_t m) { nodes_.resize(m); }

  TensorT<S> leaf(const Shape& shape, Array value, bool requires_grad) {
    if (value.size() != numel_of(shape))
      throw shape_error("leaf: data length does not match shape " + shape_str(shape));
    Node n;
    n.value = std::move(value);
    n.shape = shape;
    n.requires_grad = requires_grad;
    n.leaf = true;
    nodes_.push_back(std::move(n));
    return TensorT<S>(this, size() - 1);
  }

  TensorT<S> constant(const Shape& shape, Array value) {
    return leaf(shape, std::move(value), false);
  }

  TensorT<S> zeros(const Shape& shape, bool requires_grad = false) {
    return leaf(shape, Array::Zero(numel_of(shape)), requires_grad);
  }

  TensorT<S> scalar(S v) {
    Array a(1);
    a[0] = v;
    return constant({1}, std::move(a));
  }

  TensorT<S> append(const Shape& shape, Array value, std::vector<int> inputs,
                    BackwardFn fn) {
    if (check_finite && !value.isFinite().all())
      throw numeric_error("non-finite value produced by a forward operation");
    Node n;
    n.shape = shape;
    n.value = std::move(value);
    n.leaf = false;
    if (grad_enabled) {
      for (int i : inputs)
        if (node(i).requires_grad) n.requires_grad = true;
      if (n.requires_grad) n.backward = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return TensorT<S>(this, size() - 1);
  }

  Array& grad_ref(int id) {
    Node& n = node(id);
    if (n.grad.size() == 0) n.grad = Array::Zero(n.value.size());
    return n.grad;
  }

  // Accumulates dLoss/dLeaf into every requires_grad leaf reachable from
  // `loss`. Repeated calls keep accumulating into leaf grads; intermediate
  // grads are cleared per call so each backward contributes exactly once.
  void backward(const TensorT<S>& loss);

  void zero_grad() {
    for (Node& n : nodes_) n.grad.resize(0);
  }

 private:
  std::vector<Node> nodes_;
};

template <class S>
class TensorT {
 public:
  using Tape = TapeT<S>;
  using Array = typename Tape::Array;

  TensorT() = default;
  TensorT(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }

  const Shape& shape() const { return tape_->node(id_).shape; }
  long numel() const { return tape_->node(id_).value.size(); }
  long rank() const { return static_cast<long>(shape().size()); }
  long dim(int i) const { return shape()[static_cast<size_t>(i)]; }
  long rows() const { return shape()[0]; }
  long cols() const { return shape()[1]; }

  Array& value() const { return tape_->node(id_).value; }
  Array& grad() const { return tape_->node(id_).grad; }
  bool requires_grad() const { return tape_->node(id_).requires_grad; }
  S item() const {
    if (numel() != 1) throw contract_error("item: tensor is not scalar");
    return value()[0];
  }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

template <class S>
void TapeT<S>::backward(const TensorT<S>& loss) {
  if (loss.numel() != 1)
    throw contract_error("backward: loss must be scalar, got " +
                         shape_str(loss.shape()));
  int top = loss.id();
  for (int i = 0; i <= top; ++i) {
    Node& n = node(i);
    if (!n.leaf) n.grad.resize(0);
  }
  grad_ref(top)[0] += S(1);
  for (int i = top; i >= 0; --i) {
    Node& n = node(i);
    if (n.backward && n.grad.size() != 0) n.backward(*this, i);
  }
}

// ---------------------------------------------------------------------------
// op helpers

namespace detail {

template <class S>
TapeT<S>& same_tape(const TensorT<S>& a, const TensorT<S>& b) {
  if (&a.tape() != &b.tape())
    throw contract_error("operands live on different tapes");
  return a.tape();
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw shape_error(msg);
}

// (outer, axis, inner) decomposition for reductions/softmax along any axis.
struct AxisView {
  long outer, n, inner;
};

inline AxisView axis_view(const Shape& s, int axis) {
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw shape_error("axis " + std::to_string(axis) + " out of range for " +
                      shape_str(s));
  AxisView v{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i)
    v.inner *= s[i];
  return v;
}

inline Shape drop_axis(const Shape& s, int axis) {
  Shape r;
  for (int i = 0; i < static_cast<int>(s.size()); ++i)
    if (i != axis) r.push_back(s[static_cast<size_t>(i)]);
  if (r.empty()) r.push_back(1);
  return r;
}

}  // namespace detail

template <class S>
using MatMap = Eigen::Map<typename TapeT<S>::Mat>;

template <class S>
MatMap<S> as_mat(typename TapeT<S>::Array& a, long r, long c) {
  return MatMap<S>(a.data(), r, c);
}

// ---------------------------------------------------------------------------
// elementwise

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  auto& t = detail::same_tape(a, b);
  detail::require(a.shape() == b.shape(), "add: shape mismatch " +
                                              shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
  auto v = (a.value() + b.value()).eval();
  int ia = a.id(), ib = b.id();
  return t.append(a.shape(), std::move(v), {ia, ib}, [ia, ib](TapeT<S>& t, int self) {
    auto& g = t.node(self).grad;
    if (t.node(ia).requires_grad) t.grad_ref(ia) += g;
    if (t.node(ib).requires_grad) t.grad_ref(ib) += g;
  });
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  auto& t = detail::same_tape(a, b);
  detail::require(a.shape() == b.shape(), "sub: shape mismatch");
  auto v = (a.value() - b.value()).eval();
  int ia = a.id(), ib = b.id();
  return t.append(a.shape(), std::move(v), {ia, ib}, [ia, ib](TapeT<S>& t, int self) {
    auto& g = t.node(self).grad;
    if (t.node(ia).requires_grad) t.grad_ref(ia) += g;
    if (t.node(ib).requires_grad) t.grad_ref(ib) -= g;
  });
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  auto& t = detail::same_tape(a, b);
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  auto v = (a.value() * b.value()).eval();
  int ia = a.id(), ib = b.id();
  return t.append(a.shape(), std::move(v), {ia, ib}, [ia, ib](TapeT<S>& t, int self) {
    auto& g = t.node(self).grad;
    if (t.node(ia).requires_grad) t.grad_ref(ia) += g * t.node(ib).value;
    if (t.node(ib).requires_grad) t.grad_ref(ib) += g * t.node(ia).value;
  });
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  auto& t = a.tape();
  auto v = (a.value() * c).eval();
  int ia = a.id();
  return t.append(a.shape(), std::move(v), {ia}, [ia, c](TapeT<S>& t, int self) {
    t.grad_ref(ia) += t.node(self).grad * c;
  });
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& a) {
  auto& t = a.tape();
  typename TapeT<S>::Array v(a.numel());
  const auto& x = a.value();
  for (long i = 0; i < x.size(); ++i) {
    S xi = x[i];
    if (xi >= S(0)) {
      v[i] = S(1) / (S(1) + std::exp(-xi));
    } else {
      S e = std::exp(xi);
      v[i] = e / (S(1) + e);
    }
  }
  int ia = a.id();
  return t.append(a.shape(), std::move(v), {ia}, [ia](TapeT<S>& t, int self) {
    const auto& y = t.node(self).value;
    t.grad_ref(ia) += t.node(self).grad * y * (S(1) - y);
  });
}

template <class S>
TensorT<S> gelu(const TensorT<S>& a) {
  auto& t = a.tape();
  const S inv_sqrt2 = S(0.7071067811865475244);
  typename TapeT<S>::Array v(a.numel());
  const auto& x0 = a.value();
  for (long i = 0; i < v.size(); ++i)
    v[i] = S(0.5) * x0[i] * (S(1) + std::erf(x0[i] * inv_sqrt2));
  int ia = a.id();
  return t.append(a.shape(), std::move(v), {ia}, [ia](TapeT<S>& t, int self) {
    const S inv_sqrt2 = S(0.7071067811865475244);
    const S inv_sqrt2pi = S(0.3989422804014326779);
    const auto& x = t.node(ia).value;
    const auto& g = t.node(self).grad;
    auto& gi = t.grad_ref(ia);
    for (long i = 0; i < x.size(); ++i) {
      const S cdf = S(0.5) * (S(1) + std::erf(x[i] * inv_sqrt2));
      const S pdf = std::exp(S(-0.5) * x[i] * x[i]) * inv_sqrt2pi;
      gi[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

template <class S>
TensorT<S> minimum(const TensorT<S>& a, const TensorT<S>& b) {
  auto& t = detail::same_tape(a, b);
  detail::require(a.shape() == b.shape(), "minimum: shape mismatch");
  auto v = a.value().min(b.value()).eval();
  int ia = a.id(), ib = b.id();
  // ties route gradient to the first operand
  return t.append(a.shape(), std::move(v), {ia, ib}, [ia, ib](TapeT<S>& t, int self) {
    const auto& g = t.node(self).grad;
    auto pick_a = (t.node(ia).value <= t.node(ib).value).template cast<S>().eval();
    if (t.node(ia).requires_grad) t.grad_ref(ia) += g * pick_a;
    if (t.node(ib).requires_grad) t.grad_ref(ib) += g * (S(1) - pick_a);
  });
}

template <class S>
TensorT<S> maximum(const TensorT<S>& a, const TensorT<S>& b) {
  auto& t = detail::same_tape(a, b);
  detail::require(a.shape() == b.shape(), "maximum: shape mismatch");
  auto v = a.value().max(b.value()).eval();
  int ia = a.id(), ib = b.id();
  return t.append(a.shape(), std::move(v), {ia, ib}, [ia, ib](TapeT<S>& t, int self) {
    const auto& g = t.node(self).grad;
    auto pick_a = (t.node(ia).value >= t.node(ib).value).template cast<S>().eval();
    if (t.node(ia).requires_grad) t.grad_ref(ia) += g * pick_a;
    if (t.node(ib).requires_grad) t.grad_ref(ib) += g * (S(1) - pick_a);
  });
}

template <class S>
TensorT<S> detach(const TensorT<S>& a) {
  return a.tape().constant(a.shape(), a.value());
}

template <class S>
TensorT<S> reshape(const TensorT<S>& a, const Shape& shape) {
  detail::require(numel_of(shape) == a.numel(), "reshape: element count mismatch");
  auto& t = a.tape();
  int ia = a.id();
  return t.append(shape, a.value(), {ia}, [ia](TapeT<S>& t, int self) {
    t.grad_ref(ia) += t.node(self).grad;
  });
}

// ---------------------------------------------------------------------------
// matrix ops

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  auto& t = detail::same_tape(a, b);
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be rank 2");
  if (a.cols() != b.rows())
    throw shape_error("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                      " x " + shape_str(b.shape()));
  const long m = a.rows(), k = a.cols(), n = b.cols();
  typename TapeT<S>::Array v = TapeT<S>::Array::Zero(m * n);
  {
    const S* A = a.value().data();
    const S* B = b.value().data();
    S* C = v.data();
    // sequential-k accumulation, see header note
    for (long i = 0; i < m; ++i) {
      S* crow = C + i * n;
      const S* arow = A + i * k;
      for (long p = 0; p < k; ++p) {
        const S aik = arow[p];
        const S* brow = B + p * n;
        for (long j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
    }
  }
  int ia = a.id(), ib = b.id();
  return t.append({m, n}, std::move(v), {ia, ib},
                  [ia, ib, m, k, n](TapeT<S>& t, int self) {
                    auto G = as_mat<S>(t.node(self).grad, m, n);
                    auto A = as_mat<S>(t.node(ia).value, m, k);
                    auto B = as_mat<S>(t.node(ib).value, k, n);
                    if (t.node(ia).requires_grad) {
                      auto GA = as_mat<S>(t.grad_ref(ia), m, k);
                      GA.noalias() += G * B.transpose();
                    }
                    if (t.node(ib).requires_grad) {
                      auto GB = as_mat<S>(t.grad_ref(ib), k, n);
                      GB.noalias() += A.transpose() * G;
                    }
                  });
}

template <class S>
TensorT<S> transpose(const TensorT<S>& a) {
  detail::require(a.rank() == 2, "transpose: rank-2 only");
  auto& t = a.tape();
  const long m = a.rows(), n = a.cols();
  typename TapeT<S>::Array v(m * n);
  as_mat<S>(v, n, m) = as_mat<S>(a.value(), m, n).transpose();
  int ia = a.id();
  return t.append({n, m}, std::move(v), {ia}, [ia, m, n](TapeT<S>& t, int self) {
    auto G = as_mat<S>(t.node(self).grad, n, m);
    auto GA = as_mat<S>(t.grad_ref(ia), m, n);
    GA += G.transpose();
  });
}

// x[r,c] + v[c] broadcast over rows (bias add).
template <class S>
TensorT<S> add_rowvec(const TensorT<S>& x, const TensorT<S>& v) {
  auto& t = detail::same_tape(x, v);
  detail::require(x.rank() == 2 && v.rank() == 1 && v.dim(0) == x.cols(),
                  "add_rowvec: need [r,c] + [c]");
  const long r = x.rows(), c = x.cols();
  typename TapeT<S>::Array out(r * c);
  {
    auto X = as_mat<S>(x.value(), r, c);
    auto O = as_mat<S>(out, r, c);
    auto V = x.tape().node(v.id()).value.matrix().transpose();
    for (long i = 0; i < r; ++i) O.row(i) = X.row(i) + V;
  }
  int ix = x.id(), iv = v.id();
  return t.append(x.shape(), std::move(out), {ix, iv},
                  [ix, iv, r, c](TapeT<S>& t, int self) {
                    auto G = as_mat<S>(t.node(self).grad, r, c);
                    if (t.node(ix).requires_grad) t.grad_ref(ix) += t.node(self).grad;
                    if (t.node(iv).requires_grad) {
                      auto gv = as_mat<S>(t.grad_ref(iv), 1, c);
                      gv += G.colwise().sum();
                    }
                  });
}

// x[r,c] with row i scaled by v[i].
template <class S>
TensorT<S> scale_rows(const TensorT<S>& x, const TensorT<S>& v) {
  auto& t = detail::same_tape(x, v);
  detail::require(x.rank() == 2 && v.rank() == 1 && v.dim(0) == x.rows(),
                  "scale_rows: need [r,c] * [r]");
  const long r = x.rows(), c = x.cols();
  typename TapeT<S>::Array out(r * c);
  {
    auto X = as_mat<S>(x.value(), r, c);
    auto O = as_mat<S>(out, r, c);
    for (long i = 0; i < r; ++i) O.row(i) = X.row(i) * v.value()[i];
  }
  int ix = x.id(), iv = v.id();
  return t.append(x.shape(), std::move(out), {ix, iv},
                  [ix, iv, r, c](TapeT<S>& t, int self) {
                    auto G = as_mat<S>(t.node(self).grad, r, c);
                    const auto& vv = t.node(iv).value;
                    if (t.node(ix).requires_grad) {
                      auto GX = as_mat<S>(t.grad_ref(ix), r, c);
                      for (long i = 0; i < r; ++i) GX.row(i) += G.row(i) * vv[i];
                    }
                    if (t.node(iv).requires_grad) {
                      auto X = as_mat<S>(t.node(ix).value, r, c);
                      auto& gv = t.grad_ref(iv);
                      for (long i = 0; i < r; ++i) gv[i] += G.row(i).dot(X.row(i));
                    }
                  });
}

template <class S>
TensorT<S> gather_rows(const TensorT<S>& m, std::vector<int> ids) {
  detail::require(m.rank() == 2, "gather_rows: rank-2 source");
  auto& t = m.tape();
  const long rows = m.rows(), c = m.cols();
  for (int id : ids)
    if (id < 0 || id >= rows)
      throw input_error("gather_rows: index " + std::to_string(id) +
                        " out of range [0," + std::to_string(rows) + ")");
  const long r = static_cast<long>(ids.size());
  typename TapeT<S>::Array out(r * c);
  {
    auto M = as_mat<S>(m.value(), rows, c);
    auto O = as_mat<S>(out, r, c);
    for (long i = 0; i < r; ++i) O.row(i) = M.row(ids[static_cast<size_t>(i)]);
  }
  int im = m.id();
  return t.append({r, c}, std::move(out), {im},
                  [im, ids = std::move(ids), rows, c](TapeT<S>& t, int self) {
                    const long r = static_cast<long>(ids.size());
                    auto G = as_mat<S>(t.node(self).grad, r, c);
                    auto GM = as_mat<S>(t.grad_ref(im), rows, c);
                    for (long i = 0; i < r; ++i)
                      GM.row(ids[static_cast<size_t>(i)]) += G.row(i);
                  });
}

// ---------------------------------------------------------------------------
// concat / slice

template <class S>
TensorT<S> concat_many(const std::vector<TensorT<S>>& xs, int axis) {
  if (xs.empty()) throw contract_error("concat_many: no inputs");
  auto& t = xs[0].tape();
  const Shape& s0 = xs[0].shape();
  long total = 0;
  std::vector<int> ins;
  for (const auto& x : xs) {
    detail::require(x.rank() == xs[0].rank(), "concat: rank mismatch");
    for (int i = 0; i < static_cast<int>(s0.size()); ++i)
      if (i != axis)
        detail::require(x.dim(i) == s0[static_cast<size_t>(i)],
                        "concat: non-axis dims must match");
    total += x.dim(axis);
    ins.push_back(x.id());
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = total;
  auto view = detail::axis_view(out_shape, axis);
  typename TapeT<S>::Array out(numel_of(out_shape));
  std::vector<long> sizes;
  long off = 0;
  for (const auto& x : xs) {
    const long nx = x.dim(axis);
    sizes.push_back(nx);
    const auto& xv = x.value();
    for (long o = 0; o < view.outer; ++o) {
      const long dst = (o * view.n + off) * view.inner;
      const long src = o * nx * view.inner;
      out.segment(dst, nx * view.inner) = xv.segment(src, nx * view.inner);
    }
    off += nx;
  }
  return t.append(out_shape, std::move(out), ins,
                  [ins, sizes, view](TapeT<S>& t, int self) {
                    const auto& g = t.node(self).grad;
                    long off = 0;
                    for (size_t k = 0; k < ins.size(); ++k) {
                      const long nx = sizes[k];
                      if (t.node(ins[k]).requires_grad) {
                        auto& gi = t.grad_ref(ins[k]);
                        for (long o = 0; o < view.outer; ++o) {
                          const long src = (o * view.n + off) * view.inner;
                          gi.segment(o * nx * view.inner, nx * view.inner) +=
                              g.segment(src, nx * view.inner);
                        }
                      }
                      off += nx;
                    }
                  });
}

template <class S>
TensorT<S> concat(const TensorT<S>& a, const TensorT<S>& b, int axis) {
  return concat_many<S>({a, b}, axis);
}

// Contiguous [begin, end) slice along `axis`.
template <class S>
TensorT<S> slice(const TensorT<S>& x, int axis, long begin, long end) {
  auto& t = x.tape();
  auto view = detail::axis_view(x.shape(), axis);
  if (begin < 0 || end > view.n || begin >= end)
    throw shape_error("slice: bad range [" + std::to_string(begin) + "," +
                      std::to_string(end) + ") for axis size " +
                      std::to_string(view.n));
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = end - begin;
  const long nx = end - begin;
  typename TapeT<S>::Array out(numel_of(out_shape));
  const auto& xv = x.value();
  for (long o = 0; o < view.outer; ++o)
    out.segment(o * nx * view.inner, nx * view.inner) =
        xv.segment((o * view.n + begin) * view.inner, nx * view.inner);
  int ix = x.id();
  return t.append(out_shape, std::move(out), {ix},
                  [ix, view, begin, nx](TapeT<S>& t, int self) {
                    const auto& g = t.node(self).grad;
                    auto& gi = t.grad_ref(ix);
                    for (long o = 0; o < view.outer; ++o)
                      gi.segment((o * view.n + begin) * view.inner, nx * view.inner) +=
                          g.segment(o * nx * view.inner, nx * view.inner);
                  });
}

template <class S>
TensorT<S> slice_rows(const TensorT<S>& x, long begin, long end) {
  return slice(x, 0, begin, end);
}

// ---------------------------------------------------------------------------
// reductions

template <class S>
TensorT<S> sum_all(const TensorT<S>& x) {
  auto& t = x.tape();
  typename TapeT<S>::Array v(1);
  v[0] = x.value().sum();
  int ix = x.id();
  return t.append({1}, std::move(v), {ix}, [ix](TapeT<S>& t, int self) {
    t.grad_ref(ix) += t.node(self).grad[0];
  });
}

template <class S>
TensorT<S> mean_all(const TensorT<S>& x) {
  auto& t = x.tape();
  const S inv = S(1) / static_cast<S>(x.numel());
  typename TapeT<S>::Array v(1);
  v[0] = x.value().sum() * inv;
  int ix = x.id();
  return t.append({1}, std::move(v), {ix}, [ix, inv](TapeT<S>& t, int self) {
    t.grad_ref(ix) += t.node(self).grad[0] * inv;
  });
}

template <class S>
TensorT<S> sum_over_axis(const TensorT<S>& x, int axis) {
  auto& t = x.tape();
  auto view = detail::axis_view(x.shape(), axis);
  Shape out_shape = detail::drop_axis(x.shape(), axis);
  typename TapeT<S>::Array out = TapeT<S>::Array::Zero(view.outer * view.inner);
  const auto& xv = x.value();
  for (long o = 0; o < view.outer; ++o)
    for (long j = 0; j < view.n; ++j)
      for (long i = 0; i < view.inner; ++i)
        out[o * view.inner + i] += xv[(o * view.n + j) * view.inner + i];
  int ix = x.id();
  return t.append(out_shape, std::move(out), {ix},
                  [ix, view](TapeT<S>& t, int self) {
                    const auto& g = t.node(self).grad;
                    auto& gi = t.grad_ref(ix);
                    for (long o = 0; o < view.outer; ++o)
                      for (long j = 0; j < view.n; ++j)
                        for (long i = 0; i < view.inner; ++i)
                          gi[(o * view.n + j) * view.inner + i] += g[o * view.inner + i];
                  });
}

template <class S>
TensorT<S> mean_over_axis(const TensorT<S>& x, int axis) {
  auto view = detail::axis_view(x.shape(), axis);
  return scale(sum_over_axis(x, axis), S(1) / static_cast<S>(view.n));
}

// Max along an axis; on ties the gradient routes to the lowest index.
template <class S>
TensorT<S> max_over_axis(const TensorT<S>& x, int axis) {
  auto& t = x.tape();
  auto view = detail::axis_view(x.shape(), axis);
  Shape out_shape = detail::drop_axis(x.shape(), axis);
  typename TapeT<S>::Array out(view.outer * view.inner);
  std::vector<long> arg(static_cast<size_t>(view.outer * view.inner));
  const auto& xv = x.value();
  for (long o = 0; o < view.outer; ++o)
    for (long i = 0; i < view.inner; ++i) {
      long best = 0;
      S bv = xv[(o * view.n) * view.inner + i];
      for (long j = 1; j < view.n; ++j) {
        S cand = xv[(o * view.n + j) * view.inner + i];
        if (cand > bv) {
          bv = cand;
          best = j;
        }
      }
      out[o * view.inner + i] = bv;
      arg[static_cast<size_t>(o * view.inner + i)] = best;
    }
  int ix = x.id();
  return t.append(out_shape, std::move(out), {ix},
                  [ix, view, arg = std::move(arg)](TapeT<S>& t, int self) {
                    const auto& g = t.node(self).grad;
                    auto& gi = t.grad_ref(ix);
                    for (long o = 0; o < view.outer; ++o)
                      for (long i = 0; i < view.inner; ++i) {
                        const long j = arg[static_cast<size_t>(o * view.inner + i)];
                        gi[(o * view.n + j) * view.inner + i] += g[o * view.inner + i];
                      }
                  });
}

// ---------------------------------------------------------------------------
// softmax / layer norm / losses

template <class S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
  auto& t = x.tape();
  auto view = detail::axis_view(x.shape(), axis);
  typename TapeT<S>::Array out(x.numel());
  const auto& xv = x.value();
  for (long o = 0; o < view.outer; ++o)
    for (long i = 0; i < view.inner; ++i) {
      const long base = o * view.n * view.inner + i;
      S m = xv[base];
      for (long j = 1; j < view.n; ++j)
        m = std::max(m, xv[base + j * view.inner]);
      S sum = S(0);
      for (long j = 0; j < view.n; ++j) {
        S e = std::exp(xv[base + j * view.inner] - m);
        out[base + j * view.inner] = e;
        sum += e;
      }
      for (long j = 0; j < view.n; ++j) out[base + j * view.inner] /= sum;
    }
  int ix = x.id();
  return t.append(x.shape(), std::move(out), {ix},
                  [ix, view](TapeT<S>& t, int self) {
                    const auto& y = t.node(self).value;
                    const auto& g = t.node(self).grad;
                    auto& gi = t.grad_ref(ix);
                    for (long o = 0; o < view.outer; ++o)
                      for (long i = 0; i < view.inner; ++i) {
                        const long base = o * view.n * view.inner + i;
                        S dot = S(0);
                        for (long j = 0; j < view.n; ++j)
                          dot += g[base + j * view.inner] * y[base + j * view.inner];
                        for (long j = 0; j < view.n; ++j)
                          gi[base + j * view.inner] +=
                              y[base + j * view.inner] * (g[base + j * view.inner] - dot);
                      }
                  });
}

// Row-wise layer norm with affine parameters gamma, beta of length cols.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma,
                      const TensorT<S>& beta, S eps = S(1e-5)) {
  auto& t = x.tape();
  detail::require(x.rank() == 2, "layer_norm: rank-2 input");
  const long r = x.rows(), c = x.cols();
  detail::require(gamma.numel() == c && beta.numel() == c,
                  "layer_norm: affine params must have length cols");
  typename TapeT<S>::Array out(r * c);
  typename TapeT<S>::Array inv_sigma(r);
  {
    auto X = as_mat<S>(x.value(), r, c);
    auto O = as_mat<S>(out, r, c);
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (long i = 0; i < r; ++i) {
      const S mu = X.row(i).mean();
      S var = S(0);
      for (long j = 0; j < c; ++j) {
        const S d = X(i, j) - mu;
        var += d * d;
      }
      var /= static_cast<S>(c);
      const S is = S(1) / std::sqrt(var + eps);
      inv_sigma[i] = is;
      for (long j = 0; j < c; ++j)
        O(i, j) = (X(i, j) - mu) * is * gv[j] + bv[j];
    }
  }
  int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return t.append(x.shape(), std::move(out), {ix, ig, ib},
                  [ix, ig, ib, r, c, eps, inv_sigma](TapeT<S>& t, int self) {
                    auto G = as_mat<S>(t.node(self).grad, r, c);
                    auto X = as_mat<S>(t.node(ix).value, r, c);
                    const auto& gv = t.node(ig).value;
                    for (long i = 0; i < r; ++i) {
                      const S mu = X.row(i).mean();
                      const S is = inv_sigma[i];
                      // xhat, gy = gamma .* dy per row
                      S mean_gy = S(0), mean_gy_xhat = S(0);
                      Eigen::Array<S, Eigen::Dynamic, 1> xhat(c), gy(c);
                      for (long j = 0; j < c; ++j) {
                        xhat[j] = (X(i, j) - mu) * is;
                        gy[j] = G(i, j) * gv[j];
                        mean_gy += gy[j];
                        mean_gy_xhat += gy[j] * xhat[j];
                      }
                      mean_gy /= static_cast<S>(c);
                      mean_gy_xhat /= static_cast<S>(c);
                      if (t.node(ix).requires_grad) {
                        auto GX = as_mat<S>(t.grad_ref(ix), r, c);
                        for (long j = 0; j < c; ++j)
                          GX(i, j) += (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) * is;
                      }
                      if (t.node(ig).requires_grad) {
                        auto& gg = t.grad_ref(ig);
                        for (long j = 0; j < c; ++j) gg[j] += G(i, j) * xhat[j];
                      }
                      if (t.node(ib).requires_grad) {
                        auto& gb = t.grad_ref(ib);
                        for (long j = 0; j < c; ++j) gb[j] += G(i, j);
                      }
                    }
                  });
}

enum class Reduction { Sum, Mean };

// Mean (or sum) of per-row negative log-softmax probability of the target id.
template <class S>
TensorT<S> cross_entropy_nll(const TensorT<S>& logits,
                             const std::vector<int>& targets,
                             Reduction red = Reduction::Mean) {
  auto& t = logits.tape();
  detail::require(logits.rank() == 2, "cross_entropy_nll: rank-2 logits");
  const long r = logits.rows(), v = logits.cols();
  if (static_cast<long>(targets.size()) != r)
    throw shape_error("cross_entropy_nll: one target per row required");
  for (int id : targets)
    if (id < 0 || id >= v)
      throw input_error("cross_entropy_nll: target " + std::to_string(id) +
                        " outside vocabulary of size " + std::to_string(v));
  typename TapeT<S>::Array out(1);
  {
    auto L = as_mat<S>(logits.value(), r, v);
    S total = S(0);
    for (long i = 0; i < r; ++i) {
      const S m = L.row(i).maxCoeff();
      S sum = S(0);
      for (long j = 0; j < v; ++j) sum += std::exp(L(i, j) - m);
      total += m + std::log(sum) - L(i, targets[static_cast<size_t>(i)]);
    }
    out[0] = red == Reduction::Mean ? total / static_cast<S>(r) : total;
  }
  int il = logits.id();
  const S w = red == Reduction::Mean ? S(1) / static_cast<S>(r) : S(1);
  return t.append({1}, std::move(out), {il},
                  [il, targets, r, v, w](TapeT<S>& t, int self) {
                    const S g = t.node(self).grad[0] * w;
                    auto L = as_mat<S>(t.node(il).value, r, v);
                    auto GL = as_mat<S>(t.grad_ref(il), r, v);
                    for (long i = 0; i < r; ++i) {
                      const S m = L.row(i).maxCoeff();
                      S sum = S(0);
                      for (long j = 0; j < v; ++j) sum += std::exp(L(i, j) - m);
                      for (long j = 0; j < v; ++j)
                        GL(i, j) += g * std::exp(L(i, j) - m) / sum;
                      GL(i, targets[static_cast<size_t>(i)]) -= g;
                    }
                  });
}

// Sum over rows of KL(q_row || a_row) for a sparse reference q. `a` is any
// tensor whose last axis has length Z; its flat rows cycle through the rows of
// q (row r of a pairs with q row r % q_rows), which lets one [T x Z] target
// serve an [H x T x Z] attention block. Attention mass below `eps` is floored
// inside the log.
template <class S>
TensorT<S> kl_vs_sparse_rows(const TensorT<S>& a,
                             const std::vector<S>& q,  // q_rows x Z, row-major
                             long q_rows, S eps = S(1e-12)) {
  auto& t = a.tape();
  detail::require(a.rank() >= 1, "kl_vs_sparse_rows: bad rank");
  const long z = a.dim(static_cast<int>(a.rank()) - 1);
  const long rows = a.numel() / z;
  if (q_rows <= 0 || static_cast<long>(q.size()) != q_rows * z)
    throw shape_error("kl_vs_sparse_rows: q size mismatch");
  if (rows % q_rows != 0)
    throw shape_error("kl_vs_sparse_rows: attention rows must be a multiple of q rows");
  typename TapeT<S>::Array out(1);
  const auto& av = a.value();
  S total = S(0);
  for (long r = 0; r < rows; ++r) {
    const long qb = (r % q_rows) * z;
    for (long j = 0; j < z; ++j) {
      const S qv = q[static_cast<size_t>(qb + j)];
      if (qv <= S(0)) continue;
      const S aj = std::max(av[r * z + j], eps);
      total += qv * (std::log(qv) - std::log(aj));
    }
  }
  out[0] = total;
  int ia = a.id();
  return t.append({1}, std::move(out), {ia},
                  [ia, q, q_rows, z, rows, eps](TapeT<S>& t, int self) {
                    const S g = t.node(self).grad[0];
                    const auto& av = t.node(ia).value;
                    auto& ga = t.grad_ref(ia);
                    for (long r = 0; r < rows; ++r) {
                      const long qb = (r % q_rows) * z;
                      for (long j = 0; j < z; ++j) {
                        const S qv = q[static_cast<size_t>(qb + j)];
                        if (qv <= S(0)) continue;
                        const S aj = av[r * z + j];
                        if (aj > eps) ga[r * z + j] -= g * qv / aj;
                      }
                    }
                  });
}

// scores[i, j] += bias[clamp(offset + i - j, 0, len-1)]; used for relative
// position biases where `offset` is the cache length and j indexes the full
// [cache | chunk] key axis.
template <class S>
TensorT<S> add_rel_bias(const TensorT<S>& scores, const TensorT<S>& bias,
                        long offset) {
  auto& t = detail::same_tape(scores, bias);
  detail::require(scores.rank() == 2 && bias.rank() == 1, "add_rel_bias: [T,K] + [R]");
  const long r = scores.rows(), k = scores.cols(), len = bias.dim(0);
  typename TapeT<S>::Array out(r * k);
  {
    auto Sc = as_mat<S>(scores.value(), r, k);
    auto O = as_mat<S>(out, r, k);
    const auto& bv = bias.value();
    for (long i = 0; i < r; ++i)
      for (long j = 0; j < k; ++j) {
        long d = offset + i - j;
        d = std::min(std::max(d, 0L), len - 1);
        O(i, j) = Sc(i, j) + bv[d];
      }
  }
  int is = scores.id(), ib = bias.id();
  return t.append(scores.shape(), std::move(out), {is, ib},
                  [is, ib, r, k, len, offset](TapeT<S>& t, int self) {
                    auto G = as_mat<S>(t.node(self).grad, r, k);
                    if (t.node(is).requires_grad) t.grad_ref(is) += t.node(self).grad;
                    if (t.node(ib).requires_grad) {
                      auto& gb = t.grad_ref(ib);
                      for (long i = 0; i < r; ++i)
                        for (long j = 0; j < k; ++j) {
                          long d = offset + i - j;
                          d = std::min(std::max(d, 0L), len - 1);
                          gb[d] += G(i, j);
                        }
                    }
                  });
}

}  // namespace mneme
