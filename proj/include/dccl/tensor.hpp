#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dccl/error.hpp"

namespace dccl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major array of doubles. Rank 0 is a scalar.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static Tensor full(Shape shape, double value) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor scalar(double v) { return Tensor({}, {v}); }

  static Tensor vector(std::vector<double> values) {
    auto n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(data));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of a scalar root, indexed by node id.
class Gradients {
 public:
  explicit Gradients(std::vector<std::optional<Tensor>> grads) : grads_(std::move(grads)) {}

  /// Null when the node is detached or does not influence the root.
  const Tensor* find(const Var& v) const {
    if (v.id() >= grads_.size() || !grads_[v.id()]) return nullptr;
    return &*grads_[v.id()];
  }
  const Tensor& at(const Var& v) const {
    const auto* g = find(v);
    if (!g) throw Error("no gradient recorded for node " + std::to_string(v.id()));
    return *g;
  }

 private:
  std::vector<std::optional<Tensor>> grads_;
};

/// Receives the input gradients produced by one backward rule.
class GradSink {
 public:
  GradSink(std::vector<std::optional<Tensor>>& grads, const std::vector<std::size_t>& inputs,
           const std::vector<bool>& wants)
      : grads_(grads), inputs_(inputs), wants_(wants) {}

  bool needs(std::size_t k) const { return wants_[k]; }

  void add(std::size_t k, Tensor g) {
    if (!wants_[k]) return;
    auto& slot = grads_[inputs_[k]];
    if (!slot) {
      slot = std::move(g);
      return;
    }
    auto dst = slot->data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

 private:
  std::vector<std::optional<Tensor>>& grads_;
  const std::vector<std::size_t>& inputs_;
  const std::vector<bool>& wants_;
};

/// Append-only record of primitive operations. Confined to one thread; not movable
/// because every Var points back at it.
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(Tensor value) { return push(std::move(value), true, {}, {}); }
  Var constant(Tensor value) { return push(std::move(value), false, {}, {}); }

  /// Records the output of a primitive. The rule is dropped when no input requires a gradient.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [this](std::size_t i) { return nodes_[i].requires_grad; });
    if (!any) return push(std::move(value), false, {}, {});
    return push(std::move(value), true, std::move(inputs), std::move(backward));
  }

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Reverse sweep from a scalar root. Visits each node at most once, in reverse recording order.
  Gradients backward(const Var& root) const {
    if (&root.tape() != this) throw Error("backward root belongs to a different tape");
    const auto& rv = nodes_[root.id()].value;
    if (rv.numel() != 1) throw ShapeError("backward root must be scalar, got " + shape_str(rv.shape()));
    std::vector<std::optional<Tensor>> grads(nodes_.size());
    if (!nodes_[root.id()].requires_grad) return Gradients(std::move(grads));
    grads[root.id()] = Tensor::full(rv.shape(), 1.0);
    std::vector<bool> wants;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      const auto& node = nodes_[id];
      if (!grads[id] || !node.backward) continue;
      wants.assign(node.inputs.size(), false);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) wants[k] = nodes_[node.inputs[k]].requires_grad;
      GradSink sink(grads, node.inputs, wants);
      // The rule may read grads[id] while writing input slots; inputs always precede id.
      node.backward(*grads[id], sink);
    }
    return Gradients(std::move(grads));
  }

 private:
  struct Node {
    Tensor value;
    bool requires_grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, std::vector<std::size_t> inputs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(inputs), std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline void same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw Error("operands recorded on different tapes");
}

/// Index maps from a broadcast output back into each operand.
struct Broadcast {
  Shape out;
  bool trivial = true;
  std::vector<std::size_t> ia, ib;
};

inline Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast plan;
  if (a == b) {
    plan.out = a;
    return plan;
  }
  plan.trivial = false;
  std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (rank - b.size()));
  plan.out.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    plan.out[d] = std::max(pa[d], pb[d]);
  }
  auto strides = [rank](const Shape& s) {
    std::vector<std::size_t> st(rank, 0);
    std::size_t acc = 1;
    for (std::size_t d = rank; d-- > 0;) {
      st[d] = s[d] == 1 ? 0 : acc;
      acc *= s[d];
    }
    return st;
  };
  auto sa = strides(pa), sb = strides(pb);
  std::size_t n = shape_numel(plan.out);
  plan.ia.resize(n);
  plan.ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t oa = 0, ob = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      oa += idx[d] * sa[d];
      ob += idx[d] * sb[d];
    }
    plan.ia[k] = oa;
    plan.ib[k] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < plan.out[d]) break;
      idx[d] = 0;
    }
  }
  return plan;
}

/// Sums an output-shaped gradient back into an operand's shape.
inline Tensor reduce_to(const Tensor& g, const Shape& target, const std::vector<std::size_t>& index,
                        bool trivial) {
  if (trivial) return g;
  Tensor r = Tensor::zeros(target);
  for (std::size_t k = 0; k < g.numel(); ++k) r[index[k]] += g[k];
  return r;
}

template <typename Fwd, typename Da, typename Db>
Var binary(const Var& a, const Var& b, const char* op, Fwd fwd, Da da, Db db) {
  same_tape(a, b);
  auto plan = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), op));
  const auto& av = a.value();
  const auto& bv = b.value();
  std::size_t n = shape_numel(plan->out);
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    out[k] = plan->trivial ? fwd(av[k], bv[k]) : fwd(av[plan->ia[k]], bv[plan->ib[k]]);
  }
  Tape* t = &a.tape();
  std::size_t ia = a.id(), ib = b.id();
  return t->record(Tensor(plan->out, std::move(out)), {ia, ib},
                   [t, ia, ib, plan, da, db](const Tensor& g, GradSink& sink) {
                     const auto& av = t->value(ia);
                     const auto& bv = t->value(ib);
                     std::size_t n = g.numel();
                     auto ai = [&](std::size_t k) { return plan->trivial ? k : plan->ia[k]; };
                     auto bi = [&](std::size_t k) { return plan->trivial ? k : plan->ib[k]; };
                     if (sink.needs(0)) {
                       Tensor ga(plan->out, std::vector<double>(n));
                       for (std::size_t k = 0; k < n; ++k) ga[k] = g[k] * da(av[ai(k)], bv[bi(k)]);
                       sink.add(0, reduce_to(ga, av.shape(), plan->ia, plan->trivial));
                     }
                     if (sink.needs(1)) {
                       Tensor gb(plan->out, std::vector<double>(n));
                       for (std::size_t k = 0; k < n; ++k) gb[k] = g[k] * db(av[ai(k)], bv[bi(k)]);
                       sink.add(1, reduce_to(gb, bv.shape(), plan->ib, plan->trivial));
                     }
                   });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with broadcasting.

inline Var add(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var div(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

namespace detail {

/// Unary op whose derivative is expressed through input x and output y.
template <typename Fwd, typename Deriv>
Var map(const Var& a, Fwd fwd, Deriv deriv) {
  const auto& av = a.value();
  std::vector<double> out(av.numel());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = fwd(av[k]);
  Tape* t = &a.tape();
  std::size_t ia = a.id();
  std::size_t self = t->size();
  return t->record(Tensor(av.shape(), std::move(out)), {ia}, [t, ia, self, deriv](const Tensor& g, GradSink& sink) {
    const auto& x = t->value(ia);
    const auto& y = t->value(self);
    Tensor r(x.shape(), std::vector<double>(x.numel()));
    for (std::size_t k = 0; k < r.numel(); ++k) r[k] = g[k] * deriv(x[k], y[k]);
    sink.add(0, std::move(r));
  });
}

}  // namespace detail

inline Var scale(const Var& a, double c) {
  return detail::map(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::map(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var square(const Var& a) {
  return detail::map(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var exp(const Var& a) {
  return detail::map(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw DegenerateInput("log of non-positive value " + std::to_string(v));
  }
  return detail::map(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(const Var& a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw DegenerateInput("sqrt of non-positive value " + std::to_string(v));
  }
  return detail::map(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

inline double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid_value(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
/// Inverse of softplus for y > 0.
inline double softplus_inverse(double y) { return y + std::log(-std::expm1(-y)); }

inline Var softplus(const Var& a) {
  return detail::map(a, softplus_value, [](double x, double) { return sigmoid_value(x); });
}

inline Var relu(const Var& a) {
  return detail::map(a, [](double x) { return x > 0.0 ? x : 0.0; },
                     [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

// ---------------------------------------------------------------------------
// Linear algebra and structural ops on matrices.

namespace detail {
inline void require_matrix(const Var& a, const char* op) {
  if (a.value().rank() != 2) {
    throw ShapeError(std::string(op) + " expects a matrix, got " + shape_str(a.shape()));
  }
}
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const auto& A = a.value();
  const auto& B = b.value();
  std::size_t n = A.shape()[0], k = A.shape()[1], m = B.shape()[1];
  if (B.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double aip = A[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += aip * B[p * m + j];
    }
  }
  Tape* t = &a.tape();
  std::size_t ia = a.id(), ib = b.id();
  return t->record(Tensor({n, m}, std::move(out)), {ia, ib}, [t, ia, ib, n, k, m](const Tensor& g, GradSink& sink) {
    const auto& A = t->value(ia);
    const auto& B = t->value(ib);
    if (sink.needs(0)) {
      // dA = G B^T
      Tensor ga({n, k}, std::vector<double>(n * k, 0.0));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * B[p * m + j];
          ga[i * k + p] = s;
        }
      sink.add(0, std::move(ga));
    }
    if (sink.needs(1)) {
      // dB = A^T G
      Tensor gb({k, m}, std::vector<double>(k * m, 0.0));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double aip = A[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += aip * g[i * m + j];
        }
      sink.add(1, std::move(gb));
    }
  });
}

inline Var transpose(const Var& a) {
  detail::require_matrix(a, "transpose");
  const auto& A = a.value();
  std::size_t r = A.shape()[0], c = A.shape()[1];
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  Tape* t = &a.tape();
  return t->record(Tensor({c, r}, std::move(out)), {a.id()}, [r, c](const Tensor& g, GradSink& sink) {
    Tensor ga({r, c}, std::vector<double>(r * c));
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = g[j * r + i];
    sink.add(0, std::move(ga));
  });
}

/// Rows [begin, begin + count) of a matrix.
inline Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  detail::require_matrix(a, "slice_rows");
  const auto& A = a.value();
  std::size_t r = A.shape()[0], c = A.shape()[1];
  if (count == 0 || begin + count > r) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_str(A.shape()));
  }
  std::vector<double> out(A.data().begin() + begin * c, A.data().begin() + (begin + count) * c);
  Tape* t = &a.tape();
  return t->record(Tensor({count, c}, std::move(out)), {a.id()}, [r, c, begin](const Tensor& g, GradSink& sink) {
    Tensor ga = Tensor::zeros({r, c});
    std::copy(g.data().begin(), g.data().end(), ga.data().begin() + begin * c);
    sink.add(0, std::move(ga));
  });
}

inline Var concat_rows(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::require_matrix(a, "concat_rows");
  detail::require_matrix(b, "concat_rows");
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape()[1] != B.shape()[1]) {
    throw ShapeError("concat_rows: column counts differ, " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  }
  std::size_t ra = A.shape()[0], rb = B.shape()[0], c = A.shape()[1];
  std::vector<double> out(A.data().begin(), A.data().end());
  out.insert(out.end(), B.data().begin(), B.data().end());
  Tape* t = &a.tape();
  return t->record(Tensor({ra + rb, c}, std::move(out)), {a.id(), b.id()}, [ra, rb, c](const Tensor& g, GradSink& sink) {
    if (sink.needs(0)) sink.add(0, Tensor({ra, c}, std::vector<double>(g.data().begin(), g.data().begin() + ra * c)));
    if (sink.needs(1)) sink.add(1, Tensor({rb, c}, std::vector<double>(g.data().begin() + ra * c, g.data().end())));
  });
}

inline Var concat_cols(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::require_matrix(a, "concat_cols");
  detail::require_matrix(b, "concat_cols");
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape()[0] != B.shape()[0]) {
    throw ShapeError("concat_cols: row counts differ, " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  }
  std::size_t r = A.shape()[0], ca = A.shape()[1], cb = B.shape()[1], c = ca + cb;
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(A.data().begin() + i * ca, ca, out.begin() + i * c);
    std::copy_n(B.data().begin() + i * cb, cb, out.begin() + i * c + ca);
  }
  Tape* t = &a.tape();
  return t->record(Tensor({r, c}, std::move(out)), {a.id(), b.id()}, [r, ca, cb, c](const Tensor& g, GradSink& sink) {
    if (sink.needs(0)) {
      Tensor ga({r, ca}, std::vector<double>(r * ca));
      for (std::size_t i = 0; i < r; ++i) std::copy_n(g.data().begin() + i * c, ca, ga.data().begin() + i * ca);
      sink.add(0, std::move(ga));
    }
    if (sink.needs(1)) {
      Tensor gb({r, cb}, std::vector<double>(r * cb));
      for (std::size_t i = 0; i < r; ++i) std::copy_n(g.data().begin() + i * c + ca, cb, gb.data().begin() + i * cb);
      sink.add(1, std::move(gb));
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions.

/// Sum of all elements, as a scalar.
inline Var sum(const Var& a) {
  const auto& A = a.value();
  double s = 0.0;
  for (double v : A.data()) s += v;
  Shape shape = A.shape();
  return a.tape().record(Tensor::scalar(s), {a.id()}, [shape](const Tensor& g, GradSink& sink) {
    sink.add(0, Tensor::full(shape, g[0]));
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

/// Sum over one axis of a matrix, keeping it as a size-1 dimension.
inline Var sum_axis(const Var& a, std::size_t axis) {
  detail::require_matrix(a, "sum_axis");
  if (axis > 1) throw ShapeError("sum_axis: axis must be 0 or 1");
  const auto& A = a.value();
  std::size_t r = A.shape()[0], c = A.shape()[1];
  Shape out_shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += A[i * c + j];
  return a.tape().record(std::move(out), {a.id()}, [r, c, axis](const Tensor& g, GradSink& sink) {
    Tensor ga({r, c}, std::vector<double>(r * c));
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = g[axis == 0 ? j : i];
    sink.add(0, std::move(ga));
  });
}

inline Var mean_axis(const Var& a, std::size_t axis) {
  std::size_t count = a.value().shape().at(axis);
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(count));
}

/// Row-wise dot products of two equally shaped matrices, as an n x 1 column.
inline Var row_dot(const Var& a, const Var& b) { return sum_axis(mul(a, b), 1); }

namespace detail {
/// Views any tensor of rank <= 2 as (rows, cols) along its last axis.
inline std::pair<std::size_t, std::size_t> row_view(const Tensor& t) {
  if (t.rank() == 0) return {1, 1};
  if (t.rank() == 1) return {1, t.shape()[0]};
  if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
  throw ShapeError("expected rank <= 2, got " + shape_str(t.shape()));
}
}  // namespace detail

inline constexpr double kNormFloor = 1e-12;

/// Divides each row (the whole vector for rank 1) by its Euclidean norm.
inline Var l2_normalize(const Var& a) {
  const auto& A = a.value();
  auto [r, c] = detail::row_view(A);
  std::vector<double> out(A.numel());
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += A[i * c + j] * A[i * c + j];
    double nrm = std::sqrt(s);
    if (!(nrm >= kNormFloor)) {
      throw DegenerateInput("l2_normalize: row " + std::to_string(i) + " has norm below 1e-12");
    }
    norms[i] = nrm;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = A[i * c + j] / nrm;
  }
  Tape* t = &a.tape();
  std::size_t self = t->size();
  return t->record(Tensor(A.shape(), std::move(out)), {a.id()},
                   [t, self, r, c, norms = std::move(norms)](const Tensor& g, GradSink& sink) {
                     const auto& y = t->value(self);
                     Tensor ga(y.shape(), std::vector<double>(y.numel()));
                     for (std::size_t i = 0; i < r; ++i) {
                       double yg = 0.0;
                       for (std::size_t j = 0; j < c; ++j) yg += y[i * c + j] * g[i * c + j];
                       for (std::size_t j = 0; j < c; ++j) {
                         ga[i * c + j] = (g[i * c + j] - y[i * c + j] * yg) / norms[i];
                       }
                     }
                     sink.add(0, std::move(ga));
                   });
}

/// Max-stabilized log-sum-exp along the last axis over entries where mask is nonzero.
/// Output keeps the reduced axis: [n] -> [1], [r x c] -> [r x 1].
inline Var masked_log_sum_exp(const Var& a, const std::vector<char>& mask) {
  const auto& A = a.value();
  auto [r, c] = detail::row_view(A);
  if (mask.size() != A.numel()) throw ShapeError("log_sum_exp: mask size does not match " + shape_str(A.shape()));
  std::vector<double> out(r);
  std::vector<double> weights(A.numel(), 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < c; ++j)
      if (mask[i * c + j]) mx = std::max(mx, A[i * c + j]);
    if (mx == -INFINITY) throw Error("log_sum_exp: row " + std::to_string(i) + " has no unmasked entries");
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (mask[i * c + j]) s += std::exp(A[i * c + j] - mx);
    out[i] = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j)
      if (mask[i * c + j]) weights[i * c + j] = std::exp(A[i * c + j] - out[i]);
  }
  Shape out_shape = A.rank() == 2 ? Shape{r, 1} : Shape{1};
  Shape in_shape = A.shape();
  return a.tape().record(Tensor(out_shape, std::move(out)), {a.id()},
                         [in_shape, r, c, weights = std::move(weights)](const Tensor& g, GradSink& sink) {
                           Tensor ga(in_shape, std::vector<double>(r * c));
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = g[i] * weights[i * c + j];
                           sink.add(0, std::move(ga));
                         });
}

inline Var log_sum_exp(const Var& a) { return masked_log_sum_exp(a, std::vector<char>(a.value().numel(), 1)); }

}  // namespace dccl
