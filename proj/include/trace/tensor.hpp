#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "trace/errors.hpp"

namespace trace {

// ---------------------------------------------------------------------------
// Dense row-major tensor. Storage is templated so the same operator code can
// run in float (training/storage precision) and double (used by the
// finite-difference gradient checker, which needs 64-bit forward evaluation).
// ---------------------------------------------------------------------------

inline std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int> shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}

  TensorT(std::vector<int> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  static TensorT full(std::vector<int> shape, T v) {
    TensorT t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  T& at(int i, int j) { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
  T at(int i, int j) const { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
  T& at(int c, int h, int w) {
    return data_[(static_cast<std::size_t>(c) * dim(1) + h) * dim(2) + w];
  }
  T at(int c, int h, int w) const {
    return data_[(static_cast<std::size_t>(c) * dim(1) + h) * dim(2) + w];
  }
  T& at4(int a, int b, int c, int d) {
    return data_[((static_cast<std::size_t>(a) * dim(1) + b) * dim(2) + c) * dim(3) + d];
  }
  T at4(int a, int b, int c, int d) const {
    return data_[((static_cast<std::size_t>(a) * dim(1) + b) * dim(2) + c) * dim(3) + d];
  }

  bool is_scalar() const { return data_.size() == 1; }
  T scalar_value() const {
    if (!is_scalar()) throw UsageError("expected scalar tensor, got " + shape_string(shape_));
    return data_[0];
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return TensorT<U>(shape_, std::move(out));
  }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;

// A named, trainable value. Lives outside any graph; graphs bind it as a
// leaf and accumulate into `grad` during backward.
template <typename T>
struct ParameterT {
  std::string name;
  TensorT<T> value;
  TensorT<T> grad;
  bool frozen = false;

  ParameterT() = default;
  ParameterT(std::string n, TensorT<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { std::fill(grad.data(), grad.data() + grad.size(), T(0)); }
};

// Running statistics for batch normalization; updated in training mode,
// read in eval mode. Not optimizer-visible.
template <typename T>
struct BnStatsT {
  TensorT<T> running_mean;
  TensorT<T> running_var;

  BnStatsT() = default;
  explicit BnStatsT(int channels)
      : running_mean({channels}), running_var(TensorT<T>::full({channels}, T(1))) {}
};

// ---------------------------------------------------------------------------
// Define-by-run gradient tape. Each operation validates shapes, computes its
// value eagerly, and records a closure that propagates gradients to its
// inputs. The tape is an append-only ordered record, so reverse iteration
// visits every node after all of its consumers. A graph is confined to one
// thread; distinct graphs may run concurrently.
// ---------------------------------------------------------------------------

template <typename T>
class GraphT {
 public:
  using Var = std::uint32_t;

  explicit GraphT(bool record_gradients = true) : record_(record_gradients) {}

  GraphT(const GraphT&) = delete;
  GraphT& operator=(const GraphT&) = delete;

  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }

  const TensorT<T>& value(Var id) const { return node(id).value; }

  const TensorT<T>& grad(Var id) const {
    const Node& n = node(id);
    if (n.grad.empty()) {
      throw UsageError("gradient not available for this node (run backward on a connected scalar loss)");
    }
    return n.grad;
  }

  // --- leaves -------------------------------------------------------------

  Var input(TensorT<T> v) { return push(std::move(v), false, nullptr, {}); }

  Var param(ParameterT<T>& p) {
    if (!record_) return input(p.value);
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return it->second;
    Var id = push(p.value, true, &p, {});
    param_ids_.emplace(&p, id);
    return id;
  }

  // Fresh constant leaf with the same value; cuts the gradient path.
  Var detach(Var a) { return input(node(a).value); }

  // --- elementwise --------------------------------------------------------

  Var add(Var a, Var b) {
    check_same_shape("add", a, b);
    TensorT<T> out = node(a).value;
    const TensorT<T>& vb = node(b).value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return push(std::move(out), any_grad({a, b}), nullptr, [a, b](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      g.accumulate(a, gy);
      g.accumulate(b, gy);
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape("sub", a, b);
    TensorT<T> out = node(a).value;
    const TensorT<T>& vb = node(b).value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return push(std::move(out), any_grad({a, b}), nullptr, [a, b](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      g.accumulate(a, gy);
      if (g.wants_grad(b)) {
        TensorT<T>& gb = g.grad_buf(b);
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    check_same_shape("mul", a, b);
    TensorT<T> out = node(a).value;
    const TensorT<T>& vb = node(b).value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return push(std::move(out), any_grad({a, b}), nullptr, [a, b](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      const TensorT<T>& va = g.node(a).value;
      const TensorT<T>& vb2 = g.node(b).value;
      if (g.wants_grad(a)) {
        TensorT<T>& ga = g.grad_buf(a);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * vb2[i];
      }
      if (g.wants_grad(b)) {
        TensorT<T>& gb = g.grad_buf(b);
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * va[i];
      }
    });
  }

  // Elementwise sum of several same-shape tensors.
  Var add_n(const std::vector<Var>& xs) {
    if (xs.empty()) throw UsageError("add_n: empty operand list");
    TensorT<T> out = node(xs[0]).value;
    for (std::size_t k = 1; k < xs.size(); ++k) {
      check_same_shape("add_n", xs[0], xs[k]);
      const TensorT<T>& v = node(xs[k]).value;
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    }
    bool rg = false;
    for (Var x : xs) rg = rg || node(x).requires_grad;
    std::vector<Var> ops = xs;
    return push(std::move(out), rg, nullptr, [ops](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      for (Var x : ops) g.accumulate(x, gy);
    });
  }

  Var scale(Var a, double c) {
    TensorT<T> out = node(a).value;
    const T tc = static_cast<T>(c);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= tc;
    return push(std::move(out), any_grad({a}), nullptr, [a, tc](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      TensorT<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += tc * gy[i];
    });
  }

  Var offset(Var a, double c) {
    TensorT<T> out = node(a).value;
    const T tc = static_cast<T>(c);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += tc;
    return push(std::move(out), any_grad({a}), nullptr, [a](GraphT& g, Var id) {
      g.accumulate(a, g.node(id).grad);
    });
  }

  // Broadcast multiply by a learnable scalar ([1] tensor).
  Var mul_scalar_var(Var a, Var s) {
    const TensorT<T>& vs = node(s).value;
    if (!vs.is_scalar()) {
      throw ShapeError("mul_scalar_var: scalar operand must have shape [1], got " +
                       shape_string(vs.shape()));
    }
    TensorT<T> out = node(a).value;
    const T sv = vs[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= sv;
    return push(std::move(out), any_grad({a, s}), nullptr, [a, s](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      const TensorT<T>& va = g.node(a).value;
      const T sv2 = g.node(s).value[0];
      if (g.wants_grad(a)) {
        TensorT<T>& ga = g.grad_buf(a);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * sv2;
      }
      if (g.wants_grad(s)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < gy.size(); ++i)
          acc += static_cast<double>(gy[i]) * static_cast<double>(va[i]);
        g.grad_buf(s)[0] += static_cast<T>(acc);
      }
    });
  }

  // --- structural ---------------------------------------------------------

  Var reshape(Var a, std::vector<int> shape) {
    const TensorT<T>& va = node(a).value;
    if (shape_numel(shape) != va.size()) {
      throw ShapeError("reshape: cannot view " + shape_string(va.shape()) + " as " + shape_string(shape));
    }
    TensorT<T> out(std::move(shape));
    std::copy(va.data(), va.data() + va.size(), out.data());
    return push(std::move(out), any_grad({a}), nullptr, [a](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      TensorT<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    });
  }

  Var transpose(Var a) {
    const TensorT<T>& va = node(a).value;
    if (va.rank() != 2) throw ShapeError("transpose: expected rank-2, got " + shape_string(va.shape()));
    const int m = va.dim(0), n = va.dim(1);
    TensorT<T> out({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at(j, i) = va.at(i, j);
    return push(std::move(out), any_grad({a}), nullptr, [a, m, n](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      TensorT<T>& ga = g.grad_buf(a);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga.at(i, j) += gy.at(j, i);
    });
  }

  Var concat_vec(const std::vector<Var>& xs) {
    if (xs.empty()) throw UsageError("concat_vec: empty operand list");
    int total = 0;
    for (Var x : xs) {
      if (node(x).value.rank() != 1) {
        throw ShapeError("concat_vec: expected rank-1 operands, got " + shape_string(node(x).value.shape()));
      }
      total += node(x).value.dim(0);
    }
    TensorT<T> out({total});
    std::size_t off = 0;
    for (Var x : xs) {
      const TensorT<T>& v = node(x).value;
      std::copy(v.data(), v.data() + v.size(), out.data() + off);
      off += v.size();
    }
    bool rg = false;
    for (Var x : xs) rg = rg || node(x).requires_grad;
    std::vector<Var> ops = xs;
    return push(std::move(out), rg, nullptr, [ops](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      std::size_t off2 = 0;
      for (Var x : ops) {
        const std::size_t n = g.node(x).value.size();
        if (g.wants_grad(x)) {
          TensorT<T>& gx = g.grad_buf(x);
          for (std::size_t i = 0; i < n; ++i) gx[i] += gy[off2 + i];
        }
        off2 += n;
      }
    });
  }

  // Stack B rank-1 vectors of equal length into a [B x C] matrix.
  Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw UsageError("stack_rows: empty operand list");
    const int c = node(rows[0]).value.dim(0);
    for (Var r : rows) {
      if (node(r).value.rank() != 1 || node(r).value.dim(0) != c) {
        throw ShapeError("stack_rows: all rows must be rank-1 of length " + std::to_string(c) +
                         ", got " + shape_string(node(r).value.shape()));
      }
    }
    const int b = static_cast<int>(rows.size());
    TensorT<T> out({b, c});
    for (int i = 0; i < b; ++i) {
      const TensorT<T>& v = node(rows[static_cast<std::size_t>(i)]).value;
      std::copy(v.data(), v.data() + v.size(), out.data() + static_cast<std::size_t>(i) * c);
    }
    bool rg = false;
    for (Var r : rows) rg = rg || node(r).requires_grad;
    std::vector<Var> ops = rows;
    return push(std::move(out), rg, nullptr, [ops, c](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      for (std::size_t i = 0; i < ops.size(); ++i) {
        if (!g.wants_grad(ops[i])) continue;
        TensorT<T>& gr = g.grad_buf(ops[i]);
        const T* src = gy.data() + i * static_cast<std::size_t>(c);
        for (int j = 0; j < c; ++j) gr[static_cast<std::size_t>(j)] += src[j];
      }
    });
  }

  Var slice_row(Var a, int row) {
    const TensorT<T>& va = node(a).value;
    if (va.rank() != 2) throw ShapeError("slice_row: expected rank-2, got " + shape_string(va.shape()));
    if (row < 0 || row >= va.dim(0)) throw UsageError("slice_row: row index out of range");
    const int c = va.dim(1);
    TensorT<T> out({c});
    std::copy(va.data() + static_cast<std::size_t>(row) * c, va.data() + (static_cast<std::size_t>(row) + 1) * c,
              out.data());
    return push(std::move(out), any_grad({a}), nullptr, [a, row, c](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      TensorT<T>& ga = g.grad_buf(a);
      T* dst = ga.data() + static_cast<std::size_t>(row) * c;
      for (int j = 0; j < c; ++j) dst[j] += gy[static_cast<std::size_t>(j)];
    });
  }

  // Embedding-style lookup of one row of a [V x D] matrix.
  Var select_row(Var table, int row) { return slice_row(table, row); }

  // --- reductions (64-bit accumulation) ------------------------------------

  Var sum(Var a) {
    const TensorT<T>& va = node(a).value;
    double acc = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) acc += static_cast<double>(va[i]);
    return push(TensorT<T>::scalar(static_cast<T>(acc)), any_grad({a}), nullptr, [a](GraphT& g, Var id) {
      const T gy = g.node(id).grad[0];
      TensorT<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy;
    });
  }

  Var mean(Var a) {
    const TensorT<T>& va = node(a).value;
    double acc = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) acc += static_cast<double>(va[i]);
    const double inv = 1.0 / static_cast<double>(va.size());
    return push(TensorT<T>::scalar(static_cast<T>(acc * inv)), any_grad({a}), nullptr,
                [a, inv](GraphT& g, Var id) {
                  const T gy = static_cast<T>(static_cast<double>(g.node(id).grad[0]) * inv);
                  TensorT<T>& ga = g.grad_buf(a);
                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy;
                });
  }

  Var l2_norm(Var a) {
    const TensorT<T>& va = node(a).value;
    double acc = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) {
      const double v = static_cast<double>(va[i]);
      acc += v * v;
    }
    const double norm = std::sqrt(acc);
    return push(TensorT<T>::scalar(static_cast<T>(norm)), any_grad({a}), nullptr, [a](GraphT& g, Var id) {
      const double n = static_cast<double>(g.node(id).value[0]);
      if (n <= 0.0) return;  // subgradient 0 at the origin
      const double gy = static_cast<double>(g.node(id).grad[0]);
      const TensorT<T>& va2 = g.node(a).value;
      TensorT<T>& ga = g.grad_buf(a);
      const double s = gy / n;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += static_cast<T>(s * static_cast<double>(va2[i]));
    });
  }

  static constexpr double kNormalizeEps = 1e-12;

  Var normalize(Var a) {
    const TensorT<T>& va = node(a).value;
    double acc = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) {
      const double v = static_cast<double>(va[i]);
      acc += v * v;
    }
    const double norm = std::sqrt(acc);
    if (norm <= kNormalizeEps) {
      throw DegenerateInputError("normalize: vector norm " + std::to_string(norm) +
                                 " is below 1e-12; refusing to divide");
    }
    TensorT<T> out = va;
    const T inv = static_cast<T>(1.0 / norm);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= inv;
    return push(std::move(out), any_grad({a}), nullptr, [a, norm](GraphT& g, Var id) {
      // d/dx (x/|x|) = (I - y y^T)/|x|, with y the normalized output.
      const TensorT<T>& y = g.node(id).value;
      const TensorT<T>& gy = g.node(id).grad;
      double dot = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) dot += static_cast<double>(gy[i]) * static_cast<double>(y[i]);
      TensorT<T>& ga = g.grad_buf(a);
      const double inv_n = 1.0 / norm;
      for (std::size_t i = 0; i < y.size(); ++i) {
        ga[i] += static_cast<T>((static_cast<double>(gy[i]) - dot * static_cast<double>(y[i])) * inv_n);
      }
    });
  }

  // --- unary math -----------------------------------------------------------

  Var exp(Var a) {
    TensorT<T> out = node(a).value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
    return push(std::move(out), any_grad({a}), nullptr, [a](GraphT& g, Var id) {
      const TensorT<T>& y = g.node(id).value;
      const TensorT<T>& gy = g.node(id).grad;
      TensorT<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < y.size(); ++i) ga[i] += gy[i] * y[i];
    });
  }

  Var log(Var a) {
    TensorT<T> out = node(a).value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
    return push(std::move(out), any_grad({a}), nullptr, [a](GraphT& g, Var id) {
      const TensorT<T>& va = g.node(a).value;
      const TensorT<T>& gy = g.node(id).grad;
      TensorT<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < va.size(); ++i) ga[i] += gy[i] / va[i];
    });
  }

  Var sigmoid(Var a) {
    TensorT<T> out = node(a).value;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const T x = out[i];
      out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
    }
    return push(std::move(out), any_grad({a}), nullptr, [a](GraphT& g, Var id) {
      const TensorT<T>& y = g.node(id).value;
      const TensorT<T>& gy = g.node(id).grad;
      TensorT<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < y.size(); ++i) ga[i] += gy[i] * y[i] * (T(1) - y[i]);
    });
  }

  Var tanh(Var a) {
    TensorT<T> out = node(a).value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
    return push(std::move(out), any_grad({a}), nullptr, [a](GraphT& g, Var id) {
      const TensorT<T>& y = g.node(id).value;
      const TensorT<T>& gy = g.node(id).grad;
      TensorT<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < y.size(); ++i) ga[i] += gy[i] * (T(1) - y[i] * y[i]);
    });
  }

  Var relu(Var a) {
    TensorT<T> out = node(a).value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > T(0) ? out[i] : T(0);
    return push(std::move(out), any_grad({a}), nullptr, [a](GraphT& g, Var id) {
      const TensorT<T>& va = g.node(a).value;
      const TensorT<T>& gy = g.node(id).grad;
      TensorT<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < va.size(); ++i) {
        if (va[i] > T(0)) ga[i] += gy[i];
      }
    });
  }

  // log(1 + e^x), overflow-safe in both directions.
  Var softplus(Var a) {
    TensorT<T> out = node(a).value;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const T x = out[i];
      out[i] = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    }
    return push(std::move(out), any_grad({a}), nullptr, [a](GraphT& g, Var id) {
      const TensorT<T>& va = g.node(a).value;
      const TensorT<T>& gy = g.node(id).grad;
      TensorT<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < va.size(); ++i) {
        const T x = va[i];
        const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
        ga[i] += gy[i] * s;
      }
    });
  }

  // Elementwise x^p for a fixed exponent. p == 1 is an exact pass-through.
  // For fractional p the inputs are expected nonnegative; the derivative at
  // exactly zero uses the subgradient 0.
  Var pow_scalar(Var a, double p) {
    const TensorT<T>& va = node(a).value;
    if (p == 1.0) {
      TensorT<T> out = va;
      return push(std::move(out), any_grad({a}), nullptr, [a](GraphT& g, Var id) {
        g.accumulate(a, g.node(id).grad);
      });
    }
    TensorT<T> out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(out[i], static_cast<T>(p));
    return push(std::move(out), any_grad({a}), nullptr, [a, p](GraphT& g, Var id) {
      const TensorT<T>& va2 = g.node(a).value;
      const TensorT<T>& gy = g.node(id).grad;
      TensorT<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < va2.size(); ++i) {
        const double x = static_cast<double>(va2[i]);
        if (x == 0.0 && p < 1.0) continue;
        ga[i] += static_cast<T>(static_cast<double>(gy[i]) * p * std::pow(x, p - 1.0));
      }
    });
  }

  Var clamp(Var a, double lo, double hi) {
    if (!(lo < hi)) throw ParamError("clamp: lo must be < hi");
    TensorT<T> out = node(a).value;
    const T tlo = static_cast<T>(lo), thi = static_cast<T>(hi);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(out[i], tlo), thi);
    return push(std::move(out), any_grad({a}), nullptr, [a, tlo, thi](GraphT& g, Var id) {
      const TensorT<T>& va = g.node(a).value;
      const TensorT<T>& gy = g.node(id).grad;
      TensorT<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < va.size(); ++i) {
        if (va[i] > tlo && va[i] < thi) ga[i] += gy[i];
      }
    });
  }

  // --- linear algebra -------------------------------------------------------

  Var matmul(Var a, Var b) {
    const TensorT<T>& va = node(a).value;
    const TensorT<T>& vb = node(b).value;
    if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0)) {
      throw ShapeError("matmul: incompatible shapes " + shape_string(va.shape()) + " and " +
                       shape_string(vb.shape()));
    }
    const int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
    TensorT<T> out({m, n});
    matmul_accum(va.data(), vb.data(), out.data(), m, k, n);
    return push(std::move(out), any_grad({a, b}), nullptr, [a, b, m, k, n](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      const TensorT<T>& va2 = g.node(a).value;
      const TensorT<T>& vb2 = g.node(b).value;
      if (g.wants_grad(a)) {
        // da[i][p] += sum_j gy[i][j] * b[p][j]
        TensorT<T>& ga = g.grad_buf(a);
        for (int i = 0; i < m; ++i) {
          const T* gr = gy.data() + static_cast<std::size_t>(i) * n;
          T* dst = ga.data() + static_cast<std::size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const T* br = vb2.data() + static_cast<std::size_t>(p) * n;
            T acc = T(0);
            for (int j = 0; j < n; ++j) acc += gr[j] * br[j];
            dst[p] += acc;
          }
        }
      }
      if (g.wants_grad(b)) {
        // db[p][j] += sum_i a[i][p] * gy[i][j]
        TensorT<T>& gb = g.grad_buf(b);
        for (int i = 0; i < m; ++i) {
          const T* ar = va2.data() + static_cast<std::size_t>(i) * k;
          const T* gr = gy.data() + static_cast<std::size_t>(i) * n;
          for (int p = 0; p < k; ++p) {
            const T aip = ar[p];
            T* dst = gb.data() + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) dst[j] += aip * gr[j];
          }
        }
      }
    });
  }

  Var matvec(Var a, Var x) {
    const TensorT<T>& va = node(a).value;
    const TensorT<T>& vx = node(x).value;
    if (va.rank() != 2 || vx.rank() != 1 || va.dim(1) != vx.dim(0)) {
      throw ShapeError("matvec: incompatible shapes " + shape_string(va.shape()) + " and " +
                       shape_string(vx.shape()));
    }
    const int m = va.dim(0), n = va.dim(1);
    TensorT<T> out({m});
    for (int i = 0; i < m; ++i) {
      const T* row = va.data() + static_cast<std::size_t>(i) * n;
      T acc = T(0);
      for (int j = 0; j < n; ++j) acc += row[j] * vx[static_cast<std::size_t>(j)];
      out[static_cast<std::size_t>(i)] = acc;
    }
    return push(std::move(out), any_grad({a, x}), nullptr, [a, x, m, n](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      const TensorT<T>& va2 = g.node(a).value;
      const TensorT<T>& vx2 = g.node(x).value;
      if (g.wants_grad(a)) {
        TensorT<T>& ga = g.grad_buf(a);
        for (int i = 0; i < m; ++i) {
          const T gi = gy[static_cast<std::size_t>(i)];
          T* dst = ga.data() + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) dst[j] += gi * vx2[static_cast<std::size_t>(j)];
        }
      }
      if (g.wants_grad(x)) {
        TensorT<T>& gx = g.grad_buf(x);
        for (int i = 0; i < m; ++i) {
          const T gi = gy[static_cast<std::size_t>(i)];
          const T* row = va2.data() + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) gx[static_cast<std::size_t>(j)] += gi * row[j];
        }
      }
    });
  }

  // --- softmax ----------------------------------------------------------------

  // Softmax with temperature along `axis` of a rank-1 or rank-2 tensor.
  // Max-subtraction keeps it stable for inputs of any magnitude.
  Var softmax(Var a, int axis, double temperature = 1.0) {
    if (temperature <= 0.0) {
      throw ParamError("softmax: temperature must be positive, got " + std::to_string(temperature));
    }
    const TensorT<T>& va = node(a).value;
    if (va.rank() == 1) {
      if (axis != 0) throw ShapeError("softmax: axis out of range for rank-1 tensor");
    } else if (va.rank() == 2) {
      if (axis != 0 && axis != 1) throw ShapeError("softmax: axis out of range for rank-2 tensor");
    } else {
      throw ShapeError("softmax: expected rank-1 or rank-2, got " + shape_string(va.shape()));
    }

    // View as [slices x len] where the softmax runs over `len` with stride.
    const bool rank1 = va.rank() == 1;
    const int rows = rank1 ? 1 : va.dim(0);
    const int cols = rank1 ? va.dim(0) : va.dim(1);
    const int nslices = (rank1 || axis == 1) ? rows : cols;
    const int len = (rank1 || axis == 1) ? cols : rows;
    const int stride = (rank1 || axis == 1) ? 1 : cols;
    const int slice_step = (rank1 || axis == 1) ? cols : 1;

    TensorT<T> out = va;
    const double inv_t = 1.0 / temperature;
    for (int s = 0; s < nslices; ++s) {
      T* base = out.data() + static_cast<std::size_t>(s) * slice_step;
      T mx = base[0];
      for (int i = 1; i < len; ++i) mx = std::max(mx, base[static_cast<std::size_t>(i) * stride]);
      double denom = 0.0;
      for (int i = 0; i < len; ++i) {
        T& v = base[static_cast<std::size_t>(i) * stride];
        v = static_cast<T>(std::exp(static_cast<double>(v - mx) * inv_t));
        denom += static_cast<double>(v);
      }
      const T inv_d = static_cast<T>(1.0 / denom);
      for (int i = 0; i < len; ++i) base[static_cast<std::size_t>(i) * stride] *= inv_d;
    }
    return push(std::move(out), any_grad({a}), nullptr,
                [a, nslices, len, stride, slice_step, inv_t](GraphT& g, Var id) {
                  const TensorT<T>& y = g.node(id).value;
                  const TensorT<T>& gy = g.node(id).grad;
                  TensorT<T>& ga = g.grad_buf(a);
                  for (int s = 0; s < nslices; ++s) {
                    const std::size_t off = static_cast<std::size_t>(s) * slice_step;
                    double dot = 0.0;
                    for (int i = 0; i < len; ++i) {
                      const std::size_t k = off + static_cast<std::size_t>(i) * stride;
                      dot += static_cast<double>(gy[k]) * static_cast<double>(y[k]);
                    }
                    for (int i = 0; i < len; ++i) {
                      const std::size_t k = off + static_cast<std::size_t>(i) * stride;
                      ga[k] += static_cast<T>((static_cast<double>(gy[k]) - dot) *
                                              static_cast<double>(y[k]) * inv_t);
                    }
                  }
                });
  }

  // --- convolution ------------------------------------------------------------

  // 2-D cross-correlation of a [Cin x H x W] volume with a [Cout x Cin x kh x kw]
  // filter bank, plus per-output-channel bias.
  Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    const TensorT<T>& vx = node(x).value;
    const TensorT<T>& vw = node(w).value;
    const TensorT<T>& vb = node(b).value;
    if (vx.rank() != 3 || vw.rank() != 4 || vb.rank() != 1) {
      throw ShapeError("conv2d: expected input [CxHxW], weight [OxCxKhxKw], bias [O]; got " +
                       shape_string(vx.shape()) + ", " + shape_string(vw.shape()) + ", " +
                       shape_string(vb.shape()));
    }
    if (vw.dim(1) != vx.dim(0) || vb.dim(0) != vw.dim(0)) {
      throw ShapeError("conv2d: channel mismatch between input " + shape_string(vx.shape()) +
                       " and weight " + shape_string(vw.shape()));
    }
    if (stride < 1 || pad < 0) throw ParamError("conv2d: stride must be >= 1 and pad >= 0");
    const int cin = vx.dim(0), h = vx.dim(1), wdt = vx.dim(2);
    const int cout = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wdt + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0) {
      throw ShapeError("conv2d: kernel " + shape_string(vw.shape()) + " does not fit input " +
                       shape_string(vx.shape()));
    }
    TensorT<T> out({cout, oh, ow});
    for (int oc = 0; oc < cout; ++oc) {
      for (int y = 0; y < oh; ++y) {
        for (int xo = 0; xo < ow; ++xo) {
          T acc = vb[static_cast<std::size_t>(oc)];
          for (int ic = 0; ic < cin; ++ic) {
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = y * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = xo * stride + kx - pad;
                if (ix < 0 || ix >= wdt) continue;
                acc += vw.at4(oc, ic, ky, kx) * vx.at(ic, iy, ix);
              }
            }
          }
          out.at(oc, y, xo) = acc;
        }
      }
    }
    return push(std::move(out), any_grad({x, w, b}), nullptr,
                [x, w, b, stride, pad, cin, h, wdt, cout, kh, kw, oh, ow](GraphT& g, Var id) {
                  const TensorT<T>& gy = g.node(id).grad;
                  const TensorT<T>& vx2 = g.node(x).value;
                  const TensorT<T>& vw2 = g.node(w).value;
                  const bool gx = g.wants_grad(x);
                  const bool gw = g.wants_grad(w);
                  const bool gb = g.wants_grad(b);
                  TensorT<T>* dx = gx ? &g.grad_buf(x) : nullptr;
                  TensorT<T>* dw = gw ? &g.grad_buf(w) : nullptr;
                  TensorT<T>* db = gb ? &g.grad_buf(b) : nullptr;
                  for (int oc = 0; oc < cout; ++oc) {
                    for (int y = 0; y < oh; ++y) {
                      for (int xo = 0; xo < ow; ++xo) {
                        const T gval = gy.at(oc, y, xo);
                        if (gb) (*db)[static_cast<std::size_t>(oc)] += gval;
                        for (int ic = 0; ic < cin; ++ic) {
                          for (int ky = 0; ky < kh; ++ky) {
                            const int iy = y * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                              const int ix = xo * stride + kx - pad;
                              if (ix < 0 || ix >= wdt) continue;
                              if (gw) dw->at4(oc, ic, ky, kx) += gval * vx2.at(ic, iy, ix);
                              if (gx) dx->at(ic, iy, ix) += gval * vw2.at4(oc, ic, ky, kx);
                            }
                          }
                        }
                      }
                    }
                  }
                });
  }

  // Channelwise dot product of a [C x H x W] volume with a length-C kernel at
  // every spatial site (1x1 cross-correlation), yielding an [H x W] map.
  Var cross_correlate(Var vol, Var kernel) {
    const TensorT<T>& vv = node(vol).value;
    const TensorT<T>& vk = node(kernel).value;
    if (vv.rank() != 3 || vk.rank() != 1 || vk.dim(0) != vv.dim(0)) {
      throw ShapeError("cross_correlate: expected volume [CxHxW] and kernel [C]; got " +
                       shape_string(vv.shape()) + " and " + shape_string(vk.shape()));
    }
    const int c = vv.dim(0), h = vv.dim(1), w = vv.dim(2);
    TensorT<T> out({h, w});
    const int n = h * w;
    for (int ch = 0; ch < c; ++ch) {
      const T kv = vk[static_cast<std::size_t>(ch)];
      const T* plane = vv.data() + static_cast<std::size_t>(ch) * n;
      for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] += kv * plane[i];
    }
    return push(std::move(out), any_grad({vol, kernel}), nullptr, [vol, kernel, c, n](GraphT& g, Var id) {
      const TensorT<T>& gy = g.node(id).grad;
      const TensorT<T>& vv2 = g.node(vol).value;
      const TensorT<T>& vk2 = g.node(kernel).value;
      if (g.wants_grad(vol)) {
        TensorT<T>& gv = g.grad_buf(vol);
        for (int ch = 0; ch < c; ++ch) {
          const T kv = vk2[static_cast<std::size_t>(ch)];
          T* plane = gv.data() + static_cast<std::size_t>(ch) * n;
          for (int i = 0; i < n; ++i) plane[i] += kv * gy[static_cast<std::size_t>(i)];
        }
      }
      if (g.wants_grad(kernel)) {
        TensorT<T>& gk = g.grad_buf(kernel);
        for (int ch = 0; ch < c; ++ch) {
          const T* plane = vv2.data() + static_cast<std::size_t>(ch) * n;
          double acc = 0.0;
          for (int i = 0; i < n; ++i) acc += static_cast<double>(plane[i]) * static_cast<double>(gy[static_cast<std::size_t>(i)]);
          gk[static_cast<std::size_t>(ch)] += static_cast<T>(acc);
        }
      }
    });
  }

  // --- batch normalization ------------------------------------------------

  // BatchNorm over the rows of a [B x C] matrix. Training mode with B >= 2
  // normalizes by batch statistics and updates the running stats; otherwise
  // (eval mode, or a single-row batch) the running statistics are used.
  Var batch_norm(Var x, Var gamma, Var beta, BnStatsT<T>& stats, bool training, double momentum = 0.1,
                 double eps = 1e-5) {
    const TensorT<T>& vx = node(x).value;
    const TensorT<T>& vg = node(gamma).value;
    const TensorT<T>& vb = node(beta).value;
    if (vx.rank() != 2 || vg.rank() != 1 || vb.rank() != 1 || vg.dim(0) != vx.dim(1) ||
        vb.dim(0) != vx.dim(1)) {
      throw ShapeError("batch_norm: expected x [BxC], gamma [C], beta [C]; got " +
                       shape_string(vx.shape()) + ", " + shape_string(vg.shape()) + ", " +
                       shape_string(vb.shape()));
    }
    const int bsz = vx.dim(0), c = vx.dim(1);
    const bool use_batch_stats = training && bsz >= 2;

    std::vector<double> mu(static_cast<std::size_t>(c)), var(static_cast<std::size_t>(c));
    if (use_batch_stats) {
      for (int j = 0; j < c; ++j) {
        double m = 0.0;
        for (int i = 0; i < bsz; ++i) m += static_cast<double>(vx.at(i, j));
        m /= bsz;
        double v = 0.0;
        for (int i = 0; i < bsz; ++i) {
          const double d = static_cast<double>(vx.at(i, j)) - m;
          v += d * d;
        }
        v /= bsz;
        mu[static_cast<std::size_t>(j)] = m;
        var[static_cast<std::size_t>(j)] = v;
      }
      // Running stats keep the unbiased variance.
      const double unbias = bsz > 1 ? static_cast<double>(bsz) / (bsz - 1) : 1.0;
      for (int j = 0; j < c; ++j) {
        const std::size_t sj = static_cast<std::size_t>(j);
        stats.running_mean[sj] =
            static_cast<T>((1.0 - momentum) * static_cast<double>(stats.running_mean[sj]) + momentum * mu[sj]);
        stats.running_var[sj] = static_cast<T>((1.0 - momentum) * static_cast<double>(stats.running_var[sj]) +
                                               momentum * var[sj] * unbias);
      }
    } else {
      for (int j = 0; j < c; ++j) {
        mu[static_cast<std::size_t>(j)] = static_cast<double>(stats.running_mean[static_cast<std::size_t>(j)]);
        var[static_cast<std::size_t>(j)] = static_cast<double>(stats.running_var[static_cast<std::size_t>(j)]);
      }
    }

    TensorT<T> out({bsz, c});
    std::vector<double> inv_sigma(static_cast<std::size_t>(c));
    for (int j = 0; j < c; ++j) {
      inv_sigma[static_cast<std::size_t>(j)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(j)] + eps);
    }
    for (int i = 0; i < bsz; ++i) {
      for (int j = 0; j < c; ++j) {
        const std::size_t sj = static_cast<std::size_t>(j);
        const double xh = (static_cast<double>(vx.at(i, j)) - mu[sj]) * inv_sigma[sj];
        out.at(i, j) = static_cast<T>(xh * static_cast<double>(vg[sj]) + static_cast<double>(vb[sj]));
      }
    }
    return push(std::move(out), any_grad({x, gamma, beta}), nullptr,
                [x, gamma, beta, bsz, c, mu, inv_sigma, use_batch_stats](GraphT& g, Var id) {
                  const TensorT<T>& gy = g.node(id).grad;
                  const TensorT<T>& vx2 = g.node(x).value;
                  const TensorT<T>& vg2 = g.node(gamma).value;
                  const bool want_x = g.wants_grad(x);
                  const bool want_g = g.wants_grad(gamma);
                  const bool want_b = g.wants_grad(beta);
                  TensorT<T>* dx = want_x ? &g.grad_buf(x) : nullptr;
                  TensorT<T>* dg = want_g ? &g.grad_buf(gamma) : nullptr;
                  TensorT<T>* db = want_b ? &g.grad_buf(beta) : nullptr;
                  for (int j = 0; j < c; ++j) {
                    const std::size_t sj = static_cast<std::size_t>(j);
                    const double is = inv_sigma[sj];
                    const double m = mu[sj];
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (int i = 0; i < bsz; ++i) {
                      const double gv = static_cast<double>(gy.at(i, j));
                      const double xh = (static_cast<double>(vx2.at(i, j)) - m) * is;
                      sum_g += gv;
                      sum_gx += gv * xh;
                    }
                    if (want_g) (*dg)[sj] += static_cast<T>(sum_gx);
                    if (want_b) (*db)[sj] += static_cast<T>(sum_g);
                    if (!want_x) continue;
                    const double gam = static_cast<double>(vg2[sj]);
                    if (use_batch_stats) {
                      for (int i = 0; i < bsz; ++i) {
                        const double gv = static_cast<double>(gy.at(i, j)) * gam;
                        const double xh = (static_cast<double>(vx2.at(i, j)) - m) * is;
                        dx->at(i, j) += static_cast<T>(
                            is * (gv - gam * sum_g / bsz - xh * gam * sum_gx / bsz));
                      }
                    } else {
                      for (int i = 0; i < bsz; ++i) {
                        dx->at(i, j) += static_cast<T>(static_cast<double>(gy.at(i, j)) * gam * is);
                      }
                    }
                  }
                });
  }

  // --- backward -------------------------------------------------------------

  void backward(Var loss) {
    Node& ln = node(loss);
    if (!ln.value.is_scalar()) {
      throw UsageError("backward: loss must be a scalar, got " + shape_string(ln.value.shape()));
    }
    if (backward_done_) throw UsageError("backward: already run on this graph");
    backward_done_ = true;
    if (!ln.requires_grad) return;  // loss disconnected from any parameter
    grad_buf(loss)[0] = T(1);
    for (std::size_t i = loss + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.back) continue;
      n.back(*this, static_cast<Var>(i));
    }
    for (auto& [p, id] : param_ids_) {
      Node& n = nodes_[id];
      if (n.grad.empty()) continue;
      ParameterT<T>* pp = n.bound;
      for (std::size_t i = 0; i < n.grad.size(); ++i) pp->grad[i] += n.grad[i];
    }
  }

 private:
  struct Node {
    TensorT<T> value;
    TensorT<T> grad;
    bool requires_grad = false;
    ParameterT<T>* bound = nullptr;
    std::function<void(GraphT&, Var)> back;
  };

  Node& node(Var id) { return nodes_.at(id); }
  const Node& node(Var id) const { return nodes_.at(id); }

  bool any_grad(std::initializer_list<Var> xs) const {
    if (!record_) return false;
    for (Var x : xs) {
      if (node(x).requires_grad) return true;
    }
    return false;
  }

  bool wants_grad(Var id) const { return node(id).requires_grad; }

  TensorT<T>& grad_buf(Var id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad = TensorT<T>(n.value.shape());
    return n.grad;
  }

  void accumulate(Var id, const TensorT<T>& g) {
    if (!wants_grad(id)) return;
    TensorT<T>& dst = grad_buf(id);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  void check_same_shape(const char* op, Var a, Var b) const {
    if (!node(a).value.same_shape(node(b).value)) {
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(node(a).value.shape()) +
                       " vs " + shape_string(node(b).value.shape()));
    }
  }

  Var push(TensorT<T> value, bool requires_grad, ParameterT<T>* bound,
           std::function<void(GraphT&, Var)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && record_;
    n.bound = bound;
    if (n.requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
  }

  static void matmul_accum(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
      T* crow = c + static_cast<std::size_t>(i) * n;
      const T* arow = a + static_cast<std::size_t>(i) * k;
      for (int p = 0; p < k; ++p) {
        const T aip = arow[p];
        const T* brow = b + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }

  std::deque<Node> nodes_;
  std::unordered_map<const ParameterT<T>*, Var> param_ids_;
  bool record_ = true;
  bool backward_done_ = false;
};

using Graph = GraphT<float>;
using Var = Graph::Var;

}  // namespace trace
