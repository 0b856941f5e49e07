#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is an immutable value: a shape plus a shared, read-only, row-major
// buffer. Tensors created through Tape::leaf, and every op result that has a
// tracked operand, carry a (tape, node) handle. Ops with only untracked operands
// produce plain values and record nothing.
//
// There is no implicit broadcasting. Scalar factors go through scale(); a bias
// row goes through add_rowwise().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "protego/error.hpp"

namespace protego {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

class Tape;

class Tensor {
 public:
  /// Scalar zero.
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  /// Zero-filled tensor.
  explicit Tensor(Shape shape) : Tensor(shape, std::vector<double>(numel(shape), 0.0)) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<double>>(std::move(values))) {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape_));
    }
    if (numel(shape_) != data_->size()) {
      throw DimensionError("shape " + to_string(shape_) + " needs " + std::to_string(numel(shape_)) +
                           " values, got " + std::to_string(data_->size()));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor filled(Shape shape, double v) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_->size(); }

  std::span<const double> values() const { return *data_; }
  const double* data() const { return data_->data(); }
  double operator[](std::size_t i) const { return (*data_)[i]; }

  /// Value of a one-element tensor.
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape_));
    return (*data_)[0];
  }

  std::vector<double> to_vector() const { return *data_; }

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }

  /// Same values, no tape handle.
  Tensor detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = 0;
    return t;
  }

  /// Exact value and shape equality (tape handles ignored).
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && *a.data_ == *b.data_;
  }

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

/// Local backward rule. grad_in[i] points at the gradient buffer of input i,
/// or is null when that input is untracked; rules accumulate into it.
using BackwardRule = std::function<void(std::span<const double> grad_out, std::span<double* const> grad_in)>;

/// Gradients produced by one backward pass.
class Gradients {
 public:
  /// Gradient of the output with respect to t (zeros if t does not reach it).
  Tensor wrt(const Tensor& t) const {
    if (!t.tracked() || t.tape() != tape_) throw ContractError("tensor is not on the differentiated tape");
    const auto& g = grads_.at(t.node());
    if (g.empty()) return Tensor(t.shape());
    return Tensor(t.shape(), g);
  }

  /// Gradient for every leaf of the tape, keyed by node id.
  const std::map<std::size_t, Tensor>& leaves() const { return leaves_; }

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::vector<double>> grads_;
  std::map<std::size_t, Tensor> leaves_;
};

/// Ordered record of primitive operations for one forward pass. Nodes are
/// appended in execution order, so the list is topologically sorted. A tape
/// must outlive every tensor that refers to it and is confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers value as a differentiable leaf.
  Tensor leaf(const Tensor& value) {
    Tensor t = value.detached();
    t.tape_ = this;
    t.node_ = nodes_.size();
    nodes_.push_back(Node{{}, nullptr, t.shape_, true});
    return t;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Appends an op node. Used by the primitive ops.
  Tensor record(Tensor value, std::vector<std::ptrdiff_t> inputs, BackwardRule rule) {
    Tensor t = std::move(value);
    t.tape_ = this;
    t.node_ = nodes_.size();
    nodes_.push_back(Node{std::move(inputs), std::move(rule), t.shape_, false});
    return t;
  }

  /// Reverse sweep from a one-element output. Does not modify the tape.
  Gradients backward(const Tensor& output) const {
    if (output.tape() != this) throw ContractError("backward: output is not on this tape");
    if (output.size() != 1) {
      throw ContractError("backward: output must be scalar, got shape " + to_string(output.shape()));
    }
    Gradients result;
    result.tape_ = this;
    result.grads_.resize(nodes_.size());
    result.grads_[output.node()].assign(1, 1.0);
    std::vector<double*> slots;
    for (std::size_t n = output.node() + 1; n-- > 0;) {
      const Node& node = nodes_[n];
      if (node.leaf || result.grads_[n].empty() || !node.rule) continue;
      slots.assign(node.inputs.size(), nullptr);
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        const std::ptrdiff_t in = node.inputs[i];
        if (in < 0) continue;
        auto& g = result.grads_[static_cast<std::size_t>(in)];
        if (g.empty()) g.assign(numel(nodes_[static_cast<std::size_t>(in)].shape), 0.0);
        slots[i] = g.data();
      }
      node.rule(result.grads_[n], slots);
    }
    for (std::size_t n = 0; n < nodes_.size(); ++n) {
      if (!nodes_[n].leaf) continue;
      const auto& g = result.grads_[n];
      result.leaves_.emplace(n, g.empty() ? Tensor(nodes_[n].shape) : Tensor(nodes_[n].shape, g));
    }
    return result;
  }

 private:
  struct Node {
    std::vector<std::ptrdiff_t> inputs;  // -1 for untracked operands
    BackwardRule rule;
    Shape shape;
    bool leaf;
  };
  std::vector<Node> nodes_;
};

namespace detail {

inline Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->tracked()) continue;
    if (tape && tape != t->tape()) throw ContractError("operands are recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

/// Wraps a computed value; records it when any operand is tracked.
inline Tensor finish(Tensor value, std::initializer_list<const Tensor*> inputs, BackwardRule rule) {
  Tape* tape = common_tape(inputs);
  if (!tape) return value;
  std::vector<std::ptrdiff_t> ids;
  ids.reserve(inputs.size());
  for (const Tensor* t : inputs) ids.push_back(t->tracked() ? static_cast<std::ptrdiff_t>(t->node()) : -1);
  return tape->record(std::move(value), std::move(ids), std::move(rule));
}

inline Tensor finish_many(Tensor value, const std::vector<Tensor>& inputs, BackwardRule rule) {
  Tape* tape = nullptr;
  for (const Tensor& t : inputs) {
    if (!t.tracked()) continue;
    if (tape && tape != t.tape()) throw ContractError("operands are recorded on different tapes");
    tape = t.tape();
  }
  if (!tape) return value;
  std::vector<std::ptrdiff_t> ids;
  ids.reserve(inputs.size());
  for (const Tensor& t : inputs) ids.push_back(t.tracked() ? static_cast<std::ptrdiff_t>(t.node()) : -1);
  return tape->record(std::move(value), std::move(ids), std::move(rule));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + to_string(a.shape()));
}

/// C (m x n) += op(A) * op(B), with op = transpose when the flag is set.
/// A is m x k (or k x m when transposed), B is k x n (or n x k).
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double* c) {
  std::vector<double> bt;
  if (trans_b) {
    // b is [n, k]; copy to [k, n] so the inner loop runs along contiguous rows
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    b = bt.data();
  }
  if (!trans_a) {
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = a[i * k + p];
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  } else {
    for (std::size_t p = 0; p < k; ++p) {
      const double* ap = a + p * m;
      const double* bp = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double api = ap[i];
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::finish(Tensor(a.shape(), std::move(out)), {&a, &b},
                        [](std::span<const double> g, std::span<double* const> in) {
                          for (double* gi : in) {
                            if (!gi) continue;
                            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                          }
                        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::finish(Tensor(a.shape(), std::move(out)), {&a, &b},
                        [](std::span<const double> g, std::span<double* const> in) {
                          if (in[0])
                            for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i];
                          if (in[1])
                            for (std::size_t i = 0; i < g.size(); ++i) in[1][i] -= g[i];
                        });
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor av = a.detached(), bv = b.detached();
  return detail::finish(Tensor(a.shape(), std::move(out)), {&a, &b},
                        [av, bv](std::span<const double> g, std::span<double* const> in) {
                          if (in[0])
                            for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i] * bv[i];
                          if (in[1])
                            for (std::size_t i = 0; i < g.size(); ++i) in[1][i] += g[i] * av[i];
                        });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::finish(Tensor(a.shape(), std::move(out)), {&a},
                        [s](std::span<const double> g, std::span<double* const> in) {
                          for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i] * s;
                        });
}

/// a + s elementwise.
inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return detail::finish(Tensor(a.shape(), std::move(out)), {&a},
                        [](std::span<const double> g, std::span<double* const> in) {
                          for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i];
                        });
}

/// Adds a vector of length n to every row of a tensor whose last dim is n.
inline Tensor add_rowwise(const Tensor& x, const Tensor& row) {
  if (x.rank() == 0 || row.size() != x.shape().back()) {
    throw DimensionError("add_rowwise: row " + to_string(row.shape()) + " does not match last dim of " +
                         to_string(x.shape()));
  }
  const std::size_t n = row.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + row[i % n];
  return detail::finish(Tensor(x.shape(), std::move(out)), {&x, &row},
                        [n](std::span<const double> g, std::span<double* const> in) {
                          if (in[0])
                            for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i];
                          if (in[1])
                            for (std::size_t i = 0; i < g.size(); ++i) in[1][i % n] += g[i];
                        });
}

/// tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.044715;
  const double k = std::sqrt(2.0 / std::numbers::pi);
  std::vector<double> out(x.size());
  std::vector<double> deriv(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    const double t = std::tanh(k * (v + kC * v * v * v));
    out[i] = 0.5 * v * (1.0 + t);
    deriv[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * kC * v * v);
  }
  return detail::finish(Tensor(x.shape(), std::move(out)), {&x},
                        [d = std::move(deriv)](std::span<const double> g, std::span<double* const> in) {
                          for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i] * d[i];
                        });
}

inline Tensor tanh(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  Tensor y(x.shape(), std::move(out));
  return detail::finish(y, {&x}, [y](std::span<const double> g, std::span<double* const> in) {
    for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

// ---------------------------------------------------------------------------
// Reductions and indexing


inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::finish(Tensor::scalar(s), {&x}, [n = x.size()](std::span<const double> g, std::span<double* const> in) {
    for (std::size_t i = 0; i < n; ++i) in[0][i] += g[0];
  });
}

/// Element at a flat row-major index, as a scalar.
inline Tensor pick(const Tensor& x, std::size_t flat_index) {
  if (flat_index >= x.size()) {
    throw DimensionError("pick: index " + std::to_string(flat_index) + " out of range for " + to_string(x.shape()));
  }
  return detail::finish(Tensor::scalar(x[flat_index]), {&x},
                        [flat_index](std::span<const double> g, std::span<double* const> in) {
                          in[0][flat_index] += g[0];
                        });
}

/// out[i] = x[indices[i]], reshaped to out_shape. Backward scatter-adds.
inline Tensor gather(const Tensor& x, std::vector<std::size_t> indices, Shape out_shape) {
  if (numel(out_shape) != indices.size()) {
    throw DimensionError("gather: " + std::to_string(indices.size()) + " indices for output " + to_string(out_shape));
  }
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.size()) throw DimensionError("gather: index out of range for " + to_string(x.shape()));
    out[i] = x[indices[i]];
  }
  return detail::finish(Tensor(std::move(out_shape), std::move(out)), {&x},
                        [idx = std::move(indices)](std::span<const double> g, std::span<double* const> in) {
                          for (std::size_t i = 0; i < idx.size(); ++i) in[0][idx[i]] += g[i];
                        });
}

// ---------------------------------------------------------------------------
// Structural

/// Same data in a new shape; element count must be preserved.
inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return detail::finish(Tensor(std::move(shape), x.to_vector()), {&x},
                        [](std::span<const double> g, std::span<double* const> in) {
                          for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i];
                        });
}

inline Tensor transpose(const Tensor& x) {
  detail::require_matrix(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return detail::finish(Tensor({n, m}, std::move(out)), {&x},
                        [m, n](std::span<const double> g, std::span<double* const> in) {
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) in[0][i * n + j] += g[j * m + i];
                        });
}

/// Elements [begin, end) along axis.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " invalid for " + to_string(x.shape()));
  }
  const std::size_t outer = numel(Shape(x.shape().begin(), x.shape().begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(x.shape().begin() + static_cast<std::ptrdiff_t>(axis) + 1, x.shape().end()));
  const std::size_t full = x.dim(axis), width = end - begin;
  Shape shape = x.shape();
  shape[axis] = width;
  std::vector<double> out(outer * width * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data() + (o * full + begin) * inner, width * inner, out.data() + o * width * inner);
  return detail::finish(Tensor(std::move(shape), std::move(out)), {&x},
                        [=](std::span<const double> g, std::span<double* const> in) {
                          for (std::size_t o = 0; o < outer; ++o) {
                            double* dst = in[0] + (o * full + begin) * inner;
                            const double* src = g.data() + o * width * inner;
                            for (std::size_t i = 0; i < width * inner; ++i) dst[i] += src[i];
                          }
                        });
}

/// Joins tensors along axis; all other dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + to_string(first));
  std::vector<std::size_t> widths;
  Shape shape = first;
  shape[axis] = 0;
  for (const Tensor& p : parts) {
    Shape a = p.shape(), b = first;
    if (a.size() != b.size()) throw DimensionError("concat: rank mismatch " + to_string(a) + " vs " + to_string(b));
    widths.push_back(a[axis]);
    a[axis] = b[axis] = 0;
    if (a != b) throw DimensionError("concat: shape mismatch " + to_string(p.shape()) + " vs " + to_string(first));
    shape[axis] += widths.back();
  }
  const std::size_t outer = numel(Shape(first.begin(), first.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(first.begin() + static_cast<std::ptrdiff_t>(axis) + 1, first.end()));
  const std::size_t total = shape[axis];
  std::vector<double> out(numel(shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(parts[k].data() + o * widths[k] * inner, widths[k] * inner,
                  out.data() + (o * total + offset) * inner);
    offset += widths[k];
  }
  return detail::finish_many(Tensor(std::move(shape), std::move(out)), parts,
                             [=](std::span<const double> g, std::span<double* const> in) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < in.size(); ++k) {
                                 if (in[k]) {
                                   for (std::size_t o = 0; o < outer; ++o) {
                                     const double* src = g.data() + (o * total + off) * inner;
                                     double* dst = in[k] + o * widths[k] * inner;
                                     for (std::size_t i = 0; i < widths[k] * inner; ++i) dst[i] += src[i];
                                   }
                                 }
                                 off += widths[k];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra and normalization

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm(false, false, m, n, k, a.data(), b.data(), out.data());
  Tensor av = a.detached(), bv = b.detached();
  return detail::finish(Tensor({m, n}, std::move(out)), {&a, &b},
                        [av, bv, m, n, k](std::span<const double> g, std::span<double* const> in) {
                          // dA = G B^T, dB = A^T G
                          if (in[0]) detail::gemm(false, true, m, k, n, g.data(), bv.data(), in[0]);
                          if (in[1]) detail::gemm(true, false, k, n, m, av.data(), g.data(), in[1]);
                        });
}

/// Softmax over the last dimension, max-subtracted.
inline Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("softmax_lastdim: scalar input");
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    double* yr = out.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }
  Tensor y(x.shape(), std::move(out));
  return detail::finish(y, {&x}, [y, n, rows](std::span<const double> g, std::span<double* const> in) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * n;
      const double* gr = g.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < n; ++j) in[0][r * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

/// Per-row normalization over the last dimension (biased variance) followed by
/// the affine map gamma * xhat + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  if (x.rank() == 0 || gamma.size() != x.shape().back() || beta.size() != x.shape().back()) {
    throw DimensionError("layer_norm: gamma " + to_string(gamma.shape()) + " / beta " + to_string(beta.shape()) +
                         " do not match last dim of " + to_string(x.shape()));
  }
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  std::vector<double> xhat(x.size()), inv_std(rows), out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xr[j] - mean) * inv_std[r];
      out[r * n + j] = gamma[j] * xhat[r * n + j] + beta[j];
    }
  }
  Tensor gv = gamma.detached();
  return detail::finish(
      Tensor(x.shape(), std::move(out)), {&x, &gamma, &beta},
      [gv, n, rows, xh = std::move(xhat), is = std::move(inv_std)](std::span<const double> g,
                                                                   std::span<double* const> in) {
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * n;
          const double* hr = xh.data() + r * n;
          if (in[1])
            for (std::size_t j = 0; j < n; ++j) in[1][j] += gr[j] * hr[j];
          if (in[2])
            for (std::size_t j = 0; j < n; ++j) in[2][j] += gr[j];
          if (!in[0]) continue;
          double mean_d = 0.0, mean_dh = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = gr[j] * gv[j];
            mean_d += d;
            mean_dh += d * hr[j];
          }
          mean_d /= static_cast<double>(n);
          mean_dh /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j)
            in[0][r * n + j] += is[r] * (gr[j] * gv[j] - mean_d - hr[j] * mean_dh);
        }
      });
}

/// Softmax cross-entropy of a logit vector against a class index:
/// logsumexp(z) - z[label].
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  const std::size_t k = logits.size();
  if (label >= k) throw DimensionError("cross_entropy: label " + std::to_string(label) + " >= " + std::to_string(k));
  const double mx = *std::max_element(logits.values().begin(), logits.values().end());
  std::vector<double> p(k);
  double z = 0.0;
  for (std::size_t j = 0; j < k; ++j) z += (p[j] = std::exp(logits[j] - mx));
  for (double& v : p) v /= z;
  const double loss = mx + std::log(z) - logits[label];
  return detail::finish(Tensor::scalar(loss), {&logits},
                        [p = std::move(p), label](std::span<const double> g, std::span<double* const> in) {
                          for (std::size_t j = 0; j < p.size(); ++j)
                            in[0][j] += g[0] * (p[j] - (j == label ? 1.0 : 0.0));
                        });
}

inline std::size_t argmax(const Tensor& x) {
  return static_cast<std::size_t>(std::max_element(x.values().begin(), x.values().end()) - x.values().begin());
}

}  // namespace protego
