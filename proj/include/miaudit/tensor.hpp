// Copyright 2026 The miaudit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Reverse-mode automatic differentiation over dense row-major tensors.
// A Tape records executed operations in topological order; backward()
// replays the tape once, in reverse, accumulating gradients in declaration
// order so two passes over identical tapes are bitwise identical.
//
// Tensors whose node >= 0 participate in differentiation. Constants carry
// no node and cost nothing: an op whose inputs are all constants registers
// nothing, so the same forward code serves both training and plain
// evaluation. Tensor values are immutable once created.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <vector>

#include "miaudit/common.hpp"

namespace miaudit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

class Tape;
class Gradients;

struct Tensor {
  Shape shape;
  std::shared_ptr<const std::vector<double>> values;
  Tape* tape = nullptr;
  int node = -1;  // tape node id; -1 for constants

  std::size_t numel() const { return shape_numel(shape); }
  double at(std::size_t i) const { return (*values)[i]; }
  const std::vector<double>& data() const { return *values; }
  bool tracked() const { return node >= 0; }

  // Value of a one-element tensor.
  double scalar() const {
    if (numel() != 1) throw std::invalid_argument("scalar(): tensor has shape " + shape_str(shape));
    return (*values)[0];
  }
};

class Tape {
 public:
  // Called during the reverse pass with this node's accumulated gradient.
  using BackwardFn = std::function<void(const std::vector<double>& upstream, Gradients& grads)>;

  int add_node(std::size_t numel, BackwardFn backward) {
    nodes_.push_back(Node{numel, std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t node_numel(int id) const { return nodes_[static_cast<std::size_t>(id)].numel; }

 private:
  struct Node {
    std::size_t numel;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;

  friend class Gradients;
  friend Gradients backward(const Tensor& loss);
};

// Gradient buffers keyed by tape node. Leaves that a loss never reached
// report all-zero gradients.
class Gradients {
 public:
  explicit Gradients(const Tape& tape) : tape_(&tape), bufs_(tape.size()) {}

  // Accumulation buffer for a node, allocated on first touch.
  std::vector<double>& buf(int node) {
    auto& b = bufs_[static_cast<std::size_t>(node)];
    if (b.empty()) b.assign(tape_->node_numel(node), 0.0);
    return b;
  }

  bool touched(int node) const { return !bufs_[static_cast<std::size_t>(node)].empty(); }

  const std::vector<double>& wrt(const Tensor& t) {
    if (!t.tracked() || t.tape != tape_)
      throw std::invalid_argument("Gradients::wrt: tensor is not tracked on this tape");
    return buf(t.node);
  }

 private:
  const Tape* tape_;
  std::vector<std::vector<double>> bufs_;
};

// Reverse pass from a scalar loss. Visits every node at most once, in
// reverse tape order.
inline Gradients backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape));
  if (!loss.tracked())
    throw std::invalid_argument("backward: loss is not on a tape");
  Gradients grads(*loss.tape);
  grads.buf(loss.node)[0] = 1.0;
  for (int id = loss.node; id >= 0; --id) {
    if (!grads.touched(id)) continue;
    const auto& fn = loss.tape->nodes_[static_cast<std::size_t>(id)].backward;
    if (fn) fn(grads.buf(id), grads);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

inline Tensor constant(Shape shape, std::vector<double> values) {
  if (values.size() != shape_numel(shape))
    throw std::invalid_argument("constant: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  return Tensor{std::move(shape), std::make_shared<const std::vector<double>>(std::move(values)),
                nullptr, -1};
}

inline Tensor scalar_constant(double x) { return constant({}, {x}); }

// A differentiation root. Leaves have no backward function; their buffers
// hold the final gradients.
inline Tensor leaf(Tape& tape, Shape shape, std::vector<double> values, bool requires_grad = true) {
  Tensor t = constant(std::move(shape), std::move(values));
  if (requires_grad) {
    t.tape = &tape;
    t.node = tape.add_node(t.numel(), nullptr);
  }
  return t;
}

namespace detail {

inline Tape* common_tape(const Tensor& a, const Tensor& b) {
  if (a.tape && b.tape && a.tape != b.tape)
    throw std::invalid_argument("operands live on different tapes");
  return a.tape ? a.tape : b.tape;
}

inline Tensor make_result(Shape shape, std::vector<double> values, Tape* tape, int node) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.tape = node >= 0 ? tape : nullptr;
  t.node = node;
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations. Binary ops require equal shapes or one scalar
// operand; no other broadcasting.
// ---------------------------------------------------------------------------

enum class EwOp { kAdd, kSub, kMul, kNeg, kTanh, kRelu, kExp, kLog, kScale };

namespace detail {

// Unary elementwise with pointwise derivative d(out)/d(in) as a function of
// (input, output).
template <typename FwdF, typename DerivF>
Tensor unary_ew(const Tensor& a, FwdF fwd, DerivF deriv) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.at(i));
  int node = -1;
  if (a.tracked()) {
    auto av = a.values;
    auto ov = std::make_shared<std::vector<double>>(out);
    int pa = a.node;
    node = a.tape->add_node(out.size(), [av, ov, pa, deriv](const std::vector<double>& up, Gradients& g) {
      auto& gb = g.buf(pa);
      for (std::size_t i = 0; i < up.size(); ++i) gb[i] += up[i] * deriv((*av)[i], (*ov)[i]);
    });
  }
  return detail::make_result(a.shape, std::move(out), a.tape, node);
}

}  // namespace detail

inline Tensor neg(const Tensor& a) {
  return detail::unary_ew(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_ew(a, [](double x) { return std::tanh(x); },
                          [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_ew(a, [](double x) { return x > 0.0 ? x : 0.0; },
                          [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_ew(a,
                          [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                          [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_ew(a, [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}

// Probabilities below exp(-745) are treated as exact zero: log maps them to
// -inf with zero gradient. CTC recursions hit true zeros, and this keeps
// them out of the denormal range.
inline Tensor log(const Tensor& a) {
  static const double kZeroProb = std::exp(-745.0);
  return detail::unary_ew(
      a,
      [](double x) { return x < kZeroProb ? kNegInf : std::log(x); },
      [](double x, double) { return x < kZeroProb ? 0.0 : 1.0 / x; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_ew(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_const(const Tensor& a, double c) {
  return detail::unary_ew(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

namespace detail {

enum class BinKind { kAdd, kSub, kMul };

inline Tensor binary_ew(BinKind kind, const Tensor& a, const Tensor& b) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!a_scalar && !b_scalar && a.shape != b.shape)
    throw std::invalid_argument("elementwise op: shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
  Tape* tape = common_tape(a, b);
  const Tensor& big = a_scalar ? b : a;
  std::vector<double> out(big.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = a_scalar ? a.at(0) : a.at(i);
    double y = b_scalar ? b.at(0) : b.at(i);
    out[i] = kind == BinKind::kAdd ? x + y : kind == BinKind::kSub ? x - y : x * y;
  }
  int node = -1;
  if (tape && (a.tracked() || b.tracked())) {
    auto av = a.values;
    auto bv = b.values;
    int pa = a.node, pb = b.node;
    node = tape->add_node(out.size(), [kind, av, bv, pa, pb, a_scalar, b_scalar](
                                          const std::vector<double>& up, Gradients& g) {
      if (pa >= 0) {
        auto& ga = g.buf(pa);
        for (std::size_t i = 0; i < up.size(); ++i) {
          double d = kind == BinKind::kMul ? up[i] * (b_scalar ? (*bv)[0] : (*bv)[i]) : up[i];
          if (a_scalar) ga[0] += d; else ga[i] += d;
        }
      }
      if (pb >= 0) {
        auto& gb = g.buf(pb);
        for (std::size_t i = 0; i < up.size(); ++i) {
          double d;
          if (kind == BinKind::kMul) d = up[i] * (a_scalar ? (*av)[0] : (*av)[i]);
          else if (kind == BinKind::kSub) d = -up[i];
          else d = up[i];
          if (b_scalar) gb[0] += d; else gb[i] += d;
        }
      }
    });
  }
  return make_result(big.shape, std::move(out), tape, node);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_ew(detail::BinKind::kAdd, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_ew(detail::BinKind::kSub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_ew(detail::BinKind::kMul, a, b); }

// Uniform dispatch over the elementwise family; the named functions above
// are the primary API, this exists so generic test suites can sweep ops.
inline Tensor elementwise(EwOp op, const Tensor& a, const Tensor* b = nullptr, double c = 0.0) {
  switch (op) {
    case EwOp::kAdd: return add(a, *b);
    case EwOp::kSub: return sub(a, *b);
    case EwOp::kMul: return mul(a, *b);
    case EwOp::kNeg: return neg(a);
    case EwOp::kTanh: return tanh(a);
    case EwOp::kRelu: return relu(a);
    case EwOp::kExp: return exp(a);
    case EwOp::kLog: return log(a);
    case EwOp::kScale: return scale(a, c);
  }
  throw std::invalid_argument("elementwise: unknown op");
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double av = a.at(i * k + p);
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b.at(p * n + j);
    }
  Tape* tape = detail::common_tape(a, b);
  int node = -1;
  if (tape && (a.tracked() || b.tracked())) {
    auto av = a.values;
    auto bv = b.values;
    int pa = a.node, pb = b.node;
    node = tape->add_node(out.size(), [av, bv, pa, pb, m, k, n](const std::vector<double>& up, Gradients& g) {
      if (pa >= 0) {  // dA = dC . B^T
        auto& ga = g.buf(pa);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += up[i * n + j] * (*bv)[p * n + j];
            ga[i * k + p] += s;
          }
      }
      if (pb >= 0) {  // dB = A^T . dC
        auto& gb = g.buf(pb);
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) s += (*av)[i * k + p] * up[i * n + j];
            gb[p * n + j] += s;
          }
      }
    });
  }
  return detail::make_result({m, n}, std::move(out), tape, node);
}

// out[i] = sum_j A[i,j] v[j]
inline Tensor matvec(const Tensor& a, const Tensor& v) {
  if (a.shape.size() != 2 || v.shape.size() != 1 || a.shape[1] != v.shape[0])
    throw std::invalid_argument("matvec: incompatible shapes " + shape_str(a.shape) + " vs " +
                                shape_str(v.shape));
  const std::size_t m = a.shape[0], k = a.shape[1];
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += a.at(i * k + j) * v.at(j);
    out[i] = s;
  }
  Tape* tape = detail::common_tape(a, v);
  int node = -1;
  if (tape && (a.tracked() || v.tracked())) {
    auto av = a.values;
    auto vv = v.values;
    int pa = a.node, pv = v.node;
    node = tape->add_node(m, [av, vv, pa, pv, m, k](const std::vector<double>& up, Gradients& g) {
      if (pa >= 0) {
        auto& ga = g.buf(pa);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < k; ++j) ga[i * k + j] += up[i] * (*vv)[j];
      }
      if (pv >= 0) {
        auto& gv = g.buf(pv);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < k; ++j) gv[j] += (*av)[i * k + j] * up[i];
      }
    });
  }
  return detail::make_result({m}, std::move(out), tape, node);
}

// Adds a length-n row vector to every row of an [m x n] matrix.
inline Tensor add_rowvec(const Tensor& a, const Tensor& row) {
  if (a.shape.size() != 2 || row.shape.size() != 1 || a.shape[1] != row.shape[0])
    throw std::invalid_argument("add_rowvec: incompatible shapes " + shape_str(a.shape) +
                                " vs " + shape_str(row.shape));
  const std::size_t m = a.shape[0], n = a.shape[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.at(i * n + j) + row.at(j);
  Tape* tape = detail::common_tape(a, row);
  int node = -1;
  if (tape && (a.tracked() || row.tracked())) {
    int pa = a.node, pr = row.node;
    node = tape->add_node(m * n, [pa, pr, m, n](const std::vector<double>& up, Gradients& g) {
      if (pa >= 0) {
        auto& ga = g.buf(pa);
        for (std::size_t i = 0; i < m * n; ++i) ga[i] += up[i];
      }
      if (pr >= 0) {
        auto& gr = g.buf(pr);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gr[j] += up[i * n + j];
      }
    });
  }
  return detail::make_result({m, n}, std::move(out), tape, node);
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape) + " as " +
                                shape_str(shape));
  std::vector<double> out(a.data());
  int node = -1;
  if (a.tracked()) {
    int pa = a.node;
    node = a.tape->add_node(out.size(), [pa](const std::vector<double>& up, Gradients& g) {
      auto& ga = g.buf(pa);
      for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i];
    });
  }
  return detail::make_result(std::move(shape), std::move(out), a.tape, node);
}

// Copy of row r of a matrix.
inline Tensor slice_row(const Tensor& a, std::size_t r) {
  if (a.shape.size() != 2 || r >= a.shape[0])
    throw std::invalid_argument("slice_row: row " + std::to_string(r) + " of " + shape_str(a.shape));
  const std::size_t n = a.shape[1];
  std::vector<double> out(a.values->begin() + static_cast<std::ptrdiff_t>(r * n),
                          a.values->begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
  int node = -1;
  if (a.tracked()) {
    int pa = a.node;
    node = a.tape->add_node(n, [pa, r, n](const std::vector<double>& up, Gradients& g) {
      auto& ga = g.buf(pa);
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += up[j];
    });
  }
  return detail::make_result({n}, std::move(out), a.tape, node);
}

// Stacks equal-length vectors into a matrix, one per row.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: no rows");
  const std::size_t n = rows[0].numel();
  Tape* tape = nullptr;
  bool any_tracked = false;
  for (const Tensor& r : rows) {
    if (r.shape.size() != 1 || r.numel() != n)
      throw std::invalid_argument("stack_rows: row shape " + shape_str(r.shape) +
                                  " != [" + std::to_string(n) + "]");
    if (r.tape) {
      if (tape && tape != r.tape) throw std::invalid_argument("stack_rows: mixed tapes");
      tape = r.tape;
    }
    any_tracked = any_tracked || r.tracked();
  }
  const std::size_t m = rows.size();
  std::vector<double> out;
  out.reserve(m * n);
  for (const Tensor& r : rows) out.insert(out.end(), r.values->begin(), r.values->end());
  int node = -1;
  if (tape && any_tracked) {
    std::vector<int> parents(m);
    for (std::size_t i = 0; i < m; ++i) parents[i] = rows[i].node;
    node = tape->add_node(m * n, [parents, n](const std::vector<double>& up, Gradients& g) {
      for (std::size_t i = 0; i < parents.size(); ++i) {
        if (parents[i] < 0) continue;
        auto& gr = g.buf(parents[i]);
        for (std::size_t j = 0; j < n; ++j) gr[j] += up[i * n + j];
      }
    });
  }
  return detail::make_result({m, n}, std::move(out), tape, node);
}

// out[i] = a[i-k] for i >= k, else -inf. Log-domain shift used by the CTC
// forward recursion.
inline Tensor shift_right(const Tensor& a, std::size_t k) {
  if (a.shape.size() != 1) throw std::invalid_argument("shift_right: need vector, got " + shape_str(a.shape));
  const std::size_t n = a.numel();
  std::vector<double> out(n, kNegInf);
  for (std::size_t i = k; i < n; ++i) out[i] = a.at(i - k);
  int node = -1;
  if (a.tracked()) {
    int pa = a.node;
    node = a.tape->add_node(n, [pa, k, n](const std::vector<double>& up, Gradients& g) {
      auto& ga = g.buf(pa);
      for (std::size_t i = k; i < n; ++i) ga[i - k] += up[i];
    });
  }
  return detail::make_result({n}, std::move(out), a.tape, node);
}

// out[j] = a[idx[j]] over a vector. Gradient scatter-adds.
inline Tensor gather(const Tensor& a, const std::vector<std::size_t>& idx) {
  if (a.shape.size() != 1) throw std::invalid_argument("gather: need vector, got " + shape_str(a.shape));
  std::vector<double> out(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] >= a.numel())
      throw std::invalid_argument("gather: index " + std::to_string(idx[j]) + " out of range " +
                                  shape_str(a.shape));
    out[j] = a.at(idx[j]);
  }
  int node = -1;
  if (a.tracked()) {
    int pa = a.node;
    node = a.tape->add_node(idx.size(), [pa, idx](const std::vector<double>& up, Gradients& g) {
      auto& ga = g.buf(pa);
      for (std::size_t j = 0; j < idx.size(); ++j) ga[idx[j]] += up[j];
    });
  }
  return detail::make_result({idx.size()}, std::move(out), a.tape, node);
}

// ---------------------------------------------------------------------------
// Reductions and log-domain ops
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.at(i);
  int node = -1;
  if (a.tracked()) {
    int pa = a.node;
    std::size_t n = a.numel();
    node = a.tape->add_node(1, [pa, n](const std::vector<double>& up, Gradients& g) {
      auto& ga = g.buf(pa);
      for (std::size_t i = 0; i < n; ++i) ga[i] += up[0];
    });
  }
  return detail::make_result({}, {s}, a.tape, node);
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

namespace detail {

// Row-stabilized logsumexp of n contiguous values; exact for -inf entries.
inline double lse_span(const double* x, std::size_t n, std::size_t stride) {
  double mx = kNegInf;
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i * stride]);
  if (mx == kNegInf) return kNegInf;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i * stride] - mx);
  return mx + std::log(s);
}

}  // namespace detail

// Reduces `axis`; entries of -inf act as log(0). A slice that is entirely
// -inf reduces to -inf, never NaN.
inline Tensor logsumexp(const Tensor& a, std::size_t axis) {
  if (axis >= a.shape.size())
    throw std::invalid_argument("logsumexp: axis " + std::to_string(axis) + " of " + shape_str(a.shape));
  const std::size_t n = a.shape[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape[i];
  for (std::size_t i = axis + 1; i < a.shape.size(); ++i) inner *= a.shape[i];
  Shape out_shape;
  for (std::size_t i = 0; i < a.shape.size(); ++i)
    if (i != axis) out_shape.push_back(a.shape[i]);
  std::vector<double> out(outer * inner);
  const double* x = a.values->data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in)
      out[o * inner + in] = detail::lse_span(x + o * n * inner + in, n, inner);
  int node = -1;
  if (a.tracked()) {
    auto av = a.values;
    auto ov = std::make_shared<std::vector<double>>(out);
    int pa = a.node;
    node = a.tape->add_node(out.size(), [av, ov, pa, outer, inner, n](const std::vector<double>& up,
                                                                      Gradients& g) {
      auto& ga = g.buf(pa);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          double y = (*ov)[o * inner + in];
          if (y == kNegInf) continue;  // all-zero slice: no gradient
          double u = up[o * inner + in];
          for (std::size_t i = 0; i < n; ++i) {
            double xi = (*av)[o * n * inner + i * inner + in];
            if (xi == kNegInf) continue;
            ga[o * n * inner + i * inner + in] += u * std::exp(xi - y);
          }
        }
    });
  }
  return detail::make_result(std::move(out_shape), std::move(out), a.tape, node);
}

// Elementwise log(exp(a) + exp(b)); -inf inputs are absorbing zeros.
inline Tensor logaddexp(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("logaddexp: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  Tape* tape = detail::common_tape(a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = a.at(i), y = b.at(i);
    double mx = std::max(x, y);
    out[i] = mx == kNegInf ? kNegInf : mx + std::log1p(std::exp(std::min(x, y) - mx));
  }
  int node = -1;
  if (tape && (a.tracked() || b.tracked())) {
    auto av = a.values;
    auto bv = b.values;
    auto ov = std::make_shared<std::vector<double>>(out);
    int pa = a.node, pb = b.node;
    node = tape->add_node(out.size(), [av, bv, ov, pa, pb](const std::vector<double>& up, Gradients& g) {
      for (std::size_t i = 0; i < up.size(); ++i) {
        double y = (*ov)[i];
        if (y == kNegInf) continue;
        if (pa >= 0 && (*av)[i] != kNegInf) g.buf(pa)[i] += up[i] * std::exp((*av)[i] - y);
        if (pb >= 0 && (*bv)[i] != kNegInf) g.buf(pb)[i] += up[i] * std::exp((*bv)[i] - y);
      }
    });
  }
  return detail::make_result(a.shape, std::move(out), tape, node);
}

// Normalizes the last axis: every output row satisfies logsumexp(row) == 0.
// Stabilized by max subtraction.
inline Tensor log_softmax(const Tensor& a) {
  if (a.shape.empty()) throw std::invalid_argument("log_softmax: scalar input");
  const std::size_t v = a.shape.back();
  const std::size_t rows = a.numel() / v;
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.values->data() + r * v;
    double mx = *std::max_element(x, x + v);
    if (!std::isfinite(mx))
      throw NumericalError("log_softmax: non-finite logits in row " + std::to_string(r));
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(x[j] - mx);
    double lz = mx + std::log(s);
    for (std::size_t j = 0; j < v; ++j) out[r * v + j] = x[j] - lz;
  }
  int node = -1;
  if (a.tracked()) {
    auto ov = std::make_shared<std::vector<double>>(out);
    int pa = a.node;
    node = a.tape->add_node(out.size(), [ov, pa, rows, v](const std::vector<double>& up, Gradients& g) {
      auto& ga = g.buf(pa);
      for (std::size_t r = 0; r < rows; ++r) {
        double usum = 0.0;
        for (std::size_t j = 0; j < v; ++j) usum += up[r * v + j];
        for (std::size_t j = 0; j < v; ++j)
          ga[r * v + j] += up[r * v + j] - std::exp((*ov)[r * v + j]) * usum;
      }
    });
  }
  return detail::make_result(a.shape, std::move(out), a.tape, node);
}

inline Tensor softmax(const Tensor& a) { return exp(log_softmax(a)); }

// sum(a * b) for equal-shape tensors.
inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

}  // namespace miaudit
