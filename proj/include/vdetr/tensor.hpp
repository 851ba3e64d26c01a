#pragma once

// Dense f64 tensors with tape-based reverse-mode differentiation.
// The op set is a fixed enumeration: exactly what the detection decoder
// needs, nothing generic. Forward/backward on one graph is single-threaded;
// distinct graphs may run concurrently as long as parameters are read-only.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <functional>
#include <istream>
#include <limits>
#include <memory>
#include <ostream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vdetr/common.hpp"

namespace vdetr {

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size())
      throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                  std::to_string(values.size()) + " values");
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor zeros(const Shape& shape) {
    return constant(shape, std::vector<double>(numel(shape), 0.0));
  }

  static Tensor full(const Shape& shape, double v) {
    return constant(shape, std::vector<double>(numel(shape), v));
  }

  static Tensor scalar(double v) { return constant({1}, {v}); }

  // Leaf with gradient tracking; the building block of Parameter.
  static Tensor leaf(Shape shape, std::vector<double> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& mutable_data() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (size() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(size()) + " elements");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  // Constant snapshot: same values, no history, no gradient flow.
  Tensor detach() const { return constant(node_->shape, node_->value); }

  const std::shared_ptr<detail::TensorNode>& impl() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>,
                        std::function<void(detail::TensorNode&)>);
};

inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                      std::function<void(detail::TensorNode&)> backprop) {
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const Tensor& p : parents) {
    n->parents.push_back(p.impl());
    n->requires_grad = n->requires_grad || p.requires_grad();
  }
  if (n->requires_grad) n->backprop = std::move(backprop);
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// backward

inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  detail::TensorNode* root = loss.impl().get();
  if (!root->requires_grad) return;

  // Topological order via iterative post-order DFS; visiting only the
  // gradient-carrying subgraph. Order depends on graph structure alone,
  // so repeated runs accumulate bit-identically.
  std::vector<detail::TensorNode*> order;
  std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
  std::unordered_set<detail::TensorNode*> seen;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::TensorNode* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorNode* node = *it;
    if (node->backprop) node->backprop(*node);
  }
}

// ---------------------------------------------------------------------------
// elementwise helpers

namespace detail {

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd f, Bwd dfdx) {
  std::vector<double> out(a.size());
  const auto& x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  TensorNode* an = a.impl().get();
  return make_op(a.shape(), std::move(out), {a}, [an, dfdx](TensorNode& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i)
      an->grad[i] += self.grad[i] * dfdx(an->value[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  detail::TensorNode* an = a.impl().get();
  detail::TensorNode* bn = b.impl().get();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  detail::TensorNode* an = a.impl().get();
  detail::TensorNode* bn = b.impl().get();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  detail::TensorNode* an = a.impl().get();
  detail::TensorNode* bn = b.impl().get();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("div", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  detail::TensorNode* an = a.impl().get();
  detail::TensorNode* bn = b.impl().get();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] / bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        bn->grad[i] -= self.grad[i] * an->value[i] / (bn->value[i] * bn->value[i]);
    }
  });
}

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_op(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_op(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                          [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor abs(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::fabs(x); },
                          [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::log(x); },
                          [](double x, double) { return 1.0 / x; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::tanh(x); },
                          [](double, double y) { return 1.0 - y * y; });
}

// Elementwise min/max; on ties the gradient goes to the first argument.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("minimum", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a[i], b[i]);
  detail::TensorNode* an = a.impl().get();
  detail::TensorNode* bn = b.impl().get();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      detail::TensorNode* dst = an->value[i] <= bn->value[i] ? an : bn;
      if (dst->requires_grad) {
        dst->ensure_grad();
        dst->grad[i] += self.grad[i];
      }
    }
  });
}

inline Tensor maximum(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("maximum", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a[i], b[i]);
  detail::TensorNode* an = a.impl().get();
  detail::TensorNode* bn = b.impl().get();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      detail::TensorNode* dst = an->value[i] >= bn->value[i] ? an : bn;
      if (dst->requires_grad) {
        dst->ensure_grad();
        dst->grad[i] += self.grad[i];
      }
    }
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// matmul / layout

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        const double* brow = pb + p * n;
        double* crow = pc + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
  }
  detail::TensorNode* an = a.impl().get();
  detail::TensorNode* bn = b.impl().get();
  return make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::TensorNode& self) {
    const double* g = self.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      double* da = an->grad.data();
      const double* pb = bn->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = pb + p * n;
          const double* grow = g + i * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          da[i * k + p] += acc;
        }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      double* db = bn->grad.data();
      const double* pa = an->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa[i * k + p];
          const double* grow = g + i * n;
          double* brow = db + p * n;
          for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: need rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  detail::TensorNode* an = a.impl().get();
  return make_op({n, m}, std::move(out), {a}, [an, m, n](detail::TensorNode& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += self.grad[j * m + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) shape_error("reshape", a.shape(), shape);
  detail::TensorNode* an = a.impl().get();
  return make_op(std::move(shape), a.data(), {a}, [an](detail::TensorNode& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

// Broadcast add of a row vector onto the last dimension.
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (v.rank() != 1 || a.rank() < 1 || a.shape().back() != v.shape()[0])
    shape_error("add_rowvec", a.shape(), v.shape());
  const std::size_t d = v.size();
  const std::size_t rows = a.size() / d;
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = a[r * d + j] + v[j];
  detail::TensorNode* an = a.impl().get();
  detail::TensorNode* vn = v.impl().get();
  return make_op(a.shape(), std::move(out), {a, v}, [an, vn, rows, d](detail::TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) vn->grad[j] += self.grad[r * d + j];
    }
  });
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// slicing / gathering

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  if (a.rank() != 2 || start + len > a.shape()[1])
    throw std::invalid_argument("slice_cols: [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of " + shape_str(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * len);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = a[i * n + start + j];
  detail::TensorNode* an = a.impl().get();
  return make_op({m, len}, std::move(out), {a}, [an, m, n, start, len](detail::TensorNode& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < len; ++j) an->grad[i * n + start + j] += self.grad[i * len + j];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t m = parts[0].shape()[0];
  std::size_t n = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.shape()[0] != m) shape_error("concat_cols", parts[0].shape(), p.shape());
    n += p.shape()[1];
  }
  std::vector<double> out(m * n);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + off + j] = p[i * w + j];
    off += w;
  }
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) widths.push_back(p.shape()[1]);
  std::vector<detail::TensorNode*> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.impl().get());
  return make_op({m, n}, std::move(out), parts, [nodes, widths, m, n](detail::TensorNode& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      const std::size_t w = widths[k];
      if (nodes[k]->requires_grad) {
        nodes[k]->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) nodes[k]->grad[i * w + j] += self.grad[i * n + off + j];
      }
      off += w;
    }
  });
}

// Plane i of a rank-3 tensor, e.g. one attention head of an [h,K,N] bias.
inline Tensor slice_plane(const Tensor& a, std::size_t i) {
  if (a.rank() != 3 || i >= a.shape()[0])
    throw std::invalid_argument("slice_plane: index " + std::to_string(i) + " out of " + shape_str(a.shape()));
  const std::size_t d1 = a.shape()[1], d2 = a.shape()[2];
  const std::size_t block = d1 * d2;
  std::vector<double> out(a.data().begin() + i * block, a.data().begin() + (i + 1) * block);
  detail::TensorNode* an = a.impl().get();
  return make_op({d1, d2}, std::move(out), {a}, [an, i, block](detail::TensorNode& self) {
    an->ensure_grad();
    for (std::size_t j = 0; j < block; ++j) an->grad[i * block + j] += self.grad[j];
  });
}

inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  if (a.rank() != 2) throw std::invalid_argument("gather_rows: need rank 2, got " + shape_str(a.shape()));
  const std::size_t n = a.shape()[1];
  std::vector<double> out(idx.size() * n);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= a.shape()[0]) throw std::invalid_argument("gather_rows: row index out of range");
    std::copy_n(a.data().begin() + idx[r] * n, n, out.begin() + r * n);
  }
  detail::TensorNode* an = a.impl().get();
  return make_op({idx.size(), n}, std::move(out), {a}, [an, idx, n](detail::TensorNode& self) {
    an->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) an->grad[idx[r] * n + j] += self.grad[r * n + j];
  });
}

// One element per row, column chosen per row: out[i] = a[i, cols[i]].
inline Tensor take_per_row(const Tensor& a, const std::vector<std::size_t>& cols) {
  if (a.rank() != 2 || cols.size() != a.shape()[0])
    throw std::invalid_argument("take_per_row: need one column index per row of " + shape_str(a.shape()));
  const std::size_t n = a.shape()[1];
  std::vector<double> out(cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= n) throw std::invalid_argument("take_per_row: column index out of range");
    out[i] = a[i * n + cols[i]];
  }
  detail::TensorNode* an = a.impl().get();
  return make_op({cols.size()}, std::move(out), {a}, [an, cols, n](detail::TensorNode& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < cols.size(); ++i) an->grad[i * n + cols[i]] += self.grad[i];
  });
}

// Per-channel max over a fixed neighbor index set: out[m,c] = max_k feat[nbr[m][k], c].
inline Tensor rowmax_pool(const Tensor& feat, const std::vector<std::vector<std::size_t>>& neighbors) {
  if (feat.rank() != 2) throw std::invalid_argument("rowmax_pool: need rank 2, got " + shape_str(feat.shape()));
  const std::size_t c = feat.shape()[1];
  const std::size_t m = neighbors.size();
  std::vector<double> out(m * c);
  auto argmax = std::make_shared<std::vector<std::size_t>>(m * c);
  for (std::size_t i = 0; i < m; ++i) {
    if (neighbors[i].empty()) throw std::invalid_argument("rowmax_pool: empty neighbor set");
    for (std::size_t j = 0; j < c; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_row = 0;
      for (std::size_t r : neighbors[i]) {
        const double v = feat[r * c + j];
        if (v > best) {
          best = v;
          best_row = r;
        }
      }
      out[i * c + j] = best;
      (*argmax)[i * c + j] = best_row;
    }
  }
  detail::TensorNode* fn = feat.impl().get();
  return make_op({m, c}, std::move(out), {feat}, [fn, argmax, m, c](detail::TensorNode& self) {
    fn->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) fn->grad[(*argmax)[i * c + j] * c + j] += self.grad[i * c + j];
  });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  detail::TensorNode* an = a.impl().get();
  return make_op({1}, {s}, {a}, [an](detail::TensorNode& self) {
    an->ensure_grad();
    for (double& g : an->grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// ---------------------------------------------------------------------------
// softmax / layer norm

namespace detail {

inline Tensor softmax_impl(const Tensor& logits, const Tensor* bias) {
  const std::size_t n = logits.shape().back();
  const std::size_t rows = logits.size() / n;
  bool broadcast = false;
  if (bias) {
    if (bias->shape() == logits.shape()) {
      broadcast = false;
    } else if (logits.rank() == 3 && bias->rank() == 2 && bias->shape()[0] == logits.shape()[1] &&
               bias->shape()[1] == logits.shape()[2]) {
      broadcast = true;  // [K,N] bias under [h,K,N] logits
    } else {
      shape_error("softmax_rows: bias", logits.shape(), bias->shape());
    }
  }
  const std::size_t bias_period = bias ? bias->size() : 0;

  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      double v = logits[r * n + j];
      if (bias) v += (*bias)[broadcast ? (r * n + j) % bias_period : r * n + j];
      if (std::isnan(v)) throw std::runtime_error("softmax_rows: NaN in input");
      out[r * n + j] = v;
      mx = std::max(mx, v);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = std::exp(out[r * n + j] - mx);
      denom += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= denom;
  }

  std::vector<Tensor> parents = {logits};
  if (bias) parents.push_back(*bias);
  detail::TensorNode* ln = logits.impl().get();
  detail::TensorNode* bn = bias ? bias->impl().get() : nullptr;
  return make_op(logits.shape(), std::move(out), std::move(parents),
                 [ln, bn, rows, n, broadcast, bias_period](detail::TensorNode& self) {
                   // d logit = s * (g - sum(g*s)); bias gradient is identical
                   // (summed over the broadcast heads when bias is [K,N]).
                   std::vector<double> dl(self.value.size());
                   for (std::size_t r = 0; r < rows; ++r) {
                     double dot = 0.0;
                     for (std::size_t j = 0; j < n; ++j)
                       dot += self.grad[r * n + j] * self.value[r * n + j];
                     for (std::size_t j = 0; j < n; ++j)
                       dl[r * n + j] = self.value[r * n + j] * (self.grad[r * n + j] - dot);
                   }
                   if (ln->requires_grad) {
                     ln->ensure_grad();
                     for (std::size_t i = 0; i < dl.size(); ++i) ln->grad[i] += dl[i];
                   }
                   if (bn && bn->requires_grad) {
                     bn->ensure_grad();
                     for (std::size_t i = 0; i < dl.size(); ++i)
                       bn->grad[broadcast ? i % bias_period : i] += dl[i];
                   }
                 });
}

}  // namespace detail

inline Tensor softmax_rows(const Tensor& logits) { return detail::softmax_impl(logits, nullptr); }

inline Tensor softmax_rows(const Tensor& logits, const Tensor& bias) {
  return detail::softmax_impl(logits, &bias);
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    shape_error("layer_norm", x.shape(), gain.shape());
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x[r * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (x[r * d + j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gain[j] + bias[j];
    }
  }
  detail::TensorNode* xn = x.impl().get();
  detail::TensorNode* gn = gain.impl().get();
  detail::TensorNode* bn = bias.impl().get();
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [xn, gn, bn, inv_sigma, xhat, rows, d](detail::TensorNode& self) {
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double is = (*inv_sigma)[r];
                     double mean_g = 0.0, mean_gx = 0.0;
                     std::vector<double> gvec(d);
                     for (std::size_t j = 0; j < d; ++j) {
                       gvec[j] = self.grad[r * d + j] * gn->value[j];
                       mean_g += gvec[j];
                       mean_gx += gvec[j] * (*xhat)[r * d + j];
                     }
                     mean_g /= static_cast<double>(d);
                     mean_gx /= static_cast<double>(d);
                     if (xn->requires_grad) {
                       xn->ensure_grad();
                       for (std::size_t j = 0; j < d; ++j)
                         xn->grad[r * d + j] +=
                             is * (gvec[j] - mean_g - (*xhat)[r * d + j] * mean_gx);
                     }
                     if (gn->requires_grad) {
                       gn->ensure_grad();
                       for (std::size_t j = 0; j < d; ++j)
                         gn->grad[j] += self.grad[r * d + j] * (*xhat)[r * d + j];
                     }
                     if (bn->requires_grad) {
                       bn->ensure_grad();
                       for (std::size_t j = 0; j < d; ++j) bn->grad[j] += self.grad[r * d + j];
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// trilinear volumetric gather
//
// values holds one row per grid node of an nx*ny*nz volume (node index
// (ix*ny + iy)*nz + iz). coords are continuous grid coordinates; each output
// row interpolates the 8 surrounding node rows. Differentiable w.r.t. the
// node values only; coordinates are plain data by design.

inline Tensor trilinear_gather(const Tensor& values, std::size_t nx, std::size_t ny, std::size_t nz,
                               const std::vector<double>& coords) {
  if (values.rank() != 2 || values.shape()[0] != nx * ny * nz)
    throw std::invalid_argument("trilinear_gather: values " + shape_str(values.shape()) +
                                " do not cover a " + std::to_string(nx) + "x" + std::to_string(ny) +
                                "x" + std::to_string(nz) + " grid");
  if (nx < 2 || ny < 2 || nz < 2) throw std::invalid_argument("trilinear_gather: grid must be >= 2 per axis");
  if (coords.size() % 3 != 0) throw std::invalid_argument("trilinear_gather: coords must be P x 3");
  const std::size_t p = coords.size() / 3;
  const std::size_t h = values.shape()[1];

  struct Cell {
    std::size_t base[8];
    double w[8];
  };
  auto cells = std::make_shared<std::vector<Cell>>(p);
  auto clamp_axis = [](double c, std::size_t n) {
    c = std::clamp(c, 0.0, static_cast<double>(n - 1));
    std::size_t i = std::min(static_cast<std::size_t>(c), n - 2);
    return std::pair<std::size_t, double>(i, c - static_cast<double>(i));
  };
  std::vector<double> out(p * h, 0.0);
  for (std::size_t q = 0; q < p; ++q) {
    auto [ix, fx] = clamp_axis(coords[3 * q + 0], nx);
    auto [iy, fy] = clamp_axis(coords[3 * q + 1], ny);
    auto [iz, fz] = clamp_axis(coords[3 * q + 2], nz);
    Cell& cell = (*cells)[q];
    int corner = 0;
    for (int dx = 0; dx < 2; ++dx)
      for (int dy = 0; dy < 2; ++dy)
        for (int dz = 0; dz < 2; ++dz, ++corner) {
          cell.base[corner] = ((ix + dx) * ny + (iy + dy)) * nz + (iz + dz);
          cell.w[corner] = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
        }
    for (int c = 0; c < 8; ++c) {
      const double w = cell.w[c];
      const double* row = values.data().data() + cell.base[c] * h;
      double* orow = out.data() + q * h;
      for (std::size_t j = 0; j < h; ++j) orow[j] += w * row[j];
    }
  }
  detail::TensorNode* vn = values.impl().get();
  return make_op({p, h}, std::move(out), {values}, [vn, cells, p, h](detail::TensorNode& self) {
    vn->ensure_grad();
    for (std::size_t q = 0; q < p; ++q) {
      const Cell& cell = (*cells)[q];
      for (int c = 0; c < 8; ++c) {
        const double w = cell.w[c];
        double* row = vn->grad.data() + cell.base[c] * h;
        const double* grow = self.grad.data() + q * h;
        for (std::size_t j = 0; j < h; ++j) row[j] += w * grow[j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// parameters

class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor t) : name_(std::move(name)), tensor_(std::move(t)) {}

  const std::string& name() const { return name_; }
  Tensor& tensor() { return tensor_; }
  const Tensor& tensor() const { return tensor_; }

 private:
  std::string name_;
  Tensor tensor_;
};

// Ordered registry of named parameters; names are unique, creation order is
// the checkpoint record order.
class ParamStore {
 public:
  Parameter& create(const std::string& name, const Shape& shape, Rng& rng, double limit) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = uniform(rng, -limit, limit);
    return insert(name, Tensor::leaf(shape, std::move(v)));
  }

  Parameter& create_zeros(const std::string& name, const Shape& shape) {
    return insert(name, Tensor::leaf(shape, std::vector<double>(numel(shape), 0.0)));
  }

  Parameter& create_full(const std::string& name, const Shape& shape, double v) {
    return insert(name, Tensor::leaf(shape, std::vector<double>(numel(shape), v)));
  }

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }

  std::vector<Parameter*> pointers() {
    std::vector<Parameter*> out;
    for (Parameter& p : params_) out.push_back(&p);
    return out;
  }

  Parameter* find(const std::string& name) {
    for (Parameter& p : params_)
      if (p.name() == name) return &p;
    return nullptr;
  }

  void zero_grad() {
    for (Parameter& p : params_) p.tensor().zero_grad();
  }

 private:
  Parameter& insert(const std::string& name, Tensor t) {
    if (find(name)) throw std::invalid_argument("parameter name not unique: " + name);
    params_.emplace_back(name, std::move(t));
    return params_.back();
  }

  std::deque<Parameter> params_;
};

// ---------------------------------------------------------------------------
// gradient verification

// Max over all parameter elements of |analytic - central difference| /
// max(1, |central difference|). loss_fn must rebuild the graph and be
// deterministic given the current parameter values.
inline double finite_diff_check(const std::vector<Parameter*>& params,
                                const std::function<Tensor()>& loss_fn, double step) {
  for (Parameter* p : params) p->tensor().zero_grad();
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->tensor().grad());

  double max_err = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::vector<double>& v = params[k]->tensor().mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + step;
      const double lp = loss_fn().item();
      v[i] = orig - step;
      const double lm = loss_fn().item();
      v[i] = orig;
      const double numeric = (lp - lm) / (2.0 * step);
      const double err = std::fabs(analytic[k][i] - numeric) / std::max(1.0, std::fabs(numeric));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

// ---------------------------------------------------------------------------
// binary dump: magic "VDT1", u32 rank, u32 dims[rank], f64 payload (LE)

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("VDT1", 4);
  const std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
  os.write(reinterpret_cast<const char*>(&rank), 4);
  for (std::size_t d : t.shape()) {
    const std::uint32_t dim = static_cast<std::uint32_t>(d);
    os.write(reinterpret_cast<const char*>(&dim), 4);
  }
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
}

inline Tensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "VDT1", 4) != 0)
    throw std::runtime_error("tensor dump: bad magic");
  std::uint32_t rank = 0;
  if (!is.read(reinterpret_cast<char*>(&rank), 4)) throw std::runtime_error("tensor dump: truncated header");
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t dim = 0;
    if (!is.read(reinterpret_cast<char*>(&dim), 4)) throw std::runtime_error("tensor dump: truncated dims");
    shape[i] = dim;
  }
  std::vector<double> data(numel(shape));
  if (!is.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(double))))
    throw std::runtime_error("tensor dump: truncated payload");
  return Tensor::constant(std::move(shape), std::move(data));
}

}  // namespace vdetr
