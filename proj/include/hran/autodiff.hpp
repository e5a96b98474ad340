#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hran/error.hpp"
#include "hran/tensor.hpp"

namespace hran {

template <typename T>
class Tape;
template <typename T>
class Var;

// One trainable tensor: a value plus a gradient accumulated across tapes.
template <typename T = double>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
  std::size_t numel() const { return value.numel(); }
};

namespace detail {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;       // d(root)/d(value), summed over backward() calls
  Tensor<T> adjoint;    // scratch for the backward() call in flight
  std::vector<Node*> parents;
  std::function<void(Node&)> pull;  // distributes adjoint into parent adjoints; empty for leaves
  std::size_t index = 0;
};

}  // namespace detail

// Handle to a node on a Tape: cheap to copy, valid while the tape lives.
template <typename T = double>
class Var {
 public:
  Var() = default;
  Var(detail::Node<T>* n, Tape<T>* tape) : node_(n), tape_(tape) {}

  bool valid() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }

  detail::Node<T>* node() const { return node_; }
  Tape<T>* tape() const { return tape_; }

 private:
  detail::Node<T>* node_ = nullptr;
  Tape<T>* tape_ = nullptr;
};

// Arena for one computation graph. Nodes are created in topological order, so a
// reverse sweep over creation indices is a valid reverse topological order and
// visits each node exactly once per backward() call.
template <typename T = double>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) { return make(std::move(value), {}, nullptr); }

  Var<T> zeros(Shape shape) { return constant(Tensor<T>(std::move(shape))); }

  // Leaf bound to a trainable parameter. Cached: one node per parameter per tape,
  // so every use of the parameter inside the graph shares a single gradient slot.
  Var<T> leaf(Parameter<T>& p) {
    auto it = leaf_cache_.find(&p);
    if (it != leaf_cache_.end()) return Var<T>(it->second, this);
    Var<T> v = make(p.value, {}, nullptr);
    leaf_cache_.emplace(&p, v.node());
    bound_.emplace_back(&p, v.node());
    return v;
  }

  // Accumulates d(root)/d(node) into every node's grad. Repeated calls add up.
  void backward(Var<T> root) {
    if (root.tape() != this) throw ContractError("backward: root lives on a different tape");
    if (root.numel() != 1) {
      throw ContractError("backward: root must be scalar-shaped, got " + shape_str(root.shape()));
    }
    const std::size_t top = root.node()->index;
    for (std::size_t i = 0; i <= top; ++i) {
      auto& n = nodes_[i];
      if (n.adjoint.numel() != n.value.numel()) {
        n.adjoint = Tensor<T>(n.value.shape());
      } else {
        n.adjoint.fill(T(0));
      }
    }
    root.node()->adjoint[0] = T(1);
    for (std::size_t i = top + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.pull) n.pull(n);
    }
    for (std::size_t i = 0; i <= top; ++i) {
      auto& n = nodes_[i];
      add_into(n.grad, n.adjoint);
    }
  }

  // Adds the gradient collected on each bound parameter leaf into Parameter::grad.
  // Call once per tape, after backward().
  void harvest_parameter_grads() {
    for (auto& [p, node] : bound_) add_into(p->grad, node->grad);
  }

  Var<T> make(Tensor<T> value, std::vector<detail::Node<T>*> parents,
              std::function<void(detail::Node<T>&)> pull) {
    nodes_.emplace_back();
    auto& n = nodes_.back();
    n.value = std::move(value);
    n.grad = Tensor<T>(n.value.shape());
    n.parents = std::move(parents);
    n.pull = std::move(pull);
    n.index = nodes_.size() - 1;
    return Var<T>(&n, this);
  }

 private:
  std::deque<detail::Node<T>> nodes_;
  std::vector<std::pair<Parameter<T>*, detail::Node<T>*>> bound_;
  std::unordered_map<const Parameter<T>*, detail::Node<T>*> leaf_cache_;
};

namespace detail {

template <typename T>
Tape<T>& same_tape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw ContractError(std::string(op) + ": operands from different tapes");
  return *a.tape();
}

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* a = A + static_cast<std::size_t>(i) * k;
    T* c = C + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = a[p];
      const T* b = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt_acc(const T* A, const T* B, T* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* a = A + static_cast<std::size_t>(i) * k;
    T* c = C + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* b = B + static_cast<std::size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += a[p] * b[p];
      c[j] += acc;
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn_acc(const T* A, const T* B, T* C, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const T* a = A + static_cast<std::size_t>(p) * m;
    const T* b = B + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = a[i];
      T* c = C + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace detail

// --- differentiable operations ---------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("add", a, b);
  check_same_shape("add", a.value(), b.value());
  Tensor<T> out = a.value();
  add_into(out, b.value());
  return tape.make(std::move(out), {a.node(), b.node()}, [](detail::Node<T>& n) {
    add_into(n.parents[0]->adjoint, n.adjoint);
    add_into(n.parents[1]->adjoint, n.adjoint);
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("mul", a, b);
  check_same_shape("mul", a.value(), b.value());
  Tensor<T> out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  return tape.make(std::move(out), {a.node(), b.node()}, [](detail::Node<T>& nd) {
    auto *pa = nd.parents[0], *pb = nd.parents[1];
    for (std::size_t i = 0, m = nd.adjoint.numel(); i < m; ++i) {
      pa->adjoint[i] += nd.adjoint[i] * pb->value[i];
      pb->adjoint[i] += nd.adjoint[i] * pa->value[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) {
    const T x = a.value()[i];
    // Branch keeps exp() argument non-positive for stability.
    out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                       : std::exp(x) / (T(1) + std::exp(x));
  }
  return a.tape()->make(std::move(out), {a.node()}, [](detail::Node<T>& nd) {
    for (std::size_t i = 0, n = nd.adjoint.numel(); i < n; ++i) {
      const T y = nd.value[i];
      nd.parents[0]->adjoint[i] += nd.adjoint[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = std::tanh(a.value()[i]);
  return a.tape()->make(std::move(out), {a.node()}, [](detail::Node<T>& nd) {
    for (std::size_t i = 0, n = nd.adjoint.numel(); i < n; ++i) {
      const T y = nd.value[i];
      nd.parents[0]->adjoint[i] += nd.adjoint[i] * (T(1) - y * y);
    }
  });
}

template <typename T>
Var<T> one_minus(Var<T> a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = T(1) - a.value()[i];
  return a.tape()->make(std::move(out), {a.node()}, [](detail::Node<T>& nd) {
    for (std::size_t i = 0, n = nd.adjoint.numel(); i < n; ++i) {
      nd.parents[0]->adjoint[i] -= nd.adjoint[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = c * a.value()[i];
  return a.tape()->make(std::move(out), {a.node()}, [c](detail::Node<T>& nd) {
    for (std::size_t i = 0, n = nd.adjoint.numel(); i < n; ++i) {
      nd.parents[0]->adjoint[i] += c * nd.adjoint[i];
    }
  });
}

template <typename T>
Var<T> neg(Var<T> a) {
  return scale(a, T(-1));
}

// a: [m x k], b: [k x n] -> [m x n]; a rank-1 b of length k is treated as [k x 1]
// and yields a rank-1 result of length m.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("matmul", a, b);
  if (a.value().rank() != 2 || b.value().rank() < 1 || b.value().rank() > 2) {
    throw DimensionError("matmul: unsupported ranks " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const int m = a.value().dim(0);
  const int k = a.value().dim(1);
  const bool vec = b.value().rank() == 1;
  const int kb = b.value().dim(0);
  const int n = vec ? 1 : b.value().dim(1);
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor<T> out(vec ? Shape{m} : Shape{m, n});
  detail::gemm_acc(a.value().data(), b.value().data(), out.data(), m, k, n);
  return tape.make(std::move(out), {a.node(), b.node()}, [m, k, n](detail::Node<T>& nd) {
    auto *pa = nd.parents[0], *pb = nd.parents[1];
    detail::gemm_nt_acc(nd.adjoint.data(), pb->value.data(), pa->adjoint.data(), m, n, k);
    detail::gemm_tn_acc(pa->value.data(), nd.adjoint.data(), pb->adjoint.data(), k, m, n);
  });
}

// Concatenation along `axis`; all other dimensions must agree. Either operand may
// be the empty tensor (shape [0]) when the result is rank-1.
template <typename T>
Var<T> concat(Var<T> a, Var<T> b, int axis = 0) {
  auto& tape = detail::same_tape("concat", a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != sb.size() || sa.empty()) {
    throw DimensionError("concat: rank mismatch: " + shape_str(sa) + " vs " + shape_str(sb));
  }
  const int rank = static_cast<int>(sa.size());
  if (axis < 0 || axis >= rank) throw ParameterError("concat: invalid axis " + std::to_string(axis));
  for (int i = 0; i < rank; ++i) {
    if (i != axis && sa[i] != sb[i]) {
      throw DimensionError("concat: shapes disagree off axis: " + shape_str(sa) + " vs " +
                           shape_str(sb));
    }
  }
  Shape so = sa;
  so[axis] += sb[axis];
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(sa[i]);
  for (int i = axis + 1; i < rank; ++i) inner *= static_cast<std::size_t>(sa[i]);
  const std::size_t ablk = static_cast<std::size_t>(sa[axis]) * inner;
  const std::size_t bblk = static_cast<std::size_t>(sb[axis]) * inner;
  Tensor<T> out(so);
  for (std::size_t o = 0; o < outer; ++o) {
    T* dst = out.data() + o * (ablk + bblk);
    const T* pa = a.value().data() + o * ablk;
    const T* pb = b.value().data() + o * bblk;
    for (std::size_t i = 0; i < ablk; ++i) dst[i] = pa[i];
    for (std::size_t i = 0; i < bblk; ++i) dst[ablk + i] = pb[i];
  }
  return tape.make(std::move(out), {a.node(), b.node()},
                   [outer, ablk, bblk](detail::Node<T>& nd) {
                     auto *pa = nd.parents[0], *pb = nd.parents[1];
                     for (std::size_t o = 0; o < outer; ++o) {
                       const T* adj = nd.adjoint.data() + o * (ablk + bblk);
                       T* da = pa->adjoint.data() + o * ablk;
                       T* db = pb->adjoint.data() + o * bblk;
                       for (std::size_t i = 0; i < ablk; ++i) da[i] += adj[i];
                       for (std::size_t i = 0; i < bblk; ++i) db[i] += adj[ablk + i];
                     }
                   });
}

// Softmax over the unmasked coordinates of a rank-1 score vector, stabilized by
// max subtraction. Masked coordinates come out exactly 0 and receive no gradient.
template <typename T>
Var<T> masked_softmax(Var<T> scores, std::vector<bool> mask) {
  if (scores.value().rank() != 1) {
    throw DimensionError("masked_softmax: expected rank-1 scores, got " + shape_str(scores.shape()));
  }
  const std::size_t n = scores.numel();
  if (mask.size() != n) {
    throw DimensionError("masked_softmax: mask length " + std::to_string(mask.size()) +
                         " vs scores " + shape_str(scores.shape()));
  }
  T mx = T(0);
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (!any || scores.value()[i] > mx) mx = scores.value()[i];
    any = true;
  }
  if (!any) throw InvalidMaskError("masked_softmax: all positions masked");
  Tensor<T> out(scores.shape());
  T z = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    out[i] = std::exp(scores.value()[i] - mx);
    z += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) out[i] /= z;
  }
  return scores.tape()->make(std::move(out), {scores.node()},
                             [mask = std::move(mask)](detail::Node<T>& nd) {
                               T s = T(0);
                               const std::size_t n = nd.adjoint.numel();
                               for (std::size_t i = 0; i < n; ++i) {
                                 if (mask[i]) s += nd.value[i] * nd.adjoint[i];
                               }
                               for (std::size_t i = 0; i < n; ++i) {
                                 if (mask[i]) {
                                   nd.parents[0]->adjoint[i] += nd.value[i] * (nd.adjoint[i] - s);
                                 }
                               }
                             });
}

// Stable log-softmax over a rank-1 logit vector (full support).
template <typename T>
Var<T> log_softmax(Var<T> logits) {
  if (logits.value().rank() != 1 || logits.numel() == 0) {
    throw DimensionError("log_softmax: expected nonempty rank-1 logits, got " +
                         shape_str(logits.shape()));
  }
  const std::size_t n = logits.numel();
  T mx = logits.value()[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits.value()[i]);
  T z = T(0);
  for (std::size_t i = 0; i < n; ++i) z += std::exp(logits.value()[i] - mx);
  const T lz = std::log(z) + mx;
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) out[i] = logits.value()[i] - lz;
  return logits.tape()->make(std::move(out), {logits.node()}, [](detail::Node<T>& nd) {
    T s = T(0);
    const std::size_t n = nd.adjoint.numel();
    for (std::size_t i = 0; i < n; ++i) s += nd.adjoint[i];
    for (std::size_t i = 0; i < n; ++i) {
      nd.parents[0]->adjoint[i] += nd.adjoint[i] - std::exp(nd.value[i]) * s;
    }
  });
}

// Coordinate i of a rank-1 vector, as a scalar.
template <typename T>
Var<T> pick(Var<T> v, int i) {
  if (v.value().rank() != 1) {
    throw DimensionError("pick: expected rank-1 input, got " + shape_str(v.shape()));
  }
  if (i < 0 || static_cast<std::size_t>(i) >= v.numel()) {
    throw ContractError("pick: index " + std::to_string(i) + " out of range for " +
                        shape_str(v.shape()));
  }
  return v.tape()->make(Tensor<T>::scalar(v.value()[static_cast<std::size_t>(i)]), {v.node()},
                        [i](detail::Node<T>& nd) {
                          nd.parents[0]->adjoint[static_cast<std::size_t>(i)] += nd.adjoint[0];
                        });
}

template <typename T>
Var<T> dot(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("dot", a, b);
  check_same_shape("dot", a.value(), b.value());
  T acc = T(0);
  for (std::size_t i = 0, n = a.numel(); i < n; ++i) acc += a.value()[i] * b.value()[i];
  return tape.make(Tensor<T>::scalar(acc), {a.node(), b.node()}, [](detail::Node<T>& nd) {
    auto *pa = nd.parents[0], *pb = nd.parents[1];
    const T g = nd.adjoint[0];
    for (std::size_t i = 0, n = pa->value.numel(); i < n; ++i) {
      pa->adjoint[i] += g * pb->value[i];
      pb->adjoint[i] += g * pa->value[i];
    }
  });
}

// Sum of all entries, as a scalar.
template <typename T>
Var<T> sum(Var<T> v) {
  T acc = T(0);
  for (std::size_t i = 0, n = v.numel(); i < n; ++i) acc += v.value()[i];
  return v.tape()->make(Tensor<T>::scalar(acc), {v.node()}, [](detail::Node<T>& nd) {
    const T g = nd.adjoint[0];
    for (std::size_t i = 0, n = nd.parents[0]->value.numel(); i < n; ++i) {
      nd.parents[0]->adjoint[i] += g;
    }
  });
}

// Rank-1 vector assembled from k scalar nodes.
template <typename T>
Var<T> stack_scalars(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("stack_scalars: empty input");
  Tape<T>* tape = xs[0].tape();
  Tensor<T> out(Shape{static_cast<int>(xs.size())});
  std::vector<detail::Node<T>*> parents;
  parents.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].tape() != tape) throw ContractError("stack_scalars: operands from different tapes");
    if (xs[i].numel() != 1) {
      throw DimensionError("stack_scalars: element " + std::to_string(i) + " is not scalar: " +
                           shape_str(xs[i].shape()));
    }
    out[i] = xs[i].value()[0];
    parents.push_back(xs[i].node());
  }
  return tape->make(std::move(out), std::move(parents), [](detail::Node<T>& nd) {
    for (std::size_t i = 0; i < nd.parents.size(); ++i) {
      nd.parents[i]->adjoint[0] += nd.adjoint[i];
    }
  });
}

// sum_j w[j] * items[j]; all items share one shape, w is rank-1 of matching length.
template <typename T>
Var<T> weighted_sum(Var<T> w, const std::vector<Var<T>>& items) {
  if (w.value().rank() != 1) {
    throw DimensionError("weighted_sum: weights must be rank-1, got " + shape_str(w.shape()));
  }
  if (items.empty() || items.size() != w.numel()) {
    throw DimensionError("weighted_sum: " + std::to_string(items.size()) + " items vs weights " +
                         shape_str(w.shape()));
  }
  Tape<T>* tape = w.tape();
  for (std::size_t j = 0; j < items.size(); ++j) {
    if (items[j].tape() != tape) throw ContractError("weighted_sum: operands from different tapes");
    check_same_shape("weighted_sum", items[0].value(), items[j].value());
  }
  Tensor<T> out(items[0].shape());
  for (std::size_t j = 0; j < items.size(); ++j) {
    const T wj = w.value()[j];
    const auto& it = items[j].value();
    for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] += wj * it[i];
  }
  std::vector<detail::Node<T>*> parents;
  parents.reserve(items.size() + 1);
  parents.push_back(w.node());
  for (const auto& it : items) parents.push_back(it.node());
  return tape->make(std::move(out), std::move(parents), [](detail::Node<T>& nd) {
    auto* pw = nd.parents[0];
    const std::size_t n = nd.adjoint.numel();
    for (std::size_t j = 0; j + 1 < nd.parents.size(); ++j) {
      auto* pi = nd.parents[j + 1];
      const T wj = pw->value[j];
      T acc = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        acc += nd.adjoint[i] * pi->value[i];
        pi->adjoint[i] += wj * nd.adjoint[i];
      }
      pw->adjoint[j] += acc;
    }
  });
}

// Row i of a rank-2 matrix; the gradient accumulates into that row only.
template <typename T>
Var<T> row(Var<T> m, int i) {
  if (m.value().rank() != 2) {
    throw DimensionError("row: expected rank-2 input, got " + shape_str(m.shape()));
  }
  const int rows = m.value().dim(0);
  const int cols = m.value().dim(1);
  if (i < 0 || i >= rows) {
    throw ContractError("row: index " + std::to_string(i) + " out of range for " +
                        shape_str(m.shape()));
  }
  Tensor<T> out(Shape{cols});
  const T* src = m.value().data() + static_cast<std::size_t>(i) * cols;
  for (int j = 0; j < cols; ++j) out[static_cast<std::size_t>(j)] = src[j];
  return m.tape()->make(std::move(out), {m.node()}, [i, cols](detail::Node<T>& nd) {
    T* dst = nd.parents[0]->adjoint.data() + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) dst[j] += nd.adjoint[static_cast<std::size_t>(j)];
  });
}

}  // namespace hran
