#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "msat/nn/tensor.hpp"
#include "msat/rng.hpp"

namespace msat::nn {

// ---------------------------------------------------------------------------
// Grad mode. Ops record backward closures only while grad mode is enabled and
// at least one input requires grad. Evaluation paths wrap themselves in a
// NoGradGuard so no graph is built.
// ---------------------------------------------------------------------------

namespace detail {
inline thread_local int no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

struct NoGradGuard {
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---------------------------------------------------------------------------
// Graph node / variable handle
// ---------------------------------------------------------------------------

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily in the backward pass
  bool requires_grad = false;
  bool grad_alloc = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward;

  void ensure_grad() {
    if (!grad_alloc) {
      grad = Tensor<T>(value.shape());
      grad_alloc = true;
    }
  }

  void acc_grad(const T* src, int64_t n) {
    ensure_grad();
    T* g = grad.data();
    for (int64_t i = 0; i < n; ++i) g[i] += src[i];
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var parameter(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  Tensor<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  void zero_grad() {
    if (node_ && node_->grad_alloc) {
      std::fill(node_->grad.flat().begin(), node_->grad.flat().end(), T{0});
    }
  }

  const std::vector<int64_t>& shape() const { return node_->value.shape(); }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
std::shared_ptr<Node<T>> make_result(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                                     std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    if (needs) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward = std::move(backward);
    }
  }
  return n;
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward engine: reverse topological order from a scalar root.
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Var<T>& root) {
  auto* r = root.node().get();
  if (!r) throw ShapeError("backward: undefined root");
  if (root.value().numel() != 1) throw ShapeError("backward: root must be a scalar");
  if (!r->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(r, 0);
  visited.insert(r);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  r->ensure_grad();
  r->grad[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise and affine ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (!a.value().same_shape(b.value())) throw ShapeError("add: shape mismatch");
  const int64_t n = a.value().numel();
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  auto an = a.node();
  auto bn = b.node();
  return Var<T>(detail::make_result<T>(
      std::move(out), {an, bn}, [an, bn, n](Node<T>& o) {
        if (an->requires_grad) an->acc_grad(o.grad.data(), n);
        if (bn->requires_grad) bn->acc_grad(o.grad.data(), n);
      }));
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (!a.value().same_shape(b.value())) throw ShapeError("mul: shape mismatch");
  const int64_t n = a.value().numel();
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  auto an = a.node();
  auto bn = b.node();
  Tensor<T> av = a.value(), bv = b.value();
  return Var<T>(detail::make_result<T>(
      std::move(out), {an, bn}, [an, bn, av, bv, n](Node<T>& o) {
        const T* g = o.grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          T* ga = an->grad.data();
          const T* pb2 = bv.data();
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          T* gb = bn->grad.data();
          const T* pa2 = av.data();
          for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
        }
      }));
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  const int64_t n = a.value().numel();
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  auto an = a.node();
  return Var<T>(detail::make_result<T>(std::move(out), {an}, [an, s, n](Node<T>& o) {
    an->ensure_grad();
    T* ga = an->grad.data();
    const T* g = o.grad.data();
    for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * s;
  }));
}

// x: (..., D) treated as rows, bias: (D)
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  const int64_t d = bias.value().numel();
  const int64_t n = x.value().numel();
  if (d == 0 || n % d != 0) throw ShapeError("add_bias: width mismatch");
  const int64_t rows = n / d;
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  const T* pb = bias.value().data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
  }
  auto xn = x.node();
  auto bn = bias.node();
  return Var<T>(detail::make_result<T>(
      std::move(out), {xn, bn}, [xn, bn, rows, d](Node<T>& o) {
        const T* g = o.grad.data();
        if (xn->requires_grad) xn->acc_grad(g, rows * d);
        if (bn->requires_grad) {
          bn->ensure_grad();
          T* gb = bn->grad.data();
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
          }
        }
      }));
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  const int64_t n = x.value().numel();
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] > T{0} ? px[i] : T{0};
  auto xn = x.node();
  Tensor<T> xv = x.value();
  return Var<T>(detail::make_result<T>(std::move(out), {xn}, [xn, xv, n](Node<T>& o) {
    xn->ensure_grad();
    T* gx = xn->grad.data();
    const T* g = o.grad.data();
    const T* px2 = xv.data();
    for (int64_t i = 0; i < n; ++i) gx[i] += px2[i] > T{0} ? g[i] : T{0};
  }));
}

// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  const int64_t n = x.value().numel();
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  T* po = out.data();
  const T inv_sqrt2 = static_cast<T>(0.7071067811865475244);
  for (int64_t i = 0; i < n; ++i) {
    po[i] = px[i] * static_cast<T>(0.5) * (T{1} + std::erf(px[i] * inv_sqrt2));
  }
  auto xn = x.node();
  Tensor<T> xv = x.value();
  return Var<T>(detail::make_result<T>(std::move(out), {xn}, [xn, xv, n](Node<T>& o) {
    xn->ensure_grad();
    T* gx = xn->grad.data();
    const T* g = o.grad.data();
    const T* px2 = xv.data();
    const T inv_sqrt2 = static_cast<T>(0.7071067811865475244);
    const T inv_sqrt2pi = static_cast<T>(0.3989422804014326779);
    for (int64_t i = 0; i < n; ++i) {
      const T v = px2[i];
      const T cdf = static_cast<T>(0.5) * (T{1} + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(static_cast<T>(-0.5) * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  }));
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul: incompatible shapes " + Tensor<T>::shape_str(sa) + " x " +
                     Tensor<T>::shape_str(sb));
  }
  const int64_t m = sa[0], k = sa[1], p = sb[1];
  Tensor<T> out({m, p});
  detail::CMatMap<T> A(a.value().data(), m, k);
  detail::CMatMap<T> B(b.value().data(), k, p);
  detail::MatMap<T> C(out.data(), m, p);
  C.noalias() = A * B;
  auto an = a.node();
  auto bn = b.node();
  Tensor<T> av = a.value(), bv = b.value();
  return Var<T>(detail::make_result<T>(
      std::move(out), {an, bn}, [an, bn, av, bv, m, k, p](Node<T>& o) {
        detail::CMatMap<T> G(o.grad.data(), m, p);
        if (an->requires_grad) {
          an->ensure_grad();
          detail::MatMap<T> GA(an->grad.data(), m, k);
          detail::CMatMap<T> B2(bv.data(), k, p);
          GA.noalias() += G * B2.transpose();
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::MatMap<T> GB(bn->grad.data(), k, p);
          detail::CMatMap<T> A2(av.data(), m, k);
          GB.noalias() += A2.transpose() * G;
        }
      }));
}

// Batched matmul over the leading dimension with optional transposes of the
// trailing two dims: out[i] = opA(a[i]) * opB(b[i]).
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0]) throw ShapeError("bmm: need (N,*,*) pairs");
  const int64_t n = sa[0];
  const int64_t m = trans_a ? sa[2] : sa[1];
  const int64_t k = trans_a ? sa[1] : sa[2];
  const int64_t kb = trans_b ? sb[2] : sb[1];
  const int64_t p = trans_b ? sb[1] : sb[2];
  if (k != kb) throw ShapeError("bmm: inner dim mismatch");
  Tensor<T> out({n, m, p});
  const int64_t stra = sa[1] * sa[2], strb = sb[1] * sb[2], stro = m * p;
  for (int64_t i = 0; i < n; ++i) {
    detail::CMatMap<T> A(a.value().data() + i * stra, sa[1], sa[2]);
    detail::CMatMap<T> B(b.value().data() + i * strb, sb[1], sb[2]);
    detail::MatMap<T> C(out.data() + i * stro, m, p);
    if (!trans_a && !trans_b) C.noalias() = A * B;
    else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
    else C.noalias() = A.transpose() * B.transpose();
  }
  auto an = a.node();
  auto bn = b.node();
  Tensor<T> av = a.value(), bv = b.value();
  auto sa2 = sa, sb2 = sb;
  return Var<T>(detail::make_result<T>(
      std::move(out), {an, bn},
      [an, bn, av, bv, sa2, sb2, trans_a, trans_b, n, m, p, stra, strb, stro](Node<T>& o) {
        for (int64_t i = 0; i < n; ++i) {
          detail::CMatMap<T> G(o.grad.data() + i * stro, m, p);
          detail::CMatMap<T> A(av.data() + i * stra, sa2[1], sa2[2]);
          detail::CMatMap<T> B(bv.data() + i * strb, sb2[1], sb2[2]);
          if (an->requires_grad) {
            an->ensure_grad();
            detail::MatMap<T> GA(an->grad.data() + i * stra, sa2[1], sa2[2]);
            // dA_eff = G * B_eff^T, transposed back into storage layout if needed
            if (!trans_a) {
              if (!trans_b) GA.noalias() += G * B.transpose();
              else GA.noalias() += G * B;
            } else {
              if (!trans_b) GA.noalias() += B * G.transpose();
              else GA.noalias() += B.transpose() * G.transpose();
            }
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            detail::MatMap<T> GB(bn->grad.data() + i * strb, sb2[1], sb2[2]);
            // dB_eff = A_eff^T * G
            if (!trans_b) {
              if (!trans_a) GB.noalias() += A.transpose() * G;
              else GB.noalias() += A * G;
            } else {
              if (!trans_a) GB.noalias() += G.transpose() * A;
              else GB.noalias() += G.transpose() * A.transpose();
            }
          }
        }
      }));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<int64_t> shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  auto xn = x.node();
  const int64_t n = out.numel();
  return Var<T>(detail::make_result<T>(std::move(out), {xn}, [xn, n](Node<T>& o) {
    xn->acc_grad(o.grad.data(), n);
  }));
}

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<int64_t>& perm) {
  const auto& s = x.shape();
  const int64_t rank = static_cast<int64_t>(s.size());
  if (static_cast<int64_t>(perm.size()) != rank) throw ShapeError("permute: rank mismatch");
  std::vector<int64_t> out_shape(rank);
  for (int64_t i = 0; i < rank; ++i) out_shape[i] = s[perm[i]];

  std::vector<int64_t> in_strides(rank, 1);
  for (int64_t i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * s[i + 1];
  // stride in the input for each output axis
  std::vector<int64_t> strides(rank);
  for (int64_t i = 0; i < rank; ++i) strides[i] = in_strides[perm[i]];

  const int64_t n = x.value().numel();
  Tensor<T> out(out_shape);
  const T* px = x.value().data();
  T* po = out.data();
  std::vector<int64_t> idx(rank, 0);
  int64_t src = 0;
  for (int64_t i = 0; i < n; ++i) {
    po[i] = px[src];
    for (int64_t d = rank - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) {
        src += strides[d];
        break;
      }
      src -= strides[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  auto xn = x.node();
  return Var<T>(detail::make_result<T>(
      std::move(out), {xn}, [xn, out_shape, strides, rank, n](Node<T>& o) {
        xn->ensure_grad();
        T* gx = xn->grad.data();
        const T* g = o.grad.data();
        std::vector<int64_t> idx2(rank, 0);
        int64_t src = 0;
        for (int64_t i = 0; i < n; ++i) {
          gx[src] += g[i];
          for (int64_t d = rank - 1; d >= 0; --d) {
            if (++idx2[d] < out_shape[d]) {
              src += strides[d];
              break;
            }
            src -= strides[d] * (out_shape[d] - 1);
            idx2[d] = 0;
          }
        }
      }));
}

// Concatenate along an axis; all parts share the remaining dims.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto& s0 = parts[0].shape();
  const int64_t rank = static_cast<int64_t>(s0.size());
  if (axis < 0 || axis >= rank) throw ShapeError("concat: bad axis");
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    const auto& sp = p.shape();
    if (static_cast<int64_t>(sp.size()) != rank) throw ShapeError("concat: rank mismatch");
    for (int64_t d = 0; d < rank; ++d) {
      if (d != axis && sp[d] != s0[d]) throw ShapeError("concat: shape mismatch");
    }
    axis_total += sp[axis];
  }
  std::vector<int64_t> out_shape = s0;
  out_shape[axis] = axis_total;
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= s0[d];
  for (int64_t d = axis + 1; d < rank; ++d) inner *= s0[d];

  Tensor<T> out(out_shape);
  T* po = out.data();
  const int64_t out_row = axis_total * inner;
  std::vector<int64_t> offsets(parts.size());
  {
    int64_t off = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      offsets[pi] = off;
      const int64_t len = parts[pi].shape()[axis] * inner;
      const T* ps = parts[pi].value().data();
      for (int64_t r = 0; r < outer; ++r) {
        std::copy(ps + r * len, ps + (r + 1) * len, po + r * out_row + off);
      }
      off += len;
    }
  }
  std::vector<std::shared_ptr<Node<T>>> pnodes;
  std::vector<int64_t> lens;
  for (const auto& p : parts) {
    pnodes.push_back(p.node());
    lens.push_back(p.shape()[axis] * inner);
  }
  return Var<T>(detail::make_result<T>(
      std::move(out), pnodes, [pnodes, lens, offsets, outer, out_row](Node<T>& o) {
        const T* g = o.grad.data();
        for (size_t pi = 0; pi < pnodes.size(); ++pi) {
          if (!pnodes[pi]->requires_grad) continue;
          pnodes[pi]->ensure_grad();
          T* gp = pnodes[pi]->grad.data();
          for (int64_t r = 0; r < outer; ++r) {
            const T* src = g + r * out_row + offsets[pi];
            T* dst = gp + r * lens[pi];
            for (int64_t i = 0; i < lens[pi]; ++i) dst[i] += src[i];
          }
        }
      }));
}

// Tile a size-1 axis `times` times; backward sums over the tiled copies.
template <typename T>
Var<T> repeat_axis(const Var<T>& x, int64_t axis, int64_t times) {
  const auto& s = x.shape();
  const int64_t rank = static_cast<int64_t>(s.size());
  if (axis < 0 || axis >= rank || s[axis] != 1) throw ShapeError("repeat_axis: axis must have size 1");
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= s[d];
  for (int64_t d = axis + 1; d < rank; ++d) inner *= s[d];
  std::vector<int64_t> out_shape = s;
  out_shape[axis] = times;
  Tensor<T> out(out_shape);
  const T* px = x.value().data();
  T* po = out.data();
  for (int64_t r = 0; r < outer; ++r) {
    for (int64_t t = 0; t < times; ++t) {
      std::copy(px + r * inner, px + (r + 1) * inner, po + (r * times + t) * inner);
    }
  }
  auto xn = x.node();
  return Var<T>(detail::make_result<T>(
      std::move(out), {xn}, [xn, outer, inner, times](Node<T>& o) {
        xn->ensure_grad();
        T* gx = xn->grad.data();
        const T* g = o.grad.data();
        for (int64_t r = 0; r < outer; ++r) {
          for (int64_t t = 0; t < times; ++t) {
            const T* src = g + (r * times + t) * inner;
            T* dst = gx + r * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
          }
        }
      }));
}

// x: (R, D) table, idx: row indices -> (|idx|, D). Backward scatter-adds.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<int64_t> idx) {
  const auto& s = x.shape();
  if (s.size() != 2) throw ShapeError("gather_rows: need 2-D table");
  const int64_t rows = s[0], d = s[1];
  for (int64_t i : idx) {
    if (i < 0 || i >= rows) throw ShapeError("gather_rows: index out of range");
  }
  const int64_t m = static_cast<int64_t>(idx.size());
  Tensor<T> out({m, d});
  const T* px = x.value().data();
  T* po = out.data();
  for (int64_t i = 0; i < m; ++i) {
    std::copy(px + idx[i] * d, px + (idx[i] + 1) * d, po + i * d);
  }
  auto xn = x.node();
  return Var<T>(detail::make_result<T>(
      std::move(out), {xn}, [xn, idx = std::move(idx), m, d](Node<T>& o) {
        xn->ensure_grad();
        T* gx = xn->grad.data();
        const T* g = o.grad.data();
        for (int64_t i = 0; i < m; ++i) {
          T* dst = gx + idx[i] * d;
          const T* src = g + i * d;
          for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      }));
}

// ---------------------------------------------------------------------------
// Normalization / softmax / loss
// ---------------------------------------------------------------------------

// Layer norm over the last dimension. gain/bias: (D).
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                  T eps = static_cast<T>(1e-5)) {
  const int64_t d = gain.value().numel();
  const int64_t n = x.value().numel();
  if (d == 0 || n % d != 0 || bias.value().numel() != d) throw ShapeError("layer_norm: width mismatch");
  const int64_t rows = n / d;
  Tensor<T> out(x.shape());
  std::vector<T> mean(rows), inv_std(rows);
  const T* px = x.value().data();
  const T* pg = gain.value().data();
  const T* pb = bias.value().data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T mu = 0;
    for (int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T istd = T{1} / std::sqrt(var + eps);
    mean[r] = mu;
    inv_std[r] = istd;
    T* orow = po + r * d;
    for (int64_t j = 0; j < d; ++j) orow[j] = pg[j] * (row[j] - mu) * istd + pb[j];
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  Tensor<T> xv = x.value(), gv = gain.value();
  return Var<T>(detail::make_result<T>(
      std::move(out), {xn, gn, bn},
      [xn, gn, bn, xv, gv, mean = std::move(mean), inv_std = std::move(inv_std), rows, d](Node<T>& o) {
        const T* g = o.grad.data();
        const T* px2 = xv.data();
        const T* pg2 = gv.data();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const T* grow = g + r * d;
          const T* xrow = px2 + r * d;
          const T mu = mean[r];
          const T istd = inv_std[r];
          if (gn->requires_grad || bn->requires_grad) {
            for (int64_t j = 0; j < d; ++j) {
              const T xhat = (xrow[j] - mu) * istd;
              if (gn->requires_grad) gn->grad.data()[j] += grow[j] * xhat;
              if (bn->requires_grad) bn->grad.data()[j] += grow[j];
            }
          }
          if (xn->requires_grad) {
            T sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (int64_t j = 0; j < d; ++j) {
              const T xhat = (xrow[j] - mu) * istd;
              const T dxhat = grow[j] * pg2[j];
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat;
            }
            const T inv_d = T{1} / static_cast<T>(d);
            T* gx = xn->grad.data() + r * d;
            for (int64_t j = 0; j < d; ++j) {
              const T xhat = (xrow[j] - mu) * istd;
              const T dxhat = grow[j] * pg2[j];
              gx[j] += istd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
            }
          }
        }
      }));
}

// Row-wise softmax over the last dim of a (R, C) tensor restricted to allowed
// entries (mask != 0). Disallowed entries are exactly zero in the output; rows
// with no allowed entry come out all-zero.
template <typename T>
Var<T> masked_softmax_rows(const Var<T>& x, std::shared_ptr<const std::vector<uint8_t>> mask) {
  const auto& s = x.shape();
  const int64_t n = x.value().numel();
  const int64_t c = s.back();
  const int64_t rows = n / c;
  if (static_cast<int64_t>(mask->size()) != n) throw ShapeError("masked_softmax: mask size mismatch");
  Tensor<T> out(s);
  const T* px = x.value().data();
  T* po = out.data();
  const uint8_t* pm = mask->data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * c;
    const uint8_t* mrow = pm + r * c;
    T* orow = po + r * c;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (int64_t j = 0; j < c; ++j) {
      if (mrow[j]) {
        any = true;
        mx = std::max(mx, row[j]);
      }
    }
    if (!any) {
      std::fill(orow, orow + c, T{0});
      continue;
    }
    T sum = 0;
    for (int64_t j = 0; j < c; ++j) {
      if (mrow[j]) {
        orow[j] = std::exp(row[j] - mx);
        sum += orow[j];
      } else {
        orow[j] = T{0};
      }
    }
    const T inv = T{1} / sum;
    for (int64_t j = 0; j < c; ++j) orow[j] *= inv;
  }
  auto xn = x.node();
  Tensor<T> pv = out;  // shares buffer with the result value
  return Var<T>(detail::make_result<T>(
      std::move(out), {xn}, [xn, pv, mask, rows, c](Node<T>& o) {
        xn->ensure_grad();
        T* gx = xn->grad.data();
        const T* g = o.grad.data();
        const T* p = pv.data();
        const uint8_t* pm2 = mask->data();
        for (int64_t r = 0; r < rows; ++r) {
          const T* prow = p + r * c;
          const T* grow = g + r * c;
          const uint8_t* mrow = pm2 + r * c;
          T dot = 0;
          for (int64_t j = 0; j < c; ++j) {
            if (mrow[j]) dot += grow[j] * prow[j];
          }
          T* gxrow = gx + r * c;
          for (int64_t j = 0; j < c; ++j) {
            if (mrow[j]) gxrow[j] += prow[j] * (grow[j] - dot);
          }
        }
      }));
}

// Summed categorical cross-entropy over active rows of (R, C) logits.
// Stable log-sum-exp forward; backward is softmax minus the target one-hot.
template <typename T>
Var<T> cross_entropy_sum(const Var<T>& logits, std::shared_ptr<const std::vector<int32_t>> targets,
                         std::shared_ptr<const std::vector<uint8_t>> row_active) {
  const auto& s = logits.shape();
  if (s.size() != 2) throw ShapeError("cross_entropy_sum: need (R,C) logits");
  const int64_t rows = s[0], c = s[1];
  if (static_cast<int64_t>(targets->size()) != rows ||
      static_cast<int64_t>(row_active->size()) != rows) {
    throw ShapeError("cross_entropy_sum: target/mask size mismatch");
  }
  const T* px = logits.value().data();
  T total = 0;
  for (int64_t r = 0; r < rows; ++r) {
    if (!(*row_active)[r]) continue;
    const int32_t t = (*targets)[r];
    if (t < 0 || t >= c) throw ShapeError("cross_entropy_sum: target out of range");
    const T* row = px + r * c;
    T mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (int64_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    total += mx + std::log(sum) - row[t];
  }
  auto xn = logits.node();
  Tensor<T> xv = logits.value();
  return Var<T>(detail::make_result<T>(
      Tensor<T>::scalar(total), {xn}, [xn, xv, targets, row_active, rows, c](Node<T>& o) {
        xn->ensure_grad();
        const T g0 = o.grad[0];
        T* gx = xn->grad.data();
        const T* px2 = xv.data();
        for (int64_t r = 0; r < rows; ++r) {
          if (!(*row_active)[r]) continue;
          const T* row = px2 + r * c;
          T mx = row[0];
          for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
          T sum = 0;
          for (int64_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
          const T inv = T{1} / sum;
          T* grow = gx + r * c;
          for (int64_t j = 0; j < c; ++j) grow[j] += g0 * std::exp(row[j] - mx) * inv;
          grow[(*targets)[r]] -= g0;
        }
      }));
}

// ---------------------------------------------------------------------------
// Convolution support: 3x3, stride 1, zero pad 1 via im2col + matmul.
// Input (N, C, H, W) -> (N*H*W, C*9) patches.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> im2col_3x3(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("im2col_3x3: need (N,C,H,W)");
  const int64_t n = s[0], ch = s[1], h = s[2], w = s[3];
  Tensor<T> out({n * h * w, ch * 9});
  const T* px = x.value().data();
  T* po = out.data();
  for (int64_t ni = 0; ni < n; ++ni) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t xx = 0; xx < w; ++xx) {
        T* orow = po + ((ni * h + y) * w + xx) * ch * 9;
        for (int64_t ci = 0; ci < ch; ++ci) {
          const T* plane = px + (ni * ch + ci) * h * w;
          for (int64_t dy = -1; dy <= 1; ++dy) {
            for (int64_t dx = -1; dx <= 1; ++dx) {
              const int64_t yy = y + dy, xx2 = xx + dx;
              const bool in = yy >= 0 && yy < h && xx2 >= 0 && xx2 < w;
              orow[ci * 9 + (dy + 1) * 3 + (dx + 1)] = in ? plane[yy * w + xx2] : T{0};
            }
          }
        }
      }
    }
  }
  auto xn = x.node();
  return Var<T>(detail::make_result<T>(std::move(out), {xn}, [xn, n, ch, h, w](Node<T>& o) {
    xn->ensure_grad();
    T* gx = xn->grad.data();
    const T* g = o.grad.data();
    for (int64_t ni = 0; ni < n; ++ni) {
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t xx = 0; xx < w; ++xx) {
          const T* grow = g + ((ni * h + y) * w + xx) * ch * 9;
          for (int64_t ci = 0; ci < ch; ++ci) {
            T* plane = gx + (ni * ch + ci) * h * w;
            for (int64_t dy = -1; dy <= 1; ++dy) {
              for (int64_t dx = -1; dx <= 1; ++dx) {
                const int64_t yy = y + dy, xx2 = xx + dx;
                if (yy >= 0 && yy < h && xx2 >= 0 && xx2 < w) {
                  plane[yy * w + xx2] += grow[ci * 9 + (dy + 1) * 3 + (dx + 1)];
                }
              }
            }
          }
        }
      }
    }
  }));
}

// Sum of all elements, as a {1}-shaped scalar.
template <typename T>
Var<T> sum_all(const Var<T>& x) {
  const int64_t n = x.value().numel();
  T total = 0;
  const T* px = x.value().data();
  for (int64_t i = 0; i < n; ++i) total += px[i];
  auto xn = x.node();
  return Var<T>(detail::make_result<T>(Tensor<T>::scalar(total), {xn}, [xn, n](Node<T>& o) {
    xn->ensure_grad();
    const T g = o.grad[0];
    T* gx = xn->grad.data();
    for (int64_t i = 0; i < n; ++i) gx[i] += g;
  }));
}

// Inverted dropout with a constant mask drawn from rng. p == 0 is identity.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  const int64_t n = x.value().numel();
  Tensor<T> mask(x.shape());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  T* pm = mask.data();
  for (int64_t i = 0; i < n; ++i) pm[i] = rng.uniform() < p ? T{0} : keep_scale;
  return mul(x, Var<T>::constant(std::move(mask)));
}

// Linear layer helper: x (..., In) -> (..., Out) with weight (In, Out), bias (Out).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& s = x.shape();
  const int64_t in = weight.shape()[0];
  const int64_t out = weight.shape()[1];
  int64_t rows = 1;
  for (size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  if (s.back() != in) throw ShapeError("linear: input width mismatch");
  Var<T> x2 = reshape(x, {rows, in});
  Var<T> y = add_bias(matmul(x2, weight), bias);
  std::vector<int64_t> out_shape(s.begin(), s.end() - 1);
  out_shape.push_back(out);
  return reshape(y, out_shape);
}

}  // namespace msat::nn
