#pragma once

// Private helpers shared by the op translation units. Not installed.

#include <initializer_list>
#include <memory>
#include <utility>

#include "rawgat/tensor.hpp"

namespace rawgat::opdetail {

template <class S>
using NodeP = std::shared_ptr<detail::NodeT<S>>;

template <class S>
inline bool tracked(const NodeP<S>& n) {
  return n && (n->requires_grad || n->needs_grad);
}

template <class S>
NodeP<S> new_node(Shape shape, const char* op) {
  auto n = std::make_shared<detail::NodeT<S>>();
  n->data.assign(static_cast<size_t>(shape_numel(shape)), S(0));
  n->shape = std::move(shape);
  n->op = op;
  return n;
}

template <class S>
void check_defined(const TensorT<S>& t, const char* op) {
  require(t.defined(), ErrorKind::contract,
          concat_msg(op, ": undefined tensor"));
}

inline int norm_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  require(a >= 0 && a < rank, ErrorKind::dimension,
          concat_msg(op, ": axis ", axis, " out of range for rank ", rank));
  return a;
}

// Decomposition of a flat index space around one axis:
// flat = (o * axis_dim + a) * inner + i.
struct AxisSpan {
  std::int64_t outer = 1;
  std::int64_t axis_dim = 1;
  std::int64_t inner = 1;
};

inline AxisSpan axis_span(const Shape& shape, int axis) {
  AxisSpan s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.axis_dim = shape[axis];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
    s.inner *= shape[i];
  return s;
}

// Finalizes an op node: links parents and installs the backward closure only
// when gradients can flow, so inference builds no graph at all.
template <class S, class Fn>
TensorT<S> finish(NodeP<S> out, std::initializer_list<NodeP<S>> parents,
                  Fn&& backward_fn) {
  bool any = false;
  for (const auto& p : parents) any = any || tracked(p);
  if (detail::grad_mode_enabled() && any) {
    out->needs_grad = true;
    out->parents.assign(parents);
    out->backward_fn = std::forward<Fn>(backward_fn);
  }
  return TensorT<S>::wrap(std::move(out));
}

template <class S>
void check_same_shape(const TensorT<S>& a, const TensorT<S>& b,
                      const char* op) {
  require(a.shape() == b.shape(), ErrorKind::dimension,
          concat_msg(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                     shape_str(b.shape())));
}

// ---- vectorized elementwise helpers -----------------------------------------
// Every node owns its data and grad vectors outright, so an output or grad
// buffer never aliases a different buffer passed alongside it; the restrict
// qualifier records that and lets these loops vectorize. Inputs `a` and `b`
// may legally be the same buffer (e.g. mul(x, x)), which is why they are not
// restrict-qualified.

template <class S>
inline void vec_add(S* __restrict o, const S* a, const S* b, size_t n) {
#pragma omp simd
  for (size_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
}

template <class S>
inline void vec_sub(S* __restrict o, const S* a, const S* b, size_t n) {
#pragma omp simd
  for (size_t i = 0; i < n; ++i) o[i] = a[i] - b[i];
}

template <class S>
inline void vec_mul(S* __restrict o, const S* a, const S* b, size_t n) {
#pragma omp simd
  for (size_t i = 0; i < n; ++i) o[i] = a[i] * b[i];
}

template <class S>
inline void vec_scale(S* __restrict o, const S* a, S f, size_t n) {
#pragma omp simd
  for (size_t i = 0; i < n; ++i) o[i] = a[i] * f;
}

template <class S>
inline void vec_add_into(S* __restrict dst, const S* src, size_t n) {
#pragma omp simd
  for (size_t i = 0; i < n; ++i) dst[i] += src[i];
}

template <class S>
inline void vec_sub_into(S* __restrict dst, const S* src, size_t n) {
#pragma omp simd
  for (size_t i = 0; i < n; ++i) dst[i] -= src[i];
}

template <class S>
inline void vec_mac_into(S* __restrict dst, const S* a, const S* b, size_t n) {
#pragma omp simd
  for (size_t i = 0; i < n; ++i) dst[i] += a[i] * b[i];
}

template <class S>
inline void vec_axpy_into(S* __restrict dst, const S* src, S f, size_t n) {
#pragma omp simd
  for (size_t i = 0; i < n; ++i) dst[i] += src[i] * f;
}

// ---- accumulating dense kernels (C += op(A, B)) ----------------------------

template <class S>
void mat_nn(S* c, const S* a, const S* b, std::int64_t m_dim,
            std::int64_t k_dim, std::int64_t n_dim) {
  for (std::int64_t m = 0; m < m_dim; ++m) {
    S* crow = c + m * n_dim;
    const S* arow = a + m * k_dim;
    for (std::int64_t k = 0; k < k_dim; ++k) {
      const S amk = arow[k];
      const S* brow = b + k * n_dim;
      for (std::int64_t n = 0; n < n_dim; ++n) crow[n] += amk * brow[n];
    }
  }
}

// a is (M, K), b is (N, K): C += A . B^T
template <class S>
void mat_nt(S* c, const S* a, const S* b, std::int64_t m_dim,
            std::int64_t k_dim, std::int64_t n_dim) {
  for (std::int64_t m = 0; m < m_dim; ++m) {
    const S* arow = a + m * k_dim;
    S* crow = c + m * n_dim;
    for (std::int64_t n = 0; n < n_dim; ++n) {
      const S* brow = b + n * k_dim;
      S acc = S(0);
#pragma omp simd reduction(+ : acc)
      for (std::int64_t k = 0; k < k_dim; ++k) acc += arow[k] * brow[k];
      crow[n] += acc;
    }
  }
}

// a is (K, M), b is (K, N): C += A^T . B
template <class S>
void mat_tn(S* c, const S* a, const S* b, std::int64_t m_dim,
            std::int64_t k_dim, std::int64_t n_dim) {
  for (std::int64_t k = 0; k < k_dim; ++k) {
    const S* arow = a + k * m_dim;
    const S* brow = b + k * n_dim;
    for (std::int64_t m = 0; m < m_dim; ++m) {
      const S akm = arow[m];
      S* crow = c + m * n_dim;
      for (std::int64_t n = 0; n < n_dim; ++n) crow[n] += akm * brow[n];
    }
  }
}

}  // namespace rawgat::opdetail
