#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rawgat/common.hpp"

namespace rawgat {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

// One node of the computation graph. Tensors are value handles onto these;
// ops append nodes and record closures that push gradients to parents.
template <class S>
struct NodeT {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;            // allocated lazily, same length as data
  bool requires_grad = false;     // trainable leaf
  bool needs_grad = false;        // on a path from a trainable leaf
  const char* op = "leaf";
  std::vector<std::shared_ptr<NodeT>> parents;
  std::function<void(NodeT&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
};

bool grad_mode_enabled();

}  // namespace detail

// Disables graph recording for its lifetime (inference / data pipelines).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class S>
class TensorT {
 public:
  using Node = detail::NodeT<S>;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false);
  static TensorT full(Shape shape, S value, bool requires_grad = false);
  static TensorT from_data(Shape shape, std::vector<S> values,
                           bool requires_grad = false);
  static TensorT scalar(S value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t dim(int axis) const;  // negative axes count from the back
  std::int64_t numel() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool needs_grad() const;

  std::vector<S>& data();
  const std::vector<S>& data() const;
  bool has_grad() const;
  std::vector<S>& grad();              // throws if no gradient present
  const std::vector<S>& grad() const;
  void zero_grad();

  S item() const;  // value of a one-element tensor

  std::shared_ptr<Node> node() const { return node_; }
  static TensorT wrap(std::shared_ptr<Node> node) {
    TensorT t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor32 = TensorT<float>;
using Tensor64 = TensorT<double>;

// Runs reverse-mode accumulation from a scalar loss. Gradients of leaves
// add up across calls until zero_grad. With release_graph the closures and
// parent links are dropped as they are consumed, so intermediate buffers
// free as soon as no external handle holds them; the graph cannot be
// replayed afterwards.
template <class S>
void backward(const TensorT<S>& loss, bool release_graph = true);

// ---- elementwise / structural ops ----------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b);
template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b);
template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b);
template <class S>
TensorT<S> scale(const TensorT<S>& x, S factor);
template <class S>
TensorT<S> add_scalar(const TensorT<S>& x, S value);
template <class S>
TensorT<S> abs(const TensorT<S>& x);
template <class S>
TensorT<S> sigmoid(const TensorT<S>& x);
template <class S>
TensorT<S> selu(const TensorT<S>& x);

template <class S>
TensorT<S> sum(const TensorT<S>& x);   // -> scalar
template <class S>
TensorT<S> mean(const TensorT<S>& x);  // -> scalar

// Copying reshape; total element count must match.
template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape);

// Swaps the last two axes (rank >= 2).
template <class S>
TensorT<S> transpose_last2(const TensorT<S>& x);

// Concatenation along the last axis; leading dims must match.
template <class S>
TensorT<S> concat_last(const TensorT<S>& a, const TensorT<S>& b);

// out[..., i_axis, ...] = x[..., i_axis, ...] * v[i_axis]; v is rank 1 with
// length dim(axis). Used for frozen masks, so v may be a plain constant.
template <class S>
TensorT<S> scale_axis(const TensorT<S>& x, int axis, const TensorT<S>& v);

// Broadcast add of a rank-1 vector along one axis (bias terms).
template <class S>
TensorT<S> add_axis(const TensorT<S>& x, int axis, const TensorT<S>& v);

// Row scaling over the second-to-last axis: x (..., N, d) with s (..., N).
template <class S>
TensorT<S> scale_rows(const TensorT<S>& x, const TensorT<S>& s);

// Row selection over the second-to-last axis. Indices may repeat; backward
// scatter-adds. Unbatched (N, d) and batched (B, N, d) variants.
template <class S>
TensorT<S> gather_rows(const TensorT<S>& x, const std::vector<std::int64_t>& idx);
template <class S>
TensorT<S> gather_rows(const TensorT<S>& x,
                       const std::vector<std::vector<std::int64_t>>& idx);

// ---- contractions ---------------------------------------------------------

// Matrix products over the trailing two axes. Rank-2 inputs work as plain
// matrices; a rank-3 input pairs batch-wise with a rank-3 or rank-2 other.
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b);     // A  . B
template <class S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b);  // A  . B^T
template <class S>
TensorT<S> matmul_tn(const TensorT<S>& a, const TensorT<S>& b);  // A^T . B

// Contracts the last axis with a vector: (..., d) x (d) -> (...).
template <class S>
TensorT<S> matvec(const TensorT<S>& x, const TensorT<S>& v);

// ---- reductions / normalizers ---------------------------------------------

// Max over one axis, gradient routed to the arg max (first hit on ties).
template <class S>
TensorT<S> max_axis(const TensorT<S>& x, int axis);

// Softmax over one axis with max subtraction per lane.
template <class S>
TensorT<S> softmax(const TensorT<S>& x, int axis);

// Log-softmax over the last axis (stable, for losses).
template <class S>
TensorT<S> log_softmax(const TensorT<S>& x);

// ---- instantiation control -------------------------------------------------

#define RAWGAT_DECLARE_TENSOR_OPS(S)                                          \
  extern template class TensorT<S>;                                           \
  extern template void backward<S>(const TensorT<S>&, bool);                  \
  extern template TensorT<S> add<S>(const TensorT<S>&, const TensorT<S>&);    \
  extern template TensorT<S> sub<S>(const TensorT<S>&, const TensorT<S>&);    \
  extern template TensorT<S> mul<S>(const TensorT<S>&, const TensorT<S>&);    \
  extern template TensorT<S> scale<S>(const TensorT<S>&, S);                  \
  extern template TensorT<S> add_scalar<S>(const TensorT<S>&, S);             \
  extern template TensorT<S> abs<S>(const TensorT<S>&);                       \
  extern template TensorT<S> sigmoid<S>(const TensorT<S>&);                   \
  extern template TensorT<S> selu<S>(const TensorT<S>&);                      \
  extern template TensorT<S> sum<S>(const TensorT<S>&);                       \
  extern template TensorT<S> mean<S>(const TensorT<S>&);                      \
  extern template TensorT<S> reshape<S>(const TensorT<S>&, Shape);            \
  extern template TensorT<S> transpose_last2<S>(const TensorT<S>&);           \
  extern template TensorT<S> concat_last<S>(const TensorT<S>&,                \
                                            const TensorT<S>&);               \
  extern template TensorT<S> scale_axis<S>(const TensorT<S>&, int,            \
                                           const TensorT<S>&);                \
  extern template TensorT<S> add_axis<S>(const TensorT<S>&, int,              \
                                         const TensorT<S>&);                  \
  extern template TensorT<S> scale_rows<S>(const TensorT<S>&,                 \
                                           const TensorT<S>&);                \
  extern template TensorT<S> gather_rows<S>(                                  \
      const TensorT<S>&, const std::vector<std::int64_t>&);                   \
  extern template TensorT<S> gather_rows<S>(                                  \
      const TensorT<S>&, const std::vector<std::vector<std::int64_t>>&);      \
  extern template TensorT<S> matmul<S>(const TensorT<S>&, const TensorT<S>&); \
  extern template TensorT<S> matmul_nt<S>(const TensorT<S>&,                  \
                                          const TensorT<S>&);                 \
  extern template TensorT<S> matmul_tn<S>(const TensorT<S>&,                  \
                                          const TensorT<S>&);                 \
  extern template TensorT<S> matvec<S>(const TensorT<S>&, const TensorT<S>&); \
  extern template TensorT<S> max_axis<S>(const TensorT<S>&, int);             \
  extern template TensorT<S> softmax<S>(const TensorT<S>&, int);              \
  extern template TensorT<S> log_softmax<S>(const TensorT<S>&);

RAWGAT_DECLARE_TENSOR_OPS(float)
RAWGAT_DECLARE_TENSOR_OPS(double)
#undef RAWGAT_DECLARE_TENSOR_OPS

}  // namespace rawgat
