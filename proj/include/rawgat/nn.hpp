#pragma once

#include "rawgat/rng.hpp"
#include "rawgat/tensor.hpp"

namespace rawgat {

enum class Pad { valid, same };

// 1D convolution, valid padding. x is (C_in, L) or (B, C_in, L); k is
// (C_out, C_in, K). Output length is (L - K) / stride + 1.
template <class S>
TensorT<S> conv1d(const TensorT<S>& x, const TensorT<S>& k,
                  std::int64_t stride = 1);

// 2D convolution. x is (C_in, H, W) or (B, C_in, H, W); k is
// (C_out, C_in, KH, KW). With Pad::same (stride 1 only) the spatial size is
// preserved using zero padding; even kernel extents pad one more cell on the
// trailing side.
template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& k,
                  std::int64_t stride = 1, Pad padding = Pad::valid);

// Non-overlapping max pooling over the trailing two axes with window
// (ph, pw); trailing remainder cells are dropped (floor semantics).
template <class S>
TensorT<S> maxpool2d(const TensorT<S>& x, std::int64_t ph, std::int64_t pw);

// Batch normalization over one axis: statistics pool every other axis.
// In training mode batch statistics normalize and update the running
// buffers (unbiased variance in the running estimate); in eval mode the
// running buffers normalize. gamma/beta are rank-1 of length dim(axis).
template <class S>
TensorT<S> batch_norm(const TensorT<S>& x, int axis, const TensorT<S>& gamma,
                      const TensorT<S>& beta, std::vector<S>& running_mean,
                      std::vector<S>& running_var, bool training,
                      S momentum = S(0.1), S eps = S(1e-5));

// Fills a tensor in place with U(-bound, bound). Draws are made in double
// and narrowed, so float and double models consume identical streams.
template <class S>
void init_uniform(TensorT<S>& t, double bound, Rng& rng);

/// Fan-in scaled default init: bound = 1/sqrt(fan_in).
template <class S>
void init_fan_in(TensorT<S>& t, std::int64_t fan_in, Rng& rng);

// ---- parameterized layers ---------------------------------------------------

/// Affine map along the trailing axis: (..., d_in) -> (..., d_out).
template <class S>
struct DenseT {
  TensorT<S> weight;  // (d_in, d_out)
  TensorT<S> bias;    // (d_out)

  DenseT() = default;
  DenseT(std::int64_t d_in, std::int64_t d_out, Rng& rng);
  TensorT<S> forward(const TensorT<S>& x) const;
};

// conv2d with a per-output-channel bias.
template <class S>
struct Conv2dLayerT {
  TensorT<S> weight;  // (co, ci, kh, kw)
  TensorT<S> bias;    // (co)
  Pad padding = Pad::same;

  Conv2dLayerT() = default;
  Conv2dLayerT(std::int64_t ci, std::int64_t co, std::int64_t kh,
               std::int64_t kw, Pad padding, Rng& rng);
  TensorT<S> forward(const TensorT<S>& x) const;
};

// Batch norm layer owning its running statistics. `axis` is stored relative
// to the back (e.g. -3 for conv channels, -1 for graph features) so the same
// layer handles batched and unbatched inputs.
template <class S>
struct BatchNormT {
  TensorT<S> gamma, beta;
  std::vector<S> running_mean, running_var;
  int axis = -1;
  S momentum = S(0.1);
  S eps = S(1e-5);

  BatchNormT() = default;
  BatchNormT(std::int64_t channels, int axis);
  TensorT<S> forward(const TensorT<S>& x, bool training);
};

#define RAWGAT_DECLARE_NN_OPS(S)                                              \
  extern template TensorT<S> conv1d<S>(const TensorT<S>&, const TensorT<S>&,  \
                                       std::int64_t);                         \
  extern template TensorT<S> conv2d<S>(const TensorT<S>&, const TensorT<S>&,  \
                                       std::int64_t, Pad);                    \
  extern template TensorT<S> maxpool2d<S>(const TensorT<S>&, std::int64_t,    \
                                          std::int64_t);                      \
  extern template TensorT<S> batch_norm<S>(                                   \
      const TensorT<S>&, int, const TensorT<S>&, const TensorT<S>&,           \
      std::vector<S>&, std::vector<S>&, bool, S, S);                          \
  extern template void init_uniform<S>(TensorT<S>&, double, Rng&);            \
  extern template void init_fan_in<S>(TensorT<S>&, std::int64_t, Rng&);       \
  extern template struct DenseT<S>;                                           \
  extern template struct Conv2dLayerT<S>;                                     \
  extern template struct BatchNormT<S>;

RAWGAT_DECLARE_NN_OPS(float)
RAWGAT_DECLARE_NN_OPS(double)
#undef RAWGAT_DECLARE_NN_OPS

}  // namespace rawgat
