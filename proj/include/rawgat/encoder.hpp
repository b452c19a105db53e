#pragma once

#include <cstdint>
#include <vector>

#include "rawgat/nn.hpp"
#include "rawgat/rng.hpp"
#include "rawgat/tensor.hpp"

namespace rawgat {

// Pre-activation residual block over (C, F, T) maps:
//   BN -> SeLU -> Conv(2x3, same) -> BN -> SeLU -> Conv(2x3, same)
// plus a skip path (1x1 conv when the channel count changes), summed before
// a (1, 3) max-pool. Frequency extent is preserved; time shrinks to T/3.
template <class S>
struct ResBlockT {
  BatchNormT<S> bn1;
  Conv2dLayerT<S> conv1;
  BatchNormT<S> bn2;
  Conv2dLayerT<S> conv2;
  Conv2dLayerT<S> skip;  // defined only when in/out channels differ
  bool has_skip = false;

  ResBlockT() = default;
  ResBlockT(std::int64_t c_in, std::int64_t c_out, Rng& rng);
  TensorT<S> forward(const TensorT<S>& x, bool training);
};

// The full encoder: two blocks at 32 channels, then four at 64, mapping the
// front-end's (1, F, W) time-frequency map to the (64, F, W/729) feature map
// the graph heads consume.
template <class S>
struct EncoderT {
  std::vector<ResBlockT<S>> blocks;

  static constexpr int kFirstStackBlocks = 2;

  EncoderT() = default;
  explicit EncoderT(Rng& rng);

  // When per_block is non-null it receives each block's output (the caller
  // can read intermediate shapes without re-running anything).
  TensorT<S> forward(const TensorT<S>& x, bool training,
                     std::vector<TensorT<S>>* per_block = nullptr);
};

#define RAWGAT_DECLARE_ENCODER_OPS(S)                                         \
  extern template struct ResBlockT<S>;                                        \
  extern template struct EncoderT<S>;

RAWGAT_DECLARE_ENCODER_OPS(float)
RAWGAT_DECLARE_ENCODER_OPS(double)
#undef RAWGAT_DECLARE_ENCODER_OPS

}  // namespace rawgat
