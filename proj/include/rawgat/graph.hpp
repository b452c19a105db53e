#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rawgat/nn.hpp"
#include "rawgat/rng.hpp"
#include "rawgat/tensor.hpp"

namespace rawgat {

// A graph here is a fully connected node set carried as a feature matrix,
// (N, d) or batched (B, N, d); every node attends to every node, so there
// is no explicit edge structure to store.
template <class S>
struct GraphT {
  TensorT<S> nodes;

  GraphT() = default;
  explicit GraphT(TensorT<S> n);

  std::int64_t num_nodes() const { return nodes.dim(-2); }
  std::int64_t feature_dim() const { return nodes.dim(-1); }
};

// Attention map over a fully connected graph. h is (..., N, d) and w_map a
// rank-1 element-wise map of length d. Entry (u, n) weighs contributor u in
// the aggregate for node n, so each column sums to one. Non-finite inputs
// raise instead of silently flowing through the softmax.
template <class S>
TensorT<S> attention_weights(const TensorT<S>& h, const TensorT<S>& w_map);

// Graph attention layer: an attention-weighted aggregate of all nodes and a
// node-wise residual path, each through its own affine map, summed, batch
// normalized over the output features and passed through SeLU.
template <class S>
struct GatLayerT {
  TensorT<S> w_map;  // (d_in)
  DenseT<S> att;     // applied to the aggregated neighbourhood
  DenseT<S> res;     // applied to the node itself
  BatchNormT<S> bn;  // over the output feature axis

  GatLayerT() = default;
  GatLayerT(std::int64_t d_in, std::int64_t d_out, Rng& rng);
  GraphT<S> forward(const GraphT<S>& g, bool training);
};

// Learned node selection. Nodes are scored by projection onto q; the top
// floor(ratio * N) of them survive (never fewer than one; score ties keep
// the lower index), gated by the sigmoid of their score. Survivors stay in
// their original order.
template <class S>
struct GraphPoolT {
  TensorT<S> q;  // (d)
  double ratio = 1.0;

  struct Result {
    GraphT<S> graph;
    // Kept node indices per batch row (one row when unbatched), ascending.
    std::vector<std::vector<std::int64_t>> indices;
  };

  GraphPoolT() = default;
  GraphPoolT(std::int64_t d, double ratio, Rng& rng);
  Result forward(const GraphT<S>& g) const;
};

// Affine map over the node axis, feature-wise:
// (..., N_in, d) -> (..., N_out, d). Brings two graphs to a shared node
// count so they can be fused.
template <class S>
struct NodeProjectionT {
  TensorT<S> weight;  // (N_in, N_out)
  TensorT<S> bias;    // (N_out)

  NodeProjectionT() = default;
  NodeProjectionT(std::int64_t n_in, std::int64_t n_out, Rng& rng);
  GraphT<S> forward(const GraphT<S>& g) const;
};

enum class FusionMode { add, mul, concat };

FusionMode parse_fusion(const std::string& name);
std::string to_string(FusionMode mode);

// Merges two node-aligned graphs. add and mul combine features element-wise
// and need matching feature dims; concat stacks the feature axes with the
// first argument's features leading.
template <class S>
GraphT<S> fuse(const GraphT<S>& a, const GraphT<S>& b, FusionMode mode);

// Readouts collapse a (..., C, F, T) feature map into a graph by taking the
// maximum magnitude over the discarded axis. Spectral nodes are frequency
// bins (..., F, C); temporal nodes are frames (..., T, C).
template <class S>
GraphT<S> spectral_readout(const TensorT<S>& x);
template <class S>
GraphT<S> temporal_readout(const TensorT<S>& x);

#define RAWGAT_DECLARE_GRAPH_OPS(S)                                           \
  extern template struct GraphT<S>;                                           \
  extern template TensorT<S> attention_weights<S>(const TensorT<S>&,          \
                                                  const TensorT<S>&);         \
  extern template struct GatLayerT<S>;                                        \
  extern template struct GraphPoolT<S>;                                       \
  extern template struct NodeProjectionT<S>;                                  \
  extern template GraphT<S> fuse<S>(const GraphT<S>&, const GraphT<S>&,       \
                                    FusionMode);                              \
  extern template GraphT<S> spectral_readout<S>(const TensorT<S>&);           \
  extern template GraphT<S> temporal_readout<S>(const TensorT<S>&);

RAWGAT_DECLARE_GRAPH_OPS(float)
RAWGAT_DECLARE_GRAPH_OPS(double)
#undef RAWGAT_DECLARE_GRAPH_OPS

}  // namespace rawgat
