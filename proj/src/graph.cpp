#include "rawgat/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

namespace rawgat {

namespace {

template <class S>
void check_graph_nodes(const TensorT<S>& nodes, const char* where) {
  require(nodes.defined(), ErrorKind::contract,
          concat_msg(where, ": undefined node tensor"));
  require(nodes.rank() == 2 || nodes.rank() == 3, ErrorKind::dimension,
          concat_msg(where, ": node tensor must be (N, d) or (B, N, d), got ",
                     shape_str(nodes.shape())));
}

}  // namespace

template <class S>
GraphT<S>::GraphT(TensorT<S> n) : nodes(std::move(n)) {
  check_graph_nodes(nodes, "graph");
}

template <class S>
TensorT<S> attention_weights(const TensorT<S>& h, const TensorT<S>& w_map) {
  check_graph_nodes(h, "attention_weights");
  require(w_map.defined() && w_map.rank() == 1 &&
              w_map.dim(0) == h.dim(-1),
          ErrorKind::dimension,
          concat_msg("attention_weights: map must be rank-1 of length ",
                     h.dim(-1)));
  for (S v : h.data())
    require(std::isfinite(static_cast<double>(v)), ErrorKind::numeric,
            "attention_weights: non-finite node feature");
  for (S v : w_map.data())
    require(std::isfinite(static_cast<double>(v)), ErrorKind::numeric,
            "attention_weights: non-finite map weight");
  auto logits = matmul_nt(scale_axis(h, -1, w_map), h);  // (..., N, N)
  return softmax(logits, -2);  // contributors normalize per column
}

template <class S>
GatLayerT<S>::GatLayerT(std::int64_t d_in, std::int64_t d_out, Rng& rng)
    : att(d_in, d_out, rng), res(d_in, d_out, rng), bn(d_out, -1) {
  w_map = TensorT<S>::zeros({d_in}, /*requires_grad=*/true);
  init_fan_in(w_map, d_in, rng);
}

template <class S>
GraphT<S> GatLayerT<S>::forward(const GraphT<S>& g, bool training) {
  auto alpha = attention_weights(g.nodes, w_map);
  auto aggregated = matmul_tn(alpha, g.nodes);  // (..., N, d_in)
  auto merged = add(att.forward(aggregated), res.forward(g.nodes));
  return GraphT<S>(selu(bn.forward(merged, training)));
}

template <class S>
GraphPoolT<S>::GraphPoolT(std::int64_t d, double r, Rng& rng) : ratio(r) {
  require(d > 0, ErrorKind::contract, "graph pool: feature dim must be positive");
  require(r > 0.0 && r <= 1.0, ErrorKind::config,
          concat_msg("graph pool: ratio must lie in (0, 1], got ", r));
  q = TensorT<S>::zeros({d}, /*requires_grad=*/true);
  init_fan_in(q, d, rng);
}

template <class S>
typename GraphPoolT<S>::Result GraphPoolT<S>::forward(
    const GraphT<S>& g) const {
  check_graph_nodes(g.nodes, "graph pool");
  require(q.defined() && q.rank() == 1 && q.dim(0) == g.feature_dim(),
          ErrorKind::dimension,
          concat_msg("graph pool: q must be rank-1 of length ",
                     g.feature_dim()));
  const std::int64_t n = g.num_nodes();
  const std::int64_t keep = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(n))));
  const bool batched = g.nodes.rank() == 3;
  const std::int64_t batch = batched ? g.nodes.dim(0) : 1;

  auto scores = matvec(g.nodes, q);  // (..., N)

  // Index selection happens on plain values; only the gating is recorded.
  std::vector<std::vector<std::int64_t>> picked(
      static_cast<size_t>(batch));
  const auto& sv = scores.data();
  std::vector<std::int64_t> order(static_cast<size_t>(n));
  for (std::int64_t b = 0; b < batch; ++b) {
    const S* row = sv.data() + b * n;
    std::iota(order.begin(), order.end(), std::int64_t{0});
    // stable_sort keeps ascending index order among equal scores, so ties
    // resolve to the lower index.
    std::stable_sort(order.begin(), order.end(),
                     [row](std::int64_t i, std::int64_t j) {
                       return row[i] > row[j];
                     });
    auto& dst = picked[static_cast<size_t>(b)];
    dst.assign(order.begin(), order.begin() + keep);
    std::sort(dst.begin(), dst.end());  // survivors keep original order
  }

  Shape col_shape = scores.shape();
  col_shape.push_back(1);
  auto score_col = reshape(scores, std::move(col_shape));  // (..., N, 1)
  TensorT<S> kept_nodes, kept_scores;
  if (batched) {
    kept_nodes = gather_rows(g.nodes, picked);
    kept_scores = gather_rows(score_col, picked);
  } else {
    kept_nodes = gather_rows(g.nodes, picked[0]);
    kept_scores = gather_rows(score_col, picked[0]);
  }
  Shape gate_shape = kept_scores.shape();
  gate_shape.pop_back();
  auto gate = sigmoid(reshape(kept_scores, std::move(gate_shape)));

  Result out;
  out.graph = GraphT<S>(scale_rows(kept_nodes, gate));
  out.indices = std::move(picked);
  return out;
}

template <class S>
NodeProjectionT<S>::NodeProjectionT(std::int64_t n_in, std::int64_t n_out,
                                    Rng& rng) {
  require(n_in > 0 && n_out > 0, ErrorKind::contract,
          "node projection: node counts must be positive");
  weight = TensorT<S>::zeros({n_in, n_out}, /*requires_grad=*/true);
  bias = TensorT<S>::zeros({n_out}, /*requires_grad=*/true);
  init_fan_in(weight, n_in, rng);
  init_fan_in(bias, n_in, rng);
}

template <class S>
GraphT<S> NodeProjectionT<S>::forward(const GraphT<S>& g) const {
  check_graph_nodes(g.nodes, "node projection");
  require(g.num_nodes() == weight.dim(0), ErrorKind::dimension,
          concat_msg("node projection: expected ", weight.dim(0),
                     " nodes, got ", g.num_nodes()));
  // out[..., j, f] = sum_i W[i, j] x[..., i, f] + b[j]
  auto projected = matmul_tn(weight, g.nodes);
  return GraphT<S>(add_axis(projected, -2, bias));
}

FusionMode parse_fusion(const std::string& name) {
  if (name == "add") return FusionMode::add;
  if (name == "mul") return FusionMode::mul;
  if (name == "concat") return FusionMode::concat;
  throw Error(ErrorKind::config,
              concat_msg("unknown fusion mode '", name,
                         "' (expected add, mul or concat)"));
}

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::add: return "add";
    case FusionMode::mul: return "mul";
    case FusionMode::concat: return "concat";
  }
  throw Error(ErrorKind::contract, "invalid fusion mode value");
}

template <class S>
GraphT<S> fuse(const GraphT<S>& a, const GraphT<S>& b, FusionMode mode) {
  check_graph_nodes(a.nodes, "fuse");
  check_graph_nodes(b.nodes, "fuse");
  require(a.nodes.rank() == b.nodes.rank() && a.num_nodes() == b.num_nodes() &&
              (a.nodes.rank() == 2 || a.nodes.dim(0) == b.nodes.dim(0)),
          ErrorKind::dimension,
          concat_msg("fuse: node sets disagree, ", shape_str(a.nodes.shape()),
                     " vs ", shape_str(b.nodes.shape())));
  switch (mode) {
    case FusionMode::add: return GraphT<S>(add(a.nodes, b.nodes));
    case FusionMode::mul: return GraphT<S>(mul(a.nodes, b.nodes));
    case FusionMode::concat: return GraphT<S>(concat_last(a.nodes, b.nodes));
  }
  throw Error(ErrorKind::contract, "invalid fusion mode value");
}

template <class S>
GraphT<S> spectral_readout(const TensorT<S>& x) {
  require(x.defined() && (x.rank() == 3 || x.rank() == 4), ErrorKind::dimension,
          concat_msg("spectral readout: expected (C, F, T) or (B, C, F, T), ",
                     "got ", shape_str(x.shape())));
  return GraphT<S>(transpose_last2(max_axis(abs(x), -1)));
}

template <class S>
GraphT<S> temporal_readout(const TensorT<S>& x) {
  require(x.defined() && (x.rank() == 3 || x.rank() == 4), ErrorKind::dimension,
          concat_msg("temporal readout: expected (C, F, T) or (B, C, F, T), ",
                     "got ", shape_str(x.shape())));
  return GraphT<S>(transpose_last2(max_axis(abs(x), -2)));
}

#define RAWGAT_INSTANTIATE_GRAPH_OPS(S)                                       \
  template struct GraphT<S>;                                                  \
  template TensorT<S> attention_weights<S>(const TensorT<S>&,                 \
                                           const TensorT<S>&);                \
  template struct GatLayerT<S>;                                               \
  template struct GraphPoolT<S>;                                              \
  template struct NodeProjectionT<S>;                                         \
  template GraphT<S> fuse<S>(const GraphT<S>&, const GraphT<S>&, FusionMode); \
  template GraphT<S> spectral_readout<S>(const TensorT<S>&);                  \
  template GraphT<S> temporal_readout<S>(const TensorT<S>&);

RAWGAT_INSTANTIATE_GRAPH_OPS(float)
RAWGAT_INSTANTIATE_GRAPH_OPS(double)
#undef RAWGAT_INSTANTIATE_GRAPH_OPS

}  // namespace rawgat
