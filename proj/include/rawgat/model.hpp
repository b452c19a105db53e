#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rawgat/encoder.hpp"
#include "rawgat/frontend.hpp"
#include "rawgat/graph.hpp"
#include "rawgat/tensor.hpp"

namespace rawgat {

// Full hyperparameter record. The reference geometry (70 filters, 129 taps,
// 64600 samples at 16 kHz) is the default; shorter input lengths are legal
// as long as one temporal frame survives the encoder's six time pools.
struct ModelConfig {
  std::int64_t num_filters = 70;
  std::int64_t kernel_length = 129;
  std::int64_t input_length = 64600;
  std::int64_t sample_rate = 16000;
  FusionMode fusion = FusionMode::mul;
  double k_spec = 0.64;
  double k_temp = 0.81;
  double k_st = 0.64;
  bool use_spectral = true;
  bool use_temporal = true;
  bool use_pooling = true;
  std::int64_t f_mask = 14;
  std::uint64_t seed = 1;

  void validate() const;  // throws a config error naming the offending field
};

// Integer geometry derived from a (validated) config.
struct ModelDims {
  std::int64_t conv_width = 0;      // input_length - kernel_length + 1
  std::int64_t freq_bins = 0;       // num_filters / 3
  std::int64_t frontend_width = 0;  // conv_width / 3
  std::int64_t enc_time = 0;        // frontend_width after six /3 pools
  std::int64_t spec_nodes = 0;      // freq_bins
  std::int64_t temp_nodes = 0;      // enc_time
  std::int64_t spec_kept = 0;       // after spectral pooling (or = spec_nodes)
  std::int64_t temp_kept = 0;
  std::int64_t fused_nodes = 12;
  std::int64_t branch_dim = 32;     // branch GAT output features
  std::int64_t st_in_dim = 0;       // 32, or 64 for two-branch concat
  std::int64_t st_dim = 16;         // ST GAT output features
  std::int64_t st_kept = 0;         // after ST pooling (or = fused_nodes)
};

ModelDims derive_dims(const ModelConfig& config);

// One shape-bearing pipeline stage in display convention: feature maps as
// (C, F, T), graphs as (features, nodes), batch stripped.
struct TraceRow {
  std::string name;
  Shape shape;

  friend bool operator==(const TraceRow& a, const TraceRow& b) {
    return a.name == b.name && a.shape == b.shape;
  }
};

// The stage list a forward pass must produce under `config`.
std::vector<TraceRow> expected_trace(const ModelConfig& config);

template <class S>
struct RawGatModelT {
  ModelConfig config;
  SincFrontendT<S> frontend;
  EncoderT<S> encoder;
  GatLayerT<S> spec_gat, temp_gat;
  GraphPoolT<S> spec_pool, temp_pool;
  NodeProjectionT<S> spec_proj, temp_proj;
  GatLayerT<S> st_gat;
  GraphPoolT<S> st_pool;
  DenseT<S> st_proj;  // per-node feature projection to one value
  DenseT<S> fc_out;   // remaining node values -> 2 logits

  RawGatModelT() = default;
  explicit RawGatModelT(const ModelConfig& cfg);

  // wave: (L) -> logits (2), or (B, L) -> (B, 2). channel_mask, when given
  // and training, scales the frontend's frequency channels (0/1 vector of
  // length freq_bins, same mask for the whole batch). trace, when given,
  // receives every shape-bearing stage in display convention.
  TensorT<S> forward(const TensorT<S>& wave, bool training,
                     const std::vector<S>* channel_mask = nullptr,
                     std::vector<TraceRow>* trace = nullptr);

  // Trainable tensors / running-stat buffers, with stable dotted names.
  std::vector<std::pair<std::string, TensorT<S>>> named_parameters();
  std::vector<std::pair<std::string, std::vector<S>*>> named_buffers();
  std::int64_t count_parameters();

  // Versioned self-describing container: JSON header (config, seed, tensor
  // directory) + little-endian float32 blobs, written atomically via a
  // temporary file and rename.
  void save_checkpoint(const std::string& path);
  static RawGatModelT load_checkpoint(const std::string& path);
};

#define RAWGAT_DECLARE_MODEL_OPS(S) extern template struct RawGatModelT<S>;

RAWGAT_DECLARE_MODEL_OPS(float)
RAWGAT_DECLARE_MODEL_OPS(double)
#undef RAWGAT_DECLARE_MODEL_OPS

}  // namespace rawgat
