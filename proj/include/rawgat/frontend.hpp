#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "rawgat/nn.hpp"
#include "rawgat/tensor.hpp"

namespace rawgat {

// Mel scale conversions (HTK convention).
double mel_from_hz(double hz);
double hz_from_mel(double mel);

// Frozen raw-waveform front-end: a bank of mel-spaced sinc band-pass
// filters, a channel axis, 3x3 max pooling, single-channel batch norm and
// SeLU. Kernels are built once in double precision and never trained.
//
// Band placement: num_filters + 2 points uniform on the mel axis between
// 0 Hz and Nyquist; filter k spans points (k, k+2), so neighbouring bands
// overlap by half. The first cut-in is clamped to 1 Hz to keep every band
// strictly inside (0, Nyquist]. Each kernel is a difference of windowed
// sinc low-passes (Hamming), with its response pinned to zero at 0 Hz and
// at Nyquist and scaled to unit peak magnitude.
template <class S>
struct SincFrontendT {
  TensorT<S> kernels;  // (num_filters, 1, kernel_length), frozen
  std::vector<std::pair<double, double>> band_edges;  // (cut-in, cut-off) Hz
  BatchNormT<S> bn;    // one channel, conv layout
  std::int64_t sample_rate = 16000;
  std::int64_t input_length = 64600;

  SincFrontendT() = default;
  SincFrontendT(std::int64_t num_filters, std::int64_t kernel_length,
                std::int64_t sample_rate, std::int64_t input_length);

  std::int64_t num_filters() const { return kernels.dim(0); }
  std::int64_t kernel_length() const { return kernels.dim(2); }
  // Height of the time-frequency map after pooling.
  std::int64_t num_channels() const { return num_filters() / 3; }
  // Width of the time-frequency map after pooling.
  std::int64_t output_width() const {
    return (input_length - kernel_length() + 1) / 3;
  }

  // (L) -> (1, F/3, W) or (B, L) -> (B, 1, F/3, W). L must equal the
  // configured input length; padding/truncation is the data layer's job.
  // When stages is non-null it receives the filtered, channel-stacked and
  // pooled intermediates (shape inspection without recomputation).
  TensorT<S> forward(const TensorT<S>& wave, bool training,
                     std::vector<TensorT<S>>* stages = nullptr);
};

#define RAWGAT_DECLARE_FRONTEND_OPS(S) extern template struct SincFrontendT<S>;

RAWGAT_DECLARE_FRONTEND_OPS(float)
RAWGAT_DECLARE_FRONTEND_OPS(double)
#undef RAWGAT_DECLARE_FRONTEND_OPS

}  // namespace rawgat
