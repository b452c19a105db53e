#include "rawgat/encoder.hpp"

namespace rawgat {

template <class S>
ResBlockT<S>::ResBlockT(std::int64_t c_in, std::int64_t c_out, Rng& rng)
    : bn1(c_in, -3),
      conv1(c_in, c_out, 2, 3, Pad::same, rng),
      bn2(c_out, -3),
      conv2(c_out, c_out, 2, 3, Pad::same, rng),
      has_skip(c_in != c_out) {
  if (has_skip) skip = Conv2dLayerT<S>(c_in, c_out, 1, 1, Pad::valid, rng);
}

template <class S>
TensorT<S> ResBlockT<S>::forward(const TensorT<S>& x, bool training) {
  auto h = conv1.forward(selu(bn1.forward(x, training)));
  h = conv2.forward(selu(bn2.forward(h, training)));
  auto merged = add(h, has_skip ? skip.forward(x) : x);
  return maxpool2d(merged, 1, 3);
}

template <class S>
EncoderT<S>::EncoderT(Rng& rng) {
  blocks.reserve(6);
  blocks.emplace_back(1, 32, rng);
  blocks.emplace_back(32, 32, rng);
  blocks.emplace_back(32, 64, rng);
  blocks.emplace_back(64, 64, rng);
  blocks.emplace_back(64, 64, rng);
  blocks.emplace_back(64, 64, rng);
}

template <class S>
TensorT<S> EncoderT<S>::forward(const TensorT<S>& x, bool training,
                                std::vector<TensorT<S>>* per_block) {
  require(x.defined() && (x.rank() == 3 || x.rank() == 4), ErrorKind::dimension,
          concat_msg("encoder: expected (1, F, W) or (B, 1, F, W), got ",
                     shape_str(x.shape())));
  require(x.dim(-3) == 1, ErrorKind::dimension,
          "encoder: input must carry a single channel");
  auto h = x;
  for (auto& block : blocks) {
    h = block.forward(h, training);
    if (per_block) per_block->push_back(h);
  }
  return h;
}

#define RAWGAT_INSTANTIATE_ENCODER_OPS(S)                                     \
  template struct ResBlockT<S>;                                               \
  template struct EncoderT<S>;

RAWGAT_INSTANTIATE_ENCODER_OPS(float)
RAWGAT_INSTANTIATE_ENCODER_OPS(double)
#undef RAWGAT_INSTANTIATE_ENCODER_OPS

}  // namespace rawgat
