#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "rawgat/encoder.hpp"

using namespace rawgat;

namespace {

template <class S>
TensorT<S> random_map(Shape shape, Rng& rng, bool requires_grad = false) {
  auto t = TensorT<S>::zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = static_cast<S>(rng.uniform(-1.0, 1.0));
  return t;
}

// Direct per-output-sample convolution, written independently of the library
// kernels so layout-specialized paths can be checked against it.
TensorT<double> naive_conv2d(const TensorT<double>& x,
                             const TensorT<double>& k, Pad padding) {
  const auto& xs = x.shape();
  const auto& ks = k.shape();
  const std::int64_t bn = xs[0], ci = xs[1], h = xs[2], w = xs[3];
  const std::int64_t co = ks[0], kh = ks[2], kw = ks[3];
  const std::int64_t pt = padding == Pad::same ? (kh - 1) / 2 : 0;
  const std::int64_t pl = padding == Pad::same ? (kw - 1) / 2 : 0;
  const std::int64_t ho = padding == Pad::same ? h : h - kh + 1;
  const std::int64_t wo = padding == Pad::same ? w : w - kw + 1;
  auto out = TensorT<double>::zeros({bn, co, ho, wo});
  for (std::int64_t b = 0; b < bn; ++b)
    for (std::int64_t oc = 0; oc < co; ++oc)
      for (std::int64_t hh = 0; hh < ho; ++hh)
        for (std::int64_t ww = 0; ww < wo; ++ww) {
          double acc = 0.0;
          for (std::int64_t ic = 0; ic < ci; ++ic)
            for (std::int64_t dh = 0; dh < kh; ++dh)
              for (std::int64_t dw = 0; dw < kw; ++dw) {
                const std::int64_t hin = hh + dh - pt;
                const std::int64_t win = ww + dw - pl;
                if (hin < 0 || hin >= h || win < 0 || win >= w) continue;
                acc += k.data()[((oc * ci + ic) * kh + dh) * kw + dw] *
                       x.data()[((b * ci + ic) * h + hin) * w + win];
              }
          out.data()[((b * co + oc) * ho + hh) * wo + ww] = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d matches a naive reference across layout regimes") {
  Rng rng(420);
  // Shapes chosen to land on each internal layout: many-channel narrow maps,
  // many-channel wide maps, and few-channel maps, plus 1x1 and valid padding.
  struct Case {
    Shape x, k;
    Pad pad;
  };
  const Case cases[] = {
      {{2, 16, 3, 5}, {16, 16, 2, 3}, Pad::same},    // narrow, channels-last
      {{1, 16, 4, 300}, {16, 16, 2, 3}, Pad::same},  // wide, row-major
      {{2, 3, 6, 7}, {5, 3, 2, 3}, Pad::same},       // few channels
      {{1, 16, 5, 8}, {16, 16, 2, 3}, Pad::valid},   // narrow, valid padding
      {{2, 16, 3, 4}, {16, 16, 1, 1}, Pad::same},    // pointwise
  };
  for (const auto& c : cases) {
    CAPTURE(shape_str(c.x));
    CAPTURE(shape_str(c.k));
    auto x = random_map<double>(c.x, rng);
    auto k = random_map<double>(c.k, rng);
    NoGradGuard ng;
    auto got = conv2d(x, k, 1, c.pad);
    auto want = naive_conv2d(x, k, c.pad);
    REQUIRE(got.shape() == want.shape());
    for (size_t i = 0; i < got.data().size(); ++i)
      CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("finite differences confirm conv2d gradients on many-channel maps") {
  Rng rng(421);
  auto x = random_map<double>({1, 16, 3, 4}, rng, true);
  auto k = random_map<double>({16, 16, 2, 3}, rng, true);

  SUBCASE("single use") {
    auto res = rawgat::testing::grad_check(
        [&] { return mean(conv2d(x, k, 1, Pad::same)); }, {x, k});
    CHECK_MESSAGE(res.ok, res.detail);
  }

  SUBCASE("input reused by two convolutions accumulates both contributions") {
    auto k2 = random_map<double>({16, 16, 1, 1}, rng, true);
    auto res = rawgat::testing::grad_check(
        [&] {
          return add(mean(conv2d(x, k, 1, Pad::same)),
                     mean(conv2d(x, k2, 1, Pad::same)));
        },
        {x, k, k2});
    CHECK_MESSAGE(res.ok, res.detail);
  }
}

TEST_CASE("block zeroed down to its skip path") {
  Rng rng(17);

  SUBCASE("identity skip when channels match") {
    ResBlockT<double> block(32, 32, rng);
    for (auto* t : {&block.conv1.weight, &block.conv1.bias,
                    &block.conv2.weight, &block.conv2.bias})
      for (auto& v : t->data()) v = 0.0;

    auto x = random_map<double>({32, 5, 9}, rng);
    NoGradGuard ng;
    auto out = block.forward(x, /*training=*/false);
    auto expected = maxpool2d(x, 1, 3);
    REQUIRE(out.shape() == expected.shape());
    for (size_t i = 0; i < out.data().size(); ++i)
      CHECK(out.data()[i] == doctest::Approx(expected.data()[i]));
  }

  SUBCASE("1x1 projection when channels change") {
    ResBlockT<double> block(1, 32, rng);
    REQUIRE(block.has_skip);
    for (auto* t : {&block.conv1.weight, &block.conv1.bias,
                    &block.conv2.weight, &block.conv2.bias})
      for (auto& v : t->data()) v = 0.0;

    auto x = random_map<double>({1, 5, 9}, rng);
    NoGradGuard ng;
    auto out = block.forward(x, false);
    auto expected = maxpool2d(block.skip.forward(x), 1, 3);
    REQUIRE(out.shape() == Shape{32, 5, 3});
    for (size_t i = 0; i < out.data().size(); ++i)
      CHECK(out.data()[i] == doctest::Approx(expected.data()[i]));
  }
}

TEST_CASE("time extent shrinks by floor thirds while frequency holds") {
  Rng rng(90);
  EncoderT<float> enc(rng);
  auto x = random_map<float>({1, 1, 23, 729}, rng);

  std::vector<TensorT<float>> per_block;
  NoGradGuard ng;
  auto out = enc.forward(x, /*training=*/false, &per_block);

  REQUIRE(per_block.size() == 6);
  const std::int64_t expect_t[6] = {243, 81, 27, 9, 3, 1};
  const std::int64_t expect_c[6] = {32, 32, 64, 64, 64, 64};
  for (int b = 0; b < 6; ++b) {
    CHECK(per_block[b].dim(-1) == expect_t[b]);
    CHECK(per_block[b].dim(-2) == 23);
    CHECK(per_block[b].dim(-3) == expect_c[b]);
  }
  CHECK(out.shape() == Shape{1, 64, 23, 1});
}

TEST_CASE("reference geometry: (1,23,21490) -> (32,23,2387) -> (64,23,29)") {
  Rng rng(41);
  EncoderT<float> enc(rng);
  auto x = random_map<float>({1, 23, 21490}, rng);

  std::vector<TensorT<float>> per_block;
  NoGradGuard ng;
  auto out = enc.forward(x, false, &per_block);

  CHECK(per_block[EncoderT<float>::kFirstStackBlocks - 1].shape() ==
        Shape{32, 23, 2387});
  CHECK(out.shape() == Shape{64, 23, 29});
}

TEST_CASE("zero input yields a field constant over interior time frames") {
  Rng rng(7);
  EncoderT<float> enc(rng);
  NoGradGuard ng;
  auto out = enc.forward(TensorT<float>::zeros({1, 23, 21490}), false);
  REQUIRE(out.shape() == Shape{64, 23, 29});

  // Zero padding leaves its mark on the outermost columns, so constancy
  // along time is asserted on the interior frames.
  const auto& v = out.data();
  for (std::int64_t c = 0; c < 64; ++c)
    for (std::int64_t f = 0; f < 23; ++f) {
      const float ref = v[(c * 23 + f) * 29 + 14];
      for (std::int64_t t = 4; t < 25; ++t)
        CHECK(v[(c * 23 + f) * 29 + t] == doctest::Approx(ref).epsilon(1e-6));
    }
}

TEST_CASE("gradient reaches the first convolution") {
  Rng rng(3);
  EncoderT<float> enc(rng);
  auto x = random_map<float>({1, 23, 729}, rng);

  backward(mean(enc.forward(x, /*training=*/true)));

  REQUIRE(enc.blocks[0].conv1.weight.has_grad());
  double norm = 0.0;
  for (float g : enc.blocks[0].conv1.weight.grad()) norm += double(g) * g;
  CHECK(norm > 0.0);
}

TEST_CASE("encoder rejects malformed inputs") {
  Rng rng(1);
  EncoderT<float> enc(rng);
  CHECK_THROWS_AS(enc.forward(TensorT<float>::zeros({23, 100}), false), Error);
  CHECK_THROWS_AS(enc.forward(TensorT<float>::zeros({2, 23, 100}), false),
                  Error);
}
