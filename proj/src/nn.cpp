#include "rawgat/nn.hpp"

#include <algorithm>
#include <cmath>

#include "op_support.hpp"

namespace rawgat {

using namespace opdetail;

// ---- conv1d ----------------------------------------------------------------

template <class S>
TensorT<S> conv1d(const TensorT<S>& x, const TensorT<S>& k,
                  std::int64_t stride) {
  check_defined(x, "conv1d");
  check_defined(k, "conv1d");
  require(x.rank() == 2 || x.rank() == 3, ErrorKind::dimension,
          concat_msg("conv1d: input must be (C,L) or (B,C,L), got ",
                     shape_str(x.shape())));
  require(k.rank() == 3, ErrorKind::dimension,
          concat_msg("conv1d: kernel must be (Co,Ci,K), got ",
                     shape_str(k.shape())));
  require(stride >= 1, ErrorKind::contract, "conv1d: stride must be >= 1");
  const bool batched = x.rank() == 3;
  const std::int64_t batches = batched ? x.shape()[0] : 1;
  const std::int64_t ci = x.shape()[batched ? 1 : 0];
  const std::int64_t len = x.shape()[batched ? 2 : 1];
  const std::int64_t co = k.shape()[0];
  const std::int64_t kk = k.shape()[2];
  require(k.shape()[1] == ci, ErrorKind::dimension,
          concat_msg("conv1d: input has ", ci, " channels, kernel expects ",
                     k.shape()[1]));
  require(len >= kk, ErrorKind::dimension,
          concat_msg("conv1d: input length ", len, " shorter than kernel ",
                     kk));
  const std::int64_t lo = (len - kk) / stride + 1;

  auto px = x.node(), pk = k.node();
  Shape out_shape = batched ? Shape{batches, co, lo} : Shape{co, lo};
  auto out = new_node<S>(std::move(out_shape), "conv1d");

  for (std::int64_t b = 0; b < batches; ++b) {
    const S* xb = px->data.data() + b * ci * len;
    S* ob = out->data.data() + b * co * lo;
    for (std::int64_t oc = 0; oc < co; ++oc) {
      S* orow = ob + oc * lo;
      for (std::int64_t icn = 0; icn < ci; ++icn) {
        const S* xrow = xb + icn * len;
        const S* krow = pk->data.data() + (oc * ci + icn) * kk;
        if (stride == 1) {
          for (std::int64_t j = 0; j < kk; ++j) {
            const S w = krow[j];
            const S* src = xrow + j;
            for (std::int64_t t = 0; t < lo; ++t) orow[t] += w * src[t];
          }
        } else {
          for (std::int64_t t = 0; t < lo; ++t) {
            const S* src = xrow + t * stride;
            S acc = S(0);
            for (std::int64_t j = 0; j < kk; ++j) acc += krow[j] * src[j];
            orow[t] += acc;
          }
        }
      }
    }
  }

  return finish<S>(
      std::move(out), {px, pk},
      [px, pk, batches, ci, co, len, kk, lo, stride](auto& self) {
        if (tracked(px)) px->ensure_grad();
        if (tracked(pk)) pk->ensure_grad();
        for (std::int64_t b = 0; b < batches; ++b) {
          const S* xb = px->data.data() + b * ci * len;
          const S* gb = self.grad.data() + b * co * lo;
          for (std::int64_t oc = 0; oc < co; ++oc) {
            const S* grow = gb + oc * lo;
            for (std::int64_t icn = 0; icn < ci; ++icn) {
              const S* xrow = xb + icn * len;
              const S* krow = pk->data.data() + (oc * ci + icn) * kk;
              S* gkrow =
                  tracked(pk) ? pk->grad.data() + (oc * ci + icn) * kk
                              : nullptr;
              S* gxrow =
                  tracked(px) ? px->grad.data() + b * ci * len + icn * len
                              : nullptr;
              if (stride == 1) {
                for (std::int64_t j = 0; j < kk; ++j) {
                  if (gkrow) {
                    const S* src = xrow + j;
                    S acc = S(0);
#pragma omp simd reduction(+ : acc)
                    for (std::int64_t t = 0; t < lo; ++t)
                      acc += grow[t] * src[t];
                    gkrow[j] += acc;
                  }
                  if (gxrow) {
                    const S w = krow[j];
                    S* dst = gxrow + j;
                    for (std::int64_t t = 0; t < lo; ++t)
                      dst[t] += w * grow[t];
                  }
                }
              } else {
                for (std::int64_t t = 0; t < lo; ++t) {
                  const S g = grow[t];
                  for (std::int64_t j = 0; j < kk; ++j) {
                    if (gkrow) gkrow[j] += g * xrow[t * stride + j];
                    if (gxrow) gxrow[t * stride + j] += g * krow[j];
                  }
                }
              }
            }
          }
        }
      });
}

// ---- conv2d ----------------------------------------------------------------

namespace {

struct Conv2dDims {
  std::int64_t batches, ci, h, w, co, kh, kw, pt, pl, ho, wo, stride;
  bool batched;
};

// The stride-1 kernels below work one output (or input) row at a time
// through a small scratch buffer so every tap hits L1 instead of
// re-streaming whole planes, and reductions carry an `omp simd` hint so
// they vectorize without global fast-math.

template <class S>
void conv2d_stride1(const Conv2dDims& d, const S* x, const S* k, S* out,
                    std::vector<S>& scratch) {
  const std::int64_t plane_in = d.h * d.w;
  const std::int64_t plane_out = d.ho * d.wo;
  scratch.assign(static_cast<size_t>(d.wo), S(0));
  S* buf = scratch.data();
  for (std::int64_t b = 0; b < d.batches; ++b) {
    const S* xb = x + b * d.ci * plane_in;
    for (std::int64_t oc = 0; oc < d.co; ++oc) {
      S* outp = out + (b * d.co + oc) * plane_out;
      for (std::int64_t hh = 0; hh < d.ho; ++hh) {
        std::fill_n(buf, d.wo, S(0));
        for (std::int64_t icn = 0; icn < d.ci; ++icn) {
          const S* inp = xb + icn * plane_in;
          const S* kp = k + (oc * d.ci + icn) * d.kh * d.kw;
          for (std::int64_t dh = 0; dh < d.kh; ++dh) {
            const std::int64_t hin = hh + dh - d.pt;
            if (hin < 0 || hin >= d.h) continue;
            const S* srow_base = inp + hin * d.w;
            for (std::int64_t dw = 0; dw < d.kw; ++dw) {
              const S kk = kp[dh * d.kw + dw];
              const std::int64_t woff = dw - d.pl;
              const std::int64_t w_lo = std::max<std::int64_t>(0, -woff);
              const std::int64_t w_hi = std::min(d.wo, d.w - woff);
              const S* srow = srow_base + woff;
#pragma omp simd
              for (std::int64_t ww = w_lo; ww < w_hi; ++ww)
                buf[ww] += kk * srow[ww];
            }
          }
        }
        std::copy_n(buf, d.wo, outp + hh * d.wo);
      }
    }
  }
}

// dx += k (*) dout, the transpose of the stride-1 forward walk.
template <class S>
void conv2d_stride1_dx(const Conv2dDims& d, const S* g, const S* k, S* dx,
                       std::vector<S>& scratch) {
  const std::int64_t plane_in = d.h * d.w;
  const std::int64_t plane_out = d.ho * d.wo;
  scratch.assign(static_cast<size_t>(d.w), S(0));
  S* buf = scratch.data();
  for (std::int64_t b = 0; b < d.batches; ++b) {
    const S* gb = g + b * d.co * plane_out;
    for (std::int64_t icn = 0; icn < d.ci; ++icn) {
      S* dxp = dx + (b * d.ci + icn) * plane_in;
      for (std::int64_t hin = 0; hin < d.h; ++hin) {
        std::fill_n(buf, d.w, S(0));
        for (std::int64_t oc = 0; oc < d.co; ++oc) {
          const S* gp = gb + oc * plane_out;
          const S* kp = k + (oc * d.ci + icn) * d.kh * d.kw;
          for (std::int64_t dh = 0; dh < d.kh; ++dh) {
            const std::int64_t hh = hin - dh + d.pt;  // source grad row
            if (hh < 0 || hh >= d.ho) continue;
            const S* grow_base = gp + hh * d.wo;
            for (std::int64_t dw = 0; dw < d.kw; ++dw) {
              const S kk = kp[dh * d.kw + dw];
              const std::int64_t woff = dw - d.pl;
              // dx[hin][win] += k * g[hh][win - woff]
              const std::int64_t w_lo = std::max<std::int64_t>(0, woff);
              const std::int64_t w_hi = std::min(d.w, d.wo + woff);
              const S* grow = grow_base - woff;
#pragma omp simd
              for (std::int64_t ww = w_lo; ww < w_hi; ++ww)
                buf[ww] += kk * grow[ww];
            }
          }
        }
        S* dxrow = dxp + hin * d.w;
#pragma omp simd
        for (std::int64_t ww = 0; ww < d.w; ++ww) dxrow[ww] += buf[ww];
      }
    }
  }
}

// ---- channels-last kernels for narrow planes --------------------------------
// At the tail of the pooling pyramid the feature maps are only a few columns
// wide, so the row-major kernels above degenerate into millions of 3..27
// element loops that spend everything on loop overhead. Below a width
// threshold we transpose each plane to (H, W, C) and make the innermost loop
// run over channels, which stay wide (32/64) all the way down.

constexpr std::int64_t kNarrowWidth = 256;
constexpr std::int64_t kNarrowMinChannels = 16;

inline bool narrow_plane(const Conv2dDims& d) {
  return d.stride == 1 && d.wo <= kNarrowWidth && d.ci >= kNarrowMinChannels &&
         d.co >= kNarrowMinChannels;
}

// One (C, H*W) plane -> (H*W, C).
template <class S>
void plane_to_hwc(const S* src, S* __restrict dst, std::int64_t c,
                  std::int64_t hw) {
  for (std::int64_t ic = 0; ic < c; ++ic) {
    const S* p = src + ic * hw;
    for (std::int64_t i = 0; i < hw; ++i) dst[i * c + ic] = p[i];
  }
}

template <class S>
void conv2d_narrow(const Conv2dDims& d, const S* x, const S* k, S* out) {
  const std::int64_t plane_in = d.h * d.w;
  const std::int64_t plane_out = d.ho * d.wo;
  const std::int64_t taps = d.kh * d.kw;
  // Kernel (Co,Ci,KH,KW) -> (Ci,KH,KW,Co): one broadcast input sample then
  // multiplies a contiguous run of output channels.
  std::vector<S> kr(static_cast<size_t>(d.ci * taps * d.co));
  for (std::int64_t oc = 0; oc < d.co; ++oc)
    for (std::int64_t ic = 0; ic < d.ci; ++ic)
      for (std::int64_t t = 0; t < taps; ++t)
        kr[(ic * taps + t) * d.co + oc] = k[(oc * d.ci + ic) * taps + t];
  std::vector<S> xt(static_cast<size_t>(plane_in * d.ci));
  std::vector<S> ot(static_cast<size_t>(plane_out * d.co));
  for (std::int64_t b = 0; b < d.batches; ++b) {
    plane_to_hwc(x + b * d.ci * plane_in, xt.data(), d.ci, plane_in);
    std::fill(ot.begin(), ot.end(), S(0));
    for (std::int64_t hh = 0; hh < d.ho; ++hh)
      for (std::int64_t ww = 0; ww < d.wo; ++ww) {
        S* __restrict orow = ot.data() + (hh * d.wo + ww) * d.co;
        for (std::int64_t dh = 0; dh < d.kh; ++dh) {
          const std::int64_t hin = hh + dh - d.pt;
          if (hin < 0 || hin >= d.h) continue;
          for (std::int64_t dw = 0; dw < d.kw; ++dw) {
            const std::int64_t win = ww + dw - d.pl;
            if (win < 0 || win >= d.w) continue;
            const S* xrow = xt.data() + (hin * d.w + win) * d.ci;
            const S* ktap = kr.data() + (dh * d.kw + dw) * d.co;
            for (std::int64_t ic = 0; ic < d.ci; ++ic) {
              const S xv = xrow[ic];
              const S* kv = ktap + ic * taps * d.co;
#pragma omp simd
              for (std::int64_t oc = 0; oc < d.co; ++oc) orow[oc] += xv * kv[oc];
            }
          }
        }
      }
    S* ob = out + b * d.co * plane_out;
    for (std::int64_t oc = 0; oc < d.co; ++oc) {
      S* __restrict op = ob + oc * plane_out;
      const S* src = ot.data() + oc;
      for (std::int64_t i = 0; i < plane_out; ++i) op[i] = src[i * d.co];
    }
  }
}

template <class S>
void conv2d_narrow_dx(const Conv2dDims& d, const S* g, const S* k, S* dx) {
  const std::int64_t plane_in = d.h * d.w;
  const std::int64_t plane_out = d.ho * d.wo;
  const std::int64_t taps = d.kh * d.kw;
  // Kernel (Co,Ci,KH,KW) -> (Co,KH,KW,Ci): one broadcast grad sample then
  // multiplies a contiguous run of input channels.
  std::vector<S> kt(static_cast<size_t>(d.co * taps * d.ci));
  for (std::int64_t oc = 0; oc < d.co; ++oc)
    for (std::int64_t ic = 0; ic < d.ci; ++ic)
      for (std::int64_t t = 0; t < taps; ++t)
        kt[(oc * taps + t) * d.ci + ic] = k[(oc * d.ci + ic) * taps + t];
  std::vector<S> gt(static_cast<size_t>(plane_out * d.co));
  std::vector<S> dxt(static_cast<size_t>(plane_in * d.ci));
  for (std::int64_t b = 0; b < d.batches; ++b) {
    plane_to_hwc(g + b * d.co * plane_out, gt.data(), d.co, plane_out);
    std::fill(dxt.begin(), dxt.end(), S(0));
    for (std::int64_t hh = 0; hh < d.ho; ++hh)
      for (std::int64_t ww = 0; ww < d.wo; ++ww) {
        const S* grow = gt.data() + (hh * d.wo + ww) * d.co;
        for (std::int64_t dh = 0; dh < d.kh; ++dh) {
          const std::int64_t hin = hh + dh - d.pt;
          if (hin < 0 || hin >= d.h) continue;
          for (std::int64_t dw = 0; dw < d.kw; ++dw) {
            const std::int64_t win = ww + dw - d.pl;
            if (win < 0 || win >= d.w) continue;
            S* __restrict dxrow = dxt.data() + (hin * d.w + win) * d.ci;
            const S* ktap = kt.data() + (dh * d.kw + dw) * d.ci;
            for (std::int64_t oc = 0; oc < d.co; ++oc) {
              const S gv = grow[oc];
              const S* kv = ktap + oc * taps * d.ci;
#pragma omp simd
              for (std::int64_t ic = 0; ic < d.ci; ++ic)
                dxrow[ic] += gv * kv[ic];
            }
          }
        }
      }
    // Accumulate the (H, W, C) scratch back into the (C, H, W) grad plane.
    S* dxb = dx + b * d.ci * plane_in;
    for (std::int64_t ic = 0; ic < d.ci; ++ic) {
      S* __restrict dp = dxb + ic * plane_in;
      const S* src = dxt.data() + ic;
      for (std::int64_t i = 0; i < plane_in; ++i) dp[i] += src[i * d.ci];
    }
  }
}

template <class S>
void conv2d_narrow_dk(const Conv2dDims& d, const S* g, const S* x, S* dk) {
  const std::int64_t plane_in = d.h * d.w;
  const std::int64_t plane_out = d.ho * d.wo;
  const std::int64_t taps = d.kh * d.kw;
  std::vector<S> gt(static_cast<size_t>(plane_out * d.co));
  std::vector<S> xt(static_cast<size_t>(plane_in * d.ci));
  // Accumulate into a (KH, KW, Ci, Co) scratch; with the tap loop outermost
  // each (Ci, Co) slab stays cache-resident across a whole plane sweep.
  std::vector<S> dkt(static_cast<size_t>(taps * d.ci * d.co), S(0));
  for (std::int64_t b = 0; b < d.batches; ++b) {
    plane_to_hwc(g + b * d.co * plane_out, gt.data(), d.co, plane_out);
    plane_to_hwc(x + b * d.ci * plane_in, xt.data(), d.ci, plane_in);
    for (std::int64_t dh = 0; dh < d.kh; ++dh) {
      const std::int64_t h_lo = std::max<std::int64_t>(0, d.pt - dh);
      const std::int64_t h_hi = std::min(d.ho, d.h + d.pt - dh);
      for (std::int64_t dw = 0; dw < d.kw; ++dw) {
        const std::int64_t w_lo = std::max<std::int64_t>(0, d.pl - dw);
        const std::int64_t w_hi = std::min(d.wo, d.w + d.pl - dw);
        S* slab = dkt.data() + (dh * d.kw + dw) * d.ci * d.co;
        for (std::int64_t hh = h_lo; hh < h_hi; ++hh) {
          const std::int64_t hin = hh + dh - d.pt;
          for (std::int64_t ww = w_lo; ww < w_hi; ++ww) {
            const std::int64_t win = ww + dw - d.pl;
            const S* grow = gt.data() + (hh * d.wo + ww) * d.co;
            const S* xrow = xt.data() + (hin * d.w + win) * d.ci;
            for (std::int64_t ic = 0; ic < d.ci; ++ic) {
              const S xv = xrow[ic];
              S* __restrict dst = slab + ic * d.co;
#pragma omp simd
              for (std::int64_t oc = 0; oc < d.co; ++oc)
                dst[oc] += xv * grow[oc];
            }
          }
        }
      }
    }
  }
  for (std::int64_t oc = 0; oc < d.co; ++oc)
    for (std::int64_t ic = 0; ic < d.ci; ++ic)
      for (std::int64_t t = 0; t < taps; ++t)
        dk[(oc * d.ci + ic) * taps + t] += dkt[(t * d.ci + ic) * d.co + oc];
}

// dk += x (*) dout.
template <class S>
void conv2d_stride1_dk(const Conv2dDims& d, const S* g, const S* x, S* dk,
                       std::vector<S>& scratch) {
  const std::int64_t plane_in = d.h * d.w;
  const std::int64_t plane_out = d.ho * d.wo;
  const std::int64_t taps = d.kh * d.kw;
  scratch.assign(static_cast<size_t>(d.ci * taps), S(0));
  S* acc = scratch.data();
  for (std::int64_t b = 0; b < d.batches; ++b) {
    const S* xb = x + b * d.ci * plane_in;
    for (std::int64_t oc = 0; oc < d.co; ++oc) {
      const S* gp = g + (b * d.co + oc) * plane_out;
      std::fill_n(acc, d.ci * taps, S(0));
      for (std::int64_t hh = 0; hh < d.ho; ++hh) {
        const S* grow = gp + hh * d.wo;
        for (std::int64_t icn = 0; icn < d.ci; ++icn) {
          const S* inp = xb + icn * plane_in;
          for (std::int64_t dh = 0; dh < d.kh; ++dh) {
            const std::int64_t hin = hh + dh - d.pt;
            if (hin < 0 || hin >= d.h) continue;
            const S* srow_base = inp + hin * d.w;
            for (std::int64_t dw = 0; dw < d.kw; ++dw) {
              const std::int64_t woff = dw - d.pl;
              const std::int64_t w_lo = std::max<std::int64_t>(0, -woff);
              const std::int64_t w_hi = std::min(d.wo, d.w - woff);
              const S* srow = srow_base + woff;
              S dot = S(0);
#pragma omp simd reduction(+ : dot)
              for (std::int64_t ww = w_lo; ww < w_hi; ++ww)
                dot += grow[ww] * srow[ww];
              acc[icn * taps + dh * d.kw + dw] += dot;
            }
          }
        }
      }
      S* dkp = dk + oc * d.ci * taps;
      for (std::int64_t i = 0; i < d.ci * taps; ++i) dkp[i] += acc[i];
    }
  }
}

}  // namespace

template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& k,
                  std::int64_t stride, Pad padding) {
  check_defined(x, "conv2d");
  check_defined(k, "conv2d");
  require(x.rank() == 3 || x.rank() == 4, ErrorKind::dimension,
          concat_msg("conv2d: input must be (C,H,W) or (B,C,H,W), got ",
                     shape_str(x.shape())));
  require(k.rank() == 4, ErrorKind::dimension,
          concat_msg("conv2d: kernel must be (Co,Ci,KH,KW), got ",
                     shape_str(k.shape())));
  require(stride >= 1, ErrorKind::contract, "conv2d: stride must be >= 1");
  require(padding == Pad::valid || stride == 1, ErrorKind::contract,
          "conv2d: same padding requires stride 1");

  Conv2dDims d;
  d.batched = x.rank() == 4;
  d.batches = d.batched ? x.shape()[0] : 1;
  d.ci = x.shape()[d.batched ? 1 : 0];
  d.h = x.shape()[d.batched ? 2 : 1];
  d.w = x.shape()[d.batched ? 3 : 2];
  d.co = k.shape()[0];
  d.kh = k.shape()[2];
  d.kw = k.shape()[3];
  d.stride = stride;
  require(k.shape()[1] == d.ci, ErrorKind::dimension,
          concat_msg("conv2d: input has ", d.ci, " channels, kernel expects ",
                     k.shape()[1]));
  if (padding == Pad::same) {
    d.pt = (d.kh - 1) / 2;  // even extents put the extra pad on the trailing side
    d.pl = (d.kw - 1) / 2;
    d.ho = d.h;
    d.wo = d.w;
  } else {
    require(d.h >= d.kh && d.w >= d.kw, ErrorKind::dimension,
            concat_msg("conv2d: input ", shape_str(x.shape()),
                       " smaller than kernel ", shape_str(k.shape())));
    d.pt = d.pl = 0;
    d.ho = (d.h - d.kh) / stride + 1;
    d.wo = (d.w - d.kw) / stride + 1;
  }

  auto px = x.node(), pk = k.node();
  Shape out_shape = d.batched ? Shape{d.batches, d.co, d.ho, d.wo}
                              : Shape{d.co, d.ho, d.wo};
  auto out = new_node<S>(std::move(out_shape), "conv2d");

  if (stride == 1 && narrow_plane(d)) {
    conv2d_narrow(d, px->data.data(), pk->data.data(), out->data.data());
  } else if (stride == 1) {
    std::vector<S> scratch;
    conv2d_stride1(d, px->data.data(), pk->data.data(), out->data.data(),
                   scratch);
  } else {
    // Plain strided walk; only exercised off the main model path.
    for (std::int64_t b = 0; b < d.batches; ++b)
      for (std::int64_t oc = 0; oc < d.co; ++oc)
        for (std::int64_t hh = 0; hh < d.ho; ++hh)
          for (std::int64_t ww = 0; ww < d.wo; ++ww) {
            S acc = S(0);
            for (std::int64_t icn = 0; icn < d.ci; ++icn)
              for (std::int64_t dh = 0; dh < d.kh; ++dh)
                for (std::int64_t dw = 0; dw < d.kw; ++dw)
                  acc += pk->data[((oc * d.ci + icn) * d.kh + dh) * d.kw + dw] *
                         px->data[((b * d.ci + icn) * d.h + hh * stride + dh) *
                                      d.w +
                                  ww * stride + dw];
            out->data[((b * d.co + oc) * d.ho + hh) * d.wo + ww] = acc;
          }
  }

  return finish<S>(std::move(out), {px, pk}, [px, pk, d](auto& self) {
    if (tracked(px)) px->ensure_grad();
    if (tracked(pk)) pk->ensure_grad();
    if (d.stride == 1 && narrow_plane(d)) {
      if (tracked(px))
        conv2d_narrow_dx(d, self.grad.data(), pk->data.data(),
                         px->grad.data());
      if (tracked(pk))
        conv2d_narrow_dk(d, self.grad.data(), px->data.data(),
                         pk->grad.data());
    } else if (d.stride == 1) {
      std::vector<S> scratch;
      if (tracked(px))
        conv2d_stride1_dx(d, self.grad.data(), pk->data.data(),
                          px->grad.data(), scratch);
      if (tracked(pk))
        conv2d_stride1_dk(d, self.grad.data(), px->data.data(),
                          pk->grad.data(), scratch);
    } else {
      for (std::int64_t b = 0; b < d.batches; ++b)
        for (std::int64_t oc = 0; oc < d.co; ++oc)
          for (std::int64_t hh = 0; hh < d.ho; ++hh)
            for (std::int64_t ww = 0; ww < d.wo; ++ww) {
              const S g =
                  self.grad[((b * d.co + oc) * d.ho + hh) * d.wo + ww];
              for (std::int64_t icn = 0; icn < d.ci; ++icn)
                for (std::int64_t dh = 0; dh < d.kh; ++dh)
                  for (std::int64_t dw = 0; dw < d.kw; ++dw) {
                    const std::int64_t xi =
                        ((b * d.ci + icn) * d.h + hh * d.stride + dh) * d.w +
                        ww * d.stride + dw;
                    const std::int64_t ki =
                        ((oc * d.ci + icn) * d.kh + dh) * d.kw + dw;
                    if (tracked(pk)) pk->grad[ki] += g * px->data[xi];
                    if (tracked(px)) px->grad[xi] += g * pk->data[ki];
                  }
            }
    }
  });
}

// ---- maxpool2d ---------------------------------------------------------

template <class S>
TensorT<S> maxpool2d(const TensorT<S>& x, std::int64_t ph, std::int64_t pw) {
  check_defined(x, "maxpool2d");
  require(x.rank() >= 2, ErrorKind::dimension,
          concat_msg("maxpool2d: need at least 2 axes, got ",
                     shape_str(x.shape())));
  require(ph >= 1 && pw >= 1, ErrorKind::contract,
          "maxpool2d: window must be >= 1");
  const std::int64_t h = x.shape()[x.rank() - 2];
  const std::int64_t w = x.shape()[x.rank() - 1];
  const std::int64_t ho = h / ph;
  const std::int64_t wo = w / pw;
  require(ho >= 1 && wo >= 1, ErrorKind::dimension,
          concat_msg("maxpool2d: window (", ph, ", ", pw,
                     ") larger than input ", shape_str(x.shape())));
  auto px = x.node();
  Shape out_shape = px->shape;
  out_shape[out_shape.size() - 2] = ho;
  out_shape[out_shape.size() - 1] = wo;
  auto out = new_node<S>(std::move(out_shape), "maxpool2d");
  const std::int64_t planes = px->numel() / (h * w);
  // Flat input index of each window's max; ties keep the first in row-major
  // scan order.
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out->data.size());
  for (std::int64_t p = 0; p < planes; ++p) {
    const S* src = px->data.data() + p * h * w;
    S* dst = out->data.data() + p * ho * wo;
    std::int64_t* am = argmax->data() + p * ho * wo;
    for (std::int64_t oh = 0; oh < ho; ++oh)
      for (std::int64_t ow = 0; ow < wo; ++ow) {
        std::int64_t best = (oh * ph) * w + ow * pw;
        S best_v = src[best];
        for (std::int64_t dh = 0; dh < ph; ++dh)
          for (std::int64_t dw = 0; dw < pw; ++dw) {
            const std::int64_t idx = (oh * ph + dh) * w + ow * pw + dw;
            if (src[idx] > best_v) {
              best_v = src[idx];
              best = idx;
            }
          }
        dst[oh * wo + ow] = best_v;
        am[oh * wo + ow] = p * h * w + best;
      }
  }
  return finish<S>(std::move(out), {px}, [px, argmax](auto& self) {
    px->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      px->grad[(*argmax)[i]] += self.grad[i];
  });
}

// ---- batch norm --------------------------------------------------------

template <class S>
TensorT<S> batch_norm(const TensorT<S>& x, int axis, const TensorT<S>& gamma,
                      const TensorT<S>& beta, std::vector<S>& running_mean,
                      std::vector<S>& running_var, bool training, S momentum,
                      S eps) {
  check_defined(x, "batch_norm");
  check_defined(gamma, "batch_norm");
  check_defined(beta, "batch_norm");
  const int a = norm_axis(axis, x.rank(), "batch_norm");
  const std::int64_t channels = x.shape()[a];
  require(gamma.rank() == 1 && gamma.numel() == channels, ErrorKind::dimension,
          concat_msg("batch_norm: gamma shape ", shape_str(gamma.shape()),
                     " for ", channels, " channels"));
  require(beta.rank() == 1 && beta.numel() == channels, ErrorKind::dimension,
          concat_msg("batch_norm: beta shape ", shape_str(beta.shape()),
                     " for ", channels, " channels"));
  require(static_cast<std::int64_t>(running_mean.size()) == channels &&
              static_cast<std::int64_t>(running_var.size()) == channels,
          ErrorKind::dimension, "batch_norm: running buffers sized wrong");

  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  auto out = new_node<S>(px->shape, "batch_norm");
  const AxisSpan sp = axis_span(px->shape, a);
  const std::int64_t n = sp.outer * sp.inner;  // population per channel
  require(n > 0, ErrorKind::contract, "batch_norm: empty input");

  // Per-channel center/scale used by this call (batch stats when training,
  // running stats otherwise); kept for the backward pass.
  auto means = std::make_shared<std::vector<S>>(channels);
  auto invstd = std::make_shared<std::vector<S>>(channels);

  for (std::int64_t c = 0; c < channels; ++c) {
    S m, v;
    if (training) {
      S acc = S(0);
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        const S* row = px->data.data() + (o * sp.axis_dim + c) * sp.inner;
#pragma omp simd reduction(+ : acc)
        for (std::int64_t i = 0; i < sp.inner; ++i) acc += row[i];
      }
      m = acc / static_cast<S>(n);
      S acc2 = S(0);
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        const S* row = px->data.data() + (o * sp.axis_dim + c) * sp.inner;
#pragma omp simd reduction(+ : acc2)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const S dlt = row[i] - m;
          acc2 += dlt * dlt;
        }
      }
      v = acc2 / static_cast<S>(n);  // biased, used for normalization
      const S v_run =
          n > 1 ? acc2 / static_cast<S>(n - 1) : v;  // unbiased estimate
      running_mean[c] = (S(1) - momentum) * running_mean[c] + momentum * m;
      running_var[c] = (S(1) - momentum) * running_var[c] + momentum * v_run;
    } else {
      m = running_mean[c];
      v = running_var[c];
    }
    (*means)[c] = m;
    (*invstd)[c] = S(1) / std::sqrt(v + eps);
  }

  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t c = 0; c < channels; ++c) {
      const std::int64_t base = (o * sp.axis_dim + c) * sp.inner;
      const S m = (*means)[c];
      const S is = (*invstd)[c];
      const S g = pg->data[c];
      const S bt = pb->data[c];
      for (std::int64_t i = 0; i < sp.inner; ++i)
        out->data[base + i] = g * (px->data[base + i] - m) * is + bt;
    }

  return finish<S>(
      std::move(out), {px, pg, pb},
      [px, pg, pb, sp, channels, n, means, invstd, training](auto& self) {
        if (tracked(px)) px->ensure_grad();
        if (tracked(pg)) pg->ensure_grad();
        if (tracked(pb)) pb->ensure_grad();
        for (std::int64_t c = 0; c < channels; ++c) {
          const S m = (*means)[c];
          const S is = (*invstd)[c];
          S gsum = S(0), gxsum = S(0);
          for (std::int64_t o = 0; o < sp.outer; ++o) {
            const std::int64_t base = (o * sp.axis_dim + c) * sp.inner;
            const S* grow = self.grad.data() + base;
            const S* xrow = px->data.data() + base;
#pragma omp simd reduction(+ : gsum, gxsum)
            for (std::int64_t i = 0; i < sp.inner; ++i) {
              gsum += grow[i];
              gxsum += grow[i] * (xrow[i] - m) * is;
            }
          }
          if (tracked(pb)) pb->grad[c] += gsum;
          if (tracked(pg)) pg->grad[c] += gxsum;
          if (tracked(px)) {
            const S gm = pg->data[c];
            if (training) {
              // Batch stats depend on x, hence the centering terms.
              const S inv_n = S(1) / static_cast<S>(n);
              for (std::int64_t o = 0; o < sp.outer; ++o) {
                const std::int64_t base = (o * sp.axis_dim + c) * sp.inner;
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                  const S xh = (px->data[base + i] - m) * is;
                  px->grad[base + i] +=
                      gm * is *
                      (self.grad[base + i] - gsum * inv_n - xh * gxsum * inv_n);
                }
              }
            } else {
              for (std::int64_t o = 0; o < sp.outer; ++o) {
                const std::int64_t base = (o * sp.axis_dim + c) * sp.inner;
                for (std::int64_t i = 0; i < sp.inner; ++i)
                  px->grad[base + i] += gm * is * self.grad[base + i];
              }
            }
          }
        }
      });
}

// ---- init ----------------------------------------------------------------

template <class S>
void init_uniform(TensorT<S>& t, double bound, Rng& rng) {
  check_defined(t, "init_uniform");
  for (auto& v : t.data()) v = static_cast<S>(rng.uniform(-bound, bound));
}

template <class S>
void init_fan_in(TensorT<S>& t, std::int64_t fan_in, Rng& rng) {
  require(fan_in > 0, ErrorKind::contract, "init_fan_in: fan_in must be > 0");
  init_uniform(t, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

// ---- layers ----------------------------------------------------------------

template <class S>
DenseT<S>::DenseT(std::int64_t d_in, std::int64_t d_out, Rng& rng) {
  require(d_in > 0 && d_out > 0, ErrorKind::contract,
          "dense: dimensions must be positive");
  weight = TensorT<S>::zeros({d_in, d_out}, /*requires_grad=*/true);
  bias = TensorT<S>::zeros({d_out}, /*requires_grad=*/true);
  init_fan_in(weight, d_in, rng);
  init_fan_in(bias, d_in, rng);
}

template <class S>
TensorT<S> DenseT<S>::forward(const TensorT<S>& x) const {
  const std::int64_t d_in = weight.dim(0);
  require(x.rank() >= 1 && x.shape().back() == d_in, ErrorKind::dimension,
          concat_msg("dense: input ", shape_str(x.shape()),
                     " does not end in ", d_in));
  if (x.rank() == 2 || x.rank() == 3)
    return add_axis(matmul(x, weight), -1, bias);
  // Rare ranks go through a flatten/restore pair.
  Shape out_shape = x.shape();
  out_shape.back() = weight.dim(1);
  auto flat = reshape(x, {x.numel() / d_in, d_in});
  return reshape(add_axis(matmul(flat, weight), -1, bias),
                 std::move(out_shape));
}

template <class S>
Conv2dLayerT<S>::Conv2dLayerT(std::int64_t ci, std::int64_t co,
                              std::int64_t kh, std::int64_t kw, Pad pad,
                              Rng& rng)
    : padding(pad) {
  require(ci > 0 && co > 0 && kh > 0 && kw > 0, ErrorKind::contract,
          "conv2d layer: dimensions must be positive");
  weight = TensorT<S>::zeros({co, ci, kh, kw}, /*requires_grad=*/true);
  bias = TensorT<S>::zeros({co}, /*requires_grad=*/true);
  const std::int64_t fan_in = ci * kh * kw;
  init_fan_in(weight, fan_in, rng);
  init_fan_in(bias, fan_in, rng);
}

template <class S>
TensorT<S> Conv2dLayerT<S>::forward(const TensorT<S>& x) const {
  auto y = conv2d(x, weight, /*stride=*/1, padding);
  return add_axis(y, y.rank() - 3, bias);  // channel axis
}

template <class S>
BatchNormT<S>::BatchNormT(std::int64_t channels, int axis_from_back)
    : axis(axis_from_back) {
  require(channels > 0, ErrorKind::contract,
          "batch_norm layer: channels must be positive");
  require(axis_from_back < 0, ErrorKind::contract,
          "batch_norm layer: axis is counted from the back (negative)");
  gamma = TensorT<S>::full({channels}, S(1), /*requires_grad=*/true);
  beta = TensorT<S>::zeros({channels}, /*requires_grad=*/true);
  running_mean.assign(static_cast<size_t>(channels), S(0));
  running_var.assign(static_cast<size_t>(channels), S(1));
}

template <class S>
TensorT<S> BatchNormT<S>::forward(const TensorT<S>& x, bool training) {
  return batch_norm(x, axis, gamma, beta, running_mean, running_var, training,
                    momentum, eps);
}

#define RAWGAT_INSTANTIATE_NN_OPS(S)                                          \
  template struct DenseT<S>;                                                  \
  template struct Conv2dLayerT<S>;                                            \
  template struct BatchNormT<S>;                                              \
  template TensorT<S> conv1d<S>(const TensorT<S>&, const TensorT<S>&,         \
                                std::int64_t);                                \
  template TensorT<S> conv2d<S>(const TensorT<S>&, const TensorT<S>&,         \
                                std::int64_t, Pad);                           \
  template TensorT<S> maxpool2d<S>(const TensorT<S>&, std::int64_t,           \
                                   std::int64_t);                             \
  template TensorT<S> batch_norm<S>(const TensorT<S>&, int, const TensorT<S>&,\
                                    const TensorT<S>&, std::vector<S>&,       \
                                    std::vector<S>&, bool, S, S);             \
  template void init_uniform<S>(TensorT<S>&, double, Rng&);                   \
  template void init_fan_in<S>(TensorT<S>&, std::int64_t, Rng&);

RAWGAT_INSTANTIATE_NN_OPS(float)
RAWGAT_INSTANTIATE_NN_OPS(double)
#undef RAWGAT_INSTANTIATE_NN_OPS

}  // namespace rawgat
