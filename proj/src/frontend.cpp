#include "rawgat/frontend.hpp"

#include <cmath>
#include <vector>

namespace rawgat {

double mel_from_hz(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double hz_from_mel(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

namespace {

double sinc(double x) { return x == 0.0 ? 1.0 : std::sin(x) / x; }

// Ideal band-pass impulse response for normalized band (g1, g2), Hamming
// windowed, length K taps centered on (K-1)/2.
std::vector<double> windowed_band_pass(double g1, double g2, std::int64_t k_len) {
  std::vector<double> h(static_cast<size_t>(k_len));
  const double c = static_cast<double>(k_len - 1) / 2.0;
  constexpr double kPi = 3.14159265358979323846;
  for (std::int64_t n = 0; n < k_len; ++n) {
    const double t = static_cast<double>(n) - c;
    const double band = 2.0 * g2 * sinc(2.0 * kPi * g2 * t) -
                        2.0 * g1 * sinc(2.0 * kPi * g1 * t);
    const double window =
        0.54 - 0.46 * std::cos(2.0 * kPi * static_cast<double>(n) /
                               static_cast<double>(k_len - 1));
    h[static_cast<size_t>(n)] = band * window;
  }
  return h;
}

// Removes the 0 Hz and Nyquist components exactly: subtracts a + b(-1)^n
// with a, b solved from the two constraint sums. For odd K both correction
// sequences are symmetric about the center, so linear phase is preserved.
void null_dc_and_nyquist(std::vector<double>& h) {
  const double len = static_cast<double>(h.size());
  double sum = 0.0, alt = 0.0, sigma = 0.0;
  for (size_t n = 0; n < h.size(); ++n) {
    const double sign = (n % 2 == 0) ? 1.0 : -1.0;
    sum += h[n];
    alt += sign * h[n];
    sigma += sign;
  }
  const double det = len * len - sigma * sigma;
  const double a = (len * sum - sigma * alt) / det;
  const double b = (len * alt - sigma * sum) / det;
  for (size_t n = 0; n < h.size(); ++n)
    h[n] -= a + ((n % 2 == 0) ? b : -b);
}

// Peak DFT magnitude over a dense frequency grid up to Nyquist.
double peak_response(const std::vector<double>& h) {
  constexpr int kGrid = 4096;
  constexpr double kPi = 3.14159265358979323846;
  double peak = 0.0;
  for (int g = 0; g <= kGrid; ++g) {
    // Normalized frequency in [0, 0.5].
    const double f = 0.5 * static_cast<double>(g) / static_cast<double>(kGrid);
    double re = 0.0, im = 0.0;
    for (size_t n = 0; n < h.size(); ++n) {
      const double phase = 2.0 * kPi * f * static_cast<double>(n);
      re += h[n] * std::cos(phase);
      im -= h[n] * std::sin(phase);
    }
    peak = std::max(peak, std::hypot(re, im));
  }
  return peak;
}

}  // namespace

template <class S>
SincFrontendT<S>::SincFrontendT(std::int64_t num_filters,
                                std::int64_t kernel_length,
                                std::int64_t sample_rate_hz,
                                std::int64_t input_length_samples)
    : bn(1, -3), sample_rate(sample_rate_hz), input_length(input_length_samples) {
  require(num_filters >= 1, ErrorKind::contract,
          "sinc frontend: need at least one filter");
  require(kernel_length >= 3 && kernel_length % 2 == 1, ErrorKind::contract,
          "sinc frontend: kernel length must be odd and >= 3");
  require(sample_rate > 0, ErrorKind::contract,
          "sinc frontend: sample rate must be positive");
  require(input_length >= kernel_length + 2, ErrorKind::contract,
          "sinc frontend: input length too short for the kernel");

  const double nyquist = static_cast<double>(sample_rate) / 2.0;
  const double mel_max = mel_from_hz(nyquist);
  std::vector<double> points(static_cast<size_t>(num_filters) + 2);
  for (size_t i = 0; i < points.size(); ++i)
    points[i] = hz_from_mel(mel_max * static_cast<double>(i) /
                            static_cast<double>(points.size() - 1));

  kernels = TensorT<S>::zeros({num_filters, 1, kernel_length});
  band_edges.resize(static_cast<size_t>(num_filters));
  for (std::int64_t k = 0; k < num_filters; ++k) {
    // Clamp keeps the first cut-in strictly positive.
    const double f1 = std::max(points[static_cast<size_t>(k)], 1.0);
    const double f2 = points[static_cast<size_t>(k) + 2];
    require(f1 < f2 && f2 <= nyquist + 1e-9, ErrorKind::contract,
            concat_msg("sinc frontend: degenerate band ", f1, "..", f2));
    band_edges[static_cast<size_t>(k)] = {f1, f2};

    auto h = windowed_band_pass(f1 / static_cast<double>(sample_rate),
                                f2 / static_cast<double>(sample_rate),
                                kernel_length);
    null_dc_and_nyquist(h);
    const double peak = peak_response(h);
    require(peak > 0.0, ErrorKind::numeric,
            "sinc frontend: degenerate all-zero kernel");
    for (std::int64_t n = 0; n < kernel_length; ++n)
      kernels.data()[k * kernel_length + n] =
          static_cast<S>(h[static_cast<size_t>(n)] / peak);
  }
}

template <class S>
TensorT<S> SincFrontendT<S>::forward(const TensorT<S>& wave, bool training,
                                     std::vector<TensorT<S>>* stages) {
  require(wave.defined() && (wave.rank() == 1 || wave.rank() == 2),
          ErrorKind::dimension,
          "sinc frontend: wave must be (L) or (B, L)");
  require(wave.dim(-1) == input_length, ErrorKind::contract,
          concat_msg("sinc frontend: expected ", input_length,
                     " samples, got ", wave.dim(-1)));
  const bool batched = wave.rank() == 2;
  const std::int64_t batch = batched ? wave.dim(0) : 1;

  auto x = reshape(wave, {batch, 1, input_length});
  auto filtered = conv1d(x, kernels);  // (B, F, L - K + 1)
  auto stacked = reshape(filtered, {batch, 1, num_filters(), filtered.dim(-1)});
  auto pooled = maxpool2d(stacked, 3, 3);  // (B, 1, F/3, W)
  if (stages) {
    stages->push_back(filtered);
    stages->push_back(stacked);
    stages->push_back(pooled);
  }
  auto out = selu(bn.forward(pooled, training));
  if (!batched)
    out = reshape(out, {1, out.dim(-2), out.dim(-1)});
  return out;
}

#define RAWGAT_INSTANTIATE_FRONTEND_OPS(S) template struct SincFrontendT<S>;

RAWGAT_INSTANTIATE_FRONTEND_OPS(float)
RAWGAT_INSTANTIATE_FRONTEND_OPS(double)
#undef RAWGAT_INSTANTIATE_FRONTEND_OPS

}  // namespace rawgat
